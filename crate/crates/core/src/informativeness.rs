//! Informativeness coefficient estimation: the BCE gap between a
//! confounder-only logistic regression and one fit on the confounder plus
//! lexicon features, with the three macro-F1 columns backing it.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::classifiers::Metrics;
use crate::corpus::LabeledExample;
use crate::error::{CoreError, Result};
use crate::explanations::Lexicon;
use crate::logistic::{self, LogisticFit};
use crate::textrep::{ngrams, tokenize};

/// Which splits the regressions are fit and evaluated on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitProtocol {
    pub fit_split: String,
    pub eval_split: String,
}

impl Default for SplitProtocol {
    fn default() -> Self {
        SplitProtocol {
            fit_split: "train".to_string(),
            eval_split: "test".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IlConfig {
    pub l2: f64,
    /// Use occurrence counts instead of binary presence for lexicon features.
    pub count_features: bool,
    pub protocol: SplitProtocol,
}

impl Default for IlConfig {
    fn default() -> Self {
        IlConfig {
            l2: 1.0,
            count_features: false,
            protocol: SplitProtocol::default(),
        }
    }
}

/// Examples plus aligned pooled confounder embeddings for one split.
pub struct IlSplit<'a> {
    pub examples: &'a [LabeledExample],
    pub confounders: &'a [Vec<f64>],
}

impl IlSplit<'_> {
    fn validate(&self, name: &str) -> Result<()> {
        if self.examples.is_empty() {
            return Err(CoreError::EmptyInput(format!("{name} examples")));
        }
        if self.examples.len() != self.confounders.len() {
            return Err(CoreError::ShapeMismatch {
                expected: format!("{} confounder embeddings", self.examples.len()),
                got: format!("{}", self.confounders.len()),
            });
        }
        Ok(())
    }
}

/// The informativeness report: the coefficient, the two BCEs behind it, and
/// the macro-F1 of the text-only, confounder-only and concatenated models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IlReport {
    pub i_l: f64,
    pub bce_c: f64,
    pub bce_lc: f64,
    pub f1_text: f64,
    pub f1_conf: f64,
    pub f1_both: f64,
    pub lexicon_ref: String,
    pub lexicon_k: usize,
    pub task: String,
    pub split_protocol: SplitProtocol,
    pub warnings: Vec<String>,
}

fn standardize_stats(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let dim = rows.first().map(|r| r.len()).unwrap_or(0);
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut std = vec![0.0; dim];
    for r in rows {
        for ((s, v), m) in std.iter_mut().zip(r.iter()).zip(mean.iter()) {
            *s += (v - m) * (v - m);
        }
    }
    for s in std.iter_mut() {
        *s = (*s / n).sqrt();
        if *s == 0.0 {
            *s = 1.0;
        }
    }
    (mean, std)
}

fn apply_standardize(row: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    row.iter()
        .zip(mean.iter())
        .zip(std.iter())
        .map(|((v, m), s)| (v - m) / s)
        .collect()
}

/// Canonical (sorted, deduplicated) lexicon word set, so the report is
/// invariant to lexicon word order and duplication.
fn lexicon_words(lexicon: &Lexicon) -> Vec<String> {
    let set: BTreeSet<String> = lexicon.words().map(|w| w.to_string()).collect();
    set.into_iter().collect()
}

fn text_features(ex: &LabeledExample, words: &[String], counts: bool) -> Vec<f64> {
    let max_n = words
        .iter()
        .map(|w| w.split(' ').count())
        .max()
        .unwrap_or(1);
    let mut grams: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    for part in ex.treatment_parts() {
        for g in ngrams(&tokenize(part), max_n) {
            *grams.entry(g).or_insert(0) += 1;
        }
    }
    words
        .iter()
        .map(|w| {
            let c = grams.get(w).copied().unwrap_or(0);
            if counts {
                c as f64
            } else {
                (c > 0) as u8 as f64
            }
        })
        .collect()
}

struct FittedColumn {
    bce: f64,
    f1: f64,
}

fn fit_and_eval(
    fit_x: &[Vec<f64>],
    fit_y: &[u8],
    eval_x: &[Vec<f64>],
    eval_y: &[u8],
    l2: f64,
) -> Result<(LogisticFit<f64>, FittedColumn)> {
    let model = logistic::fit(fit_x, fit_y, l2, 300, 1e-9)?;
    let bce = logistic::mean_bce(&model, eval_x, eval_y);
    let preds: Vec<u8> = eval_x
        .iter()
        .map(|x| (logistic::predict_proba(&model, x) > 0.5) as u8)
        .collect();
    let metrics = Metrics::from_preds(eval_y, &preds);
    Ok((
        model,
        FittedColumn {
            bce,
            f1: metrics.macro_f1,
        },
    ))
}

/// L2-regularized logistic regression fit; re-exported here because the
/// estimator contract lives with the informativeness module.
pub fn fit_logistic(
    features: &[Vec<f64>],
    labels: &[u8],
    l2: f64,
) -> Result<LogisticFit<f64>> {
    logistic::fit(features, labels, l2, 300, 1e-9)
}

/// Estimate the informativeness coefficient of a lexicon.
///
/// Three regressions are fit on the fit split: lexicon features only,
/// standardized confounder embedding only, and their concatenation. BCEs and
/// macro-F1s are reported on the eval split; i_l = bce_c - bce_lc.
pub fn informativeness(
    lexicon: &Lexicon,
    task: &str,
    fit: &IlSplit,
    eval: &IlSplit,
    config: &IlConfig,
) -> Result<IlReport> {
    fit.validate("fit")?;
    eval.validate("eval")?;
    let mut warnings = Vec::new();

    let words = lexicon_words(lexicon);
    let fit_text: Vec<Vec<f64>> = fit
        .examples
        .iter()
        .map(|ex| text_features(ex, &words, config.count_features))
        .collect();
    let eval_text: Vec<Vec<f64>> = eval
        .examples
        .iter()
        .map(|ex| text_features(ex, &words, config.count_features))
        .collect();
    if !words.is_empty() && eval_text.iter().all(|row| row.iter().all(|&v| v == 0.0)) {
        warnings.push("lexicon words are disjoint from all eval texts".to_string());
    }

    let (mean, std) = standardize_stats(fit.confounders);
    let fit_conf: Vec<Vec<f64>> = fit
        .confounders
        .iter()
        .map(|c| apply_standardize(c, &mean, &std))
        .collect();
    let eval_conf: Vec<Vec<f64>> = eval
        .confounders
        .iter()
        .map(|c| apply_standardize(c, &mean, &std))
        .collect();

    let concat = |text: &[Vec<f64>], conf: &[Vec<f64>]| -> Vec<Vec<f64>> {
        text.iter()
            .zip(conf.iter())
            .map(|(t, c)| {
                let mut row = c.clone();
                row.extend_from_slice(t);
                row
            })
            .collect()
    };
    let fit_both = concat(&fit_text, &fit_conf);
    let eval_both = concat(&eval_text, &eval_conf);

    let fit_y: Vec<u8> = fit.examples.iter().map(|e| e.label).collect();
    let eval_y: Vec<u8> = eval.examples.iter().map(|e| e.label).collect();

    let (_, text_col) = fit_and_eval(&fit_text, &fit_y, &eval_text, &eval_y, config.l2)?;
    let (_, conf_col) = fit_and_eval(&fit_conf, &fit_y, &eval_conf, &eval_y, config.l2)?;
    let (_, both_col) = fit_and_eval(&fit_both, &fit_y, &eval_both, &eval_y, config.l2)?;

    Ok(IlReport {
        i_l: conf_col.bce - both_col.bce,
        bce_c: conf_col.bce,
        bce_lc: both_col.bce,
        f1_text: text_col.f1,
        f1_conf: conf_col.f1,
        f1_both: both_col.f1,
        lexicon_ref: lexicon.model_id.clone(),
        lexicon_k: lexicon.k,
        task: task.to_string(),
        split_protocol: config.protocol.clone(),
        warnings,
    })
}

/// Reports are only comparable at equal lexicon size, task and protocol.
pub fn ensure_comparable(a: &IlReport, b: &IlReport) -> Result<()> {
    if a.lexicon_k != b.lexicon_k {
        return Err(CoreError::Incomparable(format!(
            "lexicon sizes differ ({} vs {})",
            a.lexicon_k, b.lexicon_k
        )));
    }
    if a.task != b.task {
        return Err(CoreError::Incomparable(format!(
            "tasks differ ({} vs {})",
            a.task, b.task
        )));
    }
    if a.split_protocol != b.split_protocol {
        return Err(CoreError::Incomparable(
            "split protocols differ".to_string(),
        ));
    }
    Ok(())
}
