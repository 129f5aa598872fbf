//! Local explanations (attention readout and a perturbation-based local
//! surrogate) and their aggregation into ranked global lexicons.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifiers::TrainedModel;
use crate::corpus::LabeledExample;
use crate::error::{CoreError, Result};
use crate::logistic::{cholesky, cholesky_solve};
use crate::nn::write_atomic;
use crate::scalar::Scalar;
use crate::textrep::{provider::derive_seed, tokenize, EmbeddingProvider};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplMethod {
    Attention,
    Surrogate,
    LinearWeight,
}

impl fmt::Display for ExplMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ExplMethod::Attention => "attention",
            ExplMethod::Surrogate => "surrogate",
            ExplMethod::LinearWeight => "linear_weight",
        };
        f.write_str(name)
    }
}

/// Per-token attribution for a single prediction. Attention scores form a
/// probability simplex; surrogate and linear-weight scores are signed reals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalExplanation {
    pub example_id: String,
    pub token_scores: Vec<(String, f64)>,
    pub method: ExplMethod,
}

/// Corpus-level word scores after aggregating local explanations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalScores {
    pub entries: Vec<GlobalEntry>,
    pub min_count: usize,
    pub method: ExplMethod,
    pub split: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalEntry {
    pub word: String,
    pub score: f64,
    pub count: usize,
}

/// Ranked top-k word list; the principal output of the pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lexicon {
    pub entries: Vec<LexiconEntry>,
    pub k: usize,
    pub method: ExplMethod,
    pub split: String,
    pub model_id: String,
    /// Set when the global pool held fewer than k words.
    #[serde(default)]
    pub truncated: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub rank: usize,
    pub token: String,
    pub score: f64,
    pub count: usize,
}

impl Lexicon {
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.token.as_str())
    }

    /// JSON-lines serialization: one `{rank, token, score, count, method,
    /// model_id}` object per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            let line = serde_json::json!({
                "rank": e.rank,
                "token": e.token,
                "score": e.score,
                "count": e.count,
                "method": self.method,
                "model_id": self.model_id,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        write_atomic(path, out.as_bytes())
    }

    pub fn read_jsonl(path: &Path) -> Result<Lexicon> {
        let file = fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
        let mut entries = Vec::new();
        let mut method = ExplMethod::Surrogate;
        let mut model_id = String::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| CoreError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            #[derive(Deserialize)]
            struct Line {
                rank: usize,
                token: String,
                score: f64,
                count: usize,
                method: ExplMethod,
                model_id: String,
            }
            let parsed: Line =
                serde_json::from_str(&line).map_err(|e| CoreError::json(path, e))?;
            method = parsed.method;
            model_id = parsed.model_id;
            entries.push(LexiconEntry {
                rank: parsed.rank,
                token: parsed.token,
                score: parsed.score,
                count: parsed.count,
            });
        }
        if entries.is_empty() {
            return Err(CoreError::EmptyInput(format!("lexicon file {}", path.display())));
        }
        Ok(Lexicon {
            k: entries.len(),
            entries,
            method,
            split: "test".to_string(),
            model_id,
            truncated: false,
        })
    }
}

// --- perturbation-based local surrogate -------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub n_samples: usize,
    /// Proximity kernel width; None = 0.75 * sqrt(n_words).
    pub kernel_width: Option<f64>,
    pub ridge: f64,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            n_samples: 1000,
            kernel_width: None,
            ridge: 1.0,
            seed: 0,
        }
    }
}

/// Explain one prediction of a black-box text classifier.
///
/// Samples random word-subset masks, queries `predict_fn` on each masked
/// text, and fits a proximity-weighted ridge regression of the predicted
/// probability on the mask indicators. Features are the distinct words of
/// the text (first-occurrence order); masking a word removes all of its
/// occurrences. Deterministic given the seed, with per-mask seeds derived
/// from (seed, mask index) so results do not depend on evaluation order.
pub fn surrogate_explain(
    predict_fn: &dyn Fn(&str) -> Result<f64>,
    example_id: &str,
    text: &str,
    config: &SurrogateConfig,
) -> Result<LocalExplanation> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(CoreError::EmptyInput("surrogate_explain text".to_string()));
    }
    let mut words: Vec<String> = Vec::new();
    let mut word_pos: HashMap<&str, usize> = HashMap::new();
    for t in &tokens {
        if !word_pos.contains_key(t.as_str()) {
            word_pos.insert(t, words.len());
            words.push(t.clone());
        }
    }
    let n_words = words.len();
    let kernel_width = config
        .kernel_width
        .unwrap_or(0.75 * (n_words as f64).sqrt());

    let query = |masked: &str| -> Result<f64> {
        predict_fn(masked).map_err(|e| CoreError::SurrogateQuery {
            masked_text: masked.to_string(),
            source: Box::new(e),
        })
    };

    // Row 0 is the unperturbed instance (all-ones mask, weight 1).
    let mut masks: Vec<Vec<f64>> = vec![vec![1.0; n_words]];
    let mut targets: Vec<f64> = vec![query(text)?];
    for i in 1..config.n_samples.max(2) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, i as u64));
        let n_disable = rng.random_range(1..=n_words);
        let mut mask = vec![1.0; n_words];
        for idx in sample(&mut rng, n_words, n_disable) {
            mask[idx] = 0.0;
        }
        let masked_text = tokens
            .iter()
            .filter(|t| mask[word_pos[t.as_str()]] == 1.0)
            .cloned()
            .collect::<Vec<_>>()
            .join(" ");
        targets.push(query(&masked_text)?);
        masks.push(mask);
    }

    // Proximity weights from the cosine distance to the all-ones mask.
    let weights: Vec<f64> = masks
        .iter()
        .map(|m| {
            let ones: f64 = m.iter().sum();
            let d = 1.0 - (ones / n_words as f64).sqrt();
            (-d * d / (kernel_width * kernel_width)).exp()
        })
        .collect();

    // Weighted ridge with unpenalized intercept: (X^T W X + lambda I') beta =
    // X^T W y, X = [1 | masks].
    let dim = n_words + 1;
    let mut xtx = vec![0.0f64; dim * dim];
    let mut xty = vec![0.0f64; dim];
    for ((m, &y), &w) in masks.iter().zip(targets.iter()).zip(weights.iter()) {
        let mut row = Vec::with_capacity(dim);
        row.push(1.0);
        row.extend_from_slice(m);
        for j in 0..dim {
            let wj = w * row[j];
            for k in 0..=j {
                xtx[j * dim + k] += wj * row[k];
            }
            xty[j] += wj * y;
        }
    }
    for j in 1..dim {
        xtx[j * dim + j] += config.ridge;
    }
    xtx[0] += 1e-12;
    for j in 0..dim {
        for k in (j + 1)..dim {
            xtx[j * dim + k] = xtx[k * dim + j];
        }
    }
    cholesky(&mut xtx, dim)?;
    cholesky_solve(&xtx, dim, &mut xty);

    let token_scores = words
        .into_iter()
        .zip(xty[1..].iter().copied())
        .collect();
    Ok(LocalExplanation {
        example_id: example_id.to_string(),
        token_scores,
        method: ExplMethod::Surrogate,
    })
}

// --- attention readout -------------------------------------------------------

/// Merge position-level attention onto word tokens via the alignment map.
pub(crate) fn attention_local(
    example_id: &str,
    words: &[String],
    word_index: &[usize],
    attention: &[f64],
) -> LocalExplanation {
    let mut merged: Vec<f64> = vec![0.0; words.len()];
    for (pos, &w) in word_index.iter().enumerate() {
        if pos < attention.len() {
            merged[w] += attention[pos];
        }
    }
    LocalExplanation {
        example_id: example_id.to_string(),
        token_scores: words.iter().cloned().zip(merged).collect(),
        method: ExplMethod::Attention,
    }
}

/// Read attention weights for one example off a trained attention model.
pub fn attention_explain<F: Scalar>(
    model: &TrainedModel<F>,
    provider: Option<&dyn EmbeddingProvider>,
    ex: &LabeledExample,
) -> Result<LocalExplanation> {
    let input = model.featurize(provider, ex)?;
    let out = model.classifier.predict_detailed(&input)?;
    let attention: Vec<f64> = out
        .attention
        .ok_or_else(|| CoreError::InvalidConfig(format!(
            "architecture {:?} exposes no attention",
            model.classifier.spec.arch
        )))?
        .iter()
        .map(|a| a.to_f64().unwrap_or(0.0))
        .collect();
    let crate::classifiers::ArchInput::Sequence(seq) = input else {
        return Err(CoreError::InvalidConfig(
            "attention explanations need a sequence input".to_string(),
        ));
    };
    Ok(attention_local(&ex.example_id, &seq.words, &seq.word_index, &attention))
}

// --- global aggregation -------------------------------------------------------

/// Average local scores per word: raw weights for attention, magnitudes for
/// signed methods. Words observed fewer than `min_count` times are dropped.
pub fn aggregate_global(
    locals: &[LocalExplanation],
    min_count: usize,
    split: &str,
) -> Result<GlobalScores> {
    if locals.is_empty() {
        return Err(CoreError::EmptyInput("aggregate_global locals".to_string()));
    }
    let method = locals[0].method;
    if locals.iter().any(|l| l.method != method) {
        return Err(CoreError::InvalidConfig(
            "cannot aggregate local explanations of mixed methods".to_string(),
        ));
    }
    let mut sums: HashMap<&str, (f64, usize)> = HashMap::new();
    for local in locals {
        for (word, score) in &local.token_scores {
            let contribution = match method {
                ExplMethod::Attention => *score,
                ExplMethod::Surrogate | ExplMethod::LinearWeight => score.abs(),
            };
            let e = sums.entry(word).or_insert((0.0, 0));
            e.0 += contribution;
            e.1 += 1;
        }
    }
    let mut entries: Vec<GlobalEntry> = sums
        .into_iter()
        .filter(|(_, (_, count))| *count >= min_count)
        .map(|(word, (sum, count))| GlobalEntry {
            word: word.to_string(),
            score: sum / count as f64,
            count,
        })
        .collect();
    entries.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| b.count.cmp(&a.count))
            .then_with(|| a.word.cmp(&b.word))
    });
    Ok(GlobalScores {
        entries,
        min_count,
        method,
        split: split.to_string(),
    })
}

/// Knobs for turning a model plus test examples into a lexicon.
#[derive(Debug, Clone)]
pub struct LexiconOptions {
    pub k: usize,
    pub min_count: usize,
    pub surrogate: SurrogateConfig,
}

impl Default for LexiconOptions {
    fn default() -> Self {
        LexiconOptions {
            k: 50,
            min_count: 3,
            surrogate: SurrogateConfig::default(),
        }
    }
}

/// Rank vocabulary n-grams by absolute linear weight, restricted to n-grams
/// that actually occur in the given (test) examples so no lexicon can contain
/// a word absent from every test text. Counts are test-split occurrences.
pub fn bow_weight_lexicon(
    vocab: &crate::textrep::Vocab,
    weights: &[f64],
    examples: &[LabeledExample],
    k: usize,
    model_id: &str,
) -> Result<Lexicon> {
    if weights.len() != vocab.len() {
        return Err(CoreError::ShapeMismatch {
            expected: format!("{} weights", vocab.len()),
            got: format!("{}", weights.len()),
        });
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for ex in examples {
        for part in ex.treatment_parts() {
            for gram in crate::textrep::ngrams(&tokenize(part), vocab.ngram_max) {
                if let Some(i) = vocab.position(&gram) {
                    *counts.entry(i).or_insert(0) += 1;
                }
            }
        }
    }
    let mut candidates: Vec<(usize, usize)> = counts.into_iter().collect();
    candidates.sort_by(|a, b| {
        weights[b.0]
            .abs()
            .total_cmp(&weights[a.0].abs())
            .then_with(|| b.1.cmp(&a.1))
            .then_with(|| vocab.token(a.0).cmp(vocab.token(b.0)))
    });
    if candidates.is_empty() {
        return Err(CoreError::EmptyInput(
            "no vocabulary n-grams occur in the test examples".to_string(),
        ));
    }
    let take = k.min(candidates.len());
    let entries = candidates[..take]
        .iter()
        .enumerate()
        .map(|(rank, &(i, count))| LexiconEntry {
            rank: rank + 1,
            token: vocab.token(i).to_string(),
            score: weights[i].abs(),
            count,
        })
        .collect();
    Ok(Lexicon {
        entries,
        k,
        method: ExplMethod::LinearWeight,
        split: "test".to_string(),
        model_id: model_id.to_string(),
        truncated: take < k,
    })
}

/// Extract a global lexicon from a trained non-causal classifier on test
/// examples, using the requested explanation back-end.
pub fn lexicon_from_model<F: Scalar>(
    model: &TrainedModel<F>,
    provider: Option<&dyn EmbeddingProvider>,
    test_examples: &[LabeledExample],
    method: ExplMethod,
    opts: &LexiconOptions,
) -> Result<Lexicon> {
    if test_examples.is_empty() {
        return Err(CoreError::EmptyInput("lexicon test examples".to_string()));
    }
    let arch = model.classifier.spec.arch;
    let label = format!("{arch:?}").to_lowercase();
    match method {
        ExplMethod::LinearWeight => {
            let crate::classifiers::FeatureSpace::Bow { vocab } = &model.features else {
                return Err(CoreError::InvalidConfig(
                    "linear-weight explanations need a bag-of-words model".to_string(),
                ));
            };
            let id = model
                .classifier
                .store
                .id_of("bow.w")
                .ok_or_else(|| CoreError::InvalidConfig("model has no linear weights".to_string()))?;
            let weights: Vec<f64> = model
                .classifier
                .store
                .data(id)
                .iter()
                .map(|w| w.to_f64().unwrap_or(0.0))
                .collect();
            bow_weight_lexicon(vocab, &weights, test_examples, opts.k, &label)
        }
        ExplMethod::Attention => {
            let locals: Result<Vec<LocalExplanation>> = test_examples
                .iter()
                .map(|ex| attention_explain(model, provider, ex))
                .collect();
            let global = aggregate_global(&locals?, opts.min_count, "test")?;
            extract_lexicon(&global, opts.k, &label)
        }
        ExplMethod::Surrogate => {
            let mut locals = Vec::with_capacity(test_examples.len());
            for (idx, ex) in test_examples.iter().enumerate() {
                if ex.treatment_parts().len() > 1 {
                    return Err(CoreError::InvalidConfig(
                        "surrogate explanations need single-text examples".to_string(),
                    ));
                }
                let predict_fn = |text: &str| -> Result<f64> {
                    let mut masked = ex.clone();
                    masked.treatment_text = text.to_string();
                    masked.treatment_parts_list = vec![text.to_string()];
                    model
                        .predict(provider, &masked)?
                        .prob
                        .to_f64()
                        .ok_or_else(|| CoreError::Diverged("non-finite probability".to_string()))
                };
                let mut cfg = opts.surrogate.clone();
                cfg.seed = derive_seed(opts.surrogate.seed, idx as u64);
                locals.push(surrogate_explain(
                    &predict_fn,
                    &ex.example_id,
                    &ex.treatment_text,
                    &cfg,
                )?);
            }
            let global = aggregate_global(&locals, opts.min_count, "test")?;
            extract_lexicon(&global, opts.k, &label)
        }
    }
}

/// Top-k of a global score table; ties broken by higher count, then
/// lexicographically.
pub fn extract_lexicon(global: &GlobalScores, k: usize, model_id: &str) -> Result<Lexicon> {
    if global.entries.is_empty() {
        return Err(CoreError::EmptyInput("extract_lexicon global scores".to_string()));
    }
    let take = k.min(global.entries.len());
    let entries: Vec<LexiconEntry> = global.entries[..take]
        .iter()
        .enumerate()
        .map(|(i, e)| LexiconEntry {
            rank: i + 1,
            token: e.word.clone(),
            score: e.score,
            count: e.count,
        })
        .collect();
    Ok(Lexicon {
        entries,
        k,
        method: global.method,
        split: global.split.clone(),
        model_id: model_id.to_string(),
        truncated: take < k,
    })
}
