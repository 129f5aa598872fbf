//! Shared helpers for the integration and acceptance suites: the frozen
//! synthetic-benchmark pipeline configuration and one runner per
//! (classifier, residualised) variant pair.

// Each integration test binary compiles its own copy; not every test uses
// every helper.
#![allow(dead_code)]

use deconflex_core::classifiers::{
    train_on_examples, Arch, FeatureSpace, ModelSpec, TrainConfig,
};
use deconflex_core::corpus::{derive_examples, parse_dataset, repair_and_clean, LabeledExample, Split, Task};
use deconflex_core::explanations::{
    lexicon_from_model, ExplMethod, Lexicon, LexiconOptions, SurrogateConfig,
};
use deconflex_core::informativeness::{informativeness, IlConfig, IlReport, IlSplit};
use deconflex_core::residualisation::{
    dr_train_on_examples, DrFeatures, DrSpec, DrTrainConfig, DrTrained, DrVariant,
};
use deconflex_core::synthbench::{generate, grade_lexicon, ground_truth, write_corpus, GroundTruth, SynthConfig};
use deconflex_core::textrep::{build_vocab, embed_pooled, EmbeddingProvider, HashProvider};
use deconflex_core::TrainedModelF64;

pub const PROVIDER_DIM: usize = 32;
pub const PROVIDER_SEED: u64 = 1234;
/// Regularization for the informativeness regressions on the synthetic
/// benchmark; stronger than the library default to keep the estimator stable
/// against the 32-dim confounder embedding.
pub const SYNTH_IL_L2: f64 = 50.0;
pub const LEXICON_K: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pair {
    Bow,
    GruAttn,
    BlackboxSurrogate,
}

impl Pair {
    pub fn all() -> [Pair; 3] {
        [Pair::Bow, Pair::GruAttn, Pair::BlackboxSurrogate]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Pair::Bow => "bow",
            Pair::GruAttn => "gru_attn",
            Pair::BlackboxSurrogate => "blackbox+surrogate",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub seed: u64,
    pub pair: Pair,
    pub il_nc: f64,
    pub il_dr: f64,
    pub cont_nc: f64,
    pub cont_dr: f64,
    pub recall_nc: f64,
    pub recall_dr: f64,
}

pub struct SynthSplits {
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub truth: GroundTruth,
}

/// Generate the default corpus for a seed and run it through the real
/// ingestion pipeline (canonical layout on disk, parse, repair, derive).
pub fn synth_splits(seed: u64) -> SynthSplits {
    let config = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    let docs = generate(&config).expect("generate synthetic corpus");
    let dir = tempfile::tempdir().expect("tempdir");
    write_corpus(dir.path(), &docs, &config).expect("write corpus");
    let outcome = parse_dataset(dir.path()).expect("parse corpus");
    assert!(outcome.skipped.is_empty(), "synthetic corpus must parse cleanly");
    let (subs, _) = repair_and_clean(outcome.submissions);
    let by_split = |split: Split| -> Vec<LabeledExample> {
        let subset: Vec<_> = subs.iter().filter(|s| s.split == split).cloned().collect();
        derive_examples(&subset, Task::IndividualReview).0
    };
    SynthSplits {
        train: by_split(Split::Train),
        val: by_split(Split::Validation),
        test: by_split(Split::Test),
        truth: ground_truth(&config),
    }
}

pub fn provider() -> HashProvider {
    HashProvider::new(PROVIDER_DIM, PROVIDER_SEED)
}

pub fn confounders(provider: &dyn EmbeddingProvider, examples: &[LabeledExample]) -> Vec<Vec<f64>> {
    examples
        .iter()
        .map(|e| embed_pooled(provider, &e.confounder_text).expect("confounder embedding"))
        .collect()
}

pub fn synth_il(
    lexicon: &Lexicon,
    splits: &SynthSplits,
    conf_train: &[Vec<f64>],
    conf_test: &[Vec<f64>],
) -> IlReport {
    let fit = IlSplit {
        examples: &splits.train,
        confounders: conf_train,
    };
    let eval = IlSplit {
        examples: &splits.test,
        confounders: conf_test,
    };
    let cfg = IlConfig {
        l2: SYNTH_IL_L2,
        ..IlConfig::default()
    };
    informativeness(lexicon, "individual_review", &fit, &eval, &cfg).expect("informativeness")
}

fn bow_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        epochs: 250,
        patience: 250,
        weight_decay: 0.03,
        seed,
        ..TrainConfig::default()
    }
}

fn gru_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 80,
        patience: 15,
        weight_decay: 0.1,
        seed,
        ..TrainConfig::default()
    }
}

fn pooled_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 100,
        patience: 20,
        weight_decay: 0.1,
        seed,
        ..TrainConfig::default()
    }
}

pub fn surrogate_options(seed: u64) -> LexiconOptions {
    LexiconOptions {
        k: LEXICON_K,
        min_count: 8,
        surrogate: SurrogateConfig {
            n_samples: 2500,
            seed,
            ..SurrogateConfig::default()
        },
    }
}

/// Train one (non-causal, residualised) pair on a synthetic corpus, extract
/// both k=50 lexicons, and score them.
pub fn run_pair(seed: u64, pair: Pair) -> PairOutcome {
    let splits = synth_splits(seed);
    let provider = provider();
    let pdyn: &dyn EmbeddingProvider = &provider;
    let conf_train = confounders(pdyn, &splits.train);
    let conf_test = confounders(pdyn, &splits.test);

    let (lex_nc, lex_dr) = match pair {
        Pair::Bow => {
            let vocab = build_vocab(&splits.train, 3, 1, "train").expect("vocab");
            let mut spec = ModelSpec::new(Arch::BowLinear, vocab.len());
            spec.dropout = 0.0;
            spec.seed = seed;
            let features = FeatureSpace::Bow {
                vocab: vocab.clone(),
            };
            let tc = bow_train_config(seed);
            let nc: TrainedModelF64 =
                train_on_examples(&spec, &features, Some(pdyn), &splits.train, &splits.val, &tc)
                    .expect("train nc bow");
            let opts = LexiconOptions {
                k: LEXICON_K,
                min_count: 1,
                ..LexiconOptions::default()
            };
            let lex_nc =
                lexicon_from_model(&nc, Some(pdyn), &splits.test, ExplMethod::LinearWeight, &opts)
                    .expect("nc bow lexicon");

            let mut dr_spec = DrSpec::new(DrVariant::Bow, PROVIDER_DIM, vocab.len());
            dr_spec.confounder_hidden = 32;
            dr_spec.dropout = 0.0;
            dr_spec.seed = seed;
            let dr = train_dr(
                &dr_spec,
                FeatureSpace::Bow { vocab },
                pdyn,
                &splits,
                DrTrainConfig {
                    base: tc,
                    intermediate_weight: 1.0,
                },
            );
            let lex_dr = dr
                .extract_lexicon(Some(pdyn), &splits.test, &opts)
                .expect("dr bow lexicon");
            (lex_nc, lex_dr)
        }
        Pair::GruAttn => {
            let mut spec = ModelSpec::new(Arch::GruAttn, PROVIDER_DIM);
            spec.hidden_dim = 24;
            spec.attn_dim = 12;
            spec.dropout = 0.0;
            spec.seed = seed;
            let features = FeatureSpace::Sequence {
                model_id: provider.model_id().to_string(),
                dim: PROVIDER_DIM,
            };
            let tc = gru_train_config(seed);
            let nc: TrainedModelF64 =
                train_on_examples(&spec, &features, Some(pdyn), &splits.train, &splits.val, &tc)
                    .expect("train nc gru");
            let opts = LexiconOptions {
                k: LEXICON_K,
                min_count: 8,
                ..LexiconOptions::default()
            };
            let lex_nc =
                lexicon_from_model(&nc, Some(pdyn), &splits.test, ExplMethod::Attention, &opts)
                    .expect("nc gru lexicon");

            let mut dr_spec = DrSpec::new(DrVariant::GruAttn, PROVIDER_DIM, PROVIDER_DIM);
            dr_spec.confounder_hidden = 32;
            dr_spec.hidden_dim = 24;
            dr_spec.attn_dim = 12;
            dr_spec.dropout = 0.0;
            dr_spec.seed = seed;
            let dr = train_dr(
                &dr_spec,
                features,
                pdyn,
                &splits,
                DrTrainConfig {
                    base: tc,
                    intermediate_weight: 1.0,
                },
            );
            let lex_dr = dr
                .extract_lexicon(Some(pdyn), &splits.test, &opts)
                .expect("dr gru lexicon");
            (lex_nc, lex_dr)
        }
        Pair::BlackboxSurrogate => {
            let mut spec = ModelSpec::new(Arch::PooledFfn, PROVIDER_DIM);
            spec.hidden_dim = 16;
            spec.dropout = 0.0;
            spec.seed = seed;
            let features = FeatureSpace::Pooled {
                model_id: provider.model_id().to_string(),
                dim: PROVIDER_DIM,
            };
            let tc = pooled_train_config(seed);
            let nc: TrainedModelF64 =
                train_on_examples(&spec, &features, Some(pdyn), &splits.train, &splits.val, &tc)
                    .expect("train nc pooled");
            let opts = surrogate_options(seed);
            let lex_nc =
                lexicon_from_model(&nc, Some(pdyn), &splits.test, ExplMethod::Surrogate, &opts)
                    .expect("nc surrogate lexicon");

            let mut dr_spec = DrSpec::new(DrVariant::BlackboxPooled, PROVIDER_DIM, PROVIDER_DIM);
            dr_spec.confounder_hidden = 32;
            dr_spec.hidden_dim = 32;
            dr_spec.dropout = 0.0;
            dr_spec.seed = seed;
            let dr = train_dr(
                &dr_spec,
                features,
                pdyn,
                &splits,
                DrTrainConfig {
                    base: tc,
                    intermediate_weight: 1.0,
                },
            );
            let lex_dr = dr
                .extract_lexicon(Some(pdyn), &splits.test, &opts)
                .expect("dr surrogate lexicon");
            (lex_nc, lex_dr)
        }
    };

    let il_nc = synth_il(&lex_nc, &splits, &conf_train, &conf_test);
    let il_dr = synth_il(&lex_dr, &splits, &conf_train, &conf_test);
    let grade_nc = grade_lexicon(&lex_nc, &splits.truth);
    let grade_dr = grade_lexicon(&lex_dr, &splits.truth);
    PairOutcome {
        seed,
        pair,
        il_nc: il_nc.i_l,
        il_dr: il_dr.i_l,
        cont_nc: grade_nc.contamination,
        cont_dr: grade_dr.contamination,
        recall_nc: grade_nc.causal_recall,
        recall_dr: grade_dr.causal_recall,
    }
}

fn train_dr(
    spec: &DrSpec,
    treatment: FeatureSpace,
    provider: &dyn EmbeddingProvider,
    splits: &SynthSplits,
    config: DrTrainConfig,
) -> DrTrained<f64> {
    let features = DrFeatures {
        treatment,
        confounder_model_id: provider.model_id().to_string(),
        confounder_dim: provider.dim(),
    };
    dr_train_on_examples(spec, &features, Some(provider), &splits.train, &splits.val, &config)
        .expect("train dr model")
}

pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    sorted[sorted.len() / 2]
}
