//! Cross-module behavior on synthetic corpora: the residualised model's
//! confounder branch, encoder ablation, and informativeness ordering of
//! planted lexicons.

mod support;

use deconflex_core::classifiers::{train_on_examples, Arch, FeatureSpace, ModelSpec, TrainConfig};
use deconflex_core::explanations::{ExplMethod, Lexicon, LexiconEntry};
use deconflex_core::residualisation::{
    dr_featurize_all, dr_train_on_examples, yprime_accuracy, DrFeatures, DrSpec, DrTrainConfig,
    DrVariant,
};
use deconflex_core::synthbench::{generate, ground_truth, SynthConfig, TokenTag};
use deconflex_core::textrep::{build_vocab, EmbeddingProvider};
use deconflex_core::corpus::{LabeledExample, Task};
use deconflex_core::TrainedModelF64;

use support::{confounders, provider, synth_il, synth_splits, SynthSplits};

fn splits_for(config: &SynthConfig) -> SynthSplits {
    let docs = generate(config).unwrap();
    let to_ex = |d: &deconflex_core::synthbench::SynthDoc| {
        LabeledExample::new(
            &d.id,
            Task::IndividualReview,
            &d.treatment_text,
            &d.confounder_text,
            d.label,
        )
    };
    let n = docs.len();
    SynthSplits {
        train: docs[..n * 7 / 10].iter().map(to_ex).collect(),
        val: docs[n * 7 / 10..n * 8 / 10].iter().map(to_ex).collect(),
        test: docs[n * 8 / 10..].iter().map(to_ex).collect(),
        truth: ground_truth(config),
    }
}

/// Label a pure function of the confounder: the intermediate prediction alone
/// must classify, and the residualised bow encoder has nothing to learn, so
/// its weights stay smaller than the non-causal counterpart's.
#[test]
fn confounder_only_labels_are_carried_by_the_intermediate_branch() {
    let config = SynthConfig {
        n_docs: 1200,
        confounder_effect: 6.0,
        causal_effect: 0.0,
        seed: 2,
        ..SynthConfig::default()
    };
    let splits = splits_for(&config);
    let provider = provider();
    let pdyn: &dyn EmbeddingProvider = &provider;
    let vocab = build_vocab(&splits.train, 3, 1, "train").unwrap();

    let tc = TrainConfig {
        lr: 3e-3,
        epochs: 60,
        patience: 60,
        seed: 2,
        ..TrainConfig::default()
    };

    let mut nc_spec = ModelSpec::new(Arch::BowLinear, vocab.len());
    nc_spec.dropout = 0.0;
    nc_spec.seed = 2;
    let nc: TrainedModelF64 = train_on_examples(
        &nc_spec,
        &FeatureSpace::Bow {
            vocab: vocab.clone(),
        },
        Some(pdyn),
        &splits.train,
        &splits.val,
        &tc,
    )
    .unwrap();
    let nc_norm: f64 = {
        let id = nc.classifier.store.id_of("bow.w").unwrap();
        nc.classifier.store.sq_norm(id).sqrt()
    };

    let mut dr_spec = DrSpec::new(DrVariant::Bow, pdyn.dim(), vocab.len());
    dr_spec.confounder_hidden = 32;
    dr_spec.dropout = 0.0;
    dr_spec.seed = 2;
    let features = DrFeatures {
        treatment: FeatureSpace::Bow { vocab },
        confounder_model_id: pdyn.model_id().to_string(),
        confounder_dim: pdyn.dim(),
    };
    let dr = dr_train_on_examples::<f64>(
        &dr_spec,
        &features,
        Some(pdyn),
        &splits.train,
        &splits.val,
        &DrTrainConfig {
            base: tc,
            intermediate_weight: 1.0,
        },
    )
    .unwrap();

    let test_inputs = dr_featurize_all::<f64>(&features, Some(pdyn), &splits.test).unwrap();
    let yprime_acc = yprime_accuracy(&dr.model, &test_inputs).unwrap();
    assert!(
        yprime_acc >= 0.95,
        "intermediate prediction accuracy {yprime_acc} below 0.95"
    );

    let dr_norm = dr.model.bow_weight_norm().unwrap();
    assert!(
        dr_norm < nc_norm,
        "dr encoder norm {dr_norm} not below non-causal norm {nc_norm}"
    );
}

/// With the encoder ablated (its embedding pinned to zero throughout
/// training), the final prediction's achievable accuracy equals the
/// intermediate one's: the head can add nothing beyond the confounder.
#[test]
fn ablated_encoder_degrades_to_the_confounder_branch() {
    use deconflex_core::classifiers::ArchInput;
    use deconflex_core::residualisation::{dr_accuracy, dr_train, DrInput};

    let splits = synth_splits(1);
    let provider = provider();
    let pdyn: &dyn EmbeddingProvider = &provider;
    let vocab = build_vocab(&splits.train, 3, 1, "train").unwrap();
    let mut dr_spec = DrSpec::new(DrVariant::Bow, pdyn.dim(), vocab.len());
    dr_spec.confounder_hidden = 32;
    dr_spec.dropout = 0.0;
    dr_spec.seed = 1;
    let features = DrFeatures {
        treatment: FeatureSpace::Bow { vocab },
        confounder_model_id: pdyn.model_id().to_string(),
        confounder_dim: pdyn.dim(),
    };
    let ablate = |inputs: Vec<DrInput<f64>>| -> Vec<DrInput<f64>> {
        inputs
            .into_iter()
            .map(|mut input| {
                if let ArchInput::Bow(v) = &mut input.treatment {
                    v.iter_mut().for_each(|x| *x = 0.0);
                }
                input
            })
            .collect()
    };
    let train_inputs = ablate(dr_featurize_all::<f64>(&features, Some(pdyn), &splits.train).unwrap());
    let val_inputs = ablate(dr_featurize_all::<f64>(&features, Some(pdyn), &splits.val).unwrap());
    let test_inputs = ablate(dr_featurize_all::<f64>(&features, Some(pdyn), &splits.test).unwrap());

    let (model, _) = dr_train(
        &dr_spec,
        &train_inputs,
        &val_inputs,
        &DrTrainConfig {
            base: TrainConfig {
                lr: 3e-3,
                epochs: 60,
                patience: 60,
                seed: 1,
                ..TrainConfig::default()
            },
            intermediate_weight: 1.0,
        },
    )
    .unwrap();

    let y_acc = dr_accuracy(&model, &test_inputs).unwrap();
    let yprime_acc = yprime_accuracy(&model, &test_inputs).unwrap();
    assert!(
        (y_acc - yprime_acc).abs() <= 0.03,
        "ablated final accuracy {y_acc} deviates from intermediate {yprime_acc}"
    );
}

fn planted_lexicon(words: Vec<String>) -> Lexicon {
    Lexicon {
        k: words.len(),
        entries: words
            .into_iter()
            .enumerate()
            .map(|(i, token)| LexiconEntry {
                rank: i + 1,
                token,
                score: 1.0,
                count: 1,
            })
            .collect(),
        method: ExplMethod::Attention,
        split: "test".to_string(),
        model_id: "planted".to_string(),
        truncated: false,
    }
}

/// A lexicon of planted causal tokens is strictly more informative than an
/// equally sized lexicon of planted confounder tokens, on every seed.
#[test]
fn planted_causal_lexicon_beats_planted_confounder_lexicon() {
    for seed in 1..=5 {
        let splits = synth_splits(seed);
        let provider = provider();
        let pdyn: &dyn EmbeddingProvider = &provider;
        let conf_train = confounders(pdyn, &splits.train);
        let conf_test = confounders(pdyn, &splits.test);

        let causal: Vec<String> = splits
            .truth
            .token_tags
            .iter()
            .filter(|(_, t)| **t == TokenTag::Causal)
            .map(|(w, _)| w.clone())
            .collect();
        let k = causal.len();
        let confounder: Vec<String> = splits
            .truth
            .token_tags
            .iter()
            .filter(|(_, t)| **t == TokenTag::Confounder)
            .map(|(w, _)| w.clone())
            .take(k)
            .collect();

        let il_causal = synth_il(&planted_lexicon(causal), &splits, &conf_train, &conf_test);
        let il_conf = synth_il(&planted_lexicon(confounder), &splits, &conf_train, &conf_test);
        assert!(
            il_causal.i_l > il_conf.i_l,
            "seed {seed}: causal lexicon I(L) {:.4} not above confounder lexicon {:.4}",
            il_causal.i_l,
            il_conf.i_l
        );
    }
}
