//! Synthetic corpora with planted confounding structure.
//!
//! Documents carry a binary topic (the confounder, surfaced through the
//! "abstract") and a latent quality in [0,1] (the causal signal, surfaced
//! through positive/negative causal tokens in the treatment text). Labels are
//! Bernoulli in a logistic combination of both, so any lexicon can be graded
//! against the planted token tags.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ReviewRecord, Split, SubmissionRecord};
use crate::error::{CoreError, Result};
use crate::explanations::Lexicon;
use crate::nn::write_atomic;
use crate::textrep::provider::derive_seed;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub confounder_tokens_per_topic: usize,
    pub causal_tokens: usize,
    pub noise_tokens: usize,
    pub doc_length: usize,
    pub abstract_length: usize,
    /// P(topic = 1).
    pub topic_prior: f64,
    /// Confounder effect alpha in sigmoid(alpha*(2c-1) + beta*(2q-1)).
    pub confounder_effect: f64,
    /// Causal effect beta.
    pub causal_effect: f64,
    /// P(treatment token drawn from the topic's confounder set).
    pub confounder_rate: f64,
    /// P(treatment token drawn from the causal set).
    pub causal_rate: f64,
    /// P(a confounder slot draws from the *opposite* topic's set): treatment
    /// topic mentions are a noisy proxy while the abstract stays clean, so a
    /// residualised encoder gains nothing from re-encoding the topic.
    pub topic_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_docs: 2000,
            confounder_tokens_per_topic: 30,
            causal_tokens: 20,
            noise_tokens: 200,
            doc_length: 40,
            abstract_length: 30,
            topic_prior: 0.5,
            confounder_effect: 1.5,
            causal_effect: 1.5,
            // Informative tokens are deliberately sparse so attention has to
            // single them out instead of counting everywhere.
            confounder_rate: 0.12,
            causal_rate: 0.08,
            topic_noise: 0.25,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("topic_prior", self.topic_prior),
            ("confounder_rate", self.confounder_rate),
            ("causal_rate", self.causal_rate),
            ("topic_noise", self.topic_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CoreError::InvalidConfig(format!("{name} = {p} outside [0,1]")));
            }
        }
        if self.confounder_rate + self.causal_rate > 1.0 {
            return Err(CoreError::InvalidConfig(
                "confounder_rate + causal_rate exceeds 1".to_string(),
            ));
        }
        if self.n_docs == 0 || self.doc_length == 0 || self.abstract_length == 0 {
            return Err(CoreError::InvalidConfig("sizes must be >= 1".to_string()));
        }
        if self.confounder_tokens_per_topic == 0 || self.causal_tokens < 2 || self.noise_tokens == 0
        {
            return Err(CoreError::InvalidConfig(
                "token pools must be non-trivial (>=2 causal tokens)".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenTag {
    Confounder,
    Causal,
    Noise,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthDoc {
    pub id: String,
    pub treatment_text: String,
    pub confounder_text: String,
    pub topic: u8,
    pub quality: f64,
    pub label: u8,
    /// Tag of every treatment token, aligned by position.
    pub token_tags: Vec<TokenTag>,
}

/// Planted token tags plus the generating config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub token_tags: BTreeMap<String, TokenTag>,
}

impl GroundTruth {
    pub fn causal_token_count(&self) -> usize {
        self.token_tags
            .values()
            .filter(|t| **t == TokenTag::Causal)
            .count()
    }
}

fn topic_token(topic: u8, i: usize) -> String {
    format!("topic{topic}_{i:03}")
}

fn causal_token(positive: bool, i: usize) -> String {
    if positive {
        format!("causalpos_{i:03}")
    } else {
        format!("causalneg_{i:03}")
    }
}

fn noise_token(i: usize) -> String {
    format!("noise_{i:03}")
}

/// Token tags implied by a config, independent of any generated corpus.
pub fn ground_truth(config: &SynthConfig) -> GroundTruth {
    let mut tags = BTreeMap::new();
    for topic in 0..2u8 {
        for i in 0..config.confounder_tokens_per_topic {
            tags.insert(topic_token(topic, i), TokenTag::Confounder);
        }
    }
    let pos = config.causal_tokens / 2;
    for i in 0..pos {
        tags.insert(causal_token(true, i), TokenTag::Causal);
    }
    for i in 0..config.causal_tokens - pos {
        tags.insert(causal_token(false, i), TokenTag::Causal);
    }
    for i in 0..config.noise_tokens {
        tags.insert(noise_token(i), TokenTag::Noise);
    }
    GroundTruth {
        config: config.clone(),
        token_tags: tags,
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Generate a corpus; deterministic given the seed, with per-document derived
/// seeds so generation order does not matter.
pub fn generate(config: &SynthConfig) -> Result<Vec<SynthDoc>> {
    config.validate()?;
    let n_pos = config.causal_tokens / 2;
    let n_neg = config.causal_tokens - n_pos;
    let mut docs = Vec::with_capacity(config.n_docs);
    for i in 0..config.n_docs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, i as u64));
        let topic = (rng.random::<f64>() < config.topic_prior) as u8;
        let quality: f64 = rng.random();
        let p = sigmoid(
            config.confounder_effect * (2.0 * topic as f64 - 1.0)
                + config.causal_effect * (2.0 * quality - 1.0),
        );
        let label = (rng.random::<f64>() < p) as u8;

        let mut tokens = Vec::with_capacity(config.doc_length);
        let mut tags = Vec::with_capacity(config.doc_length);
        for _ in 0..config.doc_length {
            let u: f64 = rng.random();
            if u < config.confounder_rate {
                let mentioned = if rng.random::<f64>() < config.topic_noise {
                    1 - topic
                } else {
                    topic
                };
                let idx = rng.random_range(0..config.confounder_tokens_per_topic);
                tokens.push(topic_token(mentioned, idx));
                tags.push(TokenTag::Confounder);
            } else if u < config.confounder_rate + config.causal_rate {
                let positive = rng.random::<f64>() < quality;
                let token = if positive {
                    causal_token(true, rng.random_range(0..n_pos))
                } else {
                    causal_token(false, rng.random_range(0..n_neg))
                };
                tokens.push(token);
                tags.push(TokenTag::Causal);
            } else {
                tokens.push(noise_token(rng.random_range(0..config.noise_tokens)));
                tags.push(TokenTag::Noise);
            }
        }
        let abstract_tokens: Vec<String> = (0..config.abstract_length)
            .map(|_| topic_token(topic, rng.random_range(0..config.confounder_tokens_per_topic)))
            .collect();

        docs.push(SynthDoc {
            id: format!("synth_{i:05}"),
            treatment_text: tokens.join(" "),
            confounder_text: abstract_tokens.join(" "),
            topic,
            quality,
            label,
            token_tags: tags,
        });
    }
    Ok(docs)
}

/// Lexicon quality against the planted structure. Only membership matters;
/// scores are ignored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LexiconGrade {
    /// Fraction of lexicon words tagged confounder (lower is better).
    pub contamination: f64,
    /// Fraction of all planted causal tokens recovered.
    pub causal_recall: f64,
}

pub fn grade_lexicon(lexicon: &Lexicon, truth: &GroundTruth) -> LexiconGrade {
    let n = lexicon.entries.len().max(1);
    let mut confounder_hits = 0usize;
    let mut causal_hits = 0usize;
    for word in lexicon.words() {
        match truth.token_tags.get(word) {
            Some(TokenTag::Confounder) => confounder_hits += 1,
            Some(TokenTag::Causal) => causal_hits += 1,
            _ => {}
        }
    }
    LexiconGrade {
        contamination: confounder_hits as f64 / n as f64,
        causal_recall: causal_hits as f64 / truth.causal_token_count().max(1) as f64,
    }
}

/// Write a generated corpus in the canonical dataset layout
/// (`<dir>/{train,dev,test}/reviews/*.json`) plus `ground_truth.json`.
/// Splits are 70/10/20 in document order; the larger test split keeps
/// informativeness estimates stable.
pub fn write_corpus(dir: &Path, docs: &[SynthDoc], config: &SynthConfig) -> Result<()> {
    let n = docs.len();
    let train_end = n * 7 / 10;
    let dev_end = train_end + n / 10;
    for (i, doc) in docs.iter().enumerate() {
        let split = if i < train_end {
            Split::Train
        } else if i < dev_end {
            Split::Validation
        } else {
            Split::Test
        };
        let record = SubmissionRecord {
            id: doc.id.clone(),
            title: doc.id.clone(),
            abstract_text: doc.confounder_text.clone(),
            accepted: doc.label == 1,
            reviews: vec![ReviewRecord {
                title: String::new(),
                comments: doc.treatment_text.clone(),
                recommendation: Some(if doc.label == 1 { 8 } else { 3 }),
                is_meta_review: false,
            }],
        };
        let json = serde_json::to_vec_pretty(&record)
            .map_err(|e| CoreError::json(dir.join(&doc.id), e))?;
        let path = dir
            .join(split.dir_name())
            .join("reviews")
            .join(format!("{}.json", doc.id));
        write_atomic(&path, &json)?;
    }
    // Make the per-split reviews directories exist even for tiny corpora.
    for split in Split::all() {
        let d = dir.join(split.dir_name()).join("reviews");
        std::fs::create_dir_all(&d).map_err(|e| CoreError::io(&d, e))?;
    }
    let truth = ground_truth(config);
    let json = serde_json::to_vec_pretty(&truth)
        .map_err(|e| CoreError::json(dir.join("ground_truth.json"), e))?;
    write_atomic(&dir.join("ground_truth.json"), &json)?;
    Ok(())
}

pub fn read_ground_truth(dir: &Path) -> Result<GroundTruth> {
    let path = dir.join("ground_truth.json");
    let raw = std::fs::read(&path).map_err(|e| CoreError::io(&path, e))?;
    serde_json::from_slice(&raw).map_err(|e| CoreError::json(&path, e))
}
