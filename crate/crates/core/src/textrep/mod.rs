//! Text representation: tokenization, n-gram vocabulary, bag-of-words
//! features and frozen embedding providers.

pub mod provider;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::LabeledExample;
use crate::error::{CoreError, Result};
use crate::scalar::{cast, Scalar};

pub use provider::{
    CacheDirProvider, CachingProvider, EmbeddingProvider, HashProvider, SequenceEmbedding,
};

/// Lowercased word tokens: maximal runs of alphanumeric/underscore/apostrophe
/// characters, with every other non-whitespace character emitted as its own
/// single-character token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' || ch == '\'' {
            for lc in ch.to_lowercase() {
                word.push(lc);
            }
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// N-gram vocabulary built from a training split only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    pub min_freq: usize,
    pub ngram_max: usize,
    pub built_on: String,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn position(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Rebuild the token -> position map after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }
}

/// Expand a token list into n-grams up to `ngram_max` (space-joined).
pub fn ngrams(tokens: &[String], ngram_max: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(tokens.len() * ngram_max);
    for n in 1..=ngram_max {
        if tokens.len() < n {
            break;
        }
        for w in tokens.windows(n) {
            out.push(w.join(" "));
        }
    }
    out
}

/// Count n-grams over treatment texts and keep those with frequency at least
/// `min_freq`, ordered by (frequency desc, lexicographic).
pub fn build_vocab(
    corpus: &[LabeledExample],
    min_freq: usize,
    ngram_max: usize,
    built_on: &str,
) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(CoreError::EmptyInput("build_vocab corpus".to_string()));
    }
    if min_freq < 1 || !(1..=2).contains(&ngram_max) {
        return Err(CoreError::InvalidConfig(format!(
            "min_freq must be >= 1 and ngram_max in 1..=2, got {min_freq}/{ngram_max}"
        )));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for ex in corpus {
        for part in ex.treatment_parts() {
            for gram in ngrams(&tokenize(part), ngram_max) {
                *counts.entry(gram).or_insert(0) += 1;
            }
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_freq)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens: Vec<String> = kept.into_iter().map(|(t, _)| t).collect();
    let mut vocab = Vocab {
        tokens,
        index: HashMap::new(),
        min_freq,
        ngram_max,
        built_on: built_on.to_string(),
    };
    vocab.reindex();
    Ok(vocab)
}

/// Dense count vector over the vocabulary; out-of-vocabulary grams ignored.
pub fn bow_features<F: Scalar>(tokens: &[String], vocab: &Vocab) -> Vec<F> {
    let mut counts = vec![F::zero(); vocab.len()];
    for gram in ngrams(tokens, vocab.ngram_max) {
        if let Some(i) = vocab.position(&gram) {
            counts[i] += F::one();
        }
    }
    counts
}

/// Pooled embedding converted into the working scalar type.
pub fn embed_pooled<F: Scalar>(provider: &dyn EmbeddingProvider, text: &str) -> Result<Vec<F>> {
    Ok(provider
        .embed_pooled(text)?
        .into_iter()
        .map(|v| cast::<F>(v as f64))
        .collect())
}

/// Per-token embeddings plus word alignment, converted into the working
/// scalar type.
pub fn embed_sequence<F: Scalar>(
    provider: &dyn EmbeddingProvider,
    text: &str,
) -> Result<AlignedSequence<F>> {
    let seq = provider.embed_sequence(text)?;
    Ok(AlignedSequence {
        vectors: seq
            .vectors
            .into_iter()
            .map(|v| v.into_iter().map(|x| cast::<F>(x as f64)).collect())
            .collect(),
        words: seq.words,
        word_index: seq.word_index,
    })
}

/// Sequence embedding in the working scalar type. `word_index[t]` maps
/// position `t` of `vectors` onto an index into `words`.
#[derive(Debug, Clone)]
pub struct AlignedSequence<F: Scalar> {
    pub vectors: Vec<Vec<F>>,
    pub words: Vec<String>,
    pub word_index: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LabeledExample, Task};

    fn example(text: &str) -> LabeledExample {
        LabeledExample::new("s1", Task::IndividualReview, text, "abstract", 1)
    }

    #[test]
    fn tokenize_empty_is_empty() {
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn tokenize_separates_punctuation() {
        assert_eq!(tokenize("GANs are novel."), vec!["gans", "are", "novel", "."]);
    }

    #[test]
    fn tokenize_matches_hand_tokenized_fixture() {
        // Hand-tokenized by applying the stated rule to the paragraph.
        let text = "The model trains in 2 hours; results (all runs) are word2vec-based.";
        let expected = vec![
            "the", "model", "trains", "in", "2", "hours", ";", "results", "(", "all", "runs",
            ")", "are", "word2vec", "-", "based", ".",
        ];
        assert_eq!(tokenize(text), expected);
    }

    #[test]
    fn build_vocab_orders_by_frequency_then_lexicographic() {
        let corpus = vec![example("a b a")];
        let vocab = build_vocab(&corpus, 1, 1, "train").unwrap();
        assert_eq!(vocab.tokens(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn build_vocab_applies_min_freq() {
        let corpus = vec![example("a b a")];
        let vocab = build_vocab(&corpus, 2, 1, "train").unwrap();
        assert_eq!(vocab.tokens(), &["a".to_string()]);
    }

    #[test]
    fn build_vocab_rejects_empty_corpus() {
        assert!(build_vocab(&[], 1, 1, "train").is_err());
    }

    #[test]
    fn build_vocab_matches_brute_force_counter() {
        // 20-document fixture; the oracle is an independent frequency count
        // over the same tokenization.
        let docs: Vec<String> = (0..20)
            .map(|i| {
                format!(
                    "doc {} has sound results and doc {} repeats terms terms",
                    i,
                    i % 3
                )
            })
            .collect();
        let corpus: Vec<LabeledExample> = docs.iter().map(|d| example(d)).collect();

        let mut oracle: HashMap<String, usize> = HashMap::new();
        for d in &docs {
            for t in tokenize(d) {
                *oracle.entry(t).or_insert(0) += 1;
            }
        }
        let min_freq = 3;
        let mut expected: Vec<(String, usize)> = oracle
            .into_iter()
            .filter(|(_, c)| *c >= min_freq)
            .collect();
        expected.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let vocab = build_vocab(&corpus, min_freq, 1, "train").unwrap();
        let got: Vec<&str> = vocab.tokens().iter().map(|s| s.as_str()).collect();
        let want: Vec<&str> = expected.iter().map(|(t, _)| t.as_str()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn bigram_vocab_contains_pairs() {
        let corpus = vec![example("good paper good paper")];
        let vocab = build_vocab(&corpus, 2, 2, "train").unwrap();
        assert!(vocab.position("good paper").is_some());
    }

    #[test]
    fn bow_of_empty_tokens_is_zero_vector() {
        let corpus = vec![example("good paper bad")];
        let vocab = build_vocab(&corpus, 1, 1, "train").unwrap();
        let feats: Vec<f64> = bow_features(&[], &vocab);
        assert!(feats.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn bow_counts_tokens_in_vocab_order() {
        let corpus = vec![example("good good paper bad")];
        let vocab = build_vocab(&corpus, 1, 1, "train").unwrap();
        // Frequencies: good 2, bad 1, paper 1 -> order [good, bad, paper].
        let toks: Vec<String> = vec!["good", "good", "paper"].into_iter().map(String::from).collect();
        let feats: Vec<f64> = bow_features(&toks, &vocab);
        assert_eq!(vocab.tokens(), &["good".to_string(), "bad".to_string(), "paper".to_string()]);
        assert_eq!(feats, vec![2.0, 0.0, 1.0]);
    }

    #[test]
    fn bow_matches_hand_count_on_fixture_review() {
        let corpus = vec![example("the method is sound and the results are sound")];
        let vocab = build_vocab(&corpus, 1, 1, "train").unwrap();
        let toks = tokenize("sound results , sound method");
        let feats: Vec<f64> = bow_features(&toks, &vocab);
        // Hand count: sound 2, results 1, method 1, comma OOV.
        let mut hand = vec![0.0; vocab.len()];
        hand[vocab.position("sound").unwrap()] = 2.0;
        hand[vocab.position("results").unwrap()] = 1.0;
        hand[vocab.position("method").unwrap()] = 1.0;
        assert_eq!(feats, hand);
    }

    #[test]
    fn vocab_built_on_train_never_sees_test_tokens() {
        let train = vec![example("shared words in training")];
        let vocab = build_vocab(&train, 1, 1, "train").unwrap();
        // A token that only occurs in the held-out split must be absent.
        assert!(vocab.position("heldouttoken").is_none());
        assert_eq!(vocab.built_on, "train");
    }

    #[test]
    fn bow_dot_ones_equals_in_vocab_token_count() {
        let corpus = vec![example("alpha beta gamma alpha")];
        let vocab = build_vocab(&corpus, 1, 1, "train").unwrap();
        let toks = tokenize("alpha gamma unseen alpha");
        let feats: Vec<f64> = bow_features(&toks, &vocab);
        let total: f64 = feats.iter().sum();
        let in_vocab = toks.iter().filter(|t| vocab.position(t).is_some()).count();
        assert_eq!(total, in_vocab as f64);
    }
}
