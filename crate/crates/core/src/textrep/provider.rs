//! Frozen embedding providers with a persistent on-disk cache.
//!
//! Cache layout: `<cache>/<model_id>/<sha256(text)>.vec` holds a pooled
//! vector as a little-endian float32 array; `<sha256(text)>.seq` holds the
//! per-token variant. `manifest.json` records `{model_id, dim, count}`.
//! Vectors are canonically f32 end to end so a cache round-trip is
//! bit-identical to a fresh computation.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::nn::write_atomic;
use crate::textrep::tokenize;

pub const DEFAULT_MAX_TOKENS: usize = 512;

/// Per-token embeddings with an alignment map onto word tokens. For providers
/// whose unit is the word the alignment is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceEmbedding {
    pub vectors: Vec<Vec<f32>>,
    pub words: Vec<String>,
    /// `word_index[t]` = index into `words` for vector position `t`.
    pub word_index: Vec<usize>,
}

/// A frozen text encoder: identical input text yields an identical vector.
pub trait EmbeddingProvider: Send + Sync {
    fn model_id(&self) -> &str;
    fn dim(&self) -> usize;
    fn max_tokens(&self) -> usize {
        DEFAULT_MAX_TOKENS
    }
    /// Single pooled vector for the text, truncated to the first
    /// `max_tokens` tokens.
    fn embed_pooled(&self, text: &str) -> Result<Vec<f32>>;
    /// One vector per token (up to `max_tokens`) plus word alignment.
    fn embed_sequence(&self, text: &str) -> Result<SequenceEmbedding>;
}

pub fn text_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive a child seed from a base seed and a stream index; stable across
/// worker counts.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream.wrapping_add(0x517cc1b727220a95)))
}

/// Deterministic hashed-projection encoder: every token maps to a fixed
/// pseudo-random vector, pooled embeddings are token means. No pretrained
/// weights; used by the synthetic benchmark and as the no-asset test backend.
pub struct HashProvider {
    model_id: String,
    dim: usize,
    max_tokens: usize,
    seed: u64,
    memo: RwLock<HashMap<String, Vec<f32>>>,
}

impl HashProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        HashProvider {
            model_id: format!("hash-{dim}-{seed}"),
            dim,
            max_tokens: DEFAULT_MAX_TOKENS,
            seed,
            memo: RwLock::new(HashMap::new()),
        }
    }

    pub fn with_max_tokens(mut self, max_tokens: usize) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    fn token_vector(&self, token: &str) -> Vec<f32> {
        if let Some(v) = self.memo.read().expect("memo lock").get(token) {
            return v.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, fnv1a(token)));
        let scale = 1.0 / (self.dim as f32).sqrt();
        let v: Vec<f32> = (0..self.dim)
            .map(|_| (rng.random::<f32>() * 2.0 - 1.0) * scale)
            .collect();
        self.memo
            .write()
            .expect("memo lock")
            .insert(token.to_string(), v.clone());
        v
    }
}

impl EmbeddingProvider for HashProvider {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    fn embed_pooled(&self, text: &str) -> Result<Vec<f32>> {
        let tokens = tokenize(text);
        let tokens = &tokens[..tokens.len().min(self.max_tokens)];
        let mut acc = vec![0.0f32; self.dim];
        for t in tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(t)) {
                *a += v;
            }
        }
        if !tokens.is_empty() {
            let inv = 1.0 / tokens.len() as f32;
            for a in acc.iter_mut() {
                *a *= inv;
            }
        }
        Ok(acc)
    }

    fn embed_sequence(&self, text: &str) -> Result<SequenceEmbedding> {
        let tokens = tokenize(text);
        let tokens: Vec<String> = tokens.into_iter().take(self.max_tokens).collect();
        let vectors = tokens.iter().map(|t| self.token_vector(t)).collect();
        let word_index = (0..tokens.len()).collect();
        Ok(SequenceEmbedding {
            vectors,
            words: tokens,
            word_index,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheManifest {
    model_id: String,
    dim: usize,
    count: usize,
}

fn model_dir(root: &Path, model_id: &str) -> PathBuf {
    root.join(model_id)
}

fn read_manifest(dir: &Path) -> Result<CacheManifest> {
    let path = dir.join("manifest.json");
    let raw = fs::read(&path).map_err(|e| CoreError::io(&path, e))?;
    serde_json::from_slice(&raw).map_err(|e| CoreError::json(&path, e))
}

fn write_manifest(dir: &Path, manifest: &CacheManifest) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(manifest)
        .map_err(|e| CoreError::json(dir.join("manifest.json"), e))?;
    write_atomic(&dir.join("manifest.json"), &bytes)
}

fn encode_vec(v: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(v.len() * 4);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn decode_vec(bytes: &[u8], path: &Path) -> Result<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(CoreError::MalformedRecord {
            path: path.to_path_buf(),
            reason: format!("vector file length {} not a multiple of 4", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn encode_seq(seq: &SequenceEmbedding, dim: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(seq.vectors.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(seq.words.len() as u32).to_le_bytes());
    for v in &seq.vectors {
        out.extend_from_slice(&encode_vec(v));
    }
    for i in &seq.word_index {
        out.extend_from_slice(&(*i as u32).to_le_bytes());
    }
    for w in &seq.words {
        let b = w.as_bytes();
        out.extend_from_slice(&(b.len() as u32).to_le_bytes());
        out.extend_from_slice(b);
    }
    out
}

fn decode_seq(bytes: &[u8], path: &Path) -> Result<SequenceEmbedding> {
    let bad = |reason: &str| CoreError::MalformedRecord {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut at = 0usize;
    let mut take_u32 = |bytes: &[u8]| -> Result<u32> {
        if at + 4 > bytes.len() {
            return Err(bad("truncated sequence file"));
        }
        let v = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        at += 4;
        Ok(v)
    };
    let n = take_u32(bytes)? as usize;
    let dim = take_u32(bytes)? as usize;
    let n_words = take_u32(bytes)? as usize;
    let mut vectors = Vec::with_capacity(n);
    for _ in 0..n {
        if at + dim * 4 > bytes.len() {
            return Err(bad("truncated vector block"));
        }
        vectors.push(decode_vec(&bytes[at..at + dim * 4], path)?);
        at += dim * 4;
    }
    let mut word_index = Vec::with_capacity(n);
    for _ in 0..n {
        if at + 4 > bytes.len() {
            return Err(bad("truncated alignment block"));
        }
        word_index.push(u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize);
        at += 4;
    }
    let mut words = Vec::with_capacity(n_words);
    for _ in 0..n_words {
        if at + 4 > bytes.len() {
            return Err(bad("truncated word block"));
        }
        let len = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        at += 4;
        if at + len > bytes.len() {
            return Err(bad("truncated word bytes"));
        }
        words.push(
            String::from_utf8(bytes[at..at + len].to_vec()).map_err(|_| bad("invalid utf8 word"))?,
        );
        at += len;
    }
    Ok(SequenceEmbedding {
        vectors,
        words,
        word_index,
    })
}

/// Read-only provider over a populated cache directory; a missing entry is an
/// explicit error, never a silent zero vector.
pub struct CacheDirProvider {
    root: PathBuf,
    model_id: String,
    dim: usize,
    max_tokens: usize,
}

impl CacheDirProvider {
    pub fn open(root: impl Into<PathBuf>, model_id: &str) -> Result<Self> {
        let root = root.into();
        let manifest = read_manifest(&model_dir(&root, model_id))?;
        if manifest.model_id != model_id {
            return Err(CoreError::InvalidConfig(format!(
                "cache manifest declares model {} but {} was requested",
                manifest.model_id, model_id
            )));
        }
        Ok(CacheDirProvider {
            root,
            model_id: model_id.to_string(),
            dim: manifest.dim,
            max_tokens: DEFAULT_MAX_TOKENS,
        })
    }
}

impl EmbeddingProvider for CacheDirProvider {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    fn embed_pooled(&self, text: &str) -> Result<Vec<f32>> {
        let hash = text_hash(text);
        let path = model_dir(&self.root, &self.model_id).join(format!("{hash}.vec"));
        match fs::read(&path) {
            Ok(bytes) => decode_vec(&bytes, &path),
            Err(_) => Err(CoreError::CacheMiss {
                model_id: self.model_id.clone(),
                text_hash: hash,
            }),
        }
    }

    fn embed_sequence(&self, text: &str) -> Result<SequenceEmbedding> {
        let hash = text_hash(text);
        let path = model_dir(&self.root, &self.model_id).join(format!("{hash}.seq"));
        match fs::read(&path) {
            Ok(bytes) => decode_seq(&bytes, &path),
            Err(_) => Err(CoreError::CacheMiss {
                model_id: self.model_id.clone(),
                text_hash: hash,
            }),
        }
    }
}

/// Write-through cache around any provider. Reads hit the cache first; misses
/// are computed by the inner provider and persisted atomically.
pub struct CachingProvider<P: EmbeddingProvider> {
    inner: P,
    root: PathBuf,
    count: RwLock<usize>,
}

impl<P: EmbeddingProvider> CachingProvider<P> {
    pub fn new(inner: P, cache_root: impl Into<PathBuf>) -> Result<Self> {
        let root = cache_root.into();
        let dir = model_dir(&root, inner.model_id());
        fs::create_dir_all(&dir).map_err(|e| CoreError::io(&dir, e))?;
        let count = fs::read_dir(&dir)
            .map_err(|e| CoreError::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| {
                let name = e.file_name();
                let name = name.to_string_lossy();
                name.ends_with(".vec") || name.ends_with(".seq")
            })
            .count();
        let provider = CachingProvider {
            inner,
            root,
            count: RwLock::new(count),
        };
        provider.flush_manifest()?;
        Ok(provider)
    }

    fn flush_manifest(&self) -> Result<()> {
        let dir = model_dir(&self.root, self.inner.model_id());
        write_manifest(
            &dir,
            &CacheManifest {
                model_id: self.inner.model_id().to_string(),
                dim: self.inner.dim(),
                count: *self.count.read().expect("count lock"),
            },
        )
    }

    fn store(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let dir = model_dir(&self.root, self.inner.model_id());
        write_atomic(&dir.join(name), bytes)?;
        *self.count.write().expect("count lock") += 1;
        self.flush_manifest()
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachingProvider<P> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn max_tokens(&self) -> usize {
        self.inner.max_tokens()
    }

    fn embed_pooled(&self, text: &str) -> Result<Vec<f32>> {
        let hash = text_hash(text);
        let path = model_dir(&self.root, self.inner.model_id()).join(format!("{hash}.vec"));
        if let Ok(bytes) = fs::read(&path) {
            return decode_vec(&bytes, &path);
        }
        let v = self.inner.embed_pooled(text)?;
        self.store(&format!("{hash}.vec"), &encode_vec(&v))?;
        Ok(v)
    }

    fn embed_sequence(&self, text: &str) -> Result<SequenceEmbedding> {
        let hash = text_hash(text);
        let path = model_dir(&self.root, self.inner.model_id()).join(format!("{hash}.seq"));
        if let Ok(bytes) = fs::read(&path) {
            return decode_seq(&bytes, &path);
        }
        let seq = self.inner.embed_sequence(text)?;
        self.store(&format!("{hash}.seq"), &encode_seq(&seq, self.inner.dim()))?;
        Ok(seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &[f32], b: &[f32]) -> f32 {
        let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
        let nb: f32 = b.iter().map(|x| x * x).sum::<f32>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn pooled_embedding_is_deterministic() {
        let p = HashProvider::new(16, 7);
        let a = p.embed_pooled("a solid contribution").unwrap();
        let b = p.embed_pooled("a solid contribution").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pooled_embedding_truncates_at_max_tokens() {
        let p = HashProvider::new(8, 7).with_max_tokens(6);
        let prefix = "one two three four five six";
        let long = format!("{prefix} seven eight nine ten eleven twelve");
        assert_eq!(p.embed_pooled(&long).unwrap(), p.embed_pooled(prefix).unwrap());
    }

    #[test]
    fn unrelated_texts_are_not_collinear() {
        let p = HashProvider::new(32, 7);
        let a = p.embed_pooled("the proofs are rigorous and complete").unwrap();
        let b = p.embed_pooled("figure three is unreadable").unwrap();
        let c = cosine(&a, &b);
        // Frozen regression value, computed once from this fixed provider.
        assert!(c < 1.0, "cosine {c}");
        assert!((c - (-0.223_896_5)).abs() < 1e-5, "cosine drifted: {c}");
    }

    #[test]
    fn sequence_embedding_has_one_vector_per_token() {
        let p = HashProvider::new(8, 7).with_max_tokens(4);
        let seq = p.embed_sequence("a b c d e f").unwrap();
        assert_eq!(seq.vectors.len(), 4);
        assert_eq!(seq.words.len(), 4);
        assert_eq!(seq.word_index, vec![0, 1, 2, 3]);
        assert!(p.embed_sequence("").unwrap().vectors.is_empty());
    }

    #[test]
    fn cache_roundtrip_is_bit_identical_and_keyed_by_model() {
        let dir = tempfile::tempdir().unwrap();
        let cached = CachingProvider::new(HashProvider::new(12, 3), dir.path()).unwrap();
        let text = "cache me";
        let fresh = cached.embed_pooled(text).unwrap();
        let again = cached.embed_pooled(text).unwrap();
        assert_eq!(fresh, again);

        let reader = CacheDirProvider::open(dir.path(), cached.model_id()).unwrap();
        assert_eq!(reader.embed_pooled(text).unwrap(), fresh);
        assert_eq!(reader.dim(), 12);

        // Different model_id must not alias onto the same entries.
        assert!(CacheDirProvider::open(dir.path(), "hash-12-4").is_err());
    }

    #[test]
    fn cache_miss_is_an_error_not_a_zero_vector() {
        let dir = tempfile::tempdir().unwrap();
        let writer = CachingProvider::new(HashProvider::new(6, 1), dir.path()).unwrap();
        writer.embed_pooled("present").unwrap();
        let reader = CacheDirProvider::open(dir.path(), writer.model_id()).unwrap();
        match reader.embed_pooled("absent") {
            Err(CoreError::CacheMiss { .. }) => {}
            other => panic!("expected cache miss, got {other:?}"),
        }
    }

    #[test]
    fn sequence_cache_roundtrip_preserves_alignment() {
        let dir = tempfile::tempdir().unwrap();
        let cached = CachingProvider::new(HashProvider::new(5, 9), dir.path()).unwrap();
        let seq = cached.embed_sequence("alpha beta gamma").unwrap();
        let reader = CacheDirProvider::open(dir.path(), cached.model_id()).unwrap();
        let read = reader.embed_sequence("alpha beta gamma").unwrap();
        assert_eq!(seq, read);
    }

    #[test]
    fn manifest_tracks_count() {
        let dir = tempfile::tempdir().unwrap();
        let cached = CachingProvider::new(HashProvider::new(4, 2), dir.path()).unwrap();
        cached.embed_pooled("one").unwrap();
        cached.embed_pooled("two").unwrap();
        let manifest = read_manifest(&dir.path().join(cached.model_id())).unwrap();
        assert_eq!(manifest.count, 2);
        assert_eq!(manifest.dim, 4);
    }
}
