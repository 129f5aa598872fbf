//! Parameter storage, optimizer and checkpoint primitives shared by every
//! architecture in the crate.

pub mod tape;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::scalar::{cast, Scalar};

pub use tape::{sigmoid, Gradients, Tape, Var};

/// Named tensor collection. Creation order is part of a model's identity:
/// optimizers, serialization and gradient bookkeeping all index by position.
#[derive(Debug, Clone)]
pub struct ParamStore<F: Scalar> {
    entries: Vec<ParamEntry<F>>,
}

#[derive(Debug, Clone)]
struct ParamEntry<F: Scalar> {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add_matrix(&mut self, name: &str, rows: usize, cols: usize, data: Vec<F>) -> usize {
        assert_eq!(data.len(), rows * cols, "tensor {name} shape mismatch");
        self.entries.push(ParamEntry {
            name: name.to_string(),
            rows,
            cols,
            data,
        });
        self.entries.len() - 1
    }

    pub fn add_vector(&mut self, name: &str, data: Vec<F>) -> usize {
        let rows = data.len();
        self.add_matrix(name, rows, 1, data)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.entries[id].name
    }

    pub fn shape(&self, id: usize) -> (usize, usize) {
        (self.entries[id].rows, self.entries[id].cols)
    }

    pub fn data(&self, id: usize) -> &[F] {
        &self.entries[id].data
    }

    pub fn data_mut(&mut self, id: usize) -> &mut [F] {
        &mut self.entries[id].data
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Sum of squares over one tensor.
    pub fn sq_norm(&self, id: usize) -> F {
        self.entries[id]
            .data
            .iter()
            .fold(F::zero(), |acc, &x| acc + x * x)
    }

    /// Serialize all tensors as little-endian f32 with a JSON manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut manifest = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        for e in &self.entries {
            manifest.push(TensorMeta {
                name: e.name.clone(),
                rows: e.rows,
                cols: e.cols,
                offset: blob.len() / 4,
                len: e.data.len(),
            });
            for v in &e.data {
                let f = v.to_f32().unwrap_or(f32::NAN);
                blob.extend_from_slice(&f.to_le_bytes());
            }
        }
        write_atomic(&dir.join("params.bin"), &blob)?;
        let manifest_json = serde_json::to_vec_pretty(&manifest)
            .map_err(|e| CoreError::json(dir.join("params.manifest.json"), e))?;
        write_atomic(&dir.join("params.manifest.json"), &manifest_json)?;
        Ok(())
    }

    /// Load tensors saved by [`ParamStore::save`] into this store; names and
    /// shapes must match the store's current layout.
    pub fn load_into(&mut self, dir: &Path) -> Result<()> {
        let manifest_path = dir.join("params.manifest.json");
        let manifest_raw =
            fs::read(&manifest_path).map_err(|e| CoreError::io(&manifest_path, e))?;
        let manifest: Vec<TensorMeta> = serde_json::from_slice(&manifest_raw)
            .map_err(|e| CoreError::json(&manifest_path, e))?;
        let bin_path = dir.join("params.bin");
        let blob = fs::read(&bin_path).map_err(|e| CoreError::io(&bin_path, e))?;

        let by_name: BTreeMap<&str, &TensorMeta> =
            manifest.iter().map(|m| (m.name.as_str(), m)).collect();
        for e in &mut self.entries {
            let meta = by_name.get(e.name.as_str()).ok_or_else(|| CoreError::ShapeMismatch {
                expected: format!("tensor {} in manifest", e.name),
                got: "missing".to_string(),
            })?;
            if meta.rows != e.rows || meta.cols != e.cols {
                return Err(CoreError::ShapeMismatch {
                    expected: format!("{} as {}x{}", e.name, e.rows, e.cols),
                    got: format!("{}x{}", meta.rows, meta.cols),
                });
            }
            for (i, v) in e.data.iter_mut().enumerate() {
                let at = (meta.offset + i) * 4;
                let bytes: [u8; 4] = blob[at..at + 4].try_into().map_err(|_| {
                    CoreError::ShapeMismatch {
                        expected: format!("params.bin covering tensor {}", e.name),
                        got: format!("{} bytes", blob.len()),
                    }
                })?;
                *v = cast::<F>(f32::from_le_bytes(bytes) as f64);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
    len: usize,
}

/// Write a file atomically (temp then rename) so concurrent readers never
/// observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("file"),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| CoreError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| CoreError::io(&tmp, e))?;
        f.sync_all().ok();
    }
    fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))?;
    Ok(())
}

/// Uniform(-bound, bound) initialization with bound = 1/sqrt(fan_in).
pub fn init_uniform<F: Scalar>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<F> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n)
        .map(|_| cast::<F>(rng.random_range(-bound..bound)))
        .collect()
}

/// Adam with optional decoupled weight decay, over an optional subset of
/// parameters. Keeping separate optimizer instances for the intermediate and
/// final losses gives each its own moment estimates.
pub struct Adam<F: Scalar> {
    lr: F,
    beta1: F,
    beta2: F,
    eps: F,
    weight_decay: F,
    t: i32,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    owned: Vec<bool>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(store: &ParamStore<F>, lr: f64) -> Self {
        Self::with_subset(store, lr, None)
    }

    /// `subset`: parameter ids this optimizer updates; None = all.
    pub fn with_subset(store: &ParamStore<F>, lr: f64, subset: Option<&[usize]>) -> Self {
        let owned = match subset {
            None => vec![true; store.len()],
            Some(ids) => {
                let mut owned = vec![false; store.len()];
                for &id in ids {
                    owned[id] = true;
                }
                owned
            }
        };
        Adam {
            lr: cast(lr),
            beta1: cast(0.9),
            beta2: cast(0.999),
            eps: cast(1e-8),
            weight_decay: F::zero(),
            t: 0,
            m: (0..store.len()).map(|i| vec![F::zero(); store.data(i).len()]).collect(),
            v: (0..store.len()).map(|i| vec![F::zero(); store.data(i).len()]).collect(),
            owned,
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = cast(weight_decay);
        self
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Gradients<F>) {
        self.t += 1;
        let b1t = F::one() - self.beta1.powi(self.t);
        let b2t = F::one() - self.beta2.powi(self.t);
        let decay = F::one() - self.lr * self.weight_decay;
        for id in 0..store.len() {
            if !self.owned[id] {
                continue;
            }
            let g = grads.get(id);
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            let data = store.data_mut(id);
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (F::one() - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (F::one() - self.beta2) * g[i] * g[i];
                let mhat = m[i] / b1t;
                let vhat = v[i] / b2t;
                data[i] = data[i] * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Central finite difference of `loss_fn` with respect to one parameter
/// element. Independent of the tape's backward pass; used as the gradient
/// oracle in tests and the acceptance suite.
pub fn finite_difference<F: Scalar>(
    store: &mut ParamStore<F>,
    param: usize,
    idx: usize,
    step: F,
    loss_fn: &mut dyn FnMut(&ParamStore<F>) -> F,
) -> F {
    let orig = store.data(param)[idx];
    store.data_mut(param)[idx] = orig + step;
    let up = loss_fn(store);
    store.data_mut(param)[idx] = orig - step;
    let down = loss_fn(store);
    store.data_mut(param)[idx] = orig;
    (up - down) / (cast::<F>(2.0) * step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn save_load_roundtrip_is_bit_exact_for_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store: ParamStore<f32> = ParamStore::new();
        let w = store.add_matrix("w", 4, 3, init_uniform(&mut rng, 12, 3));
        let b = store.add_vector("b", init_uniform(&mut rng, 4, 3));

        let dir = tempfile::tempdir().unwrap();
        store.save(dir.path()).unwrap();

        let mut other: ParamStore<f32> = ParamStore::new();
        other.add_matrix("w", 4, 3, vec![0.0; 12]);
        other.add_vector("b", vec![0.0; 4]);
        other.load_into(dir.path()).unwrap();

        assert_eq!(store.data(w), other.data(w));
        assert_eq!(store.data(b), other.data(b));
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut store: ParamStore<f32> = ParamStore::new();
        store.add_matrix("w", 2, 2, vec![1.0; 4]);
        let dir = tempfile::tempdir().unwrap();
        store.save(dir.path()).unwrap();

        let mut other: ParamStore<f32> = ParamStore::new();
        other.add_matrix("w", 4, 1, vec![0.0; 4]);
        assert!(other.load_into(dir.path()).is_err());
    }

    #[test]
    fn adam_reduces_quadratic_loss() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let p = store.add_vector("p", vec![3.0, -2.0]);
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..400 {
            let mut tape = Tape::new(&store);
            let v = tape.param(&store, p);
            let sq = tape.mul(v, v);
            let loss = tape.sum(sq);
            let grads = tape.backward(loss, &store);
            opt.step(&mut store, &grads);
        }
        assert!(store.data(p).iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn subset_optimizer_leaves_other_params_untouched() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let a = store.add_vector("a", vec![1.0]);
        let b = store.add_vector("b", vec![1.0]);
        let mut opt = Adam::with_subset(&store, 0.1, Some(&[a]));
        let mut tape = Tape::new(&store);
        let av = tape.param(&store, a);
        let bv = tape.param(&store, b);
        let s = tape.add(av, bv);
        let loss = tape.sum(s);
        let grads = tape.backward(loss, &store);
        opt.step(&mut store, &grads);
        assert_ne!(store.data(a)[0], 1.0);
        assert_eq!(store.data(b)[0], 1.0);
    }
}
