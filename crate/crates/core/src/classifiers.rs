//! Non-causal classifier architectures (pooled feed-forward, GRU with
//! additive attention, bag-of-words linear, multi-head review fusion), their
//! shared training loop, and evaluation metrics.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledExample;
use crate::error::{CoreError, Result};
use crate::nn::{init_uniform, write_atomic, Adam, ParamStore, Tape, Var};
use crate::scalar::{cast, lex_cmp, Scalar};
use crate::textrep::{
    bow_features, embed_pooled, embed_sequence, tokenize, AlignedSequence, EmbeddingProvider,
    Vocab,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    PooledFfn,
    GruAttn,
    BowLinear,
    FusionMultihead,
}

/// Architecture shape; fully determines the parameter layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    /// Provider embedding dim, or vocabulary size for bow_linear.
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Additive attention projection size.
    pub attn_dim: usize,
    /// Fusion only.
    pub heads: usize,
    /// Fusion value projection size per head.
    pub head_dim: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(arch: Arch, input_dim: usize) -> Self {
        ModelSpec {
            arch,
            input_dim,
            hidden_dim: 128,
            attn_dim: 64,
            heads: 3,
            head_dim: 64,
            dropout: 0.2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(CoreError::InvalidConfig(
                "model dimensions must be >= 1".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::InvalidConfig(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub patience: usize,
    pub seed: u64,
    /// Decoupled weight decay; 0 disables it.
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 100,
            batch: 16,
            patience: 5,
            seed: 0,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Architecture-specific featurized input.
#[derive(Debug, Clone)]
pub enum ArchInput<F: Scalar> {
    Pooled(Vec<F>),
    Sequence(AlignedSequence<F>),
    Bow(Vec<F>),
    Reviews(Vec<Vec<F>>),
}

#[derive(Debug)]
enum ArchIds {
    Pooled {
        w1: usize,
        b1: usize,
        w2: usize,
        b2: usize,
    },
    Bow {
        w: usize,
        b: usize,
    },
    Gru {
        wz: usize,
        uz: usize,
        bz: usize,
        wr: usize,
        ur: usize,
        br: usize,
        wn: usize,
        un: usize,
        bn: usize,
        attn_w: usize,
        attn_b: usize,
        attn_q: usize,
        out_w: usize,
        out_b: usize,
    },
    Fusion {
        heads: Vec<FusionHeadIds>,
        out_w: usize,
        out_b: usize,
    },
}

#[derive(Debug)]
struct FusionHeadIds {
    attn_w: usize,
    attn_b: usize,
    attn_q: usize,
    value_w: usize,
    value_b: usize,
}

/// Tape-level forward artifacts.
pub struct ForwardOut {
    pub logit: Var,
    /// Attention over sequence positions (gru_attn) if the arch has one.
    pub attention: Option<Var>,
}

/// Plain-value prediction artifacts.
#[derive(Debug, Clone)]
pub struct PredictOut<F: Scalar> {
    pub prob: F,
    pub attention: Option<Vec<F>>,
    pub hidden_states: Option<Vec<Vec<F>>>,
}

/// One classifier: spec plus named parameters.
#[derive(Debug)]
pub struct Classifier<F: Scalar> {
    pub spec: ModelSpec,
    pub store: ParamStore<F>,
    ids: ArchIds,
}

impl<F: Scalar> Classifier<F> {
    /// Seeded parameter initialization; creation order is fixed per arch.
    pub fn init(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut store = ParamStore::new();
        let d = spec.input_dim;
        let h = spec.hidden_dim;
        let a = spec.attn_dim;
        let ids = match spec.arch {
            Arch::PooledFfn => ArchIds::Pooled {
                w1: store.add_matrix("ffn.w1", h, d, init_uniform(&mut rng, h * d, d)),
                b1: store.add_vector("ffn.b1", vec![F::zero(); h]),
                w2: store.add_vector("ffn.w2", init_uniform(&mut rng, h, h)),
                b2: store.add_vector("ffn.b2", vec![F::zero(); 1]),
            },
            Arch::BowLinear => ArchIds::Bow {
                w: store.add_vector("bow.w", init_uniform(&mut rng, d, d)),
                b: store.add_vector("bow.b", vec![F::zero(); 1]),
            },
            Arch::GruAttn => ArchIds::Gru {
                wz: store.add_matrix("gru.wz", h, d, init_uniform(&mut rng, h * d, d)),
                uz: store.add_matrix("gru.uz", h, h, init_uniform(&mut rng, h * h, h)),
                bz: store.add_vector("gru.bz", vec![F::zero(); h]),
                wr: store.add_matrix("gru.wr", h, d, init_uniform(&mut rng, h * d, d)),
                ur: store.add_matrix("gru.ur", h, h, init_uniform(&mut rng, h * h, h)),
                br: store.add_vector("gru.br", vec![F::zero(); h]),
                wn: store.add_matrix("gru.wn", h, d, init_uniform(&mut rng, h * d, d)),
                un: store.add_matrix("gru.un", h, h, init_uniform(&mut rng, h * h, h)),
                bn: store.add_vector("gru.bn", vec![F::zero(); h]),
                attn_w: store.add_matrix("attn.w", a, h, init_uniform(&mut rng, a * h, h)),
                attn_b: store.add_vector("attn.b", vec![F::zero(); a]),
                attn_q: store.add_vector("attn.q", init_uniform(&mut rng, a, a)),
                out_w: store.add_vector("out.w", init_uniform(&mut rng, h, h)),
                out_b: store.add_vector("out.b", vec![F::zero(); 1]),
            },
            Arch::FusionMultihead => {
                let mut heads = Vec::with_capacity(spec.heads);
                for i in 0..spec.heads {
                    heads.push(FusionHeadIds {
                        attn_w: store.add_matrix(
                            &format!("fusion.h{i}.attn_w"),
                            a,
                            d,
                            init_uniform(&mut rng, a * d, d),
                        ),
                        attn_b: store.add_vector(&format!("fusion.h{i}.attn_b"), vec![F::zero(); a]),
                        attn_q: store.add_vector(
                            &format!("fusion.h{i}.attn_q"),
                            init_uniform(&mut rng, a, a),
                        ),
                        value_w: store.add_matrix(
                            &format!("fusion.h{i}.value_w"),
                            spec.head_dim,
                            d,
                            init_uniform(&mut rng, spec.head_dim * d, d),
                        ),
                        value_b: store
                            .add_vector(&format!("fusion.h{i}.value_b"), vec![F::zero(); spec.head_dim]),
                    });
                }
                let fused = spec.heads * spec.head_dim;
                ArchIds::Fusion {
                    heads,
                    out_w: store.add_vector("out.w", init_uniform(&mut rng, fused, fused)),
                    out_b: store.add_vector("out.b", vec![F::zero(); 1]),
                }
            }
        };
        Ok(Classifier { spec, store, ids })
    }

    /// Additive attention: score_t = q . tanh(W s_t + b), softmax over t.
    #[allow(clippy::too_many_arguments)]
    fn attention_scores(
        &self,
        tape: &mut Tape<F>,
        w: usize,
        b: usize,
        q: usize,
        rows: usize,
        cols: usize,
        states: &[Var],
    ) -> Var {
        let wv = tape.param(&self.store, w);
        let bv = tape.param(&self.store, b);
        let qv = tape.param(&self.store, q);
        let scores: Vec<Var> = states
            .iter()
            .map(|&s| {
                let proj = tape.matvec(wv, s, rows, cols);
                let proj = tape.add(proj, bv);
                let act = tape.tanh(proj);
                tape.dot(qv, act)
            })
            .collect();
        let stacked = tape.concat(&scores);
        tape.softmax(stacked)
    }

    /// Forward pass on the tape. `dropout_mask`, when given, is an inverted
    /// dropout mask matching the arch's pooled representation size.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        input: &ArchInput<F>,
        dropout_mask: Option<&[F]>,
    ) -> Result<ForwardOut> {
        match (&self.ids, input) {
            (ArchIds::Pooled { w1, b1, w2, b2 }, ArchInput::Pooled(x)) => {
                if x.len() != self.spec.input_dim {
                    return Err(CoreError::ShapeMismatch {
                        expected: format!("pooled input dim {}", self.spec.input_dim),
                        got: format!("{}", x.len()),
                    });
                }
                let xv = tape.input(x.clone());
                let w1v = tape.param(&self.store, *w1);
                let b1v = tape.param(&self.store, *b1);
                let z = tape.matvec(w1v, xv, self.spec.hidden_dim, self.spec.input_dim);
                let z = tape.add(z, b1v);
                let mut hidden = tape.tanh(z);
                if let Some(mask) = dropout_mask {
                    let m = tape.input(mask.to_vec());
                    hidden = tape.mul(hidden, m);
                }
                let w2v = tape.param(&self.store, *w2);
                let b2v = tape.param(&self.store, *b2);
                let dot = tape.dot(w2v, hidden);
                let logit = tape.add(dot, b2v);
                Ok(ForwardOut {
                    logit,
                    attention: None,
                })
            }
            (ArchIds::Bow { w, b }, ArchInput::Bow(x)) => {
                if x.len() != self.spec.input_dim {
                    return Err(CoreError::ShapeMismatch {
                        expected: format!("bow input dim {}", self.spec.input_dim),
                        got: format!("{}", x.len()),
                    });
                }
                let xv = tape.input(x.clone());
                let wv = tape.param(&self.store, *w);
                let bv = tape.param(&self.store, *b);
                let dot = tape.dot(wv, xv);
                let logit = tape.add(dot, bv);
                Ok(ForwardOut {
                    logit,
                    attention: None,
                })
            }
            (
                ArchIds::Gru {
                    wz,
                    uz,
                    bz,
                    wr,
                    ur,
                    br,
                    wn,
                    un,
                    bn,
                    attn_w,
                    attn_b,
                    attn_q,
                    out_w,
                    out_b,
                },
                ArchInput::Sequence(seq),
            ) => {
                if seq.vectors.is_empty() {
                    return Err(CoreError::EmptyInput("gru_attn sequence".to_string()));
                }
                let d = self.spec.input_dim;
                let h = self.spec.hidden_dim;
                if seq.vectors[0].len() != d {
                    return Err(CoreError::ShapeMismatch {
                        expected: format!("sequence vectors of dim {d}"),
                        got: format!("{}", seq.vectors[0].len()),
                    });
                }
                let wzv = tape.param(&self.store, *wz);
                let uzv = tape.param(&self.store, *uz);
                let bzv = tape.param(&self.store, *bz);
                let wrv = tape.param(&self.store, *wr);
                let urv = tape.param(&self.store, *ur);
                let brv = tape.param(&self.store, *br);
                let wnv = tape.param(&self.store, *wn);
                let unv = tape.param(&self.store, *un);
                let bnv = tape.param(&self.store, *bn);

                // GRU recurrence:
                //   z_t = sigmoid(Wz x_t + Uz h_{t-1} + bz)
                //   r_t = sigmoid(Wr x_t + Ur h_{t-1} + br)
                //   n_t = tanh(Wn x_t + r_t * (Un h_{t-1}) + bn)
                //   h_t = (1 - z_t) * n_t + z_t * h_{t-1}
                let mut hid = tape.input(vec![F::zero(); h]);
                let mut states = Vec::with_capacity(seq.vectors.len());
                for x_t in &seq.vectors {
                    let xv = tape.input(x_t.clone());
                    let zx = tape.matvec(wzv, xv, h, d);
                    let zh = tape.matvec(uzv, hid, h, h);
                    let zs = tape.add(zx, zh);
                    let zs = tape.add(zs, bzv);
                    let z_gate = tape.sigmoid(zs);

                    let rx = tape.matvec(wrv, xv, h, d);
                    let rh = tape.matvec(urv, hid, h, h);
                    let rs = tape.add(rx, rh);
                    let rs = tape.add(rs, brv);
                    let r_gate = tape.sigmoid(rs);

                    let nx = tape.matvec(wnv, xv, h, d);
                    let nh = tape.matvec(unv, hid, h, h);
                    let gated = tape.mul(r_gate, nh);
                    let ns = tape.add(nx, gated);
                    let ns = tape.add(ns, bnv);
                    let n_state = tape.tanh(ns);

                    let neg_z = tape.scale(z_gate, -F::one());
                    let one_minus_z = tape.add_const(neg_z, F::one());
                    let keep = tape.mul(one_minus_z, n_state);
                    let carry = tape.mul(z_gate, hid);
                    hid = tape.add(keep, carry);
                    states.push(hid);
                }

                let alpha = self.attention_scores(
                    tape,
                    *attn_w,
                    *attn_b,
                    *attn_q,
                    self.spec.attn_dim,
                    h,
                    &states,
                );
                let mut pooled = tape.lincomb(alpha, &states);
                if let Some(mask) = dropout_mask {
                    let m = tape.input(mask.to_vec());
                    pooled = tape.mul(pooled, m);
                }
                let owv = tape.param(&self.store, *out_w);
                let obv = tape.param(&self.store, *out_b);
                let dot = tape.dot(owv, pooled);
                let logit = tape.add(dot, obv);
                Ok(ForwardOut {
                    logit,
                    attention: Some(alpha),
                })
            }
            (ArchIds::Fusion { out_w, out_b, .. }, ArchInput::Reviews(reviews)) => {
                let (fused, _) = self.fuse_on_tape(tape, reviews)?;
                let mut fused = fused;
                if let Some(mask) = dropout_mask {
                    let m = tape.input(mask.to_vec());
                    fused = tape.mul(fused, m);
                }
                let owv = tape.param(&self.store, *out_w);
                let obv = tape.param(&self.store, *out_b);
                let dot = tape.dot(owv, fused);
                let logit = tape.add(dot, obv);
                Ok(ForwardOut {
                    logit,
                    attention: None,
                })
            }
            _ => Err(CoreError::ShapeMismatch {
                expected: format!("input matching arch {:?}", self.spec.arch),
                got: "mismatched ArchInput variant".to_string(),
            }),
        }
    }

    /// Multi-head attention pooling over review vectors. Reviews are
    /// processed in a canonical (content-sorted) order so the output is
    /// bit-stable under input permutation.
    fn fuse_on_tape(&self, tape: &mut Tape<F>, reviews: &[Vec<F>]) -> Result<(Var, Vec<Var>)> {
        let ArchIds::Fusion { heads, .. } = &self.ids else {
            return Err(CoreError::ShapeMismatch {
                expected: "fusion arch".to_string(),
                got: format!("{:?}", self.spec.arch),
            });
        };
        if reviews.is_empty() {
            return Err(CoreError::EmptyInput("fuse_reviews review list".to_string()));
        }
        if reviews.iter().any(|r| r.len() != self.spec.input_dim) {
            return Err(CoreError::ShapeMismatch {
                expected: format!("review vectors of dim {}", self.spec.input_dim),
                got: "mixed dims".to_string(),
            });
        }
        let mut order: Vec<usize> = (0..reviews.len()).collect();
        order.sort_by(|&i, &j| lex_cmp(&reviews[i], &reviews[j]));

        let inputs: Vec<Var> = order.iter().map(|&i| tape.input(reviews[i].clone())).collect();
        let mut head_outputs = Vec::with_capacity(heads.len());
        let mut head_attn = Vec::with_capacity(heads.len());
        for head in heads {
            let alpha = self.attention_scores(
                tape,
                head.attn_w,
                head.attn_b,
                head.attn_q,
                self.spec.attn_dim,
                self.spec.input_dim,
                &inputs,
            );
            let vw = tape.param(&self.store, head.value_w);
            let vb = tape.param(&self.store, head.value_b);
            let values: Vec<Var> = inputs
                .iter()
                .map(|&r| {
                    let v = tape.matvec(vw, r, self.spec.head_dim, self.spec.input_dim);
                    tape.add(v, vb)
                })
                .collect();
            head_outputs.push(tape.lincomb(alpha, &values));
            head_attn.push(alpha);
        }
        Ok((tape.concat(&head_outputs), head_attn))
    }

    /// Fused representation (concatenated head outputs) for a set of review
    /// vectors; permutation-invariant in the review order.
    pub fn fuse_reviews(&self, reviews: &[Vec<F>]) -> Result<Vec<F>> {
        let mut tape = Tape::new(&self.store);
        let (fused, _) = self.fuse_on_tape(&mut tape, reviews)?;
        Ok(tape.value(fused).to_vec())
    }

    /// Per-head attention weights over reviews in canonical order; test and
    /// inspection hook.
    pub fn fusion_attention(&self, reviews: &[Vec<F>]) -> Result<Vec<Vec<F>>> {
        let mut tape = Tape::new(&self.store);
        let (_, attn) = self.fuse_on_tape(&mut tape, reviews)?;
        Ok(attn.into_iter().map(|a| tape.value(a).to_vec()).collect())
    }

    /// Probability plus attention weights where the arch has them. GRU
    /// hidden states are available separately through [`Classifier::gru_states`].
    pub fn predict_detailed(&self, input: &ArchInput<F>) -> Result<PredictOut<F>> {
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, input, None)?;
        let prob = crate::nn::sigmoid(tape.scalar(out.logit));
        let attention = out.attention.map(|a| tape.value(a).to_vec());
        Ok(PredictOut {
            prob,
            attention,
            hidden_states: None,
        })
    }

    /// Hidden states of the GRU for a sequence, read off the tape.
    pub fn gru_states(&self, seq: &AlignedSequence<F>) -> Result<Vec<Vec<F>>> {
        let ArchIds::Gru { .. } = &self.ids else {
            return Err(CoreError::ShapeMismatch {
                expected: "gru_attn arch".to_string(),
                got: format!("{:?}", self.spec.arch),
            });
        };
        let mut tape = Tape::new(&self.store);
        let d = self.spec.input_dim;
        let h = self.spec.hidden_dim;
        let ArchIds::Gru {
            wz,
            uz,
            bz,
            wr,
            ur,
            br,
            wn,
            un,
            bn,
            ..
        } = &self.ids
        else {
            unreachable!()
        };
        let wzv = tape.param(&self.store, *wz);
        let uzv = tape.param(&self.store, *uz);
        let bzv = tape.param(&self.store, *bz);
        let wrv = tape.param(&self.store, *wr);
        let urv = tape.param(&self.store, *ur);
        let brv = tape.param(&self.store, *br);
        let wnv = tape.param(&self.store, *wn);
        let unv = tape.param(&self.store, *un);
        let bnv = tape.param(&self.store, *bn);
        let mut hid = tape.input(vec![F::zero(); h]);
        let mut out = Vec::with_capacity(seq.vectors.len());
        for x_t in &seq.vectors {
            let xv = tape.input(x_t.clone());
            let zx = tape.matvec(wzv, xv, h, d);
            let zh = tape.matvec(uzv, hid, h, h);
            let zs = tape.add(zx, zh);
            let zs = tape.add(zs, bzv);
            let z_gate = tape.sigmoid(zs);
            let rx = tape.matvec(wrv, xv, h, d);
            let rh = tape.matvec(urv, hid, h, h);
            let rs = tape.add(rx, rh);
            let rs = tape.add(rs, brv);
            let r_gate = tape.sigmoid(rs);
            let nx = tape.matvec(wnv, xv, h, d);
            let nh = tape.matvec(unv, hid, h, h);
            let gated = tape.mul(r_gate, nh);
            let ns = tape.add(nx, gated);
            let ns = tape.add(ns, bnv);
            let n_state = tape.tanh(ns);
            let neg_z = tape.scale(z_gate, -F::one());
            let one_minus_z = tape.add_const(neg_z, F::one());
            let keep = tape.mul(one_minus_z, n_state);
            let carry = tape.mul(z_gate, hid);
            hid = tape.add(keep, carry);
            out.push(tape.value(hid).to_vec());
        }
        Ok(out)
    }

    /// Representation size the dropout mask must match.
    pub fn dropout_width(&self) -> usize {
        match self.spec.arch {
            Arch::PooledFfn | Arch::GruAttn => self.spec.hidden_dim,
            Arch::BowLinear => 0,
            Arch::FusionMultihead => self.spec.heads * self.spec.head_dim,
        }
    }
}

// --- metrics ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub confusion: Confusion,
}

fn f1(precision_num: usize, precision_den: usize, recall_num: usize, recall_den: usize) -> f64 {
    if precision_den == 0 || recall_den == 0 {
        return 0.0;
    }
    let p = precision_num as f64 / precision_den as f64;
    let r = recall_num as f64 / recall_den as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl Metrics {
    pub fn from_confusion(c: Confusion) -> Metrics {
        let n = c.tp + c.fp + c.fn_ + c.tn;
        let accuracy = if n == 0 {
            0.0
        } else {
            (c.tp + c.tn) as f64 / n as f64
        };
        let f1_pos = f1(c.tp, c.tp + c.fp, c.tp, c.tp + c.fn_);
        let f1_neg = f1(c.tn, c.tn + c.fn_, c.tn, c.tn + c.fp);
        let support_pos = c.tp + c.fn_;
        let support_neg = c.tn + c.fp;
        let macro_f1 = (f1_pos + f1_neg) / 2.0;
        let weighted_f1 = if n == 0 {
            0.0
        } else {
            (f1_pos * support_pos as f64 + f1_neg * support_neg as f64) / n as f64
        };
        Metrics {
            accuracy,
            macro_f1,
            weighted_f1,
            confusion: c,
        }
    }

    /// Hard predictions at the 0.5 threshold.
    pub fn from_probs(labels: &[u8], probs: &[f64]) -> Metrics {
        let preds: Vec<u8> = probs.iter().map(|&p| (p > 0.5) as u8).collect();
        Metrics::from_preds(labels, &preds)
    }

    pub fn from_preds(labels: &[u8], preds: &[u8]) -> Metrics {
        let mut c = Confusion {
            tp: 0,
            fp: 0,
            fn_: 0,
            tn: 0,
        };
        for (&y, &p) in labels.iter().zip(preds.iter()) {
            match (y, p) {
                (1, 1) => c.tp += 1,
                (0, 1) => c.fp += 1,
                (1, 0) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        Metrics::from_confusion(c)
    }
}

// --- training ---------------------------------------------------------------

/// Train on featurized inputs with early stopping on validation loss; returns
/// the best-validation checkpoint. Deterministic given (spec, data, config).
pub fn train<F: Scalar>(
    spec: &ModelSpec,
    train_inputs: &[(ArchInput<F>, u8)],
    val_inputs: &[(ArchInput<F>, u8)],
    config: &TrainConfig,
) -> Result<(Classifier<F>, Vec<EpochStats>)> {
    if train_inputs.is_empty() || val_inputs.is_empty() {
        return Err(CoreError::EmptyInput(
            "train and validation sets must be non-empty".to_string(),
        ));
    }
    let mut model = Classifier::init(spec.clone())?;
    let mut opt = Adam::new(&model.store, config.lr).with_weight_decay(config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::new();
    let mut best_loss = f64::INFINITY;
    let mut best_params = model.store.clone();
    let mut wait = 0usize;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_inputs.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch.max(1)) {
            let mut tape = Tape::new(&model.store);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let (input, label) = &train_inputs[i];
                let mask = sample_dropout_mask(&model, &mut rng);
                let out = model.forward(&mut tape, input, mask.as_deref())?;
                losses.push(tape.bce_with_logits(out.logit, cast::<F>(*label as f64)));
            }
            let loss = tape.mean_scalars(&losses);
            let loss_val = tape.scalar(loss).to_f64().unwrap_or(f64::NAN);
            if !loss_val.is_finite() {
                return Err(CoreError::Diverged(format!(
                    "non-finite loss at epoch {epoch}"
                )));
            }
            epoch_loss += loss_val;
            batches += 1;
            let grads = tape.backward(loss, &model.store);
            opt.step(&mut model.store, &grads);
        }
        let val_loss = mean_loss(&model, val_inputs)?;
        history.push(EpochStats {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_loss,
        });
        if val_loss < best_loss - 1e-12 {
            best_loss = val_loss;
            best_params = model.store.clone();
            wait = 0;
        } else {
            wait += 1;
            if wait > config.patience {
                break;
            }
        }
    }
    model.store = best_params;
    Ok((model, history))
}

fn sample_dropout_mask<F: Scalar>(model: &Classifier<F>, rng: &mut ChaCha8Rng) -> Option<Vec<F>> {
    let p = model.spec.dropout;
    let width = model.dropout_width();
    if p <= 0.0 || width == 0 {
        return None;
    }
    let keep_scale = cast::<F>(1.0 / (1.0 - p));
    Some(
        (0..width)
            .map(|_| {
                if rng.random::<f64>() < p {
                    F::zero()
                } else {
                    keep_scale
                }
            })
            .collect(),
    )
}

/// Mean BCE over a featurized set, dropout off.
pub fn mean_loss<F: Scalar>(model: &Classifier<F>, inputs: &[(ArchInput<F>, u8)]) -> Result<f64> {
    let mut total = 0.0f64;
    for (input, label) in inputs {
        let mut tape = Tape::new(&model.store);
        let out = model.forward(&mut tape, input, None)?;
        let loss = tape.bce_with_logits(out.logit, cast::<F>(*label as f64));
        total += tape.scalar(loss).to_f64().unwrap_or(f64::NAN);
    }
    let mean = total / inputs.len() as f64;
    if mean.is_finite() {
        Ok(mean)
    } else {
        Err(CoreError::Diverged("non-finite validation loss".to_string()))
    }
}

/// Metrics at threshold 0.5 over featurized inputs.
pub fn evaluate_inputs<F: Scalar>(
    model: &Classifier<F>,
    inputs: &[(ArchInput<F>, u8)],
) -> Result<Metrics> {
    if inputs.is_empty() {
        return Err(CoreError::EmptyInput("evaluate examples".to_string()));
    }
    let mut labels = Vec::with_capacity(inputs.len());
    let mut probs = Vec::with_capacity(inputs.len());
    for (input, label) in inputs {
        labels.push(*label);
        probs.push(
            self_prob(model, input)?
                .to_f64()
                .ok_or_else(|| CoreError::Diverged("non-finite probability".to_string()))?,
        );
    }
    Ok(Metrics::from_probs(&labels, &probs))
}

fn self_prob<F: Scalar>(model: &Classifier<F>, input: &ArchInput<F>) -> Result<F> {
    Ok(model.predict_detailed(input)?.prob)
}

// --- feature space and the high-level model wrapper -------------------------

/// How a trained model turns a labeled example into an [`ArchInput`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSpace {
    Bow { vocab: Vocab },
    Pooled { model_id: String, dim: usize },
    Sequence { model_id: String, dim: usize },
    Reviews { model_id: String, dim: usize },
}

impl FeatureSpace {
    pub fn for_arch(
        arch: Arch,
        provider: Option<&dyn EmbeddingProvider>,
        vocab: Option<&Vocab>,
    ) -> Result<FeatureSpace> {
        match arch {
            Arch::BowLinear => {
                let vocab = vocab.ok_or_else(|| {
                    CoreError::InvalidConfig("bow_linear requires a vocabulary".to_string())
                })?;
                Ok(FeatureSpace::Bow {
                    vocab: vocab.clone(),
                })
            }
            Arch::PooledFfn => {
                let p = provider.ok_or_else(missing_provider)?;
                Ok(FeatureSpace::Pooled {
                    model_id: p.model_id().to_string(),
                    dim: p.dim(),
                })
            }
            Arch::GruAttn => {
                let p = provider.ok_or_else(missing_provider)?;
                Ok(FeatureSpace::Sequence {
                    model_id: p.model_id().to_string(),
                    dim: p.dim(),
                })
            }
            Arch::FusionMultihead => {
                let p = provider.ok_or_else(missing_provider)?;
                Ok(FeatureSpace::Reviews {
                    model_id: p.model_id().to_string(),
                    dim: p.dim(),
                })
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            FeatureSpace::Bow { vocab } => vocab.len(),
            FeatureSpace::Pooled { dim, .. }
            | FeatureSpace::Sequence { dim, .. }
            | FeatureSpace::Reviews { dim, .. } => *dim,
        }
    }

    pub fn featurize<F: Scalar>(
        &self,
        provider: Option<&dyn EmbeddingProvider>,
        ex: &LabeledExample,
    ) -> Result<ArchInput<F>> {
        match self {
            FeatureSpace::Bow { vocab } => Ok(ArchInput::Bow(bow_features(
                &tokenize(&ex.treatment_text),
                vocab,
            ))),
            FeatureSpace::Pooled { .. } => {
                let p = provider.ok_or_else(missing_provider)?;
                Ok(ArchInput::Pooled(embed_pooled(p, &ex.treatment_text)?))
            }
            FeatureSpace::Sequence { .. } => {
                let p = provider.ok_or_else(missing_provider)?;
                Ok(ArchInput::Sequence(embed_sequence(p, &ex.treatment_text)?))
            }
            FeatureSpace::Reviews { .. } => {
                let p = provider.ok_or_else(missing_provider)?;
                let mut reviews = Vec::with_capacity(ex.treatment_parts().len());
                for part in ex.treatment_parts() {
                    reviews.push(embed_pooled(p, part)?);
                }
                Ok(ArchInput::Reviews(reviews))
            }
        }
    }
}

fn missing_provider() -> CoreError {
    CoreError::InvalidConfig("this architecture requires an embedding provider".to_string())
}

/// Classifier artifact: architecture, parameters, featurization and training
/// provenance. Reloading from disk reproduces identical predictions.
#[derive(Debug)]
pub struct TrainedModel<F: Scalar> {
    pub classifier: Classifier<F>,
    pub features: FeatureSpace,
    pub train_config: TrainConfig,
    pub history: Vec<EpochStats>,
}

impl<F: Scalar> TrainedModel<F> {
    pub fn featurize(
        &self,
        provider: Option<&dyn EmbeddingProvider>,
        ex: &LabeledExample,
    ) -> Result<ArchInput<F>> {
        self.features.featurize(provider, ex)
    }

    pub fn predict(
        &self,
        provider: Option<&dyn EmbeddingProvider>,
        ex: &LabeledExample,
    ) -> Result<PredictOut<F>> {
        let input = self.featurize(provider, ex)?;
        self.classifier.predict_detailed(&input)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let spec_json = serde_json::to_vec_pretty(&self.classifier.spec)
            .map_err(|e| CoreError::json(dir.join("spec.json"), e))?;
        write_atomic(&dir.join("spec.json"), &spec_json)?;
        self.classifier.store.save(dir)?;
        let cfg_json = serde_json::to_vec_pretty(&self.train_config)
            .map_err(|e| CoreError::json(dir.join("train_config.json"), e))?;
        write_atomic(&dir.join("train_config.json"), &cfg_json)?;
        let feat_json = serde_json::to_vec_pretty(&self.features)
            .map_err(|e| CoreError::json(dir.join("features.json"), e))?;
        write_atomic(&dir.join("features.json"), &feat_json)?;
        let hist_json = serde_json::to_vec_pretty(&self.history)
            .map_err(|e| CoreError::json(dir.join("history.json"), e))?;
        write_atomic(&dir.join("history.json"), &hist_json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read_json = |name: &str| -> Result<Vec<u8>> {
            let path = dir.join(name);
            fs::read(&path).map_err(|e| CoreError::io(&path, e))
        };
        let spec: ModelSpec = serde_json::from_slice(&read_json("spec.json")?)
            .map_err(|e| CoreError::json(dir.join("spec.json"), e))?;
        let train_config: TrainConfig = serde_json::from_slice(&read_json("train_config.json")?)
            .map_err(|e| CoreError::json(dir.join("train_config.json"), e))?;
        let mut features: FeatureSpace = serde_json::from_slice(&read_json("features.json")?)
            .map_err(|e| CoreError::json(dir.join("features.json"), e))?;
        if let FeatureSpace::Bow { vocab } = &mut features {
            vocab.reindex();
        }
        let history: Vec<EpochStats> = serde_json::from_slice(&read_json("history.json")?)
            .map_err(|e| CoreError::json(dir.join("history.json"), e))?;
        let mut classifier = Classifier::init(spec)?;
        classifier.store.load_into(dir)?;
        Ok(TrainedModel {
            classifier,
            features,
            train_config,
            history,
        })
    }
}

/// High-level training entry point over labeled examples.
pub fn train_on_examples<F: Scalar>(
    spec: &ModelSpec,
    features: &FeatureSpace,
    provider: Option<&dyn EmbeddingProvider>,
    train_examples: &[LabeledExample],
    val_examples: &[LabeledExample],
    config: &TrainConfig,
) -> Result<TrainedModel<F>> {
    let featurize_all = |examples: &[LabeledExample]| -> Result<Vec<(ArchInput<F>, u8)>> {
        examples
            .iter()
            .map(|ex| Ok((features.featurize(provider, ex)?, ex.label)))
            .collect()
    };
    let train_inputs = featurize_all(train_examples)?;
    let val_inputs = featurize_all(val_examples)?;
    let (classifier, history) = train(spec, &train_inputs, &val_inputs, config)?;
    Ok(TrainedModel {
        classifier,
        features: features.clone(),
        train_config: config.clone(),
        history,
    })
}

/// Metrics for a trained model over labeled examples.
pub fn evaluate<F: Scalar>(
    model: &TrainedModel<F>,
    provider: Option<&dyn EmbeddingProvider>,
    examples: &[LabeledExample],
) -> Result<Metrics> {
    if examples.is_empty() {
        return Err(CoreError::EmptyInput("evaluate examples".to_string()));
    }
    let mut labels = Vec::with_capacity(examples.len());
    let mut probs = Vec::with_capacity(examples.len());
    for ex in examples {
        labels.push(ex.label);
        probs.push(
            model
                .predict(provider, ex)?
                .prob
                .to_f64()
                .ok_or_else(|| CoreError::Diverged("non-finite probability".to_string()))?,
        );
    }
    Ok(Metrics::from_probs(&labels, &probs))
}
