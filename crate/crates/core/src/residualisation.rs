//! Deep residualisation with a natural-language confounder.
//!
//! A confounder branch maps the pooled abstract embedding to an intermediate
//! prediction; a treatment encoder (bag-of-words linear, GRU with attention,
//! or a black-box pooled feed-forward) produces an embedding `e`; the head
//! combines `[e ; intermediate]` into the final prediction. Training applies
//! two losses per batch: the intermediate BCE updates only the confounder
//! branch, the final BCE updates every parameter.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifiers::{ArchInput, FeatureSpace, TrainConfig};
use crate::corpus::LabeledExample;
use crate::error::{CoreError, Result};
use crate::explanations::{
    aggregate_global, attention_local, bow_weight_lexicon, extract_lexicon, surrogate_explain,
    LexiconOptions, LocalExplanation,
};
use crate::explanations::Lexicon;
use crate::nn::{init_uniform, write_atomic, Adam, Gradients, ParamStore, Tape, Var};
use crate::scalar::{cast, Scalar};
use crate::textrep::{embed_pooled, provider::derive_seed, EmbeddingProvider};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrVariant {
    Bow,
    GruAttn,
    BlackboxPooled,
}

impl fmt::Display for DrVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            DrVariant::Bow => "bow",
            DrVariant::GruAttn => "gru_attn",
            DrVariant::BlackboxPooled => "blackbox_pooled",
        };
        f.write_str(name)
    }
}

impl DrVariant {
    /// Short label used in lexicon outputs.
    pub fn lexicon_label(&self) -> &'static str {
        match self {
            DrVariant::Bow => "dr+bow",
            DrVariant::GruAttn => "dr+attn",
            DrVariant::BlackboxPooled => "dr+lime",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DrSpec {
    pub variant: DrVariant,
    /// Pooled abstract embedding dim.
    pub confounder_dim: usize,
    pub confounder_hidden: usize,
    /// Vocab size (bow) or provider dim (gru_attn, blackbox_pooled).
    pub treatment_dim: usize,
    /// Encoder output dim for the vector-valued encoders.
    pub hidden_dim: usize,
    pub attn_dim: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl DrSpec {
    pub fn new(variant: DrVariant, confounder_dim: usize, treatment_dim: usize) -> Self {
        DrSpec {
            variant,
            confounder_dim,
            confounder_hidden: 128,
            treatment_dim,
            hidden_dim: 128,
            attn_dim: 64,
            head_hidden: 32,
            dropout: 0.2,
            seed: 0,
        }
    }

    /// Encoder embedding width: 1 for the bag-of-words linear encoder.
    pub fn encoder_dim(&self) -> usize {
        match self.variant {
            DrVariant::Bow => 1,
            DrVariant::GruAttn | DrVariant::BlackboxPooled => self.hidden_dim,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.confounder_dim == 0
            || self.confounder_hidden == 0
            || self.treatment_dim == 0
            || self.hidden_dim == 0
            || self.head_hidden == 0
        {
            return Err(CoreError::InvalidConfig(
                "dr dimensions must be >= 1".to_string(),
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

#[derive(Debug)]
enum EncoderIds {
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
    },
    Pooled {
        w1: usize,
        b1: usize,
    },
}

#[derive(Debug)]
struct DrIds {
    conf_w1: usize,
    conf_b1: usize,
    conf_w2: usize,
    conf_b2: usize,
    encoder: EncoderIds,
    head_w1: usize,
    head_b1: usize,
    head_w2: usize,
    head_b2: usize,
}

/// Tape artifacts of one forward pass.
pub struct DrForward {
    pub y_logit: Var,
    pub yprime_logit: Var,
    pub attention: Option<Var>,
}

/// Plain-value prediction with encoder artifacts.
#[derive(Debug, Clone)]
pub struct DrPredict<F: Scalar> {
    pub y_prob: F,
    pub yprime_prob: F,
    /// Attention over positions for the gru_attn encoder.
    pub attention: Option<Vec<F>>,
    /// Nonzero per-n-gram linear contributions for the bow encoder.
    pub bow_contributions: Option<Vec<(usize, F)>>,
}

#[derive(Debug)]
pub struct DrModel<F: Scalar> {
    pub spec: DrSpec,
    pub store: ParamStore<F>,
    ids: DrIds,
}

impl<F: Scalar> DrModel<F> {
    pub fn init(spec: DrSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut store = ParamStore::new();
        let cd = spec.confounder_dim;
        let ch = spec.confounder_hidden;
        let conf_w1 = store.add_matrix("conf.w1", ch, cd, init_uniform(&mut rng, ch * cd, cd));
        let conf_b1 = store.add_vector("conf.b1", vec![F::zero(); ch]);
        let conf_w2 = store.add_vector("conf.w2", init_uniform(&mut rng, ch, ch));
        let conf_b2 = store.add_vector("conf.b2", vec![F::zero(); 1]);

        let d = spec.treatment_dim;
        let h = spec.hidden_dim;
        let a = spec.attn_dim;
        let encoder = match spec.variant {
            DrVariant::Bow => EncoderIds::Bow {
                w: store.add_vector("enc.w", init_uniform(&mut rng, d, d)),
                b: store.add_vector("enc.b", vec![F::zero(); 1]),
            },
            DrVariant::GruAttn => EncoderIds::Gru {
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
            },
            DrVariant::BlackboxPooled => EncoderIds::Pooled {
                w1: store.add_matrix("enc.w1", h, d, init_uniform(&mut rng, h * d, d)),
                b1: store.add_vector("enc.b1", vec![F::zero(); h]),
            },
        };

        let e_dim = spec.encoder_dim() + 1;
        let hh = spec.head_hidden;
        let head_w1 = store.add_matrix("head.w1", hh, e_dim, init_uniform(&mut rng, hh * e_dim, e_dim));
        let head_b1 = store.add_vector("head.b1", vec![F::zero(); hh]);
        let head_w2 = store.add_vector("head.w2", init_uniform(&mut rng, hh, hh));
        let head_b2 = store.add_vector("head.b2", vec![F::zero(); 1]);

        Ok(DrModel {
            spec,
            store,
            ids: DrIds {
                conf_w1,
                conf_b1,
                conf_w2,
                conf_b2,
                encoder,
                head_w1,
                head_b1,
                head_w2,
                head_b2,
            },
        })
    }

    /// Parameter ids of the confounder branch; the intermediate loss may
    /// update only these.
    pub fn confounder_param_ids(&self) -> Vec<usize> {
        vec![
            self.ids.conf_w1,
            self.ids.conf_b1,
            self.ids.conf_w2,
            self.ids.conf_b2,
        ]
    }

    /// Parameter ids of the treatment encoder.
    pub fn encoder_param_ids(&self) -> Vec<usize> {
        match &self.ids.encoder {
            EncoderIds::Bow { w, b } => vec![*w, *b],
            EncoderIds::Gru {
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
            } => vec![*wz, *uz, *bz, *wr, *ur, *br, *wn, *un, *bn, *attn_w, *attn_b, *attn_q],
            EncoderIds::Pooled { w1, b1 } => vec![*w1, *b1],
        }
    }

    pub fn head_param_ids(&self) -> Vec<usize> {
        vec![
            self.ids.head_w1,
            self.ids.head_b1,
            self.ids.head_w2,
            self.ids.head_b2,
        ]
    }

    /// L2 norm of the bag-of-words encoder weights.
    pub fn bow_weight_norm(&self) -> Option<F> {
        match &self.ids.encoder {
            EncoderIds::Bow { w, .. } => Some(self.store.sq_norm(*w).sqrt()),
            _ => None,
        }
    }

    /// Raw bag-of-words encoder weights (bow variant only).
    pub fn bow_weights(&self) -> Option<&[F]> {
        match &self.ids.encoder {
            EncoderIds::Bow { w, .. } => Some(self.store.data(*w)),
            _ => None,
        }
    }

    fn encode(
        &self,
        tape: &mut Tape<F>,
        treatment: &ArchInput<F>,
    ) -> Result<(Var, Option<Var>)> {
        let spec = &self.spec;
        match (&self.ids.encoder, treatment) {
            (EncoderIds::Bow { w, b }, ArchInput::Bow(x)) => {
                if x.len() != spec.treatment_dim {
                    return Err(shape_err(spec.treatment_dim, x.len()));
                }
                let xv = tape.input(x.clone());
                let wv = tape.param(&self.store, *w);
                let bv = tape.param(&self.store, *b);
                let dot = tape.dot(wv, xv);
                Ok((tape.add(dot, bv), None))
            }
            (
                EncoderIds::Gru {
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
                },
                ArchInput::Sequence(seq),
            ) => {
                if seq.vectors.is_empty() {
                    return Err(CoreError::EmptyInput("dr gru sequence".to_string()));
                }
                let d = spec.treatment_dim;
                let h = spec.hidden_dim;
                if seq.vectors[0].len() != d {
                    return Err(shape_err(d, seq.vectors[0].len()));
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
                let wav = tape.param(&self.store, *attn_w);
                let bav = tape.param(&self.store, *attn_b);
                let qav = tape.param(&self.store, *attn_q);
                let scores: Vec<Var> = states
                    .iter()
                    .map(|&s| {
                        let proj = tape.matvec(wav, s, spec.attn_dim, h);
                        let proj = tape.add(proj, bav);
                        let act = tape.tanh(proj);
                        tape.dot(qav, act)
                    })
                    .collect();
                let stacked = tape.concat(&scores);
                let alpha = tape.softmax(stacked);
                let pooled = tape.lincomb(alpha, &states);
                Ok((pooled, Some(alpha)))
            }
            (EncoderIds::Pooled { w1, b1 }, ArchInput::Pooled(x)) => {
                if x.len() != spec.treatment_dim {
                    return Err(shape_err(spec.treatment_dim, x.len()));
                }
                let xv = tape.input(x.clone());
                let wv = tape.param(&self.store, *w1);
                let bv = tape.param(&self.store, *b1);
                let z = tape.matvec(wv, xv, spec.hidden_dim, spec.treatment_dim);
                let z = tape.add(z, bv);
                Ok((tape.tanh(z), None))
            }
            _ => Err(CoreError::ShapeMismatch {
                expected: format!("treatment input for variant {}", spec.variant),
                got: "mismatched ArchInput variant".to_string(),
            }),
        }
    }

    /// Full forward: intermediate prediction from the confounder embedding,
    /// encoder embedding from the treatment, head over the concatenation.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        confounder: &[F],
        treatment: &ArchInput<F>,
        dropout_mask: Option<&[F]>,
    ) -> Result<DrForward> {
        if confounder.len() != self.spec.confounder_dim {
            return Err(shape_err(self.spec.confounder_dim, confounder.len()));
        }
        let cv = tape.input(confounder.to_vec());
        let w1 = tape.param(&self.store, self.ids.conf_w1);
        let b1 = tape.param(&self.store, self.ids.conf_b1);
        let w2 = tape.param(&self.store, self.ids.conf_w2);
        let b2 = tape.param(&self.store, self.ids.conf_b2);
        let c1 = tape.matvec(w1, cv, self.spec.confounder_hidden, self.spec.confounder_dim);
        let c1 = tape.add(c1, b1);
        let c1 = tape.tanh(c1);
        let cdot = tape.dot(w2, c1);
        let yprime_logit = tape.add(cdot, b2);
        let yprime = tape.sigmoid(yprime_logit);

        let (mut embedding, attention) = self.encode(tape, treatment)?;
        if let Some(mask) = dropout_mask {
            let m = tape.input(mask.to_vec());
            embedding = tape.mul(embedding, m);
        }

        let head_in = tape.concat(&[embedding, yprime]);
        let hw1 = tape.param(&self.store, self.ids.head_w1);
        let hb1 = tape.param(&self.store, self.ids.head_b1);
        let hw2 = tape.param(&self.store, self.ids.head_w2);
        let hb2 = tape.param(&self.store, self.ids.head_b2);
        let h = tape.matvec(hw1, head_in, self.spec.head_hidden, self.spec.encoder_dim() + 1);
        let h = tape.add(h, hb1);
        let h = tape.tanh(h);
        let hdot = tape.dot(hw2, h);
        let y_logit = tape.add(hdot, hb2);

        Ok(DrForward {
            y_logit,
            yprime_logit,
            attention,
        })
    }

    pub fn predict(&self, confounder: &[F], treatment: &ArchInput<F>) -> Result<DrPredict<F>> {
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, confounder, treatment, None)?;
        let attention = out.attention.map(|a| tape.value(a).to_vec());
        let bow_contributions = match (&self.ids.encoder, treatment) {
            (EncoderIds::Bow { w, .. }, ArchInput::Bow(x)) => {
                let weights = self.store.data(*w);
                Some(
                    x.iter()
                        .enumerate()
                        .filter(|(_, v)| **v != F::zero())
                        .map(|(i, v)| (i, weights[i] * *v))
                        .collect(),
                )
            }
            _ => None,
        };
        Ok(DrPredict {
            y_prob: crate::nn::sigmoid(tape.scalar(out.y_logit)),
            yprime_prob: crate::nn::sigmoid(tape.scalar(out.yprime_logit)),
            attention,
            bow_contributions,
        })
    }

    fn dropout_width(&self) -> usize {
        self.spec.encoder_dim()
    }
}

fn shape_err(expected: usize, got: usize) -> CoreError {
    CoreError::ShapeMismatch {
        expected: format!("{expected}"),
        got: format!("{got}"),
    }
}

// --- training ----------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DrTrainConfig {
    pub base: TrainConfig,
    /// Relative weight on the intermediate loss (final loss weight is 1).
    pub intermediate_weight: f64,
}

impl Default for DrTrainConfig {
    fn default() -> Self {
        DrTrainConfig {
            base: TrainConfig::default(),
            intermediate_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DrEpochStats {
    pub epoch: usize,
    pub train_final: f64,
    pub train_intermediate: f64,
    pub val_final: f64,
    pub val_intermediate: f64,
}

/// One featurized training unit.
#[derive(Debug, Clone)]
pub struct DrInput<F: Scalar> {
    pub confounder: Vec<F>,
    pub treatment: ArchInput<F>,
    pub label: u8,
}

/// Dual-loss training. Per batch the intermediate gradient updates only the
/// confounder branch, then the final gradient updates all parameters; both
/// gradients are taken at the batch-start parameters (intermediate applied
/// first). Early stopping tracks the validation final loss.
pub fn dr_train<F: Scalar>(
    spec: &DrSpec,
    train: &[DrInput<F>],
    val: &[DrInput<F>],
    config: &DrTrainConfig,
) -> Result<(DrModel<F>, Vec<DrEpochStats>)> {
    if train.is_empty() || val.is_empty() {
        return Err(CoreError::EmptyInput(
            "dr train and validation sets".to_string(),
        ));
    }
    let mut model = DrModel::init(spec.clone())?;
    let conf_ids = model.confounder_param_ids();
    let mut opt_intermediate = Adam::with_subset(&model.store, config.base.lr, Some(&conf_ids))
        .with_weight_decay(config.base.weight_decay);
    let mut opt_final = Adam::new(&model.store, config.base.lr).with_weight_decay(config.base.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.base.seed);
    let mut history = Vec::new();
    let mut best_loss = f64::INFINITY;
    let mut best_params = model.store.clone();
    let mut wait = 0usize;

    for epoch in 0..config.base.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut fin_sum = 0.0f64;
        let mut int_sum = 0.0f64;
        let mut batches = 0usize;
        for batch in order.chunks(config.base.batch.max(1)) {
            let mut tape = Tape::new(&model.store);
            let mut li = Vec::with_capacity(batch.len());
            let mut lf = Vec::with_capacity(batch.len());
            for &i in batch {
                let item = &train[i];
                let mask = sample_mask(&model, &mut rng);
                let out = model.forward(&mut tape, &item.confounder, &item.treatment, mask.as_deref())?;
                let target = cast::<F>(item.label as f64);
                li.push(tape.bce_with_logits(out.yprime_logit, target));
                lf.push(tape.bce_with_logits(out.y_logit, target));
            }
            let mean_li = tape.mean_scalars(&li);
            let mean_li = tape.scale(mean_li, cast::<F>(config.intermediate_weight));
            let mean_lf = tape.mean_scalars(&lf);
            let li_val = tape.scalar(mean_li).to_f64().unwrap_or(f64::NAN);
            let lf_val = tape.scalar(mean_lf).to_f64().unwrap_or(f64::NAN);
            if !li_val.is_finite() || !lf_val.is_finite() {
                return Err(CoreError::Diverged(format!(
                    "non-finite dr loss at epoch {epoch} (intermediate {li_val}, final {lf_val})"
                )));
            }
            int_sum += li_val;
            fin_sum += lf_val;
            batches += 1;

            let grads_i = tape.backward(mean_li, &model.store);
            opt_intermediate.step(&mut model.store, &grads_i);
            let grads_f = tape.backward(mean_lf, &model.store);
            opt_final.step(&mut model.store, &grads_f);
        }

        let (val_final, val_intermediate) = dr_mean_losses(&model, val)?;
        history.push(DrEpochStats {
            epoch,
            train_final: fin_sum / batches.max(1) as f64,
            train_intermediate: int_sum / batches.max(1) as f64,
            val_final,
            val_intermediate,
        });
        if val_final < best_loss - 1e-12 {
            best_loss = val_final;
            best_params = model.store.clone();
            wait = 0;
        } else {
            wait += 1;
            if wait > config.base.patience {
                break;
            }
        }
    }
    model.store = best_params;
    Ok((model, history))
}

fn sample_mask<F: Scalar>(model: &DrModel<F>, rng: &mut ChaCha8Rng) -> Option<Vec<F>> {
    let p = model.spec.dropout;
    let width = model.dropout_width();
    if p <= 0.0 || width == 0 {
        return None;
    }
    let keep = cast::<F>(1.0 / (1.0 - p));
    Some(
        (0..width)
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect(),
    )
}

/// (final, intermediate) mean losses with dropout off.
pub fn dr_mean_losses<F: Scalar>(model: &DrModel<F>, inputs: &[DrInput<F>]) -> Result<(f64, f64)> {
    let mut fin = 0.0f64;
    let mut int = 0.0f64;
    for item in inputs {
        let mut tape = Tape::new(&model.store);
        let out = model.forward(&mut tape, &item.confounder, &item.treatment, None)?;
        let target = cast::<F>(item.label as f64);
        let li = tape.bce_with_logits(out.yprime_logit, target);
        let lf = tape.bce_with_logits(out.y_logit, target);
        int += tape.scalar(li).to_f64().unwrap_or(f64::NAN);
        fin += tape.scalar(lf).to_f64().unwrap_or(f64::NAN);
    }
    let n = inputs.len() as f64;
    let (fin, int) = (fin / n, int / n);
    if fin.is_finite() && int.is_finite() {
        Ok((fin, int))
    } else {
        Err(CoreError::Diverged("non-finite dr validation loss".to_string()))
    }
}

/// Gradients of the batch-mean intermediate and final losses at the current
/// parameters; the gradient-isolation checks probe these directly.
pub fn dr_loss_gradients<F: Scalar>(
    model: &DrModel<F>,
    inputs: &[DrInput<F>],
) -> Result<(Gradients<F>, Gradients<F>)> {
    let mut tape = Tape::new(&model.store);
    let mut li = Vec::with_capacity(inputs.len());
    let mut lf = Vec::with_capacity(inputs.len());
    for item in inputs {
        let out = model.forward(&mut tape, &item.confounder, &item.treatment, None)?;
        let target = cast::<F>(item.label as f64);
        li.push(tape.bce_with_logits(out.yprime_logit, target));
        lf.push(tape.bce_with_logits(out.y_logit, target));
    }
    let mean_li = tape.mean_scalars(&li);
    let mean_lf = tape.mean_scalars(&lf);
    Ok((
        tape.backward(mean_li, &model.store),
        tape.backward(mean_lf, &model.store),
    ))
}

// --- trained wrapper -----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DrFeatures {
    pub treatment: FeatureSpace,
    pub confounder_model_id: String,
    pub confounder_dim: usize,
}

/// Trained DR artifact with featurization provenance.
#[derive(Debug)]
pub struct DrTrained<F: Scalar> {
    pub model: DrModel<F>,
    pub features: DrFeatures,
    pub train_config: DrTrainConfig,
    pub history: Vec<DrEpochStats>,
}

impl<F: Scalar> DrTrained<F> {
    pub fn featurize(
        &self,
        provider: Option<&dyn EmbeddingProvider>,
        ex: &LabeledExample,
    ) -> Result<DrInput<F>> {
        let treatment = self.features.treatment.featurize(provider, ex)?;
        let confounder = self.embed_confounder(provider, ex)?;
        Ok(DrInput {
            confounder,
            treatment,
            label: ex.label,
        })
    }

    pub fn embed_confounder(
        &self,
        provider: Option<&dyn EmbeddingProvider>,
        ex: &LabeledExample,
    ) -> Result<Vec<F>> {
        let p = provider.ok_or_else(|| {
            CoreError::InvalidConfig("dr models require an embedding provider".to_string())
        })?;
        embed_pooled(p, &ex.confounder_text)
    }

    pub fn predict(
        &self,
        provider: Option<&dyn EmbeddingProvider>,
        ex: &LabeledExample,
    ) -> Result<DrPredict<F>> {
        let input = self.featurize(provider, ex)?;
        self.model.predict(&input.confounder, &input.treatment)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let spec_json = serde_json::to_vec_pretty(&self.model.spec)
            .map_err(|e| CoreError::json(dir.join("spec.json"), e))?;
        write_atomic(&dir.join("spec.json"), &spec_json)?;
        self.model.store.save(dir)?;
        let cfg = serde_json::to_vec_pretty(&self.train_config)
            .map_err(|e| CoreError::json(dir.join("train_config.json"), e))?;
        write_atomic(&dir.join("train_config.json"), &cfg)?;
        let feats = serde_json::to_vec_pretty(&self.features)
            .map_err(|e| CoreError::json(dir.join("features.json"), e))?;
        write_atomic(&dir.join("features.json"), &feats)?;
        let hist = serde_json::to_vec_pretty(&self.history)
            .map_err(|e| CoreError::json(dir.join("history.json"), e))?;
        write_atomic(&dir.join("history.json"), &hist)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<Vec<u8>> {
            let path = dir.join(name);
            fs::read(&path).map_err(|e| CoreError::io(&path, e))
        };
        let spec: DrSpec = serde_json::from_slice(&read("spec.json")?)
            .map_err(|e| CoreError::json(dir.join("spec.json"), e))?;
        let train_config: DrTrainConfig = serde_json::from_slice(&read("train_config.json")?)
            .map_err(|e| CoreError::json(dir.join("train_config.json"), e))?;
        let mut features: DrFeatures = serde_json::from_slice(&read("features.json")?)
            .map_err(|e| CoreError::json(dir.join("features.json"), e))?;
        if let FeatureSpace::Bow { vocab } = &mut features.treatment {
            vocab.reindex();
        }
        let history: Vec<DrEpochStats> = serde_json::from_slice(&read("history.json")?)
            .map_err(|e| CoreError::json(dir.join("history.json"), e))?;
        let mut model = DrModel::init(spec)?;
        model.store.load_into(dir)?;
        Ok(DrTrained {
            model,
            features,
            train_config,
            history,
        })
    }

    /// Extract the deconfounded lexicon from test examples. The bow variant
    /// ranks vocabulary n-grams by absolute encoder weight; gru_attn
    /// aggregates attention; blackbox_pooled runs the local surrogate on the
    /// full forward function with the confounder embedding held fixed per
    /// example.
    pub fn extract_lexicon(
        &self,
        provider: Option<&dyn EmbeddingProvider>,
        test_examples: &[LabeledExample],
        opts: &LexiconOptions,
    ) -> Result<Lexicon> {
        if test_examples.is_empty() {
            return Err(CoreError::EmptyInput("dr lexicon test examples".to_string()));
        }
        let label = self.model.spec.variant.lexicon_label();
        match self.model.spec.variant {
            DrVariant::Bow => {
                let FeatureSpace::Bow { vocab } = &self.features.treatment else {
                    return Err(CoreError::InvalidConfig(
                        "bow variant without a vocabulary".to_string(),
                    ));
                };
                let weights: Vec<f64> = self
                    .model
                    .bow_weights()
                    .expect("bow variant has bow weights")
                    .iter()
                    .map(|w| w.to_f64().unwrap_or(0.0))
                    .collect();
                bow_weight_lexicon(vocab, &weights, test_examples, opts.k, label)
            }
            DrVariant::GruAttn => {
                let mut locals = Vec::with_capacity(test_examples.len());
                for ex in test_examples {
                    let input = self.featurize(provider, ex)?;
                    let out = self.model.predict(&input.confounder, &input.treatment)?;
                    let attention: Vec<f64> = out
                        .attention
                        .expect("gru variant emits attention")
                        .iter()
                        .map(|a| a.to_f64().unwrap_or(0.0))
                        .collect();
                    let ArchInput::Sequence(seq) = input.treatment else {
                        unreachable!("gru variant featurizes to a sequence");
                    };
                    locals.push(attention_local(&ex.example_id, &seq.words, &seq.word_index, &attention));
                }
                let global = aggregate_global(&locals, opts.min_count, "test")?;
                extract_lexicon(&global, opts.k, label)
            }
            DrVariant::BlackboxPooled => {
                let p = provider.ok_or_else(|| {
                    CoreError::InvalidConfig("dr+lime requires an embedding provider".to_string())
                })?;
                let mut locals: Vec<LocalExplanation> = Vec::with_capacity(test_examples.len());
                for (idx, ex) in test_examples.iter().enumerate() {
                    let confounder = self.embed_confounder(provider, ex)?;
                    let predict_fn = |text: &str| -> Result<f64> {
                        let pooled = embed_pooled::<F>(p, text)?;
                        let out = self.model.predict(&confounder, &ArchInput::Pooled(pooled))?;
                        out.y_prob
                            .to_f64()
                            .ok_or_else(|| CoreError::Diverged("non-finite dr prob".to_string()))
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
                extract_lexicon(&global, opts.k, label)
            }
        }
    }
}

/// Featurize labeled examples for a DR variant.
pub fn dr_featurize_all<F: Scalar>(
    features: &DrFeatures,
    provider: Option<&dyn EmbeddingProvider>,
    examples: &[LabeledExample],
) -> Result<Vec<DrInput<F>>> {
    let p = provider.ok_or_else(|| {
        CoreError::InvalidConfig("dr models require an embedding provider".to_string())
    })?;
    examples
        .iter()
        .map(|ex| {
            Ok(DrInput {
                confounder: embed_pooled(p, &ex.confounder_text)?,
                treatment: features.treatment.featurize(provider, ex)?,
                label: ex.label,
            })
        })
        .collect()
}

/// Train a DR variant over labeled examples.
pub fn dr_train_on_examples<F: Scalar>(
    spec: &DrSpec,
    features: &DrFeatures,
    provider: Option<&dyn EmbeddingProvider>,
    train_examples: &[LabeledExample],
    val_examples: &[LabeledExample],
    config: &DrTrainConfig,
) -> Result<DrTrained<F>> {
    let train_inputs = dr_featurize_all::<F>(features, provider, train_examples)?;
    let val_inputs = dr_featurize_all::<F>(features, provider, val_examples)?;
    let (model, history) = dr_train(spec, &train_inputs, &val_inputs, config)?;
    Ok(DrTrained {
        model,
        features: features.clone(),
        train_config: config.clone(),
        history,
    })
}

/// Accuracy of the intermediate (confounder-only) prediction.
pub fn yprime_accuracy<F: Scalar>(model: &DrModel<F>, inputs: &[DrInput<F>]) -> Result<f64> {
    let mut correct = 0usize;
    for item in inputs {
        let out = model.predict(&item.confounder, &item.treatment)?;
        let pred = (out.yprime_prob.to_f64().unwrap_or(0.5) > 0.5) as u8;
        if pred == item.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / inputs.len() as f64)
}

/// Accuracy of the final prediction.
pub fn dr_accuracy<F: Scalar>(model: &DrModel<F>, inputs: &[DrInput<F>]) -> Result<f64> {
    let mut correct = 0usize;
    for item in inputs {
        let out = model.predict(&item.confounder, &item.treatment)?;
        let pred = (out.y_prob.to_f64().unwrap_or(0.5) > 0.5) as u8;
        if pred == item.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / inputs.len() as f64)
}
