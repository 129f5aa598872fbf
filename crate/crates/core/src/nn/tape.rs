//! Reverse-mode autodiff on a flat tape of vector-valued nodes.
//!
//! Every node holds a `Vec<F>`; matrices live in the [`ParamStore`] and enter
//! the tape through `matvec`. The tape is rebuilt per forward pass, which
//! keeps training deterministic and makes gradient isolation structural:
//! parameters that never enter a loss subgraph receive exactly zero gradient.

use std::collections::HashMap;

use crate::nn::ParamStore;
use crate::scalar::{cast, Scalar};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F: Scalar> {
    /// Constant input; no gradient tracked.
    Input,
    /// Parameter leaf; gradient accumulates into the referenced param.
    Param(usize),
    MatVec { w: Var, x: Var, rows: usize, cols: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddConst(Var, F),
    Sigmoid(Var),
    Tanh(Var),
    Dot(Var, Var),
    Sum(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    Index(Var, usize),
    /// value = sum_t coeffs[t] * vecs[t]
    LinComb { coeffs: Var, vecs: Vec<Var> },
    /// Numerically stable binary cross-entropy on a logit.
    BceLogits { logit: Var, target: F },
}

struct Node<F: Scalar> {
    value: Vec<F>,
    op: Op<F>,
}

/// Gradients keyed by parameter index in the originating [`ParamStore`].
pub struct Gradients<F: Scalar> {
    by_param: Vec<Vec<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, param: usize) -> &[F] {
        &self.by_param[param]
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

/// Computation tape; build a fresh one per forward pass.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    param_vars: HashMap<usize, Var>,
    n_params: usize,
}

impl<F: Scalar> Tape<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            param_vars: HashMap::new(),
            n_params: store.len(),
        }
    }

    fn push(&mut self, value: Vec<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    /// Scalar value of a length-1 node.
    pub fn scalar(&self, v: Var) -> F {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    pub fn input(&mut self, value: Vec<F>) -> Var {
        self.push(value, Op::Input)
    }

    /// Bring a parameter onto the tape; repeated calls share one node so
    /// gradients from all uses accumulate.
    pub fn param(&mut self, store: &ParamStore<F>, id: usize) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.data(id).to_vec(), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    /// y = W x with W row-major `rows x cols`.
    pub fn matvec(&mut self, w: Var, x: Var, rows: usize, cols: usize) -> Var {
        let wv = &self.nodes[w.0].value;
        let xv = &self.nodes[x.0].value;
        debug_assert_eq!(wv.len(), rows * cols);
        debug_assert_eq!(xv.len(), cols);
        let mut out = vec![F::zero(); rows];
        for i in 0..rows {
            let mut acc = F::zero();
            let row = &wv[i * cols..(i + 1) * cols];
            for (wj, xj) in row.iter().zip(xv.iter()) {
                acc += *wj * *xj;
            }
            out[i] = acc;
        }
        self.push(out, Op::MatVec { w, x, rows, cols })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = zip_vals(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = zip_vals(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = zip_vals(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out: Vec<F> = self.nodes[a.0].value.iter().map(|&x| x * c).collect();
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: F) -> Var {
        let out: Vec<F> = self.nodes[a.0].value.iter().map(|&x| x + c).collect();
        self.push(out, Op::AddConst(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out: Vec<F> = self.nodes[a.0].value.iter().map(|&x| sigmoid(x)).collect();
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out: Vec<F> = self.nodes[a.0].value.iter().map(|&x| x.tanh()).collect();
        self.push(out, Op::Tanh(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        debug_assert_eq!(av.len(), bv.len());
        let mut acc = F::zero();
        for (x, y) in av.iter().zip(bv.iter()) {
            acc += *x * *y;
        }
        self.push(vec![acc], Op::Dot(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let mut acc = F::zero();
        for x in &self.nodes[a.0].value {
            acc += *x;
        }
        self.push(vec![acc], Op::Sum(a))
    }

    /// Numerically stable softmax (max-shifted).
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let max = av.iter().cloned().fold(F::neg_infinity(), F::max);
        let exps: Vec<F> = av.iter().map(|&x| (x - max).exp()).collect();
        let mut denom = F::zero();
        for e in &exps {
            denom += *e;
        }
        let out: Vec<F> = exps.iter().map(|&e| e / denom).collect();
        self.push(out, Op::Softmax(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(out, Op::Concat(parts.to_vec()))
    }

    pub fn index(&mut self, a: Var, i: usize) -> Var {
        let v = self.nodes[a.0].value[i];
        self.push(vec![v], Op::Index(a, i))
    }

    /// value = sum_t coeffs[t] * vecs[t]; all vecs share one length.
    pub fn lincomb(&mut self, coeffs: Var, vecs: &[Var]) -> Var {
        let cv = self.nodes[coeffs.0].value.clone();
        debug_assert_eq!(cv.len(), vecs.len());
        let dim = self.nodes[vecs[0].0].value.len();
        let mut out = vec![F::zero(); dim];
        for (t, v) in vecs.iter().enumerate() {
            let vv = &self.nodes[v.0].value;
            for (o, x) in out.iter_mut().zip(vv.iter()) {
                *o += cv[t] * *x;
            }
        }
        self.push(
            out,
            Op::LinComb {
                coeffs,
                vecs: vecs.to_vec(),
            },
        )
    }

    /// BCE between sigmoid(logit) and a {0,1} target, computed on the logit:
    /// loss = max(z,0) - z*y + ln(1 + exp(-|z|)).
    pub fn bce_with_logits(&mut self, logit: Var, target: F) -> Var {
        let z = self.nodes[logit.0].value[0];
        let loss = z.max(F::zero()) - z * target + (-z.abs()).exp().ln_1p();
        self.push(vec![loss], Op::BceLogits { logit, target })
    }

    /// Mean of scalar nodes.
    pub fn mean_scalars(&mut self, vals: &[Var]) -> Var {
        let joined = self.concat(vals);
        let total = self.sum(joined);
        self.scale(total, cast::<F>(1.0 / vals.len() as f64))
    }

    /// Backward pass from a scalar node; returns per-parameter gradients.
    /// Parameters absent from the subgraph of `loss` get all-zero gradients.
    pub fn backward(&self, loss: Var, store: &ParamStore<F>) -> Gradients<F> {
        debug_assert_eq!(self.nodes[loss.0].value.len(), 1);
        let mut grads: Vec<Vec<F>> = self.nodes.iter().map(|n| vec![F::zero(); n.value.len()]).collect();
        grads[loss.0][0] = F::one();

        let mut by_param: Vec<Vec<F>> = (0..self.n_params)
            .map(|i| vec![F::zero(); store.data(i).len()])
            .collect();

        for idx in (0..=loss.0).rev() {
            if grads[idx].iter().all(|g| *g == F::zero()) {
                continue;
            }
            let g = std::mem::take(&mut grads[idx]);
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(pid) => {
                    for (acc, gi) in by_param[*pid].iter_mut().zip(g.iter()) {
                        *acc += *gi;
                    }
                }
                Op::MatVec { w, x, rows, cols } => {
                    let xv = self.nodes[x.0].value.clone();
                    let wv = self.nodes[w.0].value.clone();
                    {
                        let gw = &mut grads[w.0];
                        for i in 0..*rows {
                            for j in 0..*cols {
                                gw[i * cols + j] += g[i] * xv[j];
                            }
                        }
                    }
                    {
                        let gx = &mut grads[x.0];
                        for j in 0..*cols {
                            let mut acc = F::zero();
                            for i in 0..*rows {
                                acc += g[i] * wv[i * cols + j];
                            }
                            gx[j] += acc;
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate(&mut grads[b.0], &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    for (gb, gi) in grads[b.0].iter_mut().zip(g.iter()) {
                        *gb -= *gi;
                    }
                }
                Op::Mul(a, b) => {
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    for ((ga, gi), bi) in grads[a.0].iter_mut().zip(g.iter()).zip(bv.iter()) {
                        *ga += *gi * *bi;
                    }
                    for ((gb, gi), ai) in grads[b.0].iter_mut().zip(g.iter()).zip(av.iter()) {
                        *gb += *gi * *ai;
                    }
                }
                Op::Scale(a, c) => {
                    for (ga, gi) in grads[a.0].iter_mut().zip(g.iter()) {
                        *ga += *gi * *c;
                    }
                }
                Op::AddConst(a, _) => accumulate(&mut grads[a.0], &g),
                Op::Sigmoid(a) => {
                    let sv = self.nodes[idx].value.clone();
                    for ((ga, gi), s) in grads[a.0].iter_mut().zip(g.iter()).zip(sv.iter()) {
                        *ga += *gi * *s * (F::one() - *s);
                    }
                }
                Op::Tanh(a) => {
                    let tv = self.nodes[idx].value.clone();
                    for ((ga, gi), t) in grads[a.0].iter_mut().zip(g.iter()).zip(tv.iter()) {
                        *ga += *gi * (F::one() - *t * *t);
                    }
                }
                Op::Dot(a, b) => {
                    let g0 = g[0];
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    for (ga, bi) in grads[a.0].iter_mut().zip(bv.iter()) {
                        *ga += g0 * *bi;
                    }
                    for (gb, ai) in grads[b.0].iter_mut().zip(av.iter()) {
                        *gb += g0 * *ai;
                    }
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    for ga in grads[a.0].iter_mut() {
                        *ga += g0;
                    }
                }
                Op::Softmax(a) => {
                    let sv = self.nodes[idx].value.clone();
                    let mut gdot = F::zero();
                    for (gi, si) in g.iter().zip(sv.iter()) {
                        gdot += *gi * *si;
                    }
                    for ((ga, gi), si) in grads[a.0].iter_mut().zip(g.iter()).zip(sv.iter()) {
                        *ga += *si * (*gi - gdot);
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts.clone() {
                        let len = self.nodes[p.0].value.len();
                        accumulate(&mut grads[p.0], &g[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::Index(a, i) => {
                    grads[a.0][*i] += g[0];
                }
                Op::LinComb { coeffs, vecs } => {
                    let cv = self.nodes[coeffs.0].value.clone();
                    for (t, v) in vecs.clone().into_iter().enumerate() {
                        let vv = self.nodes[v.0].value.clone();
                        let mut dc = F::zero();
                        for (gi, xi) in g.iter().zip(vv.iter()) {
                            dc += *gi * *xi;
                        }
                        grads[coeffs.0][t] += dc;
                        for (gv, gi) in grads[v.0].iter_mut().zip(g.iter()) {
                            *gv += cv[t] * *gi;
                        }
                    }
                }
                Op::BceLogits { logit, target } => {
                    let z = self.nodes[logit.0].value[0];
                    grads[logit.0][0] += g[0] * (sigmoid(z) - *target);
                }
            }
        }

        Gradients { by_param }
    }
}

#[inline]
pub fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

fn zip_vals<F: Scalar>(a: &[F], b: &[F], f: impl Fn(F, F) -> F) -> Vec<F> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += *s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    fn fd_loss(store: &mut ParamStore<f64>, pid: usize, idx: usize, f: &dyn Fn(&ParamStore<f64>) -> f64) -> f64 {
        let h = 1e-6;
        let orig = store.data(pid)[idx];
        store.data_mut(pid)[idx] = orig + h;
        let up = f(store);
        store.data_mut(pid)[idx] = orig - h;
        let down = f(store);
        store.data_mut(pid)[idx] = orig;
        (up - down) / (2.0 * h)
    }

    /// Composite expression exercising every op; analytic grads must match FD.
    #[test]
    fn composite_gradient_matches_finite_difference() {
        let mut store = ParamStore::new();
        let w = store.add_matrix("w", 3, 2, vec![0.2, -0.4, 0.7, 0.1, -0.3, 0.5]);
        let b = store.add_vector("b", vec![0.05, -0.02, 0.3]);
        let q = store.add_vector("q", vec![0.6, -0.1, 0.2]);

        let loss_fn = |s: &ParamStore<f64>| -> f64 {
            let mut tape = Tape::new(s);
            let x = tape.input(vec![0.9, -0.6]);
            let wv = tape.param(s, w);
            let bv = tape.param(s, b);
            let qv = tape.param(s, q);
            let h = tape.matvec(wv, x, 3, 2);
            let h = tape.add(h, bv);
            let t = tape.tanh(h);
            let sg = tape.sigmoid(t);
            let m = tape.mul(t, sg);
            let sm = tape.softmax(m);
            let lc = tape.lincomb(sm, &[t, sg, m]);
            let d = tape.dot(lc, qv);
            let l = tape.bce_with_logits(d, 1.0);
            tape.scalar(l)
        };

        let mut tape = Tape::new(&store);
        let x = tape.input(vec![0.9, -0.6]);
        let wv = tape.param(&store, w);
        let bv = tape.param(&store, b);
        let qv = tape.param(&store, q);
        let h = tape.matvec(wv, x, 3, 2);
        let h = tape.add(h, bv);
        let t = tape.tanh(h);
        let sg = tape.sigmoid(t);
        let m = tape.mul(t, sg);
        let sm = tape.softmax(m);
        let lc = tape.lincomb(sm, &[t, sg, m]);
        let d = tape.dot(lc, qv);
        let l = tape.bce_with_logits(d, 1.0);
        let grads = tape.backward(l, &store);

        for pid in [w, b, q] {
            for idx in 0..store.data(pid).len() {
                let numeric = fd_loss(&mut store, pid, idx, &loss_fn);
                let analytic = grads.get(pid)[idx];
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    ((analytic - numeric) / denom).abs() < 1e-6,
                    "param {pid} idx {idx}: analytic {analytic} vs fd {numeric}"
                );
            }
        }
    }

    #[test]
    fn unused_params_get_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.add_vector("used", vec![0.3, 0.4]);
        let unused = store.add_vector("unused", vec![1.0, 2.0]);
        let mut tape = Tape::new(&store);
        let u = tape.param(&store, used);
        let x = tape.input(vec![1.0, -1.0]);
        let d = tape.dot(u, x);
        let l = tape.bce_with_logits(d, 0.0);
        let grads = tape.backward(l, &store);
        assert!(grads.get(unused).iter().all(|&g| g == 0.0));
        assert!(grads.get(used).iter().any(|&g| g != 0.0));
    }

    #[test]
    fn softmax_over_single_element_is_one() {
        let store: ParamStore<f64> = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(vec![3.7]);
        let s = tape.softmax(x);
        assert_eq!(tape.value(s), &[1.0]);
    }

    #[test]
    fn bce_logits_matches_direct_formula() {
        let store: ParamStore<f64> = ParamStore::new();
        let mut tape = Tape::new(&store);
        let z = tape.input(vec![1.3]);
        let l = tape.bce_with_logits(z, 1.0);
        let p = sigmoid(1.3f64);
        assert!((tape.scalar(l) - (-p.ln())).abs() < 1e-12);
    }
}
