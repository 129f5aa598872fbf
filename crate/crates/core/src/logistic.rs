//! L2-regularized logistic regression via damped Newton iterations.
//!
//! Objective: (1/n) * [ sum_i bce(sigmoid(w.x_i + b), y_i) + (l2/2)*|w|^2 ]
//! with the bias unpenalized. The 1/n scaling keeps the gradient-norm
//! stopping rule meaningful across dataset sizes without changing the argmin
//! relative to the sum form. Deterministic: no randomness, fixed iteration
//! order.

use crate::error::{CoreError, Result};
use crate::nn::sigmoid;
use crate::scalar::{cast, Scalar};

#[derive(Debug, Clone)]
pub struct LogisticFit<F: Scalar> {
    pub weights: Vec<F>,
    pub bias: F,
    pub l2: F,
    pub iterations: usize,
    pub grad_norm: F,
}

pub fn predict_proba<F: Scalar>(fit: &LogisticFit<F>, x: &[F]) -> F {
    let mut z = fit.bias;
    for (w, xi) in fit.weights.iter().zip(x.iter()) {
        z += *w * *xi;
    }
    sigmoid(z)
}

/// Regularized objective (per-sample mean) at the given coefficients.
pub fn objective<F: Scalar>(x: &[Vec<F>], y: &[u8], weights: &[F], bias: F, l2: F) -> F {
    let mut total = F::zero();
    for (xi, &yi) in x.iter().zip(y.iter()) {
        let mut z = bias;
        for (w, v) in weights.iter().zip(xi.iter()) {
            z += *w * *v;
        }
        let t = cast::<F>(yi as f64);
        total = total + z.max(F::zero()) - z * t + (-z.abs()).exp().ln_1p();
    }
    let mut sq = F::zero();
    for w in weights {
        sq += *w * *w;
    }
    (total + l2 * sq / cast::<F>(2.0)) / cast::<F>(y.len() as f64)
}

/// Mean binary cross-entropy of a fit on a dataset.
pub fn mean_bce<F: Scalar>(fit: &LogisticFit<F>, x: &[Vec<F>], y: &[u8]) -> F {
    let mut total = F::zero();
    for (xi, &yi) in x.iter().zip(y.iter()) {
        let mut z = fit.bias;
        for (w, v) in fit.weights.iter().zip(xi.iter()) {
            z += *w * *v;
        }
        let t = cast::<F>(yi as f64);
        total = total + z.max(F::zero()) - z * t + (-z.abs()).exp().ln_1p();
    }
    total / cast::<F>(y.len() as f64)
}

/// In-place Cholesky decomposition of a symmetric positive-definite matrix
/// stored row-major; returns the lower factor.
pub(crate) fn cholesky<F: Scalar>(a: &mut [F], n: usize) -> Result<()> {
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if sum <= F::zero() {
                    return Err(CoreError::NoConvergence(
                        "hessian not positive definite".to_string(),
                    ));
                }
                a[i * n + j] = sum.sqrt();
            } else {
                a[i * n + j] = sum / a[j * n + j];
            }
        }
    }
    Ok(())
}

pub(crate) fn cholesky_solve<F: Scalar>(l: &[F], n: usize, b: &mut [F]) {
    // forward: L z = b
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * n + k] * b[k];
        }
        b[i] = sum / l[i * n + i];
    }
    // backward: L^T x = z
    for i in (0..n).rev() {
        let mut sum = b[i];
        for k in (i + 1)..n {
            sum -= l[k * n + i] * b[k];
        }
        b[i] = sum / l[i * n + i];
    }
}

/// Fit by Newton-Raphson with backtracking; converged when the gradient
/// 2-norm drops below `tol`.
pub fn fit<F: Scalar>(
    x: &[Vec<F>],
    y: &[u8],
    l2: f64,
    max_iter: usize,
    tol: f64,
) -> Result<LogisticFit<F>> {
    if x.is_empty() || y.len() != x.len() {
        return Err(CoreError::EmptyInput("logistic fit data".to_string()));
    }
    if l2 <= 0.0 {
        return Err(CoreError::InvalidConfig("l2 must be positive".to_string()));
    }
    let pos = y.iter().filter(|&&v| v == 1).count();
    if pos == 0 || pos == y.len() {
        return Err(CoreError::SingleClass(format!(
            "{pos} positive of {} examples",
            y.len()
        )));
    }
    let d = x[0].len();
    let n = d + 1; // trailing coordinate is the bias
    let l2f = cast::<F>(l2);
    let tolf = cast::<F>(tol);
    let jitter = cast::<F>(1e-12);
    let inv_n = F::one() / cast::<F>(y.len() as f64);

    let mut coef = vec![F::zero(); n];
    let mut obj = objective(x, y, &coef[..d], coef[d], l2f);

    for iter in 0..max_iter {
        let mut grad = vec![F::zero(); n];
        let mut hess = vec![F::zero(); n * n];
        for (xi, &yi) in x.iter().zip(y.iter()) {
            let mut z = coef[d];
            for (w, v) in coef[..d].iter().zip(xi.iter()) {
                z += *w * *v;
            }
            let p = sigmoid(z);
            let r = p - cast::<F>(yi as f64);
            let s = p * (F::one() - p);
            for j in 0..d {
                grad[j] += r * xi[j];
            }
            grad[d] += r;
            for j in 0..d {
                let sj = s * xi[j];
                for k in 0..=j {
                    hess[j * n + k] += sj * xi[k];
                }
                hess[d * n + j] += sj;
            }
            hess[d * n + d] += s;
        }
        for j in 0..d {
            grad[j] += l2f * coef[j];
            hess[j * n + j] += l2f;
        }
        for g in grad.iter_mut() {
            *g *= inv_n;
        }
        for h in hess.iter_mut() {
            *h *= inv_n;
        }
        for j in 0..n {
            hess[j * n + j] += jitter;
            for k in (j + 1)..n {
                hess[j * n + k] = hess[k * n + j];
            }
        }

        let gnorm = grad.iter().fold(F::zero(), |a, &g| a + g * g).sqrt();
        if gnorm < tolf {
            return Ok(LogisticFit {
                weights: coef[..d].to_vec(),
                bias: coef[d],
                l2: l2f,
                iterations: iter,
                grad_norm: gnorm,
            });
        }

        cholesky(&mut hess, n)?;
        let mut step = grad.clone();
        cholesky_solve(&hess, n, &mut step);

        // Backtracking: halve the Newton step until the objective improves.
        let mut scale = F::one();
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<F> = coef
                .iter()
                .zip(step.iter())
                .map(|(c, s)| *c - scale * *s)
                .collect();
            let trial_obj = objective(x, y, &trial[..d], trial[d], l2f);
            if trial_obj <= obj {
                coef = trial;
                obj = trial_obj;
                accepted = true;
                break;
            }
            scale /= cast::<F>(2.0);
        }
        if !accepted {
            // Objective already at a numerical floor; treat tiny gradients
            // as converged.
            if gnorm < cast::<F>(1e-6) {
                return Ok(LogisticFit {
                    weights: coef[..d].to_vec(),
                    bias: coef[d],
                    l2: l2f,
                    iterations: iter,
                    grad_norm: gnorm,
                });
            }
            return Err(CoreError::NoConvergence(format!(
                "line search stalled at gradient norm {gnorm}"
            )));
        }
    }

    let mut grad = vec![F::zero(); n];
    for (xi, &yi) in x.iter().zip(y.iter()) {
        let mut z = coef[d];
        for (w, v) in coef[..d].iter().zip(xi.iter()) {
            z += *w * *v;
        }
        let r = sigmoid(z) - cast::<F>(yi as f64);
        for j in 0..d {
            grad[j] += r * xi[j];
        }
        grad[d] += r;
    }
    for j in 0..d {
        grad[j] += l2f * coef[j];
    }
    for g in grad.iter_mut() {
        *g *= inv_n;
    }
    let gnorm = grad.iter().fold(F::zero(), |a, &g| a + g * g).sqrt();
    if gnorm < cast::<F>(1e-6) {
        Ok(LogisticFit {
            weights: coef[..d].to_vec(),
            bias: coef[d],
            l2: l2f,
            iterations: max_iter,
            grad_norm: gnorm,
        })
    } else {
        Err(CoreError::NoConvergence(format!(
            "gradient norm {gnorm} after {max_iter} iterations"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_1d_data_gets_positive_weight_and_full_accuracy() {
        let x = vec![vec![-1.0f64], vec![1.0]];
        let y = vec![0u8, 1];
        let fit = fit(&x, &y, 1e-4, 200, 1e-9).unwrap();
        assert!(fit.weights[0] > 0.0);
        let correct = x
            .iter()
            .zip(&y)
            .filter(|(xi, &yi)| (predict_proba(&fit, xi) > 0.5) as u8 == yi)
            .count();
        assert_eq!(correct, 2);
    }

    #[test]
    fn xor_is_not_linearly_separable() {
        let x = vec![
            vec![0.0f64, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![1.0, 1.0],
        ];
        let y = vec![0u8, 1, 1, 0];
        let fit = fit(&x, &y, 1.0, 200, 1e-9).unwrap();
        let correct = x
            .iter()
            .zip(&y)
            .filter(|(xi, &yi)| (predict_proba(&fit, xi) > 0.5) as u8 == yi)
            .count();
        assert!(correct as f64 / 4.0 <= 0.75);
    }

    #[test]
    fn fit_rejects_single_class() {
        let x = vec![vec![1.0f64], vec![2.0]];
        assert!(matches!(fit(&x, &[1, 1], 1.0, 100, 1e-9), Err(CoreError::SingleClass(_))));
    }

    #[test]
    fn newton_loss_matches_slow_gradient_descent_oracle() {
        // 50-sample random problem; the oracle is plain gradient descent run
        // to a tight tolerance, sharing only the objective definition.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let n = 50;
        let d = 3;
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let y: Vec<u8> = x
            .iter()
            .map(|xi| {
                let score: f64 = 1.5 * xi[0] - 0.7 * xi[1] + rng.random_range(-1.0..1.0);
                (score > 0.0) as u8
            })
            .collect();
        let l2 = 1.0;

        let newton = fit(&x, &y, l2, 200, 1e-10).unwrap();
        let newton_obj = objective(&x, &y, &newton.weights, newton.bias, l2);

        // Oracle: fixed-step gradient descent, 200k iterations.
        let mut coef = vec![0.0f64; d + 1];
        let lr = 1e-3;
        for _ in 0..200_000 {
            let mut grad = vec![0.0f64; d + 1];
            for (xi, &yi) in x.iter().zip(y.iter()) {
                let z: f64 = coef[d] + coef[..d].iter().zip(xi).map(|(w, v)| w * v).sum::<f64>();
                let r = sigmoid(z) - yi as f64;
                for j in 0..d {
                    grad[j] += r * xi[j];
                }
                grad[d] += r;
            }
            for j in 0..d {
                grad[j] += l2 * coef[j];
            }
            for j in 0..=d {
                coef[j] -= lr * grad[j];
            }
        }
        let oracle_obj = objective(&x, &y, &coef[..d], coef[d], l2);

        assert!(
            (newton_obj - oracle_obj).abs() < 1e-4,
            "newton {newton_obj} vs oracle {oracle_obj}"
        );
        assert!(newton.grad_norm < 1e-6);
    }

    #[test]
    fn fit_is_deterministic() {
        let x = vec![vec![0.1f64, 2.0], vec![-1.0, 0.3], vec![0.7, -0.2], vec![1.2, 1.1]];
        let y = vec![0u8, 0, 1, 1];
        let a = fit(&x, &y, 0.5, 200, 1e-9).unwrap();
        let b = fit(&x, &y, 0.5, 200, 1e-9).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.bias, b.bias);
    }
}
