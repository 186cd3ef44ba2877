use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// L2-regularised logistic regression minimising
/// `mean BCE + ‖w‖² / (2 C n)`; the intercept is not penalised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticRegression {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogisticConfig {
    pub c: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            c: 1.0,
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct Problem<'a> {
    x: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    lambda: f64,
}

impl Problem<'_> {
    fn n(&self) -> f64 {
        self.x.nrows() as f64
    }

    fn logits(&self, theta: &DVector<f64>) -> DVector<f64> {
        let d = self.x.ncols();
        self.x * theta.rows(0, d) + DVector::from_element(self.x.nrows(), theta[d])
    }

    fn objective(&self, theta: &DVector<f64>) -> f64 {
        let z = self.logits(theta);
        let d = self.x.ncols();
        let loss: f64 = z.iter().zip(self.y.iter()).map(|(&z, &y)| softplus(z) - y * z).sum();
        loss / self.n() + 0.5 * self.lambda * theta.rows(0, d).norm_squared()
    }

    fn gradient(&self, theta: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let d = self.x.ncols();
        let p = self.logits(theta).map(sigmoid);
        let r = (&p - self.y) / self.n();
        let mut g = DVector::zeros(d + 1);
        g.rows_mut(0, d)
            .copy_from(&(self.x.transpose() * &r + theta.rows(0, d) * self.lambda));
        g[d] = r.sum();
        (g, p)
    }

    fn hessian(&self, p: &DVector<f64>) -> DMatrix<f64> {
        let (n, d) = self.x.shape();
        let s = p.map(|p| p * (1.0 - p)) / self.n();
        let mut xa = DMatrix::from_element(n, d + 1, 1.0);
        xa.columns_mut(0, d).copy_from(self.x);
        let mut sx = xa.clone();
        for (i, mut row) in sx.row_iter_mut().enumerate() {
            row *= s[i];
        }
        let mut h = xa.transpose() * sx;
        for j in 0..d {
            h[(j, j)] += self.lambda;
        }
        h
    }
}

impl LogisticRegression {
    /// Full-batch Newton iterations with backtracking until the gradient norm
    /// drops below `tol`.
    pub fn fit(x: &[Vec<f64>], y: &[bool], cfg: &LogisticConfig) -> Result<Self> {
        let n = x.len();
        if n == 0 || n != y.len() {
            return Err(Error::Contract(format!("{n} rows for {} labels", y.len())));
        }
        if !(cfg.c > 0.0) {
            return Err(Error::Config(format!("C={} must be positive", cfg.c)));
        }
        let d = x[0].len();
        if x.iter().any(|r| r.len() != d) {
            return Err(Error::Contract("ragged design matrix".into()));
        }
        let xm = DMatrix::from_fn(n, d, |i, j| x[i][j]);
        let yv = DVector::from_iterator(n, y.iter().map(|&b| b as u8 as f64));
        let prob = Problem {
            x: &xm,
            y: &yv,
            lambda: 1.0 / (cfg.c * n as f64),
        };
        let mut theta = DVector::zeros(d + 1);
        let mut f = prob.objective(&theta);
        let mut iterations = 0;
        let (mut g, mut p) = prob.gradient(&theta);
        while g.norm() >= cfg.tol && iterations < cfg.max_iter {
            iterations += 1;
            let h = prob.hessian(&p);
            let step = match h.clone().cholesky() {
                Some(ch) => ch.solve(&g),
                None => h.lu().solve(&g).unwrap_or_else(|| g.clone()),
            };
            let slope = g.dot(&step);
            let mut t = 1.0;
            loop {
                let cand = &theta - &step * t;
                let fc = prob.objective(&cand);
                if fc <= f - 1e-4 * t * slope || t < 1e-12 {
                    theta = cand;
                    f = fc;
                    break;
                }
                t *= 0.5;
            }
            (g, p) = prob.gradient(&theta);
        }
        let grad_norm = g.norm();
        Ok(LogisticRegression {
            weights: theta.rows(0, d).iter().copied().collect(),
            intercept: theta[d],
            iterations,
            grad_norm,
            converged: grad_norm < cfg.tol,
        })
    }

    pub fn decision(&self, x: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        sigmoid(self.decision(x))
    }
}

/// The probe objective at explicit parameters, for independent checks.
pub fn logistic_objective(x: &[Vec<f64>], y: &[bool], c: f64, w: &[f64], b: f64) -> f64 {
    let n = x.len() as f64;
    let loss: f64 = x
        .iter()
        .zip(y)
        .map(|(row, &yi)| {
            let z = b + row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
            softplus(z) - if yi { z } else { 0.0 }
        })
        .sum();
    loss / n + w.iter().map(|v| v * v).sum::<f64>() / (2.0 * c * n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn toy(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            .collect();
        let y = x
            .iter()
            .map(|r| r[0] + 0.5 * r[1] + 0.7 * rng.random_range(-1.0..1.0) > 0.0)
            .collect();
        (x, y)
    }

    #[test]
    fn converges_and_certifies_stationarity() {
        let (x, y) = toy(200, 1);
        let m = LogisticRegression::fit(&x, &y, &LogisticConfig::default()).unwrap();
        assert!(m.converged && m.grad_norm < 1e-8);
        // Central differences of the objective at the solution vanish.
        let h = 1e-5;
        for j in 0..3 {
            let mut w = m.weights.clone();
            let mut b = m.intercept;
            let mut at = |s: f64| {
                if j < 2 {
                    w[j] = m.weights[j] + s;
                } else {
                    b = m.intercept + s;
                }
                logistic_objective(&x, &y, 1.0, &w, b)
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            assert!(fd.abs() < 1e-7, "coordinate {j}: {fd}");
        }
    }

    #[test]
    fn separable_data_is_classified_perfectly() {
        let x: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                vec![s * (1.0 + (i % 7) as f64 * 0.1), (i % 5) as f64 - 2.0]
            })
            .collect();
        let y: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
        let m = LogisticRegression::fit(&x, &y, &LogisticConfig::default()).unwrap();
        assert!(m.converged);
        for (r, &yi) in x.iter().zip(&y) {
            assert_eq!(m.predict_proba(r) > 0.5, yi);
        }
    }

    #[test]
    fn row_order_does_not_matter() {
        let (x, y) = toy(60, 2);
        let a = LogisticRegression::fit(&x, &y, &LogisticConfig::default()).unwrap();
        let (xr, yr): (Vec<_>, Vec<_>) = x.iter().cloned().zip(y.iter().copied()).rev().unzip();
        let b = LogisticRegression::fit(&xr, &yr, &LogisticConfig::default()).unwrap();
        for (u, v) in a.weights.iter().zip(&b.weights) {
            assert!((u - v).abs() < 1e-9);
        }
    }
}
