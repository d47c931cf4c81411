//! Multinomial logistic regression with an ℓ2 penalty on the weights.

use super::solver::{minimize, SolverOptions};
use super::{argmax, check_features};
use crate::error::{CareError, Result};

/// C used when no validation split exists.
pub const DEFAULT_C: f64 = 0.5;

/// 45 log-spaced values from 1e-6 to 1e5.
pub fn c_grid() -> Vec<f64> {
    (0..45).map(|i| 10f64.powf(-6.0 + 11.0 * i as f64 / 44.0)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticModel {
    pub classes: usize,
    pub dim: usize,
    /// `dim × classes`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub c: f64,
    pub converged: bool,
}

/// `Σᵢ CE(xᵢ, yᵢ) + ‖W‖² / (2C)` and its gradient over `[W, b]`.
pub fn objective(x: &[Vec<f64>], y: &[usize], k: usize, c: f64, theta: &[f64], grad: &mut [f64]) -> f64 {
    let d = x[0].len();
    let (w, b) = theta.split_at(d * k);
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0;
    let mut logits = vec![0.0; k];
    for (xi, &yi) in x.iter().zip(y) {
        for (c_, l) in logits.iter_mut().enumerate() {
            *l = b[c_] + xi.iter().enumerate().map(|(j, v)| v * w[j * k + c_]).sum::<f64>();
        }
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        loss += m + z.ln() - logits[yi];
        for c_ in 0..k {
            let r = (logits[c_] - m).exp() / z - f64::from(u8::from(c_ == yi));
            for (j, v) in xi.iter().enumerate() {
                grad[j * k + c_] += r * v;
            }
            grad[d * k + c_] += r;
        }
    }
    for (i, wi) in w.iter().enumerate() {
        loss += wi * wi / (2.0 * c);
        grad[i] += wi / c;
    }
    loss
}

impl LogisticModel {
    pub fn fit(x: &[Vec<f64>], y: &[usize], c: f64) -> Result<Self> {
        Self::fit_with(x, y, c, SolverOptions::default())
    }

    pub fn fit_with(x: &[Vec<f64>], y: &[usize], c: f64, opts: SolverOptions) -> Result<Self> {
        let d = check_features(x, y.len())?;
        if !(c > 0.0) {
            return Err(CareError::contract("C must be positive"));
        }
        let k = y.iter().max().copied().unwrap_or(0) + 1;
        let mut seen = vec![false; k];
        y.iter().for_each(|&c| seen[c] = true);
        if seen.iter().filter(|&&s| s).count() < 2 {
            return Err(CareError::contract("logistic probe needs at least two classes in the training split"));
        }
        let r = minimize(|t, g| objective(x, y, k, c, t, g), vec![0.0; d * k + k], opts);
        if !r.converged {
            log::warn!(
                "logistic probe (C = {c:e}) stopped after {} iterations at gradient norm {:e}",
                r.iterations,
                r.grad_norm
            );
        }
        let (w, b) = r.x.split_at(d * k);
        Ok(Self {
            classes: k,
            dim: d,
            weights: w.to_vec(),
            bias: b.to_vec(),
            c,
            converged: r.converged,
        })
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| self.bias[c] + x.iter().enumerate().map(|(j, v)| v * self.weights[j * self.classes + c]).sum::<f64>())
            .collect()
    }

    pub fn predict_proba(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|xi| {
                let l = self.logits(xi);
                let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|v| v / z).collect()
            })
            .collect()
    }

    /// Most probable class; ties go to the lower class id.
    pub fn predict(&self, x: &[Vec<f64>]) -> Vec<usize> {
        x.iter().map(|xi| argmax(&self.logits(xi))).collect()
    }
}
