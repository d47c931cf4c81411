//! Linear risk head trained with the Cox partial likelihood (Breslow ties).

use super::check_features;
use super::solver::{minimize, SolverOptions};
use crate::error::{CareError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CoxModel {
    pub beta: Vec<f64>,
    pub c: f64,
    pub converged: bool,
}

/// Negative log partial likelihood plus `‖β‖² / (2C)`, with gradient.
pub fn cox_objective(x: &[Vec<f64>], time: &[f64], event: &[bool], c: f64, beta: &[f64], grad: &mut [f64]) -> f64 {
    let d = beta.len();
    let eta: Vec<f64> = x.iter().map(|xi| xi.iter().zip(beta).map(|(a, b)| a * b).sum()).collect();
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut order: Vec<usize> = (0..x.len()).collect();
    // Descending time so the risk set grows as we scan.
    order.sort_by(|&a, &b| time[b].total_cmp(&time[a]));
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0;
    let mut s0 = 0.0;
    let mut s1 = vec![0.0; d];
    let mut i = 0;
    while i < order.len() {
        // Everyone tied at this time joins the risk set before any event at it.
        let t = time[order[i]];
        let mut j = i;
        while j < order.len() && time[order[j]] == t {
            let e = (eta[order[j]] - shift).exp();
            s0 += e;
            for (s, v) in s1.iter_mut().zip(&x[order[j]]) {
                *s += e * v;
            }
            j += 1;
        }
        for &k in &order[i..j] {
            if event[k] {
                loss -= eta[k] - shift - s0.ln();
                for (q, g) in grad.iter_mut().enumerate() {
                    *g -= x[k][q] - s1[q] / s0;
                }
            }
        }
        i = j;
    }
    for (q, b) in beta.iter().enumerate() {
        loss += b * b / (2.0 * c);
        grad[q] += b / c;
    }
    loss
}

impl CoxModel {
    pub fn fit(x: &[Vec<f64>], time: &[f64], event: &[bool], c: f64) -> Result<Self> {
        let d = check_features(x, time.len())?;
        if event.len() != time.len() {
            return Err(CareError::contract("event and time lengths differ"));
        }
        if time.iter().any(|&t| !(t > 0.0)) {
            return Err(CareError::contract("survival times must be positive"));
        }
        if !event.iter().any(|&e| e) {
            return Err(CareError::contract("survival head needs at least one event"));
        }
        let r = minimize(|b, g| cox_objective(x, time, event, c, b, g), vec![0.0; d], SolverOptions::default());
        if !r.converged {
            log::warn!("Cox head stopped after {} iterations at gradient norm {:e}", r.iterations, r.grad_norm);
        }
        Ok(Self {
            beta: r.x,
            c,
            converged: r.converged,
        })
    }

    /// Linear risk scores; higher means earlier expected event.
    pub fn risk(&self, x: &[Vec<f64>]) -> Vec<f64> {
        x.iter().map(|xi| xi.iter().zip(&self.beta).map(|(a, b)| a * b).sum()).collect()
    }
}
