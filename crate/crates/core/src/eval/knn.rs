//! Euclidean k-nearest-neighbour classification.

use super::{argmax, check_features};
use crate::error::{CareError, Result};

/// `k = round(√N)`, at least 1.
pub fn sqrt_rule(n: usize) -> usize {
    ((n as f64).sqrt().round() as usize).max(1)
}

/// Candidate k values searched when a validation split exists.
pub fn k_grid() -> Vec<usize> {
    (3..=23).collect()
}

#[derive(Clone, Debug)]
pub struct KnnModel {
    pub k: usize,
    pub classes: usize,
    x: Vec<Vec<f64>>,
    y: Vec<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

impl KnnModel {
    /// Stores the training set. `k > N` is clamped to `N` with a warning.
    pub fn fit(x: &[Vec<f64>], y: &[usize], k: usize) -> Result<Self> {
        check_features(x, y.len())?;
        if k == 0 {
            return Err(CareError::contract("k must be at least 1"));
        }
        let k = if k > x.len() {
            log::warn!("k = {k} exceeds the {} training points; using k = {}", x.len(), x.len());
            x.len()
        } else {
            k
        };
        Ok(Self {
            k,
            classes: y.iter().max().copied().unwrap_or(0) + 1,
            x: x.to_vec(),
            y: y.to_vec(),
        })
    }

    /// Indices of the `k` nearest training points; distance ties go to the
    /// lower training index.
    pub fn neighbours(&self, q: &[f64]) -> Vec<usize> {
        let mut idx: Vec<(f64, usize)> = self.x.iter().enumerate().map(|(i, p)| (sq_dist(p, q), i)).collect();
        idx.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        idx.truncate(self.k);
        idx.into_iter().map(|(_, i)| i).collect()
    }

    /// Vote fractions per class.
    pub fn predict_proba(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|q| {
                let mut votes = vec![0.0; self.classes];
                for i in self.neighbours(q) {
                    votes[self.y[i]] += 1.0 / self.k as f64;
                }
                votes
            })
            .collect()
    }

    /// Majority vote; vote ties go to the lowest class id.
    pub fn predict(&self, x: &[Vec<f64>]) -> Vec<usize> {
        self.predict_proba(x).iter().map(|v| argmax(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_and_exact_match() {
        assert_eq!(sqrt_rule(100), 10);
        let x = vec![vec![0.0], vec![5.0], vec![9.0]];
        let m = KnnModel::fit(&x, &[0, 1, 2], 1).unwrap();
        assert_eq!(m.predict(&[vec![5.0]]), vec![1]);
        assert_eq!(KnnModel::fit(&x, &[0, 1, 2], 10).unwrap().k, 3);
    }
}
