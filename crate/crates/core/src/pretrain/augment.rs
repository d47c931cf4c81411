//! Feature-space augmentation of precomputed patch embeddings.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CareError, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub brightness: [f64; 2],
    pub contrast: [f64; 2],
    pub posterize_levels: Vec<u32>,
    /// Selection weights for brightness, contrast, posterize.
    pub probabilities: [f64; 3],
    pub per_crop: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            brightness: [0.8, 1.2],
            contrast: [0.8, 1.2],
            posterize_levels: vec![16, 32, 64],
            probabilities: [1.0, 1.0, 1.0],
            per_crop: 2,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ok_range = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1];
        if !ok_range(self.brightness) || !ok_range(self.contrast) {
            return Err(CareError::Config("augmentation ranges must be positive and ordered".into()));
        }
        if self.posterize_levels.is_empty() || self.posterize_levels.iter().any(|&b| b < 2) {
            return Err(CareError::Config("posterize levels must be ≥ 2".into()));
        }
        if self.probabilities.iter().any(|&p| !(p >= 0.0)) {
            return Err(CareError::Config("augmentation probabilities must be nonnegative".into()));
        }
        let active = self.probabilities.iter().filter(|&&p| p > 0.0).count();
        if self.per_crop > active {
            return Err(CareError::Config(format!(
                "{} transforms per crop but only {active} have nonzero probability",
                self.per_crop
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform {
    Brightness(f64),
    Contrast(f64),
    Posterize(u32),
}

impl Transform {
    pub fn apply<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        match *self {
            Transform::Brightness(s) => x.map(|v| v * T::c(s)),
            Transform::Contrast(c) => {
                let (r, d) = x.dims2();
                let c = T::c(c);
                Tensor::from_fn(r, d, |i, j| {
                    let row = x.row(i);
                    let mean = row.iter().copied().sum::<T>() / T::c(d as f64);
                    mean + c * (row[j] - mean)
                })
            }
            Transform::Posterize(levels) => {
                let (r, d) = x.dims2();
                let mut lo = vec![T::infinity(); d];
                let mut hi = vec![T::neg_infinity(); d];
                for i in 0..r {
                    for (j, &v) in x.row(i).iter().enumerate() {
                        lo[j] = lo[j].min(v);
                        hi[j] = hi[j].max(v);
                    }
                }
                let steps = T::c(levels as f64 - 1.0);
                Tensor::from_fn(r, d, |i, j| {
                    let v = x.at(i, j);
                    let span = hi[j] - lo[j];
                    if span <= T::zero() {
                        return v;
                    }
                    let q = ((v - lo[j]) / span * steps).round() / steps;
                    lo[j] + q * span
                })
            }
        }
    }
}

/// Draws `per_crop` distinct transform kinds by weight, with parameters.
pub fn sample_transforms(cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<Transform> {
    let mut weights = cfg.probabilities;
    let mut out = Vec::with_capacity(cfg.per_crop);
    for _ in 0..cfg.per_crop {
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut u = rng.random::<f64>() * total;
        let mut kind = 0;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            kind = i;
            if u < w {
                break;
            }
            u -= w;
        }
        weights[kind] = 0.0;
        out.push(match kind {
            0 => Transform::Brightness(rng.random_range(cfg.brightness[0]..=cfg.brightness[1])),
            1 => Transform::Contrast(rng.random_range(cfg.contrast[0]..=cfg.contrast[1])),
            _ => Transform::Posterize(*cfg.posterize_levels.choose(rng).expect("levels")),
        });
    }
    out
}

/// Applies a freshly sampled transform sequence to one crop.
pub fn augment_features<T: Real>(x: &Tensor<T>, cfg: &AugmentConfig, rng: &mut impl Rng) -> (Tensor<T>, Vec<Transform>) {
    let ts = sample_transforms(cfg, rng);
    let out = ts.iter().fold(x.clone(), |acc, t| t.apply(&acc));
    (out, ts)
}
