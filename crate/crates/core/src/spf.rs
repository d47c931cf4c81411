//! Semantic-and-prior fusion of region features into a slide embedding.

use rand::Rng;

use crate::error::{CareError, Result};
use crate::nn::Linear;
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

/// Default fusion weight between coverage prior and gated attention.
pub const DEFAULT_LAMBDA_SPF: f64 = 0.5;

/// Bias-free gated attention scorer `s = wᵀ(tanh(V g) ⊙ σ(U g))`.
#[derive(Clone, Debug)]
pub struct GatedAttention {
    pub u: Linear,
    pub v: Linear,
    pub w: Linear,
}

impl GatedAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            u: Linear::new(store, &format!("{name}.u"), d, hidden, false, rng),
            v: Linear::new(store, &format!("{name}.v"), d, hidden, false, rng),
            w: Linear::new(store, &format!("{name}.w"), hidden, 1, false, rng),
        }
    }

    /// Logits `s`, shape `R × 1`, for region features `R × d`.
    pub fn scores<T: Real>(&self, g: &mut Graph<'_, T>, regions: Var) -> Result<Var> {
        let a = self.v.forward(g, regions)?;
        let a = g.tanh(a)?;
        let b = self.u.forward(g, regions)?;
        let b = g.sigmoid(b)?;
        let h = g.mul(a, b)?;
        self.w.forward(g, h)
    }

    /// `β = softmax(s)` over regions, shape `R × 1`.
    pub fn weights<T: Real>(&self, g: &mut Graph<'_, T>, regions: Var) -> Result<Var> {
        let s = self.scores(g, regions)?;
        g.softmax(s, 0)
    }
}

/// `α_i = m_i / N`.
pub fn coverage_prior(sizes: &[usize]) -> Result<Vec<f64>> {
    let total: usize = sizes.iter().sum();
    if sizes.is_empty() || total == 0 || sizes.contains(&0) {
        return Err(CareError::contract("coverage prior needs nonempty regions"));
    }
    Ok(sizes.iter().map(|&m| m as f64 / total as f64).collect())
}

/// Graph form of the fusion: returns `(z, ω)` with `z` of shape `1 × d` and
/// `ω = λα + (1 − λ)β` of shape `R × 1`.
pub fn fuse<T: Real>(g: &mut Graph<'_, T>, regions: Var, alpha: &[f64], beta: Var, lambda: f64) -> Result<(Var, Var)> {
    check_lambda(lambda)?;
    let r = g.value(regions).rows();
    if alpha.len() != r || g.shape(beta) != [r, 1] {
        return Err(CareError::contract(format!(
            "fusion inputs misaligned: {} regions, {} priors, beta {:?}",
            r,
            alpha.len(),
            g.shape(beta)
        )));
    }
    let prior = g.constant(Tensor::matrix(r, 1, alpha.iter().map(|&a| T::c(lambda) * T::c(a)).collect())?);
    let sem = g.scale(beta, T::c(1.0 - lambda))?;
    let omega = g.add(prior, sem)?;
    let wt = g.transpose(omega)?;
    let z = g.matmul(wt, regions)?;
    Ok((z, omega))
}

/// Plain fusion on values, same arithmetic as [`fuse`].
pub fn fuse_slide<T: Real>(alpha: &[T], beta: &[T], regions: &[Vec<T>], lambda: f64) -> Result<(Vec<T>, Vec<T>)> {
    check_lambda(lambda)?;
    if alpha.len() != beta.len() || alpha.len() != regions.len() || regions.is_empty() {
        return Err(CareError::contract("fusion inputs misaligned"));
    }
    let (l, r) = (T::c(lambda), T::c(1.0 - lambda));
    let omega: Vec<T> = alpha.iter().zip(beta).map(|(&a, &b)| l * a + b * r).collect();
    let d = regions[0].len();
    let mut z = vec![T::zero(); d];
    for (w, g) in omega.iter().zip(regions) {
        for (zi, &gi) in z.iter_mut().zip(g) {
            *zi = *zi + *w * gi;
        }
    }
    Ok((z, omega))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CareError::contract(format!("λ_SPF = {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// Position of the largest weight; ties go to the earliest position.
/// Callers keep regions sorted by id, so this is the lowest region id.
pub fn select_roi<T: Real>(omega: &[T]) -> Result<usize> {
    if omega.is_empty() {
        return Err(CareError::contract("ROI selection over zero regions"));
    }
    let mut best = 0;
    for (i, &w) in omega.iter().enumerate().skip(1) {
        if w > omega[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Slide vector, per-region fusion weights and the selected ROI.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideEmbedding<T> {
    pub z: Vec<T>,
    pub region_ids: Vec<usize>,
    pub sizes: Vec<usize>,
    pub alpha: Vec<f64>,
    pub beta: Vec<T>,
    pub omega: Vec<T>,
    /// Id of the ROI region (not its position).
    pub roi: usize,
    pub roi_feature: Vec<T>,
}

impl<T: Real> SlideEmbedding<T> {
    pub fn roi_position(&self) -> usize {
        self.region_ids.iter().position(|&r| r == self.roi).expect("roi is a region")
    }
}
