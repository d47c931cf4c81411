//! Patch sets, the fixed subregion grid, soft inclusion and the adaptive
//! region assignment.
//!
//! Everything here is a pure function of plain tensors. The model evaluates
//! the same scoring inside a [`Graph`](crate::Graph) so the structuring loss
//! can differentiate through it, but the discrete assignment is always
//! produced by [`assign_regions`].

use std::collections::{BTreeMap, HashSet};

use crate::error::{CareError, Result};
use crate::tensor::{cosine, softmax_slice, Real, Tensor};

/// Number of candidate subregions kept per patch.
pub const DEFAULT_TOP_K: usize = 3;
/// Subregion window side, in patches.
pub const DEFAULT_WINDOW: usize = 8;

/// Integer patch-grid coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Anchor {
    pub u: i64,
    pub v: i64,
}

impl Anchor {
    pub const fn new(u: i64, v: i64) -> Self {
        Self { u, v }
    }

    pub fn dist(self, other: Anchor) -> f64 {
        let du = (self.u - other.u) as f64;
        let dv = (self.v - other.v) as f64;
        (du * du + dv * dv).sqrt()
    }
}

/// A slide as a bag of patches with grid anchors and feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet<T> {
    anchors: Vec<Anchor>,
    features: Tensor<T>,
    region_features: Option<Tensor<T>>,
}

impl<T: Real> PatchSet<T> {
    pub fn new(anchors: Vec<Anchor>, features: Tensor<T>) -> Result<Self> {
        if anchors.is_empty() {
            return Err(CareError::contract("patch set must contain at least one patch"));
        }
        if features.rank() != 2 || features.rows() != anchors.len() {
            return Err(CareError::shape(
                "PatchSet",
                format!("{} anchors but features of shape {:?}", anchors.len(), features.shape()),
            ));
        }
        let mut seen = HashSet::with_capacity(anchors.len());
        for a in &anchors {
            if !seen.insert(*a) {
                return Err(CareError::contract(format!("duplicate anchor ({}, {})", a.u, a.v)));
            }
        }
        Ok(Self {
            anchors,
            features,
            region_features: None,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    pub fn region_features(&self) -> Option<&Tensor<T>> {
        self.region_features.as_ref()
    }

    pub fn set_region_features(&mut self, fr: Tensor<T>) -> Result<()> {
        if fr.shape() != self.features.shape() {
            return Err(CareError::shape("set_region_features", format!("{:?}", fr.shape())));
        }
        self.region_features = Some(fr);
        Ok(())
    }

    /// Patches at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.features.row(i));
        }
        let anchors = idx.iter().map(|&i| self.anchors[i]).collect();
        Self::new(anchors, Tensor::matrix(idx.len(), d, data)?)
    }

    pub fn with_features(&self, features: Tensor<T>) -> Result<Self> {
        Self::new(self.anchors.clone(), features)
    }

    pub fn cast<U: Real>(&self) -> PatchSet<U> {
        PatchSet {
            anchors: self.anchors.clone(),
            features: self.features.cast(),
            region_features: self.region_features.as_ref().map(Tensor::cast),
        }
    }
}

/// Non-overlapping `k × k` windows covering the occupied part of the grid.
///
/// Windows are ordered by anchor `(x, y)`, so subregion indices do not depend
/// on the order of the patches.
#[derive(Clone, Debug, PartialEq)]
pub struct SubregionGrid {
    pub k: usize,
    pub anchors: Vec<Anchor>,
    pub members: Vec<Vec<usize>>,
    /// Window index of every patch.
    pub patch_window: Vec<usize>,
}

impl SubregionGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Learned per-window descriptors: `[CLS]` output and cross-attention output.
#[derive(Clone, Debug, PartialEq)]
pub struct SubregionDescriptors<T> {
    pub cls: Tensor<T>,
    pub query: Tensor<T>,
}

pub fn tile_subregions(anchors: &[Anchor], k: usize) -> Result<SubregionGrid> {
    if k == 0 {
        return Err(CareError::contract("window side k must be at least 1"));
    }
    if anchors.is_empty() {
        return Err(CareError::contract("cannot tile an empty patch set"));
    }
    let k = k as i64;
    let mut windows: BTreeMap<Anchor, Vec<usize>> = BTreeMap::new();
    for (j, a) in anchors.iter().enumerate() {
        let w = Anchor::new(a.u.div_euclid(k) * k, a.v.div_euclid(k) * k);
        windows.entry(w).or_default().push(j);
    }
    let mut patch_window = vec![0; anchors.len()];
    let mut grid_anchors = Vec::with_capacity(windows.len());
    let mut members = Vec::with_capacity(windows.len());
    for (i, (a, m)) in windows.into_iter().enumerate() {
        for &j in &m {
            patch_window[j] = i;
        }
        grid_anchors.push(a);
        members.push(m);
    }
    Ok(SubregionGrid {
        k: k as usize,
        anchors: grid_anchors,
        members,
        patch_window,
    })
}

/// Soft inclusion values and per-patch candidate lists.
#[derive(Clone, Debug, PartialEq)]
pub struct InclusionMatrix {
    /// Row-major `n × m`.
    pub mu: Vec<f64>,
    pub n: usize,
    pub m: usize,
    /// Per patch, `min(K, m)` subregion indices by μ descending.
    pub candidates: Vec<Vec<usize>>,
}

impl InclusionMatrix {
    pub fn at(&self, j: usize, i: usize) -> f64 {
        self.mu[j * self.m + i]
    }

    pub fn width(&self) -> usize {
        self.candidates.first().map_or(0, Vec::len)
    }

    /// μ at each patch's candidates, row-major `n × width`.
    pub fn candidate_mu(&self) -> Vec<f64> {
        self.candidates
            .iter()
            .enumerate()
            .flat_map(|(j, c)| c.iter().map(move |&i| self.at(j, i)))
            .collect()
    }
}

/// `μ_ji = 1 − d_ij / max_j' d_ij'` with distances between patch anchors and
/// window top-left anchors. A window whose maximum distance is zero gets
/// `μ = 1` for every patch. Candidate ties go to the lower window index.
pub fn soft_inclusion(anchors: &[Anchor], grid: &SubregionGrid, top_k: usize) -> Result<InclusionMatrix> {
    if top_k == 0 {
        return Err(CareError::contract("top-K must be at least 1"));
    }
    let (n, m) = (anchors.len(), grid.len());
    let mut mu = vec![0.0; n * m];
    for (i, s) in grid.anchors.iter().enumerate() {
        let dists: Vec<f64> = anchors.iter().map(|t| t.dist(*s)).collect();
        let max = dists.iter().copied().fold(0.0, f64::max);
        for (j, d) in dists.into_iter().enumerate() {
            mu[j * m + i] = if max == 0.0 { 1.0 } else { 1.0 - d / max };
        }
    }
    let width = top_k.min(m);
    let candidates = (0..n)
        .map(|j| {
            let row = &mu[j * m..(j + 1) * m];
            let mut idx: Vec<usize> = (0..m).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx.truncate(width);
            idx
        })
        .collect();
    Ok(InclusionMatrix { mu, n, m, candidates })
}

/// The four cosine channels between a patch and one window.
pub fn similarity_channels<T: Real>(f: &[T], fr: &[T], cls: &[T], query: &[T]) -> [T; 4] {
    [cosine(f, cls), cosine(f, query), cosine(fr, cls), cosine(fr, query)]
}

/// `ρ_j` over the candidates of patch `j`: per-channel softmax across
/// candidates, averaged over the four channels.
pub fn candidate_similarity<T: Real>(
    f: &[T],
    fr: &[T],
    desc: &SubregionDescriptors<T>,
    candidates: &[usize],
) -> Result<Vec<T>> {
    let chans: Vec<[T; 4]> = candidates
        .iter()
        .map(|&i| similarity_channels(f, fr, desc.cls.row(i), desc.query.row(i)))
        .collect();
    let mut rho = vec![T::zero(); candidates.len()];
    for c in 0..4 {
        let logits: Vec<T> = chans.iter().map(|ch| ch[c]).collect();
        for (r, p) in rho.iter_mut().zip(softmax_slice(&logits)?) {
            *r = *r + p;
        }
    }
    let quarter = T::c(0.25);
    Ok(rho.into_iter().map(|r| r * quarter).collect())
}

/// `ρ` for every patch, row-major `n × width`.
pub fn similarity_all<T: Real>(
    patches: &PatchSet<T>,
    desc: &SubregionDescriptors<T>,
    inc: &InclusionMatrix,
) -> Result<Vec<T>> {
    let fr = patches
        .region_features()
        .ok_or_else(|| CareError::contract("region-aware features not populated"))?;
    let mut out = Vec::with_capacity(inc.n * inc.width());
    for (j, cands) in inc.candidates.iter().enumerate() {
        out.extend(candidate_similarity(patches.features().row(j), fr.row(j), desc, cands)?);
    }
    Ok(out)
}

/// One adaptive region: the window it is seeded from and its patches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub id: usize,
    pub members: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionAssignment {
    pub width: usize,
    pub candidates: Vec<Vec<usize>>,
    /// `w_ji` at each candidate, row-major `n × width`.
    pub w: Vec<f64>,
    /// 0-based rank of each candidate by `w` descending (ties to lower id).
    pub ranks: Vec<usize>,
    /// `w` renormalized per patch; one-hot on the fallback when all `w` are 0.
    pub pi: Vec<f64>,
    /// Chosen window of each patch.
    pub chosen: Vec<usize>,
    /// Patches whose candidate scores were all zero.
    pub fallbacks: Vec<usize>,
    /// Nonempty regions ordered by id.
    pub regions: Vec<Region>,
}

impl RegionAssignment {
    pub fn n(&self) -> usize {
        self.chosen.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.regions.iter().map(|r| r.members.len()).collect()
    }

    /// `w` of the chosen candidate for patch `j`.
    pub fn chosen_w(&self, j: usize) -> f64 {
        let c = &self.candidates[j];
        let pos = c.iter().position(|&i| i == self.chosen[j]).expect("chosen is a candidate");
        self.w[j * self.width + pos]
    }

    /// Position of the region containing patch `j` in [`regions`](Self::regions).
    pub fn region_index_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.n()];
        for (r, reg) in self.regions.iter().enumerate() {
            for &j in &reg.members {
                out[j] = r;
            }
        }
        out
    }
}

/// Scores `w = ρ·μ`, picks the argmax per patch (ties to the lower window
/// index) and groups patches into regions. `rho` is row-major over
/// `inc.candidates`.
pub fn assign_regions<T: Real>(rho: &[T], inc: &InclusionMatrix) -> Result<RegionAssignment> {
    let width = inc.width();
    if rho.len() != inc.n * width {
        return Err(CareError::shape("assign_regions", format!("rho has {} entries", rho.len())));
    }
    let mu = inc.candidate_mu();
    let w: Vec<f64> = rho.iter().zip(&mu).map(|(r, m)| r.f64() * m).collect();
    let mut ranks = vec![0; w.len()];
    let mut pi = vec![0.0; w.len()];
    let mut chosen = Vec::with_capacity(inc.n);
    let mut fallbacks = Vec::new();
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (j, cands) in inc.candidates.iter().enumerate() {
        let row = &w[j * width..(j + 1) * width];
        let mut order: Vec<usize> = (0..width).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(cands[a].cmp(&cands[b])));
        for (r, &p) in order.iter().enumerate() {
            ranks[j * width + p] = r;
        }
        let total: f64 = row.iter().sum();
        let pick = if total > 0.0 {
            for (p, &x) in row.iter().enumerate() {
                pi[j * width + p] = x / total;
            }
            order[0]
        } else {
            fallbacks.push(j);
            let mrow = &mu[j * width..(j + 1) * width];
            let best = (0..width)
                .min_by(|&a, &b| mrow[b].total_cmp(&mrow[a]).then(cands[a].cmp(&cands[b])))
                .expect("nonempty candidates");
            pi[j * width + best] = 1.0;
            best
        };
        chosen.push(cands[pick]);
        groups.entry(cands[pick]).or_default().push(j);
    }
    if !fallbacks.is_empty() {
        log::debug!("{} patches fell back to nearest subregion", fallbacks.len());
    }
    Ok(RegionAssignment {
        width,
        candidates: inc.candidates.clone(),
        w,
        ranks,
        pi,
        chosen,
        fallbacks,
        regions: groups.into_iter().map(|(id, members)| Region { id, members }).collect(),
    })
}

/// Tiling, inclusion, similarity and assignment in one call.
pub fn partition<T: Real>(
    patches: &PatchSet<T>,
    desc: &SubregionDescriptors<T>,
    k: usize,
    top_k: usize,
) -> Result<(SubregionGrid, InclusionMatrix, RegionAssignment)> {
    let grid = tile_subregions(patches.anchors(), k)?;
    if desc.cls.rows() != grid.len() || desc.query.rows() != grid.len() {
        return Err(CareError::shape("partition", "descriptor rows do not match window count"));
    }
    let inc = soft_inclusion(patches.anchors(), &grid, top_k)?;
    let rho = similarity_all(patches, desc, &inc)?;
    let asg = assign_regions(&rho, &inc)?;
    Ok((grid, inc, asg))
}
