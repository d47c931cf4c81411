//! The slide encoder: regional attention per window, adaptive region
//! generation, adaptive-region self-attention and fusion pooling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{ArsaEncoder, RegionalEncoder};
use crate::error::{CareError, Result};
use crate::nn::{token_init, AttentionBlockConfig, ForwardCtx};
use crate::objectives::region_structuring_loss;
use crate::region::{
    assign_regions, similarity_all, soft_inclusion, tile_subregions, Anchor, InclusionMatrix, PatchSet,
    RegionAssignment, SubregionDescriptors, SubregionGrid,
};
use crate::spf::{coverage_prior, fuse, select_roi, GatedAttention, SlideEmbedding};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Architecture of the slide encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub window: usize,
    pub top_k: usize,
    pub regional: AttentionBlockConfig,
    pub arsa: AttentionBlockConfig,
    pub gate_hidden: usize,
    pub lambda_spf: f64,
    pub lambda_rsl: f64,
    pub rsl_target: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.regional.validate("regional")?;
        self.arsa.validate("arsa")?;
        if self.regional.dim != self.d_in || self.arsa.dim != self.d_in {
            return Err(CareError::Config("attention block dims must equal d_in".into()));
        }
        if self.window == 0 || self.top_k == 0 || self.gate_hidden == 0 || self.d_out == 0 {
            return Err(CareError::Config("window, top_k, gate_hidden and d_out must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_spf) {
            return Err(CareError::Config("lambda_spf must lie in [0, 1]".into()));
        }
        if self.lambda_rsl < 0.0 || self.rsl_target < 0.0 {
            return Err(CareError::Config("lambda_rsl and rsl_target must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Parameter handles of the slide encoder.
#[derive(Clone, Debug)]
pub struct CareEncoder {
    pub cfg: ModelConfig,
    pub regional: RegionalEncoder,
    pub arsa: ArsaEncoder,
    pub gate: GatedAttention,
    pub mask_token: ParamId,
}

/// Graph nodes and discrete structure of one forward pass.
#[derive(Clone, Debug)]
pub struct CareForward {
    pub grid: SubregionGrid,
    pub inclusion: InclusionMatrix,
    pub assignment: RegionAssignment,
    /// `m × d_in` window `[CLS]` outputs.
    pub cls: Var,
    /// `m × d_in` window query outputs.
    pub query: Var,
    /// `n × d_in` region-aware patch features, patch order.
    pub region_features: Var,
    /// `n × width` candidate distribution.
    pub pi: Var,
    /// `R × d_out` region features, regions in id order.
    pub g_ar: Var,
    /// `n × d_in` context-enriched patch features, patch order.
    pub cep: Var,
    pub alpha: Vec<f64>,
    pub beta: Var,
    pub omega: Var,
    /// `1 × d_out` slide embedding.
    pub z: Var,
    pub e_bar: Var,
    pub rsl: Var,
    /// Position of the ROI within `assignment.regions`.
    pub roi: usize,
}

impl CareForward {
    pub fn roi_id(&self) -> usize {
        self.assignment.regions[self.roi].id
    }

    /// Plain-value summary of the pooling stage.
    pub fn embedding<T: Real>(&self, g: &Graph<'_, T>) -> SlideEmbedding<T> {
        let g_ar = g.value(self.g_ar);
        SlideEmbedding {
            z: g.value(self.z).data().to_vec(),
            region_ids: self.assignment.regions.iter().map(|r| r.id).collect(),
            sizes: self.assignment.sizes(),
            alpha: self.alpha.clone(),
            beta: g.value(self.beta).data().to_vec(),
            omega: g.value(self.omega).data().to_vec(),
            roi: self.roi_id(),
            roi_feature: g_ar.row(self.roi).to_vec(),
        }
    }
}

impl CareEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            regional: RegionalEncoder::new(store, &format!("{name}.regional"), cfg.regional, rng),
            arsa: ArsaEncoder::new(store, &format!("{name}.arsa"), cfg.arsa, cfg.d_out, rng),
            gate: GatedAttention::new(store, &format!("{name}.gate"), cfg.d_out, cfg.gate_hidden, rng),
            mask_token: store.register(format!("{name}.mask_token"), token_init(cfg.d_in, rng), false),
        })
    }

    /// Features with the rows flagged in `mask` replaced by the learnable
    /// mask token.
    pub fn masked_input<T: Real>(&self, g: &mut Graph<'_, T>, features: &Tensor<T>, mask: &[bool]) -> Result<Var> {
        let (n, d) = features.dims2();
        if mask.len() != n {
            return Err(CareError::shape("masked_input", format!("mask of {} for {n} rows", mask.len())));
        }
        if !mask.iter().any(|&m| m) {
            return Ok(g.constant(features.clone()));
        }
        let kept = Tensor::from_fn(n, d, |i, j| if mask[i] { T::zero() } else { features.at(i, j) });
        let sel = Tensor::matrix(n, 1, mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect())?;
        let kept = g.constant(kept);
        let sel = g.constant(sel);
        let tok = g.param(self.mask_token);
        let fill = g.mul(sel, tok)?;
        g.add(kept, fill)
    }

    /// Full forward pass over patches at `anchors` with input features `x`
    /// (`n × d_in`).
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        anchors: &[Anchor],
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<CareForward> {
        let n = anchors.len();
        if g.shape(x) != [n, self.cfg.d_in] {
            return Err(CareError::shape(
                "CareEncoder::forward",
                format!("{n} anchors, features {:?}, d_in {}", g.shape(x), self.cfg.d_in),
            ));
        }
        let grid = tile_subregions(anchors, self.cfg.window)?;
        let inclusion = soft_inclusion(anchors, &grid, self.cfg.top_k)?;

        let mut cls_rows = Vec::with_capacity(grid.len());
        let mut query_rows = Vec::with_capacity(grid.len());
        let mut fr_parts = Vec::with_capacity(grid.len());
        let mut order = Vec::with_capacity(n);
        for members in &grid.members {
            let xi = g.gather_rows(x, members)?;
            let out = self.regional.forward(g, xi, ctx)?;
            cls_rows.push(out.cls);
            query_rows.push(out.query);
            fr_parts.push(out.region_features);
            order.extend_from_slice(members);
        }
        let cls = g.concat_rows(&cls_rows)?;
        let query = g.concat_rows(&query_rows)?;
        let fr = g.concat_rows(&fr_parts)?;
        let region_features = g.gather_rows(fr, &inverse(&order))?;

        let patches = PatchSet::new(anchors.to_vec(), g.value(x).clone())
            .and_then(|mut p| p.set_region_features(g.value(region_features).clone()).map(|_| p))?;
        let desc = SubregionDescriptors {
            cls: g.value(cls).clone(),
            query: g.value(query).clone(),
        };
        let rho = similarity_all(&patches, &desc, &inclusion)?;
        let assignment = assign_regions(&rho, &inclusion)?;
        let pi = self.candidate_distribution(g, x, region_features, cls, query, &inclusion, &assignment)?;
        let (e_bar, rsl) = region_structuring_loss(g, pi, &assignment.ranks, self.cfg.rsl_target)?;

        let mut gar_rows = Vec::with_capacity(assignment.regions.len());
        let mut cep_parts = Vec::with_capacity(assignment.regions.len());
        let mut order = Vec::with_capacity(n);
        for region in &assignment.regions {
            let xr = g.gather_rows(x, &region.members)?;
            let (gar, cep) = self.arsa.forward(g, xr, ctx)?;
            gar_rows.push(gar);
            cep_parts.push(cep);
            order.extend_from_slice(&region.members);
        }
        let g_ar = g.concat_rows(&gar_rows)?;
        let cep = g.concat_rows(&cep_parts)?;
        let cep = g.gather_rows(cep, &inverse(&order))?;

        let alpha = coverage_prior(&assignment.sizes())?;
        let beta = self.gate.weights(g, g_ar)?;
        let (z, omega) = fuse(g, g_ar, &alpha, beta, self.cfg.lambda_spf)?;
        let roi = select_roi(g.value(omega).data())?;
        Ok(CareForward {
            grid,
            inclusion,
            assignment,
            cls,
            query,
            region_features,
            pi,
            g_ar,
            cep,
            alpha,
            beta,
            omega,
            z,
            e_bar,
            rsl,
            roi,
        })
    }

    /// Differentiable `π = w / Σw` with `w = ρ·μ` over each patch's
    /// candidates. Rows whose scores are all zero use the one-hot fallback
    /// chosen by the assignment.
    #[allow(clippy::too_many_arguments)]
    fn candidate_distribution<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        fr: Var,
        cls: Var,
        query: Var,
        inc: &InclusionMatrix,
        asg: &RegionAssignment,
    ) -> Result<Var> {
        let (n, k) = (inc.n, inc.width());
        let flat: Vec<usize> = inc.candidates.iter().flatten().copied().collect();
        let fnorm = g.l2_normalize(x)?;
        let rnorm = g.l2_normalize(fr)?;
        let cnorm = g.l2_normalize(cls)?;
        let qnorm = g.l2_normalize(query)?;
        let mut rho = None;
        for (p, d) in [(fnorm, cnorm), (fnorm, qnorm), (rnorm, cnorm), (rnorm, qnorm)] {
            let c = g.matmul_t(p, d)?;
            let c = g.take_along_rows(c, &flat, k)?;
            let s = g.softmax(c, 1)?;
            rho = Some(match rho {
                None => s,
                Some(acc) => g.add(acc, s)?,
            });
        }
        let rho = g.scale(rho.expect("four channels"), T::c(0.25))?;
        let mu = g.constant(Tensor::matrix(n, k, inc.candidate_mu().into_iter().map(T::c).collect())?);
        let w = g.mul(rho, mu)?;
        let w = if asg.fallbacks.is_empty() {
            w
        } else {
            let mut fix = vec![T::zero(); n * k];
            for &j in &asg.fallbacks {
                for p in 0..k {
                    fix[j * k + p] = T::c(asg.pi[j * k + p]);
                }
            }
            let fix = g.constant(Tensor::matrix(n, k, fix)?);
            g.add(w, fix)?
        };
        let total = g.sum_axis(w, 1)?;
        g.div(w, total)
    }

    /// Inference-only embedding of a patch set.
    pub fn embed<T: Real>(&self, store: &ParamStore<T>, patches: &PatchSet<T>) -> Result<(SlideEmbedding<T>, CareForward)> {
        let mut g = Graph::inference(store);
        let x = g.constant(patches.features().clone());
        let out = self.forward(&mut g, patches.anchors(), x, &mut ForwardCtx::eval())?;
        Ok((out.embedding(&g), out))
    }
}

fn inverse(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (pos, &j) in order.iter().enumerate() {
        inv[j] = pos;
    }
    inv
}

/// Full-scale architecture.
pub fn paper_model() -> ModelConfig {
    ModelConfig {
        d_in: 768,
        d_out: 512,
        window: 8,
        top_k: 3,
        regional: AttentionBlockConfig {
            depth: 2,
            heads: 8,
            dim: 768,
            ffn_mult: 4,
            dropout: 0.1,
        },
        arsa: AttentionBlockConfig {
            depth: 5,
            heads: 8,
            dim: 768,
            ffn_mult: 4,
            dropout: 0.1,
        },
        gate_hidden: 128,
        lambda_spf: 0.5,
        lambda_rsl: 0.1,
        rsl_target: 0.5,
    }
}

/// Desk-scale architecture.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        d_in: 32,
        d_out: 16,
        window: 8,
        top_k: 3,
        regional: AttentionBlockConfig {
            depth: 1,
            heads: 4,
            dim: 32,
            ffn_mult: 2,
            dropout: 0.0,
        },
        arsa: AttentionBlockConfig {
            depth: 2,
            heads: 4,
            dim: 32,
            ffn_mult: 2,
            dropout: 0.0,
        },
        gate_hidden: 4,
        lambda_spf: 0.5,
        lambda_rsl: 0.1,
        rsl_target: 0.5,
    }
}
