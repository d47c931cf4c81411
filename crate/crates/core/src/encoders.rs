//! Attention encoders: per-window regional attention, adaptive-region
//! self-attention, and the RNA/protein towers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CareError, Result};
use crate::nn::{token_init, AttentionBlockConfig, Encoder, ForwardCtx, Linear, MultiHeadAttention};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// `[CLS]` self-attention plus shared-query cross-attention inside one window.
#[derive(Clone, Debug)]
pub struct RegionalEncoder {
    pub cls: ParamId,
    pub encoder: Encoder,
    pub query: ParamId,
    pub cross: MultiHeadAttention,
}

/// Outputs of [`RegionalEncoder`] for one window.
#[derive(Clone, Copy, Debug)]
pub struct RegionalOutput {
    /// `1 × d_in`.
    pub cls: Var,
    /// `1 × d_in`.
    pub query: Var,
    /// `n × d_in`, one row per input patch.
    pub region_features: Var,
}

impl RegionalEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: AttentionBlockConfig, rng: &mut impl Rng) -> Self {
        Self {
            cls: store.register(format!("{name}.cls"), token_init(cfg.dim, rng), false),
            encoder: Encoder::new(store, &format!("{name}.self"), cfg, rng),
            query: store.register(format!("{name}.query"), token_init(cfg.dim, rng), false),
            cross: MultiHeadAttention::new(store, &format!("{name}.cross"), cfg.dim, cfg.heads, rng),
        }
    }

    /// `[CLS] ‖ x` through the encoder; returns `(g^CLS, F^R)`.
    pub fn self_attention<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, ctx: &mut ForwardCtx) -> Result<(Var, Var)> {
        let n = nonempty_rows(g, x, "regional self-attention")?;
        let cls = g.param(self.cls);
        let seq = g.concat_rows(&[cls, x])?;
        let out = self.encoder.forward(g, seq, ctx)?;
        Ok((g.slice_rows(out, 0, 1)?, g.slice_rows(out, 1, n + 1)?))
    }

    /// The shared query attending over `x`; returns `g^Q`.
    pub fn cross_attention<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        nonempty_rows(g, x, "regional cross-attention")?;
        let q = g.param(self.query);
        self.cross.forward(g, q, x)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, ctx: &mut ForwardCtx) -> Result<RegionalOutput> {
        let (cls, region_features) = self.self_attention(g, x, ctx)?;
        let query = self.cross_attention(g, x)?;
        Ok(RegionalOutput {
            cls,
            query,
            region_features,
        })
    }
}

/// Self-attention over one adaptive region with a final `d_in → d_out`
/// projection of the `[CLS]` output.
#[derive(Clone, Debug)]
pub struct ArsaEncoder {
    pub cls: ParamId,
    pub encoder: Encoder,
    pub proj: Linear,
}

impl ArsaEncoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: AttentionBlockConfig,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            cls: store.register(format!("{name}.cls"), token_init(cfg.dim, rng), false),
            encoder: Encoder::new(store, &format!("{name}.encoder"), cfg, rng),
            proj: Linear::new(store, &format!("{name}.proj"), cfg.dim, d_out, true, rng),
        }
    }

    /// Returns `(g^AR, F^AR,cep)` with shapes `1 × d_out` and `n × d_in`;
    /// `g^AR` is unit norm.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, ctx: &mut ForwardCtx) -> Result<(Var, Var)> {
        let n = nonempty_rows(g, x, "adaptive region self-attention")?;
        let cls = g.param(self.cls);
        let seq = g.concat_rows(&[cls, x])?;
        let out = self.encoder.forward(g, seq, ctx)?;
        let head = g.slice_rows(out, 0, 1)?;
        let cep = g.slice_rows(out, 1, n + 1)?;
        let gar = self.proj.forward(g, head)?;
        Ok((g.l2_normalize(gar)?, cep))
    }
}

fn nonempty_rows<T: Real>(g: &Graph<'_, T>, x: Var, what: &str) -> Result<usize> {
    let shape = g.shape(x);
    if shape.len() != 2 || shape[0] == 0 {
        return Err(CareError::contract(format!("{what} needs a nonempty n × d input, got {shape:?}")));
    }
    Ok(shape[0])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rna,
    Protein,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rna => "rna",
            Modality::Protein => "protein",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = CareError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rna" => Ok(Modality::Rna),
            "protein" => Ok(Modality::Protein),
            other => Err(CareError::Config(format!("unknown modality '{other}'"))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Entity ids and expression values for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MolecularProfile {
    pub modality: Modality,
    pub ids: Vec<u32>,
    pub values: Vec<f64>,
}

/// Proteins kept per profile, by abundance.
pub const PROTEIN_TOP_N: usize = 10;

impl MolecularProfile {
    pub fn new(modality: Modality, ids: Vec<u32>, values: Vec<f64>) -> Result<Self> {
        if ids.is_empty() || ids.len() != values.len() {
            return Err(CareError::contract(format!(
                "profile needs matching nonempty ids and values ({} vs {})",
                ids.len(),
                values.len()
            )));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(CareError::contract("duplicate entity id in profile"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CareError::NonFinite("expression value".into()));
        }
        if modality == Modality::Protein && values.iter().any(|&v| v < 0.0) {
            return Err(CareError::contract("protein abundances must be nonnegative"));
        }
        Ok(Self { modality, ids, values })
    }

    /// Keeps the `n` most abundant entities (ties to the lower id), in id order.
    pub fn top_n(mut self, n: usize) -> Self {
        if self.ids.len() <= n {
            return self;
        }
        let mut idx: Vec<usize> = (0..self.ids.len()).collect();
        idx.sort_by(|&a, &b| self.values[b].total_cmp(&self.values[a]).then(self.ids[a].cmp(&self.ids[b])));
        idx.truncate(n);
        idx.sort_by_key(|&i| self.ids[i]);
        self.ids = idx.iter().map(|&i| self.ids[i]).collect();
        self.values = idx.iter().map(|&i| self.values[i]).collect();
        self
    }
}

/// Tower sizes for the molecular encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MolecularConfig {
    pub rna_vocab: usize,
    pub protein_vocab: usize,
    pub protein_top_n: usize,
    pub tower: AttentionBlockConfig,
}

impl MolecularConfig {
    pub fn validate(&self) -> Result<()> {
        self.tower.validate("molecular tower")?;
        if self.rna_vocab == 0 || self.protein_vocab == 0 || self.protein_top_n == 0 {
            return Err(CareError::Config("molecular vocabularies and top-n must be positive".into()));
        }
        Ok(())
    }

    pub fn vocab(&self, m: Modality) -> usize {
        match m {
            Modality::Rna => self.rna_vocab,
            Modality::Protein => self.protein_vocab,
        }
    }
}

/// RNA or protein tower: id + expression tokens, transformer, pooling,
/// projection, ℓ2 normalization. The projection is registered in the `head`
/// group as `head.<modality>_proj`; everything else under `name`.
#[derive(Clone, Debug)]
pub struct MolecularEncoder {
    pub modality: Modality,
    pub vocab: usize,
    pub id_embedding: ParamId,
    pub expression: Linear,
    pub encoder: Encoder,
    pub proj: Linear,
}

impl MolecularEncoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        modality: Modality,
        vocab: usize,
        cfg: AttentionBlockConfig,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let emb = Tensor::from_fn(vocab, cfg.dim, |_, _| T::c(rng.random_range(-0.5..0.5)));
        Self {
            modality,
            vocab,
            id_embedding: store.register(format!("{name}.id_embedding"), emb, false),
            expression: Linear::new(store, &format!("{name}.expression"), 1, cfg.dim, true, rng),
            encoder: Encoder::new(store, &format!("{name}.encoder"), cfg, rng),
            proj: Linear::new(store, &format!("head.{modality}_proj"), cfg.dim, d_out, true, rng),
        }
    }

    /// Pooling weights over tokens: uniform for RNA, expression-weighted for
    /// protein (uniform when every value is 0).
    pub fn pool_weights(&self, profile: &MolecularProfile) -> Vec<f64> {
        let t = profile.ids.len() as f64;
        match self.modality {
            Modality::Rna => vec![1.0 / t; profile.ids.len()],
            Modality::Protein => {
                let total: f64 = profile.values.iter().sum();
                if total > 0.0 {
                    profile.values.iter().map(|v| v / total).collect()
                } else {
                    log::warn!("protein profile with all-zero abundance pooled uniformly");
                    vec![1.0 / t; profile.ids.len()]
                }
            }
        }
    }

    /// Token outputs before pooling, `t × dim`.
    pub fn tokens<T: Real>(&self, g: &mut Graph<'_, T>, profile: &MolecularProfile, ctx: &mut ForwardCtx) -> Result<Var> {
        if profile.modality != self.modality {
            return Err(CareError::contract(format!(
                "{} profile given to the {} encoder",
                profile.modality, self.modality
            )));
        }
        let unknown: Vec<u32> = profile.ids.iter().copied().filter(|&i| i as usize >= self.vocab).collect();
        if !unknown.is_empty() {
            return Err(CareError::UnknownEntities {
                modality: self.modality.to_string(),
                ids: unknown,
            });
        }
        let idx: Vec<usize> = profile.ids.iter().map(|&i| i as usize).collect();
        let table = g.param(self.id_embedding);
        let ids = g.gather_rows(table, &idx)?;
        let vals = Tensor::matrix(idx.len(), 1, profile.values.iter().map(|&v| T::c(v)).collect())?;
        let vals = g.constant(vals);
        let expr = self.expression.forward(g, vals)?;
        let tok = g.add(ids, expr)?;
        self.encoder.forward(g, tok, ctx)
    }

    /// Unit-norm `1 × d_out` embedding.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, profile: &MolecularProfile, ctx: &mut ForwardCtx) -> Result<Var> {
        let out = self.tokens(g, profile, ctx)?;
        let wts = self.pool_weights(profile);
        let wts = g.constant(Tensor::matrix(1, wts.len(), wts.into_iter().map(T::c).collect())?);
        let pooled = g.matmul(wts, out)?;
        let z = self.proj.forward(g, pooled)?;
        g.l2_normalize(z)
    }
}
