//! Transformer building blocks expressed as explicit graph compositions.
//!
//! Every block registers its parameters in a [`ParamStore`] at construction
//! and only keeps [`ParamId`] handles; forward passes read the values through
//! the [`Graph`]. Attention is plain `softmax(QKᵀ/√d)V` per head, and no block
//! adds positional information, so all of them are permutation-equivariant
//! over the token axis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CareError, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Depth, width and regularization of a transformer encoder stack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlockConfig {
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
}

impl AttentionBlockConfig {
    pub fn validate(&self, what: &str) -> Result<()> {
        if self.depth == 0 {
            return Err(CareError::Config(format!("{what}: depth must be at least 1")));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(CareError::Config(format!(
                "{what}: dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CareError::Config(format!("{what}: dropout must be in [0, 1)")));
        }
        Ok(())
    }
}

/// Per-forward-pass state: whether dropout is active and its RNG.
#[derive(Clone, Debug)]
pub struct ForwardCtx {
    rng: Option<ChaCha8Rng>,
}

impl ForwardCtx {
    /// Deterministic evaluation; dropout disabled.
    pub fn eval() -> Self {
        Self { rng: None }
    }

    /// Training mode with dropout driven by `seed`.
    pub fn train(seed: u64) -> Self {
        Self {
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    /// Inverted dropout. A no-op in eval mode or at rate 0.
    pub fn dropout<T: Real>(&mut self, g: &mut Graph<'_, T>, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = T::c(1.0 / (1.0 - rate));
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?);
        g.mul(x, m)
    }
}

/// Xavier-uniform matrix.
pub(crate) fn xavier<T: Real>(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<T> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| T::c(rng.random_range(-a..a)))
}

/// Small normal-ish init for learnable tokens.
pub(crate) fn token_init<T: Real>(cols: usize, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(1, cols, |_, _| T::c(rng.random_range(-0.1..0.1)))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.register(format!("{name}.weight"), xavier(d_in, d_out, rng), true);
        let bias = bias.then(|| store.register(format!("{name}.bias"), Tensor::zeros(&[d_out]), false));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    /// `x·W + b` for `x` of shape `n × d_in`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.register(format!("{name}.gamma"), Tensor::full(&[dim], T::one()), false),
            beta: store.register(format!("{name}.beta"), Tensor::zeros(&[dim]), false),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x)?;
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let s = g.mul(n, gamma)?;
        g.add(s, beta)
    }
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "{name}: dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng),
            heads,
        }
    }

    /// Attends `query` (`nq × d`) over `context` (`nk × d`).
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, query: Var, context: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, query, context)?.0)
    }

    /// Like [`forward`](Self::forward) but also returns each head's
    /// `nq × nk` attention matrix.
    pub fn forward_with_weights<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        query: Var,
        context: Var,
    ) -> Result<(Var, Vec<Var>)> {
        if g.value(context).rows() == 0 {
            return Err(CareError::contract("attention over an empty context"));
        }
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, context)?;
        let v = self.v.forward(g, context)?;
        let dim = self.q.d_out;
        let dh = dim / self.heads;
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax(scores, 1)?;
            outs.push(g.matmul(attn, vh)?);
            weights.push(attn);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        Ok((self.out.forward(g, merged)?, weights))
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, h)
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
    pub dropout: f64,
}

impl EncoderBlock {
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, h, h)?;
        let a = ctx.dropout(g, a, self.dropout)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        let f = ctx.dropout(g, f, self.dropout)?;
        g.add(x, f)
    }
}

/// Stack of [`EncoderBlock`]s followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
    pub cfg: AttentionBlockConfig,
}

impl Encoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: AttentionBlockConfig, rng: &mut impl Rng) -> Self {
        let blocks = (0..cfg.depth)
            .map(|i| {
                let p = format!("{name}.blocks.{i}");
                EncoderBlock {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), cfg.dim),
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), cfg.dim, cfg.heads, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), cfg.dim),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), cfg.dim, cfg.dim * cfg.ffn_mult, rng),
                    dropout: cfg.dropout,
                }
            })
            .collect();
        Self {
            blocks,
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.dim),
            cfg,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, h, ctx)?;
        }
        self.norm.forward(g, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> AttentionBlockConfig {
        AttentionBlockConfig {
            depth: 2,
            heads: 2,
            dim: 8,
            ffn_mult: 2,
            dropout: 0.0,
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate("x").is_ok());
        assert!(AttentionBlockConfig { heads: 3, ..cfg() }.validate("x").is_err());
        assert!(AttentionBlockConfig { depth: 0, ..cfg() }.validate("x").is_err());
    }

    #[test]
    fn dropout_is_seed_deterministic_and_off_in_eval() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[4, 8], 1.0));
        let mut eval = ForwardCtx::eval();
        assert_eq!(eval.dropout(&mut g, x, 0.5).unwrap(), x);
        let a = ForwardCtx::train(7).dropout(&mut g, x, 0.5).unwrap();
        let b = ForwardCtx::train(7).dropout(&mut g, x, 0.5).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert!(g.value(a).data().iter().any(|&v| v == 0.0));
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut store, "enc", cfg(), &mut rng);
        let x = Tensor::from_fn(5, 8, |i, j| ((i * 8 + j) as f64 * 0.37).sin());
        let perm = [3, 0, 4, 1, 2];
        let xp = Tensor::from_fn(5, 8, |i, j| x.at(perm[i], j));
        let mut g = Graph::inference(&store);
        let a = g.constant(x);
        let b = g.constant(xp);
        let ya = enc.forward(&mut g, a, &mut ForwardCtx::eval()).unwrap();
        let yb = enc.forward(&mut g, b, &mut ForwardCtx::eval()).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((g.value(yb).at(i, j) - g.value(ya).at(p, j)).abs() < 1e-12);
            }
        }
    }
}
