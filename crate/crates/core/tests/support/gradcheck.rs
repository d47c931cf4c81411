//! Central finite-difference checks of every graph op and the composed losses.
//!
//! Derivatives use the fourth-order stencil
//! `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`: with `h = 1e-4` both the
//! truncation and the round-off terms stay below 1e-11, which matters for the
//! many parameters whose true gradient is tiny or exactly zero.

use care_core::encoders::{ArsaEncoder, Modality, MolecularEncoder, MolecularProfile, RegionalEncoder};
use care_core::nn::{AttentionBlockConfig, Encoder, FeedForward, ForwardCtx, LayerNorm, Linear, MultiHeadAttention};
use care_core::objectives::{
    distillation_losses, info_nce_symmetric, region_structuring_loss, soft_cross_entropy, teacher_targets, total_loss,
    StudentViews, TeacherViews,
};
use care_core::spf::{coverage_prior, fuse, GatedAttention};
use care_core::{Anchor, CareEncoder, Graph, ModelConfig, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CONFIGS: usize = 20;
const H: f64 = 1e-4;
const FLOOR: f64 = 1e-6;
const MAX_INPUT_COORDS: usize = 24;
const MAX_PARAM_COORDS: usize = 4;

type Build<'a> = dyn Fn(&mut Graph<'_, f64>, &[Var]) -> care_core::Result<Var> + 'a;

/// `Σ out ⊙ R` for a fixed pseudo-random `R`, so every output entry matters.
fn project(g: &mut Graph<'_, f64>, out: Var) -> care_core::Result<Var> {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    if n == 1 {
        return g.sum(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE ^ n as u64);
    let r = g.constant(Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?);
    let p = g.mul(out, r)?;
    g.sum(p)
}

fn eval(store: &ParamStore<f64>, inputs: &[Tensor<f64>], build: &Build<'_>) -> f64 {
    let mut g = Graph::with_params(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    let s = project(&mut g, out).expect("projection");
    g.value(s).item()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn stencil(f: impl Fn(f64) -> f64) -> f64 {
    (-f(2.0 * H) + 8.0 * f(H) - 8.0 * f(-H) + f(-2.0 * H)) / (12.0 * H)
}

fn coords(len: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    (0..max).map(|_| rng.random_range(0..len)).collect()
}

/// Largest relative error between backprop and central differences over the
/// inputs and (a sample of) the parameters.
pub fn check(store: &ParamStore<f64>, inputs: &[Tensor<f64>], build: &Build<'_>, seed: u64) -> f64 {
    let mut g = Graph::with_params(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    let s = project(&mut g, out).expect("projection");
    g.backward(s).expect("backward");
    let input_grads: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let pg = g.param_grads();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        for i in coords(t.numel(), MAX_INPUT_COORDS, &mut rng) {
            let num = stencil(|h| {
                let mut at = inputs.to_vec();
                at[k].data_mut()[i] += h;
                eval(store, &at, build)
            });
            worst = worst.max(rel_err(input_grads[k].data()[i], num));
        }
    }
    for id in store.ids().collect::<Vec<_>>() {
        let Some(grad) = pg.get(id) else { continue };
        for i in coords(store.get(id).numel(), MAX_PARAM_COORDS, &mut rng) {
            let num = stencil(|h| {
                let mut at = store.clone();
                at.get_mut(id).data_mut()[i] += h;
                eval(&at, inputs, build)
            });
            worst = worst.max(rel_err(grad.data()[i], num));
        }
    }
    worst
}

fn mat(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(r, c, |_, _| rng.random_range(lo..hi))
}

fn away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(r, c, |_, _| {
        let m = rng.random_range(0.5..1.5);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn block(rng: &mut ChaCha8Rng, dim: usize) -> AttentionBlockConfig {
    let heads = if dim % 2 == 0 && rng.random::<bool>() { 2 } else { 1 };
    AttentionBlockConfig {
        depth: rng.random_range(1..=2),
        heads,
        dim,
        ffn_mult: 2,
        dropout: 0.0,
    }
}

fn tiny_model(rng: &mut ChaCha8Rng) -> ModelConfig {
    let d_in = 2 * rng.random_range(1..=2);
    ModelConfig {
        d_in,
        d_out: rng.random_range(2..=3),
        window: 2,
        top_k: rng.random_range(2..=3),
        regional: AttentionBlockConfig { depth: 1, ..block(rng, d_in) },
        arsa: AttentionBlockConfig { depth: 1, ..block(rng, d_in) },
        gate_hidden: rng.random_range(2..=3),
        lambda_spf: rng.random_range(0.0..1.0),
        lambda_rsl: 0.1,
        rsl_target: 0.5,
    }
}

/// Distinct random anchors on a small grid.
fn anchors(rng: &mut ChaCha8Rng, n: usize, side: i64) -> Vec<Anchor> {
    let mut all: Vec<Anchor> = (0..side).flat_map(|u| (0..side).map(move |v| Anchor::new(u, v))).collect();
    for i in (1..all.len()).rev() {
        all.swap(i, rng.random_range(0..=i));
    }
    all.truncate(n);
    all
}

type Case = (String, f64);

fn op_cases(cfg: usize) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + cfg as u64);
    let r = rng.random_range(1..=4);
    let c = rng.random_range(2..=5);
    let k = rng.random_range(1..=4);
    let empty = ParamStore::<f64>::new();
    let a = mat(&mut rng, r, c, -1.0, 1.0);
    let b = mat(&mut rng, r, c, -1.0, 1.0);
    let row = mat(&mut rng, 1, c, -1.0, 1.0);
    let col = mat(&mut rng, r, 1, -1.0, 1.0);
    let rk = mat(&mut rng, c, k, -1.0, 1.0);
    let nz = away_from_zero(&mut rng, r, c);
    let pos = mat(&mut rng, r, c, 0.2, 2.0);
    let s = rng.random_range(-2.0..2.0);
    let lo = rng.random_range(0..r);
    let hi = rng.random_range(lo + 1..=r);
    let clo = rng.random_range(0..c);
    let chi = rng.random_range(clo + 1..=c);
    let gidx: Vec<usize> = (0..rng.random_range(1..=6)).map(|_| rng.random_range(0..r)).collect();
    let take = rng.random_range(1..=c);
    let tidx: Vec<usize> = (0..r * take).map(|_| rng.random_range(0..c)).collect();

    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor<f64>>, build: &Build<'_>| {
        out.push((name.to_string(), check(&empty, &inputs, build, cfg as u64)));
    };
    run("add", vec![a.clone(), b.clone()], &|g, v| g.add(v[0], v[1]));
    run("add_row_broadcast", vec![a.clone(), row.clone()], &|g, v| g.add(v[0], v[1]));
    run("add_col_broadcast", vec![a.clone(), col.clone()], &|g, v| g.add(v[0], v[1]));
    run("sub", vec![a.clone(), b.clone()], &|g, v| g.sub(v[0], v[1]));
    run("sub_broadcast", vec![row.clone(), a.clone()], &|g, v| g.sub(v[0], v[1]));
    run("mul", vec![a.clone(), b.clone()], &|g, v| g.mul(v[0], v[1]));
    run("mul_broadcast", vec![a.clone(), col.clone()], &|g, v| g.mul(v[0], v[1]));
    run("div", vec![a.clone(), nz.clone()], &|g, v| g.div(v[0], v[1]));
    run("div_broadcast", vec![a.clone(), away_from_zero(&mut rng.clone(), 1, 1)], &|g, v| g.div(v[0], v[1]));
    run("scale", vec![a.clone()], &|g, v| g.scale(v[0], s));
    run("neg", vec![a.clone()], &|g, v| g.neg(v[0]));
    run("add_scalar", vec![a.clone()], &|g, v| g.add_scalar(v[0], s));
    run("matmul", vec![a.clone(), rk.clone()], &|g, v| g.matmul(v[0], v[1]));
    run("transpose", vec![a.clone()], &|g, v| g.transpose(v[0]));
    run("matmul_t", vec![a.clone(), b.clone()], &|g, v| g.matmul_t(v[0], v[1]));
    run("concat_rows", vec![a.clone(), row.clone()], &|g, v| g.concat_rows(&[v[0], v[1], v[0]]));
    run("concat_cols", vec![a.clone(), col.clone()], &|g, v| g.concat_cols(&[v[1], v[0]]));
    run("slice_rows", vec![a.clone()], &|g, v| g.slice_rows(v[0], lo, hi));
    run("slice_cols", vec![a.clone()], &|g, v| g.slice_cols(v[0], clo, chi));
    run("gather_rows", vec![a.clone()], &|g, v| g.gather_rows(v[0], &gidx));
    run("take_along_rows", vec![a.clone()], &|g, v| g.take_along_rows(v[0], &tidx, take));
    run("reshape", vec![a.clone()], &|g, v| g.reshape(v[0], vec![c, r]));
    run("tanh", vec![a.clone()], &|g, v| g.tanh(v[0]));
    run("sigmoid", vec![a.clone()], &|g, v| g.sigmoid(v[0]));
    run("exp", vec![a.clone()], &|g, v| g.exp(v[0]));
    run("log", vec![pos.clone()], &|g, v| g.log(v[0]));
    run("gelu", vec![a.clone()], &|g, v| g.gelu(v[0]));
    run("softmax_rows", vec![a.clone()], &|g, v| g.softmax(v[0], 1));
    run("softmax_cols", vec![a.clone()], &|g, v| g.softmax(v[0], 0));
    run("log_softmax_rows", vec![a.clone()], &|g, v| g.log_softmax(v[0], 1));
    run("log_softmax_cols", vec![a.clone()], &|g, v| g.log_softmax(v[0], 0));
    run("layer_norm", vec![a.clone()], &|g, v| g.layer_norm(v[0]));
    run("l2_normalize", vec![nz.clone()], &|g, v| g.l2_normalize(v[0]));
    run("cosine_matrix", vec![nz.clone(), away_from_zero(&mut rng.clone(), k, c)], &|g, v| {
        g.cosine_matrix(v[0], v[1])
    });
    run("sum", vec![a.clone()], &|g, v| g.sum(v[0]));
    run("mean", vec![a.clone()], &|g, v| g.mean(v[0]));
    run("sum_axis0", vec![a.clone()], &|g, v| g.sum_axis(v[0], 0));
    run("sum_axis1", vec![a.clone()], &|g, v| g.sum_axis(v[0], 1));
    run("mean_axis0", vec![a.clone()], &|g, v| g.mean_axis(v[0], 0));
    run("mean_axis1", vec![a.clone()], &|g, v| g.mean_axis(v[0], 1));
    run("dot", vec![row.clone(), mat(&mut rng.clone(), 1, c, -1.0, 1.0)], &|g, v| g.dot(v[0], v[1]));
    // Reuse of one node along several paths.
    run("fan_out", vec![a.clone()], &|g, v| {
        let t = g.tanh(v[0])?;
        let m = g.mul(t, v[0])?;
        g.add(m, t)
    });
    out
}

fn layer_cases(cfg: usize) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(2000 + cfg as u64);
    let dim = 2 * rng.random_range(1..=3);
    let n = rng.random_range(1..=5);
    let x = mat(&mut rng, n, dim, -1.0, 1.0);
    let m = rng.random_range(1..=4);
    let ctxm = mat(&mut rng, m, dim, -1.0, 1.0);
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", dim, rng.random_range(1..=4), true, &mut rng);
    out.push(("linear".into(), check(&store, &[x.clone()], &|g, v| lin.forward(g, v[0]), cfg as u64)));

    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", dim);
    // Move γ, β off their init so their gradients are generic.
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().iter_mut().for_each(|p| *p += rng.random_range(-0.5..0.5));
    }
    out.push(("layer_norm_affine".into(), check(&store, &[x.clone()], &|g, v| ln.forward(g, v[0]), cfg as u64)));

    let mut store = ParamStore::new();
    let heads = if rng.random::<bool>() { 2 } else { 1 };
    let mha = MultiHeadAttention::new(&mut store, "mha", dim, heads, &mut rng);
    out.push((
        "multi_head_attention".into(),
        check(&store, &[x.clone(), ctxm.clone()], &|g, v| mha.forward(g, v[0], v[1]), cfg as u64),
    ));

    let mut store = ParamStore::new();
    let ffn = FeedForward::new(&mut store, "ffn", dim, 2 * dim, &mut rng);
    out.push(("feed_forward".into(), check(&store, &[x.clone()], &|g, v| ffn.forward(g, v[0]), cfg as u64)));

    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, "enc", block(&mut rng, dim), &mut rng);
    out.push((
        "encoder_stack".into(),
        check(&store, &[x], &|g, v| enc.forward(g, v[0], &mut ForwardCtx::eval()), cfg as u64),
    ));
    out
}

fn loss_cases(cfg: usize) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(3000 + cfg as u64);
    let seed = cfg as u64;
    let empty = ParamStore::<f64>::new();
    let mut out = Vec::new();

    // Structuring loss on a softmax-parameterized candidate table.
    let (n, k) = (rng.random_range(1..=5), rng.random_range(1..=3));
    let ranks: Vec<usize> = (0..n).flat_map(|_| {
        let mut r: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            r.swap(i, rng.random_range(0..=i));
        }
        r
    }).collect();
    let target = [0.0, 0.5, 1.0][cfg % 3];
    out.push((
        "rsl".into(),
        check(&empty, &[mat(&mut rng, n, k, -1.0, 1.0)], &|g, v| {
            let pi = g.softmax(v[0], 1)?;
            Ok(region_structuring_loss(g, pi, &ranks, target)?.1)
        }, seed),
    ));
    let lambda = rng.random_range(0.0..1.0);
    out.push((
        "total_loss".into(),
        check(&empty, &[mat(&mut rng, 1, 1, -1.0, 1.0), mat(&mut rng, 1, 1, 0.0, 1.0)], &|g, v| {
            total_loss(g, v[0], v[1], lambda)
        }, seed),
    ));

    // Fusion with the gated attention producing β.
    let (r, d) = (rng.random_range(1..=4), rng.random_range(2..=4));
    let sizes: Vec<usize> = (0..r).map(|_| rng.random_range(1..=6)).collect();
    let alpha = coverage_prior(&sizes).unwrap();
    let mut store = ParamStore::new();
    let gate = GatedAttention::new(&mut store, "gate", d, rng.random_range(2..=4), &mut rng);
    let lam = [0.0, 1.0, rng.random_range(0.0..1.0)][cfg % 3];
    out.push((
        "spf_fuse".into(),
        check(&store, &[mat(&mut rng, r, d, -1.0, 1.0)], &|g, v| {
            let beta = gate.weights(g, v[0])?;
            let (z, omega) = fuse(g, v[0], &alpha, beta, lam)?;
            let zs = project(g, z)?;
            let os = project(g, omega)?;
            g.add(zs, os)
        }, seed),
    ));

    // Regional and adaptive-region encoders.
    let dim = 2 * rng.random_range(1..=2);
    let n = rng.random_range(1..=5);
    let x = mat(&mut rng, n, dim, -1.0, 1.0);
    let mut store = ParamStore::new();
    let reg = RegionalEncoder::new(&mut store, "reg", block(&mut rng, dim), &mut rng);
    out.push((
        "regional_encoder".into(),
        check(&store, &[x.clone()], &|g, v| {
            let o = reg.forward(g, v[0], &mut ForwardCtx::eval())?;
            let a = project(g, o.cls)?;
            let b = project(g, o.query)?;
            let c = project(g, o.region_features)?;
            let ab = g.add(a, b)?;
            g.add(ab, c)
        }, seed),
    ));
    let mut store = ParamStore::new();
    let arsa = ArsaEncoder::new(&mut store, "arsa", block(&mut rng, dim), rng.random_range(2..=3), &mut rng);
    out.push((
        "arsa".into(),
        check(&store, &[x], &|g, v| {
            let (gar, cep) = arsa.forward(g, v[0], &mut ForwardCtx::eval())?;
            let a = project(g, gar)?;
            let b = project(g, cep)?;
            g.add(a, b)
        }, seed),
    ));

    // Symmetric InfoNCE on normalized rows with a learnable temperature.
    let (bsz, d) = (rng.random_range(1..=4), rng.random_range(2..=4));
    out.push((
        "info_nce".into(),
        check(
            &empty,
            &[
                away_from_zero(&mut rng, bsz, d),
                away_from_zero(&mut rng, bsz, d),
                Tensor::scalar(rng.random_range(-1.5..0.0)),
            ],
            &|g, v| {
                let a = g.l2_normalize(v[0])?;
                let b = g.l2_normalize(v[1])?;
                info_nce_symmetric(g, a, b, v[2])
            },
            seed,
        ),
    ));

    // Self-distillation: soft cross-entropy and the cls + masked-patch pair.
    let (rows, p) = (rng.random_range(1..=3), rng.random_range(2..=5));
    let temp = rng.random_range(0.1..1.0);
    let tgt = teacher_targets(&mat(&mut rng, rows, p, -1.0, 1.0), &vec![0.1; p], 0.5).unwrap();
    out.push((
        "soft_cross_entropy".into(),
        check(&empty, &[mat(&mut rng, rows, p, -1.0, 1.0)], &|g, v| soft_cross_entropy(g, v[0], &tgt, temp), seed),
    ));
    let globals = 2;
    let views = globals + rng.random_range(0..=2);
    let npatch = rng.random_range(2..=4);
    let teacher = TeacherViews {
        cls: (0..globals)
            .map(|_| teacher_targets(&mat(&mut rng, 1, p, -2.0, 2.0), &vec![0.0; p], 0.3).unwrap())
            .collect(),
        patches: (0..globals)
            .map(|_| teacher_targets(&mat(&mut rng, npatch, p, -2.0, 2.0), &vec![0.0; p], 0.3).unwrap())
            .collect(),
    };
    let mut masks: Vec<Vec<bool>> = (0..globals).map(|_| (0..npatch).map(|_| rng.random::<bool>()).collect()).collect();
    masks[0][0] = true;
    let mut inputs: Vec<Tensor<f64>> = (0..views).map(|_| mat(&mut rng, 1, p, -1.0, 1.0)).collect();
    inputs.extend((0..globals).map(|_| mat(&mut rng, npatch, p, -1.0, 1.0)));
    out.push((
        "distillation".into(),
        check(&empty, &inputs, &|g, v| {
            let student = StudentViews {
                cls: v[..views].to_vec(),
                patches: v[views..].to_vec(),
            };
            let (lc, lm) = distillation_losses(g, &student, &teacher, &masks, temp)?;
            g.add(lc, lm)
        }, seed),
    ));

    // Molecular tower.
    let dim = 2 * rng.random_range(1..=2);
    let mut store = ParamStore::new();
    let modality = if cfg % 2 == 0 { Modality::Rna } else { Modality::Protein };
    let tower = MolecularEncoder::new(&mut store, "mol", modality, 6, block(&mut rng, dim), 3, &mut rng);
    let t = rng.random_range(1..=4);
    let ids: Vec<u32> = (0..t as u32).map(|i| (i * 2 + cfg as u32) % 6).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let vals: Vec<f64> = ids.iter().map(|_| rng.random_range(0.1..2.0)).collect();
    let profile = MolecularProfile::new(modality, ids, vals).unwrap();
    out.push((
        "molecular_tower".into(),
        check(&store, &[], &|g, _| tower.forward(g, &profile, &mut ForwardCtx::eval()), seed),
    ));
    out
}

/// Whole encoder: `project(z) + project(g^AR) + λ·L_RSL` back to the input
/// features and every parameter.
fn model_case(cfg: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(4000 + cfg as u64);
    let m = tiny_model(&mut rng);
    let n = rng.random_range(4..=10);
    let anc = anchors(&mut rng, n, 5);
    let mut store = ParamStore::new();
    let enc = CareEncoder::new(&mut store, "wsi", &m, &mut rng).unwrap();
    let x = mat(&mut rng, n, m.d_in, -1.0, 1.0);
    let err = check(&store, &[x], &|g, v| {
        let f = enc.forward(g, &anc, v[0], &mut ForwardCtx::eval())?;
        let z = project(g, f.z)?;
        let r = project(g, f.g_ar)?;
        let zr = g.add(z, r)?;
        total_loss(g, zr, f.rsl, m.lambda_rsl)
    }, cfg as u64);
    ("care_forward".into(), err)
}

/// Every check over `CONFIGS` random configurations; returns the worst error
/// per check name.
pub fn run_suite() -> Vec<Case> {
    use rayon::prelude::*;
    let all: Vec<Vec<Case>> = (0..CONFIGS)
        .into_par_iter()
        .map(|cfg| {
            let mut v = op_cases(cfg);
            v.extend(layer_cases(cfg));
            v.extend(loss_cases(cfg));
            v.push(model_case(cfg));
            v
        })
        .collect();
    let mut worst: Vec<Case> = Vec::new();
    for (name, e) in all.into_iter().flatten() {
        match worst.iter_mut().find(|(n, _)| *n == name) {
            Some(w) => w.1 = w.1.max(e),
            None => worst.push((name, e)),
        }
    }
    worst
}
