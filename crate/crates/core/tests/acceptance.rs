//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.

#[path = "support/gradcheck.rs"]
mod gradcheck;
#[path = "support/oracles.rs"]
mod oracles;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use care_core::config::{CareConfig, Profile};
use care_core::encoders::Modality;
use care_core::eval::{auroc, c_index, KnnModel, LogisticModel};
use care_core::model::desk_model;
use care_core::nn::ForwardCtx;
use care_core::objectives::{expected_rank, region_structuring_loss};
use care_core::pretrain::{retrieval_top1, split_sub_wsi, Stage1Trainer, Stage2Trainer, SubWsiConfig};
use care_core::spf::{coverage_prior, fuse, fuse_slide, GatedAttention};
use care_core::synth::{generate, SynthConfig};
use care_core::{Anchor, CareEncoder, Graph, ModelConfig, ParamStore, PatchSet, Real, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}

fn synth_slides(n: usize, min: usize, max: usize, seed: u64) -> Vec<PatchSet<f32>> {
    let cfg = SynthConfig {
        slides: n,
        min_patches: min,
        max_patches: max,
        seed,
        ..SynthConfig::default()
    };
    generate(&cfg).unwrap().slides.into_iter().map(|s| s.patches).collect()
}

fn encoder<T: Real>(cfg: &ModelConfig, seed: u64) -> (CareEncoder, ParamStore<T>) {
    let mut store = ParamStore::new();
    let enc = CareEncoder::new(&mut store, "wsi", cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (enc, store)
}

fn pairs(a: &[Anchor]) -> Vec<(i64, i64)> {
    a.iter().map(|a| (a.u, a.v)).collect()
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.to_rows()
}

// ---------------------------------------------------------------- 1

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = gradcheck::run_suite();
    let elapsed = start.elapsed();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let failing: Vec<String> = results
        .iter()
        .filter(|r| !(r.1 <= 1e-4))
        .map(|(n, e)| format!("{n} ({e:.2e})"))
        .collect();
    let pass = failing.is_empty() && elapsed < Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "{} checks x {} configs, worst relative error {worst:.2e}{}, {}",
            results.len(),
            gradcheck::CONFIGS,
            if failing.is_empty() { String::new() } else { format!(", failing: {}", failing.join(", ")) },
            secs(elapsed)
        ),
    )
}

// ---------------------------------------------------------------- 2 and 3

struct PartitionRun {
    mismatched_slides: usize,
    max_e_bar_err: f64,
    elapsed: Duration,
}

fn partition_vs_oracle() -> PartitionRun {
    let start = Instant::now();
    let cfg = desk_model();
    let slides = synth_slides(100, 40, 400, 7);
    let mut mismatched = 0;
    let mut max_err = 0.0f64;
    for (s, p) in slides.iter().enumerate() {
        let p: PatchSet<f64> = p.cast();
        let (enc, store) = encoder::<f64>(&cfg, 100 + s as u64);
        let mut g = Graph::inference(&store);
        let x = g.constant(p.features().clone());
        let f = enc.forward(&mut g, p.anchors(), x, &mut ForwardCtx::eval()).unwrap();
        let win: Vec<(i64, i64)> = pairs(&f.grid.anchors);
        let cls: BTreeMap<_, _> = win.iter().copied().zip(rows(g.value(f.cls))).collect();
        let query: BTreeMap<_, _> = win.iter().copied().zip(rows(g.value(f.query))).collect();
        let o = oracles::partition(
            &pairs(p.anchors()),
            &rows(p.features()),
            &rows(g.value(f.region_features)),
            &cls,
            &query,
            cfg.window as i64,
            cfg.top_k,
        );
        let chosen: Vec<(i64, i64)> = f.assignment.chosen.iter().map(|&i| win[i]).collect();
        let regions: BTreeMap<(i64, i64), Vec<usize>> =
            f.assignment.regions.iter().map(|r| (win[r.id], r.members.clone())).collect();
        if chosen != o.chosen || regions != o.regions || win != o.windows {
            mismatched += 1;
        }
        max_err = max_err.max((g.value(f.e_bar).item() - o.e_bar).abs());
    }
    PartitionRun {
        mismatched_slides: mismatched,
        max_e_bar_err: max_err,
        elapsed: start.elapsed(),
    }
}

fn partition_oracle(run: &PartitionRun) -> Outcome {
    outcome(
        run.mismatched_slides == 0 && run.elapsed < Duration::from_secs(60),
        format!(
            "100 slides (<= 400 patches, k = 8, K = 3), {} assignment mismatches, {}",
            run.mismatched_slides,
            secs(run.elapsed)
        ),
    )
}

fn rsl_correctness(run: &PartitionRun) -> Outcome {
    // All mass on rank 0, and uniform mass over three ranks (E = 1).
    let hand = |pi: Vec<f64>| {
        let mut g = Graph::<f64>::new();
        let v = g.leaf(Tensor::matrix(2, 3, pi.clone()).unwrap());
        let ranks = [0, 1, 2, 2, 0, 1];
        let (_, l) = region_structuring_loss(&mut g, v, &ranks, 0.5).unwrap();
        (g.value(l).item(), (expected_rank(&pi, &ranks, 3).unwrap() - 0.5).powi(2))
    };
    let rank0 = hand(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let uniform = hand(vec![1.0 / 3.0; 6]);
    let near = |v: f64| (v - 0.25).abs() <= 1e-12;
    let pass = run.max_e_bar_err <= 1e-9 && near(rank0.0) && near(rank0.1) && near(uniform.0) && near(uniform.1);
    outcome(
        pass,
        format!(
            "max |E - E_oracle| = {:.2e} over 100 slides; hand losses rank-0 {} / uniform {} (E* = 0.5)",
            run.max_e_bar_err, rank0.0, uniform.0
        ),
    )
}

// ---------------------------------------------------------------- 4

fn spf_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_sum = 0.0f64;
    let mut bit_fail = Vec::new();
    let mut beta_err = 0.0f64;
    for trial in 0..200 {
        let r = rng.random_range(1..=12);
        let d = rng.random_range(1..=16);
        let sizes: Vec<usize> = (0..r).map(|_| rng.random_range(1..=50)).collect();
        let alpha = coverage_prior(&sizes).unwrap();
        let mut store = ParamStore::<f64>::new();
        let gate = GatedAttention::new(&mut store, "gate", d, 8, &mut rng);
        let regions = Tensor::from_fn(r, d, |_, _| rng.random_range(-2.0..2.0));
        let lam = [0.0, 1.0, rng.random_range(0.0..1.0)][trial % 3];

        let mut g = Graph::inference(&store);
        let reg = g.constant(regions.clone());
        let beta = g.weights_of(&gate, reg);
        let (z, omega) = fuse(&mut g, reg, &alpha, beta, lam).unwrap();
        let beta_v = g.value(beta).data().to_vec();
        let omega_v = g.value(omega).data().to_vec();
        let z_v = g.value(z).data().to_vec();
        for s in [alpha.iter().sum::<f64>(), beta_v.iter().sum(), omega_v.iter().sum()] {
            worst_sum = worst_sum.max((s - 1.0).abs());
        }

        // Gate weights from the formula softmax(w·(tanh(xV) ⊙ σ(xU))).
        let lin = |x: &[f64], w: &Tensor<f64>| -> Vec<f64> {
            (0..w.cols()).map(|c| (0..x.len()).map(|i| x[i] * w.at(i, c)).sum()).collect()
        };
        let (u, v, w) = (store.get(gate.u.weight), store.get(gate.v.weight), store.get(gate.w.weight));
        let scores: Vec<f64> = regions
            .to_rows()
            .iter()
            .map(|x| {
                let a = lin(x, v);
                let b = lin(x, u);
                let h: Vec<f64> = a.iter().zip(&b).map(|(a, b)| a.tanh() / (1.0 + (-b).exp())).collect();
                lin(&h, w)[0]
            })
            .collect();
        for (p, q) in oracles::softmax(&scores).iter().zip(&beta_v) {
            beta_err = beta_err.max((p - q).abs());
        }

        // Pooling against the direct sums, bit for bit.
        let weights: &[f64] = if lam == 1.0 {
            &alpha
        } else if lam == 0.0 {
            &beta_v
        } else {
            continue;
        };
        if omega_v != weights {
            bit_fail.push(format!("omega@{trial}"));
        }
        let mut direct = vec![0.0; d];
        for (i, wi) in weights.iter().enumerate() {
            for c in 0..d {
                direct[c] += wi * regions.at(i, c);
            }
        }
        if z_v != direct {
            bit_fail.push(format!("z@{trial}"));
        }
        let (zs, os) = fuse_slide(&alpha, &beta_v, &regions.to_rows(), lam).unwrap();
        if zs != direct || os != weights {
            bit_fail.push(format!("fuse_slide@{trial}"));
        }
    }
    outcome(
        worst_sum <= 1e-6 && bit_fail.is_empty() && beta_err <= 1e-12,
        format!(
            "200 random fusions: max |sum - 1| = {worst_sum:.1e}; lambda 1/0 bit-identical to coverage/gated pooling{}; gate vs formula {beta_err:.1e}",
            if bit_fail.is_empty() { String::new() } else { format!(" (mismatch: {})", bit_fail.join(", ")) }
        ),
    )
}

trait GateExt {
    fn weights_of(&mut self, gate: &GatedAttention, x: care_core::Var) -> care_core::Var;
}

impl GateExt for Graph<'_, f64> {
    fn weights_of(&mut self, gate: &GatedAttention, x: care_core::Var) -> care_core::Var {
        gate.weights(self, x).unwrap()
    }
}

// ---------------------------------------------------------------- 5

struct Snapshot<T> {
    cls: Vec<T>,
    gar: Vec<T>,
    z: Vec<T>,
    roi: usize,
    region_ids: Vec<usize>,
}

fn snapshot<T: Real>(enc: &CareEncoder, store: &ParamStore<T>, p: &PatchSet<T>) -> Snapshot<T> {
    let mut g = Graph::inference(store);
    let x = g.constant(p.features().clone());
    let f = enc.forward(&mut g, p.anchors(), x, &mut ForwardCtx::eval()).unwrap();
    Snapshot {
        cls: g.value(f.cls).data().to_vec(),
        gar: g.value(f.g_ar).data().to_vec(),
        z: g.value(f.z).data().to_vec(),
        roi: f.assignment.regions[f.roi].id,
        region_ids: f.assignment.regions.iter().map(|r| r.id).collect(),
    }
}

fn max_diff<T: Real>(a: &[T], b: &[T]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x.f64() - y.f64()).abs()).fold(0.0, f64::max)
}

fn permutation_trials<T: Real>(tol: f64, seed: u64) -> (usize, f64) {
    let cfg = desk_model();
    let slides = synth_slides(50, 40, 300, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut worst = 0.0f64;
    for (t, p) in slides.iter().enumerate() {
        let p: PatchSet<T> = p.cast();
        let (enc, store) = encoder::<T>(&cfg, seed * 1000 + t as u64);
        let a = snapshot(&enc, &store, &p);
        let mut perm: Vec<usize> = (0..p.len()).collect();
        perm.shuffle(&mut rng);
        let q = p.subset(&perm).unwrap();
        let b = snapshot(&enc, &store, &q);
        let d = max_diff(&a.cls, &b.cls).max(max_diff(&a.gar, &b.gar)).max(max_diff(&a.z, &b.z));
        worst = worst.max(d);
        if d > tol || a.roi != b.roi || a.region_ids != b.region_ids {
            failures += 1;
        }
    }
    (failures, worst)
}

fn permutation_invariance() -> Outcome {
    let (f32_fail, f32_worst) = permutation_trials::<f32>(1e-5, 51);
    let (f64_fail, f64_worst) = permutation_trials::<f64>(1e-10, 52);
    outcome(
        f32_fail == 0 && f64_fail == 0,
        format!(
            "50 shuffles each: f32 max diff {f32_worst:.1e} ({f32_fail} failing), f64 max diff {f64_worst:.1e} ({f64_fail} failing); ROI ids stable"
        ),
    )
}

// ---------------------------------------------------------------- 6

fn dedup_to(points: Vec<(i64, i64)>, n: usize) -> Vec<Anchor> {
    let mut seen = std::collections::HashSet::new();
    points
        .into_iter()
        .filter(|p| seen.insert(*p))
        .take(n)
        .map(|(u, v)| Anchor::new(u, v))
        .collect()
}

fn adversarial_layout(kind: usize, rng: &mut ChaCha8Rng) -> Vec<Anchor> {
    let n = rng.random_range(400..=2000);
    let mut pts = Vec::new();
    match kind % 6 {
        // Overlapping Gaussian blobs.
        0 => {
            let blobs = rng.random_range(2..=6);
            let centers: Vec<(f64, f64)> = (0..blobs).map(|_| (rng.random_range(0.0..30.0), rng.random_range(0.0..30.0))).collect();
            let sd = Normal::new(0.0, rng.random_range(4.0..10.0)).unwrap();
            while pts.len() < 20 * n {
                let c = centers[rng.random_range(0..blobs)];
                pts.push(((c.0 + sd.sample(rng)).round() as i64, (c.1 + sd.sample(rng)).round() as i64));
            }
        }
        // One dense square.
        1 => {
            let side = (n as f64).sqrt().ceil() as i64;
            pts.extend((0..side).flat_map(|u| (0..side).map(move |v| (u, v))));
        }
        // A long two-row strip.
        2 => pts.extend((0..n as i64).map(|i| (i / 2, i % 2))),
        // A thick ring.
        3 => {
            let r = (n as f64 / 12.0).max(12.0);
            while pts.len() < 20 * n {
                let t = rng.random_range(0.0..std::f64::consts::TAU);
                let rr = r + rng.random_range(-3.0..3.0);
                pts.push(((rr * t.cos()).round() as i64, (rr * t.sin()).round() as i64));
            }
        }
        // Two dense blocks joined by a one-patch bridge.
        4 => {
            let side = ((n / 2) as f64).sqrt().floor() as i64;
            pts.extend((0..side).flat_map(|u| (0..side).map(move |v| (u, v))));
            pts.extend((side..side + 10).map(|u| (u, side / 2)));
            pts.extend((0..side).flat_map(|u| (0..side).map(move |v| (u + side + 10, v))));
        }
        // Sparse lattice: every point is DBSCAN noise at eps 3.
        _ => {
            let side = (n as f64).sqrt().ceil() as i64;
            pts.extend((0..side).flat_map(|u| (0..side).map(move |v| (4 * u, 4 * v))));
        }
    }
    pts.shuffle(rng);
    dedup_to(pts, n)
}

fn sub_wsi_splitter() -> Outcome {
    let cfg = SubWsiConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut bad = Vec::new();
    let (mut layouts, mut parts, mut largest, mut min_n, mut max_n) = (0, 0, 0, usize::MAX, 0);
    for trial in 0..60 {
        let a = adversarial_layout(trial, &mut rng);
        if a.len() < 400 {
            continue;
        }
        layouts += 1;
        min_n = min_n.min(a.len());
        max_n = max_n.max(a.len());
        let subs = split_sub_wsi("adv", &a, &cfg).unwrap();
        let mut count = vec![0usize; a.len()];
        for s in &subs {
            largest = largest.max(s.members.len());
            if s.members.is_empty() || s.members.len() > cfg.cap {
                bad.push(format!("size {} in layout {trial}", s.members.len()));
            }
            for &j in &s.members {
                count[j] += 1;
            }
        }
        if count.iter().any(|&c| c != 1) {
            bad.push(format!("cover/disjoint in layout {trial}"));
        }
        parts += subs.len();
    }
    outcome(
        bad.is_empty(),
        format!(
            "{layouts} layouts of {min_n}-{max_n} patches -> {parts} sub-WSIs, largest {largest} (cap 360){}",
            if bad.is_empty() { String::new() } else { format!("; violations: {}", bad.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- 7

fn stage1_smoke() -> Outcome {
    let start = Instant::now();
    let cfg = CareConfig::profile(Profile::Desk);
    let synth = SynthConfig {
        slides: 8,
        min_patches: 300,
        max_patches: 360,
        max_blobs: 1,
        ..SynthConfig::default()
    };
    let batch: Vec<PatchSet<f32>> = generate(&synth).unwrap().slides.into_iter().map(|s| s.patches).collect();
    let mut t = Stage1Trainer::<f32>::new(&cfg.model, cfg.stage1.clone(), cfg.augment.clone(), cfg.optimizer, 1).unwrap();
    let mut losses = Vec::new();
    let mut non_finite = 0;
    for _ in 0..200 {
        let r = t.step(&batch).unwrap();
        non_finite += usize::from(r.skipped || !r.bundle.total.is_finite());
        losses.push(r.bundle.total);
    }
    let ma: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    let violations: Vec<usize> = (1..ma.len()).filter(|&i| !(ma[i] < ma[i - 1])).collect();
    let elapsed = start.elapsed();
    outcome(
        violations.is_empty() && non_finite == 0 && elapsed < Duration::from_secs(300),
        format!(
            "8 sub-WSIs x 200 steps: loss {:.3} -> {:.3}, moving average non-decreasing at {} of {} steps{}, {} non-finite, {}",
            losses[0],
            losses[losses.len() - 1],
            violations.len(),
            ma.len() - 1,
            violations.first().map(|v| format!(" (first at step {})", v + 9)).unwrap_or_default(),
            non_finite,
            secs(elapsed)
        ),
    )
}

// ---------------------------------------------------------------- 8 and 9

fn stage2_trainer(cfg: &CareConfig, steps_per_epoch: usize) -> Stage2Trainer<f32> {
    Stage2Trainer::new(&cfg.model, &cfg.molecular, Modality::Rna, cfg.stage2.rna.clone(), cfg.optimizer, steps_per_epoch)
        .unwrap()
}

fn train_stage2(
    t: &mut Stage2Trainer<f32>,
    train: &[(PatchSet<f32>, care_core::encoders::MolecularProfile)],
    steps: usize,
    seed: u64,
) {
    let bs = t.cfg.batch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    while step < steps {
        order.shuffle(&mut rng);
        for c in order.chunks_exact(bs) {
            let batch: Vec<_> = c.iter().map(|&i| train[i].clone()).collect();
            t.step(&batch).unwrap();
            step += 1;
            if step == steps {
                return;
            }
        }
    }
}

fn stage2_retrieval() -> Outcome {
    let start = Instant::now();
    let mut cfg = CareConfig::profile(Profile::Desk);
    let steps: usize = 600;
    let steps_per_epoch = 160 / cfg.stage2.rna.batch_size;
    cfg.stage2.rna.epochs = steps.div_ceil(steps_per_epoch);
    let corpus = generate(&SynthConfig::default()).unwrap();
    let pairs: Vec<_> = corpus.slides.iter().zip(&corpus.rna).map(|(s, r)| (s.patches.clone(), r.clone())).collect();
    let (train, test) = pairs.split_at(160);
    let mut t = stage2_trainer(&cfg, steps_per_epoch);
    let eval = |t: &Stage2Trainer<f32>| {
        let a = t.embed_slides(&test.iter().map(|p| p.0.clone()).collect::<Vec<_>>()).unwrap();
        let b = t.embed_profiles(&test.iter().map(|p| p.1.clone()).collect::<Vec<_>>()).unwrap();
        retrieval_top1(&a, &b, 20).unwrap()
    };
    let before = eval(&t);
    train_stage2(&mut t, train, steps, 1);
    let after = eval(&t);
    let elapsed = start.elapsed();
    outcome(
        after >= 5.0 / 20.0 && elapsed < Duration::from_secs(600),
        format!(
            "200 slides, 160/40 split, {steps} steps: held-out top-1 {before:.3} -> {after:.3} (chance 0.05, bar 0.25), {}",
            secs(elapsed)
        ),
    )
}

fn mean_e_bar(t: &Stage2Trainer<f32>, slides: &[PatchSet<f32>]) -> f64 {
    let mut total = 0.0;
    for p in slides {
        let (_, f) = t.model.encoder.embed(&t.store, p).unwrap();
        total += expected_rank(&f.assignment.pi, &f.assignment.ranks, f.assignment.width).unwrap();
    }
    total / slides.len() as f64
}

fn rsl_steering() -> Outcome {
    let start = Instant::now();
    let corpus = generate(&SynthConfig {
        slides: 64,
        ..SynthConfig::default()
    })
    .unwrap();
    let train: Vec<_> = corpus.slides.iter().zip(&corpus.rna).map(|(s, r)| (s.patches.clone(), r.clone())).collect();
    let slides: Vec<PatchSet<f32>> = train.iter().map(|p| p.0.clone()).collect();
    let steps = 400;
    let mut finals = Vec::new();
    let mut initial = 0.0;
    for target in [0.0, 0.5] {
        let mut cfg = CareConfig::profile(Profile::Desk);
        cfg.model.rsl_target = target;
        let spe = 64 / cfg.stage2.rna.batch_size;
        cfg.stage2.rna.epochs = steps / spe;
        let mut t = stage2_trainer(&cfg, spe);
        initial = mean_e_bar(&t, &slides);
        train_stage2(&mut t, &train, steps, 9);
        finals.push(mean_e_bar(&t, &slides));
    }
    outcome(
        finals[0] < finals[1],
        format!(
            "{steps} steps, same seed and data: mean E from {initial:.3} to {:.3} with E* = 0 vs {:.3} with E* = 0.5, {}",
            finals[0],
            finals[1],
            secs(start.elapsed())
        ),
    )
}

// ---------------------------------------------------------------- 10

fn blobs(n: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
    let centers = [(0.0, 0.0), (2.0, 0.5), (0.8, 2.0)];
    let sd = Normal::new(0.0, 0.8).unwrap();
    (0..n)
        .map(|i| {
            let c = i % 3;
            (vec![centers[c].0 + sd.sample(rng), centers[c].1 + sd.sample(rng)], c)
        })
        .unzip()
}

fn probe_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut notes = Vec::new();
    let mut pass = true;

    // Logistic head vs Newton's method on the same objective.
    let (x, y) = blobs(300, &mut rng);
    let (xt, _) = blobs(2000, &mut rng);
    let c = 0.5;
    let m = LogisticModel::fit(&x, &y, c).unwrap();
    let (w, b) = oracles::newton_logistic(&x, &y, 3, c, 100);
    let ours = m.predict(&xt);
    let disagree = xt.iter().zip(&ours).filter(|(q, &p)| oracles::logistic_predict(&w, &b, q) != p).count();
    let rate = disagree as f64 / xt.len() as f64;
    pass &= rate <= 0.005;
    notes.push(format!("logistic disagreement {disagree}/{} ({:.2}%)", xt.len(), 100.0 * rate));

    // kNN vs exhaustive selection, on an integer grid so distance ties occur.
    let mut knn_mismatch = 0;
    let mut knn_queries = 0;
    for trial in 0..50 {
        let n = if trial == 0 { 20 } else { rng.random_range(5..=40) };
        let k = if trial == 0 { 3 } else { rng.random_range(1..=n.min(9)) };
        let train: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(0..5) as f64, rng.random_range(0..5) as f64]).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let model = KnnModel::fit(&train, &labels, k).unwrap();
        for _ in 0..10 {
            let q = vec![rng.random_range(0..5) as f64, rng.random_range(0..5) as f64];
            let (nn, pred) = oracles::knn_predict(&train, &labels, &q, k);
            knn_queries += 1;
            if model.neighbours(&q) != nn || model.predict(std::slice::from_ref(&q))[0] != pred {
                knn_mismatch += 1;
            }
        }
    }
    pass &= knn_mismatch == 0;
    notes.push(format!("kNN mismatches {knn_mismatch}/{knn_queries}"));

    // C-index vs pair enumeration: the 6-sample hand set, then random sets with ties.
    let hand_risk = [0.9, 0.7, 0.7, 0.2, 0.5, 0.1];
    let hand_time = [2.0, 4.0, 4.0, 6.0, 8.0, 10.0];
    let hand_event = [true, true, false, true, false, true];
    let hand = c_index(&hand_risk, &hand_time, &hand_event).unwrap();
    let mut c_mismatch = usize::from(hand != oracles::c_index_pairs(&hand_risk, &hand_time, &hand_event));
    for _ in 0..200 {
        let n = rng.random_range(3..=30);
        let risk: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        let time: Vec<f64> = (0..n).map(|_| rng.random_range(1..8) as f64).collect();
        let mut event: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        event[0] = true;
        let want = oracles::c_index_pairs(&risk, &time, &event);
        if want.is_nan() {
            continue;
        }
        c_mismatch += usize::from(c_index(&risk, &time, &event).unwrap() != want);
    }
    pass &= c_mismatch == 0;
    notes.push(format!("C-index mismatches {c_mismatch}/201 (hand set {hand:.4})"));

    // AUROC: invariant under 100 strictly increasing transforms, equal to pair counting.
    let scores: Vec<f64> = (0..200).map(|_| rng.random_range(-3.0..3.0)).collect();
    let positive: Vec<bool> = scores.iter().map(|s| rng.random::<f64>() < 1.0 / (1.0 + (-s).exp())).collect();
    let base = auroc(&scores, &positive).unwrap();
    let mut auc_bad = usize::from(base != oracles::auroc_pairs(&scores, &positive));
    for _ in 0..100 {
        let a = rng.random_range(0.1..5.0);
        let b = rng.random_range(-5.0..5.0);
        let p = rng.random_range(1..=3) * 2 - 1;
        let kind = rng.random_range(0..3);
        let t: Vec<f64> = scores
            .iter()
            .map(|&s| {
                let s = a * s + b;
                match kind {
                    0 => s.powi(p),
                    1 => (s / 4.0).exp(),
                    _ => s.atan(),
                }
            })
            .collect();
        auc_bad += usize::from(auroc(&t, &positive).unwrap() != base);
    }
    pass &= auc_bad == 0;
    notes.push(format!("AUROC transform failures {auc_bad}/101 (AUROC {base:.4})"));
    outcome(pass, notes.join("; "))
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("{} criterion {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "gradient suite", gradient_suite());
    let part = partition_vs_oracle();
    report(2, "partition oracle", partition_oracle(&part));
    report(3, "RSL correctness", rsl_correctness(&part));
    report(4, "SPF contracts", spf_contracts());
    report(5, "permutation invariance", permutation_invariance());
    report(6, "sub-WSI splitter", sub_wsi_splitter());
    report(7, "stage-1 smoke training", stage1_smoke());
    report(8, "stage-2 retrieval", stage2_retrieval());
    report(9, "RSL steering", rsl_steering());
    report(10, "probe fidelity", probe_fidelity());
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed in {}{}",
        results.len() - failed.len(),
        results.len(),
        secs(start.elapsed()),
        if failed.is_empty() { String::new() } else { format!("; failed: {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
