//! Direct, unoptimized reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::BTreeMap;

/// Window anchors in lexicographic order and each patch's window position.
pub fn windows(anchors: &[(i64, i64)], k: i64) -> (Vec<(i64, i64)>, Vec<usize>) {
    let key = |(u, v): (i64, i64)| (u.div_euclid(k) * k, v.div_euclid(k) * k);
    let mut ws: Vec<(i64, i64)> = anchors.iter().map(|&a| key(a)).collect();
    ws.sort();
    ws.dedup();
    let of = anchors.iter().map(|&a| ws.binary_search(&key(a)).unwrap()).collect();
    (ws, of)
}

/// `mu[j][i] = 1 − d_ij / max_j' d_ij'`, or 1 when the maximum is zero.
pub fn inclusion(anchors: &[(i64, i64)], ws: &[(i64, i64)]) -> Vec<Vec<f64>> {
    let d = |a: (i64, i64), s: (i64, i64)| {
        let du = (a.0 - s.0) as f64;
        let dv = (a.1 - s.1) as f64;
        (du * du + dv * dv).sqrt()
    };
    let mut mu = vec![vec![0.0; ws.len()]; anchors.len()];
    for (i, &s) in ws.iter().enumerate() {
        let mut max = 0.0f64;
        for &a in anchors {
            max = max.max(d(a, s));
        }
        for (j, &a) in anchors.iter().enumerate() {
            mu[j][i] = if max == 0.0 { 1.0 } else { 1.0 - d(a, s) / max };
        }
    }
    mu
}

/// Top-K indices by value, ties to the lower index, found by repeated scans.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; row.len()];
    let mut out = Vec::new();
    for _ in 0..k.min(row.len()) {
        let mut best: Option<usize> = None;
        for i in 0..row.len() {
            if taken[i] {
                continue;
            }
            if best.is_none_or(|b| row[i] > row[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Result of the brute-force region generator for one slide.
pub struct OraclePartition {
    pub windows: Vec<(i64, i64)>,
    /// Candidate window positions per patch.
    pub candidates: Vec<Vec<usize>>,
    /// `w = ρ·μ` per candidate.
    pub w: Vec<Vec<f64>>,
    /// Chosen window anchor per patch.
    pub chosen: Vec<(i64, i64)>,
    /// Regions keyed by window anchor.
    pub regions: BTreeMap<(i64, i64), Vec<usize>>,
    pub e_bar: f64,
}

/// Soft inclusion, top-K candidates, four-channel softmax similarity,
/// `w = ρ·μ`, argmax (ties to the lower window index) and the mean expected
/// rank under `π = w / Σw`. `cls`/`query` are looked up by window anchor.
pub fn partition(
    anchors: &[(i64, i64)],
    f: &[Vec<f64>],
    fr: &[Vec<f64>],
    cls: &BTreeMap<(i64, i64), Vec<f64>>,
    query: &BTreeMap<(i64, i64), Vec<f64>>,
    k: i64,
    top: usize,
) -> OraclePartition {
    let (ws, _) = windows(anchors, k);
    let mu = inclusion(anchors, &ws);
    let mut candidates = Vec::new();
    let mut wall = Vec::new();
    let mut chosen = Vec::new();
    let mut regions: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    let mut rank_sum = 0.0;
    for j in 0..anchors.len() {
        let cand = top_k(&mu[j], top);
        let chans: Vec<[f64; 4]> = cand
            .iter()
            .map(|&i| {
                let (c, q) = (&cls[&ws[i]], &query[&ws[i]]);
                [cos(&f[j], c), cos(&f[j], q), cos(&fr[j], c), cos(&fr[j], q)]
            })
            .collect();
        let mut rho = vec![0.0; cand.len()];
        for m in 0..4 {
            let p = softmax(&chans.iter().map(|c| c[m]).collect::<Vec<_>>());
            for (r, v) in rho.iter_mut().zip(p) {
                *r += v / 4.0;
            }
        }
        let w: Vec<f64> = cand.iter().zip(&rho).map(|(&i, r)| r * mu[j][i]).collect();
        // Argmax with ties to the lower window index.
        let mut best = 0;
        for p in 1..cand.len() {
            if w[p] > w[best] || (w[p] == w[best] && cand[p] < cand[best]) {
                best = p;
            }
        }
        // Rank r(i) = number of candidates strictly ahead of i.
        let total: f64 = w.iter().sum();
        for p in 0..cand.len() {
            let ahead = (0..cand.len())
                .filter(|&q| w[q] > w[p] || (w[q] == w[p] && cand[q] < cand[p]))
                .count();
            let pi = if total > 0.0 { w[p] / total } else { f64::from(u8::from(p == best)) };
            rank_sum += pi * ahead as f64;
        }
        chosen.push(ws[cand[best]]);
        regions.entry(ws[cand[best]]).or_default().push(j);
        candidates.push(cand);
        wall.push(w);
    }
    OraclePartition {
        windows: ws,
        candidates,
        w: wall,
        chosen,
        regions,
        e_bar: rank_sum / anchors.len() as f64,
    }
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for q in c..n {
                a[r][q] -= f * a[c][q];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|q| a[r][q] * x[q]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Multinomial logistic regression with `‖W‖²/(2C)` fitted by damped Newton
/// steps on the exact Hessian. Returns `(W d×k row-major, b)`.
pub fn newton_logistic(x: &[Vec<f64>], y: &[usize], k: usize, c: f64, iters: usize) -> (Vec<f64>, Vec<f64>) {
    let d = x[0].len();
    let p = d * k + k;
    let mut th = vec![0.0; p];
    // Parameter index of (feature j or bias, class a).
    let wi = |j: usize, a: usize| j * k + a;
    let bi = |a: usize| d * k + a;
    let probs = |th: &[f64], xi: &[f64]| {
        let l: Vec<f64> = (0..k).map(|a| th[bi(a)] + (0..d).map(|j| xi[j] * th[wi(j, a)]).sum::<f64>()).collect();
        softmax(&l)
    };
    let objective = |th: &[f64]| {
        let mut f = 0.0;
        for (xi, &yi) in x.iter().zip(y) {
            f -= probs(th, xi)[yi].ln();
        }
        f + th[..d * k].iter().map(|w| w * w).sum::<f64>() / (2.0 * c)
    };
    for _ in 0..iters {
        let mut g = vec![0.0; p];
        let mut h = vec![vec![0.0; p]; p];
        for (xi, &yi) in x.iter().zip(y) {
            let pr = probs(&th, xi);
            // Feature vector with a trailing 1 for the bias.
            let feat = |j: usize| if j < d { xi[j] } else { 1.0 };
            let idx = |j: usize, a: usize| if j < d { wi(j, a) } else { bi(a) };
            for a in 0..k {
                let r = pr[a] - f64::from(u8::from(a == yi));
                for j in 0..=d {
                    g[idx(j, a)] += r * feat(j);
                }
                for b in 0..k {
                    let s = pr[a] * (f64::from(u8::from(a == b)) - pr[b]);
                    for j in 0..=d {
                        for l in 0..=d {
                            h[idx(j, a)][idx(l, b)] += s * feat(j) * feat(l);
                        }
                    }
                }
            }
        }
        for q in 0..d * k {
            g[q] += th[q] / c;
            h[q][q] += 1.0 / c;
        }
        // The softmax is invariant to a common bias shift; a tiny ridge keeps
        // the system nonsingular without moving the predictions.
        for (q, row) in h.iter_mut().enumerate() {
            row[q] += 1e-10;
        }
        let gn: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gn < 1e-10 {
            break;
        }
        let step = solve(h, g);
        let f0 = objective(&th);
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = th.iter().zip(&step).map(|(a, s)| a - t * s).collect();
            if objective(&cand) <= f0 || t < 1e-12 {
                th = cand;
                break;
            }
            t *= 0.5;
        }
    }
    (th[..d * k].to_vec(), th[d * k..].to_vec())
}

/// Class with the largest logit; ties to the lower class.
pub fn logistic_predict(w: &[f64], b: &[f64], x: &[f64]) -> usize {
    let k = b.len();
    let l: Vec<f64> = (0..k).map(|a| b[a] + x.iter().enumerate().map(|(j, v)| v * w[j * k + a]).sum::<f64>()).collect();
    let mut best = 0;
    for a in 1..k {
        if l[a] > l[best] {
            best = a;
        }
    }
    best
}

/// kNN by exhaustive selection: pick the nearest unused point `k` times
/// (ties to the lower index), then majority vote (ties to the lower class).
pub fn knn_predict(train: &[Vec<f64>], y: &[usize], q: &[f64], k: usize) -> (Vec<usize>, usize) {
    let d: Vec<f64> = train.iter().map(|p| p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum()).collect();
    let mut used = vec![false; train.len()];
    let mut nn = Vec::new();
    for _ in 0..k.min(train.len()) {
        let mut best: Option<usize> = None;
        for i in 0..train.len() {
            if !used[i] && best.is_none_or(|b| d[i] < d[b]) {
                best = Some(i);
            }
        }
        used[best.unwrap()] = true;
        nn.push(best.unwrap());
    }
    let classes = y.iter().max().unwrap() + 1;
    let mut votes = vec![0usize; classes];
    for &i in &nn {
        votes[y[i]] += 1;
    }
    let mut best = 0;
    for c in 1..classes {
        if votes[c] > votes[best] {
            best = c;
        }
    }
    (nn, best)
}

/// Harrell's C over every ordered pair: `(i, j)` is comparable when `i` has
/// an event and either `t_i < t_j`, or `t_i = t_j` and `j` is censored.
pub fn c_index_pairs(risk: &[f64], time: &[f64], event: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..risk.len() {
        for j in 0..risk.len() {
            if i == j || !event[i] {
                continue;
            }
            let comparable = time[i] < time[j] || (time[i] == time[j] && !event[j]);
            if !comparable {
                continue;
            }
            den += 1.0;
            if risk[i] > risk[j] {
                num += 1.0;
            } else if risk[i] == risk[j] {
                num += 0.5;
            }
        }
    }
    num / den
}

/// Fraction of (positive, negative) pairs ranked correctly, ties 0.5.
pub fn auroc_pairs(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positive[i] && !positive[j] {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}
