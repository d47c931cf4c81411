//! Splitting slides into spatially compact sub-slides of bounded size.

use serde::{Deserialize, Serialize};

use crate::error::{CareError, Result};
use crate::region::Anchor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubWsiConfig {
    pub eps: f64,
    pub min_pts: usize,
    pub cap: usize,
}

impl Default for SubWsiConfig {
    fn default() -> Self {
        Self {
            eps: 3.0,
            min_pts: 4,
            cap: 360,
        }
    }
}

/// A bounded chunk of one slide's patches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubWsi {
    pub slide: String,
    /// Indices into the parent slide, ascending.
    pub members: Vec<usize>,
}

/// DBSCAN cluster labels; `None` marks noise. A point's neighbourhood
/// includes itself and every point at distance `≤ eps`.
pub fn dbscan(points: &[Anchor], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let neighbours = |i: usize| -> Vec<usize> { (0..n).filter(|&j| points[i].dist(points[j]) <= eps).collect() };
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut next = 0;
    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let nb = neighbours(i);
        if nb.len() < min_pts {
            continue;
        }
        let c = next;
        next += 1;
        labels[i] = Some(c);
        let mut queue = nb;
        let mut q = 0;
        while q < queue.len() {
            let j = queue[q];
            q += 1;
            if labels[j].is_none() {
                labels[j] = Some(c);
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            let nj = neighbours(j);
            if nj.len() >= min_pts {
                queue.extend(nj);
            }
        }
    }
    labels
}

/// Clusters anchors, merges noise into the nearest cluster centroid and
/// bisects clusters above `cap` at the median of their longer axis.
pub fn split_sub_wsi(slide: &str, coords: &[Anchor], cfg: &SubWsiConfig) -> Result<Vec<SubWsi>> {
    if !(cfg.eps > 0.0) || cfg.min_pts == 0 || cfg.cap == 0 {
        return Err(CareError::Config("sub-WSI split needs eps > 0, min_pts ≥ 1, cap ≥ 1".into()));
    }
    if coords.is_empty() {
        return Ok(Vec::new());
    }
    let labels = dbscan(coords, cfg.eps, cfg.min_pts);
    let k = labels.iter().flatten().max().map_or(0, |&c| c + 1);
    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); k.max(1)];
    if k == 0 {
        clusters[0] = (0..coords.len()).collect();
    } else {
        for (j, l) in labels.iter().enumerate() {
            if let Some(c) = l {
                clusters[*c].push(j);
            }
        }
        let centroids: Vec<(f64, f64)> = clusters.iter().map(|m| centroid(coords, m)).collect();
        for (j, l) in labels.iter().enumerate() {
            if l.is_none() {
                let (u, v) = (coords[j].u as f64, coords[j].v as f64);
                let best = (0..k)
                    .min_by(|&a, &b| {
                        let da = (centroids[a].0 - u).powi(2) + (centroids[a].1 - v).powi(2);
                        let db = (centroids[b].0 - u).powi(2) + (centroids[b].1 - v).powi(2);
                        da.total_cmp(&db).then(a.cmp(&b))
                    })
                    .expect("at least one cluster");
                clusters[best].push(j);
            }
        }
    }
    let mut out = Vec::new();
    for mut c in clusters {
        c.sort_unstable();
        bisect(coords, c, cfg.cap, &mut out);
    }
    Ok(out
        .into_iter()
        .map(|members| SubWsi {
            slide: slide.to_string(),
            members,
        })
        .collect())
}

fn centroid(coords: &[Anchor], members: &[usize]) -> (f64, f64) {
    let n = members.len() as f64;
    let (su, sv) = members
        .iter()
        .fold((0.0, 0.0), |(a, b), &j| (a + coords[j].u as f64, b + coords[j].v as f64));
    (su / n, sv / n)
}

fn bisect(coords: &[Anchor], members: Vec<usize>, cap: usize, out: &mut Vec<Vec<usize>>) {
    if members.len() <= cap {
        out.push(members);
        return;
    }
    let span = |f: fn(&Anchor) -> i64| {
        let (lo, hi) = members
            .iter()
            .fold((i64::MAX, i64::MIN), |(lo, hi), &j| (lo.min(f(&coords[j])), hi.max(f(&coords[j]))));
        hi - lo
    };
    let along_u = span(|a| a.u) >= span(|a| a.v);
    let mut sorted = members;
    sorted.sort_by_key(|&j| {
        let a = coords[j];
        if along_u {
            (a.u, a.v, j)
        } else {
            (a.v, a.u, j)
        }
    });
    let right = sorted.split_off(sorted.len() / 2);
    let mut left = sorted;
    let mut right = right;
    left.sort_unstable();
    right.sort_unstable();
    bisect(coords, left, cap, out);
    bisect(coords, right, cap, out);
}
