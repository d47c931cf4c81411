//! Irregular crops and block masks over a sub-slide's patch grid.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{CareError, Result};
use crate::region::Anchor;

/// `⌈ratio · n⌉`, at least 1 and at most `n`.
pub fn crop_size(n: usize, ratio: f64) -> usize {
    // The small slack keeps products like 0.9 · 10 from rounding up to 10.
    let k = (ratio * n as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(n)
}

const NEIGHBOURS: [(i64, i64); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

/// Grows a crop of `⌈ratio · n⌉` patches from `seed` by repeatedly adding the
/// 4-neighbour of the current crop nearest to the seed (ties to the lower
/// index). If the seed's connected component is exhausted first, the nearest
/// remaining patch is added and growth continues from there.
pub fn grow_crop(anchors: &[Anchor], seed: usize, ratio: f64) -> Result<Vec<usize>> {
    let n = anchors.len();
    if n == 0 || seed >= n {
        return Err(CareError::contract("crop seed outside the patch set"));
    }
    let target = crop_size(n, ratio);
    let pos: HashMap<Anchor, usize> = anchors.iter().enumerate().map(|(i, a)| (*a, i)).collect();
    let origin = anchors[seed];
    let key = |j: usize| (anchors[j].dist(origin), j);
    let mut in_crop = vec![false; n];
    let mut on_frontier = vec![false; n];
    let mut frontier: Vec<usize> = Vec::new();
    let mut crop = Vec::with_capacity(target);
    let mut add = |j: usize, crop: &mut Vec<usize>, in_crop: &mut Vec<bool>, frontier: &mut Vec<usize>| {
        in_crop[j] = true;
        crop.push(j);
        for (du, dv) in NEIGHBOURS {
            if let Some(&nb) = pos.get(&Anchor::new(anchors[j].u + du, anchors[j].v + dv)) {
                if !in_crop[nb] && !on_frontier[nb] {
                    on_frontier[nb] = true;
                    frontier.push(nb);
                }
            }
        }
    };
    add(seed, &mut crop, &mut in_crop, &mut frontier);
    while crop.len() < target {
        let next = if frontier.is_empty() {
            (0..n).filter(|&j| !in_crop[j]).min_by(|&a, &b| key(a).0.total_cmp(&key(b).0).then(a.cmp(&b)))
        } else {
            let (p, _) = frontier
                .iter()
                .enumerate()
                .min_by(|(_, &a), (_, &b)| key(a).0.total_cmp(&key(b).0).then(a.cmp(&b)))
                .expect("nonempty frontier");
            Some(frontier.swap_remove(p))
        };
        let j = next.expect("target never exceeds n");
        add(j, &mut crop, &mut in_crop, &mut frontier);
    }
    crop.sort_unstable();
    Ok(crop)
}

/// `globals` crops at `global_ratio` followed by `locals` at `local_ratio`,
/// each from a uniformly drawn seed patch.
pub fn sample_crops(
    anchors: &[Anchor],
    globals: usize,
    global_ratio: f64,
    locals: usize,
    local_ratio: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    if anchors.is_empty() {
        return Err(CareError::contract("cannot crop an empty sub-WSI"));
    }
    let mut out = Vec::with_capacity(globals + locals);
    for (count, ratio) in [(globals, global_ratio), (locals, local_ratio)] {
        for _ in 0..count {
            let seed = rng.random_range(0..anchors.len());
            out.push(grow_crop(anchors, seed, ratio)?);
        }
    }
    Ok(out)
}

/// Whether `members` form one component under 4-neighbour adjacency.
pub fn is_connected(anchors: &[Anchor], members: &[usize]) -> bool {
    let Some(&first) = members.first() else {
        return true;
    };
    let set: HashMap<Anchor, usize> = members.iter().map(|&j| (anchors[j], j)).collect();
    let mut seen = std::collections::HashSet::from([anchors[first]]);
    let mut stack = vec![anchors[first]];
    while let Some(a) = stack.pop() {
        for (du, dv) in NEIGHBOURS {
            let b = Anchor::new(a.u + du, a.v + dv);
            if set.contains_key(&b) && seen.insert(b) {
                stack.push(b);
            }
        }
    }
    seen.len() == set.len()
}

/// Block-shaped mask over a crop. The ratio is drawn uniformly from
/// `[ratio − variance, ratio + variance]` (clamped to `[0, 1]`), and
/// rectangles of random size are masked around random unmasked patches until
/// `round(r · n)` patches are covered.
pub fn block_mask(anchors: &[Anchor], ratio: f64, variance: f64, rng: &mut impl Rng) -> Vec<bool> {
    let n = anchors.len();
    let mut mask = vec![false; n];
    if ratio <= 0.0 || n == 0 {
        return mask;
    }
    let lo = (ratio - variance).max(0.0);
    let hi = (ratio + variance).min(1.0);
    let r = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let target = ((r * n as f64).round() as usize).min(n);
    let mut count = 0;
    while count < target {
        let free: Vec<usize> = (0..n).filter(|&j| !mask[j]).collect();
        let c = anchors[free[rng.random_range(0..free.len())]];
        let remaining = target - count;
        let max_side = ((remaining as f64).sqrt().ceil() as i64).max(1);
        let h = rng.random_range(1..=max_side);
        let w = rng.random_range(1..=max_side);
        let mut block: Vec<usize> = free
            .into_iter()
            .filter(|&j| {
                let a = anchors[j];
                a.u >= c.u && a.u < c.u + h && a.v >= c.v && a.v < c.v + w
            })
            .collect();
        block.sort_by(|&a, &b| anchors[a].dist(c).total_cmp(&anchors[b].dist(c)).then(a.cmp(&b)));
        for j in block.into_iter().take(remaining) {
            mask[j] = true;
            count += 1;
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(w: i64, h: i64) -> Vec<Anchor> {
        (0..w).flat_map(|u| (0..h).map(move |v| Anchor::new(u, v))).collect()
    }

    #[test]
    fn crop_size_arithmetic() {
        assert_eq!(crop_size(10, 0.9), 9);
        assert_eq!(crop_size(10, 1.0), 10);
        assert_eq!(crop_size(25, 0.18), 5);
        assert_eq!(crop_size(3, 0.1), 1);
    }

    #[test]
    fn corner_crop_is_connected() {
        let a = grid(5, 5);
        let c = grow_crop(&a, 0, 0.18).unwrap();
        assert_eq!(c.len(), 5);
        assert!(is_connected(&a, &c));
    }

    #[test]
    fn full_ratio_covers_everything() {
        let a = grid(4, 3);
        assert_eq!(grow_crop(&a, 5, 1.0).unwrap(), (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn mask_hits_ratio_and_zero_ratio_is_empty() {
        let a = grid(10, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(block_mask(&a, 0.0, 0.15, &mut rng).iter().all(|&m| !m));
        let m = block_mask(&a, 0.3, 0.0, &mut rng);
        assert_eq!(m.iter().filter(|&&x| x).count(), 30);
    }
}
