use crate::error::{CareError, Result};

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b || a == 0 {
        return Err(CareError::contract(format!("{what}: {a} predictions for {b} labels")));
    }
    Ok(())
}

/// Mean recall over the classes present in `truth`.
pub fn balanced_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_len(pred.len(), truth.len(), "balanced accuracy")?;
    let k = truth.iter().max().copied().unwrap_or(0) + 1;
    let mut hit = vec![0usize; k];
    let mut total = vec![0usize; k];
    for (&p, &t) in pred.iter().zip(truth) {
        total[t] += 1;
        hit[t] += usize::from(p == t);
    }
    let present: Vec<f64> = (0..k)
        .filter(|&c| total[c] > 0)
        .map(|c| hit[c] as f64 / total[c] as f64)
        .collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Unweighted mean F1 over classes that occur in `truth` or `pred`; a class
/// with no true positives scores 0.
pub fn macro_f1(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_len(pred.len(), truth.len(), "macro-F1")?;
    let k = pred.iter().chain(truth).max().copied().unwrap_or(0) + 1;
    let (mut tp, mut fp, mut fn_) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let f1: Vec<f64> = (0..k)
        .filter(|&c| tp[c] + fp[c] + fn_[c] > 0)
        .map(|c| 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fn_[c]) as f64)
        .collect();
    Ok(f1.iter().sum::<f64>() / f1.len() as f64)
}

/// Area under the ROC curve as the Mann–Whitney statistic, score ties
/// counting one half. Undefined (an error) unless both classes occur.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    check_len(scores.len(), positive.len(), "AUROC")?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(CareError::NonFinite("AUROC score".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Midranks of tied groups.
    let mut rank = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            rank[k] = mid;
        }
        i = j + 1;
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CareError::contract("AUROC is undefined with a single class present"));
    }
    let r_pos: f64 = rank.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    Ok((r_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64)
}

/// Macro one-vs-rest AUROC over the classes present in `truth`
/// (binary tasks use the positive-class column only).
pub fn auroc_ovr(probs: &[Vec<f64>], truth: &[usize]) -> Result<f64> {
    check_len(probs.len(), truth.len(), "AUROC")?;
    let k = probs[0].len();
    let present: Vec<usize> = (0..k).filter(|c| truth.contains(c)).collect();
    if present.len() < 2 {
        return Err(CareError::contract("AUROC is undefined with a single class present"));
    }
    let classes: Vec<usize> = if k == 2 { vec![1] } else { present };
    let mut total = 0.0;
    for &c in &classes {
        let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let y: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        total += auroc(&s, &y)?;
    }
    Ok(total / classes.len() as f64)
}

/// Harrell's concordance index for risk scores (higher = earlier event).
/// A pair is comparable when the earlier time is an event, or when the
/// times are equal and exactly one of the two is an event (the censored
/// subject outlived the other). Concordant pairs count 1 and risk ties 0.5.
pub fn c_index(risk: &[f64], time: &[f64], event: &[bool]) -> Result<f64> {
    check_len(risk.len(), time.len(), "C-index")?;
    check_len(event.len(), time.len(), "C-index")?;
    let n = risk.len();
    let (mut num, mut den) = (0.0, 0usize);
    for i in 0..n {
        if !event[i] {
            continue;
        }
        for j in 0..n {
            if i == j {
                continue;
            }
            let comparable = time[i] < time[j] || (time[i] == time[j] && !event[j]);
            if !comparable {
                continue;
            }
            den += 1;
            num += if risk[i] > risk[j] {
                1.0
            } else if risk[i] == risk[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    if den == 0 {
        return Err(CareError::contract("C-index needs at least one comparable pair"));
    }
    Ok(num / den as f64)
}
