//! Linear-probe evaluation: logistic regression, kNN and a Cox survival
//! head over frozen embeddings, with Monte Carlo cross-validation.

mod knn;
mod logistic;
mod metrics;
mod solver;
mod survival;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CareError, Result};

pub use knn::{k_grid, sqrt_rule, KnnModel};
pub use logistic::{c_grid, objective as logistic_objective, LogisticModel, DEFAULT_C};
pub use metrics::{auroc, auroc_ovr, balanced_accuracy, c_index, macro_f1};
pub use solver::{minimize, SolverOptions, SolverResult};
pub use survival::{cox_objective, CoxModel};

pub(crate) fn check_features(x: &[Vec<f64>], n: usize) -> Result<usize> {
    if x.is_empty() || x.len() != n {
        return Err(CareError::contract(format!("{} feature rows for {n} labels", x.len())));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(CareError::contract("feature rows must share a nonzero width"));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CareError::NonFinite("probe features".into()));
    }
    Ok(d)
}

/// First position of the maximum.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    #[serde(rename = "lr")]
    Logistic,
    Knn,
    Survival,
}

impl Head {
    pub fn as_str(self) -> &'static str {
        match self {
            Head::Logistic => "lr",
            Head::Knn => "knn",
            Head::Survival => "survival",
        }
    }
}

impl std::str::FromStr for Head {
    type Err = CareError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lr" => Ok(Head::Logistic),
            "knn" => Ok(Head::Knn),
            "survival" => Ok(Head::Survival),
            other => Err(CareError::Config(format!("unknown probe head {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(Vec<usize>),
    Survival { time: Vec<f64>, event: Vec<bool> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeData {
    pub features: Vec<Vec<f64>>,
    pub target: Target,
}

impl ProbeData {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    fn strata(&self) -> Vec<usize> {
        match &self.target {
            Target::Class(y) => y.clone(),
            Target::Survival { event, .. } => event.iter().map(|&e| usize::from(e)).collect(),
        }
    }
}

/// Train/validation/test indices; no index occurs twice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified random split: each stratum contributes `round(frac · size)`
/// members to test and validation (at least one to test when it has ≥ 2).
pub fn stratified_split(strata: &[usize], test_frac: f64, val_frac: f64, rng: &mut ChaCha8Rng) -> Split {
    let k = strata.iter().max().map_or(0, |m| m + 1);
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for s in 0..k {
        let mut idx: Vec<usize> = (0..strata.len()).filter(|&i| strata[i] == s).collect();
        idx.shuffle(rng);
        let n = idx.len();
        let mut n_test = (test_frac * n as f64).round() as usize;
        if n >= 2 && test_frac > 0.0 {
            n_test = n_test.clamp(1, n - 1);
        }
        let n_val = ((val_frac * n as f64).round() as usize).min(n - n_test.min(n));
        split.test.extend(&idx[..n_test.min(n)]);
        split.val.extend(&idx[n_test.min(n)..n_test.min(n) + n_val]);
        split.train.extend(&idx[n_test.min(n) + n_val..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    split
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvConfig {
    pub repeats: usize,
    pub test_fraction: f64,
    /// Fraction held out for hyperparameter selection; 0 means fixed defaults.
    pub val_fraction: f64,
    pub seed: u64,
}

impl CvConfig {
    pub fn has_validation(&self) -> bool {
        self.val_fraction > 0.0
    }
}

/// 50 repeats without a validation split, 5 with one.
pub fn default_repeats(has_validation: bool) -> usize {
    if has_validation {
        5
    } else {
        50
    }
}

fn rows(x: &[Vec<f64>], idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| x[i].clone()).collect()
}

fn pick<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Metric name and value for one repeat.
pub type RepeatMetrics = Vec<(&'static str, f64)>;

fn classification_metrics(probs: &[Vec<f64>], pred: &[usize], truth: &[usize]) -> Result<RepeatMetrics> {
    let mut m = vec![
        ("balanced_accuracy", balanced_accuracy(pred, truth)?),
        ("macro_f1", macro_f1(pred, truth)?),
    ];
    match auroc_ovr(probs, truth) {
        Ok(a) => m.push(("auroc", a)),
        Err(e) => log::warn!("AUROC skipped for this repeat: {e}"),
    }
    Ok(m)
}

/// Fits and scores one head on one split.
pub fn run_split(data: &ProbeData, head: Head, split: &Split) -> Result<RepeatMetrics> {
    let x = &data.features;
    let (xtr, xva, xte) = (rows(x, &split.train), rows(x, &split.val), rows(x, &split.test));
    match (&data.target, head) {
        (Target::Class(y), Head::Logistic) => {
            let (ytr, yva, yte) = (pick(y, &split.train), pick(y, &split.val), pick(y, &split.test));
            let c = if split.val.is_empty() {
                DEFAULT_C
            } else {
                select(&c_grid(), |&c| {
                    let m = LogisticModel::fit(&xtr, &ytr, c)?;
                    balanced_accuracy(&m.predict(&xva), &yva)
                })?
            };
            let m = LogisticModel::fit(&xtr, &ytr, c)?;
            classification_metrics(&m.predict_proba(&xte), &m.predict(&xte), &yte)
        }
        (Target::Class(y), Head::Knn) => {
            let (ytr, yva, yte) = (pick(y, &split.train), pick(y, &split.val), pick(y, &split.test));
            let k = if split.val.is_empty() {
                sqrt_rule(xtr.len())
            } else {
                select(&k_grid(), |&k| {
                    let m = KnnModel::fit(&xtr, &ytr, k)?;
                    balanced_accuracy(&m.predict(&xva), &yva)
                })?
            };
            let m = KnnModel::fit(&xtr, &ytr, k)?;
            let mut probs = m.predict_proba(&xte);
            let classes = y.iter().max().map_or(1, |v| v + 1);
            probs.iter_mut().for_each(|p| p.resize(classes, 0.0));
            classification_metrics(&probs, &m.predict(&xte), &yte)
        }
        (Target::Survival { time, event }, Head::Survival) => {
            let (ttr, etr) = (pick(time, &split.train), pick(event, &split.train));
            let c = if split.val.is_empty() {
                DEFAULT_C
            } else {
                let (tva, eva) = (pick(time, &split.val), pick(event, &split.val));
                select(&c_grid(), |&c| {
                    let m = CoxModel::fit(&xtr, &ttr, &etr, c)?;
                    c_index(&m.risk(&xva), &tva, &eva)
                })?
            };
            let m = CoxModel::fit(&xtr, &ttr, &etr, c)?;
            let (tte, ete) = (pick(time, &split.test), pick(event, &split.test));
            Ok(vec![("c_index", c_index(&m.risk(&xte), &tte, &ete)?)])
        }
        (Target::Survival { .. }, h) => Err(CareError::Config(format!("head {} needs class labels", h.as_str()))),
        (Target::Class(_), Head::Survival) => Err(CareError::Config("survival head needs time/event labels".into())),
    }
}

/// First grid value with the best score.
fn select<V: Copy>(grid: &[V], mut score: impl FnMut(&V) -> Result<f64>) -> Result<V> {
    let mut best = (grid[0], f64::NEG_INFINITY);
    for v in grid {
        let s = score(v)?;
        if s > best.1 {
            best = (*v, s);
        }
    }
    Ok(best.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

fn repeat_seed(seed: u64, r: usize) -> u64 {
    let mut x = seed ^ 0xD1B5_4A32_D192_ED03u64.wrapping_mul(r as u64 + 1);
    x ^= x >> 29;
    x.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Repeated random stratified splits; repeats run in parallel with
/// per-repeat seeds, and results are reduced in repeat order.
pub fn monte_carlo_cv(data: &ProbeData, head: Head, cfg: &CvConfig) -> Result<Vec<MetricSummary>> {
    if cfg.repeats == 0 || !(cfg.test_fraction > 0.0 && cfg.test_fraction + cfg.val_fraction < 1.0) {
        return Err(CareError::Config("need repeats ≥ 1 and test + validation fractions below 1".into()));
    }
    let strata = data.strata();
    let per: Vec<Result<RepeatMetrics>> = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(repeat_seed(cfg.seed, r));
            let split = stratified_split(&strata, cfg.test_fraction, cfg.val_fraction, &mut rng);
            run_split(data, head, &split)
        })
        .collect();
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;
    let mut names: Vec<&'static str> = Vec::new();
    for m in &per {
        for (n, _) in m {
            if !names.contains(n) {
                names.push(n);
            }
        }
    }
    Ok(names
        .into_iter()
        .map(|name| {
            let v: Vec<f64> = per.iter().flat_map(|m| m.iter().filter(|(n, _)| *n == name).map(|(_, v)| *v)).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = if v.len() > 1 {
                v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64
            } else {
                0.0
            };
            MetricSummary {
                metric: name.to_string(),
                mean,
                std: var.sqrt(),
                n: v.len(),
            }
        })
        .collect())
}

/// Appends result rows (`task head metric mean std n_repeats`), writing the
/// header first when `header` is set.
pub fn write_results(out: &mut impl Write, task: &str, head: Head, rows: &[MetricSummary], header: bool) -> Result<()> {
    let mut s = String::new();
    if header {
        s.push_str("task\thead\tmetric\tmean\tstd\tn_repeats\n");
    }
    for r in rows {
        s.push_str(&format!(
            "{task}\t{}\t{}\t{:.6}\t{:.6}\t{}\n",
            head.as_str(),
            r.metric,
            r.mean,
            r.std,
            r.n
        ));
    }
    out.write_all(s.as_bytes()).map_err(|e| CareError::io("results", e))
}

/// Which embedding a probe reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Slide,
    Roi,
}

/// A probe task file: labels plus a directory of `<slide_id>.bin` embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub labels: PathBuf,
    pub embeddings: PathBuf,
    #[serde(default = "default_feature")]
    pub feature: FeatureKind,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub val_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_feature() -> FeatureKind {
    FeatureKind::Slide
}

fn default_test_fraction() -> f64 {
    0.3
}

impl TaskSpec {
    /// Reads a task file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CareError::io(path, e))?;
        let mut spec: Self =
            toml::from_str(&text).map_err(|e| CareError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut spec.labels, &mut spec.embeddings] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(spec)
    }

    /// Features and targets for every labelled slide with an embedding file.
    pub fn load_data(&self, head: Head) -> Result<ProbeData> {
        let labels = crate::io::read_labels(&self.labels)?;
        let mut features = Vec::new();
        let (mut y, mut time, mut event) = (Vec::new(), Vec::new(), Vec::new());
        for l in &labels {
            let p = self.embeddings.join(format!("{}.bin", l.slide_id));
            if !p.exists() {
                log::warn!("no embedding for {}; skipped", l.slide_id);
                continue;
            }
            let e = crate::io::read_embedding(&p)?;
            let v = match self.feature {
                FeatureKind::Slide => e.z,
                FeatureKind::Roi => e.roi_feature,
            };
            features.push(v.into_iter().map(f64::from).collect());
            y.push(l.label);
            time.push(l.time);
            event.push(l.event);
        }
        if features.is_empty() {
            return Err(CareError::data(&self.embeddings, None, "no labelled slide has an embedding"));
        }
        let target = match head {
            Head::Survival => Target::Survival { time, event },
            _ => Target::Class(y),
        };
        Ok(ProbeData { features, target })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_a_partition() {
        let strata: Vec<usize> = (0..50).map(|i| i % 3).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = stratified_split(&strata, 0.3, 0.2, &mut rng);
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        for c in 0..3 {
            assert!(s.test.iter().any(|&i| strata[i] == c));
        }
    }

    #[test]
    fn cv_is_reproducible() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![(i % 2) as f64 * 3.0 + (i as f64 * 0.37).sin()]).collect();
        let y: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let data = ProbeData {
            features: x,
            target: Target::Class(y),
        };
        let cfg = CvConfig {
            repeats: 4,
            test_fraction: 0.3,
            val_fraction: 0.0,
            seed: 9,
        };
        let a = monte_carlo_cv(&data, Head::Knn, &cfg).unwrap();
        let b = monte_carlo_cv(&data, Head::Knn, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].n, 4);
    }
}
