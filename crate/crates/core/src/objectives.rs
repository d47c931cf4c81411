//! Region structuring loss, objective composition, symmetric InfoNCE and the
//! self-distillation losses.

use crate::error::{CareError, Result};
use crate::tensor::{softmax_slice, Graph, Real, Tensor, Var};

/// Target mean expected rank.
pub const DEFAULT_RSL_TARGET: f64 = 0.5;
/// Weight of the structuring loss in the total objective.
pub const DEFAULT_LAMBDA_RSL: f64 = 0.1;

/// Mean expected candidate rank `Ē` from plain values; `pi` and `ranks` are
/// row-major `n × width`.
pub fn expected_rank(pi: &[f64], ranks: &[usize], width: usize) -> Result<f64> {
    if width == 0 || pi.is_empty() || pi.len() != ranks.len() || pi.len() % width != 0 {
        return Err(CareError::contract("expected rank needs a nonempty n × K table"));
    }
    let n = pi.len() / width;
    let total: f64 = pi.iter().zip(ranks).map(|(&p, &r)| p * r as f64).sum();
    Ok(total / n as f64)
}

/// `(Ē, (Ē − E*)²)` as graph nodes. Ranks enter as constants, so only `pi`
/// carries gradient.
pub fn region_structuring_loss<T: Real>(
    g: &mut Graph<'_, T>,
    pi: Var,
    ranks: &[usize],
    target: f64,
) -> Result<(Var, Var)> {
    let (n, k) = g.value(pi).dims2();
    if n == 0 || ranks.len() != n * k {
        return Err(CareError::contract("structuring loss needs N ≥ 1 and a rank per candidate"));
    }
    let r = g.constant(Tensor::matrix(n, k, ranks.iter().map(|&r| T::c(r as f64)).collect())?);
    let weighted = g.mul(pi, r)?;
    let total = g.sum(weighted)?;
    let e_bar = g.scale(total, T::c(1.0 / n as f64))?;
    let dev = g.add_scalar(e_bar, T::c(-target))?;
    let loss = g.mul(dev, dev)?;
    Ok((e_bar, loss))
}

/// Scalar loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub main: f64,
    pub rsl: f64,
    pub lambda_rsl: f64,
    pub total: f64,
    pub e_bar: f64,
}

impl LossBundle {
    pub fn new(main: f64, rsl: f64, lambda_rsl: f64, e_bar: f64) -> Self {
        Self {
            main,
            rsl,
            lambda_rsl,
            total: main + lambda_rsl * rsl,
            e_bar,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.main.is_finite() && self.rsl.is_finite() && self.total.is_finite()
    }
}

/// `main + λ·rsl`.
pub fn total_loss<T: Real>(g: &mut Graph<'_, T>, main: Var, rsl: Var, lambda: f64) -> Result<Var> {
    let r = g.scale(rsl, T::c(lambda))?;
    g.add(main, r)
}

/// Symmetric InfoNCE for matched rows of `a` and `b` (`B × d`, unit norm)
/// with temperature `exp(log_tau)`.
pub fn info_nce_symmetric<T: Real>(g: &mut Graph<'_, T>, a: Var, b: Var, log_tau: Var) -> Result<Var> {
    let (ba, da) = g.value(a).dims2();
    let (bb, db) = g.value(b).dims2();
    if ba == 0 || ba != bb || da != db {
        return Err(CareError::shape("info_nce", format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    let sim = g.matmul_t(a, b)?;
    let tau = g.exp(log_tau)?;
    let logits = g.div(sim, tau)?;
    let diag: Vec<usize> = (0..ba).collect();
    let rows = g.log_softmax(logits, 1)?;
    let rows = g.take_along_rows(rows, &diag, 1)?;
    let cols = g.log_softmax(logits, 0)?;
    let cols = g.transpose(cols)?;
    let cols = g.take_along_rows(cols, &diag, 1)?;
    let both = g.add(rows, cols)?;
    let m = g.mean(both)?;
    g.scale(m, T::c(-0.5))
}

/// Mean over rows of `−Σ t · log softmax(s / temp)`.
pub fn soft_cross_entropy<T: Real>(g: &mut Graph<'_, T>, student: Var, targets: &Tensor<T>, temp: f64) -> Result<Var> {
    if g.value(student).dims2() != targets.dims2() {
        return Err(CareError::shape(
            "soft_cross_entropy",
            format!("{:?} vs {:?}", g.shape(student), targets.shape()),
        ));
    }
    let rows = targets.rows();
    let s = g.scale(student, T::c(1.0 / temp))?;
    let ls = g.log_softmax(s, 1)?;
    let t = g.constant(targets.clone());
    let prod = g.mul(ls, t)?;
    let total = g.sum(prod)?;
    g.scale(total, T::c(-1.0 / rows as f64))
}

/// Centered, sharpened teacher distribution: `softmax((l − c) / temp)` per row.
pub fn teacher_targets<T: Real>(logits: &Tensor<T>, center: &[f64], temp: f64) -> Result<Tensor<T>> {
    let (r, c) = logits.dims2();
    if center.len() != c {
        return Err(CareError::shape("teacher_targets", "center width"));
    }
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let row: Vec<f64> = logits.row(i).iter().zip(center).map(|(&l, &m)| (l.f64() - m) / temp).collect();
        data.extend(softmax_slice(&row)?.into_iter().map(T::c));
    }
    Tensor::matrix(r, c, data)
}

/// EMA of the batch-mean teacher logits.
pub fn update_center<T: Real>(center: &mut [f64], logits: &[Tensor<T>], momentum: f64) {
    let mut sum = vec![0.0; center.len()];
    let mut rows = 0usize;
    for t in logits {
        for i in 0..t.rows() {
            for (s, &v) in sum.iter_mut().zip(t.row(i)) {
                *s += v.f64();
            }
            rows += 1;
        }
    }
    if rows == 0 {
        return;
    }
    for (c, s) in center.iter_mut().zip(sum) {
        *c = momentum * *c + (1.0 - momentum) * s / rows as f64;
    }
}

/// Student outputs of one sample: slide-token logits for every view and
/// patch logits for the global views (which come first).
pub struct StudentViews {
    pub cls: Vec<Var>,
    pub patches: Vec<Var>,
}

/// Teacher targets on the unmasked global views.
pub struct TeacherViews<T> {
    pub cls: Vec<Tensor<T>>,
    pub patches: Vec<Tensor<T>>,
}

/// `(L_cls, L_mim)`. `L_cls` averages over (teacher global `t`, student view
/// `v ≠ t`) pairs; `L_mim` averages over masked positions of the global views.
pub fn distillation_losses<T: Real>(
    g: &mut Graph<'_, T>,
    student: &StudentViews,
    teacher: &TeacherViews<T>,
    masks: &[Vec<bool>],
    student_temp: f64,
) -> Result<(Var, Var)> {
    let globals = teacher.cls.len();
    if globals == 0 || student.cls.len() < globals || student.patches.len() != globals || teacher.patches.len() != globals
    {
        return Err(CareError::contract("distillation needs matching global views"));
    }
    if masks.len() != globals {
        return Err(CareError::contract("one mask per global view"));
    }
    let mut cls_terms = Vec::new();
    for (t, target) in teacher.cls.iter().enumerate() {
        for (v, &s) in student.cls.iter().enumerate() {
            if v != t {
                cls_terms.push(soft_cross_entropy(g, s, target, student_temp)?);
            }
        }
    }
    let l_cls = mean_of(g, &cls_terms)?;

    let mut mim_sum = None;
    let mut masked = 0usize;
    for ((&s, target), mask) in student.patches.iter().zip(&teacher.patches).zip(masks) {
        if mask.len() != target.rows() || g.value(s).rows() != target.rows() {
            return Err(CareError::shape("distillation_losses", "mask length"));
        }
        let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        if idx.is_empty() {
            continue;
        }
        let sel = g.gather_rows(s, &idx)?;
        let tgt = Tensor::from_rows(&idx.iter().map(|&i| target.row(i).to_vec()).collect::<Vec<_>>())?;
        // soft_cross_entropy averages over rows; undo to pool all positions.
        let ce = soft_cross_entropy(g, sel, &tgt, student_temp)?;
        let ce = g.scale(ce, T::c(idx.len() as f64))?;
        masked += idx.len();
        mim_sum = Some(match mim_sum {
            None => ce,
            Some(acc) => g.add(acc, ce)?,
        });
    }
    let l_mim = match mim_sum {
        Some(sum) => g.scale(sum, T::c(1.0 / masked as f64))?,
        None => {
            log::warn!("no masked positions; L_mim set to 0");
            g.constant(Tensor::scalar(T::zero()))
        }
    };
    Ok((l_cls, l_mim))
}

pub(crate) fn mean_of<T: Real>(g: &mut Graph<'_, T>, terms: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = terms.split_first() else {
        return Err(CareError::contract("mean of zero terms"));
    };
    let mut acc = first;
    for &t in rest {
        acc = g.add(acc, t)?;
    }
    g.scale(acc, T::c(1.0 / terms.len() as f64))
}
