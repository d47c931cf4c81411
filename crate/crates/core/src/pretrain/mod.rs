//! Two-stage pretraining: masked self-distillation on sub-slides, then
//! contrastive alignment with RNA and protein profiles.

mod augment;
mod run;
mod stage1;
mod stage2;
mod subwsi;
mod views;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{CareError, Result};
use crate::tensor::{ParamStore, Real};

pub use augment::{augment_features, sample_transforms, AugmentConfig, Transform};
pub use run::{
    default_init, encoder_from_checkpoint, init_stage2, run_stage1, run_stage2, stage1_checkpoint, stage2_checkpoint, sub_slides, RunSummary,
};
pub use stage1::{Stage1Model, Stage1Report, Stage1Trainer};
pub use stage2::{retrieval_top1, Stage2Model, Stage2Report, Stage2Trainer};
pub use subwsi::{dbscan, split_sub_wsi, SubWsi, SubWsiConfig};
pub use views::{block_mask, crop_size, grow_crop, is_connected, sample_crops};

/// Stage-1 schedule and view construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub weight_decay_end: f64,
    pub momentum: f64,
    pub momentum_end: f64,
    pub global_crops: usize,
    pub global_ratio: f64,
    pub local_crops: usize,
    pub local_ratio: f64,
    pub mask_ratio: f64,
    pub mask_variance: f64,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub teacher_temp_end: f64,
    pub teacher_temp_warmup_epochs: usize,
    pub center_momentum: f64,
    pub prototypes: usize,
    pub freeze_last_layer_epochs: usize,
    pub grad_accum: usize,
    pub rsl: bool,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CareError::Config(format!("stage1: {m}")));
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum == 0 {
            return bad("epochs, batch_size and grad_accum must be positive");
        }
        if self.global_crops == 0 {
            return bad("at least one global crop is required");
        }
        if self.global_crops + self.local_crops < 2 {
            return bad("need at least two views for cross-view distillation");
        }
        for r in [self.global_ratio, self.local_ratio] {
            if !(r > 0.0 && r <= 1.0) {
                return bad("crop ratios must lie in (0, 1]");
            }
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) || self.mask_variance < 0.0 {
            return bad("mask ratio must lie in [0, 1]");
        }
        if self.student_temp <= 0.0 || self.teacher_temp <= 0.0 || self.teacher_temp_end <= 0.0 {
            return bad("temperatures must be positive");
        }
        if !(0.0..=1.0).contains(&self.momentum) || !(0.0..=1.0).contains(&self.momentum_end) {
            return bad("teacher momentum must lie in [0, 1]");
        }
        if self.prototypes == 0 {
            return bad("prototypes must be positive");
        }
        if self.lr < 0.0 || self.min_lr < 0.0 {
            return bad("learning rates must be nonnegative");
        }
        Ok(())
    }

    /// Linear warmup from `teacher_temp` to `teacher_temp_end`, then constant.
    pub fn teacher_temp_at(&self, epoch: usize) -> f64 {
        if epoch >= self.teacher_temp_warmup_epochs {
            return self.teacher_temp_end;
        }
        let t = epoch as f64 / self.teacher_temp_warmup_epochs as f64;
        self.teacher_temp + (self.teacher_temp_end - self.teacher_temp) * t
    }
}

/// One contrastive phase (RNA or protein).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub wsi_lr: f64,
    pub wsi_min_lr: f64,
    pub tower_lr: f64,
    pub tower_min_lr: f64,
    pub other_lr: f64,
    pub other_min_lr: f64,
    pub weight_decay: f64,
    /// Epochs during which the slide encoder and this phase's tower are frozen.
    pub freeze_epochs: usize,
    pub grad_accum: usize,
    pub dropout: f64,
    pub init_tau: f64,
    pub seed: u64,
}

impl PhaseConfig {
    pub fn validate(&self, what: &str) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum == 0 {
            return Err(CareError::Config(format!("{what}: epochs, batch_size and grad_accum must be positive")));
        }
        if self.init_tau <= 0.0 {
            return Err(CareError::Config(format!("{what}: init_tau must be positive")));
        }
        let lrs = [
            self.wsi_lr,
            self.wsi_min_lr,
            self.tower_lr,
            self.tower_min_lr,
            self.other_lr,
            self.other_min_lr,
        ];
        if lrs.iter().any(|&l| !(l >= 0.0)) {
            return Err(CareError::Config(format!("{what}: learning rates must be nonnegative")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CareError::Config(format!("{what}: dropout must lie in [0, 1)")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    pub rna: PhaseConfig,
    pub protein: PhaseConfig,
}

/// `θ_t ← m·θ_t + (1 − m)·θ_s` for every parameter.
pub fn ema_update<T: Real>(teacher: &mut ParamStore<T>, student: &ParamStore<T>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(CareError::contract(format!("EMA momentum {m} outside [0, 1]")));
    }
    teacher.check_layout(student)?;
    if m == 1.0 {
        return Ok(());
    }
    let (a, b) = (T::c(m), T::c(1.0 - m));
    let ids: Vec<_> = teacher.ids().collect();
    for id in ids {
        let s = student.get(id);
        let t = teacher.get_mut(id);
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = a * *tv + b * sv;
        }
    }
    Ok(())
}

/// Per-sample RNG seed derived from the run seed, step and sample index.
pub(crate) fn sample_seed(seed: u64, step: usize, index: usize) -> u64 {
    let mut x = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [step as u64, index as u64] {
        x = (x ^ v).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x ^= x >> 31;
    }
    x
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    #[serde(rename = "L_main")]
    pub main: f64,
    #[serde(rename = "L_RSL")]
    pub rsl: f64,
    #[serde(rename = "E_bar")]
    pub e_bar: f64,
    pub lr: f64,
    /// Teacher momentum; absent outside self-distillation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
}

/// Appends `rec` as one JSON line.
pub fn write_log(out: &mut impl Write, rec: &LogRecord) -> Result<()> {
    let line = serde_json::to_string(rec).map_err(|e| CareError::contract(format!("log record: {e}")))?;
    writeln!(out, "{line}").map_err(|e| CareError::io("training log", e))
}
