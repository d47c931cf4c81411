//! Epoch loops over a corpus: logging, checkpoints and stage hand-off.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{split_sub_wsi, write_log, LogRecord, Stage1Trainer, Stage2Trainer};
use crate::config::{model_hash, CareConfig};
use crate::encoders::{Modality, MolecularProfile};
use crate::error::{CareError, Result};
use crate::io::Corpus;
use crate::region::PatchSet;
use crate::tensor::{load_checkpoint, save_checkpoint, Checkpoint};

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub steps: usize,
    pub skipped: usize,
    /// Total loss of the last step.
    pub last_total: f64,
    pub checkpoint: PathBuf,
}

pub fn stage1_checkpoint(out_dir: &Path) -> PathBuf {
    out_dir.join("stage1.ckpt")
}

pub fn stage2_checkpoint(out_dir: &Path, m: Modality) -> PathBuf {
    out_dir.join(format!("stage2_{m}.ckpt"))
}

/// All sub-slides of the corpus, in slide order.
pub fn sub_slides(cfg: &CareConfig, corpus: &Corpus) -> Result<Vec<PatchSet<f32>>> {
    let mut out = Vec::new();
    for s in &corpus.slides {
        for sub in split_sub_wsi(s.id(), s.patches.anchors(), &cfg.subwsi)? {
            out.push(s.patches.subset(&sub.members)?);
        }
    }
    Ok(out)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CareError::io(dir, e))
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9)));
    idx
}

/// Self-distillation over the corpus's sub-slides.
pub fn run_stage1(cfg: &CareConfig, corpus: &Corpus, log: &mut impl Write) -> Result<RunSummary> {
    cfg.validate()?;
    let subs = sub_slides(cfg, corpus)?;
    let s1 = &cfg.stage1;
    let steps_per_epoch = subs.len().div_ceil(s1.batch_size);
    let mut t = Stage1Trainer::<f32>::new(&cfg.model, s1.clone(), cfg.augment.clone(), cfg.optimizer, steps_per_epoch)?;
    let out_dir = &cfg.run.out_dir;
    ensure_dir(out_dir)?;
    let hash = model_hash(&cfg.model, None);
    log::info!("stage 1: {} sub-slides from {} slides, {steps_per_epoch} steps per epoch", subs.len(), corpus.slides.len());
    let (mut skipped, mut last_total) = (0, f64::NAN);
    for epoch in 0..s1.epochs {
        for chunk in shuffled(subs.len(), s1.seed, epoch).chunks(s1.batch_size) {
            let batch: Vec<PatchSet<f32>> = chunk.iter().map(|&i| subs[i].clone()).collect();
            let r = t.step(&batch)?;
            skipped += usize::from(r.skipped);
            last_total = r.bundle.total;
            if r.step % cfg.run.log_every.max(1) == 0 {
                write_log(
                    log,
                    &LogRecord {
                        step: r.step,
                        main: r.bundle.main,
                        rsl: r.bundle.rsl,
                        e_bar: r.bundle.e_bar,
                        lr: r.lr,
                        m: Some(r.momentum),
                    },
                )?;
            }
            if s1.checkpoint_every > 0 && (r.step + 1) % s1.checkpoint_every == 0 {
                let p = out_dir.join(format!("stage1_step{}.ckpt", r.step + 1));
                save_checkpoint(&p, &t.student.to_checkpoint(hash))?;
            }
        }
    }
    let path = stage1_checkpoint(out_dir);
    save_checkpoint(&path, &t.student.to_checkpoint(hash))?;
    Ok(RunSummary {
        steps: t.step_count(),
        skipped,
        last_total,
        checkpoint: path,
    })
}

/// Where a phase initializes from when `run.init` is unset.
pub fn default_init(cfg: &CareConfig, m: Modality) -> PathBuf {
    match m {
        Modality::Rna => stage1_checkpoint(&cfg.run.out_dir),
        Modality::Protein => stage2_checkpoint(&cfg.run.out_dir, Modality::Rna),
    }
}

/// Loads the starting weights of a phase: the slide encoder from a stage-1
/// checkpoint for RNA, every parameter from the RNA checkpoint for protein.
pub fn init_stage2(t: &mut Stage2Trainer<f32>, cfg: &CareConfig, ckpt: &Checkpoint) -> Result<()> {
    match t.modality {
        Modality::Rna => {
            if ckpt.config_hash != model_hash(&cfg.model, None) && ckpt.config_hash != cfg.config_hash() {
                return Err(CareError::Config("initial checkpoint was trained with a different slide encoder".into()));
            }
            t.load_groups(ckpt, &["wsi"])
        }
        Modality::Protein => {
            if ckpt.config_hash != cfg.config_hash() {
                return Err(CareError::Config("RNA-phase checkpoint was trained with a different architecture".into()));
            }
            t.store.load_from(ckpt)
        }
    }
}

/// One contrastive phase over every paired slide in the corpus.
pub fn run_stage2(cfg: &CareConfig, corpus: &Corpus, m: Modality, log: &mut impl Write) -> Result<RunSummary> {
    cfg.validate()?;
    let phase = match m {
        Modality::Rna => &cfg.stage2.rna,
        Modality::Protein => &cfg.stage2.protein,
    };
    let pairs: Vec<(usize, MolecularProfile)> = corpus
        .pairs(m)?
        .into_iter()
        .map(|(i, p)| match m {
            Modality::Protein => (i, p.top_n(cfg.molecular.protein_top_n)),
            Modality::Rna => (i, p),
        })
        .collect();
    let steps_per_epoch = pairs.len().div_ceil(phase.batch_size);
    let mut t = Stage2Trainer::<f32>::new(&cfg.model, &cfg.molecular, m, phase.clone(), cfg.optimizer, steps_per_epoch)?;
    let init = cfg.run.init.clone().unwrap_or_else(|| default_init(cfg, m));
    if init.exists() {
        init_stage2(&mut t, cfg, &load_checkpoint(&init)?)?;
        log::info!("stage 2 ({m}): initialized from {}", init.display());
    } else if cfg.run.init.is_some() || m == Modality::Protein {
        return Err(CareError::Config(format!("initial checkpoint {} not found", init.display())));
    } else {
        log::warn!("stage 2 ({m}): no stage-1 checkpoint at {}, starting from random weights", init.display());
    }
    let out_dir = &cfg.run.out_dir;
    ensure_dir(out_dir)?;
    let (mut skipped, mut last_total) = (0, f64::NAN);
    for epoch in 0..phase.epochs {
        for chunk in shuffled(pairs.len(), phase.seed, epoch).chunks(phase.batch_size) {
            let batch: Vec<(PatchSet<f32>, MolecularProfile)> = chunk
                .iter()
                .map(|&k| (corpus.slides[pairs[k].0].patches.clone(), pairs[k].1.clone()))
                .collect();
            let r = t.step(&batch)?;
            skipped += usize::from(!r.bundle.is_finite());
            last_total = r.bundle.total;
            if r.step % cfg.run.log_every.max(1) == 0 {
                write_log(
                    log,
                    &LogRecord {
                        step: r.step,
                        main: r.bundle.main,
                        rsl: r.bundle.rsl,
                        e_bar: r.bundle.e_bar,
                        lr: r.lr,
                        m: None,
                    },
                )?;
            }
        }
    }
    let path = stage2_checkpoint(out_dir, m);
    save_checkpoint(&path, &t.store.to_checkpoint(cfg.config_hash()))?;
    Ok(RunSummary {
        steps: t.step_count(),
        skipped,
        last_total,
        checkpoint: path,
    })
}

/// Slide encoder with weights from a stage-1 or stage-2 checkpoint.
pub fn encoder_from_checkpoint(
    cfg: &CareConfig,
    ckpt: &Checkpoint,
) -> Result<(crate::model::CareEncoder, crate::tensor::ParamStore<f32>)> {
    if ckpt.config_hash != model_hash(&cfg.model, None) && ckpt.config_hash != cfg.config_hash() {
        return Err(CareError::Config(format!(
            "checkpoint (config hash {}) was not trained with this model config",
            ckpt.config_hash_hex()
        )));
    }
    let mut store = crate::tensor::ParamStore::new();
    let enc = crate::model::CareEncoder::new(&mut store, "wsi", &cfg.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    store.load_group(ckpt, "wsi")?;
    Ok((enc, store))
}
