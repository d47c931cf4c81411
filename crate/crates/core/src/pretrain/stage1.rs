use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::augment::{augment_features, AugmentConfig};
use super::views::{block_mask, sample_crops};
use super::{ema_update, sample_seed, Stage1Config};
use crate::error::{CareError, Result};
use crate::model::{CareEncoder, ModelConfig};
use crate::nn::{ForwardCtx, Linear};
use crate::objectives::{
    distillation_losses, mean_of, teacher_targets, total_loss, update_center, LossBundle, StudentViews, TeacherViews,
};
use crate::region::PatchSet;
use crate::tensor::{
    adamw_step, cosine_ramp, AdamW, CosineSchedule, Graph, Hyper, OptimizerState, ParamGrads, ParamStore, Real,
    Tensor, Var,
};

/// Slide encoder plus the slide-token and patch-token prototype heads.
#[derive(Clone, Debug)]
pub struct Stage1Model {
    pub encoder: CareEncoder,
    pub cls_head: Linear,
    pub patch_head: Linear,
}

impl Stage1Model {
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        model: &ModelConfig,
        prototypes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            encoder: CareEncoder::new(store, "wsi", model, rng)?,
            cls_head: Linear::new(store, "head.cls", model.d_out, prototypes, true, rng),
            patch_head: Linear::new(store, "head.patch", model.d_in, prototypes, true, rng),
        })
    }

    /// `(forward, cls logits 1 × P, patch logits n × P)` for one view.
    fn view<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        p: &PatchSet<T>,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<(crate::model::CareForward, Var, Var)> {
        let out = self.encoder.forward(g, p.anchors(), x, ctx)?;
        let cls = self.cls_head.forward(g, out.z)?;
        let patch = self.patch_head.forward(g, out.cep)?;
        Ok((out, cls, patch))
    }
}

/// Loss values and schedule state of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Report {
    pub step: usize,
    pub bundle: LossBundle,
    pub l_cls: f64,
    pub l_mim: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub grad_norm: f64,
    /// True when the step was dropped because of a non-finite loss.
    pub skipped: bool,
}

struct Prepared<T> {
    views: Vec<PatchSet<T>>,
    masks: Vec<Vec<bool>>,
    teacher_cls: Vec<Tensor<T>>,
    teacher_patch: Vec<Tensor<T>>,
    dropout_seed: u64,
}

struct SampleOut<T> {
    grads: ParamGrads<T>,
    bundle: LossBundle,
    l_cls: f64,
    l_mim: f64,
    teacher_cls: Vec<Tensor<T>>,
    teacher_patch: Vec<Tensor<T>>,
}

/// Student, EMA teacher, optimizer and centering state.
pub struct Stage1Trainer<T> {
    pub cfg: Stage1Config,
    pub augment: AugmentConfig,
    pub adamw: AdamW,
    pub lambda_rsl: f64,
    pub model: Stage1Model,
    pub student: ParamStore<T>,
    pub teacher: ParamStore<T>,
    pub opt: OptimizerState<T>,
    /// Teacher centers; seeded from the first batch's teacher logits.
    pub cls_center: Vec<f64>,
    pub patch_center: Vec<f64>,
    pub steps_per_epoch: usize,
    step: usize,
    centers_ready: bool,
}

impl<T: Real> Stage1Trainer<T> {
    pub fn new(
        model_cfg: &ModelConfig,
        cfg: Stage1Config,
        augment: AugmentConfig,
        adamw: AdamW,
        steps_per_epoch: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        augment.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut student = ParamStore::new();
        let model = Stage1Model::build(&mut student, model_cfg, cfg.prototypes, &mut rng)?;
        let teacher = student.clone();
        let opt = OptimizerState::new(&student);
        Ok(Self {
            cls_center: vec![0.0; cfg.prototypes],
            patch_center: vec![0.0; cfg.prototypes],
            lambda_rsl: if cfg.rsl { model_cfg.lambda_rsl } else { 0.0 },
            steps_per_epoch: steps_per_epoch.max(1),
            cfg,
            augment,
            adamw,
            model,
            student,
            teacher,
            opt,
            step: 0,
            centers_ready: false,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.steps_per_epoch
    }

    pub fn lr_schedule(&self) -> CosineSchedule {
        CosineSchedule {
            peak: self.cfg.lr,
            end: self.cfg.min_lr,
            warmup_steps: self.cfg.warmup_epochs * self.steps_per_epoch,
            total_steps: self.total_steps(),
        }
    }

    fn progress(&self) -> f64 {
        self.step as f64 / self.total_steps().max(1) as f64
    }

    /// One optimizer step on a batch of sub-slides.
    pub fn step(&mut self, batch: &[PatchSet<T>]) -> Result<Stage1Report> {
        if batch.is_empty() {
            return Err(CareError::contract("empty stage-1 batch"));
        }
        let epoch = self.step / self.steps_per_epoch;
        let lr = self.lr_schedule().at(self.step);
        let t = self.progress();
        let wd = cosine_ramp(self.cfg.weight_decay, self.cfg.weight_decay_end, t);
        let momentum = cosine_ramp(self.cfg.momentum, self.cfg.momentum_end, t);
        let temp = self.cfg.teacher_temp_at(epoch);

        let prepared: Vec<Prepared<T>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, p)| self.prepare(p, sample_seed(self.cfg.seed, self.step, i)))
            .collect::<Result<_>>()?;
        if !self.centers_ready {
            let cls: Vec<Tensor<T>> = prepared.iter().flat_map(|s| s.teacher_cls.iter().cloned()).collect();
            let patch: Vec<Tensor<T>> = prepared.iter().flat_map(|s| s.teacher_patch.iter().cloned()).collect();
            update_center(&mut self.cls_center, &cls, 0.0);
            update_center(&mut self.patch_center, &patch, 0.0);
            self.centers_ready = true;
        }
        let chunk = batch.len().div_ceil(self.cfg.grad_accum);
        let mut outs = Vec::with_capacity(batch.len());
        let mut prepared = prepared.into_iter();
        for micro in batch.chunks(chunk) {
            let part: Vec<Prepared<T>> = prepared.by_ref().take(micro.len()).collect();
            let part: Vec<Result<SampleOut<T>>> = part.into_par_iter().map(|p| self.student_pass(p, temp)).collect();
            outs.extend(part);
        }
        let mut samples = Vec::with_capacity(outs.len());
        let mut non_finite = false;
        for o in outs {
            match o {
                Ok(s) => {
                    non_finite |= !s.bundle.is_finite();
                    samples.push(s);
                }
                Err(CareError::NonFinite(what)) => {
                    log::warn!("stage-1 step {}: non-finite value in {what}", self.step);
                    non_finite = true;
                }
                Err(e) => return Err(e),
            }
        }
        let n = batch.len() as f64;
        let mean = |f: &dyn Fn(&SampleOut<T>) -> f64| samples.iter().map(f).sum::<f64>() / samples.len().max(1) as f64;
        let bundle = LossBundle::new(
            mean(&|s| s.bundle.main),
            mean(&|s| s.bundle.rsl),
            self.lambda_rsl,
            mean(&|s| s.bundle.e_bar),
        );
        let mut report = Stage1Report {
            step: self.step,
            bundle,
            l_cls: mean(&|s| s.l_cls),
            l_mim: mean(&|s| s.l_mim),
            lr,
            weight_decay: wd,
            momentum,
            grad_norm: 0.0,
            skipped: non_finite,
        };
        self.step += 1;
        if non_finite {
            log::warn!("stage-1 step {} skipped: non-finite loss", report.step);
            return Ok(report);
        }

        let mut grads = ParamGrads::new(self.student.len());
        for s in &samples {
            grads.merge(&s.grads);
        }
        grads.scale(T::c(1.0 / n));
        let frozen_head = epoch < self.cfg.freeze_last_layer_epochs;
        report.grad_norm = adamw_step(&mut self.student, &grads, &mut self.opt, &self.adamw, |group| match group {
            "head" if frozen_head => None,
            _ => Some(Hyper { lr, weight_decay: wd }),
        })?;
        ema_update(&mut self.teacher, &self.student, momentum)?;
        let cls: Vec<Tensor<T>> = samples.iter().flat_map(|s| s.teacher_cls.iter().cloned()).collect();
        let patch: Vec<Tensor<T>> = samples.iter().flat_map(|s| s.teacher_patch.iter().cloned()).collect();
        update_center(&mut self.cls_center, &cls, self.cfg.center_momentum);
        update_center(&mut self.patch_center, &patch, self.cfg.center_momentum);
        Ok(report)
    }

    /// Crops, augmentation, masks and teacher logits for one sub-slide.
    fn prepare(&self, p: &PatchSet<T>, seed: u64) -> Result<Prepared<T>> {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let crops = sample_crops(
            p.anchors(),
            cfg.global_crops,
            cfg.global_ratio,
            cfg.local_crops,
            cfg.local_ratio,
            &mut rng,
        )?;
        let mut views = Vec::with_capacity(crops.len());
        for c in &crops {
            let sub = p.subset(c)?;
            let (f, _) = augment_features(sub.features(), &self.augment, &mut rng);
            views.push(sub.with_features(f)?);
        }
        let masks: Vec<Vec<bool>> = views[..cfg.global_crops]
            .iter()
            .map(|v| block_mask(v.anchors(), cfg.mask_ratio, cfg.mask_variance, &mut rng))
            .collect();

        let mut tg = Graph::inference(&self.teacher);
        let mut teacher_cls = Vec::with_capacity(cfg.global_crops);
        let mut teacher_patch = Vec::with_capacity(cfg.global_crops);
        for v in &views[..cfg.global_crops] {
            let x = tg.constant(v.features().clone());
            let (_, cls, patch) = self.model.view(&mut tg, v, x, &mut ForwardCtx::eval())?;
            teacher_cls.push(tg.value(cls).clone());
            teacher_patch.push(tg.value(patch).clone());
        }
        Ok(Prepared {
            views,
            masks,
            teacher_cls,
            teacher_patch,
            dropout_seed: rng.random(),
        })
    }

    fn student_pass(&self, prep: Prepared<T>, teacher_temp: f64) -> Result<SampleOut<T>> {
        let cfg = &self.cfg;
        let Prepared {
            views,
            masks,
            teacher_cls,
            teacher_patch,
            dropout_seed,
        } = prep;
        let targets = TeacherViews {
            cls: teacher_cls
                .iter()
                .map(|l| teacher_targets(l, &self.cls_center, teacher_temp))
                .collect::<Result<_>>()?,
            patches: teacher_patch
                .iter()
                .map(|l| teacher_targets(l, &self.patch_center, teacher_temp))
                .collect::<Result<_>>()?,
        };
        let mut g = Graph::with_params(&self.student);
        let mut ctx = ForwardCtx::train(dropout_seed);
        let mut student = StudentViews {
            cls: Vec::with_capacity(views.len()),
            patches: Vec::with_capacity(cfg.global_crops),
        };
        let mut rsl = Vec::with_capacity(views.len());
        let mut e_bar = Vec::with_capacity(views.len());
        for (i, v) in views.iter().enumerate() {
            let x = if i < cfg.global_crops {
                self.model.encoder.masked_input(&mut g, v.features(), &masks[i])?
            } else {
                g.constant(v.features().clone())
            };
            let (out, cls, patch) = self.model.view(&mut g, v, x, &mut ctx)?;
            student.cls.push(cls);
            if i < cfg.global_crops {
                student.patches.push(patch);
            }
            rsl.push(out.rsl);
            e_bar.push(out.e_bar);
        }
        let (l_cls, l_mim) = distillation_losses(&mut g, &student, &targets, &masks, cfg.student_temp)?;
        let main = g.add(l_cls, l_mim)?;
        let rsl = mean_of(&mut g, &rsl)?;
        let e_bar = mean_of(&mut g, &e_bar)?;
        let total = total_loss(&mut g, main, rsl, self.lambda_rsl)?;
        let val = |g: &Graph<'_, T>, v: Var| g.value(v).item().f64();
        let bundle = LossBundle::new(val(&g, main), val(&g, rsl), self.lambda_rsl, val(&g, e_bar));
        let (l_cls, l_mim) = (val(&g, l_cls), val(&g, l_mim));
        if !bundle.is_finite() {
            return Err(CareError::NonFinite("stage-1 loss".into()));
        }
        g.backward(total)?;
        Ok(SampleOut {
            grads: g.param_grads(),
            bundle,
            l_cls,
            l_mim,
            teacher_cls,
            teacher_patch,
        })
    }
}
