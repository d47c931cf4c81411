use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{sample_seed, PhaseConfig};
use crate::encoders::{Modality, MolecularConfig, MolecularEncoder, MolecularProfile};
use crate::error::{CareError, Result};
use crate::model::{CareEncoder, CareForward, ModelConfig};
use crate::nn::{ForwardCtx, Linear};
use crate::objectives::{info_nce_symmetric, LossBundle};
use crate::region::PatchSet;
use crate::tensor::{
    adamw_step, AdamW, Checkpoint, CosineSchedule, Graph, Hyper, OptimizerState, ParamGrads, ParamId, ParamStore,
    Real, Tensor, Var,
};

/// Slide encoder, both molecular towers, projection heads and temperature.
#[derive(Clone, Debug)]
pub struct Stage2Model {
    pub encoder: CareEncoder,
    pub slide_proj: Linear,
    pub rna: MolecularEncoder,
    pub protein: MolecularEncoder,
    pub log_tau: ParamId,
}

impl Stage2Model {
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        model: &ModelConfig,
        mol: &MolecularConfig,
        init_tau: f64,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        mol.validate()?;
        let encoder = CareEncoder::new(store, "wsi", model, rng)?;
        let slide_proj = Linear::new(store, "head.slide_proj", model.d_out, model.d_out, true, rng);
        let rna = MolecularEncoder::new(store, "rna", Modality::Rna, mol.rna_vocab, mol.tower, model.d_out, rng);
        let protein =
            MolecularEncoder::new(store, "protein", Modality::Protein, mol.protein_vocab, mol.tower, model.d_out, rng);
        let log_tau = store.register("head.log_tau", Tensor::scalar(T::c(init_tau.ln())), false);
        Ok(Self {
            encoder,
            slide_proj,
            rna,
            protein,
            log_tau,
        })
    }

    pub fn tower(&self, m: Modality) -> &MolecularEncoder {
        match m {
            Modality::Rna => &self.rna,
            Modality::Protein => &self.protein,
        }
    }

    /// Unit-norm projected slide embedding, `1 × d_out`.
    pub fn slide<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        p: &PatchSet<T>,
        ctx: &mut ForwardCtx,
    ) -> Result<(CareForward, Var)> {
        let x = g.constant(p.features().clone());
        let out = self.encoder.forward(g, p.anchors(), x, ctx)?;
        let e = self.slide_proj.forward(g, out.z)?;
        let e = g.l2_normalize(e)?;
        Ok((out, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Report {
    pub step: usize,
    pub bundle: LossBundle,
    pub lr: f64,
    pub tau: f64,
    pub grad_norm: f64,
    pub frozen: bool,
}

/// One contrastive phase over slide–profile pairs.
pub struct Stage2Trainer<T> {
    pub cfg: PhaseConfig,
    pub modality: Modality,
    pub adamw: AdamW,
    pub lambda_rsl: f64,
    pub model: Stage2Model,
    pub store: ParamStore<T>,
    pub opt: OptimizerState<T>,
    pub steps_per_epoch: usize,
    step: usize,
}

struct SlidePass<'s, T: Real> {
    graph: Graph<'s, T>,
    e: Var,
    rsl: Var,
    e_bar: Var,
}

impl<T: Real> Stage2Trainer<T> {
    pub fn new(
        model_cfg: &ModelConfig,
        mol: &MolecularConfig,
        modality: Modality,
        cfg: PhaseConfig,
        adamw: AdamW,
        steps_per_epoch: usize,
    ) -> Result<Self> {
        cfg.validate(modality.as_str())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let mut model = Stage2Model::build(&mut store, model_cfg, mol, cfg.init_tau, &mut rng)?;
        let tower = match modality {
            Modality::Rna => &mut model.rna,
            Modality::Protein => &mut model.protein,
        };
        for b in &mut tower.encoder.blocks {
            b.dropout = cfg.dropout;
        }
        let opt = OptimizerState::new(&store);
        Ok(Self {
            lambda_rsl: model_cfg.lambda_rsl,
            steps_per_epoch: steps_per_epoch.max(1),
            cfg,
            modality,
            adamw,
            model,
            store,
            opt,
            step: 0,
        })
    }

    /// Overwrites the given parameter groups from a checkpoint.
    pub fn load_groups(&mut self, ckpt: &Checkpoint, groups: &[&str]) -> Result<()> {
        for g in groups {
            self.store.load_group(ckpt, g)?;
        }
        Ok(())
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    fn schedule(&self, peak: f64, end: f64) -> CosineSchedule {
        CosineSchedule {
            peak,
            end,
            warmup_steps: self.cfg.warmup_epochs * self.steps_per_epoch,
            total_steps: self.cfg.epochs * self.steps_per_epoch,
        }
    }

    pub fn tau(&self) -> f64 {
        self.store.get(self.model.log_tau).item().f64().exp()
    }

    fn slide_pass<'s>(&'s self, p: &PatchSet<T>, seed: u64) -> Result<SlidePass<'s, T>> {
        let mut graph = Graph::with_params(&self.store);
        let mut ctx = ForwardCtx::train(seed);
        let (out, e) = self.model.slide(&mut graph, p, &mut ctx)?;
        Ok(SlidePass {
            graph,
            e,
            rsl: out.rsl,
            e_bar: out.e_bar,
        })
    }

    /// One optimizer step on slide–profile pairs.
    pub fn step(&mut self, batch: &[(PatchSet<T>, MolecularProfile)]) -> Result<Stage2Report> {
        if batch.is_empty() {
            return Err(CareError::contract("empty stage-2 batch"));
        }
        if let Some((_, p)) = batch.iter().find(|(_, p)| p.modality != self.modality) {
            return Err(CareError::contract(format!(
                "{} profile in a {} batch",
                p.modality, self.modality
            )));
        }
        let epoch = self.step / self.steps_per_epoch;
        let frozen = epoch < self.cfg.freeze_epochs;
        let lr_wsi = self.schedule(self.cfg.wsi_lr, self.cfg.wsi_min_lr).at(self.step);
        let lr_tower = self.schedule(self.cfg.tower_lr, self.cfg.tower_min_lr).at(self.step);
        let lr_other = self.schedule(self.cfg.other_lr, self.cfg.other_min_lr).at(self.step);

        let chunk = batch.len().div_ceil(self.cfg.grad_accum);
        let micro_count = batch.len().div_ceil(chunk);
        let mut grads = ParamGrads::new(self.store.len());
        let (mut info_sum, mut rsl_sum, mut ebar_sum) = (0.0, 0.0, 0.0);
        for (c, micro) in batch.chunks(chunk).enumerate() {
            let (g, info, rsl, ebar) = self.micro_batch(micro, c * chunk)?;
            grads.merge(&g);
            info_sum += info;
            rsl_sum += rsl;
            ebar_sum += ebar;
        }
        let k = micro_count as f64;
        grads.scale(T::c(1.0 / k));
        let bundle = LossBundle::new(info_sum / k, rsl_sum / k, self.lambda_rsl, ebar_sum / k);
        let report_step = self.step;
        self.step += 1;
        if !bundle.is_finite() {
            log::warn!("stage-2 step {report_step} skipped: non-finite loss");
            return Ok(Stage2Report {
                step: report_step,
                bundle,
                lr: lr_other,
                tau: self.tau(),
                grad_norm: 0.0,
                frozen,
            });
        }
        let wd = self.cfg.weight_decay;
        let active = self.modality.as_str();
        let grad_norm = adamw_step(&mut self.store, &grads, &mut self.opt, &self.adamw, |group| match group {
            "wsi" if !frozen => Some(Hyper {
                lr: lr_wsi,
                weight_decay: wd,
            }),
            "head" => Some(Hyper {
                lr: lr_other,
                weight_decay: wd,
            }),
            g if g == active && !frozen => Some(Hyper {
                lr: lr_tower,
                weight_decay: wd,
            }),
            _ => None,
        })?;
        Ok(Stage2Report {
            step: report_step,
            bundle,
            lr: lr_other,
            tau: self.tau(),
            grad_norm,
            frozen,
        })
    }

    /// Gradients and `(InfoNCE, mean RSL, mean Ē)` for one micro-batch.
    fn micro_batch(
        &self,
        micro: &[(PatchSet<T>, MolecularProfile)],
        offset: usize,
    ) -> Result<(ParamGrads<T>, f64, f64, f64)> {
        let b = micro.len();
        let passes: Vec<SlidePass<'_, T>> = micro
            .par_iter()
            .enumerate()
            .map(|(i, (p, _))| self.slide_pass(p, sample_seed(self.cfg.seed, self.step, offset + i)))
            .collect::<Result<_>>()?;

        let mut cg = Graph::with_params(&self.store);
        let leaves: Vec<Var> = passes.iter().map(|s| cg.leaf(s.graph.value(s.e).clone())).collect();
        let slides = cg.concat_rows(&leaves)?;
        let mut ctx = ForwardCtx::train(sample_seed(self.cfg.seed ^ 0x5EED, self.step, offset));
        let tower = self.model.tower(self.modality);
        let mols = micro
            .iter()
            .map(|(_, prof)| tower.forward(&mut cg, prof, &mut ctx))
            .collect::<Result<Vec<_>>>()?;
        let mols = cg.concat_rows(&mols)?;
        let log_tau = cg.param(self.model.log_tau);
        let info = info_nce_symmetric(&mut cg, slides, mols, log_tau)?;
        let info_val = cg.value(info).item().f64();
        cg.backward(info)?;
        let mut grads = cg.param_grads();
        let seeds: Vec<Tensor<T>> = leaves
            .iter()
            .map(|&l| cg.grad(l).cloned().unwrap_or_else(|| Tensor::zeros(cg.shape(l))))
            .collect();
        drop(cg);

        let rsl_weight = T::c(self.lambda_rsl / b as f64);
        let results: Vec<Result<(ParamGrads<T>, f64, f64)>> = passes
            .into_par_iter()
            .zip(seeds)
            .map(|(mut s, seed)| {
                let rsl = s.graph.value(s.rsl).item().f64();
                let ebar = s.graph.value(s.e_bar).item().f64();
                let rsl_seed = Tensor::new(s.graph.shape(s.rsl).to_vec(), vec![rsl_weight])?;
                s.graph.backward_seeds(&[(s.e, seed), (s.rsl, rsl_seed)])?;
                Ok((s.graph.param_grads(), rsl, ebar))
            })
            .collect();
        let (mut rsl_sum, mut ebar_sum) = (0.0, 0.0);
        for r in results {
            let (g, rsl, ebar) = r?;
            grads.merge(&g);
            rsl_sum += rsl;
            ebar_sum += ebar;
        }
        Ok((grads, info_val, rsl_sum / b as f64, ebar_sum / b as f64))
    }

    /// Projected unit-norm slide embeddings (evaluation mode).
    pub fn embed_slides(&self, slides: &[PatchSet<T>]) -> Result<Vec<Vec<T>>> {
        slides
            .par_iter()
            .map(|p| {
                let mut g = Graph::inference(&self.store);
                let (_, e) = self.model.slide(&mut g, p, &mut ForwardCtx::eval())?;
                Ok(g.value(e).data().to_vec())
            })
            .collect()
    }

    /// Unit-norm molecular embeddings from this phase's tower.
    pub fn embed_profiles(&self, profiles: &[MolecularProfile]) -> Result<Vec<Vec<T>>> {
        let tower = self.model.tower(self.modality);
        profiles
            .par_iter()
            .map(|p| {
                let mut g = Graph::inference(&self.store);
                let e = tower.forward(&mut g, p, &mut ForwardCtx::eval())?;
                Ok(g.value(e).data().to_vec())
            })
            .collect()
    }
}

/// Top-1 retrieval accuracy within consecutive blocks of `batch` pairs,
/// averaged over both directions (slide→profile and profile→slide). Ties go
/// to the lower index.
pub fn retrieval_top1<T: Real>(a: &[Vec<T>], b: &[Vec<T>], batch: usize) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() || batch == 0 {
        return Err(CareError::contract("retrieval needs equal nonempty embedding lists"));
    }
    let dot = |x: &[T], y: &[T]| x.iter().zip(y).map(|(&p, &q)| p.f64() * q.f64()).sum::<f64>();
    let mut hits = 0usize;
    let mut total = 0usize;
    for start in (0..a.len()).step_by(batch) {
        let end = (start + batch).min(a.len());
        for i in start..end {
            for (q, keys) in [(&a[i], b), (&b[i], a)] {
                let mut best = start;
                let mut best_s = f64::NEG_INFINITY;
                for (j, key) in keys.iter().enumerate().take(end).skip(start) {
                    let s = dot(q, key);
                    if s > best_s {
                        best_s = s;
                        best = j;
                    }
                }
                hits += usize::from(best == i);
                total += 1;
            }
        }
    }
    Ok(hits as f64 / total as f64)
}
