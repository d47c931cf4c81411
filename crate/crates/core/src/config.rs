//! Run configuration with `desk` and `paper` profiles.
//!
//! A config file names a profile and overrides any subset of its keys:
//!
//! ```toml
//! profile = "desk"
//! [stage1]
//! epochs = 10
//! [run]
//! corpus = "data/synth"
//! out_dir = "runs/a"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::{MolecularConfig, PROTEIN_TOP_N};
use crate::error::{CareError, Result};
use crate::model::{desk_model, paper_model, ModelConfig};
use crate::nn::AttentionBlockConfig;
use crate::pretrain::{AugmentConfig, PhaseConfig, Stage1Config, Stage2Config, SubWsiConfig};
use crate::tensor::{sha256, AdamW};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

/// Where training reads data and writes artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    /// Checkpoint to initialize from; defaults to the previous stage's output in `out_dir`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
    pub log_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CareConfig {
    pub profile: Profile,
    pub model: ModelConfig,
    pub molecular: MolecularConfig,
    pub subwsi: SubWsiConfig,
    pub augment: AugmentConfig,
    pub optimizer: AdamW,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub run: RunConfig,
}

impl CareConfig {
    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Desk => desk(),
            Profile::Paper => paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.molecular.validate()?;
        self.augment.validate()?;
        self.stage1.validate()?;
        self.stage2.rna.validate("stage2.rna")?;
        self.stage2.protein.validate("stage2.protein")?;
        if self.molecular.tower.dim == 0 {
            return Err(CareError::Config("molecular tower dim must be positive".into()));
        }
        if self.subwsi.eps <= 0.0 || self.subwsi.min_pts == 0 || self.subwsi.cap == 0 {
            return Err(CareError::Config("subwsi: eps, min_pts and cap must be positive".into()));
        }
        Ok(())
    }

    /// Parses a config: the `profile` key (default `desk`) picks the base and
    /// every other key overrides it.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut over: toml::Table = text.parse().map_err(|e| CareError::Config(format!("{e}")))?;
        let profile = match over.remove("profile") {
            None => Profile::Desk,
            Some(toml::Value::String(s)) => match s.as_str() {
                "desk" => Profile::Desk,
                "paper" => Profile::Paper,
                other => return Err(CareError::Config(format!("unknown profile {other:?}"))),
            },
            Some(v) => return Err(CareError::Config(format!("profile must be a string, got {v}"))),
        };
        let base = toml::Value::try_from(Self::profile(profile)).map_err(|e| CareError::Config(e.to_string()))?;
        let mut base = match base {
            toml::Value::Table(t) => t,
            _ => unreachable!("config serializes to a table"),
        };
        merge(&mut base, over, "")?;
        let cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| CareError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CareError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CareError::Config(m) => CareError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Hash of everything that determines the parameter layout.
    pub fn config_hash(&self) -> [u8; 32] {
        model_hash(&self.model, Some(&self.molecular))
    }
}

/// Hash of an architecture; stage-1 checkpoints hash the slide encoder only.
pub fn model_hash(model: &ModelConfig, molecular: Option<&MolecularConfig>) -> [u8; 32] {
    let mut s = toml::to_string(model).expect("model config is serializable");
    if let Some(m) = molecular {
        s.push_str(&toml::to_string(m).expect("molecular config is serializable"));
    }
    sha256(s.as_bytes())
}

fn merge(base: &mut toml::Table, over: toml::Table, path: &str) -> Result<()> {
    for (k, v) in over {
        let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o, &key)?,
            (Some(toml::Value::Table(_)), v) => {
                return Err(CareError::Config(format!("{key} must be a table, got {v}")));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    Ok(())
}

fn desk() -> CareConfig {
    let phase = |tower_lr: f64, freeze_epochs: usize| PhaseConfig {
        epochs: 60,
        batch_size: 16,
        warmup_epochs: 2,
        wsi_lr: 1e-3,
        wsi_min_lr: 1e-4,
        tower_lr,
        tower_min_lr: tower_lr / 10.0,
        other_lr: 2e-3,
        other_min_lr: 2e-4,
        weight_decay: 0.01,
        freeze_epochs,
        grad_accum: 1,
        dropout: 0.0,
        init_tau: 0.07,
        seed: 0,
    };
    CareConfig {
        profile: Profile::Desk,
        model: desk_model(),
        molecular: MolecularConfig {
            rna_vocab: 64,
            protein_vocab: 32,
            protein_top_n: PROTEIN_TOP_N,
            tower: AttentionBlockConfig {
                depth: 1,
                heads: 2,
                dim: 16,
                ffn_mult: 2,
                dropout: 0.0,
            },
        },
        subwsi: SubWsiConfig::default(),
        augment: AugmentConfig::default(),
        optimizer: AdamW::default(),
        stage1: Stage1Config {
            epochs: 200,
            batch_size: 8,
            warmup_epochs: 0,
            lr: 5e-4,
            min_lr: 5e-5,
            weight_decay: 0.04,
            weight_decay_end: 0.04,
            momentum: 0.99,
            momentum_end: 1.0,
            global_crops: 2,
            global_ratio: 0.9,
            local_crops: 6,
            local_ratio: 0.18,
            mask_ratio: 0.3,
            mask_variance: 0.15,
            student_temp: 0.1,
            teacher_temp: 0.04,
            teacher_temp_end: 0.04,
            teacher_temp_warmup_epochs: 0,
            center_momentum: 0.9,
            prototypes: 256,
            freeze_last_layer_epochs: 0,
            grad_accum: 1,
            rsl: true,
            seed: 0,
            checkpoint_every: 50,
        },
        stage2: Stage2Config {
            rna: phase(1e-3, 0),
            protein: phase(1e-3, 0),
        },
        run: RunConfig {
            corpus: PathBuf::from("data/synth"),
            out_dir: PathBuf::from("runs/desk"),
            init: None,
            log_every: 1,
        },
    }
}

fn paper() -> CareConfig {
    let model = paper_model();
    CareConfig {
        profile: Profile::Paper,
        molecular: MolecularConfig {
            rna_vocab: 3999,
            protein_vocab: 8192,
            protein_top_n: PROTEIN_TOP_N,
            tower: AttentionBlockConfig {
                depth: 12,
                heads: 8,
                dim: 512,
                ffn_mult: 4,
                dropout: 0.2,
            },
        },
        subwsi: SubWsiConfig::default(),
        augment: AugmentConfig::default(),
        optimizer: AdamW::default(),
        stage1: Stage1Config {
            epochs: 90,
            batch_size: 8 * 36,
            warmup_epochs: 30,
            lr: 1e-4,
            min_lr: 1e-6,
            weight_decay: 0.04,
            weight_decay_end: 0.4,
            momentum: 0.998,
            momentum_end: 1.0,
            global_crops: 2,
            global_ratio: 0.9,
            local_crops: 6,
            local_ratio: 0.18,
            mask_ratio: 0.3,
            mask_variance: 0.15,
            student_temp: 0.1,
            teacher_temp: 0.04,
            teacher_temp_end: 0.07,
            teacher_temp_warmup_epochs: 30,
            center_momentum: 0.9,
            prototypes: 8192,
            freeze_last_layer_epochs: 4,
            grad_accum: 1,
            rsl: true,
            seed: 0,
            checkpoint_every: 1000,
        },
        stage2: Stage2Config {
            rna: PhaseConfig {
                epochs: 150,
                batch_size: 8 * 6,
                warmup_epochs: 0,
                wsi_lr: 1e-5,
                wsi_min_lr: 1e-6,
                tower_lr: 5e-5,
                tower_min_lr: 1e-5,
                other_lr: 1e-4,
                other_min_lr: 1e-5,
                weight_decay: 0.01,
                freeze_epochs: 20,
                grad_accum: 1,
                dropout: 0.2,
                init_tau: 0.07,
                seed: 0,
            },
            protein: PhaseConfig {
                epochs: 30,
                batch_size: 8 * 10,
                warmup_epochs: 0,
                wsi_lr: 1e-5,
                wsi_min_lr: 1e-6,
                tower_lr: 1e-4,
                tower_min_lr: 5e-5,
                other_lr: 1e-4,
                other_min_lr: 1e-5,
                weight_decay: 0.01,
                freeze_epochs: 0,
                grad_accum: 2,
                dropout: 0.2,
                init_tau: 0.07,
                seed: 0,
            },
        },
        model,
        run: RunConfig {
            corpus: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/paper"),
            init: None,
            log_every: 10,
        },
    }
}
