use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use care_core::config::{CareConfig, Profile};
use care_core::encoders::Modality;
use care_core::eval::{default_repeats, monte_carlo_cv, write_results, CvConfig, Head, TaskSpec};
use care_core::io::{
    load_corpus, load_slide_bundle, region_map, roi_table, write_assignment, write_corpus, write_embedding,
    write_region_map, EmbeddingFile,
};
use care_core::model::CareEncoder;
use care_core::pretrain::{encoder_from_checkpoint, run_stage1, run_stage2};
use care_core::synth::{generate, SynthConfig};
use care_core::tensor::load_checkpoint;
use care_core::{CareError, ParamStore, PatchSet};

#[derive(Parser, Debug)]
#[command(name = "care", version, about = "Adaptive-region slide encoder")]
struct Cli {
    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tile a slide into subregions, grow adaptive regions and export the assignment.
    Partition {
        bundle: PathBuf,
        /// Subregion window side, in patches.
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        /// Trained weights; without them regions are grown from a seeded random init.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Slide and ROI embeddings for one bundle or every slide of a corpus.
    Encode {
        /// A slide bundle, or a corpus directory (then --out is a directory).
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the per-patch region map (a directory for corpora).
        #[arg(long)]
        map: Option<PathBuf>,
    },
    /// Self-distillation pretraining of the slide encoder.
    PretrainStage1 {
        #[arg(long)]
        config: PathBuf,
    },
    /// Contrastive alignment with one molecular modality.
    PretrainStage2 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = ["rna", "protein"])]
        modality: String,
    },
    /// Print the ROI id and the per-region weight table.
    Roi {
        bundle: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Monte Carlo cross-validated probe on frozen embeddings.
    Probe {
        #[arg(long)]
        task: PathBuf,
        #[arg(long, value_parser = ["lr", "knn", "survival"])]
        head: String,
        /// Defaults to 5 with a validation split, 50 without.
        #[arg(long)]
        repeats: Option<usize>,
        /// Results TSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic corpus with planted slide/profile structure.
    Synth {
        #[arg(long, default_value_t = 200)]
        slides: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log_level).format_timestamp(None).init();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<CareError>()) {
        Some(c) if c.is_numeric() => 3,
        Some(c) if c.is_data() => 2,
        Some(CareError::Config(_)) | None => 1,
        Some(_) => 2,
    }
}

fn load_config(path: Option<&Path>) -> Result<CareConfig> {
    match path {
        Some(p) => Ok(CareConfig::load(p)?),
        None => Ok(CareConfig::profile(Profile::Desk)),
    }
}

fn check_width(cfg: &CareConfig, patches: &PatchSet<f32>, bundle: &Path) -> Result<()> {
    if patches.dim() != cfg.model.d_in {
        return Err(CareError::Config(format!(
            "{} has {}-dimensional features but the model expects d_in = {}",
            bundle.display(),
            patches.dim(),
            cfg.model.d_in
        ))
        .into());
    }
    Ok(())
}

fn encoder(cfg: &CareConfig, ckpt: &Path) -> Result<(CareEncoder, ParamStore<f32>)> {
    let c = load_checkpoint(ckpt)?;
    encoder_from_checkpoint(cfg, &c).with_context(|| format!("loading {}", ckpt.display()))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Partition {
            bundle,
            k,
            out,
            ckpt,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let (_, patches) = load_slide_bundle(&bundle)?;
            check_width(&cfg, &patches, &bundle)?;
            let (mut enc, store) = match ckpt {
                Some(p) => encoder(&cfg, &p)?,
                None => {
                    log::warn!("no checkpoint given; growing regions with randomly initialized weights");
                    let mut store = ParamStore::new();
                    let enc = CareEncoder::new(&mut store, "wsi", &cfg.model, &mut ChaCha8Rng::seed_from_u64(0))?;
                    (enc, store)
                }
            };
            // The window size does not change any parameter shape.
            enc.cfg.window = k;
            enc.cfg.validate()?;
            let (_, fwd) = enc.embed(&store, &patches)?;
            write_assignment(&out, patches.anchors(), &fwd.grid, &fwd.assignment)?;
            println!(
                "{} patches, {} subregions, {} regions -> {}",
                patches.len(),
                fwd.grid.len(),
                fwd.assignment.regions.len(),
                out.display()
            );
        }
        Command::Encode {
            input,
            ckpt,
            out,
            config,
            map,
        } => {
            let cfg = load_config(config.as_deref())?;
            let (enc, store) = encoder(&cfg, &ckpt)?;
            let encode_one = |id: &str, patches: &PatchSet<f32>, out: &Path, map: Option<&Path>| -> Result<()> {
                let (emb, fwd) = enc.embed(&store, patches).with_context(|| format!("encoding {id}"))?;
                write_embedding(out, &EmbeddingFile::from_embedding(&emb))?;
                if let Some(m) = map {
                    write_region_map(m, &region_map(patches.anchors(), &fwd.assignment, &emb)?)?;
                }
                Ok(())
            };
            if input.join("slides").is_dir() {
                let corpus = load_corpus(&input)?;
                for s in &corpus.slides {
                    check_width(&cfg, &s.patches, &input)?;
                    let m = map.as_ref().map(|d| d.join(format!("{}.tsv", s.id())));
                    encode_one(s.id(), &s.patches, &out.join(format!("{}.bin", s.id())), m.as_deref())?;
                }
                println!("encoded {} slides -> {}", corpus.slides.len(), out.display());
            } else {
                let (manifest, patches) = load_slide_bundle(&input)?;
                check_width(&cfg, &patches, &input)?;
                encode_one(&manifest.slide_id, &patches, &out, map.as_deref())?;
                println!("encoded {} -> {}", manifest.slide_id, out.display());
            }
        }
        Command::PretrainStage1 { config } => {
            let cfg = CareConfig::load(&config)?;
            let corpus = load_corpus(&cfg.run.corpus)?;
            std::fs::create_dir_all(&cfg.run.out_dir)
                .with_context(|| format!("creating {}", cfg.run.out_dir.display()))?;
            let mut log = log_file(&cfg.run.out_dir.join("stage1_log.jsonl"))?;
            let s = run_stage1(&cfg, &corpus, &mut log)?;
            log.flush()?;
            println!(
                "stage 1: {} steps ({} skipped), final loss {:.6} -> {}",
                s.steps,
                s.skipped,
                s.last_total,
                s.checkpoint.display()
            );
        }
        Command::PretrainStage2 { config, modality } => {
            let cfg = CareConfig::load(&config)?;
            let m: Modality = modality.parse()?;
            let corpus = load_corpus(&cfg.run.corpus)?;
            std::fs::create_dir_all(&cfg.run.out_dir)
                .with_context(|| format!("creating {}", cfg.run.out_dir.display()))?;
            let mut log = log_file(&cfg.run.out_dir.join(format!("stage2_{m}_log.jsonl")))?;
            let s = run_stage2(&cfg, &corpus, m, &mut log)?;
            log.flush()?;
            println!(
                "stage 2 ({m}): {} steps ({} skipped), final loss {:.6} -> {}",
                s.steps,
                s.skipped,
                s.last_total,
                s.checkpoint.display()
            );
        }
        Command::Roi { bundle, ckpt, config } => {
            let cfg = load_config(config.as_deref())?;
            let (_, patches) = load_slide_bundle(&bundle)?;
            check_width(&cfg, &patches, &bundle)?;
            let (enc, store) = encoder(&cfg, &ckpt)?;
            let (emb, _) = enc.embed(&store, &patches)?;
            print!("{}", roi_table(&emb));
        }
        Command::Probe {
            task,
            head,
            repeats,
            out,
        } => {
            let head: Head = head.parse()?;
            let spec = TaskSpec::load(&task)?;
            let data = spec.load_data(head)?;
            let mut cv = CvConfig {
                repeats: 0,
                test_fraction: spec.test_fraction,
                val_fraction: spec.val_fraction,
                seed: spec.seed,
            };
            cv.repeats = repeats.unwrap_or_else(|| default_repeats(cv.has_validation()));
            if cv.repeats == 0 {
                bail!(CareError::Config("--repeats must be positive".into()));
            }
            let rows = monte_carlo_cv(&data, head, &cv)?;
            match out {
                Some(p) => {
                    let mut w = log_file(&p)?;
                    write_results(&mut w, &spec.name, head, &rows, true)?;
                    w.flush()?;
                }
                None => write_results(&mut std::io::stdout().lock(), &spec.name, head, &rows, true)?,
            }
        }
        Command::Synth { slides, seed, out } => {
            let cfg = SynthConfig {
                slides,
                seed,
                ..SynthConfig::default()
            };
            let corpus = generate(&cfg)?;
            write_corpus(&out, &corpus)?;
            println!("wrote {} synthetic slides -> {}", corpus.slides.len(), out.display());
        }
    }
    Ok(())
}

fn log_file(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).map_err(|e| anyhow::Error::new(CareError::Io {
        path: path.to_path_buf(),
        source: e,
    }))?;
    Ok(BufWriter::new(f))
}
