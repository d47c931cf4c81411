//! Synthetic corpora: blob-shaped tissue layouts with per-type feature
//! prototypes and molecular profiles driven by a latent code that is only
//! visible in one tissue type's patches.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::{Modality, MolecularProfile};
use crate::error::{CareError, Result};
use crate::region::{Anchor, PatchSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub slides: usize,
    pub dim: usize,
    pub min_patches: usize,
    pub max_patches: usize,
    pub max_blobs: usize,
    pub tissue_types: usize,
    pub latent_dim: usize,
    /// Scale of the latent code in signal-bearing patches.
    pub signal: f64,
    pub noise: f64,
    pub rna_genes: usize,
    pub protein_count: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            slides: 200,
            dim: 32,
            min_patches: 48,
            max_patches: 160,
            max_blobs: 3,
            tissue_types: 4,
            latent_dim: 4,
            signal: 1.0,
            noise: 0.3,
            rna_genes: 48,
            protein_count: 32,
            classes: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CareError::Config(format!("synth: {m}")));
        if self.slides == 0 || self.dim == 0 || self.latent_dim == 0 {
            return bad("slides, dim and latent_dim must be positive");
        }
        if self.min_patches == 0 || self.min_patches > self.max_patches {
            return bad("need 0 < min_patches <= max_patches");
        }
        if self.max_blobs == 0 || self.tissue_types == 0 {
            return bad("max_blobs and tissue_types must be positive");
        }
        if self.rna_genes == 0 || self.protein_count == 0 || self.classes < 2 {
            return bad("need genes, proteins and at least two classes");
        }
        if !(self.noise >= 0.0 && self.signal >= 0.0) {
            return bad("noise and signal must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthSlide {
    pub id: String,
    pub sample: String,
    pub patches: PatchSet<f32>,
    /// Tissue type of each patch; type 0 carries the latent code.
    pub tissue: Vec<usize>,
    pub latent: Vec<f64>,
    pub label: usize,
    pub time: f64,
    pub event: bool,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub slides: Vec<SynthSlide>,
    pub rna: Vec<MolecularProfile>,
    pub protein: Vec<MolecularProfile>,
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = Normal::new(0.0, scale).expect("positive scale");
    (0..rows).map(|_| (0..cols).map(|_| n.sample(rng)).collect()).collect()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// Blob layout with `n` distinct anchors. Blob 0 is always the signal type.
fn layout(n: usize, blobs: usize, rng: &mut impl Rng) -> (Vec<Anchor>, Vec<usize>) {
    let spread = (n as f64 / blobs as f64).sqrt() * 0.6 + 1.0;
    let extent = (spread * 4.0 * blobs as f64) as i64 + 8;
    let centers: Vec<(f64, f64)> = (0..blobs)
        .map(|_| (rng.random_range(0..extent) as f64, rng.random_range(0..extent) as f64))
        .collect();
    let jitter = Normal::new(0.0, spread).expect("positive spread");
    let mut seen = HashSet::new();
    let mut anchors = Vec::with_capacity(n);
    let mut blob = Vec::with_capacity(n);
    let mut b = 0;
    while anchors.len() < n {
        let (cu, cv) = centers[b % blobs];
        let a = Anchor::new(
            (cu + jitter.sample(rng)).round() as i64,
            (cv + jitter.sample(rng)).round() as i64,
        );
        if seen.insert(a) {
            anchors.push(a);
            blob.push(b % blobs);
        }
        b += 1;
    }
    (anchors, blob)
}

/// Generates a corpus. Every slide has one signal blob whose patches carry
/// `M·h`; RNA is `C·h` over a fixed gene panel and protein abundance is
/// `softplus(D·h)` reduced to the top entries. Labels are the argmax of the
/// first `classes` latent coordinates; survival time decays with `h₀`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let q = cfg.latent_dim;
    let protos = gaussian_matrix(cfg.tissue_types, cfg.dim, 1.0, &mut rng);
    let mix = gaussian_matrix(cfg.dim, q, cfg.signal / (q as f64).sqrt(), &mut rng);
    let rna_load = gaussian_matrix(cfg.rna_genes, q, 1.0, &mut rng);
    let prot_load = gaussian_matrix(cfg.protein_count, q, 1.0, &mut rng);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("positive noise");

    let mut slides = Vec::with_capacity(cfg.slides);
    let mut rna = Vec::with_capacity(cfg.slides);
    let mut protein = Vec::with_capacity(cfg.slides);
    for s in 0..cfg.slides {
        let h: Vec<f64> = (0..q).map(|_| std.sample(&mut rng)).collect();
        let n = rng.random_range(cfg.min_patches..=cfg.max_patches);
        let blobs = rng.random_range(1..=cfg.max_blobs.min(n));
        let (anchors, blob) = layout(n, blobs, &mut rng);
        let blob_type: Vec<usize> = (0..blobs)
            .map(|b| if b == 0 { 0 } else { rng.random_range(0..cfg.tissue_types) })
            .collect();
        let shift = mat_vec(&mix, &h);
        let tissue: Vec<usize> = blob.iter().map(|&b| blob_type[b]).collect();
        let mut data = Vec::with_capacity(n * cfg.dim);
        for &t in &tissue {
            for k in 0..cfg.dim {
                let signal = if t == 0 { shift[k] } else { 0.0 };
                let x = protos[t][k] + signal + if cfg.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push(x as f32);
            }
        }
        let patches = PatchSet::new(anchors, Tensor::matrix(n, cfg.dim, data)?)?;

        let label = (0..cfg.classes.min(q))
            .max_by(|&a, &b| h[a].total_cmp(&h[b]).then(b.cmp(&a)))
            .expect("at least one class");
        let time = (1.0 - 0.8 * h[0] + 0.2 * std.sample(&mut rng)).exp() * 12.0;
        let event = rng.random_bool(0.7);

        let expr: Vec<f64> = mat_vec(&rna_load, &h)
            .into_iter()
            .map(|v| v + 0.1 * std.sample(&mut rng))
            .collect();
        rna.push(MolecularProfile::new(Modality::Rna, (0..cfg.rna_genes as u32).collect(), expr)?);
        let abundance: Vec<f64> = mat_vec(&prot_load, &h)
            .into_iter()
            .map(|v| {
                let x = v + 0.1 * std.sample(&mut rng);
                x.max(0.0) + (-x.abs()).exp().ln_1p()
            })
            .collect();
        protein.push(MolecularProfile::new(
            Modality::Protein,
            (0..cfg.protein_count as u32).collect(),
            abundance,
        )?);
        slides.push(SynthSlide {
            id: format!("slide_{s:04}"),
            sample: format!("sample_{s:04}"),
            patches,
            tissue,
            latent: h,
            label,
            time,
            event,
        });
    }
    Ok(SynthCorpus { slides, rna, protein })
}
