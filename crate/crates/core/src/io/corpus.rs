//! A corpus directory: `slides/<id>/` bundles plus optional `rna.tsv`,
//! `protein.tsv`, `pairing.tsv` and `labels.tsv`.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use super::bundle::{load_slide_bundle, write_slide_bundle, SlideManifest};
use super::tables::{
    read_labels, read_pairing, read_profiles, write_labels, write_pairing, write_profiles, LabelRow, ProfileTable,
};
use crate::encoders::{Modality, MolecularProfile};
use crate::error::{CareError, Result};
use crate::region::PatchSet;
use crate::synth::SynthCorpus;

#[derive(Clone, Debug)]
pub struct CorpusSlide {
    pub manifest: SlideManifest,
    pub patches: PatchSet<f32>,
}

impl CorpusSlide {
    pub fn id(&self) -> &str {
        &self.manifest.slide_id
    }
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    /// Sorted by slide id.
    pub slides: Vec<CorpusSlide>,
    pub rna: Option<ProfileTable>,
    pub protein: Option<ProfileTable>,
    pub pairing: BTreeMap<String, String>,
    pub labels: Vec<LabelRow>,
}

impl Corpus {
    pub fn table(&self, m: Modality) -> Option<&ProfileTable> {
        match m {
            Modality::Rna => self.rna.as_ref(),
            Modality::Protein => self.protein.as_ref(),
        }
    }

    /// `(slide index, profile)` for every slide with a paired profile of modality `m`.
    pub fn pairs(&self, m: Modality) -> Result<Vec<(usize, MolecularProfile)>> {
        let table = self
            .table(m)
            .ok_or_else(|| CareError::Config(format!("corpus has no {m} profiles")))?;
        let mut out = Vec::new();
        for (i, s) in self.slides.iter().enumerate() {
            if let Some(p) = self.pairing.get(s.id()).and_then(|sample| table.profiles.get(sample)) {
                out.push((i, p.clone()));
            }
        }
        if out.is_empty() {
            return Err(CareError::Config(format!("no slide is paired with a {m} profile")));
        }
        Ok(out)
    }
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let sdir = dir.join("slides");
    let mut dirs: Vec<_> = std::fs::read_dir(&sdir)
        .map_err(|e| CareError::io(&sdir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CareError::data(&sdir, None, "no slide bundles"));
    }
    let mut slides = dirs
        .par_iter()
        .map(|d| load_slide_bundle(d).map(|(manifest, patches)| CorpusSlide { manifest, patches }))
        .collect::<Result<Vec<_>>>()?;
    slides.sort_by(|a, b| a.manifest.slide_id.cmp(&b.manifest.slide_id));
    let optional = |name: &str| {
        let p = dir.join(name);
        p.exists().then_some(p)
    };
    let rna = optional("rna.tsv").map(|p| read_profiles(&p)).transpose()?;
    let protein = optional("protein.tsv").map(|p| read_profiles(&p)).transpose()?;
    for (t, want) in [(&rna, Modality::Rna), (&protein, Modality::Protein)] {
        if let Some(t) = t {
            if t.modality != want {
                return Err(CareError::data(
                    dir.join(format!("{want}.tsv")),
                    Some(1),
                    format!("file holds {} profiles", t.modality),
                ));
            }
        }
    }
    let pairing = optional("pairing.tsv").map(|p| read_pairing(&p)).transpose()?.unwrap_or_default();
    let labels = optional("labels.tsv").map(|p| read_labels(&p)).transpose()?.unwrap_or_default();
    Ok(Corpus {
        slides,
        rna,
        protein,
        pairing,
        labels,
    })
}

/// Writes a synthetic corpus in the directory layout read by [`load_corpus`].
pub fn write_corpus(dir: &Path, c: &SynthCorpus) -> Result<()> {
    let mut pairing = BTreeMap::new();
    let mut rna = BTreeMap::new();
    let mut protein = BTreeMap::new();
    let mut labels = Vec::with_capacity(c.slides.len());
    for (i, s) in c.slides.iter().enumerate() {
        let m = SlideManifest {
            slide_id: s.id.clone(),
            n: 0,
            d: 0,
            patch_size: 256,
            magnification: "20x".into(),
            extractor: "synthetic".into(),
            checksum: String::new(),
        };
        write_slide_bundle(&dir.join("slides").join(&s.id), &m, &s.patches)?;
        pairing.insert(s.id.clone(), s.sample.clone());
        rna.insert(s.sample.clone(), c.rna[i].clone());
        protein.insert(s.sample.clone(), c.protein[i].clone());
        labels.push(LabelRow {
            slide_id: s.id.clone(),
            label: s.label,
            time: s.time,
            event: s.event,
        });
    }
    write_profiles(
        &dir.join("rna.tsv"),
        &ProfileTable {
            modality: Modality::Rna,
            profiles: rna,
        },
    )?;
    write_profiles(
        &dir.join("protein.tsv"),
        &ProfileTable {
            modality: Modality::Protein,
            profiles: protein,
        },
    )?;
    write_pairing(&dir.join("pairing.tsv"), &pairing)?;
    write_labels(&dir.join("labels.tsv"), &labels)
}
