//! Molecular profiles, slide↔sample pairing and downstream labels.

use std::collections::BTreeMap;
use std::path::Path;

use super::{parse_field, read_text, tsv_rows, write_text};
use crate::encoders::{Modality, MolecularProfile};
use crate::error::{CareError, Result};

const PROFILE_HEADER: [&str; 3] = ["sample_id", "entity_id", "value"];
const PAIRING_HEADER: [&str; 2] = ["slide_id", "sample_id"];
const LABEL_HEADER: [&str; 4] = ["slide_id", "label", "time", "event"];

/// One modality's profiles keyed by sample id.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileTable {
    pub modality: Modality,
    pub profiles: BTreeMap<String, MolecularProfile>,
}

/// Writes `# modality: <m>` followed by one row per (sample, entity).
pub fn write_profiles(path: &Path, table: &ProfileTable) -> Result<()> {
    let mut s = format!("# modality: {}\n{}\n", table.modality, PROFILE_HEADER.join("\t"));
    for (sample, p) in &table.profiles {
        if p.modality != table.modality {
            return Err(CareError::contract(format!("{} profile in a {} table", p.modality, table.modality)));
        }
        for (id, v) in p.ids.iter().zip(&p.values) {
            s.push_str(&format!("{sample}\t{id}\t{v:?}\n"));
        }
    }
    write_text(path, &s)
}

pub fn read_profiles(path: &Path) -> Result<ProfileTable> {
    let text = read_text(path)?;
    let first = text.lines().next().unwrap_or_default();
    let modality: Modality = first
        .strip_prefix("# modality:")
        .ok_or_else(|| CareError::data(path, Some(1), "first line must be `# modality: rna|protein`"))?
        .trim()
        .parse()
        .map_err(|e: CareError| CareError::data(path, Some(1), e.to_string()))?;
    let mut rows: BTreeMap<String, (Vec<u32>, Vec<f64>, usize)> = BTreeMap::new();
    for (row, f) in tsv_rows(&text, path, &PROFILE_HEADER)? {
        let id: u32 = parse_field(f[1], path, row, "entity id")?;
        let v: f64 = parse_field(f[2], path, row, "value")?;
        if !v.is_finite() {
            return Err(CareError::data(path, Some(row), "non-finite expression value"));
        }
        let e = rows.entry(f[0].to_string()).or_insert((Vec::new(), Vec::new(), row));
        e.0.push(id);
        e.1.push(v);
    }
    let mut profiles = BTreeMap::new();
    for (sample, (ids, values, row)) in rows {
        let p = MolecularProfile::new(modality, ids, values)
            .map_err(|e| CareError::data(path, Some(row), format!("sample {sample}: {e}")))?;
        profiles.insert(sample, p);
    }
    Ok(ProfileTable { modality, profiles })
}

pub fn write_pairing(path: &Path, pairs: &BTreeMap<String, String>) -> Result<()> {
    let mut s = format!("{}\n", PAIRING_HEADER.join("\t"));
    for (slide, sample) in pairs {
        s.push_str(&format!("{slide}\t{sample}\n"));
    }
    write_text(path, &s)
}

/// Slide id → sample id.
pub fn read_pairing(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = read_text(path)?;
    let mut out = BTreeMap::new();
    for (row, f) in tsv_rows(&text, path, &PAIRING_HEADER)? {
        if out.insert(f[0].to_string(), f[1].to_string()).is_some() {
            return Err(CareError::data(path, Some(row), format!("slide {} paired twice", f[0])));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelRow {
    pub slide_id: String,
    pub label: usize,
    pub time: f64,
    pub event: bool,
}

pub fn write_labels(path: &Path, rows: &[LabelRow]) -> Result<()> {
    let mut s = format!("{}\n", LABEL_HEADER.join("\t"));
    for r in rows {
        s.push_str(&format!("{}\t{}\t{:?}\t{}\n", r.slide_id, r.label, r.time, u8::from(r.event)));
    }
    write_text(path, &s)
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRow>> {
    let text = read_text(path)?;
    tsv_rows(&text, path, &LABEL_HEADER)?
        .into_iter()
        .map(|(row, f)| {
            let time: f64 = parse_field(f[2], path, row, "time")?;
            if !(time > 0.0 && time.is_finite()) {
                return Err(CareError::data(path, Some(row), "survival time must be positive"));
            }
            let event = match f[3] {
                "0" => false,
                "1" => true,
                other => return Err(CareError::data(path, Some(row), format!("event {other:?} is not 0 or 1"))),
            };
            Ok(LabelRow {
                slide_id: f[0].to_string(),
                label: parse_field(f[1], path, row, "label")?,
                time,
                event,
            })
        })
        .collect()
}
