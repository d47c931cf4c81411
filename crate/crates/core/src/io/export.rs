//! Partition exports, region maps, ROI tables and embedding files.

use std::path::Path;

use super::{parse_field, read_text, tsv_rows, write_text};
use crate::error::{CareError, Result};
use crate::region::{Anchor, RegionAssignment, SubregionGrid};
use crate::spf::SlideEmbedding;
use crate::tensor::Real;

const ASSIGNMENT_HEADER: [&str; 5] = ["u", "v", "subregion", "region", "w"];
const PATCH_HEADER: [&str; 4] = ["u", "v", "region", "omega"];
const REGION_HEADER: [&str; 5] = ["region", "size", "alpha", "beta", "omega"];

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentRow {
    pub anchor: Anchor,
    /// Window the patch lies in.
    pub subregion: usize,
    /// Window whose region the patch was assigned to.
    pub region: usize,
    /// `w` of the chosen candidate.
    pub w: f64,
}

pub fn write_assignment(path: &Path, anchors: &[Anchor], grid: &SubregionGrid, a: &RegionAssignment) -> Result<()> {
    if anchors.len() != a.n() {
        return Err(CareError::contract("assignment does not match the patch set"));
    }
    let mut s = format!("{}\n", ASSIGNMENT_HEADER.join("\t"));
    for (j, p) in anchors.iter().enumerate() {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:?}\n",
            p.u,
            p.v,
            grid.patch_window[j],
            a.chosen[j],
            a.chosen_w(j)
        ));
    }
    write_text(path, &s)
}

pub fn read_assignment(path: &Path) -> Result<Vec<AssignmentRow>> {
    let text = read_text(path)?;
    tsv_rows(&text, path, &ASSIGNMENT_HEADER)?
        .into_iter()
        .map(|(row, f)| {
            Ok(AssignmentRow {
                anchor: Anchor::new(parse_field(f[0], path, row, "u")?, parse_field(f[1], path, row, "v")?),
                subregion: parse_field(f[2], path, row, "subregion")?,
                region: parse_field(f[3], path, row, "region")?,
                w: parse_field(f[4], path, row, "w")?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchRegion {
    pub anchor: Anchor,
    pub region: usize,
    pub omega: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionSummary {
    pub region: usize,
    pub size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub omega: f64,
}

/// Per-patch region ids and fused weights plus a per-region summary.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMap {
    pub patches: Vec<PatchRegion>,
    pub regions: Vec<RegionSummary>,
}

impl RegionMap {
    /// Patch indices of each region, regions in id order.
    pub fn partition(&self) -> Vec<(usize, Vec<usize>)> {
        let mut out: Vec<(usize, Vec<usize>)> = self.regions.iter().map(|r| (r.region, Vec::new())).collect();
        for (j, p) in self.patches.iter().enumerate() {
            if let Some(e) = out.iter_mut().find(|(id, _)| *id == p.region) {
                e.1.push(j);
            }
        }
        out
    }
}

pub fn region_map<T: Real>(anchors: &[Anchor], a: &RegionAssignment, emb: &SlideEmbedding<T>) -> Result<RegionMap> {
    if anchors.len() != a.n() || emb.region_ids.len() != a.regions.len() {
        return Err(CareError::contract("assignment, anchors and fusion weights are not aligned"));
    }
    let pos = a.region_index_of();
    let patches = anchors
        .iter()
        .enumerate()
        .map(|(j, &anchor)| PatchRegion {
            anchor,
            region: emb.region_ids[pos[j]],
            omega: emb.omega[pos[j]].f64(),
        })
        .collect();
    let regions = (0..emb.region_ids.len())
        .map(|r| RegionSummary {
            region: emb.region_ids[r],
            size: emb.sizes[r],
            alpha: emb.alpha[r],
            beta: emb.beta[r].f64(),
            omega: emb.omega[r].f64(),
        })
        .collect();
    Ok(RegionMap { patches, regions })
}

fn region_rows(regions: &[RegionSummary]) -> String {
    let mut s = format!("{}\n", REGION_HEADER.join("\t"));
    for r in regions {
        s.push_str(&format!(
            "{}\t{}\t{:?}\t{:?}\t{:?}\n",
            r.region, r.size, r.alpha, r.beta, r.omega
        ));
    }
    s
}

pub fn write_region_map(path: &Path, map: &RegionMap) -> Result<()> {
    let mut s = format!("# patches\n{}\n", PATCH_HEADER.join("\t"));
    for p in &map.patches {
        s.push_str(&format!("{}\t{}\t{}\t{:?}\n", p.anchor.u, p.anchor.v, p.region, p.omega));
    }
    s.push_str("# regions\n");
    s.push_str(&region_rows(&map.regions));
    write_text(path, &s)
}

pub fn read_region_map(path: &Path) -> Result<RegionMap> {
    let text = read_text(path)?;
    let split = text
        .find("# regions")
        .ok_or_else(|| CareError::data(path, None, "missing `# regions` block"))?;
    if !text.starts_with("# patches") {
        return Err(CareError::data(path, Some(1), "missing `# patches` block"));
    }
    let offset = text[..split].lines().count();
    let patches = tsv_rows(&text[..split], path, &PATCH_HEADER)?
        .into_iter()
        .map(|(row, f)| {
            Ok(PatchRegion {
                anchor: Anchor::new(parse_field(f[0], path, row, "u")?, parse_field(f[1], path, row, "v")?),
                region: parse_field(f[2], path, row, "region")?,
                omega: parse_field(f[3], path, row, "omega")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let regions = tsv_rows(&text[split..], path, &REGION_HEADER)?
        .into_iter()
        .map(|(row, f)| {
            let row = row + offset;
            Ok(RegionSummary {
                region: parse_field(f[0], path, row, "region")?,
                size: parse_field(f[1], path, row, "size")?,
                alpha: parse_field(f[2], path, row, "alpha")?,
                beta: parse_field(f[3], path, row, "beta")?,
                omega: parse_field(f[4], path, row, "omega")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for (j, p) in patches.iter().enumerate() {
        if !regions.iter().any(|r| r.region == p.region) {
            return Err(CareError::data(
                path,
                Some(j + 3),
                format!("patch names region {} which has no summary row", p.region),
            ));
        }
    }
    Ok(RegionMap { patches, regions })
}

/// `roi <id> <omega>` followed by the per-region weight table.
pub fn roi_table<T: Real>(emb: &SlideEmbedding<T>) -> String {
    let r = emb.roi_position();
    let summary: Vec<RegionSummary> = (0..emb.region_ids.len())
        .map(|i| RegionSummary {
            region: emb.region_ids[i],
            size: emb.sizes[i],
            alpha: emb.alpha[i],
            beta: emb.beta[i].f64(),
            omega: emb.omega[i].f64(),
        })
        .collect();
    format!("roi\t{}\t{:?}\n{}", emb.roi, emb.omega[r].f64(), region_rows(&summary))
}

const EMB_MAGIC: &[u8; 8] = b"CAREEMB1";

/// Slide embedding and ROI feature as stored in `emb.bin`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingFile {
    pub roi: u32,
    pub z: Vec<f32>,
    pub roi_feature: Vec<f32>,
}

impl EmbeddingFile {
    pub fn from_embedding<T: Real>(emb: &SlideEmbedding<T>) -> Self {
        Self {
            roi: emb.roi as u32,
            z: emb.z.iter().map(|v| v.f64() as f32).collect(),
            roi_feature: emb.roi_feature.iter().map(|v| v.f64() as f32).collect(),
        }
    }
}

/// Layout: magic, `u32` d, `u32` ROI id, `d` floats of z, `d` floats of the ROI feature (all LE).
pub fn write_embedding(path: &Path, e: &EmbeddingFile) -> Result<()> {
    if e.z.len() != e.roi_feature.len() {
        return Err(CareError::contract("slide and ROI embeddings differ in width"));
    }
    let mut b = Vec::with_capacity(16 + 8 * e.z.len());
    b.extend_from_slice(EMB_MAGIC);
    b.extend_from_slice(&(e.z.len() as u32).to_le_bytes());
    b.extend_from_slice(&e.roi.to_le_bytes());
    for v in e.z.iter().chain(&e.roi_feature) {
        b.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|err| CareError::io(dir, err))?;
    }
    std::fs::write(path, b).map_err(|err| CareError::io(path, err))
}

pub fn read_embedding(path: &Path) -> Result<EmbeddingFile> {
    let b = std::fs::read(path).map_err(|e| CareError::io(path, e))?;
    if b.len() < 16 || &b[..8] != EMB_MAGIC {
        return Err(CareError::data(path, None, "not an embedding file"));
    }
    let word = |i: usize| u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]]);
    let d = word(8) as usize;
    let roi = word(12);
    if b.len() != 16 + 8 * d {
        return Err(CareError::data(
            path,
            None,
            format!("expected {} bytes for d = {d}, found {}", 16 + 8 * d, b.len()),
        ));
    }
    let floats: Vec<f32> = b[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(EmbeddingFile {
        roi,
        z: floats[..d].to_vec(),
        roi_feature: floats[d..].to_vec(),
    })
}
