//! Slide bundles: `manifest.toml`, `coords.tsv` and `features.f32` in one
//! directory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_text, tsv_rows};
use crate::error::{CareError, Result};
use crate::region::{Anchor, PatchSet};
use crate::tensor::{sha256, Tensor};

pub const MANIFEST: &str = "manifest.toml";
pub const COORDS: &str = "coords.tsv";
pub const FEATURES: &str = "features.f32";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideManifest {
    pub slide_id: String,
    pub n: usize,
    pub d: usize,
    /// Patch edge length in pixels.
    pub patch_size: u32,
    pub magnification: String,
    pub extractor: String,
    /// Hex sha256 of `features.f32`.
    pub checksum: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes a bundle; `n`, `d` and the checksum are filled in from `patches`.
pub fn write_slide_bundle(dir: &Path, manifest: &SlideManifest, patches: &PatchSet<f32>) -> Result<SlideManifest> {
    fs::create_dir_all(dir).map_err(|e| CareError::io(dir, e))?;
    let mut bytes = Vec::with_capacity(patches.len() * patches.dim() * 4);
    for v in patches.features().data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let m = SlideManifest {
        n: patches.len(),
        d: patches.dim(),
        checksum: hex(&sha256(&bytes)),
        ..manifest.clone()
    };
    let mut coords = String::from("u\tv\n");
    for a in patches.anchors() {
        coords.push_str(&format!("{}\t{}\n", a.u, a.v));
    }
    let write = |name: &str, data: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, data).map_err(|e| CareError::io(p, e))
    };
    write(FEATURES, &bytes)?;
    write(COORDS, coords.as_bytes())?;
    write(MANIFEST, toml::to_string(&m).expect("manifest serializes").as_bytes())?;
    Ok(m)
}

pub fn read_manifest(dir: &Path) -> Result<SlideManifest> {
    let path = dir.join(MANIFEST);
    let text = read_text(&path)?;
    toml::from_str(&text).map_err(|e| CareError::data(&path, None, e.to_string()))
}

/// Loads and validates a bundle.
pub fn load_slide_bundle(dir: &Path) -> Result<(SlideManifest, PatchSet<f32>)> {
    let m = read_manifest(dir)?;
    let cpath = dir.join(COORDS);
    let text = read_text(&cpath)?;
    let mut anchors = Vec::with_capacity(m.n);
    for (row, fields) in tsv_rows(&text, &cpath, &["u", "v"])? {
        let parse = |s: &str| {
            s.parse::<i64>()
                .map_err(|_| CareError::data(&cpath, Some(row), format!("coordinate {s:?} is not an integer")))
        };
        anchors.push(Anchor::new(parse(fields[0])?, parse(fields[1])?));
    }
    let fpath = dir.join(FEATURES);
    let bytes = fs::read(&fpath).map_err(|e| CareError::io(&fpath, e))?;
    if bytes.len() % 4 != 0 || m.d == 0 || (bytes.len() / 4) % m.d != 0 {
        return Err(CareError::data(
            &fpath,
            None,
            format!("{} bytes is not a whole number of {}-float rows", bytes.len(), m.d),
        ));
    }
    let rows = bytes.len() / 4 / m.d;
    if rows != anchors.len() || rows != m.n {
        return Err(CareError::data(
            dir,
            None,
            format!(
                "length mismatch: manifest n = {}, coords rows = {}, feature rows = {rows}",
                m.n,
                anchors.len()
            ),
        ));
    }
    let sum = hex(&sha256(&bytes));
    if sum != m.checksum {
        return Err(CareError::data(
            &fpath,
            None,
            format!("checksum mismatch: manifest {}, file {sum}", m.checksum),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(CareError::data(&fpath, Some(i / m.d + 1), "non-finite feature value"));
    }
    let patches = PatchSet::new(anchors, Tensor::matrix(rows, m.d, data)?).map_err(|e| match e {
        CareError::Contract(detail) => CareError::data(&cpath, None, detail),
        e => e,
    })?;
    Ok((m, patches))
}
