//! On-disk formats. Every reader reports the file and 1-based row of the
//! first malformed line.

mod bundle;
mod corpus;
mod export;
mod tables;

use std::path::Path;

use crate::error::{CareError, Result};

pub use bundle::{load_slide_bundle, read_manifest, write_slide_bundle, SlideManifest, COORDS, FEATURES, MANIFEST};
pub use corpus::{load_corpus, write_corpus, Corpus, CorpusSlide};
pub use export::{
    read_assignment, read_embedding, read_region_map, region_map, roi_table, write_assignment, write_embedding,
    write_region_map, AssignmentRow, EmbeddingFile, RegionMap, RegionSummary, PatchRegion,
};
pub use tables::{
    read_labels, read_pairing, read_profiles, write_labels, write_pairing, write_profiles, LabelRow, ProfileTable,
};

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CareError::io(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CareError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CareError::io(path, e))
}

/// Data rows of a tab-separated table with the given header, as
/// `(1-based line number, fields)`. Blank lines and `#` comments are skipped.
pub(crate) fn tsv_rows<'a>(text: &'a str, path: &Path, header: &[&str]) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    let Some((hrow, h)) = lines.next() else {
        return Err(CareError::data(path, None, "missing header"));
    };
    let got: Vec<&str> = h.split('\t').collect();
    if got != header {
        return Err(CareError::data(
            path,
            Some(hrow),
            format!("expected header {:?}, found {got:?}", header.join("\t")),
        ));
    }
    lines
        .map(|(row, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != header.len() {
                return Err(CareError::data(
                    path,
                    Some(row),
                    format!("expected {} fields, found {}", header.len(), f.len()),
                ));
            }
            Ok((row, f))
        })
        .collect()
}

pub(crate) fn parse_field<T: std::str::FromStr>(s: &str, path: &Path, row: usize, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| CareError::data(path, Some(row), format!("{what} {s:?} does not parse")))
}
