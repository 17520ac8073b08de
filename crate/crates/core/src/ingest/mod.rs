//! Dataset adapters: raw annotation exports to canonical manifests.
//!
//! Adapters never panic on table content. Rows they reject are recorded in
//! the returned [`ValidationReport`] exactly once; only unreadable inputs
//! and structural corruption are hard errors.

mod lidc;
mod skincon;
mod vindr;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use lidc::{adapt_lidc, adapt_lidc_listing, LidcListing, LidcNodule, LidcReading, LidcScan, LidcSlice, LidcSliceMask};
pub use skincon::{adapt_skincon, adapt_skincon_reader, parse_concept_value};
pub use vindr::{adapt_vindr, adapt_vindr_reader};

use crate::manifest::{Manifest, ValidationReport};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("table {path}: {message}")]
    Table { path: String, message: String },
    #[error("scan listing {path}: {message}")]
    Listing { path: String, message: String },
    #[error("scan {scan_id}: dimension mismatch: {detail}")]
    DimensionMismatch { scan_id: String, detail: String },
    #[error("scan {scan_id}: cannot read mask {mask}: {message}")]
    UnreadableMask { scan_id: String, mask: String, message: String },
}

/// Output of every adapter.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub manifest: Manifest,
    pub report: ValidationReport,
}

/// Image located on disk for a given id: relative path plus pixel extent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbedImage {
    pub image_ref: String,
    pub width: u32,
    pub height: u32,
}

const IMAGE_EXTENSIONS: [&str; 2] = ["png", "PNG"];

/// Looks for `<dir>/<stem>.png` (or an explicit file name) and reads its header.
pub fn probe_image_file(dir: &Path, name: &str) -> Option<ProbedImage> {
    let candidates: Vec<PathBuf> = if Path::new(name).extension().is_some() {
        vec![PathBuf::from(name)]
    } else {
        IMAGE_EXTENSIONS.iter().map(|ext| PathBuf::from(format!("{name}.{ext}"))).collect()
    };
    candidates.into_iter().find_map(|rel| {
        let (width, height) = image::image_dimensions(dir.join(&rel)).ok()?;
        Some(ProbedImage { image_ref: rel.to_string_lossy().replace('\\', "/"), width, height })
    })
}

pub(crate) fn root_string(dir: &Path) -> Option<String> {
    Some(dir.to_string_lossy().into_owned()).filter(|s| !s.is_empty())
}
