//! Region sampling and focal-input construction.

mod focal;
mod slices;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use focal::{
    build_focal_input, load_rgb, BlobStore, DatasetGeometry, FocalHeader, FocalInput, FocalManifest, FocalRecord, FocalTransform,
    GeometryConfig,
};
pub use slices::{resolve_nodule_regions, select_slice, LoadedVolume, NoduleRegion, Reading, SliceSelection, TiebreakReason};

use crate::geometry::GeometryError;
use crate::manifest::{ImageRecord, RegionRecord};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("scan {scan_id}: unknown nodule {nodule_id}")]
    UnknownNodule { scan_id: String, nodule_id: String },
    #[error("scan {scan_id}: nodule {nodule_id} has no nonzero mask on any slice")]
    EmptyNodule { scan_id: String, nodule_id: String },
    #[error("image {path}: {message}")]
    Image { path: String, message: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("geometry config {path}: {message}")]
    Config { path: String, message: String },
    #[error("invalid sampling policy: {0}")]
    Policy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratifyBy {
    #[default]
    PathologyLabel,
    AnatomicalSite,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingPolicy {
    pub max_regions: usize,
    pub seed: u64,
    pub stratify_by: StratifyBy,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self { max_regions: 5, seed: 0, stratify_by: StratifyBy::PathologyLabel }
    }
}

impl SamplingPolicy {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.max_regions == 0 {
            return Err(SamplerError::Policy("max_regions must be at least 1".into()));
        }
        Ok(())
    }

    pub fn stratum_of(&self, region: &RegionRecord) -> String {
        match self.stratify_by {
            StratifyBy::PathologyLabel => region.pathology_labels.iter().cloned().collect::<Vec<_>>().join("+"),
            StratifyBy::AnatomicalSite => region.anatomical_site.clone().unwrap_or_default(),
        }
    }
}

/// Up to `max_regions` regions of `rec`. When there are more, strata are
/// visited in lexicographic order, one region each per round; membership
/// order inside a stratum is a seeded shuffle.
pub fn sample_regions(rec: &ImageRecord, policy: &SamplingPolicy) -> Vec<RegionRecord> {
    let cap = policy.max_regions.max(1);
    if rec.regions.len() <= cap {
        return rec.regions.clone();
    }
    let mut strata: BTreeMap<String, Vec<&RegionRecord>> = BTreeMap::new();
    for r in &rec.regions {
        strata.entry(policy.stratum_of(r)).or_default().push(r);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
    }
    let mut picked = Vec::with_capacity(cap);
    let mut round = 0;
    while picked.len() < cap {
        for members in strata.values() {
            if picked.len() == cap {
                break;
            }
            if let Some(r) = members.get(round) {
                picked.push((*r).clone());
            }
        }
        round += 1;
    }
    picked
}
