//! Axial slice selection for CT nodules and derivation of nodule regions.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SamplerError;
use crate::geometry::{mask_to_bbox, BinaryMask};
use crate::manifest::{IssueKind, Manifest, RegionRecord, ValidationReport, VolumeRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiebreakReason {
    UniqueMax,
    Area,
    LowestIndex,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSelection {
    pub scan_id: String,
    pub nodule_id: String,
    pub slice_index: u32,
    pub agreement: u32,
    pub tiebreak_reason: TiebreakReason,
}

/// One reader's masks for one nodule, keyed by slice index.
#[derive(Debug, Clone, PartialEq)]
pub struct Reading {
    pub radiologist_id: String,
    pub slices: BTreeMap<u32, BinaryMask>,
}

/// Volume with every referenced mask decoded.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedVolume {
    pub scan_id: String,
    pub slice_count: u32,
    pub width: u32,
    pub height: u32,
    pub nodules: BTreeMap<String, Vec<Reading>>,
}

impl LoadedVolume {
    /// Decodes the mask files of `vol` relative to `root`.
    pub fn load(vol: &VolumeRecord, root: &Path) -> Result<Self, SamplerError> {
        let mut loaded = Self {
            scan_id: vol.scan_id.clone(),
            slice_count: vol.slice_count,
            width: vol.width,
            height: vol.height,
            nodules: BTreeMap::new(),
        };
        for ann in &vol.annotations {
            let mut slices: BTreeMap<u32, BinaryMask> = BTreeMap::new();
            for m in &ann.masks {
                let path = root.join(&m.mask_ref);
                let img = image::open(&path)
                    .map_err(|e| SamplerError::Image { path: path.display().to_string(), message: e.to_string() })?
                    .to_luma8();
                let mask = BinaryMask::from_gray(&img);
                if (mask.width(), mask.height()) != (vol.width, vol.height) {
                    return Err(SamplerError::Geometry(crate::geometry::GeometryError::ExtentMismatch {
                        mask_w: mask.width(),
                        mask_h: mask.height(),
                        image_w: vol.width,
                        image_h: vol.height,
                    }));
                }
                match slices.get_mut(&m.slice_index) {
                    Some(existing) => existing.union_with(&mask)?,
                    None => {
                        slices.insert(m.slice_index, mask);
                    }
                }
            }
            loaded.nodules.entry(ann.nodule_id.clone()).or_default().push(Reading { radiologist_id: ann.radiologist_id.clone(), slices });
        }
        Ok(loaded)
    }

    fn readings(&self, nodule_id: &str) -> Result<&[Reading], SamplerError> {
        match self.nodules.get(nodule_id) {
            Some(r) if !r.is_empty() => Ok(r),
            _ => Err(SamplerError::UnknownNodule { scan_id: self.scan_id.clone(), nodule_id: nodule_id.to_string() }),
        }
    }

    /// Union of every reader's mask for `nodule_id` on `slice`.
    pub fn union_mask(&self, nodule_id: &str, slice: u32) -> Result<BinaryMask, SamplerError> {
        let mut union = BinaryMask::new(self.width, self.height);
        for reading in self.readings(nodule_id)? {
            if let Some(m) = reading.slices.get(&slice) {
                union.union_with(m)?;
            }
        }
        Ok(union)
    }
}

/// Picks the slice on which the most readers marked the nodule. Ties go to
/// the largest union mask area, then to the lowest slice index.
pub fn select_slice(vol: &LoadedVolume, nodule_id: &str) -> Result<SliceSelection, SamplerError> {
    let readings = vol.readings(nodule_id)?;
    let mut agreement: BTreeMap<u32, u32> = BTreeMap::new();
    for reading in readings {
        for (&idx, mask) in &reading.slices {
            if idx < vol.slice_count && !mask.is_empty() {
                *agreement.entry(idx).or_default() += 1;
            }
        }
    }
    let best = agreement
        .values()
        .copied()
        .max()
        .ok_or_else(|| SamplerError::EmptyNodule { scan_id: vol.scan_id.clone(), nodule_id: nodule_id.to_string() })?;
    let tied: Vec<u32> = agreement.iter().filter(|(_, &a)| a == best).map(|(&i, _)| i).collect();

    let (slice_index, reason) = if let [only] = tied[..] {
        (only, TiebreakReason::UniqueMax)
    } else {
        let mut areas = Vec::with_capacity(tied.len());
        for &idx in &tied {
            areas.push((idx, vol.union_mask(nodule_id, idx)?.count()));
        }
        let top = areas.iter().map(|(_, a)| *a).max().expect("non-empty");
        let widest: Vec<u32> = areas.iter().filter(|(_, a)| *a == top).map(|(i, _)| *i).collect();
        // `tied` is ascending, so the first widest slice is the lowest index.
        (widest[0], if widest.len() == 1 { TiebreakReason::Area } else { TiebreakReason::LowestIndex })
    };
    Ok(SliceSelection {
        scan_id: vol.scan_id.clone(),
        nodule_id: nodule_id.to_string(),
        slice_index,
        agreement: best,
        tiebreak_reason: reason,
    })
}

/// Region derived from one nodule on its selected slice.
#[derive(Debug, Clone)]
pub struct NoduleRegion {
    pub image_id: String,
    pub region: RegionRecord,
    pub mask: BinaryMask,
    pub selection: SliceSelection,
}

/// Adds one region per nodule (tight box of the reader union on the selected
/// slice) to the matching slice record of `manifest`.
pub fn resolve_nodule_regions(
    manifest: &mut Manifest,
    volumes: &[LoadedVolume],
) -> Result<(Vec<NoduleRegion>, ValidationReport), SamplerError> {
    let mut report = ValidationReport::default();
    let mut by_slice: HashMap<(String, u32), usize> = HashMap::new();
    for (i, rec) in manifest.records.iter().enumerate() {
        if let Some(v) = &rec.volume_ref {
            by_slice.insert((v.scan_id.clone(), v.slice_index), i);
        }
    }
    let mut out = Vec::new();
    for vol in volumes {
        let Some(record) = manifest.volume(&vol.scan_id).cloned() else {
            report.push(&vol.scan_id, IssueKind::DanglingVolumeRef, "volume not in manifest");
            continue;
        };
        for nodule_id in vol.nodules.keys() {
            let selection = select_slice(vol, nodule_id)?;
            let mask = vol.union_mask(nodule_id, selection.slice_index)?;
            let bbox = mask_to_bbox(&mask)?;
            let Some(&idx) = by_slice.get(&(vol.scan_id.clone(), selection.slice_index)) else {
                report.push(
                    format!("{}/{nodule_id}", vol.scan_id),
                    IssueKind::MissingImage,
                    format!("selected slice {} has no image record", selection.slice_index),
                );
                continue;
            };
            let mut region = RegionRecord::new(format!("{}_{nodule_id}", vol.scan_id), bbox);
            if let Some(info) = record.nodule_info(nodule_id) {
                region.pathology_labels = info.pathology_labels.clone();
                region.attributes = info.attributes.clone();
            }
            region.extra.insert("slice_selection".into(), serde_json::to_value(&selection).expect("selection serializes"));
            let rec = &mut manifest.records[idx];
            rec.regions.retain(|r| r.region_id != region.region_id);
            rec.regions.push(region.clone());
            out.push(NoduleRegion { image_id: rec.image_id.clone(), region, mask, selection });
        }
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(w: u32, h: u32, pixels: u32) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| y * w + x < pixels)
    }

    fn volume(readers: &[(&str, &[(u32, u32)])]) -> LoadedVolume {
        let readings = readers
            .iter()
            .map(|(id, slices)| Reading {
                radiologist_id: id.to_string(),
                slices: slices.iter().map(|&(s, px)| (s, dot(16, 16, px))).collect(),
            })
            .collect();
        LoadedVolume { scan_id: "scan".into(), slice_count: 64, width: 16, height: 16, nodules: [("n1".to_string(), readings)].into() }
    }

    #[test]
    fn consensus_slice_wins() {
        let v = volume(&[
            ("a", &[(10, 4), (11, 4), (12, 4)]),
            ("b", &[(11, 4), (12, 4)]),
            ("c", &[(11, 4)]),
            ("d", &[(11, 4), (12, 4), (13, 4)]),
        ]);
        let s = select_slice(&v, "n1").unwrap();
        assert_eq!((s.slice_index, s.agreement, s.tiebreak_reason), (11, 4, TiebreakReason::UniqueMax));
    }

    #[test]
    fn single_reader_single_slice() {
        let s = select_slice(&volume(&[("a", &[(42, 3)])]), "n1").unwrap();
        assert_eq!((s.slice_index, s.agreement), (42, 1));
    }

    #[test]
    fn area_breaks_agreement_tie() {
        let v = volume(&[("a", &[(3, 80), (7, 120)]), ("b", &[(3, 80), (7, 120)]), ("c", &[(3, 80), (7, 120)])]);
        let s = select_slice(&v, "n1").unwrap();
        assert_eq!((s.slice_index, s.agreement, s.tiebreak_reason), (7, 3, TiebreakReason::Area));
    }

    #[test]
    fn equal_area_falls_back_to_lowest_index() {
        let v = volume(&[("a", &[(9, 5), (4, 5)])]);
        let s = select_slice(&v, "n1").unwrap();
        assert_eq!((s.slice_index, s.tiebreak_reason), (4, TiebreakReason::LowestIndex));
    }

    #[test]
    fn unknown_nodule_errors() {
        assert!(matches!(select_slice(&volume(&[("a", &[(1, 1)])]), "n9"), Err(SamplerError::UnknownNodule { .. })));
    }
}
