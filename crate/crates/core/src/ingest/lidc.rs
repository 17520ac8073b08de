use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{root_string, IngestError, Ingested};
use crate::manifest::{
    AttributeMap, DatasetId, Extra, ImageRecord, IssueKind, Manifest, Modality, NoduleAnnotation, NoduleInfo, SliceMaskRef,
    ValidationReport, VolumeRecord, VolumeRef,
};
use crate::vocab::Vocabulary;

/// Pre-exported CT listing: axial slices already rendered to PNG and one
/// binary mask PNG per (reader, nodule, slice). Paths are relative to the
/// image root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidcListing {
    pub scans: Vec<LidcScan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidcScan {
    pub scan_id: String,
    pub width: u32,
    pub height: u32,
    pub slice_count: u32,
    pub slices: Vec<LidcSlice>,
    #[serde(default)]
    pub nodules: Vec<LidcNodule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidcSlice {
    pub index: u32,
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidcNodule {
    pub nodule_id: String,
    #[serde(default)]
    pub pathology_labels: BTreeSet<String>,
    #[serde(default)]
    pub attributes: AttributeMap,
    #[serde(default)]
    pub readings: Vec<LidcReading>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidcReading {
    pub radiologist_id: String,
    pub masks: Vec<LidcSliceMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidcSliceMask {
    pub slice_index: u32,
    pub mask: String,
}

pub fn adapt_lidc(listing_path: &Path, image_root: &Path, vocab: &Vocabulary) -> Result<Ingested, IngestError> {
    let text =
        std::fs::read_to_string(listing_path).map_err(|source| IngestError::Io { path: listing_path.display().to_string(), source })?;
    let listing: LidcListing = serde_json::from_str(&text)
        .map_err(|e| IngestError::Listing { path: listing_path.display().to_string(), message: e.to_string() })?;
    let mut ingested = adapt_lidc_listing(&listing, vocab, |rel| image::image_dimensions(image_root.join(rel)).map_err(|e| e.to_string()))?;
    ingested.manifest.header.image_root = root_string(image_root);
    Ok(ingested)
}

/// Listing-level adapter; `dims` reads the pixel extent of a relative path.
pub fn adapt_lidc_listing(
    listing: &LidcListing,
    vocab: &Vocabulary,
    dims: impl Fn(&str) -> Result<(u32, u32), String>,
) -> Result<Ingested, IngestError> {
    let mut manifest = Manifest::new(DatasetId::LidcIdri);
    let mut report = ValidationReport::default();

    for scan in &listing.scans {
        let sid = scan.scan_id.as_str();
        let extent = (scan.width, scan.height);
        let mut annotations = Vec::new();
        let mut nodules = Vec::new();
        for nodule in &scan.nodules {
            let nid = format!("{sid}/{}", nodule.nodule_id);
            if nodule.readings.is_empty() {
                report.push(nid, IssueKind::MissingAnnotation, "nodule has no radiologist annotation");
                continue;
            }
            let mut attributes = AttributeMap::new();
            for (name, state) in &nodule.attributes {
                if vocab.knows_attribute(name) {
                    attributes.insert(name.clone(), *state);
                } else {
                    report.push(nid.clone(), IssueKind::UnknownConcept, name.clone());
                }
            }
            let mut labels = nodule.pathology_labels.clone();
            if labels.is_empty() {
                labels.insert("nodule".to_string());
            }
            for reading in &nodule.readings {
                let mut masks = Vec::new();
                for m in &reading.masks {
                    if m.slice_index >= scan.slice_count {
                        report.push(
                            format!("{nid}/{}", reading.radiologist_id),
                            IssueKind::SliceOutOfRange,
                            format!("slice {} of {}", m.slice_index, scan.slice_count),
                        );
                        continue;
                    }
                    let found = dims(&m.mask).map_err(|message| IngestError::UnreadableMask {
                        scan_id: sid.to_string(),
                        mask: m.mask.clone(),
                        message,
                    })?;
                    if found != extent {
                        return Err(IngestError::DimensionMismatch {
                            scan_id: sid.to_string(),
                            detail: format!("mask {} is {}x{}, slice is {}x{}", m.mask, found.0, found.1, extent.0, extent.1),
                        });
                    }
                    masks.push(SliceMaskRef { slice_index: m.slice_index, mask_ref: m.mask.clone() });
                }
                annotations.push(NoduleAnnotation {
                    radiologist_id: reading.radiologist_id.clone(),
                    nodule_id: nodule.nodule_id.clone(),
                    masks,
                });
            }
            nodules.push(NoduleInfo { nodule_id: nodule.nodule_id.clone(), pathology_labels: labels, attributes });
        }
        if nodules.is_empty() {
            tracing::info!(scan = sid, "scan has no annotated nodules; omitted");
            report.push(sid, IssueKind::NoNodules, "scan omitted");
            continue;
        }

        let listed: BTreeMap<u32, &str> = scan.slices.iter().map(|s| (s.index, s.image.as_str())).collect();
        let candidates: BTreeSet<u32> = annotations.iter().flat_map(|a| a.masks.iter().map(|m| m.slice_index)).collect();
        for idx in candidates {
            let image_id = format!("{sid}_s{idx:03}");
            let Some(image_ref) = listed.get(&idx) else {
                report.push(image_id, IssueKind::MissingImage, format!("slice {idx} not listed"));
                continue;
            };
            match dims(image_ref) {
                Err(e) => {
                    report.push(image_id, IssueKind::MissingImage, format!("{image_ref}: {e}"));
                    continue;
                }
                Ok(found) if found != extent => {
                    return Err(IngestError::DimensionMismatch {
                        scan_id: sid.to_string(),
                        detail: format!("slice {image_ref} is {}x{}, listing says {}x{}", found.0, found.1, extent.0, extent.1),
                    })
                }
                Ok(_) => {}
            }
            let mut rec = ImageRecord::new(image_id, *image_ref, Modality::CtSlice, scan.width, scan.height);
            rec.volume_ref = Some(VolumeRef { scan_id: sid.to_string(), slice_index: idx });
            manifest.records.push(rec);
        }
        manifest.volumes.push(VolumeRecord {
            scan_id: sid.to_string(),
            slice_count: scan.slice_count,
            width: scan.width,
            height: scan.height,
            annotations,
            nodules,
            extra: Extra::new(),
        });
    }
    Ok(Ingested { manifest, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{validate_manifest, AttributeState};

    fn vocab() -> Vocabulary {
        Vocabulary::shipped(DatasetId::LidcIdri).unwrap()
    }

    fn scan(readers: usize) -> LidcScan {
        LidcScan {
            scan_id: "LIDC-0001".into(),
            width: 256,
            height: 256,
            slice_count: 20,
            slices: (0..20).map(|i| LidcSlice { index: i, image: format!("s{i}.png") }).collect(),
            nodules: vec![LidcNodule {
                nodule_id: "n1".into(),
                pathology_labels: BTreeSet::new(),
                attributes: [("spiculated_margin".to_string(), AttributeState::Present)].into(),
                readings: (0..readers)
                    .map(|r| LidcReading {
                        radiologist_id: format!("rad{r}"),
                        masks: vec![LidcSliceMask { slice_index: 10 + r as u32, mask: format!("m{r}.png") }],
                    })
                    .collect(),
            }],
        }
    }

    fn dims_256(_: &str) -> Result<(u32, u32), String> {
        Ok((256, 256))
    }

    #[test]
    fn four_readers_give_four_annotation_entries() {
        let listing = LidcListing { scans: vec![scan(4)] };
        let out = adapt_lidc_listing(&listing, &vocab(), dims_256).unwrap();
        assert_eq!(out.manifest.volumes.len(), 1);
        assert_eq!(out.manifest.volumes[0].annotations.len(), 4);
        assert_eq!(out.manifest.records.len(), 4);
        assert!(out.manifest.records.iter().all(|r| r.regions.is_empty() && r.volume_ref.is_some()));
        assert!(out.report.is_empty());
        assert!(validate_manifest(&out.manifest, Some(&vocab())).is_empty());
    }

    #[test]
    fn scan_without_nodules_is_omitted() {
        let mut s = scan(1);
        s.nodules.clear();
        let out = adapt_lidc_listing(&LidcListing { scans: vec![s] }, &vocab(), dims_256).unwrap();
        assert!(out.manifest.volumes.is_empty());
        assert_eq!(out.report.count(IssueKind::NoNodules), 1);
    }

    #[test]
    fn mask_larger_than_slice_is_hard_error() {
        let listing = LidcListing { scans: vec![scan(1)] };
        let err = adapt_lidc_listing(&listing, &vocab(), |p| Ok(if p.starts_with('m') { (512, 512) } else { (256, 256) })).unwrap_err();
        match err {
            IngestError::DimensionMismatch { scan_id, .. } => assert_eq!(scan_id, "LIDC-0001"),
            other => panic!("unexpected {other}"),
        }
        assert!(err_text(&listing).contains("dimension mismatch"));
    }

    fn err_text(listing: &LidcListing) -> String {
        adapt_lidc_listing(listing, &vocab(), |p| Ok(if p.starts_with('m') { (512, 512) } else { (256, 256) })).unwrap_err().to_string()
    }

    #[test]
    fn out_of_range_slice_reported() {
        let mut s = scan(1);
        s.nodules[0].readings[0].masks.push(LidcSliceMask { slice_index: 99, mask: "m.png".into() });
        let out = adapt_lidc_listing(&LidcListing { scans: vec![s] }, &vocab(), dims_256).unwrap();
        assert_eq!(out.report.count(IssueKind::SliceOutOfRange), 1);
        assert!(validate_manifest(&out.manifest, None).is_empty());
    }
}
