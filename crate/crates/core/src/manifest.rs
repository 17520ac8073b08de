//! Canonical line-delimited manifest shared by every pipeline stage.
//!
//! A manifest file is a header line followed by one JSON object per line.
//! Each line carries a `kind` tag (`header`, `image` or `volume`). Fields the
//! harness does not know about are kept in `extra` and written back, so a
//! canonical file survives a parse/serialize round trip byte for byte.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geometry::BBox;
use crate::vocab::Vocabulary;

pub const SCHEMA_VERSION: u32 = 1;

pub type Extra = BTreeMap<String, Value>;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}: first line must be a manifest header")]
    MissingHeader { path: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    VindrCxr,
    LidcIdri,
    Skincon,
    Custom,
}

impl DatasetId {
    pub const ALL: [DatasetId; 4] = [Self::VindrCxr, Self::LidcIdri, Self::Skincon, Self::Custom];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::VindrCxr => "vindr_cxr",
            Self::LidcIdri => "lidc_idri",
            Self::Skincon => "skincon",
            Self::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.as_str() == s)
    }

    pub fn default_modality(&self) -> Modality {
        match self {
            Self::VindrCxr | Self::Custom => Modality::Cxr,
            Self::LidcIdri => Modality::CtSlice,
            Self::Skincon => Modality::Photo,
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Cxr,
    CtSlice,
    Photo,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Cxr => "cxr",
            Self::CtSlice => "ct_slice",
            Self::Photo => "photo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeState {
    Present,
    Absent,
    Unknown,
}

pub type AttributeMap = BTreeMap<String, AttributeState>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub schema_version: u32,
    pub dataset_id: DatasetId,
    /// Directory that relative image and mask paths resolve against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_root: Option<String>,
    #[serde(flatten)]
    pub extra: Extra,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub region_id: String,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_ref: Option<String>,
    pub pathology_labels: BTreeSet<String>,
    pub attributes: AttributeMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anatomical_site: Option<String>,
    #[serde(flatten)]
    pub extra: Extra,
}

impl RegionRecord {
    pub fn new(region_id: impl Into<String>, bbox: BBox) -> Self {
        Self {
            region_id: region_id.into(),
            bbox,
            mask_ref: None,
            pathology_labels: BTreeSet::new(),
            attributes: AttributeMap::new(),
            anatomical_site: None,
            extra: Extra::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeRef {
    pub scan_id: String,
    pub slice_index: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub image_ref: String,
    pub modality: Modality,
    pub width: u32,
    pub height: u32,
    pub regions: Vec<RegionRecord>,
    /// Image-level concept labels (datasets without region annotations).
    #[serde(default)]
    pub attributes: AttributeMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume_ref: Option<VolumeRef>,
    #[serde(flatten)]
    pub extra: Extra,
}

impl ImageRecord {
    pub fn new(image_id: impl Into<String>, image_ref: impl Into<String>, modality: Modality, width: u32, height: u32) -> Self {
        Self {
            image_id: image_id.into(),
            image_ref: image_ref.into(),
            modality,
            width,
            height,
            regions: Vec::new(),
            attributes: AttributeMap::new(),
            volume_ref: None,
            extra: Extra::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceMaskRef {
    pub slice_index: u32,
    pub mask_ref: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoduleAnnotation {
    pub radiologist_id: String,
    pub nodule_id: String,
    pub masks: Vec<SliceMaskRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoduleInfo {
    pub nodule_id: String,
    #[serde(default)]
    pub pathology_labels: BTreeSet<String>,
    #[serde(default)]
    pub attributes: AttributeMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeRecord {
    pub scan_id: String,
    pub slice_count: u32,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<NoduleAnnotation>,
    #[serde(default)]
    pub nodules: Vec<NoduleInfo>,
    #[serde(flatten)]
    pub extra: Extra,
}

impl VolumeRecord {
    pub fn nodule_ids(&self) -> BTreeSet<&str> {
        self.annotations.iter().map(|a| a.nodule_id.as_str()).chain(self.nodules.iter().map(|n| n.nodule_id.as_str())).collect()
    }

    pub fn nodule_info(&self, nodule_id: &str) -> Option<&NoduleInfo> {
        self.nodules.iter().find(|n| n.nodule_id == nodule_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ManifestLine {
    Header(ManifestHeader),
    Image(ImageRecord),
    Volume(VolumeRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<ImageRecord>,
    pub volumes: Vec<VolumeRecord>,
}

impl Manifest {
    pub fn new(dataset_id: DatasetId) -> Self {
        Self {
            header: ManifestHeader { schema_version: SCHEMA_VERSION, dataset_id, image_root: None, extra: Extra::new() },
            records: Vec::new(),
            volumes: Vec::new(),
        }
    }

    pub fn dataset_id(&self) -> DatasetId {
        self.header.dataset_id
    }

    pub fn volume(&self, scan_id: &str) -> Option<&VolumeRecord> {
        self.volumes.iter().find(|v| v.scan_id == scan_id)
    }

    pub fn region_count(&self) -> usize {
        self.records.iter().map(|r| r.regions.len()).sum()
    }

    /// Canonical serialization: header, image records, then volumes.
    pub fn to_canonical_string(&self) -> String {
        let mut out = String::new();
        let mut push = |line: ManifestLine| {
            out.push_str(&serde_json::to_string(&line).expect("manifest lines serialize"));
            out.push('\n');
        };
        push(ManifestLine::Header(self.header.clone()));
        for r in &self.records {
            push(ManifestLine::Image(r.clone()));
        }
        for v in &self.volumes {
            push(ManifestLine::Volume(v.clone()));
        }
        out
    }

    pub fn parse_str(text: &str, origin: &str) -> Result<Self, ManifestError> {
        let mut header = None;
        let mut records = Vec::new();
        let mut volumes = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ManifestLine = serde_json::from_str(line).map_err(|e| ManifestError::Parse {
                path: origin.to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            match parsed {
                ManifestLine::Header(h) if header.is_none() && records.is_empty() && volumes.is_empty() => header = Some(h),
                ManifestLine::Header(_) => {
                    return Err(ManifestError::Parse { path: origin.to_string(), line: i + 1, message: "unexpected second header".into() })
                }
                _ if header.is_none() => return Err(ManifestError::MissingHeader { path: origin.to_string() }),
                ManifestLine::Image(r) => records.push(r),
                ManifestLine::Volume(v) => volumes.push(v),
            }
        }
        let header = header.ok_or_else(|| ManifestError::MissingHeader { path: origin.to_string() })?;
        Ok(Self { header, records, volumes })
    }

    pub fn read(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io { path: path.display().to_string(), source })?;
        Self::parse_str(&text, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<(), ManifestError> {
        write_atomic(path, self.to_canonical_string().as_bytes())
            .map_err(|source| ManifestError::Io { path: path.display().to_string(), source })
    }
}

/// Writes through a sibling temp file and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

/// Reads one JSON value per non-empty line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ManifestError> {
    let origin = path.display().to_string();
    let f = std::fs::File::open(path).map_err(|source| ManifestError::Io { path: origin.clone(), source })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|source| ManifestError::Io { path: origin.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ManifestError::Parse {
            path: origin.clone(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item).expect("jsonl item serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), ManifestError> {
    write_atomic(path, to_jsonl(items).as_bytes()).map_err(|source| ManifestError::Io { path: path.display().to_string(), source })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    MalformedRow,
    DegenerateBbox,
    OutOfBounds,
    DuplicateId,
    MissingImage,
    UnknownLabel,
    UnknownConcept,
    AbsolutePath,
    SchemaVersion,
    InvalidExtent,
    SliceOutOfRange,
    MissingAnnotation,
    DanglingVolumeRef,
    NoNodules,
    NoRoi,
    DetectorFailure,
    NoUsableAttributes,
}

impl IssueKind {
    pub fn reason(&self) -> &'static str {
        match self {
            Self::MalformedRow => "malformed row",
            Self::DegenerateBbox => "degenerate bbox",
            Self::OutOfBounds => "out of bounds",
            Self::DuplicateId => "duplicate id",
            Self::MissingImage => "missing image",
            Self::UnknownLabel => "unknown label",
            Self::UnknownConcept => "unknown concept",
            Self::AbsolutePath => "absolute path",
            Self::SchemaVersion => "unsupported schema version",
            Self::InvalidExtent => "invalid extent",
            Self::SliceOutOfRange => "slice out of range",
            Self::MissingAnnotation => "nodule without annotation",
            Self::DanglingVolumeRef => "dangling volume reference",
            Self::NoNodules => "no nodules",
            Self::NoRoi => "no ROI",
            Self::DetectorFailure => "detector failure",
            Self::NoUsableAttributes => "no usable attributes",
        }
    }
}

impl fmt::Display for IssueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.reason())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationEntry {
    pub record_id: String,
    pub kind: IssueKind,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub entries: Vec<ValidationEntry>,
}

impl ValidationReport {
    pub fn push(&mut self, record_id: impl Into<String>, kind: IssueKind, detail: impl Into<String>) {
        self.entries.push(ValidationEntry { record_id: record_id.into(), kind, detail: detail.into() });
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn count(&self, kind: IssueKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).count()
    }

    pub fn extend(&mut self, other: ValidationReport) {
        self.entries.extend(other.entries);
    }
}

fn is_relative(p: &str) -> bool {
    !p.is_empty() && !Path::new(p).is_absolute() && !p.starts_with('/') && !p.starts_with('\\')
}

/// Lists every invariant violation in `m`. When a vocabulary is given,
/// pathology labels and attribute names are checked against it.
pub fn validate_manifest(m: &Manifest, vocab: Option<&Vocabulary>) -> ValidationReport {
    let mut report = ValidationReport::default();
    if m.header.schema_version != SCHEMA_VERSION {
        report.push("header", IssueKind::SchemaVersion, format!("schema_version {}", m.header.schema_version));
    }

    let mut image_ids = HashSet::new();
    let mut region_ids = HashSet::new();
    for rec in &m.records {
        let id = rec.image_id.as_str();
        if !image_ids.insert(id) {
            report.push(id, IssueKind::DuplicateId, "image_id");
        }
        if !is_relative(&rec.image_ref) {
            report.push(id, IssueKind::AbsolutePath, rec.image_ref.clone());
        }
        if rec.width == 0 || rec.height == 0 {
            report.push(id, IssueKind::InvalidExtent, format!("{}x{}", rec.width, rec.height));
        }
        if let Some(vocab) = vocab {
            for name in rec.attributes.keys() {
                if !vocab.knows_attribute(name) {
                    report.push(id, IssueKind::UnknownConcept, name.clone());
                }
            }
        }
        if let Some(vr) = &rec.volume_ref {
            match m.volume(&vr.scan_id) {
                None => report.push(id, IssueKind::DanglingVolumeRef, vr.scan_id.clone()),
                Some(v) if vr.slice_index >= v.slice_count => {
                    report.push(id, IssueKind::SliceOutOfRange, format!("slice {} of {}", vr.slice_index, v.slice_count))
                }
                Some(_) => {}
            }
        }
        for region in &rec.regions {
            let rid = region.region_id.as_str();
            if !region_ids.insert(rid) {
                report.push(rid, IssueKind::DuplicateId, "region_id");
            }
            if !region.bbox.is_ordered() {
                report.push(rid, IssueKind::DegenerateBbox, region.bbox.to_string());
            } else if !region.bbox.fits_within(rec.width, rec.height) {
                report.push(rid, IssueKind::OutOfBounds, format!("{} in {}x{}", region.bbox, rec.width, rec.height));
            }
            if let Some(mask) = &region.mask_ref {
                if !is_relative(mask) {
                    report.push(rid, IssueKind::AbsolutePath, mask.clone());
                }
            }
            if let Some(vocab) = vocab {
                for label in &region.pathology_labels {
                    if !vocab.knows_label(label) {
                        report.push(rid, IssueKind::UnknownLabel, label.clone());
                    }
                }
                for name in region.attributes.keys() {
                    if !vocab.knows_attribute(name) {
                        report.push(rid, IssueKind::UnknownConcept, name.clone());
                    }
                }
            }
        }
    }

    let mut scan_ids = HashSet::new();
    for vol in &m.volumes {
        let id = vol.scan_id.as_str();
        if !scan_ids.insert(id) {
            report.push(id, IssueKind::DuplicateId, "scan_id");
        }
        if vol.width == 0 || vol.height == 0 || vol.slice_count == 0 {
            report.push(id, IssueKind::InvalidExtent, format!("{}x{}x{}", vol.width, vol.height, vol.slice_count));
        }
        for ann in &vol.annotations {
            for mask in &ann.masks {
                if mask.slice_index >= vol.slice_count {
                    report.push(
                        format!("{id}/{}/{}", ann.nodule_id, ann.radiologist_id),
                        IssueKind::SliceOutOfRange,
                        format!("slice {} of {}", mask.slice_index, vol.slice_count),
                    );
                }
                if !is_relative(&mask.mask_ref) {
                    report.push(id, IssueKind::AbsolutePath, mask.mask_ref.clone());
                }
            }
        }
        for info in &vol.nodules {
            if !vol.annotations.iter().any(|a| a.nodule_id == info.nodule_id) {
                report.push(format!("{id}/{}", info.nodule_id), IssueKind::MissingAnnotation, "no radiologist annotation");
            }
        }
    }
    report
}

/// File-level checks: image files exist, and region masks share the image extent.
pub fn validate_files(m: &Manifest, root: &Path) -> ValidationReport {
    let mut report = ValidationReport::default();
    for rec in &m.records {
        let path = root.join(&rec.image_ref);
        match image::image_dimensions(&path) {
            Err(_) => report.push(&rec.image_id, IssueKind::MissingImage, path.display().to_string()),
            Ok((w, h)) if (w, h) != (rec.width, rec.height) => {
                report.push(&rec.image_id, IssueKind::InvalidExtent, format!("file is {w}x{h}, record says {}x{}", rec.width, rec.height))
            }
            Ok(_) => {}
        }
        for region in &rec.regions {
            if let Some(mask) = &region.mask_ref {
                match image::image_dimensions(root.join(mask)) {
                    Err(_) => report.push(&region.region_id, IssueKind::MissingImage, mask.clone()),
                    Ok((w, h)) if (w, h) != (rec.width, rec.height) => report.push(
                        &region.region_id,
                        IssueKind::InvalidExtent,
                        format!("mask {w}x{h} on image {}x{}", rec.width, rec.height),
                    ),
                    Ok(_) => {}
                }
            }
        }
    }
    report
}
