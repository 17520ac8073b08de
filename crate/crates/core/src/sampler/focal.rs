//! Focal inputs: full image, letterboxed region crop and aligned region mask.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use super::SamplerError;
use crate::digest::sha256_hex;
use crate::geometry::{crop_to_bbox, expand_bbox, letterbox_resize, BBox, BinaryMask, GeometryError, LetterboxTransform};
use crate::manifest::{write_atomic, DatasetId, ManifestError, Modality, RegionRecord, SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetGeometry {
    /// Total growth per dimension as a fraction of the box size.
    pub margin: f64,
    pub target_size: u32,
    pub pad_value: u8,
}

impl DatasetGeometry {
    pub fn default_for(dataset: DatasetId) -> Self {
        let margin = match dataset {
            DatasetId::VindrCxr | DatasetId::Custom => 0.10,
            DatasetId::LidcIdri => 0.0,
            DatasetId::Skincon => 0.15,
        };
        Self { margin, target_size: 512, pad_value: 0 }
    }
}

/// Per-dataset geometry, loaded from a TOML table keyed by dataset id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GeometryConfig {
    #[serde(flatten)]
    pub datasets: BTreeMap<DatasetId, DatasetGeometry>,
}

impl GeometryConfig {
    pub fn shipped() -> Self {
        let datasets = DatasetId::ALL.into_iter().map(|d| (d, DatasetGeometry::default_for(d))).collect();
        Self { datasets }
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, SamplerError> {
        let cfg: Self = toml::from_str(text).map_err(|e| SamplerError::Config { path: origin.into(), message: e.to_string() })?;
        for (d, g) in &cfg.datasets {
            if !g.margin.is_finite() || g.margin < 0.0 || g.target_size == 0 {
                return Err(SamplerError::Config { path: origin.into(), message: format!("invalid geometry for {d}") });
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, SamplerError> {
        let text = std::fs::read_to_string(path).map_err(|source| SamplerError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn for_dataset(&self, dataset: DatasetId) -> DatasetGeometry {
        self.datasets.get(&dataset).copied().unwrap_or_else(|| DatasetGeometry::default_for(dataset))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalTransform {
    pub scale: f64,
    pub pad_left: u32,
    pub pad_top: u32,
    pub content_width: u32,
    pub content_height: u32,
    pub target: u32,
    pub expanded_bbox: BBox,
}

impl FocalTransform {
    fn new(t: LetterboxTransform, expanded_bbox: BBox) -> Self {
        Self {
            scale: t.scale,
            pad_left: t.pad_left,
            pad_top: t.pad_top,
            content_width: t.content_width,
            content_height: t.content_height,
            target: t.target,
            expanded_bbox,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FocalInput {
    pub image_ref: String,
    pub region_id: String,
    pub full_image: RgbImage,
    pub crop: RgbImage,
    pub mask: BinaryMask,
    pub transform: FocalTransform,
}

pub fn load_rgb(path: &Path) -> Result<RgbImage, SamplerError> {
    Ok(image::open(path).map_err(|e| SamplerError::Image { path: path.display().to_string(), message: e.to_string() })?.to_rgb8())
}

/// Expands the region box by the dataset margin, crops, letterboxes, and
/// pairs the result with a full-extent mask: the region's own mask when it
/// has one, else the filled expanded box.
pub fn build_focal_input(
    image: &RgbImage,
    image_ref: &str,
    region: &RegionRecord,
    region_mask: Option<&BinaryMask>,
    geometry: &DatasetGeometry,
) -> Result<FocalInput, SamplerError> {
    let extent = image.dimensions();
    if let Some(m) = region_mask {
        if (m.width(), m.height()) != extent {
            return Err(
                GeometryError::ExtentMismatch { mask_w: m.width(), mask_h: m.height(), image_w: extent.0, image_h: extent.1 }.into()
            );
        }
    }
    let expanded = expand_bbox(&region.bbox, geometry.margin, extent)?;
    let crop = crop_to_bbox(image, &expanded)?;
    let (crop, t) = letterbox_resize(&crop, geometry.target_size, geometry.pad_value)?;
    let mask = match region_mask {
        Some(m) => m.clone(),
        None => BinaryMask::from_bbox(extent.0, extent.1, &expanded),
    };
    Ok(FocalInput {
        image_ref: image_ref.to_string(),
        region_id: region.region_id.clone(),
        full_image: image.clone(),
        crop,
        mask,
        transform: FocalTransform::new(t, expanded),
    })
}

/// Content-addressed PNG store: `<root>/blobs/<2 hex>/<sha256>.png`.
#[derive(Debug, Clone)]
pub struct BlobStore {
    root: PathBuf,
}

impl BlobStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Stores `bytes` and returns the path relative to the store root.
    pub fn put(&self, bytes: &[u8], ext: &str) -> Result<String, SamplerError> {
        let digest = sha256_hex(bytes);
        let rel = format!("blobs/{}/{digest}.{ext}", &digest[..2]);
        let path = self.root.join(&rel);
        if !path.exists() {
            write_atomic(&path, bytes).map_err(|source| SamplerError::Io { path: path.display().to_string(), source })?;
        }
        Ok(rel)
    }

    pub fn put_png<P, C>(&self, img: &image::ImageBuffer<P, C>) -> Result<String, SamplerError>
    where
        P: image::PixelWithColorType,
        [P::Subpixel]: image::EncodableLayout,
        C: std::ops::Deref<Target = [P::Subpixel]>,
    {
        self.put(&encode_png(img)?, "png")
    }

    pub fn read(&self, rel: &str) -> Result<Vec<u8>, SamplerError> {
        let path = self.root.join(rel);
        std::fs::read(&path).map_err(|source| SamplerError::Io { path: path.display().to_string(), source })
    }
}

pub fn encode_png<P, C>(img: &image::ImageBuffer<P, C>) -> Result<Vec<u8>, SamplerError>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|e| SamplerError::Image { path: "<memory>".into(), message: e.to_string() })?;
    Ok(buf.into_inner())
}

/// One line of a focal manifest. Blob paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalRecord {
    pub region_key: String,
    pub dataset_id: DatasetId,
    pub image_id: String,
    pub image_ref: String,
    pub modality: Modality,
    pub region: RegionRecord,
    pub full_image_ref: String,
    pub crop_ref: String,
    pub mask_ref: String,
    pub transform: FocalTransform,
}

impl FocalRecord {
    pub fn region_key_for(dataset: DatasetId, region_id: &str) -> String {
        format!("{dataset}:{region_id}")
    }

    pub fn persist(
        input: &FocalInput,
        dataset: DatasetId,
        image_id: &str,
        modality: Modality,
        region: &RegionRecord,
        store: &BlobStore,
    ) -> Result<Self, SamplerError> {
        Ok(Self {
            region_key: Self::region_key_for(dataset, &region.region_id),
            dataset_id: dataset,
            image_id: image_id.to_string(),
            image_ref: input.image_ref.clone(),
            modality,
            region: region.clone(),
            full_image_ref: store.put_png(&input.full_image)?,
            crop_ref: store.put_png(&input.crop)?,
            mask_ref: store.put_png(&input.mask.to_gray())?,
            transform: input.transform,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalHeader {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum FocalLine {
    FocalHeader(FocalHeader),
    Focal(Box<FocalRecord>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FocalManifest {
    pub header: FocalHeader,
    pub records: Vec<FocalRecord>,
}

impl FocalManifest {
    pub fn new(config_digest: Option<String>) -> Self {
        Self { header: FocalHeader { schema_version: SCHEMA_VERSION, config_digest }, records: Vec::new() }
    }

    pub fn to_canonical_string(&self) -> String {
        let mut out = serde_json::to_string(&FocalLine::FocalHeader(self.header.clone())).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(&FocalLine::Focal(Box::new(r.clone()))).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), ManifestError> {
        write_atomic(path, self.to_canonical_string().as_bytes())
            .map_err(|source| ManifestError::Io { path: path.display().to_string(), source })
    }

    /// True when the first line of `text` is a focal header.
    pub fn sniff(text: &str) -> bool {
        text.lines().next().is_some_and(|l| l.contains("\"kind\":\"focal_header\""))
    }

    pub fn parse_str(text: &str, origin: &str) -> Result<Self, ManifestError> {
        let mut header = None;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parsed: FocalLine = serde_json::from_str(line).map_err(|e| ManifestError::Parse {
                path: origin.into(),
                line: i + 1,
                message: e.to_string(),
            })?;
            match (parsed, &header) {
                (FocalLine::FocalHeader(h), None) => header = Some(h),
                (FocalLine::Focal(r), Some(_)) => records.push(*r),
                _ => return Err(ManifestError::Parse { path: origin.into(), line: i + 1, message: "misplaced header".into() }),
            }
        }
        let header = header.ok_or_else(|| ManifestError::MissingHeader { path: origin.into() })?;
        Ok(Self { header, records })
    }

    pub fn read(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io { path: path.display().to_string(), source })?;
        Self::parse_str(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn region(b: BBox) -> RegionRecord {
        RegionRecord::new("r", b)
    }

    fn img() -> RgbImage {
        RgbImage::from_fn(1024, 1024, |x, y| Rgb([(x % 251) as u8, (y % 241) as u8, 40]))
    }

    #[test]
    fn vindr_margin_composes_with_crop() {
        let g = DatasetGeometry::default_for(DatasetId::VindrCxr);
        let f = build_focal_input(&img(), "a.png", &region(BBox::new(100, 100, 200, 200).unwrap()), None, &g).unwrap();
        assert_eq!(f.transform.expanded_bbox, BBox::new(95, 95, 205, 205).unwrap());
        assert_eq!(f.crop.dimensions(), (512, 512));
        assert_eq!(f.mask.count(), 111 * 111);
        assert!(f.mask.get(95, 95) && f.mask.get(205, 205) && !f.mask.get(94, 95) && !f.mask.get(206, 206));
    }

    #[test]
    fn skincon_margin_is_fifteen_percent() {
        let g = DatasetGeometry::default_for(DatasetId::Skincon);
        let f = build_focal_input(&img(), "a.png", &region(BBox::new(100, 100, 200, 200).unwrap()), None, &g).unwrap();
        assert_eq!(f.transform.expanded_bbox, BBox::new(93, 93, 207, 207).unwrap());
    }

    #[test]
    fn lidc_mask_box_is_kept_exactly() {
        let mask = BinaryMask::from_fn(1024, 1024, |x, y| (300..=340).contains(&x) && (410..=430).contains(&y) && (x + y) % 3 != 0);
        let b = crate::geometry::mask_to_bbox(&mask).unwrap();
        let g = DatasetGeometry::default_for(DatasetId::LidcIdri);
        let f = build_focal_input(&img(), "s.png", &region(b), Some(&mask), &g).unwrap();
        assert_eq!(f.transform.expanded_bbox, b);
        assert_eq!(f.mask, mask);
    }

    #[test]
    fn mismatched_mask_extent_rejected() {
        let g = DatasetGeometry::default_for(DatasetId::LidcIdri);
        let mask = BinaryMask::new(10, 10);
        assert!(build_focal_input(&img(), "s.png", &region(BBox::new(1, 1, 2, 2).unwrap()), Some(&mask), &g).is_err());
    }

    #[test]
    fn geometry_config_parses_overrides() {
        let cfg = GeometryConfig::parse("[skincon]\nmargin = 0.2\ntarget_size = 256\npad_value = 0\n", "t").unwrap();
        assert_eq!(cfg.for_dataset(DatasetId::Skincon).margin, 0.2);
        assert_eq!(cfg.for_dataset(DatasetId::VindrCxr).margin, 0.10);
        assert!(GeometryConfig::parse("[skincon]\nmargin = -1.0\ntarget_size = 256\npad_value = 0\n", "t").is_err());
    }

    #[test]
    fn blob_store_is_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::new(dir.path());
        let a = store.put(b"hello", "bin").unwrap();
        let b = store.put(b"hello", "bin").unwrap();
        assert_eq!(a, b);
        assert_eq!(store.read(&a).unwrap(), b"hello");
    }
}
