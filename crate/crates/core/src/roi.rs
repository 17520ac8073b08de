//! Approximate lesion boxes for photographs that ship without region
//! annotations.
//!
//! The baseline detector measures CIELAB colour distance from the median
//! tone of a border ring (assumed to be skin), thresholds it, and reports the
//! tight boxes of sufficiently large 8-connected components. An external
//! command can be plugged in instead: it receives the image path as its last
//! argument and prints one `x0 y0 x1 y1` box per line.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::process::Command;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geometry::BBox;
use crate::manifest::{IssueKind, Manifest, RegionRecord, ValidationReport};
use crate::sampler::load_rgb;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("invalid detector spec: {0}")]
    Spec(String),
    #[error("empty image")]
    EmptyImage,
    #[error("cannot load {path}: {message}")]
    Image { path: String, message: String },
    #[error("external detector failed ({status}): {stderr}")]
    External { status: String, stderr: String },
    #[error("external detector output line {line}: {text:?}")]
    ExternalOutput { line: usize, text: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    BaselineColorBlob,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub kind: DetectorKind,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    /// Program and leading arguments, whitespace separated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_command: Option<String>,
}

impl DetectorSpec {
    pub fn baseline(tau: f64, min_area: f64) -> Self {
        Self {
            kind: DetectorKind::BaselineColorBlob,
            params: [("tau".to_string(), tau), ("min_area".to_string(), min_area)].into(),
            external_command: None,
        }
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        match self.kind {
            DetectorKind::External => match &self.external_command {
                Some(c) if !c.trim().is_empty() => Ok(()),
                _ => Err(DetectorError::Spec("external detector requires external_command".into())),
            },
            DetectorKind::BaselineColorBlob => {
                for key in ["tau", "min_area"] {
                    match self.params.get(key) {
                        Some(v) if v.is_finite() && *v >= 0.0 => {}
                        _ => return Err(DetectorError::Spec(format!("baseline detector requires non-negative param {key}"))),
                    }
                }
                Ok(())
            }
        }
    }
}

fn srgb_to_lab(px: [u8; 3]) -> [f64; 3] {
    fn lin(c: u8) -> f64 {
        let c = f64::from(c) / 255.0;
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    }
    fn f(t: f64) -> f64 {
        const D: f64 = 6.0 / 29.0;
        if t > D * D * D {
            t.cbrt()
        } else {
            t / (3.0 * D * D) + 4.0 / 29.0
        }
    }
    let (r, g, b) = (lin(px[0]), lin(px[1]), lin(px[2]));
    // D65 white
    let x = (0.4124 * r + 0.3576 * g + 0.1805 * b) / 0.95047;
    let y = 0.2126 * r + 0.7152 * g + 0.0722 * b;
    let z = (0.0193 * r + 0.1192 * g + 0.9505 * b) / 1.08883;
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Per-pixel CIELAB distance (ΔE*ab) from the border-ring median tone.
pub fn color_difference_map(image: &RgbImage, ring: u32) -> Vec<f64> {
    let (w, h) = image.dimensions();
    let ring = ring.max(1).min(w.min(h).div_ceil(2));
    let lab: Vec<[f64; 3]> = image.pixels().map(|p| srgb_to_lab(p.0)).collect();
    let mut channels: [Vec<f64>; 3] = Default::default();
    for y in 0..h {
        for x in 0..w {
            if x < ring || y < ring || x >= w - ring || y >= h - ring {
                let v = lab[(y * w + x) as usize];
                for c in 0..3 {
                    channels[c].push(v[c]);
                }
            }
        }
    }
    let reference = [median(&mut channels[0]), median(&mut channels[1]), median(&mut channels[2])];
    lab.iter().map(|v| ((v[0] - reference[0]).powi(2) + (v[1] - reference[1]).powi(2) + (v[2] - reference[2]).powi(2)).sqrt()).collect()
}

/// Tight boxes and pixel counts of the 8-connected components of `fg`.
pub fn connected_components(fg: &[bool], width: u32, height: u32) -> Vec<(BBox, u64)> {
    let (w, h) = (width as usize, height as usize);
    let mut seen = vec![false; fg.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..fg.len() {
        if !fg[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (sx, sy) = ((start % w) as u32, (start / w) as u32);
        let mut b = BBox { x0: sx, y0: sy, x1: sx, y1: sy };
        let mut count = 0u64;
        while let Some(i) = queue.pop_front() {
            count += 1;
            let (x, y) = (i % w, i / w);
            b.x0 = b.x0.min(x as u32);
            b.x1 = b.x1.max(x as u32);
            b.y0 = b.y0.min(y as u32);
            b.y1 = b.y1.max(y as u32);
            for dy in [-1i64, 0, 1] {
                for dx in [-1i64, 0, 1] {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if fg[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        out.push((b, count));
    }
    out
}

fn detect_baseline(image: &RgbImage, spec: &DetectorSpec) -> Vec<BBox> {
    let (w, h) = image.dimensions();
    let tau = spec.params["tau"];
    let min_area = spec.params["min_area"];
    let ring = spec.params.get("ring_width").map(|v| *v as u32).unwrap_or_else(|| (w.min(h) / 16).max(1));
    let diff = color_difference_map(image, ring);
    let fg: Vec<bool> = diff.iter().map(|d| *d > tau).collect();
    let mut comps: Vec<(BBox, u64)> = connected_components(&fg, w, h).into_iter().filter(|(_, n)| *n as f64 >= min_area).collect();
    comps.sort_by(|a, b| b.1.cmp(&a.1).then((a.0.y0, a.0.x0).cmp(&(b.0.y0, b.0.x0))));
    comps.into_iter().map(|(b, _)| b).collect()
}

fn parse_external_boxes(stdout: &str, width: u32, height: u32) -> Result<Vec<BBox>, DetectorError> {
    let mut boxes = Vec::new();
    for (i, line) in stdout.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let nums: Vec<i64> = t
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| DetectorError::ExternalOutput { line: i + 1, text: line.to_string() })?;
        let [x0, y0, x1, y1] = nums[..] else {
            return Err(DetectorError::ExternalOutput { line: i + 1, text: line.to_string() });
        };
        let (mx, my) = (i64::from(width) - 1, i64::from(height) - 1);
        let (x0, y0, x1, y1) = (x0.clamp(0, mx), y0.clamp(0, my), x1.clamp(0, mx), y1.clamp(0, my));
        if x0 <= x1 && y0 <= y1 {
            boxes.push(BBox { x0: x0 as u32, y0: y0 as u32, x1: x1 as u32, y1: y1 as u32 });
        }
    }
    boxes.sort_by(|a, b| b.area().cmp(&a.area()).then((a.y0, a.x0).cmp(&(b.y0, b.x0))));
    Ok(boxes)
}

fn detect_external(path: &Path, width: u32, height: u32, command: &str) -> Result<Vec<BBox>, DetectorError> {
    let mut parts = command.split_whitespace();
    let program = parts.next().ok_or_else(|| DetectorError::Spec("empty external_command".into()))?;
    let output = Command::new(program)
        .args(parts)
        .arg(path)
        .output()
        .map_err(|e| DetectorError::External { status: "spawn failed".into(), stderr: e.to_string() })?;
    if !output.status.success() {
        return Err(DetectorError::External {
            status: output.status.to_string(),
            stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
        });
    }
    parse_external_boxes(&String::from_utf8_lossy(&output.stdout), width, height)
}

/// Lesion boxes for an in-memory image, largest first.
pub fn detect_lesions(image: &RgbImage, spec: &DetectorSpec) -> Result<Vec<BBox>, DetectorError> {
    spec.validate()?;
    if image.width() == 0 || image.height() == 0 {
        return Err(DetectorError::EmptyImage);
    }
    match spec.kind {
        DetectorKind::BaselineColorBlob => Ok(detect_baseline(image, spec)),
        DetectorKind::External => {
            let dir = tempfile_dir()?;
            let path = dir.join("input.png");
            image.save(&path).map_err(|e| DetectorError::Image { path: path.display().to_string(), message: e.to_string() })?;
            let result = detect_external(&path, image.width(), image.height(), spec.external_command.as_deref().unwrap_or(""));
            let _ = std::fs::remove_dir_all(&dir);
            result
        }
    }
}

fn tempfile_dir() -> Result<std::path::PathBuf, DetectorError> {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let dir = std::env::temp_dir().join(format!("medcap-roi-{}-{}", std::process::id(), COUNTER.fetch_add(1, Ordering::Relaxed)));
    std::fs::create_dir_all(&dir).map_err(|e| DetectorError::Image { path: dir.display().to_string(), message: e.to_string() })?;
    Ok(dir)
}

/// Boxes for an image on disk. External detectors get the original path.
pub fn detect_file(path: &Path, spec: &DetectorSpec) -> Result<Vec<BBox>, DetectorError> {
    spec.validate()?;
    match spec.kind {
        DetectorKind::External => {
            let (w, h) = image::image_dimensions(path)
                .map_err(|e| DetectorError::Image { path: path.display().to_string(), message: e.to_string() })?;
            detect_external(path, w, h, spec.external_command.as_deref().unwrap_or(""))
        }
        DetectorKind::BaselineColorBlob => {
            let img = load_rgb(path).map_err(|e| DetectorError::Image { path: path.display().to_string(), message: e.to_string() })?;
            detect_lesions(&img, spec)
        }
    }
}

/// Fills region-less records with detected boxes. Each new region inherits
/// the image-level attribute map and is marked with `attribute_source`.
/// Records that already have regions are left alone.
pub fn attach_regions(
    manifest: &Manifest,
    spec: &DetectorSpec,
    image_root: &Path,
    workers: usize,
) -> Result<(Manifest, ValidationReport), DetectorError> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().map_err(|e| DetectorError::Spec(e.to_string()))?;
    let detections: Vec<Option<Result<Vec<BBox>, DetectorError>>> = pool.install(|| {
        manifest.records.par_iter().map(|rec| rec.regions.is_empty().then(|| detect_file(&image_root.join(&rec.image_ref), spec))).collect()
    });

    let mut out = manifest.clone();
    let mut report = ValidationReport::default();
    for (rec, det) in out.records.iter_mut().zip(detections) {
        match det {
            None => {}
            Some(Err(e)) => report.push(&rec.image_id, IssueKind::DetectorFailure, e.to_string()),
            Some(Ok(boxes)) if boxes.is_empty() => report.push(&rec.image_id, IssueKind::NoRoi, "detector returned no boxes"),
            Some(Ok(boxes)) => {
                for (i, b) in boxes.into_iter().enumerate() {
                    let mut region = RegionRecord::new(format!("{}_roi{i}", rec.image_id), b);
                    region.attributes = rec.attributes.clone();
                    region.extra.insert("attribute_source".into(), Value::from("image_level"));
                    rec.regions.push(region);
                }
            }
        }
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    const SKIN: Rgb<u8> = Rgb([224, 172, 150]);
    const LESION: Rgb<u8> = Rgb([120, 40, 50]);

    fn canvas() -> RgbImage {
        RgbImage::from_pixel(256, 256, SKIN)
    }

    fn paint(img: &mut RgbImage, b: BBox) {
        for y in b.y0..=b.y1 {
            for x in b.x0..=b.x1 {
                img.put_pixel(x, y, LESION);
            }
        }
    }

    fn spec() -> DetectorSpec {
        DetectorSpec::baseline(20.0, 50.0)
    }

    #[test]
    fn single_blob_found() {
        let mut img = canvas();
        let truth = BBox::new(60, 60, 99, 99).unwrap();
        paint(&mut img, truth);
        let boxes = detect_lesions(&img, &spec()).unwrap();
        assert_eq!(boxes.len(), 1);
        assert!(boxes[0].iou(&truth) >= 0.5);
    }

    #[test]
    fn blank_image_has_no_lesions() {
        assert!(detect_lesions(&canvas(), &spec()).unwrap().is_empty());
    }

    #[test]
    fn larger_blob_first() {
        let mut img = canvas();
        paint(&mut img, BBox::new(150, 150, 169, 169).unwrap()); // 400 px
        paint(&mut img, BBox::new(40, 40, 79, 79).unwrap()); // 1600 px
        let boxes = detect_lesions(&img, &spec()).unwrap();
        assert_eq!(boxes, vec![BBox::new(40, 40, 79, 79).unwrap(), BBox::new(150, 150, 169, 169).unwrap()]);
    }

    #[test]
    fn spec_validation() {
        assert!(DetectorSpec { kind: DetectorKind::External, params: BTreeMap::new(), external_command: None }.validate().is_err());
        assert!(DetectorSpec { kind: DetectorKind::BaselineColorBlob, params: BTreeMap::new(), external_command: None }
            .validate()
            .is_err());
    }

    #[test]
    fn external_boxes_are_clipped_and_sorted() {
        let boxes = parse_external_boxes("1 1 3 3\n-5 -5 300 20\n\n", 100, 50).unwrap();
        assert_eq!(boxes, vec![BBox::new(0, 0, 99, 20).unwrap(), BBox::new(1, 1, 3, 3).unwrap()]);
        assert!(parse_external_boxes("1 2 3\n", 10, 10).is_err());
    }

    #[test]
    fn components_use_eight_connectivity() {
        // diagonal pair joins; isolated pixel separate
        let w = 4;
        let mut fg = vec![false; 16];
        fg[0] = true;
        fg[5] = true;
        fg[15] = true;
        let comps = connected_components(&fg, w, 4);
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0], (BBox::new(0, 0, 1, 1).unwrap(), 2));
    }
}
