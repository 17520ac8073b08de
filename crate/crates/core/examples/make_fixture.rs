//! Writes the synthetic end-to-end fixture: four chest radiographs, two CT
//! scans of two slices each, and four skin photographs.
//!
//! ```text
//! cargo run -p medcap-core --example make_fixture -- crates/core/tests/fixtures/e2e
//! ```
//!
//! The run configuration and canned captions in that directory are written
//! by hand; only images and manifests come from here.

use std::collections::BTreeSet;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use medcap_core::geometry::BBox;
use medcap_core::manifest::{
    AttributeState, DatasetId, ImageRecord, Manifest, Modality, NoduleAnnotation, NoduleInfo, RegionRecord, SliceMaskRef, VolumeRecord,
    VolumeRef,
};

const SIZE: u32 = 64;

fn attrs(present: &[&str], absent: &[&str], unknown: &[&str]) -> medcap_core::manifest::AttributeMap {
    let mut m = medcap_core::manifest::AttributeMap::new();
    for (names, state) in [(present, AttributeState::Present), (absent, AttributeState::Absent), (unknown, AttributeState::Unknown)] {
        for n in names {
            m.insert(n.to_string(), state);
        }
    }
    m
}

fn save_rgb(img: &RgbImage, path: &Path) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    img.save(path).unwrap();
}

fn save_gray(img: &GrayImage, path: &Path) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    img.save(path).unwrap();
}

fn radiograph(boxes: &[BBox], seed: u8) -> RgbImage {
    RgbImage::from_fn(SIZE, SIZE, |x, y| {
        let inside = boxes.iter().any(|b| b.contains_point(x, y));
        let base = 30 + ((x * 3 + y * 5 + seed as u32) % 17) as u8;
        let v = if inside { base + 150 } else { base };
        Rgb([v, v, v])
    })
}

fn region(id: &str, bbox: BBox, labels: &[&str], present: &[&str], absent: &[&str], site: Option<&str>) -> RegionRecord {
    let mut r = RegionRecord::new(id, bbox);
    r.pathology_labels = labels.iter().map(|s| s.to_string()).collect();
    r.attributes = attrs(present, absent, &[]);
    r.anatomical_site = site.map(str::to_string);
    r
}

fn vindr(root: &Path) {
    let b = |x0, y0, x1, y1| BBox::new(x0, y0, x1, y1).unwrap();
    let images: Vec<(&str, Vec<RegionRecord>)> = vec![
        (
            "cxr01",
            vec![region(
                "cxr01_r0",
                b(10, 34, 29, 53),
                &["Lung Opacity"],
                &["Lung Opacity"],
                &["Pneumothorax", "Pleural effusion"],
                Some("lower lobe of the lungs"),
            )],
        ),
        (
            "cxr02",
            vec![region("cxr02_r0", b(36, 20, 55, 41), &["Consolidation"], &["Consolidation"], &["Pneumothorax", "Cardiomegaly"], None)],
        ),
        ("cxr03", vec![region("cxr03_r0", b(6, 46, 27, 60), &["Pleural effusion"], &["Pleural effusion"], &["Pneumothorax"], None)]),
        (
            "cxr04",
            vec![
                region("cxr04_r0", b(40, 8, 51, 19), &["Nodule/Mass"], &["Nodule/Mass"], &["Calcification"], None),
                region("cxr04_r1", b(18, 24, 45, 50), &["Cardiomegaly"], &["Cardiomegaly"], &["Pleural effusion", "Consolidation"], None),
            ],
        ),
    ];
    let mut m = Manifest::new(DatasetId::VindrCxr);
    m.header.image_root = Some("images".into());
    for (i, (id, regions)) in images.into_iter().enumerate() {
        let boxes: Vec<BBox> = regions.iter().map(|r| r.bbox).collect();
        save_rgb(&radiograph(&boxes, i as u8), &root.join("vindr/images").join(format!("{id}.png")));
        let mut rec = ImageRecord::new(id, format!("{id}.png"), Modality::Cxr, SIZE, SIZE);
        rec.regions = regions;
        m.records.push(rec);
    }
    m.write(&root.join("vindr/manifest.jsonl")).unwrap();
}

fn disk(cx: i32, cy: i32, r: i32) -> impl Fn(u32, u32) -> bool {
    move |x, y| {
        let (dx, dy) = (x as i32 - cx, y as i32 - cy);
        dx * dx + dy * dy <= r * r
    }
}

fn lidc(root: &Path) {
    struct Scan {
        id: &'static str,
        center: (i32, i32),
        readings: Vec<(&'static str, Vec<(u32, i32)>)>,
        present: &'static [&'static str],
        absent: &'static [&'static str],
    }
    let scans = [
        Scan {
            id: "L1",
            center: (22, 26),
            readings: vec![("r1", vec![(0, 5), (1, 6)]), ("r2", vec![(1, 5)])],
            present: &["spiculated_margin"],
            absent: &["lobulation", "calcification"],
        },
        Scan {
            id: "L2",
            center: (40, 38),
            readings: vec![("r1", vec![(0, 7)]), ("r2", vec![(0, 6), (1, 4)])],
            present: &["solid", "large_size"],
            absent: &["non_solid", "cavitation"],
        },
    ];
    let mut m = Manifest::new(DatasetId::LidcIdri);
    m.header.image_root = Some("data".into());
    let dir = root.join("lidc/data");
    for scan in &scans {
        let mut annotations = Vec::new();
        for (reader, slices) in &scan.readings {
            let mut masks = Vec::new();
            for &(slice, r) in slices {
                let inside = disk(scan.center.0, scan.center.1, r);
                let mask = GrayImage::from_fn(SIZE, SIZE, |x, y| Luma([if inside(x, y) { 255 } else { 0 }]));
                let rel = format!("masks/{}_n1_{reader}_s{slice:03}.png", scan.id);
                save_gray(&mask, &dir.join(&rel));
                masks.push(SliceMaskRef { slice_index: slice, mask_ref: rel });
            }
            annotations.push(NoduleAnnotation { radiologist_id: reader.to_string(), nodule_id: "n1".into(), masks });
        }
        for slice in 0..2u32 {
            let r = 6 - slice as i32;
            let inside = disk(scan.center.0, scan.center.1, r);
            let img = RgbImage::from_fn(SIZE, SIZE, |x, y| {
                let v = if inside(x, y) { 200 } else { 20 + ((x + y * 2 + slice) % 11) as u8 };
                Rgb([v, v, v])
            });
            let id = format!("{}_s{slice:03}", scan.id);
            save_rgb(&img, &dir.join(format!("slices/{id}.png")));
            let mut rec = ImageRecord::new(&id, format!("slices/{id}.png"), Modality::CtSlice, SIZE, SIZE);
            rec.volume_ref = Some(VolumeRef { scan_id: scan.id.into(), slice_index: slice });
            m.records.push(rec);
        }
        m.volumes.push(VolumeRecord {
            scan_id: scan.id.into(),
            slice_count: 2,
            width: SIZE,
            height: SIZE,
            annotations,
            nodules: vec![NoduleInfo {
                nodule_id: "n1".into(),
                pathology_labels: BTreeSet::from(["nodule".to_string()]),
                attributes: attrs(scan.present, scan.absent, &[]),
            }],
            extra: Default::default(),
        });
    }
    m.write(&root.join("lidc/manifest.jsonl")).unwrap();
}

fn skincon(root: &Path) {
    type Photo = (&'static str, (i32, i32, i32), &'static [&'static str], &'static [&'static str], &'static [&'static str]);
    let photos: [Photo; 4] = [
        ("sk01", (30, 32, 10), &["erythema", "irregular_border"], &["scale", "ulcer"], &[]),
        ("sk02", (24, 24, 8), &["hyperpigmentation"], &["plaque"], &[]),
        ("sk03", (40, 36, 9), &["papule"], &["scale"], &["ulcer"]),
        ("sk04", (32, 40, 11), &["nodule"], &["crust", "erosion"], &[]),
    ];
    let mut m = Manifest::new(DatasetId::Skincon);
    m.header.image_root = Some("images".into());
    for (id, (cx, cy, r), present, absent, unknown) in photos {
        let inside = disk(cx, cy, r);
        let img = RgbImage::from_fn(SIZE, SIZE, |x, y| if inside(x, y) { Rgb([120, 40, 50]) } else { Rgb([224, 172, 150]) });
        save_rgb(&img, &root.join("skincon/images").join(format!("{id}.png")));
        let mut rec = ImageRecord::new(id, format!("{id}.png"), Modality::Photo, SIZE, SIZE);
        rec.attributes = attrs(present, absent, unknown);
        m.records.push(rec);
    }
    m.write(&root.join("skincon/manifest.jsonl")).unwrap();
}

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| "crates/core/tests/fixtures/e2e".into());
    let root = Path::new(&out);
    vindr(root);
    lidc(root);
    skincon(root);
    println!("fixture written to {}", root.display());
}
