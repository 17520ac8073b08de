use std::collections::{BTreeSet, HashMap};
use std::io::Read;
use std::path::Path;

use super::{probe_image_file, root_string, IngestError, Ingested, ProbedImage};
use crate::geometry::BBox;
use crate::manifest::{AttributeState, DatasetId, ImageRecord, IssueKind, Manifest, Modality, RegionRecord, ValidationReport};
use crate::vocab::Vocabulary;

struct Columns {
    image_id: usize,
    class: usize,
    coords: [usize; 4],
    site: Option<usize>,
}

impl Columns {
    fn locate(headers: &csv::StringRecord) -> Result<Self, String> {
        let find = |names: &[&str]| headers.iter().position(|h| names.iter().any(|n| h.trim().eq_ignore_ascii_case(n)));
        let need = |names: &[&str]| find(names).ok_or_else(|| format!("missing column {}", names[0]));
        Ok(Self {
            image_id: need(&["image_id"])?,
            class: need(&["class_name", "class_label", "label"])?,
            coords: [need(&["x_min"])?, need(&["y_min"])?, need(&["x_max"])?, need(&["y_max"])?],
            site: find(&["anatomical_site", "site"]),
        })
    }
}

struct Acc {
    record: ImageRecord,
    labels: BTreeSet<String>,
}

/// Tabular bounding-box export (one row per box) to a manifest. Image files
/// are looked up as `<image_dir>/<image_id>.png`.
pub fn adapt_vindr(table: &Path, image_dir: &Path, vocab: &Vocabulary) -> Result<Ingested, IngestError> {
    let file = std::fs::File::open(table).map_err(|source| IngestError::Io { path: table.display().to_string(), source })?;
    let mut ingested = adapt_vindr_reader(file, &table.display().to_string(), vocab, |id| probe_image_file(image_dir, id))?;
    ingested.manifest.header.image_root = root_string(image_dir);
    Ok(ingested)
}

/// Reader-level adapter; `probe` resolves an image id to its file and extent.
pub fn adapt_vindr_reader<R: Read>(
    reader: R,
    origin: &str,
    vocab: &Vocabulary,
    probe: impl Fn(&str) -> Option<ProbedImage>,
) -> Result<Ingested, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
    let mut manifest = Manifest::new(DatasetId::VindrCxr);
    let mut report = ValidationReport::default();

    let headers = rdr.headers().map_err(|e| IngestError::Table { path: origin.into(), message: e.to_string() })?.clone();
    if headers.is_empty() {
        return Ok(Ingested { manifest, report });
    }
    let cols = Columns::locate(&headers).map_err(|message| IngestError::Table { path: origin.into(), message })?;

    let mut order: Vec<Acc> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut probes: HashMap<String, Option<ProbedImage>> = HashMap::new();

    for (n, row) in rdr.records().enumerate() {
        let row_id = format!("row {}", n + 1);
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                report.push(row_id, IssueKind::MalformedRow, e.to_string());
                continue;
            }
        };
        let field = |i: usize| row.get(i).unwrap_or("");
        let image_id = field(cols.image_id);
        let class = field(cols.class);
        if image_id.is_empty() || class.is_empty() {
            report.push(row_id, IssueKind::MalformedRow, "empty image_id or class");
            continue;
        }
        let probed = probes.entry(image_id.to_string()).or_insert_with(|| probe(image_id)).clone();
        let Some(probed) = probed else {
            report.push(image_id, IssueKind::MissingImage, format!("{row_id}: no image file for {image_id}"));
            continue;
        };
        let slot = *index.entry(image_id.to_string()).or_insert_with(|| {
            order.push(Acc {
                record: ImageRecord::new(image_id, probed.image_ref.clone(), Modality::Cxr, probed.width, probed.height),
                labels: BTreeSet::new(),
            });
            order.len() - 1
        });
        if vocab.is_no_finding(class) {
            continue;
        }
        if !vocab.knows_label(class) {
            report.push(image_id, IssueKind::UnknownLabel, format!("{row_id}: {class}"));
            continue;
        }
        let coords: Option<Vec<f64>> = cols.coords.iter().map(|&i| field(i).parse::<f64>().ok().filter(|v| v.is_finite())).collect();
        let Some(c) = coords else {
            report.push(image_id, IssueKind::MalformedRow, format!("{row_id}: unparseable coordinates"));
            continue;
        };
        let (xmin, ymin, xmax, ymax) = (c[0], c[1], c[2], c[3]);
        if xmin > xmax || ymin > ymax {
            report.push(image_id, IssueKind::DegenerateBbox, format!("{row_id}: ({xmin},{ymin},{xmax},{ymax})"));
            continue;
        }
        let (w, h) = (f64::from(probed.width), f64::from(probed.height));
        if xmin < 0.0 || ymin < 0.0 || xmax >= w || ymax >= h {
            report.push(
                image_id,
                IssueKind::OutOfBounds,
                format!("{row_id}: ({xmin},{ymin},{xmax},{ymax}) in {}x{}", probed.width, probed.height),
            );
            continue;
        }
        let bbox = BBox {
            x0: xmin.floor() as u32,
            y0: ymin.floor() as u32,
            x1: (xmax.ceil() as u32).min(probed.width - 1),
            y1: (ymax.ceil() as u32).min(probed.height - 1),
        };
        let acc = &mut order[slot];
        let mut region = RegionRecord::new(format!("{image_id}_r{}", acc.record.regions.len()), bbox);
        region.pathology_labels.insert(class.to_string());
        region.anatomical_site = cols.site.map(field).filter(|s| !s.is_empty()).map(str::to_string);
        acc.labels.insert(class.to_string());
        acc.record.regions.push(region);
    }

    for acc in order {
        let mut record = acc.record;
        for region in &mut record.regions {
            // Findings never boxed anywhere in the image are absent from every region of it;
            // findings boxed elsewhere in the image stay unannotated for this region.
            for attr in &vocab.attributes {
                if region.pathology_labels.contains(attr) {
                    region.attributes.insert(attr.clone(), AttributeState::Present);
                } else if !acc.labels.contains(attr) {
                    region.attributes.insert(attr.clone(), AttributeState::Absent);
                }
            }
        }
        manifest.records.push(record);
    }
    Ok(Ingested { manifest, report })
}
