use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use super::{probe_image_file, root_string, IngestError, Ingested, ProbedImage};
use crate::manifest::{AttributeState, DatasetId, ImageRecord, IssueKind, Manifest, Modality, ValidationReport};
use crate::vocab::Vocabulary;

/// Concept cell value: `1`/`present`/`yes`/`true` and `0`/`absent`/`no`/`false`;
/// blanks, `unknown`, `na` and `-1` are unknown. `None` for anything else.
pub fn parse_concept_value(cell: &str) -> Option<AttributeState> {
    match cell.trim().to_ascii_lowercase().as_str() {
        "1" | "1.0" | "present" | "yes" | "true" => Some(AttributeState::Present),
        "0" | "0.0" | "absent" | "no" | "false" => Some(AttributeState::Absent),
        "" | "unknown" | "na" | "n/a" | "-1" => Some(AttributeState::Unknown),
        _ => None,
    }
}

/// Wide concept table (one row per photograph, one column per concept) to a
/// manifest of region-less records. Regions come later from the ROI detector.
pub fn adapt_skincon(image_dir: &Path, concept_table: &Path, vocab: &Vocabulary) -> Result<Ingested, IngestError> {
    let file =
        std::fs::File::open(concept_table).map_err(|source| IngestError::Io { path: concept_table.display().to_string(), source })?;
    let mut ingested = adapt_skincon_reader(file, &concept_table.display().to_string(), vocab, |name| probe_image_file(image_dir, name))?;
    ingested.manifest.header.image_root = root_string(image_dir);
    Ok(ingested)
}

pub fn adapt_skincon_reader<R: Read>(
    reader: R,
    origin: &str,
    vocab: &Vocabulary,
    probe: impl Fn(&str) -> Option<ProbedImage>,
) -> Result<Ingested, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
    let mut manifest = Manifest::new(DatasetId::Skincon);
    let mut report = ValidationReport::default();
    let headers = rdr.headers().map_err(|e| IngestError::Table { path: origin.into(), message: e.to_string() })?.clone();
    if headers.is_empty() {
        return Ok(Ingested { manifest, report });
    }
    let is = |h: &str, names: &[&str]| names.iter().any(|n| h.eq_ignore_ascii_case(n));
    let id_col = headers
        .iter()
        .position(|h| is(h, &["image_id", "imageid"]))
        .ok_or_else(|| IngestError::Table { path: origin.into(), message: "missing column image_id".into() })?;
    let file_col = headers.iter().position(|h| is(h, &["file", "image", "filename"]));

    let mut concepts = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if i == id_col || Some(i) == file_col || h.is_empty() {
            continue;
        }
        if vocab.knows_attribute(h) {
            concepts.push((i, h.to_string()));
        } else {
            report.push(h, IssueKind::UnknownConcept, format!("column {h} ignored"));
        }
    }

    let mut seen = HashSet::new();
    for (n, row) in rdr.records().enumerate() {
        let row_id = format!("row {}", n + 1);
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                report.push(row_id, IssueKind::MalformedRow, e.to_string());
                continue;
            }
        };
        let image_id = row.get(id_col).unwrap_or("");
        if image_id.is_empty() {
            report.push(row_id, IssueKind::MalformedRow, "empty image_id");
            continue;
        }
        if !seen.insert(image_id.to_string()) {
            report.push(image_id, IssueKind::DuplicateId, format!("{row_id}: repeated image_id"));
            continue;
        }
        let file_name = file_col.and_then(|c| row.get(c)).filter(|s| !s.is_empty()).unwrap_or(image_id);
        let Some(probed) = probe(file_name) else {
            report.push(image_id, IssueKind::MissingImage, format!("{row_id}: {file_name}"));
            continue;
        };
        let mut rec = ImageRecord::new(image_id, probed.image_ref, Modality::Photo, probed.width, probed.height);
        for (col, name) in &concepts {
            let cell = row.get(*col).unwrap_or("");
            let state = parse_concept_value(cell).unwrap_or_else(|| {
                report.push(image_id, IssueKind::MalformedRow, format!("{row_id}: {name}={cell:?} treated as unknown"));
                AttributeState::Unknown
            });
            rec.attributes.insert(name.clone(), state);
        }
        manifest.records.push(rec);
    }
    Ok(Ingested { manifest, report })
}
