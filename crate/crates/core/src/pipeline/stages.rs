//! Stage functions shared by `run` and the single-stage CLI verbs.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ErrorClass, PipelineError, Stage};
use crate::eval::{self, score_llm, JudgedAnswer, MedDlcScore, RegionRating};
use crate::gateway::{Gateway, GenerationRequest, RequestImage};
use crate::geometry::BinaryMask;
use crate::manifest::{validate_files, validate_manifest, Manifest, ValidationReport};
use crate::prompt::{PromptLibrary, RegionContext, RenderedPrompt};
use crate::qa::{instantiate_questions, QAItem, QaPolicy, TemplateLibrary};
use crate::report::DatasetScore;
use crate::roi::{attach_regions, DetectorSpec};
use crate::sampler::{
    build_focal_input, load_rgb, resolve_nodule_regions, sample_regions, BlobStore, FocalManifest, FocalRecord, GeometryConfig,
    LoadedVolume, SamplingPolicy, SliceSelection,
};
use crate::vocab::Vocabulary;

fn err(stage: Stage, class: ErrorClass) -> impl Fn(String) -> PipelineError {
    move |m| PipelineError::new(stage, class, m)
}

/// A manifest together with the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct DatasetInput {
    pub manifest: Manifest,
    pub image_root: PathBuf,
}

impl DatasetInput {
    /// Image root precedence: explicit override, the header's `image_root`
    /// (relative to the manifest), the manifest's directory.
    pub fn load(manifest_path: &Path, image_root: Option<PathBuf>) -> Result<Self, PipelineError> {
        let manifest =
            Manifest::read(manifest_path).map_err(|e| PipelineError::new(Stage::Ingest, ErrorClass::Validation, e.to_string()))?;
        let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let image_root = image_root.unwrap_or_else(|| match &manifest.header.image_root {
            Some(r) if Path::new(r).is_absolute() => PathBuf::from(r),
            Some(r) => dir.join(r),
            None => dir.clone(),
        });
        Ok(Self { manifest, image_root })
    }
}

/// Schema, vocabulary and on-disk checks.
pub fn validate_dataset(input: &DatasetInput) -> ValidationReport {
    let vocab = Vocabulary::shipped(input.manifest.dataset_id()).ok();
    let mut report = validate_manifest(&input.manifest, vocab.as_ref());
    report.extend(validate_files(&input.manifest, &input.image_root));
    report
}

pub fn ensure_valid(report: &ValidationReport, what: &str) -> Result<(), PipelineError> {
    if report.is_empty() {
        return Ok(());
    }
    let shown: Vec<String> = report.entries.iter().take(5).map(|e| format!("{}: {} ({})", e.record_id, e.kind, e.detail)).collect();
    Err(PipelineError::new(Stage::Ingest, ErrorClass::Validation, format!("{what}: {} problem(s): {}", report.len(), shown.join("; "))))
}

/// Detects boxes for region-less images and resolves nodule regions for
/// manifests that carry volumes.
pub fn prepare_regions(
    input: &DatasetInput,
    detector: Option<&DetectorSpec>,
    workers: usize,
) -> Result<(Manifest, ValidationReport), PipelineError> {
    let fail = err(Stage::Roi, ErrorClass::Io);
    let mut report = ValidationReport::default();
    let mut manifest = match detector {
        Some(spec) => {
            let (m, r) = attach_regions(&input.manifest, spec, &input.image_root, workers).map_err(|e| fail(e.to_string()))?;
            report.extend(r);
            m
        }
        None => input.manifest.clone(),
    };
    if !manifest.volumes.is_empty() {
        let volumes = manifest
            .volumes
            .iter()
            .map(|v| LoadedVolume::load(v, &input.image_root))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| fail(e.to_string()))?;
        let (_, r) = resolve_nodule_regions(&mut manifest, &volumes).map_err(|e| fail(e.to_string()))?;
        report.extend(r);
    }
    Ok((manifest, report))
}

fn region_mask(
    input: &DatasetInput,
    rec_volume: Option<&str>,
    region: &crate::manifest::RegionRecord,
    volumes: &mut HashMap<String, LoadedVolume>,
) -> Result<Option<BinaryMask>, String> {
    if let Some(sel) = region.extra.get("slice_selection") {
        let sel: SliceSelection = serde_json::from_value(sel.clone()).map_err(|e| format!("{}: slice_selection: {e}", region.region_id))?;
        let scan = rec_volume.unwrap_or(&sel.scan_id).to_string();
        if !volumes.contains_key(&scan) {
            let vol = input.manifest.volume(&scan).ok_or_else(|| format!("{}: unknown scan {scan}", region.region_id))?;
            volumes.insert(scan.clone(), LoadedVolume::load(vol, &input.image_root).map_err(|e| e.to_string())?);
        }
        return volumes[&scan].union_mask(&sel.nodule_id, sel.slice_index).map(Some).map_err(|e| e.to_string());
    }
    if let Some(rel) = &region.mask_ref {
        let path = input.image_root.join(rel);
        let img = image::open(&path).map_err(|e| format!("{}: {e}", path.display()))?.to_luma8();
        return Ok(Some(BinaryMask::from_gray(&img)));
    }
    Ok(None)
}

/// Samples regions per image and writes focal blobs under `out_dir`.
pub fn build_focal(
    inputs: &[DatasetInput],
    geometry: &GeometryConfig,
    policy: &SamplingPolicy,
    out_dir: &Path,
    config_digest: Option<String>,
) -> Result<FocalManifest, PipelineError> {
    let fail = err(Stage::Sample, ErrorClass::Io);
    policy.validate().map_err(|e| PipelineError::new(Stage::Sample, ErrorClass::Validation, e.to_string()))?;
    let store = BlobStore::new(out_dir);
    let mut focal = FocalManifest::new(config_digest);
    for input in inputs {
        let dataset = input.manifest.dataset_id();
        let geom = geometry.for_dataset(dataset);
        let mut volumes = HashMap::new();
        for rec in &input.manifest.records {
            let chosen = sample_regions(rec, policy);
            if chosen.is_empty() {
                continue;
            }
            let image = load_rgb(&input.image_root.join(&rec.image_ref)).map_err(|e| fail(e.to_string()))?;
            for region in &chosen {
                let mask = region_mask(input, rec.volume_ref.as_ref().map(|v| v.scan_id.as_str()), region, &mut volumes).map_err(&fail)?;
                let fi = build_focal_input(&image, &rec.image_ref, region, mask.as_ref(), &geom)
                    .map_err(|e| fail(format!("{}: {e}", region.region_id)))?;
                focal.records.push(
                    FocalRecord::persist(&fi, dataset, &rec.image_id, rec.modality, region, &store).map_err(|e| fail(e.to_string()))?,
                );
            }
        }
    }
    Ok(focal)
}

fn context(rec: &FocalRecord) -> RegionContext {
    RegionContext { dataset: Some(rec.dataset_id), anatomical_hint: rec.region.anatomical_site.clone() }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub region_key: String,
    pub template_id: String,
    pub template_version: u32,
    pub digest: String,
    pub text: String,
}

pub fn render_prompts(focal: &FocalManifest, prompts: &PromptLibrary) -> Result<Vec<PromptRecord>, PipelineError> {
    focal
        .records
        .iter()
        .map(|r| {
            let p = prompts
                .render_caption_prompt(r.modality.as_str(), &context(r))
                .map_err(|e| PipelineError::new(Stage::Prompt, ErrorClass::Validation, format!("{}: {e}", r.region_key)))?;
            Ok(PromptRecord {
                region_key: r.region_key.clone(),
                template_id: p.template_id,
                template_version: p.template_version,
                digest: p.digest,
                text: p.text,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub region_key: String,
    pub model: String,
    pub backend: String,
    pub text: String,
    pub request_digest: String,
}

fn read_blob(dir: &Path, rel: &str) -> Result<Vec<u8>, String> {
    std::fs::read(dir.join(rel)).map_err(|e| format!("{}: {e}", dir.join(rel).display()))
}

fn focal_images(rec: &FocalRecord, focal_dir: &Path, with_mask: bool) -> Result<Vec<RequestImage>, String> {
    let mask = if with_mask { Some(read_blob(focal_dir, &rec.mask_ref)?) } else { None };
    Ok(GenerationRequest::focal_images(read_blob(focal_dir, &rec.full_image_ref)?, read_blob(focal_dir, &rec.crop_ref)?, mask, with_mask))
}

/// Captions every focal record. Per-request failures come back in place.
pub fn generate_captions(
    focal: &FocalManifest,
    focal_dir: &Path,
    prompts: &PromptLibrary,
    gateway: &Gateway,
    model_label: &str,
    progress: &(dyn Fn(usize, usize) + Sync),
) -> Result<Vec<Result<CaptionRecord, String>>, PipelineError> {
    let fail = err(Stage::Generate, ErrorClass::Io);
    let rendered = render_prompts(focal, prompts)?;
    let mut reqs = Vec::with_capacity(focal.records.len());
    for (rec, p) in focal.records.iter().zip(rendered) {
        let prompt = RenderedPrompt {
            text: p.text,
            template_id: p.template_id,
            template_version: p.template_version,
            bindings: BTreeMap::new(),
            digest: p.digest,
        };
        let images = focal_images(rec, focal_dir, gateway.spec().region_aware).map_err(&fail)?;
        reqs.push(GenerationRequest::caption(prompt, images, rec.region_key.clone()));
    }
    let results = gateway.run_batch(&reqs, gateway.spec().max_parallel, progress);
    Ok(results
        .into_iter()
        .zip(&focal.records)
        .map(|(r, rec)| {
            r.map(|c| CaptionRecord {
                region_key: rec.region_key.clone(),
                model: model_label.to_string(),
                backend: c.backend,
                text: c.text,
                request_digest: c.digest,
            })
            .map_err(|e| format!("{}: {e}", rec.region_key))
        })
        .collect())
}

/// Questions for every focal record, in record order.
pub fn build_qa(focal: &FocalManifest, lib: &TemplateLibrary, policy: &QaPolicy) -> (Vec<QAItem>, ValidationReport) {
    let mut items = Vec::new();
    let mut report = ValidationReport::default();
    for rec in &focal.records {
        let out = instantiate_questions(&rec.region, rec.dataset_id, &rec.region_key, lib, policy);
        items.extend(out.items);
        report.extend(out.report);
    }
    (items, report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub llm_score: bool,
    pub judge_sees_image: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub answers: Vec<JudgedAnswer>,
    pub ratings: Vec<RegionRating>,
    pub datasets: BTreeMap<String, DatasetScore>,
}

pub fn dataset_of(region_key: &str) -> &str {
    region_key.split_once(':').map(|(d, _)| d).unwrap_or(region_key)
}

/// Judges and scores one model's captions. `focal` supplies region context
/// and, when the judge sees images, the focal blobs.
pub fn evaluate_captions(
    captions: &[CaptionRecord],
    items: &[QAItem],
    focal: Option<(&FocalManifest, &Path)>,
    judge: &Gateway,
    prompts: &PromptLibrary,
    opts: EvalOptions,
    progress: &(dyn Fn(usize, usize) + Sync),
) -> Result<Evaluation, PipelineError> {
    let caption_map: BTreeMap<String, String> = captions.iter().map(|c| (c.region_key.clone(), c.text.clone())).collect();
    let judged = eval::judge_all(&caption_map, items, judge, prompts, judge.spec().max_parallel, progress)
        .map_err(|e| classify_eval(Stage::Judge, e))?;
    let answers = judged.into_iter().collect::<Result<Vec<_>, _>>().map_err(|e| classify_eval(Stage::Judge, e))?;

    let ratings = if opts.llm_score { rate_all(captions, focal, judge, prompts, opts.judge_sees_image)? } else { Vec::new() };

    let mut datasets = BTreeMap::new();
    let mut keys: Vec<&str> = items.iter().map(|q| dataset_of(&q.region_id)).collect();
    keys.sort();
    keys.dedup();
    for ds in keys {
        let ds_items: Vec<QAItem> = items.iter().filter(|q| dataset_of(&q.region_id) == ds).cloned().collect();
        let ids: std::collections::HashSet<&str> = ds_items.iter().map(|q| q.qa_id.as_str()).collect();
        let ds_answers: Vec<JudgedAnswer> = answers.iter().filter(|a| ids.contains(a.qa_id.as_str())).cloned().collect();
        let meddlc: MedDlcScore = eval::score_meddlc(&ds_answers, &ds_items).map_err(|e| classify_eval(Stage::Score, e))?;
        let ds_ratings: Vec<RegionRating> = ratings.iter().filter(|r| dataset_of(&r.region) == ds).cloned().collect();
        let regions_rated = ds_ratings.len();
        let llm_score =
            if opts.llm_score { Some(score_llm(ds_ratings).map_err(|e| classify_eval(Stage::Score, e))?.model_score) } else { None };
        datasets.insert(ds.to_string(), DatasetScore { meddlc, llm_score, regions_rated });
    }
    Ok(Evaluation { answers, ratings, datasets })
}

fn rate_all(
    captions: &[CaptionRecord],
    focal: Option<(&FocalManifest, &Path)>,
    judge: &Gateway,
    prompts: &PromptLibrary,
    sees_image: bool,
) -> Result<Vec<RegionRating>, PipelineError> {
    use rayon::prelude::*;
    let by_key: HashMap<&str, &FocalRecord> =
        focal.map(|(f, _)| f.records.iter().map(|r| (r.region_key.as_str(), r)).collect()).unwrap_or_default();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(judge.spec().max_parallel)
        .build()
        .map_err(|e| PipelineError::new(Stage::Judge, ErrorClass::Io, e.to_string()))?;
    let results: Vec<Result<RegionRating, PipelineError>> = pool.install(|| {
        captions
            .par_iter()
            .map(|c| {
                let rec = by_key.get(c.region_key.as_str());
                let ctx = rec.map(|r| context(r)).unwrap_or_default();
                let images = match (sees_image, rec, focal) {
                    (true, Some(r), Some((_, dir))) => {
                        let mut imgs = focal_images(r, dir, false).map_err(|m| PipelineError::new(Stage::Judge, ErrorClass::Io, m))?;
                        imgs.truncate(2);
                        imgs
                    }
                    (true, _, _) => {
                        return Err(PipelineError::new(
                            Stage::Judge,
                            ErrorClass::Validation,
                            format!("{}: judge needs images but no focal record", c.region_key),
                        ))
                    }
                    _ => Vec::new(),
                };
                eval::rate_region(&c.region_key, &c.text, &ctx, images, judge, prompts).map_err(|e| classify_eval(Stage::Judge, e))
            })
            .collect()
    });
    results.into_iter().collect()
}

pub(crate) fn classify_eval(stage: Stage, e: eval::EvalError) -> PipelineError {
    use eval::EvalError::*;
    let class = match &e {
        Judge { .. } | Rating { .. } | UnparseableRatings(_) => ErrorClass::Backend,
        Degenerate(_) | NoRegions => ErrorClass::Degenerate,
        Prompt(_) | UnknownQa(_) | DuplicateAnswer(_) => ErrorClass::Validation,
    };
    PipelineError::new(stage, class, e.to_string())
}
