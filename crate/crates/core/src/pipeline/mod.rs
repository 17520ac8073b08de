//! End-to-end orchestration.
//!
//! A run lives in `<output_dir>/<digest16>-<timestamp>/`. Every stage writes
//! its artifact atomically and, when resuming, a stage whose artifact exists
//! is skipped. Backend responses live in a cache shared across runs.

mod config;
pub mod stages;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{DatasetEntry, JudgeEntry, LoadedConfig, ModelEntry, QaSection, RunConfig, SamplingSection};
pub use stages::{CaptionRecord, DatasetInput, EvalOptions, Evaluation, PromptRecord};

use crate::digest::derive_seed;
use crate::eval::{JudgedAnswer, RegionRating};
use crate::gateway::Gateway;
use crate::manifest::{read_jsonl, write_atomic, write_jsonl, Manifest, ValidationReport};
use crate::prompt::PromptLibrary;
use crate::qa::{load_templates, QAItem, QaPolicy, TemplateLibrary};
use crate::report::{emit_report, ReportFormat, ScoreCard};
use crate::sampler::{FocalManifest, GeometryConfig, SamplingPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Ingest,
    Roi,
    Sample,
    Prompt,
    Generate,
    Qa,
    Judge,
    Score,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        f.write_str(&s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Backend,
    Degenerate,
    Io,
}

#[derive(Debug, Error)]
#[error("{stage} stage failed: {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub class: ErrorClass,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: Stage, class: ErrorClass, message: impl Into<String>) -> Self {
        Self { stage, class, message: message.into() }
    }

    /// 2 validation, 3 backend, 4 degenerate scoring input, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self.class {
            ErrorClass::Validation => 2,
            ErrorClass::Backend => 3,
            ErrorClass::Degenerate => 4,
            ErrorClass::Io => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub skipped: bool,
    pub finished_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_digest: String,
    pub tool_version: String,
    pub created_at: String,
    pub seed: u64,
    pub neg_per_region: usize,
    pub llm_judge_sees_image: bool,
    pub stages: Vec<StageRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub config_digest: String,
    pub focal_manifest: PathBuf,
    pub qa_file: PathBuf,
    pub captions: BTreeMap<String, PathBuf>,
    pub judged: BTreeMap<String, PathBuf>,
    pub scorecards: Vec<ScoreCard>,
    pub reports: Vec<PathBuf>,
    /// Backend calls made during this invocation, retries included.
    pub backend_calls: u64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub resume: bool,
}

fn io(stage: Stage) -> impl Fn(String) -> PipelineError {
    move |m| PipelineError::new(stage, ErrorClass::Io, m)
}

fn now() -> String {
    chrono::Utc::now().format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

/// Most recent run directory for `digest`, if any.
pub fn latest_run_dir(output_dir: &Path, digest: &str) -> Option<PathBuf> {
    let prefix = format!("{}-", &digest[..16]);
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(output_dir)
        .ok()?
        .flatten()
        .filter(|e| e.file_name().to_string_lossy().starts_with(&prefix) && e.path().is_dir())
        .map(|e| e.path())
        .collect();
    dirs.sort();
    dirs.pop()
}

fn new_run_dir(output_dir: &Path, digest: &str) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
    let base = output_dir.join(format!("{}-{stamp}", &digest[..16]));
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}.{n}", base.display()));
        n += 1;
    }
    dir
}

pub fn prompt_library(cfg: &LoadedConfig) -> Result<PromptLibrary, PipelineError> {
    match &cfg.config.prompt_templates {
        Some(d) => {
            PromptLibrary::load_dir(&cfg.resolve(d)).map_err(|e| PipelineError::new(Stage::Config, ErrorClass::Validation, e.to_string()))
        }
        None => Ok(PromptLibrary::shipped()),
    }
}

pub fn qa_library(cfg: &LoadedConfig) -> Result<TemplateLibrary, PipelineError> {
    match &cfg.config.qa_templates {
        Some(d) => load_templates(&cfg.resolve(d)).map_err(|e| PipelineError::new(Stage::Config, ErrorClass::Validation, e.to_string())),
        None => Ok(TemplateLibrary::shipped()),
    }
}

pub fn geometry(cfg: &LoadedConfig) -> Result<GeometryConfig, PipelineError> {
    match &cfg.config.geometry {
        Some(p) => {
            GeometryConfig::load(&cfg.resolve(p)).map_err(|e| PipelineError::new(Stage::Config, ErrorClass::Validation, e.to_string()))
        }
        None => Ok(GeometryConfig::shipped()),
    }
}

/// Sampling and QA seeds are derived from the global seed.
pub fn sampling_policy(cfg: &RunConfig) -> SamplingPolicy {
    SamplingPolicy { max_regions: cfg.sampling.max_regions, seed: derive_seed(cfg.seed, "sample"), stratify_by: cfg.sampling.stratify_by }
}

pub fn qa_policy(cfg: &RunConfig) -> QaPolicy {
    QaPolicy { neg_per_region: cfg.qa.neg_per_region, seed: derive_seed(cfg.seed, "qa") }
}

struct Run {
    dir: PathBuf,
    meta: RunMeta,
    resume: bool,
}

impl Run {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// True when the stage can be skipped.
    fn done(&self, rel: &str) -> bool {
        self.resume && self.path(rel).exists()
    }

    fn finish(&mut self, stage: Stage, skipped: bool) -> Result<(), PipelineError> {
        self.meta.stages.push(StageRecord { stage, skipped, finished_at: now() });
        let mut bytes = serde_json::to_vec_pretty(&self.meta).expect("meta serializes");
        bytes.push(b'\n');
        write_atomic(&self.path("run.json"), &bytes).map_err(|e| io(stage)(e.to_string()))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T, stage: Stage) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(|e| io(stage)(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, stage: Stage) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| io(stage)(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| io(stage)(format!("{}: {e}", path.display())))
}

fn jsonl<T: serde::de::DeserializeOwned>(path: &Path, stage: Stage) -> Result<Vec<T>, PipelineError> {
    read_jsonl(path).map_err(|e| io(stage)(e.to_string()))
}

fn save_jsonl<T: Serialize>(path: &Path, items: &[T], stage: Stage) -> Result<(), PipelineError> {
    write_jsonl(path, items).map_err(|e| io(stage)(e.to_string()))
}

/// Runs every stage for `cfg`. With `resume`, continues the latest run
/// directory for the same config digest.
pub fn run_pipeline(cfg: &LoadedConfig, opts: RunOptions) -> Result<RunArtifacts, PipelineError> {
    let c = &cfg.config;
    let prompts = prompt_library(cfg)?;
    let qa_lib = qa_library(cfg)?;
    let geom = geometry(cfg)?;
    let output = cfg.output_dir();
    let cache = cfg.cache_dir();

    let existing = if opts.resume { latest_run_dir(&output, &cfg.digest) } else { None };
    let dir = existing.clone().unwrap_or_else(|| new_run_dir(&output, &cfg.digest));
    std::fs::create_dir_all(&dir).map_err(|e| io(Stage::Config)(format!("{}: {e}", dir.display())))?;
    let meta = match existing.as_ref().map(|d| d.join("run.json")).filter(|p| p.exists()) {
        Some(p) => read_json::<RunMeta>(&p, Stage::Config)?,
        None => RunMeta {
            config_digest: cfg.digest.clone(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            created_at: now(),
            seed: c.seed,
            neg_per_region: c.qa.neg_per_region,
            llm_judge_sees_image: c.judge.sees_image,
            stages: Vec::new(),
        },
    };
    let mut run = Run { dir, meta, resume: opts.resume };
    write_json(&run.path("config.json"), &c, Stage::Config)?;
    tracing::info!(run_dir = %run.dir.display(), digest = %cfg.digest, "starting run");

    // ingest and roi
    let mut inputs = Vec::new();
    let mut notes = ValidationReport::default();
    let need_manifests = !run.done("focal.jsonl");
    for (i, d) in c.datasets.iter().enumerate() {
        if !need_manifests {
            break;
        }
        let input = DatasetInput::load(&cfg.resolve(&d.manifest), d.image_root.as_ref().map(|p| cfg.resolve(p)))?;
        stages::ensure_valid(&stages::validate_dataset(&input), &d.manifest.display().to_string())?;
        let rel = format!("manifests/{i:02}_{}.jsonl", input.manifest.dataset_id());
        let manifest = if run.done(&rel) {
            Manifest::read(&run.path(&rel)).map_err(|e| io(Stage::Roi)(e.to_string()))?
        } else {
            let (m, r) = stages::prepare_regions(&input, d.detector.as_ref(), 4)?;
            notes.extend(r);
            m.write(&run.path(&rel)).map_err(|e| io(Stage::Roi)(e.to_string()))?;
            m
        };
        inputs.push(DatasetInput { manifest, image_root: input.image_root });
    }
    if need_manifests {
        let ds: Vec<_> = inputs.iter().map(|i| i.manifest.dataset_id()).collect();
        if (1..ds.len()).any(|k| ds[..k].contains(&ds[k])) {
            return Err(PipelineError::new(Stage::Ingest, ErrorClass::Validation, "two manifests share a dataset id"));
        }
        write_json(&run.path("validation.json"), &notes, Stage::Roi)?;
    }
    run.finish(Stage::Ingest, !need_manifests)?;
    run.finish(Stage::Roi, !need_manifests)?;

    // sample
    let focal_path = run.path("focal.jsonl");
    let focal = if run.done("focal.jsonl") {
        run.finish(Stage::Sample, true)?;
        FocalManifest::read(&focal_path).map_err(|e| io(Stage::Sample)(e.to_string()))?
    } else {
        let f = stages::build_focal(&inputs, &geom, &sampling_policy(c), &run.dir, Some(cfg.digest.clone()))?;
        f.write(&focal_path).map_err(|e| io(Stage::Sample)(e.to_string()))?;
        run.finish(Stage::Sample, false)?;
        f
    };
    if focal.records.is_empty() {
        return Err(PipelineError::new(Stage::Sample, ErrorClass::Degenerate, "no regions were sampled"));
    }

    // prompt
    let skip = run.done("prompts.jsonl");
    if !skip {
        save_jsonl(&run.path("prompts.jsonl"), &stages::render_prompts(&focal, &prompts)?, Stage::Prompt)?;
    }
    run.finish(Stage::Prompt, skip)?;

    // generate
    let mut calls = 0;
    let mut caption_files = BTreeMap::new();
    let mut all_captions = BTreeMap::new();
    let skip_all = c.models.iter().all(|m| run.done(&format!("captions/{}.jsonl", m.backend.name)));
    for m in &c.models {
        let rel = format!("captions/{}.jsonl", m.backend.name);
        let captions: Vec<CaptionRecord> = if run.done(&rel) {
            jsonl(&run.path(&rel), Stage::Generate)?
        } else {
            let gw = Gateway::open(m.backend.clone(), &cache)
                .map_err(|e| PipelineError::new(Stage::Generate, ErrorClass::Validation, e.to_string()))?;
            let out = stages::generate_captions(&focal, &run.dir, &prompts, &gw, &m.label, &|done, total| {
                tracing::debug!(model = %m.label, done, total, "captioning");
            })?;
            calls += gw.backend_calls();
            let failures: Vec<&String> = out.iter().filter_map(|r| r.as_ref().err()).collect();
            if !failures.is_empty() {
                let shown: Vec<&str> = failures.iter().take(3).map(|s| s.as_str()).collect();
                return Err(PipelineError::new(
                    Stage::Generate,
                    ErrorClass::Backend,
                    format!("{}: {} of {} requests failed: {}", m.label, failures.len(), out.len(), shown.join("; ")),
                ));
            }
            let captions: Vec<CaptionRecord> = out.into_iter().flatten().collect();
            save_jsonl(&run.path(&rel), &captions, Stage::Generate)?;
            captions
        };
        caption_files.insert(m.label.clone(), run.path(&rel));
        all_captions.insert(m.backend.name.clone(), captions);
    }
    run.finish(Stage::Generate, skip_all)?;

    // qa
    let qa_path = run.path("qa.jsonl");
    let items: Vec<QAItem> = if run.done("qa.jsonl") {
        run.finish(Stage::Qa, true)?;
        jsonl(&qa_path, Stage::Qa)?
    } else {
        let (items, report) = stages::build_qa(&focal, &qa_lib, &qa_policy(c));
        write_json(&run.path("qa_report.json"), &report, Stage::Qa)?;
        save_jsonl(&qa_path, &items, Stage::Qa)?;
        run.finish(Stage::Qa, false)?;
        items
    };

    // judge and score
    let opts_eval = EvalOptions { llm_score: c.judge.llm_score, judge_sees_image: c.judge.sees_image };
    let mut judge: Option<Gateway> = None;
    let mut cards = Vec::new();
    let mut judged_files = BTreeMap::new();
    let skip_judge = c.models.iter().all(|m| run.done(&format!("scorecards/{}.json", m.backend.name)));
    for m in &c.models {
        let name = &m.backend.name;
        let card_rel = format!("scorecards/{name}.json");
        let judged_rel = format!("judged/{name}.jsonl");
        judged_files.insert(m.label.clone(), run.path(&judged_rel));
        if run.done(&card_rel) {
            cards.push(read_json::<ScoreCard>(&run.path(&card_rel), Stage::Score)?);
            continue;
        }
        if judge.is_none() {
            judge = Some(
                Gateway::open(c.judge.backend.clone(), &cache)
                    .map_err(|e| PipelineError::new(Stage::Judge, ErrorClass::Validation, e.to_string()))?,
            );
        }
        let gw = judge.as_ref().expect("judge opened");
        let before = gw.backend_calls();
        let ev = stages::evaluate_captions(&all_captions[name], &items, Some((&focal, &run.dir)), gw, &prompts, opts_eval, &|_, _| {})?;
        calls += gw.backend_calls() - before;
        save_jsonl::<JudgedAnswer>(&run.path(&judged_rel), &ev.answers, Stage::Judge)?;
        if opts_eval.llm_score {
            save_jsonl::<RegionRating>(&run.path(&format!("ratings/{name}.jsonl")), &ev.ratings, Stage::Judge)?;
        }
        let average = ScoreCard::average_of(&ev.datasets)
            .ok_or_else(|| PipelineError::new(Stage::Score, ErrorClass::Degenerate, "no scored datasets"))?;
        let card = ScoreCard {
            model: m.label.clone(),
            model_type: m.model_type.clone(),
            backend: name.clone(),
            judge: c.judge.backend.name.clone(),
            config_digest: cfg.digest.clone(),
            qa_policy: QaPolicy { neg_per_region: c.qa.neg_per_region, seed: c.seed },
            llm_judge_sees_image: c.judge.sees_image,
            datasets: ev.datasets,
            average,
        };
        write_json(&run.path(&card_rel), &card, Stage::Score)?;
        cards.push(card);
    }
    run.finish(Stage::Judge, skip_judge)?;
    run.finish(Stage::Score, skip_judge)?;

    // report
    let mut reports = Vec::new();
    for format in [ReportFormat::TableText, ReportFormat::MachineReadable, ReportFormat::Delimited] {
        let path = run.path(&format!("report.{}", format.extension()));
        if !run.done(path.file_name().and_then(|n| n.to_str()).unwrap_or_default()) {
            let text = emit_report(&cards, format).map_err(|e| PipelineError::new(Stage::Report, ErrorClass::Degenerate, e.to_string()))?;
            write_atomic(&path, text.as_bytes()).map_err(|e| io(Stage::Report)(e.to_string()))?;
        }
        reports.push(path);
    }
    run.finish(Stage::Report, false)?;

    Ok(RunArtifacts {
        config_digest: cfg.digest.clone(),
        focal_manifest: focal_path,
        qa_file: qa_path,
        captions: caption_files,
        judged: judged_files,
        scorecards: cards,
        reports,
        backend_calls: calls,
        run_dir: run.dir,
    })
}
