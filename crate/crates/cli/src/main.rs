use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use medcap_core::gateway::{BackendSpec, Gateway};
use medcap_core::ingest::{adapt_lidc, adapt_skincon, adapt_vindr, Ingested};
use medcap_core::manifest::{read_jsonl, write_atomic, write_jsonl, DatasetId, Manifest, ValidationReport};
use medcap_core::pipeline::stages::{self, CaptionRecord, DatasetInput, EvalOptions};
use medcap_core::pipeline::{run_pipeline, LoadedConfig, PipelineError, RunOptions};
use medcap_core::prompt::PromptLibrary;
use medcap_core::qa::{instantiate_questions, load_templates, QAItem, QaPolicy, TemplateLibrary};
use medcap_core::report::{emit_report, ReportFormat, ScoreCard};
use medcap_core::roi::DetectorSpec;
use medcap_core::sampler::{FocalManifest, FocalRecord, GeometryConfig, SamplingPolicy, StratifyBy};
use medcap_core::vocab::Vocabulary;

#[derive(Parser)]
#[command(name = "medcap", version, about = "Reference-free benchmark for regional medical image captions")]
struct Cli {
    /// Log filter, e.g. `info` or `medcap_core=debug`. Overrides RUST_LOG.
    #[arg(long, global = true)]
    log: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a raw dataset export into a canonical manifest.
    Ingest {
        #[arg(value_enum)]
        dataset: IngestDataset,
        /// Annotation table (VinDr, SkinCon) or scan listing (LIDC).
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Attribute vocabulary file replacing the shipped one.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Add detected lesion boxes to images that have no regions.
    DetectRoi {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        images: Option<PathBuf>,
        /// Detector spec in TOML; defaults to the color-blob baseline.
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long, default_value_t = 20.0)]
        tau: f64,
        #[arg(long, default_value_t = 50.0)]
        min_area: f64,
        #[arg(long, default_value_t = 4)]
        workers: usize,
    },
    /// Pick regions per image and write focal inputs.
    Sample {
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        /// Per-dataset margin, target size and pad value.
        #[arg(long)]
        dataset_config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        max_regions: usize,
        #[arg(long, value_enum, default_value = "pathology-label")]
        stratify_by: Stratify,
        /// Focal manifest path; crops go to `blobs/` beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Instantiate yes/no questions for sampled regions.
    Qa {
        /// Focal manifest or canonical manifest.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        neg_per_region: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Caption every focal input with one backend.
    Generate {
        #[arg(long)]
        focal_manifest: PathBuf,
        #[arg(long)]
        backend: String,
        #[command(flatten)]
        backends: BackendSource,
        /// Prompt templates directory.
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Model label recorded with each caption; defaults to the backend name.
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Judge captions against the question bank and write a scorecard.
    Evaluate {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        qa: PathBuf,
        #[arg(long)]
        judge: String,
        #[command(flatten)]
        backends: BackendSource,
        /// Supplies region context and, with --judge-sees-image, the images.
        #[arg(long)]
        focal_manifest: Option<PathBuf>,
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long, default_value = "General")]
        model_type: String,
        #[arg(long)]
        no_llm_score: bool,
        #[arg(long)]
        judge_sees_image: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the comparison table from scorecards.
    Report {
        #[arg(long = "scorecard", required = true)]
        scorecards: Vec<PathBuf>,
        #[arg(long, default_value = "table_text")]
        format: ReportFormat,
        /// Prints to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage from a run configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue the latest run directory for this config.
        #[arg(long)]
        resume: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum IngestDataset {
    Vindr,
    Lidc,
    Skincon,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stratify {
    PathologyLabel,
    AnatomicalSite,
}

/// Where backend specs are looked up by name.
#[derive(Args)]
struct BackendSource {
    /// TOML file with one `[[backend]]` table per backend.
    #[arg(long)]
    backends: Option<PathBuf>,
    /// Run configuration whose models and judge supply backends.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Response cache directory.
    #[arg(long, default_value = "cache")]
    cache: PathBuf,
}

#[derive(serde::Deserialize)]
struct BackendsFile {
    backend: Vec<BackendSpec>,
}

#[derive(Debug)]
struct Coded {
    code: u8,
    message: String,
}

impl std::fmt::Display for Coded {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Coded {}

fn coded(code: u8, message: impl Into<String>) -> anyhow::Error {
    Coded { code, message: message.into() }.into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(p) = cause.downcast_ref::<PipelineError>() {
            return p.exit_code() as u8;
        }
        if let Some(c) = cause.downcast_ref::<Coded>() {
            return c.code;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = match &cli.log {
        Some(f) => tracing_subscriber::EnvFilter::new(f),
        None => tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
    };
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Ingest { dataset, input, images, out, vocab } => ingest(dataset, &input, &images, &out, vocab.as_deref()),
        Command::DetectRoi { manifest, out, images, detector, tau, min_area, workers } => {
            let spec = match detector {
                Some(p) => toml::from_str(&read(&p)?).map_err(|e| coded(2, format!("{}: {e}", p.display())))?,
                None => DetectorSpec::baseline(tau, min_area),
            };
            detect_roi(&manifest, &out, images, &spec, workers)
        }
        Command::Sample { manifest, dataset_config, seed, max_regions, stratify_by, out } => {
            let stratify_by = match stratify_by {
                Stratify::PathologyLabel => StratifyBy::PathologyLabel,
                Stratify::AnatomicalSite => StratifyBy::AnatomicalSite,
            };
            let policy = SamplingPolicy { max_regions, seed: medcap_core::digest::derive_seed(seed, "sample"), stratify_by };
            sample(&manifest, dataset_config.as_deref(), &policy, &out)
        }
        Command::Qa { manifest, templates, seed, neg_per_region, out } => {
            let policy = QaPolicy { neg_per_region, seed: medcap_core::digest::derive_seed(seed, "qa") };
            qa(&manifest, templates.as_deref(), &policy, &out)
        }
        Command::Generate { focal_manifest, backend, backends, templates, label, out } => {
            generate(&focal_manifest, &backend, &backends, templates.as_deref(), label, &out)
        }
        Command::Evaluate { captions, qa, judge, backends, focal_manifest, templates, model_type, no_llm_score, judge_sees_image, out } => {
            let opts = EvalOptions { llm_score: !no_llm_score, judge_sees_image };
            evaluate(&captions, &qa, &judge, &backends, focal_manifest.as_deref(), templates.as_deref(), model_type, opts, &out)
        }
        Command::Report { scorecards, format, out } => report(&scorecards, format, out.as_deref()),
        Command::Run { config, seed, resume } => run(&config, seed, resume),
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("cannot write {}", path.display()))
}

fn ingest(dataset: IngestDataset, input: &Path, images: &Path, out: &Path, vocab: Option<&Path>) -> Result<()> {
    let id = match dataset {
        IngestDataset::Vindr => DatasetId::VindrCxr,
        IngestDataset::Lidc => DatasetId::LidcIdri,
        IngestDataset::Skincon => DatasetId::Skincon,
    };
    let vocab = match vocab {
        Some(p) => Vocabulary::load(p),
        None => Vocabulary::shipped(id),
    }
    .map_err(|e| coded(2, e.to_string()))?;
    let result: Ingested = match dataset {
        IngestDataset::Vindr => adapt_vindr(input, images, &vocab),
        IngestDataset::Lidc => adapt_lidc(input, images, &vocab),
        IngestDataset::Skincon => adapt_skincon(input, images, &vocab),
    }
    .map_err(|e| coded(2, e.to_string()))?;
    result.manifest.write(out).with_context(|| format!("cannot write {}", out.display()))?;
    let report_path = out.with_extension("validation.json");
    write_text(&report_path, &(serde_json::to_string_pretty(&result.report)? + "\n"))?;
    eprintln!(
        "{} records, {} regions, {} volumes; {} issue(s) in {}",
        result.manifest.records.len(),
        result.manifest.region_count(),
        result.manifest.volumes.len(),
        result.report.len(),
        report_path.display()
    );
    Ok(())
}

fn detect_roi(manifest: &Path, out: &Path, images: Option<PathBuf>, spec: &DetectorSpec, workers: usize) -> Result<()> {
    let overridden = images.is_some();
    let input = DatasetInput::load(manifest, images)?;
    let (mut m, report) = stages::prepare_regions(&input, Some(spec), workers)?;
    if overridden || focal_dir(out) != focal_dir(manifest) {
        m.header.image_root = Some(absolute(&input.image_root).display().to_string());
    }
    m.write(out).with_context(|| format!("cannot write {}", out.display()))?;
    eprintln!("{} regions; {} issue(s)", m.region_count(), report.len());
    Ok(())
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn sample(manifests: &[PathBuf], geometry: Option<&Path>, policy: &SamplingPolicy, out: &Path) -> Result<()> {
    let geom = match geometry {
        Some(p) => GeometryConfig::load(p).map_err(|e| coded(2, e.to_string()))?,
        None => GeometryConfig::shipped(),
    };
    let mut inputs = Vec::new();
    for path in manifests {
        let input = DatasetInput::load(path, None)?;
        stages::ensure_valid(&stages::validate_dataset(&input), &path.display().to_string())?;
        let (manifest, _) = stages::prepare_regions(&input, None, 1)?;
        inputs.push(DatasetInput { manifest, image_root: input.image_root });
    }
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let focal = stages::build_focal(&inputs, &geom, policy, dir, None)?;
    focal.write(out).with_context(|| format!("cannot write {}", out.display()))?;
    eprintln!("{} focal inputs", focal.records.len());
    Ok(())
}

fn qa_library(dir: Option<&Path>) -> Result<TemplateLibrary> {
    match dir {
        Some(d) => load_templates(d).map_err(|e| coded(2, e.to_string())),
        None => Ok(TemplateLibrary::shipped()),
    }
}

fn prompt_library(dir: Option<&Path>) -> Result<PromptLibrary> {
    match dir {
        Some(d) => PromptLibrary::load_dir(d).map_err(|e| coded(2, e.to_string())),
        None => Ok(PromptLibrary::shipped()),
    }
}

fn qa(manifest: &Path, templates: Option<&Path>, policy: &QaPolicy, out: &Path) -> Result<()> {
    let text = read(manifest)?;
    let origin = manifest.display().to_string();
    let lib = qa_library(templates)?;
    let (items, report) = if FocalManifest::sniff(&text) {
        let focal = FocalManifest::parse_str(&text, &origin).map_err(|e| coded(2, e.to_string()))?;
        stages::build_qa(&focal, &lib, policy)
    } else {
        let m = Manifest::parse_str(&text, &origin).map_err(|e| coded(2, e.to_string()))?;
        let mut items = Vec::new();
        let mut report = ValidationReport::default();
        for region in m.records.iter().flat_map(|r| &r.regions) {
            let key = FocalRecord::region_key_for(m.dataset_id(), &region.region_id);
            let got = instantiate_questions(region, m.dataset_id(), &key, &lib, policy);
            items.extend(got.items);
            report.extend(got.report);
        }
        (items, report)
    };
    write_jsonl(out, &items).with_context(|| format!("cannot write {}", out.display()))?;
    write_text(&out.with_extension("report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    let pos = items.iter().filter(|q| q.polarity == medcap_core::qa::Polarity::Positive).count();
    eprintln!("{} questions ({pos} positive, {} negative); {} region(s) skipped", items.len(), items.len() - pos, report.len());
    Ok(())
}

fn lookup_backend(name: &str, src: &BackendSource) -> Result<BackendSpec> {
    let mut specs: Vec<BackendSpec> = Vec::new();
    if let Some(p) = &src.backends {
        let file: BackendsFile = toml::from_str(&read(p)?).map_err(|e| coded(2, format!("{}: {e}", p.display())))?;
        specs.extend(file.backend);
    }
    if let Some(p) = &src.config {
        let cfg = LoadedConfig::load(p, None)?;
        specs.extend(cfg.config.models.into_iter().map(|m| m.backend));
        specs.push(cfg.config.judge.backend);
    }
    if src.backends.is_none() && src.config.is_none() {
        return Err(coded(2, "pass --backends <file> or --config <run.toml> to define backends"));
    }
    specs.into_iter().find(|s| s.name == name).ok_or_else(|| coded(2, format!("no backend named {name}")))
}

fn open_gateway(name: &str, src: &BackendSource) -> Result<Gateway> {
    let spec = lookup_backend(name, src)?;
    Gateway::open(spec, &src.cache).map_err(|e| coded(2, e.to_string()))
}

/// Directory a file's relative references resolve against.
fn focal_dir(path: &Path) -> &Path {
    path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn generate(
    focal_path: &Path,
    backend: &str,
    src: &BackendSource,
    templates: Option<&Path>,
    label: Option<String>,
    out: &Path,
) -> Result<()> {
    let focal = FocalManifest::read(focal_path).map_err(|e| coded(2, e.to_string()))?;
    let prompts = prompt_library(templates)?;
    let gw = open_gateway(backend, src)?;
    let label = label.unwrap_or_else(|| backend.to_string());
    let results = stages::generate_captions(&focal, focal_dir(focal_path), &prompts, &gw, &label, &|done, total| {
        tracing::info!(done, total, "captioning");
    })?;
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for r in results {
        match r {
            Ok(c) => ok.push(c),
            Err(e) => failed.push(e),
        }
    }
    write_jsonl(out, &ok).with_context(|| format!("cannot write {}", out.display()))?;
    eprintln!("{} captions, {} backend call(s)", ok.len(), gw.backend_calls());
    if !failed.is_empty() {
        for f in &failed {
            eprintln!("failed: {f}");
        }
        return Err(coded(3, format!("{} of {} requests failed", failed.len(), failed.len() + ok.len())));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    captions_path: &Path,
    qa_path: &Path,
    judge: &str,
    src: &BackendSource,
    focal_path: Option<&Path>,
    templates: Option<&Path>,
    model_type: String,
    opts: EvalOptions,
    out: &Path,
) -> Result<()> {
    let captions: Vec<CaptionRecord> = read_jsonl(captions_path).map_err(|e| coded(2, e.to_string()))?;
    let items: Vec<QAItem> = read_jsonl(qa_path).map_err(|e| coded(2, e.to_string()))?;
    let first = captions.first().ok_or_else(|| coded(4, format!("{}: no captions", captions_path.display())))?;
    let (model, backend) = (first.model.clone(), first.backend.clone());
    let focal = focal_path.map(|p| FocalManifest::read(p).map_err(|e| coded(2, e.to_string()))).transpose()?;
    if opts.judge_sees_image && focal.is_none() {
        return Err(coded(2, "--judge-sees-image needs --focal-manifest"));
    }
    let prompts = prompt_library(templates)?;
    let gw = open_gateway(judge, src)?;
    let focal_ref = focal.as_ref().zip(focal_path).map(|(f, p)| (f, focal_dir(p)));
    let ev = stages::evaluate_captions(&captions, &items, focal_ref, &gw, &prompts, opts, &|done, total| {
        tracing::info!(done, total, "judging");
    })?;
    let average = ScoreCard::average_of(&ev.datasets).ok_or_else(|| coded(4, "no scored datasets"))?;
    let card = ScoreCard {
        model,
        model_type,
        backend,
        judge: judge.to_string(),
        config_digest: focal.and_then(|f| f.header.config_digest).unwrap_or_default(),
        qa_policy: QaPolicy { neg_per_region: neg_per_region(&items), seed: 0 },
        llm_judge_sees_image: opts.judge_sees_image,
        datasets: ev.datasets,
        average,
    };
    write_text(out, &(serde_json::to_string_pretty(&card)? + "\n"))?;
    write_jsonl(&out.with_extension("judged.jsonl"), &ev.answers)?;
    if opts.llm_score {
        write_jsonl(&out.with_extension("ratings.jsonl"), &ev.ratings)?;
    }
    eprintln!("{} answers judged, {} backend call(s)", ev.answers.len(), gw.backend_calls());
    Ok(())
}

/// Largest negative count seen on one region.
fn neg_per_region(items: &[QAItem]) -> usize {
    let mut per: BTreeMap<&str, usize> = BTreeMap::new();
    for q in items.iter().filter(|q| q.polarity == medcap_core::qa::Polarity::Negative) {
        *per.entry(q.region_id.as_str()).or_default() += 1;
    }
    per.values().copied().max().unwrap_or(0)
}

fn report(paths: &[PathBuf], format: ReportFormat, out: Option<&Path>) -> Result<()> {
    let cards = paths
        .iter()
        .map(|p| serde_json::from_str::<ScoreCard>(&read(p)?).map_err(|e| coded(2, format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>>>()?;
    let text = emit_report(&cards, format).map_err(|e| coded(4, e.to_string()))?;
    match out {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(config: &Path, seed: Option<u64>, resume: bool) -> Result<()> {
    let cfg = LoadedConfig::load(config, seed)?;
    let art = run_pipeline(&cfg, RunOptions { resume })?;
    let table = std::fs::read_to_string(art.run_dir.join("report.txt")).unwrap_or_default();
    print!("{table}");
    eprintln!("run directory: {}", art.run_dir.display());
    eprintln!("backend calls: {}", art.backend_calls);
    Ok(())
}
