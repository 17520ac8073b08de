use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ErrorClass, PipelineError, Stage};
use crate::digest::{sha256_hex, FieldHasher};
use crate::gateway::BackendSpec;
use crate::roi::DetectorSpec;
use crate::sampler::StratifyBy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    /// Canonical manifest produced by `ingest`.
    pub manifest: PathBuf,
    /// Overrides the manifest's own image root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_root: Option<PathBuf>,
    /// Fills image records that have no regions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector: Option<DetectorSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub label: String,
    #[serde(rename = "type", default = "default_type")]
    pub model_type: String,
    pub backend: BackendSpec,
}

fn default_type() -> String {
    "General".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeEntry {
    pub backend: BackendSpec,
    #[serde(default = "yes")]
    pub llm_score: bool,
    /// Attach full image and crop to LLM-score requests.
    #[serde(default)]
    pub sees_image: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub max_regions: usize,
    pub stratify_by: StratifyBy,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self { max_regions: 5, stratify_by: StratifyBy::PathologyLabel }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QaSection {
    pub neg_per_region: usize,
}

impl Default for QaSection {
    fn default() -> Self {
        Self { neg_per_region: 2 }
    }
}

/// The run configuration file. Relative paths resolve against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Response cache shared across runs; defaults to `<output_dir>/cache`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_templates: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa_templates: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<PathBuf>,
    #[serde(default)]
    pub sampling: SamplingSection,
    #[serde(default)]
    pub qa: QaSection,
    pub datasets: Vec<DatasetEntry>,
    pub models: Vec<ModelEntry>,
    pub judge: JudgeEntry,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

/// A parsed config with its base directory and provenance digest.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    pub digest: String,
}

fn invalid(message: impl Into<String>) -> PipelineError {
    PipelineError::new(Stage::Config, ErrorClass::Validation, message)
}

impl LoadedConfig {
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_str(&text, &path.display().to_string(), base, seed_override)
    }

    pub fn from_str(text: &str, origin: &str, base_dir: PathBuf, seed_override: Option<u64>) -> Result<Self, PipelineError> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| invalid(format!("{origin}: {e}")))?;
        if let Some(s) = seed_override {
            config.seed = s;
        }
        let mut loaded = Self { config, base_dir, digest: String::new() };
        loaded.validate()?;
        loaded.digest = loaded.compute_digest()?;
        Ok(loaded)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }

    pub fn cache_dir(&self) -> PathBuf {
        match &self.config.cache_dir {
            Some(p) => self.resolve(p),
            None => self.output_dir().join("cache"),
        }
    }

    fn validate(&self) -> Result<(), PipelineError> {
        let c = &self.config;
        if c.datasets.is_empty() {
            return Err(invalid("no datasets configured"));
        }
        if c.models.is_empty() {
            return Err(invalid("no caption models configured"));
        }
        if c.sampling.max_regions == 0 {
            return Err(invalid("sampling.max_regions must be at least 1"));
        }
        for d in &c.datasets {
            let p = self.resolve(&d.manifest);
            if !p.is_file() {
                return Err(invalid(format!("manifest {} does not exist", p.display())));
            }
            if let Some(root) = &d.image_root {
                if !self.resolve(root).is_dir() {
                    return Err(invalid(format!("image root {} does not exist", self.resolve(root).display())));
                }
            }
            if let Some(det) = &d.detector {
                det.validate().map_err(|e| invalid(e.to_string()))?;
            }
        }
        for p in [&c.prompt_templates, &c.qa_templates].into_iter().flatten() {
            if !self.resolve(p).is_dir() {
                return Err(invalid(format!("template directory {} does not exist", self.resolve(p).display())));
            }
        }
        if let Some(g) = &c.geometry {
            if !self.resolve(g).is_file() {
                return Err(invalid(format!("geometry file {} does not exist", self.resolve(g).display())));
            }
        }
        let mut names = BTreeSet::new();
        let mut labels = BTreeSet::new();
        for m in &c.models {
            m.backend.validate().map_err(|e| invalid(e.to_string()))?;
            if !names.insert(m.backend.name.as_str()) {
                return Err(invalid(format!("backend name {} used twice", m.backend.name)));
            }
            if !labels.insert(m.label.as_str()) {
                return Err(invalid(format!("model label {} used twice", m.label)));
            }
        }
        c.judge.backend.validate().map_err(|e| invalid(e.to_string()))?;
        if names.contains(c.judge.backend.name.as_str()) {
            return Err(invalid(format!("judge backend name {} is also a caption backend", c.judge.backend.name)));
        }
        Ok(())
    }

    /// Digest of the config as written plus the bytes of every input file it
    /// names. Paths enter as written, so the digest is machine independent.
    /// Output and cache locations are left out.
    fn compute_digest(&self) -> Result<String, PipelineError> {
        let mut h = FieldHasher::new();
        h.field(b"medcap-config-v1").field(env!("CARGO_PKG_VERSION").as_bytes());
        let mut semantic = self.config.clone();
        semantic.output_dir = default_output();
        semantic.cache_dir = None;
        h.field(serde_json::to_string(&semantic).expect("config serializes").as_bytes());
        let c = &self.config;
        let mut files: Vec<PathBuf> = c.datasets.iter().map(|d| self.resolve(&d.manifest)).collect();
        files.extend(c.geometry.iter().map(|g| self.resolve(g)));
        for dir in [&c.prompt_templates, &c.qa_templates].into_iter().flatten() {
            let mut in_dir: Vec<PathBuf> = std::fs::read_dir(self.resolve(dir))
                .map_err(|e| invalid(e.to_string()))?
                .flatten()
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "toml"))
                .collect();
            in_dir.sort();
            files.extend(in_dir);
        }
        for f in files {
            let bytes = std::fs::read(&f).map_err(|e| invalid(format!("{}: {e}", f.display())))?;
            h.field(sha256_hex(&bytes).as_bytes());
        }
        Ok(h.finish())
    }
}
