//! Caption and judge prompts rendered from versioned template files.
//!
//! Templates are TOML documents with a `body` containing `{{name}}`
//! placeholders. Substitution is a single pass, so bound values are never
//! rescanned for placeholders. Caption and question text inside judge prompts
//! is written as JSON string literals on their own labelled line, which keeps
//! hostile text from breaking out of its slot.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::manifest::DatasetId;
use crate::qa::QAItem;

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("no caption template for modality {modality:?}; available: {available:?}")]
    UnknownModality { modality: String, available: Vec<String> },
    #[error("no {0} template loaded")]
    MissingTemplate(&'static str),
    #[error("caption is empty")]
    EmptyCaption,
    #[error("question is empty")]
    EmptyQuestion,
    #[error("template {path}: {message}")]
    Template { path: String, message: String },
    #[error("duplicate template id {0}")]
    DuplicateTemplate(String),
    #[error("unresolved placeholder {{{{{0}}}}}")]
    Unresolved(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Caption,
    Verification,
    LlmScore,
}

impl TemplateKind {
    fn name(&self) -> &'static str {
        match self {
            Self::Caption => "caption",
            Self::Verification => "verification",
            Self::LlmScore => "llm_score",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintClass {
    RegionFocus,
    Terminology,
    ReportStyle,
}

impl ConstraintClass {
    pub const ALL: [ConstraintClass; 3] = [Self::RegionFocus, Self::Terminology, Self::ReportStyle];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Constraint {
    pub class: ConstraintClass,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub kind: TemplateKind,
    #[serde(default)]
    pub modality: Option<String>,
    pub version: u32,
    pub placeholders: Vec<String>,
    pub body: String,
    #[serde(default)]
    pub constraints: Vec<Constraint>,
    /// Set when the wording was rebuilt from stated constraints rather than copied.
    #[serde(default)]
    pub reconstructed: bool,
}

/// Splits `body` into literal text and placeholder names.
fn scan(body: &str) -> Result<Vec<Piece<'_>>, String> {
    let mut out = Vec::new();
    let mut rest = body;
    while let Some(start) = rest.find("{{") {
        out.push(Piece::Text(&rest[..start]));
        let after = &rest[start + 2..];
        let end = after.find("}}").ok_or_else(|| "unterminated placeholder".to_string())?;
        let name = after[..end].trim();
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(format!("bad placeholder name {name:?}"));
        }
        out.push(Piece::Slot(name));
        rest = &after[end + 2..];
    }
    out.push(Piece::Text(rest));
    Ok(out)
}

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

impl PromptTemplate {
    pub fn parse(text: &str, origin: &str) -> Result<Self, PromptError> {
        let t: Self = toml::from_str(text).map_err(|e| PromptError::Template { path: origin.into(), message: e.to_string() })?;
        t.check().map_err(|message| PromptError::Template { path: origin.into(), message })?;
        Ok(t)
    }

    fn check(&self) -> Result<(), String> {
        let declared: BTreeSet<&str> = self.placeholders.iter().map(String::as_str).collect();
        for piece in scan(&self.body)? {
            if let Piece::Slot(name) = piece {
                if !declared.contains(name) {
                    return Err(format!("placeholder {name} used but not declared"));
                }
            }
        }
        if self.kind == TemplateKind::Caption {
            if self.modality.is_none() {
                return Err("caption template needs a modality".into());
            }
            for class in ConstraintClass::ALL {
                if !self.constraints.iter().any(|c| c.class == class && !c.text.trim().is_empty()) {
                    return Err(format!("caption template lacks a {class:?} constraint"));
                }
            }
        }
        Ok(())
    }

    pub fn constraint_block(&self) -> String {
        self.constraints.iter().map(|c| format!("- {}", c.text)).collect::<Vec<_>>().join("\n")
    }

    pub fn render(&self, bindings: BTreeMap<String, String>) -> Result<RenderedPrompt, PromptError> {
        let mut text = String::with_capacity(self.body.len() + bindings.values().map(String::len).sum::<usize>());
        let pieces = scan(&self.body).map_err(|message| PromptError::Template { path: self.template_id.clone(), message })?;
        for piece in pieces {
            match piece {
                Piece::Text(t) => text.push_str(t),
                Piece::Slot(name) => text.push_str(bindings.get(name).ok_or_else(|| PromptError::Unresolved(name.to_string()))?),
            }
        }
        let text = text.trim().to_string();
        Ok(RenderedPrompt {
            digest: sha256_hex(text.as_bytes()),
            text,
            template_id: self.template_id.clone(),
            template_version: self.version,
            bindings,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub template_id: String,
    pub template_version: u32,
    pub bindings: BTreeMap<String, String>,
    /// SHA-256 of `text`.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RegionContext {
    pub dataset: Option<DatasetId>,
    pub anatomical_hint: Option<String>,
}

impl RegionContext {
    fn dataset_text(&self) -> String {
        self.dataset.map(|d| d.to_string()).unwrap_or_else(|| "unspecified".into())
    }

    fn hint_text(&self) -> String {
        self.anatomical_hint.clone().filter(|h| !h.trim().is_empty()).unwrap_or_else(|| "none provided".into())
    }
}

/// JSON string literal for `s`; what judge prompts embed.
pub fn quote(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

/// Recovers the JSON string literal on the line starting with `LABEL: `.
pub fn extract_field(prompt: &str, label: &str) -> Option<String> {
    let prefix = format!("{label}: ");
    prompt.lines().find_map(|l| l.strip_prefix(&prefix)).and_then(|v| serde_json::from_str(v).ok())
}

const SHIPPED: [(&str, &str); 5] = [
    ("caption_cxr.toml", include_str!("../assets/templates/prompts/caption_cxr.toml")),
    ("caption_ct_slice.toml", include_str!("../assets/templates/prompts/caption_ct_slice.toml")),
    ("caption_photo.toml", include_str!("../assets/templates/prompts/caption_photo.toml")),
    ("judge_verification.toml", include_str!("../assets/templates/prompts/judge_verification.toml")),
    ("judge_llm_score.toml", include_str!("../assets/templates/prompts/judge_llm_score.toml")),
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptLibrary {
    templates: BTreeMap<String, PromptTemplate>,
}

impl PromptLibrary {
    pub fn shipped() -> Self {
        Self::from_sources(SHIPPED.iter().map(|(n, t)| (n.to_string(), t.to_string()))).expect("shipped prompt templates are valid")
    }

    pub fn from_sources(sources: impl IntoIterator<Item = (String, String)>) -> Result<Self, PromptError> {
        let mut lib = Self::default();
        for (origin, text) in sources {
            lib.insert(PromptTemplate::parse(&text, &origin)?)?;
        }
        Ok(lib)
    }

    /// Every `*.toml` file in `dir`, in file-name order.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let io = |e: std::io::Error| PromptError::Template { path: dir.display().to_string(), message: e.to_string() };
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        files.sort();
        let mut sources = Vec::new();
        for f in files {
            sources.push((f.display().to_string(), std::fs::read_to_string(&f).map_err(io)?));
        }
        Self::from_sources(sources)
    }

    pub fn insert(&mut self, t: PromptTemplate) -> Result<(), PromptError> {
        if self.templates.contains_key(&t.template_id) {
            return Err(PromptError::DuplicateTemplate(t.template_id));
        }
        self.templates.insert(t.template_id.clone(), t);
        Ok(())
    }

    fn latest(&self, kind: TemplateKind, modality: Option<&str>) -> Option<&PromptTemplate> {
        self.templates
            .values()
            .filter(|t| t.kind == kind && (modality.is_none() || t.modality.as_deref() == modality))
            .max_by(|a, b| a.version.cmp(&b.version).then_with(|| b.template_id.cmp(&a.template_id)))
    }

    pub fn caption_modalities(&self) -> Vec<String> {
        let set: BTreeSet<String> =
            self.templates.values().filter(|t| t.kind == TemplateKind::Caption).filter_map(|t| t.modality.clone()).collect();
        set.into_iter().collect()
    }

    pub fn caption_template(&self, modality: &str) -> Result<&PromptTemplate, PromptError> {
        self.latest(TemplateKind::Caption, Some(modality))
            .ok_or_else(|| PromptError::UnknownModality { modality: modality.to_string(), available: self.caption_modalities() })
    }

    pub fn render_caption_prompt(&self, modality: &str, ctx: &RegionContext) -> Result<RenderedPrompt, PromptError> {
        let t = self.caption_template(modality)?;
        t.render(BTreeMap::from([
            ("dataset".to_string(), ctx.dataset_text()),
            ("anatomical_hint".to_string(), ctx.hint_text()),
            ("constraints".to_string(), t.constraint_block()),
        ]))
    }

    pub fn render_judge_verification_prompt(&self, caption: &str, qa: &QAItem) -> Result<RenderedPrompt, PromptError> {
        if caption.trim().is_empty() {
            return Err(PromptError::EmptyCaption);
        }
        if qa.question.trim().is_empty() {
            return Err(PromptError::EmptyQuestion);
        }
        let t = self.latest(TemplateKind::Verification, None).ok_or(PromptError::MissingTemplate(TemplateKind::Verification.name()))?;
        t.render(BTreeMap::from([("caption".to_string(), quote(caption)), ("question".to_string(), quote(&qa.question))]))
    }

    pub fn render_llmscore_prompt(&self, caption: &str, ctx: &RegionContext) -> Result<RenderedPrompt, PromptError> {
        if caption.trim().is_empty() {
            return Err(PromptError::EmptyCaption);
        }
        let t = self.latest(TemplateKind::LlmScore, None).ok_or(PromptError::MissingTemplate(TemplateKind::LlmScore.name()))?;
        t.render(BTreeMap::from([
            ("caption".to_string(), quote(caption)),
            ("dataset".to_string(), ctx.dataset_text()),
            ("anatomical_hint".to_string(), ctx.hint_text()),
        ]))
    }
}
