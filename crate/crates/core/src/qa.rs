//! Attribute-verification question bank.
//!
//! Positive questions check that an annotated finding is described; negative
//! questions check that a finding annotated as absent is not. Negatives are
//! only drawn from attributes explicitly marked absent.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::derive_seed;
use crate::manifest::{AttributeState, DatasetId, IssueKind, RegionRecord, ValidationReport};

#[derive(Debug, Error, PartialEq)]
pub enum QaError {
    #[error("no templates in {0}")]
    NoTemplates(String),
    #[error("{path}: {message}")]
    Malformed { path: String, message: String },
    #[error("{path}: duplicate template_id {id}")]
    DuplicateId { path: String, id: String },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn short(&self) -> &'static str {
        match self {
            Self::Positive => "pos",
            Self::Negative => "neg",
        }
    }

    pub fn expected(&self) -> ExpectedAnswer {
        match self {
            Self::Positive => ExpectedAnswer::Yes,
            Self::Negative => ExpectedAnswer::No,
        }
    }

    fn tested_state(&self) -> AttributeState {
        match self {
            Self::Positive => AttributeState::Present,
            Self::Negative => AttributeState::Absent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectedAnswer {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QATemplate {
    pub template_id: String,
    #[serde(skip_deserializing, default = "custom_dataset")]
    pub dataset_id: DatasetId,
    pub attribute: String,
    #[serde(default)]
    pub also_requires: Vec<String>,
    pub polarity: Polarity,
    pub expected_answer: ExpectedAnswer,
    pub question: String,
}

fn custom_dataset() -> DatasetId {
    DatasetId::Custom
}

impl QATemplate {
    fn uses_site(&self) -> bool {
        self.question.contains("{{site}}")
    }

    fn check(&self) -> Result<(), String> {
        if self.expected_answer != self.polarity.expected() {
            return Err(format!("{}: {:?} template must expect {:?}", self.template_id, self.polarity, self.polarity.expected()));
        }
        let mut rest = self.question.as_str();
        while let Some(i) = rest.find("{{") {
            let end = rest[i..].find("}}").ok_or_else(|| format!("{}: unterminated placeholder", self.template_id))?;
            let name = &rest[i + 2..i + end];
            if name != "attribute" && name != "site" {
                return Err(format!("{}: unknown placeholder {name}", self.template_id));
            }
            rest = &rest[i + end + 2..];
        }
        if self.question.trim().is_empty() {
            return Err(format!("{}: empty question", self.template_id));
        }
        Ok(())
    }

    fn applies_to(&self, states: &BTreeMap<&str, AttributeState>, site: Option<&str>) -> bool {
        let want = self.polarity.tested_state();
        std::iter::once(&self.attribute).chain(&self.also_requires).all(|a| states.get(a.as_str()) == Some(&want))
            && (!self.uses_site() || site.is_some())
    }

    fn render(&self, site: Option<&str>) -> String {
        self.question.replace("{{site}}", site.unwrap_or("")).replace("{{attribute}}", &self.attribute)
    }
}

#[derive(Debug, Deserialize)]
struct TemplateFile {
    dataset_id: DatasetId,
    #[serde(default)]
    templates: Vec<QATemplate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAItem {
    pub qa_id: String,
    /// Region key (`dataset:region_id`).
    pub region_id: String,
    pub polarity: Polarity,
    pub question: String,
    pub expected_answer: ExpectedAnswer,
    pub attribute: String,
    /// Template id the question came from.
    pub provenance: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QaPolicy {
    pub neg_per_region: usize,
    pub seed: u64,
}

impl Default for QaPolicy {
    fn default() -> Self {
        Self { neg_per_region: 2, seed: 0 }
    }
}

const SHIPPED: [(&str, &str); 3] = [
    ("vindr_cxr.toml", include_str!("../assets/templates/qa/vindr_cxr.toml")),
    ("lidc_idri.toml", include_str!("../assets/templates/qa/lidc_idri.toml")),
    ("skincon.toml", include_str!("../assets/templates/qa/skincon.toml")),
];

/// Templates indexed by (dataset, attribute, polarity), file order preserved.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TemplateLibrary {
    index: BTreeMap<(DatasetId, String, Polarity), Vec<QATemplate>>,
    ids: BTreeSet<String>,
}

impl TemplateLibrary {
    pub fn shipped() -> Self {
        Self::from_sources(SHIPPED.iter().map(|(n, t)| (n.to_string(), t.to_string()))).expect("shipped QA templates are valid")
    }

    pub fn from_sources(sources: impl IntoIterator<Item = (String, String)>) -> Result<Self, QaError> {
        let mut lib = Self::default();
        for (path, text) in sources {
            let file: TemplateFile =
                toml::from_str(&text).map_err(|e| QaError::Malformed { path: path.clone(), message: e.to_string() })?;
            for mut t in file.templates {
                t.dataset_id = file.dataset_id;
                t.check().map_err(|message| QaError::Malformed { path: path.clone(), message })?;
                if !lib.ids.insert(t.template_id.clone()) {
                    return Err(QaError::DuplicateId { path: path.clone(), id: t.template_id });
                }
                lib.index.entry((t.dataset_id, t.attribute.clone(), t.polarity)).or_default().push(t);
            }
        }
        if lib.ids.is_empty() {
            return Err(QaError::NoTemplates("<sources>".into()));
        }
        Ok(lib)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn templates(&self) -> impl Iterator<Item = &QATemplate> {
        self.index.values().flatten()
    }

    pub fn get(&self, template_id: &str) -> Option<&QATemplate> {
        self.templates().find(|t| t.template_id == template_id)
    }

    fn pick(
        &self,
        dataset: DatasetId,
        attr: &str,
        polarity: Polarity,
        states: &BTreeMap<&str, AttributeState>,
        site: Option<&str>,
    ) -> Option<&QATemplate> {
        self.index.get(&(dataset, attr.to_string(), polarity))?.iter().find(|t| t.applies_to(states, site))
    }
}

/// Loads every `*.toml` template file in `dir`.
pub fn load_templates(dir: &Path) -> Result<TemplateLibrary, QaError> {
    let io = |e: std::io::Error| QaError::Io { path: dir.display().to_string(), message: e.to_string() };
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(QaError::NoTemplates(dir.display().to_string()));
    }
    let mut sources = Vec::new();
    for f in files {
        sources.push((f.display().to_string(), std::fs::read_to_string(&f).map_err(io)?));
    }
    TemplateLibrary::from_sources(sources).map_err(|e| match e {
        QaError::NoTemplates(_) => QaError::NoTemplates(dir.display().to_string()),
        other => other,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Instantiation {
    pub items: Vec<QAItem>,
    pub report: ValidationReport,
}

/// One positive item per present attribute (pathology labels count as
/// present) and up to `neg_per_region` negatives drawn without replacement
/// from attributes marked absent. The draw is seeded by `(seed, region_key)`.
pub fn instantiate_questions(
    region: &RegionRecord,
    dataset: DatasetId,
    region_key: &str,
    lib: &TemplateLibrary,
    policy: &QaPolicy,
) -> Instantiation {
    let mut out = Instantiation::default();
    let mut states: BTreeMap<&str, AttributeState> = region.attributes.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    for label in &region.pathology_labels {
        states.entry(label.as_str()).or_insert(AttributeState::Present);
    }
    let site = region.anatomical_site.as_deref().filter(|s| !s.trim().is_empty());

    if !states.values().any(|s| *s == AttributeState::Present) {
        out.report.push(region_key, IssueKind::NoUsableAttributes, "no attribute or label marked present");
        return out;
    }

    let make = |t: &QATemplate| QAItem {
        qa_id: format!("{region_key}:{}:{}", t.polarity.short(), t.template_id),
        region_id: region_key.to_string(),
        polarity: t.polarity,
        question: t.render(site),
        expected_answer: t.expected_answer,
        attribute: t.attribute.clone(),
        provenance: t.template_id.clone(),
    };

    for (attr, state) in &states {
        if *state == AttributeState::Present {
            if let Some(t) = lib.pick(dataset, attr, Polarity::Positive, &states, site) {
                out.items.push(make(t));
            }
        }
    }

    let mut negatives: Vec<&QATemplate> = states
        .iter()
        .filter(|(_, s)| **s == AttributeState::Absent)
        .filter_map(|(attr, _)| lib.pick(dataset, attr, Polarity::Negative, &states, site))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(policy.seed, region_key));
    negatives.shuffle(&mut rng);
    out.items.extend(negatives.into_iter().take(policy.neg_per_region).map(make));

    if out.items.is_empty() {
        out.report.push(region_key, IssueKind::NoUsableAttributes, "no template matches the region's attributes");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn region(labels: &[&str], attrs: &[(&str, AttributeState)], site: Option<&str>) -> RegionRecord {
        let mut r = RegionRecord::new("r0", BBox { x0: 0, y0: 0, x1: 3, y1: 3 });
        r.pathology_labels = labels.iter().map(|s| s.to_string()).collect();
        r.attributes = attrs.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        r.anatomical_site = site.map(str::to_string);
        r
    }

    #[test]
    fn shipped_library_loads() {
        let lib = TemplateLibrary::shipped();
        assert_eq!(lib.len(), 92);
        assert!(lib.templates().all(|t| t.expected_answer == t.polarity.expected()));
    }

    #[test]
    fn consolidation_with_two_absent_gives_one_plus_two() {
        use AttributeState::*;
        let r = region(&["Consolidation"], &[("Consolidation", Present), ("Pneumothorax", Absent), ("Pleural effusion", Absent)], None);
        let out = instantiate_questions(&r, DatasetId::VindrCxr, "vindr_cxr:r0", &TemplateLibrary::shipped(), &QaPolicy::default());
        let pos = out.items.iter().filter(|q| q.polarity == Polarity::Positive).count();
        let neg: BTreeSet<&str> = out.items.iter().filter(|q| q.polarity == Polarity::Negative).map(|q| q.attribute.as_str()).collect();
        assert_eq!(pos, 1);
        assert_eq!(neg, BTreeSet::from(["Pleural effusion", "Pneumothorax"]));
        assert!(out.report.is_empty());
    }

    #[test]
    fn spiculated_margin_question() {
        let r = region(&["nodule"], &[("spiculated_margin", AttributeState::Present)], None);
        let out = instantiate_questions(&r, DatasetId::LidcIdri, "lidc_idri:n", &TemplateLibrary::shipped(), &QaPolicy::default());
        assert_eq!(out.items.len(), 1);
        assert_eq!(out.items[0].question, "Does the description mention a spiculated nodule margin?");
    }

    #[test]
    fn all_unknown_gives_empty_list_and_report() {
        let r = region(&[], &[("erythema", AttributeState::Unknown)], None);
        let out = instantiate_questions(&r, DatasetId::Skincon, "skincon:r", &TemplateLibrary::shipped(), &QaPolicy::default());
        assert!(out.items.is_empty());
        assert_eq!(out.report.count(IssueKind::NoUsableAttributes), 1);
    }

    #[test]
    fn site_template_needs_site() {
        let lib = TemplateLibrary::shipped();
        let with = instantiate_questions(
            &region(&["Lung Opacity"], &[], Some("lower lobe of the lungs")),
            DatasetId::VindrCxr,
            "k",
            &lib,
            &QaPolicy::default(),
        );
        assert_eq!(with.items[0].question, "Is there increased opacity in the lower lobe of the lungs?");
        let without = instantiate_questions(&region(&["Lung Opacity"], &[], None), DatasetId::VindrCxr, "k", &lib, &QaPolicy::default());
        assert_eq!(without.items[0].provenance, "vindr.pos.lung_opacity");
    }

    #[test]
    fn negatives_capped_at_k() {
        use AttributeState::*;
        let r = region(
            &["Consolidation"],
            &[("Pneumothorax", Absent), ("Pleural effusion", Absent), ("Atelectasis", Absent), ("ILD", Absent)],
            None,
        );
        let policy = QaPolicy { neg_per_region: 2, seed: 11 };
        let lib = TemplateLibrary::shipped();
        let a = instantiate_questions(&r, DatasetId::VindrCxr, "k", &lib, &policy);
        assert_eq!(a.items.iter().filter(|q| q.polarity == Polarity::Negative).count(), 2);
        assert_eq!(a, instantiate_questions(&r, DatasetId::VindrCxr, "k", &lib, &policy));
    }

    #[test]
    fn duplicate_and_bad_polarity_rejected() {
        let one = "dataset_id='custom'\n[[templates]]\ntemplate_id='a'\nattribute='x'\npolarity='positive'\nexpected_answer='yes'\nquestion='q?'\n";
        let err = TemplateLibrary::from_sources([("a.toml".to_string(), one.to_string()), ("b.toml".to_string(), one.to_string())]);
        assert_eq!(err, Err(QaError::DuplicateId { path: "b.toml".into(), id: "a".into() }));
        let bad = one.replace("'yes'", "'no'");
        assert!(matches!(TemplateLibrary::from_sources([("c.toml".to_string(), bad)]), Err(QaError::Malformed { .. })));
    }

    #[test]
    fn malformed_error_names_file_and_line() {
        let err = TemplateLibrary::from_sources([("bad.toml".to_string(), "dataset_id='custom'\n[[templates]\n".to_string())]).unwrap_err();
        let text = err.to_string();
        assert!(text.starts_with("bad.toml"), "{text}");
        assert!(text.contains("line 2"), "{text}");
    }

    #[test]
    fn empty_dir_has_no_templates() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_templates(dir.path()), Err(QaError::NoTemplates(_))));
    }
}
