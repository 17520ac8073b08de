//! Per-dataset label and attribute vocabularies, loaded from data files.

use std::collections::BTreeSet;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::manifest::DatasetId;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("cannot read vocabulary {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed vocabulary {path}: {message}")]
    Parse { path: String, message: String },
    #[error("no shipped vocabulary for dataset {0}")]
    NotShipped(DatasetId),
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct Vocabulary {
    pub dataset_id: DatasetId,
    #[serde(default)]
    pub no_finding_label: Option<String>,
    #[serde(default)]
    pub pathology_labels: BTreeSet<String>,
    #[serde(default)]
    pub attributes: BTreeSet<String>,
}

const SHIPPED_VINDR: &str = include_str!("../assets/vocab/vindr_cxr.toml");
const SHIPPED_LIDC: &str = include_str!("../assets/vocab/lidc_idri.toml");
const SHIPPED_SKINCON: &str = include_str!("../assets/vocab/skincon.toml");

impl Vocabulary {
    pub fn parse(text: &str, origin: &str) -> Result<Self, VocabError> {
        toml::from_str(text).map_err(|e| VocabError::Parse { path: origin.to_string(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let text = std::fs::read_to_string(path).map_err(|source| VocabError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Vocabulary bundled with the crate for one of the known datasets.
    pub fn shipped(dataset: DatasetId) -> Result<Self, VocabError> {
        let text = match dataset {
            DatasetId::VindrCxr => SHIPPED_VINDR,
            DatasetId::LidcIdri => SHIPPED_LIDC,
            DatasetId::Skincon => SHIPPED_SKINCON,
            DatasetId::Custom => return Err(VocabError::NotShipped(dataset)),
        };
        Self::parse(text, dataset.as_str())
    }

    pub fn knows_label(&self, label: &str) -> bool {
        self.pathology_labels.contains(label)
    }

    pub fn knows_attribute(&self, name: &str) -> bool {
        self.attributes.contains(name)
    }

    pub fn is_no_finding(&self, label: &str) -> bool {
        self.no_finding_label.as_deref().is_some_and(|nf| nf.eq_ignore_ascii_case(label.trim()))
    }
}
