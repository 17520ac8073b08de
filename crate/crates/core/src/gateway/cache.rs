use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{DecodingParams, GatewayError, ImageRole, RequestKind};
use crate::manifest::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSummary {
    pub role: ImageRole,
    pub sha256: String,
    pub bytes: u64,
}

/// The request as stored next to its response. Image bytes are summarised
/// by digest; they already live in the blob store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSummary {
    pub backend: String,
    pub model: String,
    pub kind: RequestKind,
    pub template_id: String,
    pub prompt_digest: String,
    pub prompt_text: String,
    pub images: Vec<ImageSummary>,
    pub decoding: DecodingParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedResponse {
    pub text: String,
    pub latency_ms: u64,
    pub attempts: u32,
    #[serde(default)]
    pub metadata: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedEntry {
    pub digest: String,
    pub request: RequestSummary,
    pub response: CachedResponse,
}

/// Content-addressed response files under `<root>/<digest[..2]>/<digest>`.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

impl ResponseCache {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, digest: &str) -> PathBuf {
        self.root.join(&digest[..2.min(digest.len())]).join(digest)
    }

    pub fn get(&self, digest: &str) -> Result<Option<CachedEntry>, GatewayError> {
        let path = self.path(digest);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(GatewayError::Cache(format!("{}: {e}", path.display()))),
        };
        match serde_json::from_str::<CachedEntry>(&text) {
            Ok(entry) if entry.digest == digest => Ok(Some(entry)),
            Ok(_) | Err(_) => {
                tracing::warn!(path = %path.display(), "ignoring corrupt cache entry");
                Ok(None)
            }
        }
    }

    pub fn put(&self, entry: &CachedEntry) -> Result<(), GatewayError> {
        let path = self.path(&entry.digest);
        let mut bytes = serde_json::to_vec_pretty(entry).map_err(|e| GatewayError::Cache(e.to_string()))?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes).map_err(|e| GatewayError::Cache(format!("{}: {e}", path.display())))
    }

    /// Number of cached responses.
    pub fn len(&self) -> usize {
        let Ok(dirs) = std::fs::read_dir(&self.root) else { return 0 };
        dirs.flatten()
            .filter_map(|d| std::fs::read_dir(d.path()).ok())
            .map(|f| f.flatten().filter(|e| !e.file_name().to_string_lossy().contains('.')).count())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
