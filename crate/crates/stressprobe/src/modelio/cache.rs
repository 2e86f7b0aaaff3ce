//! Content-addressed response cache.
//!
//! One JSON file per cache key under `<root>/<model_id>/<2-hex shard>/`,
//! written via temp-file + rename so concurrent writers of the same key
//! converge to a single intact record. The cache is the unit of resume: a
//! warm rerun answers everything from disk without network traffic.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adapters::ModelError;
use super::parse::ParsedAnswer;
use crate::perturb::{Condition, PromptMode};

/// Persisted record for one (model, instance, mode) query: the digest
/// inputs, the raw response, and the parse outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub model_id: String,
    pub item_id: String,
    pub condition: Condition,
    pub prompt_mode: PromptMode,
    pub generator_version: String,
    pub prompt_sha256: String,
    pub prompt_text: String,
    pub raw_text: String,
    pub parsed: ParsedAnswer,
    pub correct: bool,
    pub latency_ms: u64,
    pub created_unix_ms: u64,
}

/// Hex digest addressing one query.
pub fn cache_key(
    model_id: &str,
    generator_version: &str,
    item_id: &str,
    condition: &Condition,
    mode: PromptMode,
    prompt_bytes: &[u8],
) -> String {
    let mut hasher = Sha256::new();
    for part in [
        model_id,
        generator_version,
        item_id,
        &condition.canonical(),
        match mode {
            PromptMode::Direct => "DIRECT",
            PromptMode::Cot => "COT",
        },
    ] {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    hasher.update((prompt_bytes.len() as u64).to_le_bytes());
    hasher.update(prompt_bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn sanitize(component: &str) -> String {
    component
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ResponseCache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn record_path(&self, model_id: &str, key: &str) -> PathBuf {
        self.root
            .join(sanitize(model_id))
            .join(&key[..2])
            .join(format!("{key}.json"))
    }

    pub fn get(&self, model_id: &str, key: &str) -> Result<Option<CacheRecord>, ModelError> {
        let path = self.record_path(model_id, key);
        let bytes = match std::fs::read(&path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(ModelError::CacheIo { path, source: e }),
        };
        let record = serde_json::from_slice(&bytes).map_err(|e| ModelError::CacheCorrupt {
            path,
            message: e.to_string(),
        })?;
        Ok(Some(record))
    }

    /// Persist a record with write-then-rename visibility.
    pub fn put(&self, key: &str, record: &CacheRecord) -> Result<(), ModelError> {
        let path = self.record_path(&record.model_id, key);
        let dir = path.parent().expect("record path has a parent");
        std::fs::create_dir_all(dir).map_err(|e| ModelError::CacheIo {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let tmp = dir.join(format!(
            ".{key}.{}.{}.tmp",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let bytes = serde_json::to_vec_pretty(record).expect("record serialization cannot fail");
        std::fs::write(&tmp, bytes).map_err(|e| ModelError::CacheIo {
            path: tmp.clone(),
            source: e,
        })?;
        std::fs::rename(&tmp, &path).map_err(|e| ModelError::CacheIo { path, source: e })
    }
}

pub fn now_unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
