//! On-disk cache of entity-representation builds.
//!
//! One JSON file per (qid, mode, pipeline version), named by the SHA-256 of
//! the key. Writes go to a temporary file in the same directory and are
//! renamed into place.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::clients::ChatMessage;
use super::{ErMode, ErOutcome, PIPELINE_VERSION};
use crate::error::{Error, Result};

/// One client exchange. Static builds record the page title as a single user
/// message and the raw extract (paragraphs separated by blank lines), or
/// `null` when the page does not exist.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub request: Vec<ChatMessage>,
    pub response: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErCacheEntry {
    pub qid: String,
    pub mode: ErMode,
    pub version: String,
    pub rounds: Vec<RoundRecord>,
    pub outcome: ErOutcome,
}

#[derive(Debug, Clone)]
pub struct ErCache {
    dir: PathBuf,
    version: String,
}

impl ErCache {
    pub fn new(dir: &Path) -> Result<Self> {
        Self::with_version(dir, PIPELINE_VERSION)
    }

    pub fn with_version(dir: &Path, version: &str) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), version: version.to_string() })
    }

    pub fn path_for(&self, qid: &str, mode: ErMode) -> PathBuf {
        let mut h = Sha256::new();
        for part in [qid, mode.name(), &self.version] {
            h.update(part.as_bytes());
            h.update([0u8]);
        }
        self.dir.join(format!("{}.json", hex::encode(h.finalize())))
    }

    pub fn get(&self, qid: &str, mode: ErMode) -> Result<Option<ErCacheEntry>> {
        let path = self.path_for(qid, mode);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let entry: ErCacheEntry = serde_json::from_str(&text)?;
        if entry.qid != qid || entry.mode != mode || entry.version != self.version {
            return Ok(None);
        }
        Ok(Some(entry))
    }

    pub fn put(&self, entry: &ErCacheEntry) -> Result<()> {
        let path = self.path_for(&entry.qid, entry.mode);
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let body = serde_json::to_vec_pretty(entry)?;
        tmp.write_all(&body).map_err(|e| Error::io(tmp.path(), e))?;
        tmp.persist(&path).map_err(|e| Error::io(&path, e.error))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::erpipeline::DropReason;

    #[test]
    fn version_change_invalidates() {
        let dir = tempfile::tempdir().unwrap();
        let a = ErCache::with_version(dir.path(), "v1").unwrap();
        let entry = ErCacheEntry {
            qid: "Q1".into(),
            mode: ErMode::Static,
            version: "v1".into(),
            rounds: vec![],
            outcome: ErOutcome::Dropped { reason: DropReason::NotFound },
        };
        a.put(&entry).unwrap();
        assert_eq!(a.get("Q1", ErMode::Static).unwrap(), Some(entry));
        assert!(a.get("Q1", ErMode::Dynamic).unwrap().is_none());
        let b = ErCache::with_version(dir.path(), "v2").unwrap();
        assert!(b.get("Q1", ErMode::Static).unwrap().is_none());
    }
}
