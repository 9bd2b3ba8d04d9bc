//! On-disk response cache keyed by request content.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{GatewayError, Result};

/// Content hash of (endpoint id, model id, route, canonical request JSON).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn new(endpoint_id: &str, model: &str, route: &str, request: &Value) -> Self {
        let mut h = Sha256::new();
        for part in [endpoint_id, model, route] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        h.update(request.to_string().as_bytes());
        CacheKey(hex::encode(h.finalize()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for CacheKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: CacheKey,
    /// Wall time of the original network call.
    pub latency_ms: u64,
    pub response: Value,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| GatewayError::Cache {
            path: dir.clone(),
            source,
        })?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(&key.0[..2]).join(format!("{}.json", key.0))
    }

    /// A missing or unreadable entry is a miss.
    pub fn get(&self, key: &CacheKey) -> Option<CacheEntry> {
        let path = self.path_for(key);
        let bytes = fs::read(&path).ok()?;
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(e) if e.key == *key => Some(e),
            _ => {
                tracing::warn!(path = %path.display(), "ignoring corrupt cache entry");
                None
            }
        }
    }

    /// Writes through a temporary file and renames it into place.
    pub fn put(&self, entry: &CacheEntry) -> Result<()> {
        let path = self.path_for(&entry.key);
        let parent = path.parent().expect("entry path has a parent");
        let io = |source| GatewayError::Cache {
            path: path.clone(),
            source,
        };
        fs::create_dir_all(parent).map_err(io)?;
        let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(io)?;
        let bytes = serde_json::to_vec(entry).map_err(|e| GatewayError::Decode(e.to_string()))?;
        tmp.write_all(&bytes).map_err(io)?;
        tmp.persist(&path).map_err(|e| io(e.error))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn key_depends_on_every_component() {
        let r = json!({"a": 1});
        let k = CacheKey::new("e", "m", "chat", &r);
        assert_eq!(k, CacheKey::new("e", "m", "chat", &json!({"a": 1})));
        assert_ne!(k, CacheKey::new("e2", "m", "chat", &r));
        assert_ne!(k, CacheKey::new("e", "m2", "chat", &r));
        assert_ne!(k, CacheKey::new("e", "m", "embed", &r));
        assert_ne!(k, CacheKey::new("e", "m", "chat", &json!({"a": 2})));
        // length prefixes keep component boundaries unambiguous
        assert_ne!(CacheKey::new("ab", "c", "r", &r), CacheKey::new("a", "bc", "r", &r));
    }

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let key = CacheKey::new("e", "m", "chat", &json!({}));
        assert!(cache.get(&key).is_none());
        let entry = CacheEntry {
            key: key.clone(),
            latency_ms: 12,
            response: json!({"x": [1, 2]}),
        };
        cache.put(&entry).unwrap();
        assert_eq!(cache.get(&key), Some(entry));
        fs::write(cache.path_for(&key), b"{not json").unwrap();
        assert!(cache.get(&key).is_none());
    }
}
