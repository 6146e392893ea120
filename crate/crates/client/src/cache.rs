//! Content-addressed response cache: one file per entry at
//! `<root>/<model>/<key[..2]>/<key>.resp`, written through a temp file and an
//! atomic rename so a crash never leaves a torn entry behind.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::wire::Usage;

/// Overrides the cache root when set.
pub const CACHE_DIR_ENV: &str = "POC_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub content_hash: String,
    pub model: String,
    pub temperature: f64,
    pub text: String,
    pub usage: Usage,
}

/// Where responses live. Cloning is cheap; clones share the directory.
#[derive(Debug, Clone)]
pub struct CacheHandle {
    root: Option<PathBuf>,
}

/// `sha256(content_hash, model, temperature bits)` as hex.
pub fn cache_key(content_hash: &str, model: &str, temperature: f64) -> String {
    let mut h = Sha256::new();
    h.update(b"poc-cache/1");
    for field in [content_hash.as_bytes(), model.as_bytes()] {
        h.update((field.len() as u64).to_le_bytes());
        h.update(field);
    }
    h.update(temperature.to_bits().to_le_bytes());
    hex::encode(h.finalize())
}

/// Model names may contain `/` or `:`; keep the directory name tame.
fn model_dir(model: &str) -> String {
    model
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

impl CacheHandle {
    pub fn at(root: impl Into<PathBuf>) -> Self {
        Self {
            root: Some(root.into()),
        }
    }

    /// `$POC_CACHE_DIR` if set, else `default`.
    pub fn from_env_or(default: impl Into<PathBuf>) -> Self {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(dir) if !dir.is_empty() => Self::at(PathBuf::from(dir)),
            _ => Self::at(default),
        }
    }

    /// Never hits, never stores.
    pub fn disabled() -> Self {
        Self { root: None }
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn entry_path(&self, content_hash: &str, model: &str, temperature: f64) -> Option<PathBuf> {
        let root = self.root.as_ref()?;
        let key = cache_key(content_hash, model, temperature);
        Some(
            root.join(model_dir(model))
                .join(&key[..2])
                .join(format!("{key}.resp")),
        )
    }

    /// A stored entry, if any. Unreadable or mismatching files count as misses.
    pub fn get(&self, content_hash: &str, model: &str, temperature: f64) -> Option<CacheEntry> {
        let path = self.entry_path(content_hash, model, temperature)?;
        let bytes = fs::read(&path).ok()?;
        let entry: CacheEntry = match serde_json::from_slice(&bytes) {
            Ok(e) => e,
            Err(e) => {
                tracing::warn!(path = %path.display(), "ignoring unreadable cache entry: {e}");
                return None;
            }
        };
        (entry.content_hash == content_hash
            && entry.model == model
            && entry.temperature.to_bits() == temperature.to_bits())
        .then_some(entry)
    }

    pub fn put(&self, entry: &CacheEntry) -> io::Result<()> {
        let Some(path) = self.entry_path(&entry.content_hash, &entry.model, entry.temperature)
        else {
            return Ok(());
        };
        let dir = path.parent().expect("entry path has a parent");
        fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&serde_json::to_vec(entry).map_err(io::Error::other)?)?;
        tmp.as_file().sync_all()?;
        tmp.persist(&path).map_err(|e| e.error)?;
        Ok(())
    }

    /// Number of stored entries for `model`.
    pub fn len(&self, model: &str) -> usize {
        let Some(root) = &self.root else { return 0 };
        let Ok(shards) = fs::read_dir(root.join(model_dir(model))) else {
            return 0;
        };
        shards
            .flatten()
            .filter_map(|s| fs::read_dir(s.path()).ok())
            .flat_map(|d| d.flatten())
            .filter(|f| f.path().extension().is_some_and(|e| e == "resp"))
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(hash: &str) -> CacheEntry {
        CacheEntry {
            content_hash: hash.into(),
            model: "org/model:7b".into(),
            temperature: 0.0,
            text: "answer".into(),
            usage: Usage {
                prompt_tokens: 10,
                completion_tokens: 2,
            },
        }
    }

    #[test]
    fn key_depends_on_every_component() {
        let k = cache_key("abc", "m", 0.0);
        assert_ne!(k, cache_key("abd", "m", 0.0));
        assert_ne!(k, cache_key("abc", "n", 0.0));
        assert_ne!(k, cache_key("abc", "m", 0.2));
        assert_ne!(cache_key("ab", "cm", 0.0), cache_key("abc", "m", 0.0));
        assert_eq!(k, cache_key("abc", "m", 0.0));
    }

    #[test]
    fn round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let cache = CacheHandle::at(dir.path());
        let e = entry("h1");
        assert!(cache.get("h1", &e.model, 0.0).is_none());
        cache.put(&e).unwrap();
        assert_eq!(cache.get("h1", &e.model, 0.0), Some(e.clone()));
        assert!(cache.get("h1", &e.model, 0.5).is_none());
        let path = cache.entry_path("h1", &e.model, 0.0).unwrap();
        let rel = path.strip_prefix(dir.path()).unwrap();
        let comps: Vec<_> = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect();
        assert_eq!(comps[0], "org_model_7b");
        assert_eq!(comps[1].len(), 2);
        assert!(comps[2].starts_with(&comps[1]) && comps[2].ends_with(".resp"));
        cache.put(&entry("h2")).unwrap();
        assert_eq!(cache.len(&e.model), 2);
    }

    #[test]
    fn corrupt_entry_is_a_miss() {
        let dir = tempfile::tempdir().unwrap();
        let cache = CacheHandle::at(dir.path());
        let e = entry("h1");
        cache.put(&e).unwrap();
        fs::write(cache.entry_path("h1", &e.model, 0.0).unwrap(), b"{trunc").unwrap();
        assert!(cache.get("h1", &e.model, 0.0).is_none());
    }

    #[test]
    fn disabled_cache() {
        let cache = CacheHandle::disabled();
        cache.put(&entry("h")).unwrap();
        assert!(cache.get("h", "org/model:7b", 0.0).is_none());
    }
}
