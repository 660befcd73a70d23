//! Append-only response cache.
//!
//! One file of entries, each a header line `<fingerprint hex> <unix ms>
//! <byte length>` followed by that many bytes of completion text and a
//! newline. The whole file is indexed in memory on open. A torn final entry
//! left by a crash is cut off.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use crate::backend::{BackendError, BackendResponse, ChatBackend, ChatMessage, Fingerprint};

#[derive(Debug)]
pub struct ResponseCache {
    path: PathBuf,
    index: Mutex<HashMap<Fingerprint, String>>,
    writer: Mutex<File>,
    /// One lock per fingerprint being fetched, so concurrent identical
    /// requests reach the backend once.
    pending: Mutex<HashMap<Fingerprint, Arc<Mutex<()>>>>,
}

/// Parses entries from `bytes`; returns them and the length of the valid
/// prefix.
fn parse_entries(bytes: &[u8]) -> (Vec<(Fingerprint, String)>, usize) {
    let mut entries = Vec::new();
    let mut pos = 0;
    while let Some(nl) = bytes[pos..].iter().position(|b| *b == b'\n') {
        let header = &bytes[pos..pos + nl];
        let Some((fp, len)) = std::str::from_utf8(header).ok().and_then(|h| {
            let mut parts = h.split(' ');
            let fp = Fingerprint::from_hex(parts.next()?)?;
            parts.next()?.parse::<u64>().ok()?;
            let len = parts.next()?.parse::<usize>().ok()?;
            parts.next().is_none().then_some((fp, len))
        }) else {
            break;
        };
        let body_start = pos + nl + 1;
        let body_end = body_start.saturating_add(len);
        if body_end >= bytes.len() || bytes[body_end] != b'\n' {
            break;
        }
        let Ok(text) = String::from_utf8(bytes[body_start..body_end].to_vec()) else {
            break;
        };
        entries.push((fp, text));
        pos = body_end + 1;
    }
    (entries, pos)
}

impl ResponseCache {
    pub fn open(path: &Path) -> io::Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new().read(true).create(true).append(true).open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let (entries, valid) = parse_entries(&bytes);
        if valid < bytes.len() {
            file.set_len(valid as u64)?;
            file.seek(SeekFrom::End(0))?;
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (fp, text) in entries {
            index.entry(fp).or_insert(text);
        }
        Ok(Self {
            path: path.to_path_buf(),
            index: Mutex::new(index),
            writer: Mutex::new(file),
            pending: Mutex::new(HashMap::new()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.index.lock().expect("cache index poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, fp: &Fingerprint) -> Option<String> {
        self.index.lock().expect("cache index poisoned").get(fp).cloned()
    }

    /// Appends an entry unless the fingerprint is already stored.
    pub fn insert(&self, fp: Fingerprint, text: &str) -> io::Result<()> {
        let mut writer = self.writer.lock().expect("cache writer poisoned");
        if self.index.lock().expect("cache index poisoned").contains_key(&fp) {
            return Ok(());
        }
        let millis = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or_default()
            .as_millis();
        let mut entry = format!("{} {millis} {}\n", fp.to_hex(), text.len()).into_bytes();
        entry.extend_from_slice(text.as_bytes());
        entry.push(b'\n');
        writer.write_all(&entry)?;
        writer.flush()?;
        self.index
            .lock()
            .expect("cache index poisoned")
            .insert(fp, text.to_string());
        Ok(())
    }

    fn pending_lock(&self, fp: Fingerprint) -> Arc<Mutex<()>> {
        self.pending
            .lock()
            .expect("cache pending poisoned")
            .entry(fp)
            .or_default()
            .clone()
    }
}

/// Request counters shared by every cached view of one backend.
#[derive(Debug, Default)]
pub struct CallStats {
    pub requests: AtomicU64,
    pub cache_hits: AtomicU64,
    pub backend_calls: AtomicU64,
}

impl CallStats {
    pub fn snapshot(&self) -> (u64, u64, u64) {
        (
            self.requests.load(Ordering::SeqCst),
            self.cache_hits.load(Ordering::SeqCst),
            self.backend_calls.load(Ordering::SeqCst),
        )
    }
}

/// A backend consulted only on cache misses.
pub struct CachedBackend<'a> {
    inner: &'a dyn ChatBackend,
    cache: Option<&'a ResponseCache>,
    stats: &'a CallStats,
}

impl<'a> CachedBackend<'a> {
    pub fn new(inner: &'a dyn ChatBackend, cache: Option<&'a ResponseCache>, stats: &'a CallStats) -> Self {
        Self { inner, cache, stats }
    }

    fn hit(&self, fp: Fingerprint, text: String) -> BackendResponse {
        self.stats.cache_hits.fetch_add(1, Ordering::SeqCst);
        BackendResponse {
            text,
            latency: Duration::ZERO,
            request_fingerprint: fp,
        }
    }

    fn call(&self, messages: &[ChatMessage]) -> Result<BackendResponse, BackendError> {
        self.stats.backend_calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(messages)
    }
}

impl ChatBackend for CachedBackend<'_> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn temperature(&self) -> Option<f64> {
        self.inner.temperature()
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<BackendResponse, BackendError> {
        self.stats.requests.fetch_add(1, Ordering::SeqCst);
        let Some(cache) = self.cache else {
            return self.call(messages);
        };
        let fp = self.inner.fingerprint(messages);
        if let Some(text) = cache.get(&fp) {
            return Ok(self.hit(fp, text));
        }
        let lock = cache.pending_lock(fp);
        let _guard = lock.lock().expect("cache pending poisoned");
        if let Some(text) = cache.get(&fp) {
            return Ok(self.hit(fp, text));
        }
        let response = self.call(messages)?;
        cache
            .insert(fp, &response.text)
            .map_err(|e| BackendError::Cache(format!("{}: {e}", cache.path().display())))?;
        Ok(response)
    }
}
