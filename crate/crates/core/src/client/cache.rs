use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::RawResponse;

/// Content-addressed response store laid out as
/// `<dir>/<first two hex digits>/<request_hash>.json`.
///
/// Writes go through a temporary file and a rename, serialized per key, so
/// concurrent readers never observe a partial entry.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    tmp_counter: AtomicU64,
}

fn valid_key(hash: &str) -> bool {
    hash.len() >= 2 && hash.bytes().all(|b| b.is_ascii_hexdigit())
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            key_locks: Mutex::new(HashMap::new()),
            tmp_counter: AtomicU64::new(0),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, hash: &str) -> PathBuf {
        self.dir.join(&hash[..2]).join(format!("{hash}.json"))
    }

    pub fn get(&self, hash: &str) -> Option<RawResponse> {
        if !valid_key(hash) {
            return None;
        }
        let bytes = fs::read(self.path_for(hash)).ok()?;
        match serde_json::from_slice::<RawResponse>(&bytes) {
            Ok(stored) if stored.request_hash == hash => Some(stored),
            Ok(stored) => {
                log::warn!(
                    "cache entry {hash} holds response for {}; ignoring",
                    stored.request_hash
                );
                None
            }
            Err(e) => {
                log::warn!("unreadable cache entry {hash}: {e}");
                None
            }
        }
    }

    pub fn put(&self, response: &RawResponse) -> io::Result<()> {
        let hash = &response.request_hash;
        if !valid_key(hash) {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "request hash is not hex"));
        }
        let lock = {
            let mut locks = self.key_locks.lock().unwrap_or_else(|e| e.into_inner());
            locks.entry(hash.clone()).or_default().clone()
        };
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());

        let path = self.path_for(hash);
        let parent = path.parent().expect("cache path has a parent");
        fs::create_dir_all(parent)?;
        let stored = RawResponse {
            from_cache: false,
            ..response.clone()
        };
        let tmp = parent.join(format!(
            ".{hash}.{}.{}.tmp",
            std::process::id(),
            self.tmp_counter.fetch_add(1, Ordering::Relaxed)
        ));
        let mut file = fs::File::create(&tmp)?;
        file.write_all(&serde_json::to_vec_pretty(&stored)?)?;
        file.sync_all()?;
        fs::rename(&tmp, &path)
    }
}
