use std::collections::{HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

/// Environment variable holding the cache budget in megabytes.
pub const CACHE_ENV: &str = "FUSIONLENS_CACHE_MB";

/// Bounded least-recently-inserted cache of decoded dumps, keyed by path.
///
/// Values larger than the whole budget are never stored. A zero budget
/// disables caching.
#[derive(Debug)]
pub struct DumpCache<T> {
    budget: usize,
    inner: Mutex<Inner<T>>,
}

#[derive(Debug)]
struct Inner<T> {
    used: usize,
    order: VecDeque<PathBuf>,
    entries: HashMap<PathBuf, (Arc<T>, usize)>,
}

impl<T> DumpCache<T> {
    pub fn new(budget_bytes: usize) -> Self {
        DumpCache {
            budget: budget_bytes,
            inner: Mutex::new(Inner {
                used: 0,
                order: VecDeque::new(),
                entries: HashMap::new(),
            }),
        }
    }

    pub fn disabled() -> Self {
        Self::new(0)
    }

    /// Budget from `FUSIONLENS_CACHE_MB`, defaulting to 512 MB.
    pub fn from_env() -> Self {
        let mb = std::env::var(CACHE_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .unwrap_or(512);
        Self::new(mb.saturating_mul(1 << 20))
    }

    pub fn get(&self, path: &Path) -> Option<Arc<T>> {
        let inner = self.inner.lock().unwrap();
        inner.entries.get(path).map(|(v, _)| Arc::clone(v))
    }

    pub fn insert(&self, path: &Path, value: Arc<T>, bytes: usize) {
        if bytes > self.budget {
            return;
        }
        let mut inner = self.inner.lock().unwrap();
        if inner.entries.contains_key(path) {
            return;
        }
        while inner.used + bytes > self.budget {
            let Some(old) = inner.order.pop_front() else {
                break;
            };
            if let Some((_, sz)) = inner.entries.remove(&old) {
                inner.used -= sz;
            }
        }
        inner.used += bytes;
        inner.order.push_back(path.to_path_buf());
        inner.entries.insert(path.to_path_buf(), (value, bytes));
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
