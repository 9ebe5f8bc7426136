use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

use crate::types::{ProbabilityMap, Volume};

pub type CacheKey = [u8; 32];

/// Builds cache keys from length-prefixed parts.
pub(crate) struct KeyBuilder(Sha256);

impl KeyBuilder {
    pub fn new(domain: &str) -> Self {
        Self(Sha256::new()).part(domain.as_bytes())
    }

    pub fn part(mut self, bytes: &[u8]) -> Self {
        self.0.update((bytes.len() as u64).to_le_bytes());
        self.0.update(bytes);
        self
    }

    pub fn u64(self, v: u64) -> Self {
        self.part(&v.to_le_bytes())
    }

    pub fn finish(self) -> CacheKey {
        self.0.finalize().into()
    }
}

/// Content hash of a volume: dims, spacing and every voxel's bit pattern.
pub fn volume_hash(v: &Volume) -> CacheKey {
    let mut h = Sha256::new();
    for d in v.dims().0 {
        h.update((d as u64).to_le_bytes());
    }
    for s in v.spacing().as_array() {
        h.update(s.to_bits().to_le_bytes());
    }
    for x in v.data() {
        h.update(x.to_bits().to_le_bytes());
    }
    h.finalize().into()
}

/// Shared store of augmented views and backend predictions.
///
/// Keys cover every input that determines the stored value, so a hit is
/// always the value a fresh computation would produce.
pub struct PredictionCache {
    enabled: bool,
    maps: Mutex<HashMap<CacheKey, Arc<ProbabilityMap>>>,
    views: Mutex<HashMap<CacheKey, Arc<Volume>>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl Default for PredictionCache {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for PredictionCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PredictionCache")
            .field("enabled", &self.enabled)
            .field("hits", &self.hits())
            .field("misses", &self.misses())
            .finish()
    }
}

impl PredictionCache {
    pub fn new() -> Self {
        Self {
            enabled: true,
            maps: Mutex::default(),
            views: Mutex::default(),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    /// A cache that never stores anything.
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::new()
        }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.maps.lock().map(|m| m.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn map_or_insert<E>(
        &self,
        key: CacheKey,
        compute: impl FnOnce() -> Result<ProbabilityMap, E>,
    ) -> Result<Arc<ProbabilityMap>, E> {
        get_or_insert(self, &self.maps, key, compute)
    }

    pub(crate) fn view_or_insert<E>(
        &self,
        key: CacheKey,
        compute: impl FnOnce() -> Result<Volume, E>,
    ) -> Result<Arc<Volume>, E> {
        get_or_insert(self, &self.views, key, compute)
    }
}

fn get_or_insert<T, E>(
    cache: &PredictionCache,
    store: &Mutex<HashMap<CacheKey, Arc<T>>>,
    key: CacheKey,
    compute: impl FnOnce() -> Result<T, E>,
) -> Result<Arc<T>, E> {
    if cache.enabled {
        if let Some(hit) = store.lock().unwrap_or_else(|e| e.into_inner()).get(&key) {
            cache.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Arc::clone(hit));
        }
    }
    cache.misses.fetch_add(1, Ordering::Relaxed);
    // Computed outside the lock; a concurrent duplicate computes the same
    // value and the first insert wins.
    let value = Arc::new(compute()?);
    if !cache.enabled {
        return Ok(value);
    }
    let mut guard = store.lock().unwrap_or_else(|e| e.into_inner());
    Ok(Arc::clone(guard.entry(key).or_insert(value)))
}
