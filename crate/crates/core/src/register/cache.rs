use std::collections::HashMap;
use std::sync::Mutex;

use super::{register_affine, AffineTransform, RegConfig};
use crate::error::Result;
use crate::volgrid::Volume;

/// Memo of registrations keyed by `(moving id, fixed id)`.
///
/// Valid only while the image behind an id does not change and all lookups
/// use the same [`RegConfig`]; the experiment harness owns one per run.
#[derive(Debug, Default)]
pub struct TransformCache {
    map: Mutex<HashMap<(String, String), AffineTransform>>,
}

impl TransformCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get_or_register(
        &self,
        moving_id: &str,
        moving: &Volume,
        fixed_id: &str,
        fixed: &Volume,
        cfg: &RegConfig,
    ) -> Result<AffineTransform> {
        let key = (moving_id.to_string(), fixed_id.to_string());
        if let Some(t) = self.map.lock().unwrap().get(&key) {
            return Ok(*t);
        }
        let t = register_affine(moving, fixed, cfg)?.transform;
        self.map.lock().unwrap().insert(key, t);
        Ok(t)
    }
}

/// Registration settings plus an optional shared cache, so callers that
/// register the same pairs repeatedly can opt into memoization.
#[derive(Debug, Clone, Copy)]
pub struct Registrar<'a> {
    pub cfg: RegConfig,
    pub cache: Option<&'a TransformCache>,
}

impl<'a> Registrar<'a> {
    pub fn new(cfg: RegConfig) -> Self {
        Registrar { cfg, cache: None }
    }

    pub fn cached(cfg: RegConfig, cache: &'a TransformCache) -> Self {
        Registrar { cfg, cache: Some(cache) }
    }

    /// Transform from `fixed` physical space into `moving` physical space.
    /// Ids are only used as cache keys.
    pub fn register(
        &self,
        moving_id: &str,
        moving: &Volume,
        fixed_id: &str,
        fixed: &Volume,
    ) -> Result<AffineTransform> {
        match self.cache {
            Some(c) => c.get_or_register(moving_id, moving, fixed_id, fixed, &self.cfg),
            None => Ok(register_affine(moving, fixed, &self.cfg)?.transform),
        }
    }
}
