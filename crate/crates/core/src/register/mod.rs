//! Multi-resolution 3D affine registration and warping.
//!
//! [`register_affine`] finds the transform taking fixed-image physical points
//! to moving-image physical points. It runs a coarse-to-fine box-averaged
//! pyramid and, on each level, an adaptive-step coordinate descent over the
//! 12 affine parameters with finite-difference probes. The cost is evaluated
//! on a seeded voxel subsample of the fixed image that stays fixed for the
//! level, so a run is a pure function of its inputs and the config.

mod cache;
mod optimize;
mod transform;

pub use cache::{Registrar, TransformCache};
pub use optimize::register_affine;
pub use transform::AffineTransform;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::volgrid::sample::{nearest, trilinear, warp_values, IndexMap};
use crate::volgrid::{Geometry, LabelMap, Volume};

/// Similarity cost; lower is better for both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// `1 - normalized cross-correlation`.
    Ncc,
    /// Mean squared intensity difference.
    Ssd,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Ncc => "ncc",
            Metric::Ssd => "ssd",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ncc" => Ok(Metric::Ncc),
            "ssd" => Ok(Metric::Ssd),
            other => Err(Error::InvalidArgument(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegConfig {
    pub levels: usize,
    /// Coordinate-descent sweeps allowed per pyramid level.
    pub iterations_per_level: usize,
    pub metric: Metric,
    /// Initial step of the linear-part parameters; translations start at
    /// ten times this, in mm.
    pub step_init: f64,
    pub step_shrink: f64,
    pub min_step: f64,
    pub sample_fraction: f64,
    pub seed: u64,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            levels: 3,
            iterations_per_level: 100,
            metric: Metric::Ncc,
            step_init: 0.1,
            step_shrink: 0.5,
            min_step: 1e-4,
            sample_fraction: 0.25,
            seed: 0,
        }
    }
}

impl RegConfig {
    /// A cheaper setting for bulk work (cohort-wide RCA, atlas building):
    /// fewer samples and a looser stopping step.
    pub fn fast(seed: u64) -> Self {
        RegConfig {
            iterations_per_level: 40,
            min_step: 2e-3,
            sample_fraction: 0.08,
            seed,
            ..RegConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("registration config: {m}")));
        if self.levels == 0 || self.levels > 5 {
            return bad("levels must be in 1..=5");
        }
        if self.iterations_per_level == 0 {
            return bad("iterations_per_level must be positive");
        }
        if !(self.step_init > 0.0 && self.step_init.is_finite()) {
            return bad("step_init must be positive");
        }
        if !(self.step_shrink > 0.0 && self.step_shrink < 1.0) {
            return bad("step_shrink must be in (0, 1)");
        }
        if !(self.min_step > 0.0 && self.min_step.is_finite()) {
            return bad("min_step must be positive");
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return bad("sample_fraction must be in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegResult {
    pub transform: AffineTransform,
    /// Cost of `transform` on the finest level's sample set.
    pub final_metric: f64,
    /// Cost of the identity on the same sample set.
    pub metric_at_identity: f64,
    /// Sweeps used on each level, coarsest first.
    pub iterations_used: Vec<usize>,
}

/// Cost accumulator shared by the whole-image and sampled paths.
#[derive(Default)]
pub(crate) struct CostSums {
    n: f64,
    sa: f64,
    sb: f64,
    saa: f64,
    sbb: f64,
    sab: f64,
}

impl CostSums {
    #[inline]
    pub fn push(&mut self, a: f64, b: f64) {
        self.n += 1.0;
        self.sa += a;
        self.sb += b;
        self.saa += a * a;
        self.sbb += b * b;
        self.sab += a * b;
    }

    fn var_a(&self) -> f64 {
        self.saa - self.sa * self.sa / self.n
    }

    fn var_b(&self) -> f64 {
        self.sbb - self.sb * self.sb / self.n
    }

    pub fn ssd(&self) -> f64 {
        (self.saa - 2.0 * self.sab + self.sbb) / self.n
    }

    /// `1 - ncc`, or `None` if either side is constant.
    pub fn ncc_cost(&self) -> Option<f64> {
        let (va, vb) = (self.var_a(), self.var_b());
        let tol = 1e-12 * self.n;
        if va <= tol || vb <= tol {
            return None;
        }
        let cov = self.sab - self.sa * self.sb / self.n;
        Some(1.0 - (cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
    }
}

/// Whole-image cost between two volumes on the same grid.
pub fn similarity(a: &Volume, b: &Volume, metric: Metric) -> Result<f64> {
    a.geometry().check_same(b.geometry(), "similarity operands")?;
    let mut sums = CostSums::default();
    for (&x, &y) in a.voxels().iter().zip(b.voxels()) {
        sums.push(x as f64, y as f64);
    }
    match metric {
        Metric::Ssd => Ok(sums.ssd()),
        Metric::Ncc => sums.ncc_cost().ok_or_else(|| {
            Error::Degenerate("normalized cross-correlation of a constant image".into())
        }),
    }
}

/// Resamples `v` onto `target`: each output voxel takes the trilinear value of
/// `v` at `t(position)`; out-of-bounds samples are 0.
pub fn warp_image(v: &Volume, t: &AffineTransform, target: &Geometry) -> Result<Volume> {
    t.check_invertible()?;
    target.validate()?;
    let map = IndexMap::new(v.geometry(), target, &t.matrix, &t.translation);
    Volume::new(
        *target,
        warp_values(v.voxels(), v.geometry(), target, map, trilinear),
    )
}

/// Nearest-neighbor counterpart of [`warp_image`] for label maps.
pub fn warp_labels(m: &LabelMap, t: &AffineTransform, target: &Geometry) -> Result<LabelMap> {
    t.check_invertible()?;
    target.validate()?;
    let map = IndexMap::new(m.geometry(), target, &t.matrix, &t.translation);
    LabelMap::new(
        *target,
        warp_values(m.voxels(), m.geometry(), target, map, nearest),
    )
}
