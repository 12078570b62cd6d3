//! Volumes, label maps and cohorts.
//!
//! Grids are axis aligned. A voxel index `(i, j, k)` sits at physical
//! position `origin + spacing * (i, j, k)` (mm); storage is x-fastest.

mod cohort;
mod io;
pub(crate) mod sample;

pub use cohort::{load_cohort, write_manifest, Cohort, Domain, SubjectRecord};
pub use io::{read_labels, read_volume, write_labels, write_volume};
pub use sample::{resample, Interp, VoxelGrid};

use crate::error::{Error, Result};

/// Grid layout in physical space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let g = Geometry {
            dims,
            spacing,
            origin,
        };
        g.validate()?;
        Ok(g)
    }

    /// Grid whose physical center is the origin of the coordinate frame.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let origin = [0, 1, 2].map(|a| -(dims[a] as f64 - 1.0) * spacing[a] / 2.0);
        Geometry::new(dims, spacing, origin)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "dims must be positive, got {:?}",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidArgument("origin must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let r = idx / self.dims[0];
        [i, r % self.dims[1], r / self.dims[1]]
    }

    #[inline]
    pub fn physical(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + self.spacing[0] * i as f64,
            self.origin[1] + self.spacing[1] * j as f64,
            self.origin[2] + self.spacing[2] * k as f64,
        ]
    }

    /// Physical position of the grid center.
    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.origin[a] + self.spacing[a] * (self.dims[a] as f64 - 1.0) / 2.0)
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub(crate) fn check_same(&self, other: &Geometry, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::GeometryMismatch(format!(
                "{what}: {:?} vs {:?}",
                self, other
            )));
        }
        Ok(())
    }
}

/// Scalar 3D image.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    geometry: Geometry,
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(geometry: Geometry, voxels: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        if voxels.len() != geometry.len() {
            return Err(Error::InvalidArgument(format!(
                "voxel count {} does not match dims {:?}",
                voxels.len(),
                geometry.dims
            )));
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite voxel at index {i}"
            )));
        }
        Ok(Volume { geometry, voxels })
    }

    pub fn filled(geometry: Geometry, value: f32) -> Result<Self> {
        Volume::new(geometry, vec![value; geometry.len()])
    }

    /// Builds a volume by evaluating `f` at every voxel's physical position.
    pub fn from_fn(geometry: Geometry, f: impl Fn([f64; 3]) -> f32) -> Result<Self> {
        geometry.validate()?;
        let mut voxels = Vec::with_capacity(geometry.len());
        for k in 0..geometry.dims[2] {
            for j in 0..geometry.dims[1] {
                for i in 0..geometry.dims[0] {
                    voxels.push(f(geometry.physical(i, j, k)));
                }
            }
        }
        Volume::new(geometry, voxels)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    pub fn mean(&self) -> f64 {
        self.voxels.iter().map(|&v| v as f64).sum::<f64>() / self.voxels.len() as f64
    }

    /// Population mean and standard deviation.
    pub fn mean_std(&self) -> (f64, f64) {
        let n = self.voxels.len() as f64;
        let mean = self.mean();
        let var = self
            .voxels
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        (mean, var.sqrt())
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.voxels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Integer label grid. Label 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    geometry: Geometry,
    voxels: Vec<u8>,
    label_set: Vec<u8>,
}

impl LabelMap {
    pub fn new(geometry: Geometry, voxels: Vec<u8>) -> Result<Self> {
        geometry.validate()?;
        if voxels.len() != geometry.len() {
            return Err(Error::InvalidArgument(format!(
                "label count {} does not match dims {:?}",
                voxels.len(),
                geometry.dims
            )));
        }
        let mut seen = [false; 256];
        for &v in &voxels {
            seen[v as usize] = true;
        }
        let label_set = (0..=255u8).filter(|&l| seen[l as usize]).collect();
        Ok(LabelMap {
            geometry,
            voxels,
            label_set,
        })
    }

    pub fn empty(geometry: Geometry) -> Result<Self> {
        LabelMap::new(geometry, vec![0; geometry.len()])
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn voxels(&self) -> &[u8] {
        &self.voxels
    }

    /// Sorted distinct labels present.
    pub fn label_set(&self) -> &[u8] {
        &self.label_set
    }

    pub fn count(&self, label: u8) -> usize {
        self.voxels.iter().filter(|&&v| v == label).count()
    }

    /// Binary mask of `label` as a 0/1 label map.
    pub fn mask(&self, label: u8) -> LabelMap {
        let voxels = self.voxels.iter().map(|&v| u8::from(v == label)).collect();
        LabelMap::new(self.geometry, voxels).expect("same geometry")
    }
}

/// Z-score normalization with the population standard deviation.
pub fn normalize_zscore(v: &Volume) -> Result<Volume> {
    let (mean, std) = v.mean_std();
    if std <= 1e-12 {
        return Err(Error::Degenerate(format!(
            "cannot z-score a near-constant volume (std = {std:e})"
        )));
    }
    let voxels = v
        .voxels
        .iter()
        .map(|&x| ((x as f64 - mean) / std) as f32)
        .collect();
    Volume::new(v.geometry, voxels)
}
