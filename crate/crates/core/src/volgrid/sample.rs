use super::{Geometry, LabelMap, Volume};
use crate::error::{Error, Result};
use crate::par;

/// Interpolation used when sampling a grid off-lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Linear,
    Nearest,
}

/// Continuous-index coordinates closer than this to a lattice point are
/// snapped onto it, so identity and lattice-aligned maps reproduce voxels
/// exactly.
const SNAP: f64 = 1e-6;

/// Affine map from destination voxel indices to continuous source indices.
#[derive(Debug, Clone, Copy)]
pub(crate) struct IndexMap {
    pub m: [[f64; 3]; 3],
    pub b: [f64; 3],
}

impl IndexMap {
    /// Index map for a physical transform `p_src = matrix * p_dst + translation`.
    pub fn new(
        src: &Geometry,
        dst: &Geometry,
        matrix: &[[f64; 3]; 3],
        translation: &[f64; 3],
    ) -> Self {
        let mut m = [[0.0; 3]; 3];
        let mut b = [0.0; 3];
        for r in 0..3 {
            let mut off = translation[r] - src.origin[r];
            for c in 0..3 {
                m[r][c] = matrix[r][c] * dst.spacing[c] / src.spacing[r];
                off += matrix[r][c] * dst.origin[c];
            }
            b[r] = off / src.spacing[r];
        }
        IndexMap { m, b }
    }

    #[inline]
    pub fn apply(&self, i: f64, j: f64, k: f64) -> [f64; 3] {
        [
            self.m[0][0] * i + self.m[0][1] * j + self.m[0][2] * k + self.b[0],
            self.m[1][0] * i + self.m[1][1] * j + self.m[1][2] * k + self.b[1],
            self.m[2][0] * i + self.m[2][1] * j + self.m[2][2] * k + self.b[2],
        ]
    }
}

#[inline]
fn snap(c: f64) -> f64 {
    let r = c.round();
    if (c - r).abs() < SNAP {
        r
    } else {
        c
    }
}

/// Lower lattice index and fraction along one axis, or `None` outside.
#[inline]
fn axis(c: f64, d: usize) -> Option<(usize, f64)> {
    let c = snap(c);
    if c < 0.0 || c > (d - 1) as f64 {
        return None;
    }
    let lo = (c.floor() as usize).min(d.saturating_sub(2));
    Some((lo, c - lo as f64))
}

/// Trilinear sample at continuous index `c`; 0 outside the grid.
#[inline]
pub(crate) fn trilinear(data: &[f32], dims: &[usize; 3], c: [f64; 3]) -> f32 {
    let Some((x0, fx)) = axis(c[0], dims[0]) else {
        return 0.0;
    };
    let Some((y0, fy)) = axis(c[1], dims[1]) else {
        return 0.0;
    };
    let Some((z0, fz)) = axis(c[2], dims[2]) else {
        return 0.0;
    };
    let sx = dims[0];
    let sxy = dims[0] * dims[1];
    let x1 = if dims[0] > 1 { 1 } else { 0 };
    let y1 = if dims[1] > 1 { sx } else { 0 };
    let z1 = if dims[2] > 1 { sxy } else { 0 };
    let base = x0 + sx * y0 + sxy * z0;
    let at = |o: usize| data[base + o] as f64;
    // exact at lattice points: weights are 0/1 and v * 1 + w * 0 == v
    let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + (b - a) * t };
    let c00 = lerp(at(0), at(x1), fx);
    let c10 = lerp(at(y1), at(y1 + x1), fx);
    let c01 = lerp(at(z1), at(z1 + x1), fx);
    let c11 = lerp(at(z1 + y1), at(z1 + y1 + x1), fx);
    let c0 = lerp(c00, c10, fy);
    let c1 = lerp(c01, c11, fy);
    lerp(c0, c1, fz) as f32
}

/// Nearest-neighbor lookup at continuous index `c`; `T::default()` outside.
#[inline]
pub(crate) fn nearest<T: Copy + Default>(data: &[T], dims: &[usize; 3], c: [f64; 3]) -> T {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let r = snap(c[a]).round();
        if r < 0.0 || r > (dims[a] - 1) as f64 {
            return T::default();
        }
        idx[a] = r as usize;
    }
    data[idx[0] + dims[0] * (idx[1] + dims[1] * idx[2])]
}

/// Samples `src` at every voxel of `dst` through `map`.
pub(crate) fn warp_values<T, F>(src: &[T], src_geom: &Geometry, dst: &Geometry, map: IndexMap, sample: F) -> Vec<T>
where
    T: Copy + Default + Send + Sync,
    F: Fn(&[T], &[usize; 3], [f64; 3]) -> T + Sync + Send,
{
    let mut out = vec![T::default(); dst.len()];
    let slab = dst.dims[0] * dst.dims[1];
    par::for_each_chunk(&mut out, slab, |start, chunk| {
        let k = (start / slab) as f64;
        for (off, o) in chunk.iter_mut().enumerate() {
            let i = (off % dst.dims[0]) as f64;
            let j = (off / dst.dims[0]) as f64;
            *o = sample(src, &src_geom.dims, map.apply(i, j, k));
        }
    });
    out
}

const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Grids that can be resampled onto another geometry.
pub trait VoxelGrid: Sized {
    fn geometry(&self) -> &Geometry;

    /// Resamples onto `target` by physical position; out-of-bounds samples are 0.
    fn resample(&self, target: &Geometry, mode: Interp) -> Result<Self>;
}

impl VoxelGrid for Volume {
    fn geometry(&self) -> &Geometry {
        Volume::geometry(self)
    }

    fn resample(&self, target: &Geometry, mode: Interp) -> Result<Self> {
        target.validate()?;
        let src = self.geometry();
        let map = IndexMap::new(src, target, &IDENTITY, &[0.0; 3]);
        let voxels = match mode {
            Interp::Linear => warp_values(self.voxels(), src, target, map, trilinear),
            Interp::Nearest => warp_values(self.voxels(), src, target, map, nearest),
        };
        Volume::new(*target, voxels)
    }
}

impl VoxelGrid for LabelMap {
    fn geometry(&self) -> &Geometry {
        LabelMap::geometry(self)
    }

    fn resample(&self, target: &Geometry, mode: Interp) -> Result<Self> {
        if mode == Interp::Linear {
            return Err(Error::InvalidArgument(
                "label maps can only be resampled with nearest-neighbor interpolation".into(),
            ));
        }
        target.validate()?;
        let src = self.geometry();
        let map = IndexMap::new(src, target, &IDENTITY, &[0.0; 3]);
        LabelMap::new(*target, warp_values(self.voxels(), src, target, map, nearest))
    }
}

/// Resamples a volume or label map onto `target`.
pub fn resample<G: VoxelGrid>(grid: &G, target: &Geometry, mode: Interp) -> Result<G> {
    grid.resample(target, mode)
}
