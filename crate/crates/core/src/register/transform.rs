use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::volgrid::Geometry;

/// Affine map from fixed-space physical points (mm) to moving-space physical
/// points: `q = matrix * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub matrix: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for AffineTransform {
    fn default() -> Self {
        AffineTransform::identity()
    }
}

impl AffineTransform {
    pub const fn identity() -> Self {
        AffineTransform {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        AffineTransform {
            translation: t,
            ..AffineTransform::identity()
        }
    }

    /// `p -> matrix * (p - center) + center`.
    pub fn about_center(matrix: [[f64; 3]; 3], center: [f64; 3]) -> Self {
        let mut translation = center;
        for (r, t) in translation.iter_mut().enumerate() {
            for c in 0..3 {
                *t -= matrix[r][c] * center[c];
            }
        }
        AffineTransform {
            matrix,
            translation,
        }
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        [0, 1, 2].map(|r| m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2] + self.translation[r])
    }

    pub fn det(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn is_invertible(&self) -> bool {
        let d = self.det();
        d.is_finite() && d.abs() > 1e-9
    }

    pub(crate) fn check_invertible(&self) -> Result<()> {
        if self.is_invertible() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "transform is not invertible (det = {:e})",
                self.det()
            )))
        }
    }

    #[allow(clippy::needless_range_loop)]
    pub fn inverse(&self) -> Result<Self> {
        self.check_invertible()?;
        let m = &self.matrix;
        let d = self.det();
        let mut inv = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                // adjugate: cofactor of (c, r)
                let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
                let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
                inv[r][c] = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / d;
            }
        }
        let mut translation = [0.0; 3];
        for (r, t) in translation.iter_mut().enumerate() {
            *t = -(0..3).map(|c| inv[r][c] * self.translation[c]).sum::<f64>();
        }
        Ok(AffineTransform {
            matrix: inv,
            translation,
        })
    }

    /// `self ∘ other`: applies `other` first.
    #[allow(clippy::needless_range_loop)]
    pub fn compose(&self, other: &AffineTransform) -> Self {
        let mut matrix = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                matrix[r][c] = (0..3).map(|k| self.matrix[r][k] * other.matrix[k][c]).sum();
            }
        }
        AffineTransform {
            matrix,
            translation: self.apply(other.translation),
        }
    }

    /// Mean distance, in voxels of `geometry`, between where `self` and
    /// `other` send each voxel center of `geometry`.
    pub fn mean_displacement(&self, other: &AffineTransform, geometry: &Geometry) -> f64 {
        let mut total = 0.0;
        for k in 0..geometry.dims[2] {
            for j in 0..geometry.dims[1] {
                for i in 0..geometry.dims[0] {
                    let p = geometry.physical(i, j, k);
                    let (a, b) = (self.apply(p), other.apply(p));
                    total += (0..3)
                        .map(|ax| ((a[ax] - b[ax]) / geometry.spacing[ax]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                }
            }
        }
        total / geometry.len() as f64
    }

    /// The 12 numbers: row-major matrix then translation.
    pub fn to_params(&self) -> [f64; 12] {
        let mut p = [0.0; 12];
        for r in 0..3 {
            p[3 * r..3 * r + 3].copy_from_slice(&self.matrix[r]);
        }
        p[9..].copy_from_slice(&self.translation);
        p
    }

    pub fn from_params(p: [f64; 12]) -> Self {
        AffineTransform {
            matrix: [
                [p[0], p[1], p[2]],
                [p[3], p[4], p[5]],
                [p[6], p[7], p[8]],
            ],
            translation: [p[9], p[10], p[11]],
        }
    }
}

/// One whitespace-separated line of 12 numbers.
impl fmt::Display for AffineTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.to_params().iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join(" "))
    }
}

impl FromStr for AffineTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let vals: Vec<f64> = s
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::InvalidArgument(format!("bad transform value {t:?}")))
            })
            .collect::<Result<_>>()?;
        let arr: [f64; 12] = vals.try_into().map_err(|v: Vec<f64>| {
            Error::InvalidArgument(format!("transform needs 12 values, got {}", v.len()))
        })?;
        Ok(AffineTransform::from_params(arr))
    }
}
