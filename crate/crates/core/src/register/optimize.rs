use super::{AffineTransform, CostSums, Metric, RegConfig, RegResult};
use crate::error::{Error, Result};
use crate::rng;
use crate::volgrid::sample::trilinear;
use crate::volgrid::{Geometry, Volume};

/// Parameters: 9 coefficients of the linear part's deviation from identity
/// in [`LINEAR_BASIS`], then the translation (mm). The linear part acts
/// about the fixed image center.
type Params = [f64; 12];

/// Axis scalings, then infinitesimal rotations (antisymmetric), then
/// symmetric shears. Probing along these rather than single matrix entries
/// lets the descent follow a rotation, which moves two entries at once.
const LINEAR_BASIS: [[(usize, usize, f64); 2]; 9] = [
    [(0, 0, 1.0), (0, 0, 0.0)],
    [(1, 1, 1.0), (1, 1, 0.0)],
    [(2, 2, 1.0), (2, 2, 0.0)],
    [(0, 1, 1.0), (1, 0, -1.0)],
    [(0, 2, 1.0), (2, 0, -1.0)],
    [(1, 2, 1.0), (2, 1, -1.0)],
    [(0, 1, 1.0), (1, 0, 1.0)],
    [(0, 2, 1.0), (2, 0, 1.0)],
    [(1, 2, 1.0), (2, 1, 1.0)],
];

const STEP_GROWTH: f64 = 1.5;
const MAX_STEP_FACTOR: f64 = 4.0;
// coarse levels are small enough to use every voxel
const MIN_SAMPLES: usize = 4096;

fn to_transform(p: &Params, center: [f64; 3]) -> AffineTransform {
    let mut m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for (coef, basis) in p.iter().zip(LINEAR_BASIS) {
        for (r, c, w) in basis {
            m[r][c] += coef * w;
        }
    }
    let mut t = AffineTransform::about_center(m, center);
    for a in 0..3 {
        t.translation[a] += p[9 + a];
    }
    t
}

/// Box-averages `v` by an integer `factor` per axis.
fn downsample(v: &Volume, factor: usize) -> Volume {
    if factor == 1 {
        return v.clone();
    }
    let g = v.geometry();
    let dims = g.dims.map(|d| d.div_ceil(factor));
    let spacing = [0, 1, 2].map(|a| g.spacing[a] * factor as f64);
    let origin = [0, 1, 2].map(|a| g.origin[a] + (factor as f64 - 1.0) / 2.0 * g.spacing[a]);
    let out_g = Geometry {
        dims,
        spacing,
        origin,
    };
    let mut sums = vec![0.0f64; out_g.len()];
    let mut counts = vec![0u32; out_g.len()];
    let src = v.voxels();
    for k in 0..g.dims[2] {
        for j in 0..g.dims[1] {
            let row = g.index(0, j, k);
            let orow = out_g.index(0, j / factor, k / factor);
            for i in 0..g.dims[0] {
                sums[orow + i / factor] += src[row + i] as f64;
                counts[orow + i / factor] += 1;
            }
        }
    }
    let voxels = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| (s / c as f64) as f32)
        .collect();
    Volume::new(out_g, voxels).expect("downsampled grid is valid")
}

/// One pyramid level: fixed samples and the moving image they are compared to.
struct Level {
    points: Vec<[f64; 3]>,
    values: Vec<f64>,
    moving: Volume,
    metric: Metric,
}

impl Level {
    fn new(fixed: &Volume, moving: Volume, fraction: f64, metric: Metric, seed: u64) -> Self {
        let g = fixed.geometry();
        let n = g.len();
        let k = ((n as f64 * fraction).round() as usize).max(MIN_SAMPLES.min(n));
        let mut idx = rng::sample_indices(n, k, seed);
        idx.sort_unstable();
        let points = idx
            .iter()
            .map(|&i| {
                let [x, y, z] = g.coords(i);
                g.physical(x, y, z)
            })
            .collect();
        let values = idx.iter().map(|&i| fixed.voxels()[i] as f64).collect();
        Level {
            points,
            values,
            moving,
            metric,
        }
    }

    #[allow(clippy::needless_range_loop)]
    fn cost(&self, t: &AffineTransform) -> f64 {
        let mg = self.moving.geometry();
        // physical fixed point -> continuous moving index
        let mut m = [[0.0; 3]; 3];
        let mut b = [0.0; 3];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] = t.matrix[r][c] / mg.spacing[r];
            }
            b[r] = (t.translation[r] - mg.origin[r]) / mg.spacing[r];
        }
        let data = self.moving.voxels();
        let mut sums = CostSums::default();
        for (p, &f) in self.points.iter().zip(&self.values) {
            let c = [0, 1, 2].map(|r| m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2] + b[r]);
            sums.push(f, trilinear(data, &mg.dims, c) as f64);
        }
        match self.metric {
            Metric::Ssd => sums.ssd(),
            // a fully decorrelated (e.g. out-of-view) overlap is the worst case
            Metric::Ncc => sums.ncc_cost().unwrap_or(1.0),
        }
    }
}

fn checked(cost: f64) -> Result<f64> {
    if cost.is_finite() {
        Ok(cost)
    } else {
        Err(Error::Registration("non-finite cost encountered".into()))
    }
}

/// Adaptive-step coordinate descent; never returns a worse point than `start`.
fn descend(
    level: &Level,
    start: Params,
    start_cost: f64,
    center: [f64; 3],
    cfg: &RegConfig,
    lin_step: f64,
    translation_only: bool,
) -> Result<(Params, f64, usize)> {
    let mut theta = start;
    let mut cur = start_cost;
    let init: [f64; 12] = std::array::from_fn(|j| if j < 9 { lin_step } else { 10.0 * lin_step });
    let floor: [f64; 12] =
        std::array::from_fn(|j| if j < 9 { cfg.min_step } else { 10.0 * cfg.min_step });
    let mut step = init;
    if translation_only {
        step[..9].fill(0.0);
    }
    let mut sweeps = 0;
    while sweeps < cfg.iterations_per_level {
        if (0..12).all(|j| step[j] < floor[j]) {
            break;
        }
        sweeps += 1;
        for j in 0..12 {
            if step[j] < floor[j] {
                continue;
            }
            let mut moved = false;
            for sign in [1.0, -1.0] {
                let mut probe = theta;
                probe[j] += sign * step[j];
                let c = checked(level.cost(&to_transform(&probe, center)))?;
                if c < cur {
                    theta = probe;
                    cur = c;
                    moved = true;
                    break;
                }
            }
            step[j] = if moved {
                (step[j] * STEP_GROWTH).min(init[j] * MAX_STEP_FACTOR)
            } else {
                step[j] * cfg.step_shrink
            };
        }
    }
    Ok((theta, cur, sweeps))
}

fn check_input(v: &Volume, what: &str, metric: Metric) -> Result<()> {
    if metric == Metric::Ncc {
        let (_, std) = v.mean_std();
        if std <= 1e-12 {
            return Err(Error::Degenerate(format!(
                "{what} image is constant; normalized cross-correlation is undefined"
            )));
        }
    }
    Ok(())
}

/// Registers `moving` onto `fixed`; the result maps fixed physical points to
/// moving physical points.
pub fn register_affine(moving: &Volume, fixed: &Volume, cfg: &RegConfig) -> Result<RegResult> {
    cfg.validate()?;
    check_input(moving, "moving", cfg.metric)?;
    check_input(fixed, "fixed", cfg.metric)?;
    let center = fixed.geometry().center();

    let mut theta: Params = [0.0; 12];
    let mut iterations_used = Vec::with_capacity(cfg.levels);
    let mut final_metric = 0.0;
    let mut metric_at_identity = 0.0;
    for level_idx in 0..cfg.levels {
        let factor = 1usize << (cfg.levels - 1 - level_idx);
        let level = Level::new(
            &downsample(fixed, factor),
            downsample(moving, factor),
            cfg.sample_fraction,
            cfg.metric,
            rng::derive_seed(cfg.seed, level_idx as u64),
        );
        let lin_step = cfg.step_init * cfg.step_shrink.powi(level_idx as i32);
        let mut start_cost = checked(level.cost(&to_transform(&theta, center)))?;
        let finest = level_idx + 1 == cfg.levels;
        if finest {
            metric_at_identity = checked(level.cost(&AffineTransform::identity()))?;
            if metric_at_identity < start_cost {
                theta = [0.0; 12];
                start_cost = metric_at_identity;
            }
        }
        let mut sweeps = 0;
        if level_idx == 0 {
            // align positions before letting the linear part move
            let (t, c, n) = descend(&level, theta, start_cost, center, cfg, lin_step, true)?;
            theta = t;
            start_cost = c;
            sweeps += n;
        }
        let (t, c, n) = descend(&level, theta, start_cost, center, cfg, lin_step, false)?;
        theta = t;
        iterations_used.push(sweeps + n);
        if finest {
            final_metric = c;
        }
    }
    Ok(RegResult {
        transform: to_transform(&theta, center),
        final_metric,
        metric_at_identity,
        iterations_used,
    })
}
