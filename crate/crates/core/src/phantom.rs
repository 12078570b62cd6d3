//! Synthetic two-domain cohorts.
//!
//! A subject is a body ellipsoid (labeled background) holding one or two
//! organ ellipsoids: label 1 is the large "liver", label 2 the small
//! "kidney". Organ centers and semi-axes are jittered per subject, and the
//! organ-to-tissue contrast varies per subject too, so a fixed appearance
//! model sees a spread of difficulties. Labels are exact ellipsoid
//! membership at voxel centers.
//!
//! Voxel intensity is
//! `gain * (region_mean + region_std * noise_std * e1) + bias + noise_std * e2`
//! with `e1, e2` standard normal, i.e. `intensity_stds` scale the global
//! noise level per region.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::par;
use crate::rng;
use crate::volgrid::{
    write_labels, write_manifest, write_volume, Cohort, Domain, Geometry, LabelMap, SubjectRecord,
    Volume,
};

pub const LIVER: u8 = 1;
pub const KIDNEY: u8 = 2;

const MAX_REDRAWS: usize = 100;

/// Nominal anatomy in mm, in a frame centered on the volume.
const BODY_AXES: [f64; 3] = [40.0, 32.0, 43.0];
const LIVER_CENTER: [f64; 3] = [-11.0, 5.0, 5.0];
const LIVER_AXES: [f64; 3] = [19.0, 14.0, 17.0];
const KIDNEY_CENTER: [f64; 3] = [18.0, -11.0, -8.0];
const KIDNEY_AXES: [f64; 3] = [7.0, 6.0, 11.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseJitter {
    /// Per-axis organ center shift bound, in voxels.
    pub max_translation: f64,
    /// Per-axis semi-axis scale range.
    pub scale_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainParams {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub organ_count: usize,
    /// Per label: air (0), liver (1), kidney (2).
    pub intensity_means: Vec<f64>,
    /// Per-label noise multipliers, same indexing as `intensity_means`.
    pub intensity_stds: Vec<f64>,
    /// Body tissue outside the organs; labeled background.
    pub tissue_mean: f64,
    pub tissue_std: f64,
    /// Organ contrast against tissue is scaled per subject by a factor drawn
    /// from `[1 - contrast_jitter, 1 + contrast_jitter]`.
    pub contrast_jitter: f64,
    pub gain: f64,
    pub bias: f64,
    pub noise_std: f64,
    pub pose_jitter: PoseJitter,
}

impl Default for DomainParams {
    fn default() -> Self {
        presets().0
    }
}

impl DomainParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("domain params: {m}")));
        if self.dims.iter().any(|&d| d < 16) {
            return bad(format!("dims must be >= 16 per axis, got {:?}", self.dims));
        }
        if self.spacing.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return bad("spacing must be positive".into());
        }
        if !(1..=2).contains(&self.organ_count) {
            return bad(format!("organ_count must be 1 or 2, got {}", self.organ_count));
        }
        let classes = self.organ_count + 1;
        if self.intensity_means.len() < classes || self.intensity_stds.len() < classes {
            return bad(format!("need intensity mean and std for {classes} classes"));
        }
        if self.intensity_stds.iter().any(|&s| s.is_nan() || s <= 0.0) || self.tissue_std.is_nan() || self.tissue_std <= 0.0 {
            return bad("intensity stds must be positive".into());
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 || !(0.0..1.0).contains(&self.contrast_jitter) {
            return bad("noise_std must be >= 0 and contrast_jitter in [0, 1)".into());
        }
        let (lo, hi) = self.pose_jitter.scale_range;
        if !(0.7..=1.3).contains(&lo) || !(0.7..=1.3).contains(&hi) || lo > hi {
            return bad(format!("scale range ({lo}, {hi}) must lie within [0.7, 1.3]"));
        }
        if self.pose_jitter.max_translation.is_nan() || self.pose_jitter.max_translation < 0.0 {
            return bad("max_translation must be >= 0".into());
        }
        Ok(())
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::centered(self.dims, self.spacing).expect("validated params")
    }

    /// Key-value description written next to generated cohorts.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dims = {} {} {}", self.dims[0], self.dims[1], self.dims[2]);
        let _ = writeln!(s, "spacing = {} {} {}", self.spacing[0], self.spacing[1], self.spacing[2]);
        let _ = writeln!(s, "organ_count = {}", self.organ_count);
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "intensity_means = {}", join(&self.intensity_means));
        let _ = writeln!(s, "intensity_stds = {}", join(&self.intensity_stds));
        let _ = writeln!(s, "tissue_mean = {}", self.tissue_mean);
        let _ = writeln!(s, "tissue_std = {}", self.tissue_std);
        let _ = writeln!(s, "contrast_jitter = {}", self.contrast_jitter);
        let _ = writeln!(s, "gain = {}", self.gain);
        let _ = writeln!(s, "bias = {}", self.bias);
        let _ = writeln!(s, "noise_std = {}", self.noise_std);
        let _ = writeln!(s, "max_translation_vox = {}", self.pose_jitter.max_translation);
        let _ = writeln!(
            s,
            "scale_range = {} {}",
            self.pose_jitter.scale_range.0, self.pose_jitter.scale_range.1
        );
        s
    }
}

/// The frozen benchmark domains.
///
/// Source: 48³ at 2 mm, liver clearly brighter than tissue and darker than
/// kidney. Target: 40³ at 2.4 mm (same field of view), scanner gain 1.4 and
/// bias 0.5, less noise, and a liver as bright as the kidney. After z-scoring
/// the target liver sits well above the source liver Gaussian, so a
/// source-trained model loses much of it, while the target on its own stays
/// easy to segment.
pub fn presets() -> (DomainParams, DomainParams) {
    let source = DomainParams {
        dims: [48, 48, 48],
        spacing: [2.0, 2.0, 2.0],
        organ_count: 2,
        intensity_means: vec![0.0, 2.0, 2.9],
        intensity_stds: vec![0.5, 1.0, 1.0],
        tissue_mean: 1.0,
        tissue_std: 1.0,
        contrast_jitter: 0.25,
        gain: 1.0,
        bias: 0.0,
        noise_std: 0.12,
        pose_jitter: PoseJitter {
            max_translation: 3.0,
            scale_range: (0.85, 1.15),
        },
    };
    let target = DomainParams {
        dims: [40, 40, 40],
        spacing: [2.4, 2.4, 2.4],
        intensity_means: vec![0.0, 2.7, 2.6],
        contrast_jitter: 0.35,
        gain: 1.4,
        bias: 0.5,
        noise_std: 0.10,
        ..source.clone()
    };
    (source, target)
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
}

impl Ellipsoid {
    #[inline]
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.axes[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    fn within(&self, g: &Geometry) -> bool {
        (0..3).all(|a| {
            let lo = g.origin[a];
            let hi = g.origin[a] + g.spacing[a] * (g.dims[a] - 1) as f64;
            self.center[a] - self.axes[a] >= lo && self.center[a] + self.axes[a] <= hi
        })
    }
}

fn jitter(
    r: &mut impl Rng,
    center: [f64; 3],
    axes: [f64; 3],
    params: &DomainParams,
) -> Ellipsoid {
    let pj = &params.pose_jitter;
    let mut e = Ellipsoid { center, axes };
    for a in 0..3 {
        if pj.max_translation > 0.0 {
            e.center[a] += r.random_range(-pj.max_translation..=pj.max_translation) * params.spacing[a];
        }
        let (lo, hi) = pj.scale_range;
        if hi > lo {
            e.axes[a] *= r.random_range(lo..=hi);
        } else {
            e.axes[a] *= lo;
        }
    }
    e
}

/// One subject, deterministic in `(params, seed)`.
pub fn generate_subject(params: &DomainParams, seed: u64) -> Result<(Volume, LabelMap)> {
    params.validate()?;
    let g = params.geometry();
    let mut r = rng::rng(seed);

    let mut organs = Vec::with_capacity(params.organ_count);
    let nominal = [(LIVER_CENTER, LIVER_AXES), (KIDNEY_CENTER, KIDNEY_AXES)];
    for (label, (c, a)) in nominal.iter().take(params.organ_count).enumerate() {
        let mut attempt = 0;
        let e = loop {
            let e = jitter(&mut r, *c, *a, params);
            if e.within(&g) {
                break e;
            }
            attempt += 1;
            if attempt >= MAX_REDRAWS {
                return Err(Error::InvalidArgument(format!(
                    "organ {} does not fit the volume after {MAX_REDRAWS} draws",
                    label + 1
                )));
            }
        };
        organs.push(e);
    }
    let body = Ellipsoid {
        center: [0.0; 3],
        axes: BODY_AXES,
    };
    let kappa = if params.contrast_jitter > 0.0 {
        r.random_range(1.0 - params.contrast_jitter..=1.0 + params.contrast_jitter)
    } else {
        1.0
    };

    let n = g.len();
    let mut voxels = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for k in 0..g.dims[2] {
        for j in 0..g.dims[1] {
            for i in 0..g.dims[0] {
                let p = g.physical(i, j, k);
                let organ = organs.iter().rposition(|e| e.contains(p));
                let (label, mean, std) = match organ {
                    Some(o) => {
                        let l = o + 1;
                        let m = params.tissue_mean
                            + kappa * (params.intensity_means[l] - params.tissue_mean);
                        (l as u8, m, params.intensity_stds[l])
                    }
                    None if body.contains(p) => (0, params.tissue_mean, params.tissue_std),
                    None => (0, params.intensity_means[0], params.intensity_stds[0]),
                };
                let e1: f64 = StandardNormal.sample(&mut r);
                let e2: f64 = StandardNormal.sample(&mut r);
                let v = params.gain * (mean + std * params.noise_std * e1)
                    + params.bias
                    + params.noise_std * e2;
                voxels.push(v as f32);
                labels.push(label);
            }
        }
    }
    Ok((Volume::new(g, voxels)?, LabelMap::new(g, labels)?))
}

/// Seed of subject `index` within a cohort seeded with `seed`.
pub fn subject_seed(seed: u64, index: usize) -> u64 {
    rng::derive_seed(seed, index as u64)
}

pub fn subject_id(prefix: &str, index: usize) -> String {
    format!("{prefix}{index:03}")
}

/// In-memory cohort: `(record, image, labels)` per subject.
pub fn generate_subjects(
    params: &DomainParams,
    seed: u64,
    n: usize,
    domain: Domain,
    prefix: &str,
) -> Result<Vec<(SubjectRecord, Volume, LabelMap)>> {
    par::map_range(n, |i| {
        let (v, m) = generate_subject(params, subject_seed(seed, i))?;
        Ok((SubjectRecord::in_memory(subject_id(prefix, i), domain), v, m))
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone)]
pub struct CohortSpec {
    pub n_subjects: usize,
    pub seed: u64,
    pub params: DomainParams,
    pub output_dir: PathBuf,
    pub domain: Domain,
    /// Subject id prefix; ids are `<prefix><index:03>`.
    pub prefix: String,
}

/// Writes `n_subjects` image/label pairs, `manifest.csv` and `params.txt`.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Cohort> {
    if spec.n_subjects == 0 {
        return Err(Error::InvalidArgument("n_subjects must be >= 1".into()));
    }
    let dir = &spec.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let records = par::map_range(spec.n_subjects, |i| -> Result<SubjectRecord> {
        let id = subject_id(&spec.prefix, i);
        let (v, m) = generate_subject(&spec.params, subject_seed(spec.seed, i))?;
        let image_path = dir.join(format!("{id}.mha"));
        let label_path = dir.join(format!("{id}_seg.mha"));
        write_volume(&v, &image_path)?;
        write_labels(&m, &label_path)?;
        Ok(SubjectRecord {
            id,
            image_path,
            label_path: Some(label_path),
            domain: spec.domain,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let cohort = Cohort::new(spec.prefix.trim_end_matches('_').to_string(), records)?;
    write_manifest(&cohort, dir.join("manifest.csv"))?;
    let mut params = format!(
        "domain = {}\nseed = {}\nn_subjects = {}\n",
        spec.domain, spec.seed, spec.n_subjects
    );
    params.push_str(&spec.params.describe());
    let p = dir.join("params.txt");
    fs::write(&p, params).map_err(|e| Error::io(&p, e))?;
    Ok(cohort)
}

/// Ways of corrupting a ground-truth mask to get a segmentation of known,
/// graded quality.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Degradation {
    Erode(usize),
    Dilate(usize),
    Shift([i32; 3]),
}

fn grow(mask: &[bool], g: &Geometry, into: bool) -> Vec<bool> {
    // one 6-neighborhood step; `into = true` dilates, `false` erodes
    let [nx, ny, nz] = g.dims;
    let mut out = mask.to_vec();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = g.index(i, j, k);
                if mask[idx] == into {
                    continue;
                }
                let nbrs = [
                    (i > 0).then(|| idx - 1),
                    (i + 1 < nx).then(|| idx + 1),
                    (j > 0).then(|| idx - nx),
                    (j + 1 < ny).then(|| idx + nx),
                    (k > 0).then(|| idx - nx * ny),
                    (k + 1 < nz).then(|| idx + nx * ny),
                ];
                if nbrs.iter().flatten().any(|&n| mask[n] == into) {
                    out[idx] = into;
                }
            }
        }
    }
    out
}

/// Applies `d` to the `label` mask. Other labels are left in place; a
/// dilated or shifted mask only claims background voxels.
pub fn degrade_labels(labels: &LabelMap, label: u8, d: Degradation) -> LabelMap {
    let g = *labels.geometry();
    let src = labels.voxels();
    let mut mask: Vec<bool> = src.iter().map(|&v| v == label).collect();
    match d {
        Degradation::Erode(k) => (0..k).for_each(|_| mask = grow(&mask, &g, false)),
        Degradation::Dilate(k) => (0..k).for_each(|_| mask = grow(&mask, &g, true)),
        Degradation::Shift(s) => {
            let mut shifted = vec![false; mask.len()];
            for k in 0..g.dims[2] {
                for j in 0..g.dims[1] {
                    for i in 0..g.dims[0] {
                        if !mask[g.index(i, j, k)] {
                            continue;
                        }
                        let t = [i as i64 + s[0] as i64, j as i64 + s[1] as i64, k as i64 + s[2] as i64];
                        if (0..3).all(|a| t[a] >= 0 && t[a] < g.dims[a] as i64) {
                            shifted[g.index(t[0] as usize, t[1] as usize, t[2] as usize)] = true;
                        }
                    }
                }
            }
            mask = shifted;
        }
    }
    let out = src
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| match (m, v == label) {
            (true, _) if v == 0 || v == label => label,
            (false, true) => 0,
            _ => v,
        })
        .collect();
    LabelMap::new(g, out).expect("same geometry")
}

/// A seeded degradation of random kind and severity (1 to 4 voxels).
pub fn random_degradation(seed: u64) -> Degradation {
    let mut r = rng::rng(seed);
    let k = r.random_range(1..=4usize);
    match r.random_range(0..3u32) {
        0 => Degradation::Erode(k),
        1 => Degradation::Dilate(k),
        _ => {
            let mut s = [0i32; 3];
            for v in &mut s {
                *v = r.random_range(-(k as i32)..=k as i32);
            }
            if s == [0; 3] {
                s[0] = k as i32;
            }
            Degradation::Shift(s)
        }
    }
}

/// Graded-quality segmentation of `label` derived from ground truth.
pub fn graded_segmentation(labels: &LabelMap, label: u8, seed: u64) -> (LabelMap, Degradation) {
    let d = random_degradation(seed);
    (degrade_labels(labels, label, d), d)
}

/// Directory layout helper: `<dir>/manifest.csv`.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.csv")
}
