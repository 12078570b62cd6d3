//! Probabilistic-atlas segmenter with Gaussian intensity likelihoods.
//!
//! The model factors into a spatial part (per-class prior maps in the space
//! of a template subject) and an appearance part (one Gaussian per class on
//! z-scored intensities). Fine-tuning only touches the appearance part.

use std::collections::BTreeSet;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::par;
use crate::register::{warp_image, warp_labels, AffineTransform, Registrar};
use crate::volgrid::{
    normalize_zscore, read_volume, write_volume, Geometry, LabelMap, SubjectRecord, Volume,
};

/// Pseudo-count added to every class at every atlas voxel.
pub const PRIOR_SMOOTHING: f64 = 1.0;
pub const VARIANCE_FLOOR: f64 = 1e-4;
/// Default fine-tuning blend weight.
pub const DEFAULT_BLEND: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    Manual,
    Pseudo,
}

#[derive(Debug, Clone)]
pub struct LabeledSubject {
    pub record: SubjectRecord,
    pub image: Volume,
    pub labels: LabelMap,
    pub label_kind: LabelKind,
}

impl LabeledSubject {
    pub fn new(record: SubjectRecord, image: Volume, labels: LabelMap, label_kind: LabelKind) -> Result<Self> {
        image
            .geometry()
            .check_same(labels.geometry(), &format!("subject {} image/labels", record.id))?;
        Ok(LabeledSubject {
            record,
            image,
            labels,
            label_kind,
        })
    }

    pub fn id(&self) -> &str {
        &self.record.id
    }
}

/// Subject whose space hosts the atlas.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub id: String,
    /// Z-scored image.
    pub image: Volume,
}

impl Template {
    pub fn new(id: impl Into<String>, image: &Volume) -> Result<Self> {
        Ok(Template {
            id: id.into(),
            image: normalize_zscore(image)?,
        })
    }

    /// The subject with the smallest id.
    pub fn first_by_id(subjects: &[LabeledSubject]) -> Result<Self> {
        let s = subjects
            .iter()
            .min_by(|a, b| a.id().cmp(b.id()))
            .ok_or_else(|| Error::InvalidArgument("no subjects to pick a template from".into()))?;
        Template::new(s.id(), &s.image)
    }
}

/// Per-class intensity model; `count == 0` marks a class never seen in training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassGaussian {
    pub mean: f64,
    pub variance: f64,
    pub count: u64,
}

impl ClassGaussian {
    pub const ABSENT: ClassGaussian = ClassGaussian {
        mean: 0.0,
        variance: VARIANCE_FLOOR,
        count: 0,
    };

    pub fn is_absent(&self) -> bool {
        self.count == 0
    }

    #[inline]
    fn log_density(&self, x: f64) -> f64 {
        let d = x - self.mean;
        -0.5 * ((2.0 * std::f64::consts::PI * self.variance).ln() + d * d / self.variance)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: u64,
    sum: f64,
    sumsq: f64,
}

impl Moments {
    fn gaussian(&self) -> ClassGaussian {
        if self.n == 0 {
            return ClassGaussian::ABSENT;
        }
        let n = self.n as f64;
        let mean = self.sum / n;
        let variance = (self.sumsq / n - mean * mean).max(VARIANCE_FLOOR);
        ClassGaussian {
            mean,
            variance,
            count: self.n,
        }
    }
}

/// Pooled per-class moments of z-scored intensities, subjects visited in id order.
fn fit_appearance(subjects: &[&LabeledSubject], classes: &[u8]) -> Result<Vec<ClassGaussian>> {
    let per_subject = par::map(subjects, |s| -> Result<Vec<Moments>> {
        let z = normalize_zscore(&s.image).map_err(|e| e.for_subject(s.id()))?;
        let mut m = vec![Moments::default(); classes.len()];
        for (&x, &l) in z.voxels().iter().zip(s.labels.voxels()) {
            if let Some(c) = classes.iter().position(|&k| k == l) {
                let x = x as f64;
                m[c].n += 1;
                m[c].sum += x;
                m[c].sumsq += x * x;
            }
        }
        Ok(m)
    });
    let mut total = vec![Moments::default(); classes.len()];
    for m in per_subject {
        for (t, m) in total.iter_mut().zip(m?) {
            t.n += m.n;
            t.sum += m.sum;
            t.sumsq += m.sumsq;
        }
    }
    Ok(total.iter().map(Moments::gaussian).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    /// `train`, `scratch`, `finetune`, ...
    pub mode: String,
    pub template_id: String,
    /// Subjects behind the atlas, sorted.
    pub atlas_ids: Vec<String>,
    /// Subjects whose intensities shaped the appearance model, sorted.
    pub appearance_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterModel {
    /// Sorted, background (0) first.
    pub classes: Vec<u8>,
    /// One map per class on the template grid.
    pub prior: Vec<Volume>,
    /// Prior used where the atlas has no coverage: the smoothed all-background column.
    pub outside_prior: Vec<f64>,
    pub appearance: Vec<ClassGaussian>,
    pub template: Template,
    pub provenance: Provenance,
}

fn sorted_unique(subjects: &[LabeledSubject]) -> Vec<&LabeledSubject> {
    let mut v: Vec<&LabeledSubject> = subjects.iter().collect();
    v.sort_by(|a, b| a.id().cmp(b.id()));
    v.dedup_by(|a, b| a.id() == b.id());
    v
}

/// Builds atlas and appearance from labeled subjects.
///
/// Each subject's labels are carried into the template space by registering
/// its image to the template image. Subjects are treated as a set keyed by
/// id, so order and repeated entries do not matter.
pub fn train(subjects: &[LabeledSubject], template: &Template, reg: &Registrar) -> Result<SegmenterModel> {
    if subjects.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty cohort".into()));
    }
    let unique = sorted_unique(subjects);
    let classes: Vec<u8> = std::iter::once(0)
        .chain(unique.iter().flat_map(|s| s.labels.label_set().iter().copied()))
        .collect::<BTreeSet<u8>>()
        .into_iter()
        .collect();
    let geom = *template.image.geometry();

    let warped = par::map(&unique, |s| -> Result<LabelMap> {
        if s.id() == template.id {
            return warp_labels(&s.labels, &AffineTransform::identity(), &geom);
        }
        let z = normalize_zscore(&s.image).map_err(|e| e.for_subject(s.id()))?;
        let t = reg
            .register(s.id(), &z, &template.id, &template.image)
            .map_err(|e| e.for_subject(s.id()))?;
        warp_labels(&s.labels, &t, &geom).map_err(|e| e.for_subject(s.id()))
    });
    let mut counts = vec![vec![0u32; geom.len()]; classes.len()];
    for w in warped {
        for (i, &l) in w?.voxels().iter().enumerate() {
            let c = classes.binary_search(&l).expect("label in class list");
            counts[c][i] += 1;
        }
    }
    let n = unique.len() as f64;
    let denom = n + PRIOR_SMOOTHING * classes.len() as f64;
    let prior = counts
        .iter()
        .map(|cnt| {
            let vox = cnt
                .iter()
                .map(|&k| ((k as f64 + PRIOR_SMOOTHING) / denom) as f32)
                .collect();
            Volume::new(geom, vox)
        })
        .collect::<Result<Vec<_>>>()?;
    let outside_prior = classes
        .iter()
        .map(|&c| (if c == 0 { n } else { 0.0 } + PRIOR_SMOOTHING) / denom)
        .collect();
    let appearance = fit_appearance(&unique, &classes)?;
    let ids: Vec<String> = unique.iter().map(|s| s.id().to_string()).collect();
    Ok(SegmenterModel {
        classes,
        prior,
        outside_prior,
        appearance,
        template: template.clone(),
        provenance: Provenance {
            mode: "train".into(),
            template_id: template.id.clone(),
            atlas_ids: ids.clone(),
            appearance_ids: ids,
        },
    })
}

/// Training from scratch on source plus selected target subjects.
pub fn adapt_scratch(
    source: &[LabeledSubject],
    target_selected: &[LabeledSubject],
    template: &Template,
    reg: &Registrar,
) -> Result<SegmenterModel> {
    let mut all = source.to_vec();
    all.extend_from_slice(target_selected);
    let mut m = train(&all, template, reg)?;
    if !target_selected.is_empty() {
        m.provenance.mode = "scratch".into();
    }
    Ok(m)
}

/// Refits the appearance model on `target_selected` and blends it into the
/// current one by raw moments: mean and second moment are mixed with weight
/// `blend` on the target. The atlas is left untouched.
pub fn adapt_finetune(model: &SegmenterModel, target_selected: &[LabeledSubject], blend: f64) -> Result<SegmenterModel> {
    if !(0.0..=1.0).contains(&blend) {
        return Err(Error::InvalidArgument(format!("blend {blend} outside [0, 1]")));
    }
    if blend == 0.0 {
        return Ok(model.clone());
    }
    if target_selected.is_empty() {
        return Err(Error::InvalidArgument("fine-tuning needs at least one subject when blend > 0".into()));
    }
    let unique = sorted_unique(target_selected);
    let fitted = fit_appearance(&unique, &model.classes)?;
    let mut out = model.clone();
    for (old, new) in out.appearance.iter_mut().zip(fitted) {
        if new.is_absent() {
            continue;
        }
        if old.is_absent() {
            *old = new;
            continue;
        }
        let mean = (1.0 - blend) * old.mean + blend * new.mean;
        let m2 = (1.0 - blend) * (old.variance + old.mean * old.mean)
            + blend * (new.variance + new.mean * new.mean);
        *old = ClassGaussian {
            mean,
            variance: (m2 - mean * mean).max(VARIANCE_FLOOR),
            count: old.count + new.count,
        };
    }
    out.provenance.mode = "finetune".into();
    let mut ids: BTreeSet<String> = out.provenance.appearance_ids.iter().cloned().collect();
    ids.extend(unique.iter().map(|s| s.id().to_string()));
    out.provenance.appearance_ids = ids.into_iter().collect();
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub labels: LabelMap,
    /// Posterior of the winning class.
    pub max_posterior: Volume,
}

impl SegmenterModel {
    pub fn reference_geometry(&self) -> &Geometry {
        self.template.image.geometry()
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let k = self.classes.len();
        if k == 0 || self.prior.len() != k || self.appearance.len() != k || self.outside_prior.len() != k {
            return Err(Error::InvalidArgument("model class tables disagree in length".into()));
        }
        let g = self.reference_geometry();
        for p in &self.prior {
            g.check_same(p.geometry(), "prior map")?;
        }
        for i in 0..g.len() {
            let s: f64 = self.prior.iter().map(|p| p.voxels()[i] as f64).sum();
            if (s - 1.0).abs() > 1e-6 || self.prior.iter().any(|p| p.voxels()[i] < 0.0) {
                return Err(Error::InvalidArgument(format!("prior column {i} sums to {s}")));
            }
        }
        if self.appearance.iter().any(|a| a.variance < VARIANCE_FLOOR) {
            return Err(Error::InvalidArgument("variance below floor".into()));
        }
        Ok(())
    }

    /// Labels `image` given its transform from template space into image space.
    pub fn predict_with_transform(&self, image: &Volume, t: &AffineTransform) -> Result<Prediction> {
        let z = normalize_zscore(image)?;
        let inv = t.inverse()?;
        let geom = *image.geometry();
        // Trilinear sampling reads 0 outside the grid, so warping the offset
        // from the outside value makes uncovered voxels fall back to it.
        let priors = self
            .prior
            .iter()
            .zip(&self.outside_prior)
            .map(|(p, &o)| -> Result<Vec<f64>> {
                let shifted = Volume::new(
                    *p.geometry(),
                    p.voxels().iter().map(|&v| (v as f64 - o) as f32).collect(),
                )?;
                Ok(warp_image(&shifted, &inv, &geom)?
                    .voxels()
                    .iter()
                    .map(|&v| (v as f64 + o).max(0.0))
                    .collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let active: Vec<usize> = (0..self.classes.len())
            .filter(|&c| !self.appearance[c].is_absent())
            .collect();
        if active.is_empty() {
            return Err(Error::InvalidArgument("model has no trained class".into()));
        }
        let mut labels = vec![0u8; geom.len()];
        let mut post = vec![0f32; geom.len()];
        let zv = z.voxels();
        let mut scores = vec![0.0; active.len()];
        for i in 0..geom.len() {
            let x = zv[i] as f64;
            let mut best = 0;
            for (a, &c) in active.iter().enumerate() {
                scores[a] = priors[c][i].ln() + self.appearance[c].log_density(x);
                if scores[a] > scores[best] {
                    best = a;
                }
            }
            let top = scores[best];
            let total: f64 = if top.is_finite() {
                scores.iter().map(|s| (s - top).exp()).sum()
            } else {
                active.len() as f64
            };
            labels[i] = self.classes[active[best]];
            post[i] = (1.0 / total) as f32;
        }
        Ok(Prediction {
            labels: LabelMap::new(geom, labels)?,
            max_posterior: Volume::new(geom, post)?,
        })
    }

    /// Registers `image` to the template and labels it. `id` keys the cache.
    pub fn predict(&self, id: &str, image: &Volume, reg: &Registrar) -> Result<Prediction> {
        let z = normalize_zscore(image)?;
        let t = if id == self.template.id && image.geometry() == self.reference_geometry() {
            AffineTransform::identity()
        } else {
            reg.register(id, &z, &self.template.id, &self.template.image)?
        };
        self.predict_with_transform(image, &t)
    }

    /// Writes `template.mha`, `prior_<class>.mha`, `appearance.csv` and
    /// `provenance.txt` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_volume(&self.template.image, dir.join("template.mha"))?;
        for (c, p) in self.classes.iter().zip(&self.prior) {
            write_volume(p, dir.join(format!("prior_{c}.mha")))?;
        }
        let mut a = String::from("class,mean,variance,count\n");
        for (c, g) in self.classes.iter().zip(&self.appearance) {
            let _ = writeln!(a, "{c},{},{},{}", g.mean, g.variance, g.count);
        }
        let path = dir.join("appearance.csv");
        fs::write(&path, a).map_err(|e| Error::io(&path, e))?;
        let p = &self.provenance;
        let mut s = String::new();
        let _ = writeln!(s, "mode = {}", p.mode);
        let _ = writeln!(s, "template_id = {}", p.template_id);
        let _ = writeln!(s, "atlas_ids = {}", p.atlas_ids.join(" "));
        let _ = writeln!(s, "appearance_ids = {}", p.appearance_ids.join(" "));
        let outside: Vec<String> = self.outside_prior.iter().map(f64::to_string).collect();
        let _ = writeln!(s, "outside_prior = {}", outside.join(" "));
        let path = dir.join("provenance.txt");
        fs::write(&path, s).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let prov_path = dir.join("provenance.txt");
        let prov_text = read("provenance.txt")?;
        let field = |key: &str| -> Result<Vec<String>> {
            prov_text
                .lines()
                .find_map(|l| {
                    let (k, v) = l.split_once('=')?;
                    (k.trim() == key).then(|| v.split_whitespace().map(String::from).collect())
                })
                .ok_or_else(|| Error::format(&prov_path, format!("missing {key}")))
        };
        let single = |key: &str| -> Result<String> {
            field(key)?
                .into_iter()
                .next()
                .ok_or_else(|| Error::format(&prov_path, format!("empty {key}")))
        };
        let provenance = Provenance {
            mode: single("mode")?,
            template_id: single("template_id")?,
            atlas_ids: field("atlas_ids")?,
            appearance_ids: field("appearance_ids")?,
        };
        let outside_prior = field("outside_prior")?
            .iter()
            .map(|v| parse(v, &prov_path))
            .collect::<Result<Vec<f64>>>()?;

        let app_path = dir.join("appearance.csv");
        let app_text = read("appearance.csv")?;
        let mut rdr = csv::Reader::from_reader(app_text.as_bytes());
        let mut classes = Vec::new();
        let mut appearance = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::format(&app_path, e.to_string()))?;
            if rec.len() != 4 {
                return Err(Error::format(&app_path, "expected class,mean,variance,count"));
            }
            classes.push(parse::<u8>(&rec[0], &app_path)?);
            appearance.push(ClassGaussian {
                mean: parse(&rec[1], &app_path)?,
                variance: parse(&rec[2], &app_path)?,
                count: parse(&rec[3], &app_path)?,
            });
        }
        let prior = classes
            .iter()
            .map(|c| read_volume(dir.join(format!("prior_{c}.mha"))))
            .collect::<Result<Vec<_>>>()?;
        let model = SegmenterModel {
            classes,
            prior,
            outside_prior,
            appearance,
            template: Template {
                id: provenance.template_id.clone(),
                image: read_volume(dir.join("template.mha"))?,
            },
            provenance,
        };
        model.validate()?;
        Ok(model)
    }
}

fn parse<T: FromStr>(s: &str, path: &Path) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::format(path, format!("cannot parse {s:?}")))
}

impl fmt::Display for SegmenterModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} model on {} (", self.provenance.mode, self.provenance.template_id)?;
        for (i, (c, g)) in self.classes.iter().zip(&self.appearance).enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{c}: N({:.3}, {:.3})", g.mean, g.variance)?;
        }
        f.write_str(")")
    }
}

/// Labels each image with the model's argmax and marks the result as pseudo
/// labels. Failures are returned alongside and do not stop the batch.
pub fn pseudo_label(
    model: &SegmenterModel,
    images: &[(SubjectRecord, Volume)],
    reg: &Registrar,
) -> (Vec<LabeledSubject>, Vec<(String, Error)>) {
    let results = par::map(images, |(rec, img)| {
        model
            .predict(&rec.id, img, reg)
            .map_err(|e| e.for_subject(&rec.id))
    });
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for ((rec, img), r) in images.iter().zip(results) {
        match r {
            Ok(p) => ok.push(LabeledSubject {
                record: rec.clone(),
                image: img.clone(),
                labels: p.labels,
                label_kind: LabelKind::Pseudo,
            }),
            Err(e) => failed.push((rec.id.clone(), e)),
        }
    }
    (ok, failed)
}
