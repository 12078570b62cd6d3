//! Reverse classification accuracy: estimating a segmentation's Dice score
//! without its ground truth.
//!
//! The test image is registered onto each labeled reference image, its
//! predicted segmentation is carried along with nearest-neighbor warping,
//! and the warped prediction is scored against the reference's manual
//! labels. The best score over the references is the estimate.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::metrics::{dice, mae, pearson};
use crate::par;
use crate::register::{register_affine, warp_labels, AffineTransform, RegConfig, TransformCache};
use crate::volgrid::{LabelMap, Volume};

/// A labeled subject used as a reverse classifier.
#[derive(Debug, Clone)]
pub struct Reference {
    pub id: String,
    pub image: Volume,
    pub labels: LabelMap,
}

impl Reference {
    pub fn new(id: impl Into<String>, image: Volume, labels: LabelMap) -> Result<Self> {
        let id = id.into();
        image
            .geometry()
            .check_same(labels.geometry(), &format!("reference {id} image/labels"))?;
        Ok(Reference { id, image, labels })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceScore {
    pub reference_id: String,
    /// Dice, with an empty-vs-empty comparison counted as 0.
    pub dsc: f64,
    /// Set when both masks were empty.
    pub undefined: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityEstimate {
    pub subject_id: String,
    pub predicted_dsc: f64,
    pub per_reference: Vec<ReferenceScore>,
    pub label: u8,
}

impl QualityEstimate {
    /// Reference that produced the maximum (first one on ties).
    pub fn best_reference(&self) -> &str {
        let mut best = &self.per_reference[0];
        for s in &self.per_reference[1..] {
            if s.dsc > best.dsc {
                best = s;
            }
        }
        &best.reference_id
    }
}

/// Registers `test_image` (moving) onto every reference (fixed).
pub fn register_to_references(
    test_image: &Volume,
    references: &[Reference],
    cfg: &RegConfig,
) -> Vec<Result<AffineTransform>> {
    par::map(references, |r| {
        register_affine(test_image, &r.image, cfg)
            .map(|res| res.transform)
            .map_err(|e| e.for_reference(&r.id))
    })
}

/// Same as [`register_to_references`], memoized under `(subject_id, reference id)`.
pub fn register_to_references_cached(
    subject_id: &str,
    test_image: &Volume,
    references: &[Reference],
    cfg: &RegConfig,
    cache: &TransformCache,
) -> Vec<Result<AffineTransform>> {
    par::map(references, |r| {
        cache
            .get_or_register(subject_id, test_image, &r.id, &r.image, cfg)
            .map_err(|e| e.for_reference(&r.id))
    })
}

/// Scores `predicted_seg` against each reference given the registrations
/// (reference space -> test space) already computed.
pub fn score_with_transforms(
    subject_id: &str,
    predicted_seg: &LabelMap,
    references: &[Reference],
    transforms: &[AffineTransform],
    label: u8,
) -> Result<QualityEstimate> {
    if references.is_empty() {
        return Err(Error::InvalidArgument("RCA needs at least one reference".into()));
    }
    if references.len() != transforms.len() {
        return Err(Error::InvalidArgument(format!(
            "{} references but {} transforms",
            references.len(),
            transforms.len()
        )));
    }
    let mut per_reference = Vec::with_capacity(references.len());
    for (r, t) in references.iter().zip(transforms) {
        let warped = warp_labels(predicted_seg, t, r.labels.geometry())
            .map_err(|e| e.for_reference(&r.id))?;
        let d = dice(&warped, &r.labels, label).map_err(|e| e.for_reference(&r.id))?;
        per_reference.push(ReferenceScore {
            reference_id: r.id.clone(),
            dsc: d.or(0.0),
            undefined: !d.is_defined(),
        });
    }
    let predicted_dsc = per_reference.iter().map(|s| s.dsc).fold(0.0, f64::max);
    Ok(QualityEstimate {
        subject_id: subject_id.to_string(),
        predicted_dsc,
        per_reference,
        label,
    })
}

/// RCA estimate of the Dice score of `predicted_seg` for `label`.
pub fn predict_quality(
    subject_id: &str,
    test_image: &Volume,
    predicted_seg: &LabelMap,
    references: &[Reference],
    label: u8,
    cfg: &RegConfig,
) -> Result<QualityEstimate> {
    if references.is_empty() {
        return Err(Error::InvalidArgument("RCA needs at least one reference".into()));
    }
    test_image
        .geometry()
        .check_same(predicted_seg.geometry(), "test image/predicted segmentation")?;
    let transforms = register_to_references(test_image, references, cfg)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    score_with_transforms(subject_id, predicted_seg, references, &transforms, label)
}

/// A segmenter's output on one subject.
#[derive(Debug, Clone)]
pub struct SegmenterOutput {
    pub subject_id: String,
    pub image: Volume,
    pub segmentation: LabelMap,
}

#[derive(Debug, Default)]
pub struct CohortPrediction {
    /// In input order, skipping failed subjects.
    pub estimates: Vec<QualityEstimate>,
    pub failures: Vec<(String, Error)>,
}

/// Runs [`predict_quality`] on every subject; failures are collected and the
/// batch continues.
pub fn predict_cohort(
    outputs: &[SegmenterOutput],
    references: &[Reference],
    label: u8,
    cfg: &RegConfig,
) -> Result<CohortPrediction> {
    if outputs.is_empty() {
        return Err(Error::InvalidArgument("no segmenter outputs".into()));
    }
    if references.is_empty() {
        return Err(Error::InvalidArgument("RCA needs at least one reference".into()));
    }
    let results = par::map(outputs, |o| {
        predict_quality(&o.subject_id, &o.image, &o.segmentation, references, label, cfg)
            .map_err(|e| e.for_subject(&o.subject_id))
    });
    let mut out = CohortPrediction::default();
    for (o, r) in outputs.iter().zip(results) {
        match r {
            Ok(e) => out.estimates.push(e),
            Err(e) => out.failures.push((o.subject_id.clone(), e)),
        }
    }
    Ok(out)
}

/// Accuracy of predictions within one band of real Dice.
#[derive(Debug, Clone, PartialEq)]
pub struct BandStat {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_predicted: f64,
    pub mean_real: f64,
    pub mae: f64,
}

/// Real-Dice bands used for stratified reporting; the last one is closed.
pub const DSC_BANDS: [(f64, f64); 3] = [(0.0, 0.6), (0.6, 0.8), (0.8, 1.0)];

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionPair {
    pub subject_id: String,
    pub predicted_dsc: f64,
    pub real_dsc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionEvalReport {
    pub pearson_r: f64,
    pub mae: f64,
    /// Mean predicted minus mean real.
    pub mean_bias: f64,
    pub pairs: Vec<PredictionPair>,
    pub bands: Vec<BandStat>,
}

impl PredictionEvalReport {
    pub fn from_pairs(pairs: Vec<PredictionPair>) -> Result<Self> {
        let pred: Vec<f64> = pairs.iter().map(|p| p.predicted_dsc).collect();
        let real: Vec<f64> = pairs.iter().map(|p| p.real_dsc).collect();
        let pearson_r = pearson(&pred, &real)?;
        let mae = mae(&pred, &real)?;
        let n = pairs.len() as f64;
        let mean_bias = pred.iter().sum::<f64>() / n - real.iter().sum::<f64>() / n;
        let bands = DSC_BANDS
            .iter()
            .enumerate()
            .map(|(i, &(lo, hi))| {
                let last = i + 1 == DSC_BANDS.len();
                let sel: Vec<&PredictionPair> = pairs
                    .iter()
                    .filter(|p| p.real_dsc >= lo && (p.real_dsc < hi || (last && p.real_dsc <= hi)))
                    .collect();
                let c = sel.len();
                let avg = |f: &dyn Fn(&PredictionPair) -> f64| {
                    if c == 0 {
                        f64::NAN
                    } else {
                        sel.iter().map(|p| f(p)).sum::<f64>() / c as f64
                    }
                };
                BandStat {
                    lo,
                    hi,
                    count: c,
                    mean_predicted: avg(&|p| p.predicted_dsc),
                    mean_real: avg(&|p| p.real_dsc),
                    mae: avg(&|p| (p.predicted_dsc - p.real_dsc).abs()),
                }
            })
            .collect();
        Ok(PredictionEvalReport {
            pearson_r,
            mae,
            mean_bias,
            pairs,
            bands,
        })
    }

    /// `subject_id,predicted_dsc,real_dsc` rows, then `r=<..> mae=<..>`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("subject_id,predicted_dsc,real_dsc\n");
        for p in &self.pairs {
            let _ = writeln!(s, "{},{:.6},{:.6}", p.subject_id, p.predicted_dsc, p.real_dsc);
        }
        let _ = writeln!(s, "{}", self.summary_line());
        s
    }

    pub fn summary_line(&self) -> String {
        format!("r={:.4} mae={:.4}", self.pearson_r, self.mae)
    }

    /// One line per real-Dice band.
    pub fn bands_table(&self) -> String {
        let mut s = String::from("band,count,mean_predicted,mean_real,mae\n");
        for b in &self.bands {
            let _ = writeln!(
                s,
                "[{:.1};{:.1}),{},{:.4},{:.4},{:.4}",
                b.lo, b.hi, b.count, b.mean_predicted, b.mean_real, b.mae
            );
        }
        s
    }
}

/// Compares estimates with the real Dice scores of the same segmentations.
/// Subjects whose real score is undefined (organ absent in both) are left out.
pub fn evaluate_predictions(
    estimates: &[QualityEstimate],
    ground_truth: &[(String, LabelMap)],
    segmentations: &[(String, LabelMap)],
    label: u8,
) -> Result<PredictionEvalReport> {
    let mut pairs = Vec::with_capacity(estimates.len());
    for e in estimates {
        let gt = ground_truth
            .iter()
            .find(|(id, _)| *id == e.subject_id)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("no ground truth for subject {}", e.subject_id))
            })?;
        let seg = segmentations
            .iter()
            .find(|(id, _)| *id == e.subject_id)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("no segmentation for subject {}", e.subject_id))
            })?;
        let d = dice(&seg.1, &gt.1, label).map_err(|err| err.for_subject(&e.subject_id))?;
        if let Some(real) = d.value {
            pairs.push(PredictionPair {
                subject_id: e.subject_id.clone(),
                predicted_dsc: e.predicted_dsc,
                real_dsc: real,
            });
        }
    }
    PredictionEvalReport::from_pairs(pairs)
}

/// `subject_id,predicted_dsc,best_reference_id`.
pub fn estimates_to_csv(estimates: &[QualityEstimate]) -> String {
    let mut s = String::from("subject_id,predicted_dsc,best_reference_id\n");
    for e in estimates {
        let _ = writeln!(s, "{},{:.6},{}", e.subject_id, e.predicted_dsc, e.best_reference());
    }
    s
}

/// Parses the CSV written by [`estimates_to_csv`] into `(id, score)` pairs.
pub fn scores_from_csv(text: &str) -> Result<Vec<(String, f64)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| Error::InvalidArgument(format!("estimates csv: {e}")))?
        .clone();
    let col = |n: &str| {
        headers
            .iter()
            .position(|h| h == n)
            .ok_or_else(|| Error::InvalidArgument(format!("estimates csv: missing column {n:?}")))
    };
    let (ci, cs) = (col("subject_id")?, col("predicted_dsc")?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::InvalidArgument(format!("estimates csv: {e}")))?;
        let score = rec[cs]
            .parse::<f64>()
            .map_err(|_| Error::InvalidArgument(format!("bad score {:?}", &rec[cs])))?;
        out.push((rec[ci].to_string(), score));
    }
    Ok(out)
}
