//! Cross-validated domain-adaptation experiments and their reports.
//!
//! A run trains a baseline on every source subject, estimates the quality
//! of its target segmentations with RCA, and then, per fold, picks target
//! training subjects for annotation, adapts the baseline and scores it on the
//! fold's held-out target subjects.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{dice, summarize, SummaryStat};
use crate::par;
use crate::phantom::{self, DomainParams};
use crate::rca::{
    register_to_references_cached, score_with_transforms, PredictionEvalReport, PredictionPair,
    QualityEstimate, Reference,
};
use crate::register::{AffineTransform, RegConfig, Registrar, TransformCache};
use crate::rng;
use crate::segmodel::{
    adapt_finetune, adapt_scratch, train, LabelKind, LabeledSubject, SegmenterModel, Template,
    DEFAULT_BLEND,
};
use crate::select::{rank_subjects, select, SelectionStrategy, StrategyKind};
use crate::volgrid::{load_cohort, read_labels, read_volume, Domain, LabelMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Scratch,
    Finetune,
    PseudoFinetune,
    Iterative,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Scratch => "scratch",
            Mode::Finetune => "finetune",
            Mode::PseudoFinetune => "pseudo_finetune",
            Mode::Iterative => "iterative",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "scratch" => Mode::Scratch,
            "finetune" => Mode::Finetune,
            "pseudo_finetune" => Mode::PseudoFinetune,
            "iterative" => Mode::Iterative,
            _ => return Err(Error::InvalidArgument(format!("unknown mode {s:?}"))),
        })
    }
}

/// What the ranking is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Selector {
    /// RCA-predicted Dice of the baseline segmentations.
    Rca,
    /// Dice against the target ground truth.
    Real,
    /// Seeded random scores.
    Random,
}

impl Selector {
    pub fn as_str(self) -> &'static str {
        match self {
            Selector::Rca => "rca",
            Selector::Real => "real",
            Selector::Random => "random",
        }
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Selector {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "rca" => Selector::Rca,
            "real" => Selector::Real,
            "random" => Selector::Random,
            _ => return Err(Error::InvalidArgument(format!("unknown selector {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SetSize {
    N(usize),
    All,
}

impl fmt::Display for SetSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SetSize::N(n) => write!(f, "{n}"),
            SetSize::All => f.write_str("all"),
        }
    }
}

impl FromStr for SetSize {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(SetSize::All);
        }
        s.parse()
            .map(SetSize::N)
            .map_err(|_| Error::InvalidArgument(format!("bad set size {s:?}")))
    }
}

pub fn default_set_sizes() -> Vec<SetSize> {
    [0, 2, 5, 10, 15]
        .into_iter()
        .map(SetSize::N)
        .chain([SetSize::All])
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Foreground label under evaluation.
    pub label: u8,
    pub folds: usize,
    pub strategy: SelectionStrategy,
    pub mode: Mode,
    pub selector: Selector,
    pub set_sizes: Vec<SetSize>,
    pub seed: u64,
    pub reg: RegConfig,
    pub blend: f64,
    /// Source subjects (first by id) used as RCA references.
    pub n_references: usize,
    /// Random selections are repeated this many times and averaged.
    pub random_repeats: usize,
    /// Iteration 2 reuses the iteration-1 ranking instead of re-running RCA.
    pub reuse_iteration_ranking: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            label: phantom::LIVER,
            folds: 3,
            strategy: SelectionStrategy::best_worst(5),
            mode: Mode::Finetune,
            selector: Selector::Rca,
            set_sizes: default_set_sizes(),
            seed: 0,
            reg: RegConfig::fast(0),
            blend: DEFAULT_BLEND,
            n_references: 10,
            random_repeats: 3,
            reuse_iteration_ranking: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::InvalidArgument("folds must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.blend) {
            return Err(Error::InvalidArgument(format!("blend {} outside [0, 1]", self.blend)));
        }
        if self.n_references == 0 || self.random_repeats == 0 {
            return Err(Error::InvalidArgument(
                "n_references and random_repeats must be positive".into(),
            ));
        }
        self.reg.validate()
    }

    /// Hex SHA-256 of the configuration's debug rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(format!("{self:?}").as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Labeled source and target subjects.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub source: Vec<LabeledSubject>,
    pub target: Vec<LabeledSubject>,
}

impl Dataset {
    /// Loads both manifests; every subject must have labels.
    pub fn load(source_manifest: impl AsRef<Path>, target_manifest: impl AsRef<Path>) -> Result<Self> {
        Ok(Dataset {
            source: load_labeled(source_manifest.as_ref())?,
            target: load_labeled(target_manifest.as_ref())?,
        })
    }

    /// In-memory phantom cohorts, source ids `s000..` and target ids `t000..`.
    pub fn phantom(
        source: &DomainParams,
        n_source: usize,
        target: &DomainParams,
        n_target: usize,
        seed: u64,
    ) -> Result<Self> {
        let make = |p: &DomainParams, n: usize, stream: u64, domain: Domain, prefix: &str| {
            phantom::generate_subjects(p, rng::derive_seed(seed, stream), n, domain, prefix)?
                .into_iter()
                .map(|(rec, v, m)| LabeledSubject::new(rec, v, m, LabelKind::Manual))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Dataset {
            source: make(source, n_source, 1, Domain::Source, "s")?,
            target: make(target, n_target, 2, Domain::Target, "t")?,
        })
    }

    /// The frozen benchmark: 15 source and 24 target subjects from the presets.
    pub fn benchmark() -> Result<Self> {
        let (s, t) = phantom::presets();
        Dataset::phantom(&s, BENCH_SOURCE, &t, BENCH_TARGET, BENCH_SEED)
    }
}

pub const BENCH_SOURCE: usize = 15;
pub const BENCH_TARGET: usize = 24;
pub const BENCH_SEED: u64 = 2018;

fn load_labeled(manifest: &Path) -> Result<Vec<LabeledSubject>> {
    let cohort = load_cohort(manifest)?;
    let subjects = par::map(cohort.subjects(), |rec| -> Result<LabeledSubject> {
        let label_path = rec.label_path.as_ref().ok_or_else(|| {
            Error::Cohort(format!("subject {} has no label file", rec.id))
        })?;
        let image = read_volume(&rec.image_path)?;
        let labels = read_labels(label_path)?;
        LabeledSubject::new(rec.clone(), image, labels, LabelKind::Manual)
            .map_err(|e| e.for_subject(&rec.id))
    });
    subjects.into_iter().collect()
}

/// Seeded shuffle then contiguous partition; the first `len % k` folds get
/// one extra test subject.
pub fn crossval_splits(ids: &[String], k: usize, seed: u64) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    if k < 2 || k > ids.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} subjects into {k} folds",
            ids.len()
        )));
    }
    let mut order = ids.to_vec();
    order.sort();
    rng::shuffle(&mut order, seed);
    let base = order.len() / k;
    let extra = order.len() % k;
    let mut start = 0;
    let mut out = Vec::with_capacity(k);
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let test: Vec<String> = order[start..start + len].to_vec();
        let train: Vec<String> = order[..start]
            .iter()
            .chain(&order[start + len..])
            .cloned()
            .collect();
        out.push((train, test));
        start += len;
    }
    Ok(out)
}

/// One reported cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub strategy: String,
    pub mode: String,
    pub n: String,
    pub stat: SummaryStat,
    /// Held-out Dice per subject, fold by fold.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellProvenance {
    pub strategy: String,
    pub mode: String,
    pub n: String,
    /// Target subjects chosen for annotation, in plan order (all repeats for random).
    pub selected: Vec<String>,
    /// Target subjects whose labels entered training.
    pub target_training: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldProvenance {
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub cells: Vec<CellProvenance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunProvenance {
    pub config_hash: String,
    pub seed: u64,
    pub registration_seed: u64,
    pub template_id: String,
    pub reference_ids: Vec<String>,
    pub folds: Vec<FoldProvenance>,
}

impl RunProvenance {
    /// Fails if any fold's test subject was selected or trained on in that fold.
    pub fn check_isolation(&self) -> Result<()> {
        for f in &self.folds {
            let test: BTreeSet<&String> = f.test_ids.iter().collect();
            for c in &f.cells {
                if let Some(id) = c.selected.iter().chain(&c.target_training).find(|i| test.contains(i)) {
                    return Err(Error::InvalidArgument(format!(
                        "fold {} cell {} {} uses test subject {id}",
                        f.fold, c.strategy, c.mode
                    )));
                }
            }
        }
        Ok(())
    }
}

impl RunProvenance {
    /// Plain-text record: run header, then per fold the splits and every
    /// cell's selected and trained-on target ids.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config_hash = {}", self.config_hash);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "registration_seed = {}", self.registration_seed);
        let _ = writeln!(s, "template_id = {}", self.template_id);
        let _ = writeln!(s, "reference_ids = {}", self.reference_ids.join(" "));
        for f in &self.folds {
            let _ = writeln!(s, "\n[fold {}]", f.fold);
            let _ = writeln!(s, "train_ids = {}", f.train_ids.join(" "));
            let _ = writeln!(s, "test_ids = {}", f.test_ids.join(" "));
            for c in &f.cells {
                let _ = writeln!(
                    s,
                    "cell {} {} {}: selected = {} ; target_training = {}",
                    c.strategy,
                    c.mode,
                    c.n,
                    c.selected.join(" "),
                    c.target_training.join(" ")
                );
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub prediction_eval: Option<PredictionEvalReport>,
    pub provenance: RunProvenance,
}

impl ExperimentReport {
    pub fn row(&self, strategy: &str, mode: &str, n: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.strategy == strategy && r.mode == mode && r.n == n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            _ => Err(Error::InvalidArgument(format!("unknown report format {s:?}"))),
        }
    }
}

/// `0.639 (0.149)`.
pub fn format_cell(s: &SummaryStat) -> String {
    format!("{:.3} ({:.3})", s.mean, s.stdv)
}

pub fn emit_report(report: &ExperimentReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => report_csv(&report.rows),
        ReportFormat::Markdown => report_markdown(report),
    }
}

fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from("strategy,mode,n,mean_dsc,std_dsc,count\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{}",
            r.strategy, r.mode, r.n, r.stat.mean, r.stat.stdv, r.stat.count
        );
    }
    s
}

/// Reads back the CSV written by [`emit_report`]. Per-subject values are not
/// part of the CSV and come back empty.
pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::InvalidArgument(format!("report csv: {e}")))?;
        if rec.len() != 6 {
            return Err(Error::InvalidArgument("report csv: expected 6 columns".into()));
        }
        let num = |i: usize| {
            rec[i]
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("report csv: bad number {:?}", &rec[i])))
        };
        rows.push(ReportRow {
            strategy: rec[0].to_string(),
            mode: rec[1].to_string(),
            n: rec[2].to_string(),
            stat: SummaryStat {
                mean: num(3)?,
                stdv: num(4)?,
                count: rec[5]
                    .parse()
                    .map_err(|_| Error::InvalidArgument("report csv: bad count".into()))?,
            },
            values: Vec::new(),
        });
    }
    Ok(rows)
}

const TABLE2_ROWS: [(&str, &str, &str); 9] = [
    ("Baseline", "baseline", "0"),
    ("All T", "all", "all"),
    ("Random 5", "random", "5"),
    ("Worst 5 (real)", "worst_real", "5"),
    ("Worst 5 (RCA)", "worst_rca", "5"),
    ("Best 5 (real)", "best_real", "5"),
    ("Best 5 (RCA)", "best_rca", "5"),
    ("Best 5 and Worst 5 (real)", "best_worst_real", "5"),
    ("Best 5 and Worst 5 (RCA)", "best_worst_rca", "5"),
];

const SWEEP_FAMILIES: [(&str, &str, &str); 7] = [
    ("FT random-n", "random", "finetune"),
    ("FT best-n (real)", "best_real", "finetune"),
    ("FT best-n (RCA)", "best_rca", "finetune"),
    ("PL best-n (real)", "best_real", "pseudo_finetune"),
    ("PL best-n (RCA)", "best_rca", "pseudo_finetune"),
    ("S+T best-n (real)", "best_real", "scratch"),
    ("S+T best-n (RCA)", "best_rca", "scratch"),
];

fn report_markdown(report: &ExperimentReport) -> String {
    let cell = |strategy: &str, mode: &str, n: &str| -> String {
        let row = match (strategy, n) {
            (_, "0") => report.row("baseline", "none", "0"),
            (_, "all") => report.row("all", mode, "all"),
            _ => report.row(strategy, mode, n),
        };
        row.map(|r| format_cell(&r.stat)).unwrap_or_else(|| "n/a".into())
    };
    let mut s = String::new();
    let _ = writeln!(s, "## Domain gap\n");
    let _ = writeln!(s, "| Training | DSC |\n|---|---|");
    let _ = writeln!(s, "| Train on S (baseline) | {} |", cell("baseline", "none", "0"));
    let ub = report
        .row("upper_bound", "target", "all")
        .map(|r| format_cell(&r.stat))
        .unwrap_or_else(|| "n/a".into());
    let _ = writeln!(s, "| Train on T (upper bound) | {ub} |\n");

    let _ = writeln!(s, "## Selection strategies\n");
    let _ = writeln!(
        s,
        "| Strategies of sample selection | Training from scratch | Fine tuning | Iterative |\n|---|---|---|---|"
    );
    for (name, strategy, n) in TABLE2_ROWS {
        let iterative = match strategy {
            "baseline" => cell("baseline", "none", "0"),
            "best_rca" => cell("iteration_1", "iterative", n),
            "worst_rca" => cell("iteration_2", "iterative", n),
            _ => "n/a".into(),
        };
        let _ = writeln!(
            s,
            "| {name} | {} | {} | {iterative} |",
            cell(strategy, "scratch", n),
            cell(strategy, "finetune", n)
        );
    }
    let sizes: BTreeSet<(u8, usize)> = report
        .rows
        .iter()
        .filter(|r| SWEEP_FAMILIES.iter().any(|(_, st, m)| *st == r.strategy && *m == r.mode))
        .filter_map(|r| r.n.parse::<usize>().ok().map(|n| (0, n)))
        .chain([(0, 0), (1, 0)])
        .collect();
    let headers: Vec<String> = sizes
        .iter()
        .map(|&(k, n)| if k == 0 { n.to_string() } else { "all".into() })
        .collect();
    let _ = writeln!(s, "\n## Set size\n");
    let _ = writeln!(s, "| Strategies | {} |", headers.join(" | "));
    let _ = writeln!(s, "|---|{}", "---|".repeat(headers.len()));
    for (name, strategy, mode) in SWEEP_FAMILIES {
        let cells: Vec<String> = headers.iter().map(|h| cell(strategy, mode, h)).collect();
        let _ = writeln!(s, "| {name} | {} |", cells.join(" | "));
    }
    if let Some(e) = &report.prediction_eval {
        let _ = writeln!(s, "\n## RCA on baseline segmentations\n");
        let _ = writeln!(
            s,
            "Pearson r = {:.3}, MAE = {:.3}, mean predicted - mean real = {:.3} over {} subjects.\n",
            e.pearson_r,
            e.mae,
            e.mean_bias,
            e.pairs.len()
        );
        let _ = writeln!(s, "| Real DSC band | Count | Mean predicted | Mean real | MAE |\n|---|---|---|---|---|");
        for b in &e.bands {
            let _ = writeln!(
                s,
                "| [{:.1}, {:.1}{} | {} | {:.3} | {:.3} | {:.3} |",
                b.lo,
                b.hi,
                if b.hi >= 1.0 { "]" } else { ")" },
                b.count,
                b.mean_predicted,
                b.mean_real,
                b.mae
            );
        }
    }
    let p = &report.provenance;
    if p.config_hash.is_empty() {
        return s;
    }
    let _ = writeln!(
        s,
        "\nconfig {} seed {} template {} references {}",
        p.config_hash,
        p.seed,
        p.template_id,
        p.reference_ids.join(" ")
    );
    s
}

/// Per-fold result of a cell before aggregation.
struct FoldCell {
    values: Vec<f64>,
    provenance: CellProvenance,
}

struct FoldState {
    train_ids: Vec<String>,
    test_ids: Vec<String>,
}

/// (strategy, mode, n) of a report row.
type CellKey = (String, String, String);

/// Shared state of one run: data, baseline, RCA results and caches.
pub struct Experiment<'d> {
    cfg: ExperimentConfig,
    data: &'d Dataset,
    template: Template,
    references: Vec<Reference>,
    baseline: SegmenterModel,
    /// Baseline segmentation of every target subject.
    baseline_seg: HashMap<String, LabelMap>,
    /// RCA estimate of each baseline segmentation.
    baseline_rca: HashMap<String, QualityEstimate>,
    /// Real Dice of each baseline segmentation.
    baseline_real: HashMap<String, f64>,
    folds: Vec<FoldState>,
    model_cache: TransformCache,
    rca_cache: TransformCache,
    cells: Mutex<BTreeMap<CellKey, (ReportRow, Vec<CellProvenance>)>>,
}

impl<'d> Experiment<'d> {
    /// Trains the baseline and runs RCA on its target segmentations.
    pub fn new(cfg: ExperimentConfig, data: &'d Dataset) -> Result<Self> {
        cfg.validate()?;
        if data.source.is_empty() || data.target.is_empty() {
            return Err(Error::InvalidArgument("both cohorts need subjects".into()));
        }
        check_unique(&data.source, "source")?;
        check_unique(&data.target, "target")?;
        let template = Template::first_by_id(&data.source)?;
        let mut sources: Vec<&LabeledSubject> = data.source.iter().collect();
        sources.sort_by(|a, b| a.id().cmp(b.id()));
        let references = sources
            .iter()
            .take(cfg.n_references)
            .map(|s| Reference::new(s.id(), s.image.clone(), s.labels.clone()))
            .collect::<Result<Vec<_>>>()?;
        let target_ids: Vec<String> = data.target.iter().map(|s| s.id().to_string()).collect();
        let folds = crossval_splits(&target_ids, cfg.folds, rng::derive_seed(cfg.seed, SPLIT_STREAM))?
            .into_iter()
            .map(|(train_ids, test_ids)| FoldState { train_ids, test_ids })
            .collect();

        let model_cache = TransformCache::new();
        let rca_cache = TransformCache::new();
        let baseline = train(&data.source, &template, &Registrar::cached(cfg.reg, &model_cache))?;
        let mut exp = Experiment {
            cfg,
            data,
            template,
            references,
            baseline,
            baseline_seg: HashMap::new(),
            baseline_rca: HashMap::new(),
            baseline_real: HashMap::new(),
            folds,
            model_cache,
            rca_cache,
            cells: Mutex::new(BTreeMap::new()),
        };
        let segs = exp.segment_all(&exp.baseline, &exp.data.target.iter().collect::<Vec<_>>())?;
        let rca = par::map(&segs, |(s, seg)| exp.rca(s, seg));
        for ((s, seg), est) in segs.into_iter().zip(rca) {
            let est = est?;
            let real = dice(&seg, &s.labels, exp.cfg.label)?.or(0.0);
            exp.baseline_real.insert(s.id().to_string(), real);
            exp.baseline_rca.insert(s.id().to_string(), est);
            exp.baseline_seg.insert(s.id().to_string(), seg);
        }
        Ok(exp)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn baseline_model(&self) -> &SegmenterModel {
        &self.baseline
    }

    pub fn fold_ids(&self, fold: usize) -> (&[String], &[String]) {
        let f = &self.folds[fold];
        (&f.train_ids, &f.test_ids)
    }

    fn model_reg(&self) -> Registrar<'_> {
        Registrar::cached(self.cfg.reg, &self.model_cache)
    }

    fn target(&self, id: &str) -> &LabeledSubject {
        self.data
            .target
            .iter()
            .find(|s| s.id() == id)
            .expect("fold ids come from the target cohort")
    }

    fn segment_all<'s>(
        &self,
        model: &SegmenterModel,
        subjects: &[&'s LabeledSubject],
    ) -> Result<Vec<(&'s LabeledSubject, LabelMap)>> {
        let reg = self.model_reg();
        par::map(subjects, |s| {
            model
                .predict(s.id(), &s.image, &reg)
                .map(|p| (*s, p.labels))
                .map_err(|e| e.for_subject(s.id()))
        })
        .into_iter()
        .collect()
    }

    fn rca(&self, s: &LabeledSubject, seg: &LabelMap) -> Result<QualityEstimate> {
        let transforms = register_to_references_cached(
            s.id(),
            &s.image,
            &self.references,
            &self.cfg.reg,
            &self.rca_cache,
        )
        .into_iter()
        .collect::<Result<Vec<AffineTransform>>>()
        .map_err(|e| e.for_subject(s.id()))?;
        score_with_transforms(s.id(), seg, &self.references, &transforms, self.cfg.label)
    }

    fn evaluate(&self, model: &SegmenterModel, ids: &[String]) -> Result<Vec<f64>> {
        let subjects: Vec<&LabeledSubject> = ids.iter().map(|id| self.target(id)).collect();
        self.segment_all(model, &subjects)?
            .iter()
            .map(|(s, seg)| Ok(dice(seg, &s.labels, self.cfg.label)?.or(0.0)))
            .collect()
    }

    /// Scores of the fold-train subjects under `selector`.
    fn scores(&self, fold: usize, selector: Selector) -> Vec<(String, f64)> {
        let ids = &self.folds[fold].train_ids;
        match selector {
            Selector::Rca => ids
                .iter()
                .map(|id| (id.clone(), self.baseline_rca[id].predicted_dsc))
                .collect(),
            Selector::Real => ids.iter().map(|id| (id.clone(), self.baseline_real[id])).collect(),
            Selector::Random => {
                let mut r = rng::rng(rng::derive_seed(self.cfg.seed, RANDOM_SCORE_STREAM + fold as u64));
                ids.iter()
                    .map(|id| (id.clone(), rand::Rng::random::<f64>(&mut r)))
                    .collect()
            }
        }
    }

    fn labeled(&self, ids: &[String], kind: LabelKind) -> Vec<LabeledSubject> {
        ids.iter()
            .map(|id| {
                let s = self.target(id);
                match kind {
                    LabelKind::Manual => s.clone(),
                    LabelKind::Pseudo => LabeledSubject {
                        labels: self.baseline_seg[id].clone(),
                        label_kind: LabelKind::Pseudo,
                        ..s.clone()
                    },
                }
            })
            .collect()
    }

    fn adapt(&self, mode: Mode, chosen: &[String]) -> Result<SegmenterModel> {
        match mode {
            Mode::Scratch => adapt_scratch(
                &self.data.source,
                &self.labeled(chosen, LabelKind::Manual),
                &self.template,
                &self.model_reg(),
            ),
            Mode::Finetune => adapt_finetune(&self.baseline, &self.labeled(chosen, LabelKind::Manual), self.cfg.blend),
            Mode::PseudoFinetune => {
                adapt_finetune(&self.baseline, &self.labeled(chosen, LabelKind::Pseudo), self.cfg.blend)
            }
            Mode::Iterative => Err(Error::InvalidArgument(
                "iterative mode is run through run_iterative".into(),
            )),
        }
    }

    fn fold_cell(&self, fold: usize, strategy: &SelectionStrategy, selector: Selector, mode: Mode) -> Result<FoldCell> {
        let f = &self.folds[fold];
        let base = CellProvenance {
            strategy: cell_label(strategy, selector),
            mode: mode.as_str().into(),
            n: cell_n(strategy),
            selected: Vec::new(),
            target_training: Vec::new(),
        };
        if strategy.kind == StrategyKind::RandomN {
            // Average per subject over the repeats.
            let mut sums = vec![0.0; f.test_ids.len()];
            let mut prov = base;
            for r in 0..self.cfg.random_repeats {
                let seed = rng::derive_seed(
                    rng::derive_seed(self.cfg.seed, RANDOM_STREAM + r as u64),
                    fold as u64,
                );
                let s = SelectionStrategy { seed, ..*strategy };
                let plan = select(&s, &rank_subjects(&self.scores(fold, selector))?)?;
                let model = self.adapt(mode, &plan.chosen_ids)?;
                for (acc, v) in sums.iter_mut().zip(self.evaluate(&model, &f.test_ids)?) {
                    *acc += v;
                }
                prov.selected.extend(plan.chosen_ids.iter().cloned());
                prov.target_training.extend(plan.chosen_ids);
            }
            let k = self.cfg.random_repeats as f64;
            return Ok(FoldCell {
                values: sums.into_iter().map(|v| v / k).collect(),
                provenance: prov,
            });
        }
        let plan = select(strategy, &rank_subjects(&self.scores(fold, selector))?)?;
        let model = self.adapt(mode, &plan.chosen_ids)?;
        Ok(FoldCell {
            values: self.evaluate(&model, &f.test_ids)?,
            provenance: CellProvenance {
                selected: plan.chosen_ids.clone(),
                target_training: plan.chosen_ids,
                ..base
            },
        })
    }

    fn aggregate(&self, key: (String, String, String), cells: Vec<Result<FoldCell>>) -> Result<ReportRow> {
        let mut values = Vec::new();
        let mut provs = Vec::new();
        for (fold, c) in cells.into_iter().enumerate() {
            let c = c.map_err(|e| e.for_fold(fold))?;
            values.extend(c.values);
            provs.push(c.provenance);
        }
        let row = ReportRow {
            strategy: key.0.clone(),
            mode: key.1.clone(),
            n: key.2.clone(),
            stat: summarize(&values)?,
            values,
        };
        self.cells.lock().unwrap().insert(key, (row.clone(), provs));
        Ok(row)
    }

    fn cached_row(&self, key: &(String, String, String)) -> Option<ReportRow> {
        self.cells.lock().unwrap().get(key).map(|(r, _)| r.clone())
    }

    /// Baseline Dice on every fold's test subjects.
    pub fn baseline_row(&self) -> Result<ReportRow> {
        let key = ("baseline".to_string(), "none".to_string(), "0".to_string());
        if let Some(r) = self.cached_row(&key) {
            return Ok(r);
        }
        let cells = (0..self.folds.len())
            .map(|f| {
                Ok(FoldCell {
                    values: self.folds[f]
                        .test_ids
                        .iter()
                        .map(|id| self.baseline_real[id])
                        .collect(),
                    provenance: CellProvenance {
                        strategy: key.0.clone(),
                        mode: key.1.clone(),
                        n: key.2.clone(),
                        selected: vec![],
                        target_training: vec![],
                    },
                })
            })
            .collect();
        self.aggregate(key, cells)
    }

    /// Trained on the fold's target training subjects only.
    pub fn upper_bound_row(&self) -> Result<ReportRow> {
        let key = ("upper_bound".to_string(), "target".to_string(), "all".to_string());
        if let Some(r) = self.cached_row(&key) {
            return Ok(r);
        }
        let cells = par::map_range(self.folds.len(), |fold| {
            let f = &self.folds[fold];
            let subjects = self.labeled(&f.train_ids, LabelKind::Manual);
            let template = Template::first_by_id(&subjects)?;
            let model = train(&subjects, &template, &self.model_reg())?;
            Ok(FoldCell {
                values: self.evaluate(&model, &f.test_ids)?,
                provenance: CellProvenance {
                    strategy: key.0.clone(),
                    mode: key.1.clone(),
                    n: key.2.clone(),
                    selected: vec![],
                    target_training: f.train_ids.clone(),
                },
            })
        });
        self.aggregate(key, cells)
    }

    /// One strategy cell; `n = 0` (any kind but `all`) returns the baseline values.
    pub fn strategy_row(&self, strategy: &SelectionStrategy, selector: Selector, mode: Mode) -> Result<ReportRow> {
        let key = (cell_label(strategy, selector), mode.as_str().to_string(), cell_n(strategy));
        if let Some(r) = self.cached_row(&key) {
            return Ok(r);
        }
        if strategy.kind != StrategyKind::All && strategy.n == 0 {
            let b = self.baseline_row()?;
            let row = ReportRow {
                strategy: key.0.clone(),
                mode: key.1.clone(),
                n: key.2.clone(),
                ..b
            };
            let provs = (0..self.folds.len())
                .map(|_| CellProvenance {
                    strategy: key.0.clone(),
                    mode: key.1.clone(),
                    n: key.2.clone(),
                    selected: vec![],
                    target_training: vec![],
                })
                .collect();
            self.cells.lock().unwrap().insert(key, (row.clone(), provs));
            return Ok(row);
        }
        for f in &self.folds {
            strategy.validate(f.train_ids.len())?;
        }
        let cells = par::map_range(self.folds.len(), |fold| self.fold_cell(fold, strategy, selector, mode));
        self.aggregate(key, cells)
    }

    /// Two rounds of RCA-guided fine-tuning: best `n` of the baseline ranking,
    /// then the worst `n` of the re-ranked remaining subjects added on top.
    pub fn iterative_rows(&self, n: usize) -> Result<(ReportRow, ReportRow)> {
        let k1 = ("iteration_1".to_string(), "iterative".to_string(), n.to_string());
        let k2 = ("iteration_2".to_string(), "iterative".to_string(), n.to_string());
        if let (Some(a), Some(b)) = (self.cached_row(&k1), self.cached_row(&k2)) {
            return Ok((a, b));
        }
        for f in &self.folds {
            if 2 * n > f.train_ids.len() || n == 0 {
                return Err(Error::InvalidArgument(format!(
                    "iterative scheme with n={n} needs 2n <= {} fold-train subjects",
                    f.train_ids.len()
                )));
            }
        }
        let results = par::map_range(self.folds.len(), |fold| -> Result<(FoldCell, FoldCell)> {
            let f = &self.folds[fold];
            let ranked = rank_subjects(&self.scores(fold, Selector::Rca))?;
            let first = select(&SelectionStrategy::best(n), &ranked)?.chosen_ids;
            let m1 = adapt_finetune(&self.baseline, &self.labeled(&first, LabelKind::Manual), self.cfg.blend)?;
            let v1 = self.evaluate(&m1, &f.test_ids)?;

            let rest: Vec<String> = f.train_ids.iter().filter(|id| !first.contains(id)).cloned().collect();
            let rest_scores: Vec<(String, f64)> = if self.cfg.reuse_iteration_ranking {
                ranked.iter().filter(|(id, _)| rest.contains(id)).cloned().collect()
            } else {
                let subjects: Vec<&LabeledSubject> = rest.iter().map(|id| self.target(id)).collect();
                self.segment_all(&m1, &subjects)?
                    .iter()
                    .map(|(s, seg)| Ok((s.id().to_string(), self.rca(s, seg)?.predicted_dsc)))
                    .collect::<Result<_>>()?
            };
            let second = select(&SelectionStrategy::worst(n), &rank_subjects(&rest_scores)?)?.chosen_ids;
            let cumulative: Vec<String> = first.iter().chain(&second).cloned().collect();
            let m2 = adapt_finetune(&m1, &self.labeled(&cumulative, LabelKind::Manual), self.cfg.blend)?;
            let v2 = self.evaluate(&m2, &f.test_ids)?;
            let prov = |k: &(String, String, String), sel: Vec<String>, tr: Vec<String>| CellProvenance {
                strategy: k.0.clone(),
                mode: k.1.clone(),
                n: k.2.clone(),
                selected: sel,
                target_training: tr,
            };
            Ok((
                FoldCell { values: v1, provenance: prov(&k1, first.clone(), first.clone()) },
                FoldCell { values: v2, provenance: prov(&k2, second, cumulative) },
            ))
        });
        let mut c1 = Vec::new();
        let mut c2 = Vec::new();
        for r in results {
            match r {
                Ok((a, b)) => {
                    c1.push(Ok(a));
                    c2.push(Ok(b));
                }
                Err(e) => {
                    c1.push(Err(e));
                    c2.push(Err(Error::InvalidArgument("iteration 1 failed".into())));
                }
            }
        }
        Ok((self.aggregate(k1, c1)?, self.aggregate(k2, c2)?))
    }

    /// Baseline segmentation, its RCA estimate and real Dice for every target
    /// subject, sorted by id.
    pub fn baseline_outputs(&self) -> Vec<(String, LabelMap, QualityEstimate, f64)> {
        let mut ids: Vec<&String> = self.baseline_seg.keys().collect();
        ids.sort();
        ids.into_iter()
            .map(|id| {
                (
                    id.clone(),
                    self.baseline_seg[id].clone(),
                    self.baseline_rca[id].clone(),
                    self.baseline_real[id],
                )
            })
            .collect()
    }

    /// RCA estimates for a fold's training subjects, in fold order.
    pub fn fold_estimates(&self, fold: usize) -> Vec<QualityEstimate> {
        self.folds[fold]
            .train_ids
            .iter()
            .map(|id| self.baseline_rca[id].clone())
            .collect()
    }

    /// Real Dice of the baseline on a fold's training subjects.
    pub fn fold_real(&self, fold: usize) -> Vec<(String, f64)> {
        self.folds[fold]
            .train_ids
            .iter()
            .map(|id| (id.clone(), self.baseline_real[id]))
            .collect()
    }

    /// RCA predicted vs real Dice of the baseline over all target subjects.
    pub fn prediction_eval(&self) -> Result<PredictionEvalReport> {
        let mut ids: Vec<&String> = self.baseline_rca.keys().collect();
        ids.sort();
        PredictionEvalReport::from_pairs(
            ids.into_iter()
                .map(|id| PredictionPair {
                    subject_id: id.clone(),
                    predicted_dsc: self.baseline_rca[id].predicted_dsc,
                    real_dsc: self.baseline_real[id],
                })
                .collect(),
        )
    }

    /// Every computed row, ordered by key, plus provenance.
    pub fn report(&self, with_eval: bool) -> Result<ExperimentReport> {
        let cells = self.cells.lock().unwrap();
        let rows: Vec<ReportRow> = cells.values().map(|(r, _)| r.clone()).collect();
        let folds = self
            .folds
            .iter()
            .enumerate()
            .map(|(i, f)| FoldProvenance {
                fold: i,
                train_ids: f.train_ids.clone(),
                test_ids: f.test_ids.clone(),
                cells: cells.values().map(|(_, p)| p[i].clone()).collect(),
            })
            .collect();
        drop(cells);
        Ok(ExperimentReport {
            rows,
            prediction_eval: if with_eval { Some(self.prediction_eval()?) } else { None },
            provenance: RunProvenance {
                config_hash: self.cfg.hash(),
                seed: self.cfg.seed,
                registration_seed: self.cfg.reg.seed,
                template_id: self.template.id.clone(),
                reference_ids: self.references.iter().map(|r| r.id.clone()).collect(),
                folds,
            },
        })
    }
}

const SPLIT_STREAM: u64 = 0x5B17;
const RANDOM_STREAM: u64 = 0xA0_0000;
const RANDOM_SCORE_STREAM: u64 = 0xB0_0000;

fn check_unique(subjects: &[LabeledSubject], what: &str) -> Result<()> {
    let mut seen = BTreeSet::new();
    for s in subjects {
        if !seen.insert(s.id()) {
            return Err(Error::Cohort(format!("duplicate {what} subject id {}", s.id())));
        }
    }
    Ok(())
}

/// Row label for a strategy: `all`, `random`, or `<kind>_<selector>`.
pub fn cell_label(s: &SelectionStrategy, selector: Selector) -> String {
    match s.kind {
        StrategyKind::All => "all".into(),
        StrategyKind::RandomN => "random".into(),
        StrategyKind::BestN => format!("best_{selector}"),
        StrategyKind::WorstN => format!("worst_{selector}"),
        StrategyKind::BestWorst => format!("best_worst_{selector}"),
    }
}

fn cell_n(s: &SelectionStrategy) -> String {
    match s.kind {
        StrategyKind::All => "all".into(),
        _ => s.n.to_string(),
    }
}

fn sized(kind: StrategyKind, size: SetSize) -> SelectionStrategy {
    match size {
        SetSize::All => SelectionStrategy::all(),
        SetSize::N(n) => SelectionStrategy { kind, n, seed: 0 },
    }
}

/// Baseline segmentations, their RCA estimates and real scores per fold.
pub fn run_baseline(cfg: &ExperimentConfig, data: &Dataset) -> Result<ExperimentReport> {
    let exp = Experiment::new(cfg.clone(), data)?;
    exp.baseline_row()?;
    exp.upper_bound_row()?;
    exp.report(true)
}

/// Baseline plus the configured strategy/mode/selector cell.
pub fn run_strategy(cfg: &ExperimentConfig, data: &Dataset) -> Result<ExperimentReport> {
    let exp = Experiment::new(cfg.clone(), data)?;
    exp.baseline_row()?;
    if cfg.mode == Mode::Iterative {
        exp.iterative_rows(cfg.strategy.n)?;
    } else {
        exp.strategy_row(&cfg.strategy, cfg.selector, cfg.mode)?;
    }
    exp.report(true)
}

fn sweep(exp: &Experiment, sizes: &[SetSize]) -> Result<()> {
    for &size in sizes {
        let random = sized(StrategyKind::RandomN, size);
        let best = sized(StrategyKind::BestN, size);
        exp.strategy_row(&random, Selector::Random, Mode::Finetune)?;
        for sel in [Selector::Real, Selector::Rca] {
            for mode in [Mode::Finetune, Mode::PseudoFinetune, Mode::Scratch] {
                exp.strategy_row(&best, sel, mode)?;
            }
        }
    }
    Ok(())
}

/// One row per (family, set size).
pub fn run_setsize_sweep(cfg: &ExperimentConfig, data: &Dataset) -> Result<ExperimentReport> {
    let exp = Experiment::new(cfg.clone(), data)?;
    exp.baseline_row()?;
    sweep(&exp, &cfg.set_sizes)?;
    exp.report(true)
}

/// Both iterations of the RCA-guided scheme, with `cfg.strategy.n` per round.
pub fn run_iterative(cfg: &ExperimentConfig, data: &Dataset) -> Result<ExperimentReport> {
    let exp = Experiment::new(cfg.clone(), data)?;
    exp.baseline_row()?;
    exp.iterative_rows(cfg.strategy.n)?;
    exp.report(true)
}

/// Everything: domain gap, the strategy table for scratch and fine-tuning,
/// the set-size sweep and the iterative scheme. `n` is `cfg.strategy.n`.
pub fn run_full(cfg: &ExperimentConfig, data: &Dataset) -> Result<ExperimentReport> {
    let exp = Experiment::new(cfg.clone(), data)?;
    let n = cfg.strategy.n;
    exp.baseline_row()?;
    exp.upper_bound_row()?;
    for mode in [Mode::Scratch, Mode::Finetune] {
        exp.strategy_row(&SelectionStrategy::all(), Selector::Rca, mode)?;
        exp.strategy_row(&SelectionStrategy::random(n, 0), Selector::Random, mode)?;
        for sel in [Selector::Real, Selector::Rca] {
            for s in [
                SelectionStrategy::worst(n),
                SelectionStrategy::best(n),
                SelectionStrategy::best_worst(n),
            ] {
                exp.strategy_row(&s, sel, mode)?;
            }
        }
    }
    sweep(&exp, &cfg.set_sizes)?;
    exp.iterative_rows(n)?;
    exp.report(true)
}

/// RCA on segmentations of known quality: ground-truth labels of target
/// subjects degraded by seeded erosion, dilation or shifts, scored against
/// `n_references` source subjects.
pub struct RcaBenchmark {
    pub report: PredictionEvalReport,
    pub estimates: Vec<QualityEstimate>,
    pub degradations: Vec<(String, phantom::Degradation)>,
}

pub fn run_rca_benchmark(
    n_targets: usize,
    n_references: usize,
    label: u8,
    seed: u64,
    reg: &RegConfig,
) -> Result<RcaBenchmark> {
    let (sp, tp) = phantom::presets();
    let refs = phantom::generate_subjects(&sp, rng::derive_seed(seed, 1), n_references, Domain::Source, "s")?
        .into_iter()
        .map(|(rec, v, m)| Reference::new(rec.id, v, m))
        .collect::<Result<Vec<_>>>()?;
    let targets = phantom::generate_subjects(&tp, rng::derive_seed(seed, 2), n_targets, Domain::Target, "t")?;
    let graded: Vec<(crate::rca::SegmenterOutput, LabelMap, phantom::Degradation)> = targets
        .into_iter()
        .enumerate()
        .map(|(i, (rec, v, m))| {
            let (seg, d) = phantom::graded_segmentation(&m, label, rng::derive_seed(seed, 1000 + i as u64));
            (
                crate::rca::SegmenterOutput { subject_id: rec.id, image: v, segmentation: seg },
                m,
                d,
            )
        })
        .collect();
    let outputs: Vec<_> = graded.iter().map(|(o, _, _)| o.clone()).collect();
    let batch = crate::rca::predict_cohort(&outputs, &refs, label, reg)?;
    if let Some((id, e)) = batch.failures.into_iter().next() {
        return Err(e.for_subject(&id));
    }
    let truth: Vec<(String, LabelMap)> = graded.iter().map(|(o, m, _)| (o.subject_id.clone(), m.clone())).collect();
    let segs: Vec<(String, LabelMap)> = graded
        .iter()
        .map(|(o, _, _)| (o.subject_id.clone(), o.segmentation.clone()))
        .collect();
    let report = crate::rca::evaluate_predictions(&batch.estimates, &truth, &segs, label)?;
    Ok(RcaBenchmark {
        report,
        estimates: batch.estimates,
        degradations: graded.iter().map(|(o, _, d)| (o.subject_id.clone(), *d)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("x{i}")).collect()
    }

    #[test]
    fn splits_partition_the_cohort() {
        let s = crossval_splits(&ids(6), 3, 1).unwrap();
        assert_eq!(s.len(), 3);
        let mut all: Vec<String> = s.iter().flat_map(|(_, t)| t.clone()).collect();
        all.sort();
        assert_eq!(all, {
            let mut v = ids(6);
            v.sort();
            v
        });
        for (train, test) in &s {
            assert_eq!(test.len(), 2);
            assert_eq!(train.len(), 4);
            assert!(test.iter().all(|t| !train.contains(t)));
        }
        assert_eq!(s, crossval_splits(&ids(6), 3, 1).unwrap());
    }

    #[test]
    fn remainder_goes_to_early_folds() {
        let s = crossval_splits(&ids(7), 3, 9).unwrap();
        let sizes: Vec<usize> = s.iter().map(|(_, t)| t.len()).collect();
        assert_eq!(sizes, [3, 2, 2]);
        assert!(crossval_splits(&ids(2), 3, 0).is_err());
    }

    #[test]
    fn splits_ignore_input_order() {
        let mut rev = ids(9);
        rev.reverse();
        assert_eq!(crossval_splits(&ids(9), 3, 4).unwrap(), crossval_splits(&rev, 3, 4).unwrap());
    }

    #[test]
    fn cell_formatting() {
        let s = SummaryStat { mean: 0.639, stdv: 0.149, count: 3 };
        assert_eq!(format_cell(&s), "0.639 (0.149)");
        let s = SummaryStat { mean: 0.5, stdv: 0.0, count: 1 };
        assert_eq!(format_cell(&s), "0.500 (0.000)");
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            ReportRow {
                strategy: "baseline".into(),
                mode: "none".into(),
                n: "0".into(),
                stat: SummaryStat { mean: 0.25, stdv: 0.125, count: 8 },
                values: vec![],
            },
            ReportRow {
                strategy: "best_worst_rca".into(),
                mode: "finetune".into(),
                n: "5".into(),
                stat: SummaryStat { mean: 0.5, stdv: 0.0, count: 8 },
                values: vec![],
            },
        ];
        let text = report_csv(&rows);
        assert_eq!(text.lines().count(), rows.len() + 1);
        assert_eq!(parse_report_csv(&text).unwrap(), rows);
    }

    #[test]
    fn parses_tags() {
        assert_eq!("pseudo_finetune".parse::<Mode>().unwrap(), Mode::PseudoFinetune);
        assert_eq!("real".parse::<Selector>().unwrap(), Selector::Real);
        assert_eq!("all".parse::<SetSize>().unwrap(), SetSize::All);
        assert_eq!("15".parse::<SetSize>().unwrap(), SetSize::N(15));
        assert!("x".parse::<Mode>().is_err());
    }

    #[test]
    fn config_hash_tracks_config() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), ExperimentConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert!(ExperimentConfig { folds: 1, ..a }.validate().is_err());
    }
}
