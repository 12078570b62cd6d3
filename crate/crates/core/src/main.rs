use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use darca::experiment::{
    emit_report, parse_report_csv, run_baseline, run_full, run_iterative, run_setsize_sweep,
    run_strategy, Dataset, Experiment, ExperimentConfig, ExperimentReport, Mode, ReportFormat,
    RunProvenance, Selector, SetSize,
};
use darca::phantom::{self, CohortSpec};
use darca::rca::{estimates_to_csv, evaluate_predictions, predict_cohort, scores_from_csv, Reference, SegmenterOutput};
use darca::register::{RegConfig, Registrar};
use darca::segmodel::{adapt_finetune, adapt_scratch, pseudo_label, train, LabeledSubject, SegmenterModel, Template};
use darca::select::{select_from_scores, SelectionStrategy, StrategyKind};
use darca::volgrid::{load_cohort, read_labels, read_volume, write_labels, write_manifest, Cohort, Domain, SubjectRecord};
use darca::{Error, Result};

/// Segmentation quality estimation and annotation selection for domain adaptation.
#[derive(Parser)]
#[command(name = "darca", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic cohorts.
    Phantom {
        #[command(subcommand)]
        command: PhantomCommand,
    },
    /// Train on the source cohort, segment the target cohort and estimate quality with RCA.
    Baseline(BaselineArgs),
    /// Reverse classification accuracy.
    Rca {
        #[command(subcommand)]
        command: RcaCommand,
    },
    /// Choose subjects for annotation from a score file.
    Select(SelectArgs),
    /// Adapt a model with the subjects of a selection plan.
    Adapt(AdaptArgs),
    /// Cross-validated experiment with report.
    Experiment(ExperimentArgs),
    /// Render a report CSV.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum PhantomCommand {
    /// Write a cohort of volumes, labels and a manifest.
    Gen(GenArgs),
}

#[derive(Subcommand)]
enum RcaCommand {
    /// Predict the Dice score of each segmentation listed in a manifest.
    Predict(RcaArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value = "source")]
    domain: Domain,
    #[arg(long, default_value_t = 15)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Subject id prefix; defaults to `s` or `t` by domain.
    #[arg(long)]
    prefix: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value_t = phantom::LIVER)]
    label: u8,
    #[arg(long, default_value_t = 3)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    references: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RcaArgs {
    /// Manifest of labeled reference subjects.
    #[arg(long)]
    source: PathBuf,
    /// Manifest whose label column points at the segmentations to assess.
    #[arg(long)]
    predictions: PathBuf,
    /// Optional manifest with ground truth, for predicted-vs-real evaluation.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = phantom::LIVER)]
    label: u8,
    #[arg(long, default_value_t = 10)]
    references: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Estimates CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Where to write the evaluation against `--truth`.
    #[arg(long)]
    eval: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    /// CSV with `subject_id` and `predicted_dsc` columns.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    strategy: StrategyKind,
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Selection plan CSV (`rank,subject_id,score,side`).
    #[arg(long)]
    plan: PathBuf,
    #[arg(long, default_value = "finetune")]
    mode: Mode,
    /// Model to fine-tune; trained on the source cohort when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = darca::segmodel::DEFAULT_BLEND)]
    blend: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Source manifest; the built-in phantom benchmark is used when both manifests are omitted.
    #[arg(long, requires = "target")]
    source: Option<PathBuf>,
    #[arg(long, requires = "source")]
    target: Option<PathBuf>,
    /// full, baseline, strategy, sweep or iterative.
    #[arg(long, default_value = "full")]
    suite: String,
    #[arg(long, default_value = "best_worst")]
    strategy: StrategyKind,
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long, default_value = "finetune")]
    mode: Mode,
    #[arg(long, default_value = "rca")]
    selector: Selector,
    #[arg(long, default_value_t = phantom::LIVER)]
    label: u8,
    #[arg(long, default_value_t = 3)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = darca::segmodel::DEFAULT_BLEND)]
    blend: f64,
    /// Comma-separated, e.g. `0,2,5,10,15,all`.
    #[arg(long, value_delimiter = ',')]
    set_sizes: Option<Vec<SetSize>>,
    #[arg(long, default_value_t = 10)]
    references: usize,
    /// Reuse the iteration-1 ranking in iteration 2.
    #[arg(long)]
    reuse_ranking: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Report CSV written by `experiment`.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "markdown")]
    format: ReportFormat,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", serde_json::json!({"error": "usage", "message": first}));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Phantom { command: PhantomCommand::Gen(a) } => phantom_gen(a),
        Command::Baseline(a) => baseline(a),
        Command::Rca { command: RcaCommand::Predict(a) } => rca_predict(a),
        Command::Select(a) => select_cmd(a),
        Command::Adapt(a) => adapt(a),
        Command::Experiment(a) => experiment(a),
        Command::Report(a) => report(a),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn phantom_gen(a: GenArgs) -> Result<()> {
    let (s, t) = phantom::presets();
    let (params, prefix) = match a.domain {
        Domain::Source => (s, "s"),
        Domain::Target => (t, "t"),
    };
    let cohort = phantom::generate_cohort(&CohortSpec {
        n_subjects: a.n,
        seed: a.seed,
        params,
        output_dir: a.out.clone(),
        domain: a.domain,
        prefix: a.prefix.unwrap_or_else(|| prefix.to_string()),
    })?;
    println!("{} subjects written to {}", cohort.len(), phantom::manifest_path(&a.out).display());
    Ok(())
}

fn absolute(p: &Path) -> Result<PathBuf> {
    fs::canonicalize(p).map_err(|e| io_err(p, e))
}

fn baseline(a: BaselineArgs) -> Result<()> {
    let data = Dataset::load(&a.source, &a.target)?;
    let cfg = ExperimentConfig {
        label: a.label,
        folds: a.folds,
        seed: a.seed,
        reg: RegConfig::fast(a.seed),
        n_references: a.references,
        ..ExperimentConfig::default()
    };
    let exp = Experiment::new(cfg.clone(), &data)?;
    exp.baseline_model().save(a.out.join("model"))?;
    let seg_dir = a.out.join("segs");
    fs::create_dir_all(&seg_dir).map_err(|e| io_err(&seg_dir, e))?;
    let seg_dir = absolute(&seg_dir)?;
    let mut records = Vec::new();
    let mut estimates = Vec::new();
    for (id, seg, est, _) in exp.baseline_outputs() {
        let path = seg_dir.join(format!("{id}_pred.mha"));
        write_labels(&seg, &path)?;
        let image = &data.target.iter().find(|s| s.id() == id).expect("target id").record.image_path;
        records.push(SubjectRecord {
            id,
            image_path: absolute(image)?,
            label_path: Some(path),
            domain: Domain::Target,
        });
        estimates.push(est);
    }
    write_manifest(&Cohort::new("predictions", records)?, a.out.join("predictions.csv"))?;
    write(&a.out.join("estimates.csv"), &estimates_to_csv(&estimates))?;
    let eval = exp.prediction_eval()?;
    write(&a.out.join("prediction_eval.csv"), &eval.to_csv())?;
    write(&a.out.join("prediction_bands.csv"), &eval.bands_table())?;
    exp.baseline_row()?;
    exp.upper_bound_row()?;
    write_report(&exp.report(true)?, &a.out)?;
    println!("baseline {}", eval.summary_line());
    Ok(())
}

fn load_references(manifest: &Path, n: usize) -> Result<Vec<Reference>> {
    let mut subjects: Vec<SubjectRecord> = load_cohort(manifest)?.subjects().to_vec();
    subjects.sort_by(|a, b| a.id.cmp(&b.id));
    subjects
        .iter()
        .take(n)
        .map(|s| {
            let labels = s
                .label_path
                .as_ref()
                .ok_or_else(|| Error::Cohort(format!("reference {} has no labels", s.id)))?;
            Reference::new(&s.id, read_volume(&s.image_path)?, read_labels(labels)?)
        })
        .collect()
}

fn rca_predict(a: RcaArgs) -> Result<()> {
    let refs = load_references(&a.source, a.references)?;
    let preds = load_cohort(&a.predictions)?;
    let outputs = preds
        .subjects()
        .iter()
        .map(|s| {
            let seg = s
                .label_path
                .as_ref()
                .ok_or_else(|| Error::Cohort(format!("subject {} has no segmentation", s.id)))?;
            Ok(SegmenterOutput {
                subject_id: s.id.clone(),
                image: read_volume(&s.image_path)?,
                segmentation: read_labels(seg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let batch = predict_cohort(&outputs, &refs, a.label, &RegConfig::fast(a.seed))?;
    for (id, e) in &batch.failures {
        eprintln!("{}", serde_json::json!({"warning": e.kind(), "subject": id, "message": e.to_string()}));
    }
    emit(a.out.as_deref(), &estimates_to_csv(&batch.estimates))?;
    if let Some(truth) = a.truth {
        let cohort = load_cohort(&truth)?;
        let gt = cohort
            .subjects()
            .iter()
            .filter(|s| batch.estimates.iter().any(|e| e.subject_id == s.id))
            .map(|s| {
                let p = s.label_path.as_ref().ok_or_else(|| Error::Cohort(format!("subject {} has no labels", s.id)))?;
                Ok((s.id.clone(), read_labels(p)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let segs: Vec<_> = outputs.into_iter().map(|o| (o.subject_id, o.segmentation)).collect();
        let eval = evaluate_predictions(&batch.estimates, &gt, &segs, a.label)?;
        let text = format!("{}{}", eval.to_csv(), eval.bands_table());
        match a.eval {
            Some(p) => write(&p, &text)?,
            None => eprintln!("{}", eval.summary_line()),
        }
    }
    Ok(())
}

fn select_cmd(a: SelectArgs) -> Result<()> {
    let text = fs::read_to_string(&a.scores).map_err(|e| io_err(&a.scores, e))?;
    let scores = scores_from_csv(&text)?;
    let strategy = SelectionStrategy { kind: a.strategy, n: a.n, seed: a.seed };
    let plan = select_from_scores(&strategy, &scores)?;
    emit(a.out.as_deref(), &plan.to_csv())
}

fn plan_ids(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| Error::InvalidArgument(format!("plan: {e}")))?.clone();
    let col = headers
        .iter()
        .position(|h| h == "subject_id")
        .ok_or_else(|| Error::InvalidArgument("plan: missing column \"subject_id\"".into()))?;
    rdr.records()
        .map(|r| {
            r.map(|r| r[col].to_string())
                .map_err(|e| Error::InvalidArgument(format!("plan: {e}")))
        })
        .collect()
}

fn adapt(a: AdaptArgs) -> Result<()> {
    let data = Dataset::load(&a.source, &a.target)?;
    let ids = plan_ids(&a.plan)?;
    let chosen = ids
        .iter()
        .map(|id| {
            data.target
                .iter()
                .find(|s| s.id() == id)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("plan subject {id} is not in the target cohort")))
        })
        .collect::<Result<Vec<LabeledSubject>>>()?;
    let reg = Registrar::new(RegConfig::fast(a.seed));
    let template = Template::first_by_id(&data.source)?;
    let base = || match &a.model {
        Some(dir) => SegmenterModel::load(dir),
        None => train(&data.source, &template, &reg),
    };
    let model = match a.mode {
        Mode::Scratch => adapt_scratch(&data.source, &chosen, &template, &reg)?,
        Mode::Finetune => adapt_finetune(&base()?, &chosen, a.blend)?,
        Mode::PseudoFinetune => {
            let m = base()?;
            let images: Vec<_> = chosen.iter().map(|s| (s.record.clone(), s.image.clone())).collect();
            let (pseudo, failed) = pseudo_label(&m, &images, &reg);
            if let Some((id, e)) = failed.into_iter().next() {
                return Err(e.for_subject(&id));
            }
            adapt_finetune(&m, &pseudo, a.blend)?
        }
        Mode::Iterative => {
            return Err(Error::InvalidArgument(
                "iterative adaptation runs through `experiment --suite iterative`".into(),
            ))
        }
    };
    model.save(&a.out)?;
    println!("{model}");
    Ok(())
}

fn write_report(report: &ExperimentReport, out: &Path) -> Result<()> {
    write(&out.join("report.csv"), &emit_report(report, ReportFormat::Csv))?;
    write(&out.join("report.md"), &emit_report(report, ReportFormat::Markdown))?;
    write(&out.join("provenance.txt"), &report.provenance.to_text())?;
    if let Some(e) = &report.prediction_eval {
        write(&out.join("prediction_eval.csv"), &e.to_csv())?;
        write(&out.join("prediction_bands.csv"), &e.bands_table())?;
    }
    Ok(())
}

fn experiment(a: ExperimentArgs) -> Result<()> {
    let data = match (&a.source, &a.target) {
        (Some(s), Some(t)) => Dataset::load(s, t)?,
        _ => Dataset::benchmark()?,
    };
    let strategy = match a.strategy {
        StrategyKind::All => SelectionStrategy::all(),
        kind => SelectionStrategy { kind, n: a.n, seed: a.seed },
    };
    let cfg = ExperimentConfig {
        label: a.label,
        folds: a.folds,
        strategy,
        mode: a.mode,
        selector: a.selector,
        set_sizes: a.set_sizes.unwrap_or_else(darca::experiment::default_set_sizes),
        seed: a.seed,
        reg: RegConfig::fast(a.seed),
        blend: a.blend,
        n_references: a.references,
        reuse_iteration_ranking: a.reuse_ranking,
        ..ExperimentConfig::default()
    };
    let report = match a.suite.as_str() {
        "full" => run_full(&cfg, &data)?,
        "baseline" => run_baseline(&cfg, &data)?,
        "strategy" => run_strategy(&cfg, &data)?,
        "sweep" => run_setsize_sweep(&cfg, &data)?,
        "iterative" => run_iterative(&cfg, &data)?,
        other => return Err(Error::InvalidArgument(format!("unknown suite {other:?}"))),
    };
    report.provenance.check_isolation()?;
    write_report(&report, &a.out)?;
    print!("{}", emit_report(&report, ReportFormat::Csv));
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&a.input).map_err(|e| io_err(&a.input, e))?;
    let report = ExperimentReport {
        rows: parse_report_csv(&text)?,
        prediction_eval: None,
        provenance: RunProvenance {
            config_hash: String::new(),
            seed: 0,
            registration_seed: 0,
            template_id: String::new(),
            reference_ids: vec![],
            folds: vec![],
        },
    };
    emit(a.out.as_deref(), &emit_report(&report, a.format))
}
