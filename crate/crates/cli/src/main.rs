use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use refmatch_core::dataset::{
    load_candidates, objects_per_image_stats, validate_candidates, CandidateIndex, ObjectStats,
    ReferringDataset, ValidationReport,
};
use refmatch_core::embedding::EmbeddingTable;
use refmatch_core::eval::{compare_reports, evaluate, MetricsReport, ReportComparison, DEFAULT_THRESHOLD};
use refmatch_core::image::{reverse_blur_prompt, ImageBuffer, DEFAULT_PROMPT_SIGMA};
use refmatch_core::jsonl;
use refmatch_core::loss::{contrastive_loss, matched_ce_loss};
use refmatch_core::matcher::{compute_match_scores, greedy_match, Assignment};
use refmatch_core::prediction::{load_ground_truth, load_predictions};
use refmatch_core::scenario::{fig5_scenario, random_scenario, ScenarioConfig};
use refmatch_core::select::{
    candidate_lists, greedy_select_by_similarity, oracle_select, random_select, write_selections,
    zero_shot_select, SimilarityScores,
};
use refmatch_core::trainer::{run_experiment, ExperimentReport, TrainConfig};
use refmatch_core::{RleMask, SoftMask};

#[derive(Parser)]
#[command(name = "refmatch", version, about = "Weakly supervised referring segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cross-check a dataset against its candidate masks.
    Validate(ValidateArgs),
    /// Choose one candidate per reference.
    Select(SelectArgs),
    /// Greedy constrained matching of predictions to candidates.
    Match(MatchArgs),
    /// oIoU / mIoU of predictions against ground truth.
    Eval(EvalArgs),
    /// Run a synthetic correction experiment.
    Simulate(SimulateArgs),
    /// Histogram of object instances per image.
    Stats(StatsArgs),
    /// Blur everything outside a mask.
    Prompt(PromptArgs),
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    candidates: PathBuf,
    /// Also check that the embeddings file parses.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    ZeroShot,
    Random,
    Oracle,
    GreedySimilarity,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long, conflicts_with = "embeddings")]
    scores: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "zero-shot")]
    method: Method,
    /// Required for `--method random`.
    #[arg(long)]
    seed: Option<u64>,
    /// Required for `--method oracle`.
    #[arg(long)]
    groundtruth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    /// Also report the contrastive loss at this weight.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Loss report (JSON); printed to stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    groundtruth: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Earlier report to compare against.
    #[arg(long)]
    baseline: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Scenario {
    Fig5,
    Random,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    scenario: Scenario,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    objects: usize,
    #[arg(long, default_value_t = 3)]
    candidates: usize,
    #[arg(long, default_value_t = 16)]
    images: usize,
    #[arg(long, default_value_t = 3)]
    refs: usize,
    #[arg(long, default_value_t = 16)]
    grid: usize,
    #[arg(long, default_value_t = 0.5)]
    zero_shot_accuracy: f64,
    /// Steps for each of pre-training and correction.
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PromptArgs {
    /// PNG or binary PPM.
    #[arg(long)]
    image: PathBuf,
    /// JSON file holding one `{"size", "counts"}` mask.
    #[arg(long, conflicts_with_all = ["candidates", "image_id", "candidate_id"])]
    mask: Option<PathBuf>,
    #[arg(long, requires_all = ["image_id", "candidate_id"])]
    candidates: Option<PathBuf>,
    #[arg(long)]
    image_id: Option<String>,
    #[arg(long)]
    candidate_id: Option<String>,
    #[arg(long, default_value_t = DEFAULT_PROMPT_SIGMA)]
    sigma: f64,
    /// Output; `.ppm` writes PPM, anything else PNG.
    #[arg(long)]
    out: PathBuf,
}

fn param(message: &str) -> anyhow::Error {
    refmatch_core::Error::Parameter(message.into()).into()
}

/// Writes through a temporary file in the destination directory, then renames.
fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> anyhow::Result<()>) -> anyhow::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder
        .prefix(".refmatch-")
        .tempfile_in(dir)
        .with_context(|| format!("creating temporary file in {}", dir.display()))?;
    {
        let mut out = BufWriter::new(tmp.as_file_mut());
        fill(&mut out)?;
        out.flush()?;
    }
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    write_atomic(path, |out| {
        serde_json::to_writer_pretty(&mut *out, value)?;
        writeln!(out)?;
        Ok(())
    })
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

#[derive(Serialize)]
struct ValidateOutput {
    images: usize,
    objects: usize,
    references: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    embeddings: Option<usize>,
    #[serde(flatten)]
    report: ValidationReport,
}

fn validate(args: ValidateArgs) -> anyhow::Result<()> {
    let ds = ReferringDataset::load(&args.dataset)?;
    let index = load_candidates(&args.candidates)?;
    let embeddings = match &args.embeddings {
        Some(p) => Some(EmbeddingTable::load(p)?.len()),
        None => None,
    };
    let (images, objects, references) = ds.counts();
    let output = ValidateOutput {
        images,
        objects,
        references,
        embeddings,
        report: validate_candidates(&ds, &index),
    };
    match &args.out {
        Some(p) => write_json(p, &output)?,
        None => print_json(&output)?,
    }
    if !output.report.is_clean() {
        return Err(refmatch_core::Error::Validation {
            path: args.candidates.display().to_string(),
            line: 0,
            message: format!("{} finding(s)", output.report.findings.len()),
        }
        .into());
    }
    Ok(())
}

fn require_clean(ds: &ReferringDataset, index: &CandidateIndex, path: &Path) -> anyhow::Result<()> {
    let report = validate_candidates(ds, index);
    if let Some(first) = report.findings.first() {
        return Err(refmatch_core::Error::Validation {
            path: path.display().to_string(),
            line: 0,
            message: format!(
                "{} finding(s), first: {}",
                report.findings.len(),
                serde_json::to_string(first)?
            ),
        }
        .into());
    }
    Ok(())
}

fn select(args: SelectArgs) -> anyhow::Result<()> {
    let ds = ReferringDataset::load(&args.dataset)?;
    let index = load_candidates(&args.candidates)?;
    require_clean(&ds, &index, &args.candidates)?;
    let scores = || -> anyhow::Result<SimilarityScores> {
        match (&args.scores, &args.embeddings) {
            (Some(p), _) => Ok(SimilarityScores::load(p)?),
            (None, Some(p)) => Ok(SimilarityScores::from_embeddings(
                &EmbeddingTable::load(p)?,
                &ds,
                &index,
            )?),
            (None, None) => Err(param("this method needs --scores or --embeddings")),
        }
    };
    let lists = candidate_lists(&index);
    let chosen: Vec<(String, Option<String>)> = match args.method {
        Method::ZeroShot => some(zero_shot_select(&scores()?, &lists)?),
        Method::Random => {
            let seed = args
                .seed
                .ok_or_else(|| param("--method random needs --seed"))?;
            some(random_select(&lists, seed)?)
        }
        Method::Oracle => {
            let path = args
                .groundtruth
                .as_ref()
                .ok_or_else(|| param("--method oracle needs --groundtruth"))?;
            some(oracle_select(&index, &load_ground_truth(path)?)?)
        }
        Method::GreedySimilarity => greedy_select_by_similarity(&scores()?, &ds, &index)?
            .into_iter()
            .collect(),
    };
    write_atomic(&args.out, |out| Ok(write_selections(out, chosen)?))
}

fn some(selections: BTreeMap<String, String>) -> Vec<(String, Option<String>)> {
    selections.into_iter().map(|(r, c)| (r, Some(c))).collect()
}

#[derive(Serialize)]
struct AssignmentRecord<'a> {
    image_id: &'a str,
    object_id: &'a str,
    candidate_id: Option<&'a str>,
}

#[derive(Serialize)]
struct ImageLoss {
    image_id: String,
    ce_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    contrastive_loss: Option<f64>,
    matched: usize,
    unmatched: usize,
}

#[derive(Serialize)]
struct LossReport {
    ce_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    contrastive_loss: Option<f64>,
    images: Vec<ImageLoss>,
}

fn run_match(args: MatchArgs) -> anyhow::Result<()> {
    let ds = ReferringDataset::load(&args.dataset)?;
    let index = load_candidates(&args.candidates)?;
    require_clean(&ds, &index, &args.candidates)?;
    let preds: BTreeMap<String, SoftMask> = load_predictions(&args.predictions)?
        .into_iter()
        .map(|(r, p)| (r, p.to_soft()))
        .collect();
    let results = ds
        .images()
        .par_iter()
        .map(|image| -> refmatch_core::Result<(Assignment, ImageLoss)> {
            let set = &index[&image.image_id];
            let objects = image.object_refs();
            let assignment = greedy_match(&compute_match_scores(&preds, set, &objects)?);
            let ce = matched_ce_loss(&preds, set, &assignment, &objects)?;
            let con = match args.gamma {
                Some(g) => Some(contrastive_loss(&preds, set, &assignment, &objects, g)?.value),
                None => None,
            };
            let loss = ImageLoss {
                image_id: image.image_id.clone(),
                ce_loss: ce.value,
                contrastive_loss: con,
                matched: assignment.matched.len(),
                unmatched: assignment.unmatched.len(),
            };
            Ok((assignment, loss))
        })
        .collect::<refmatch_core::Result<Vec<_>>>()?;

    let records = results.iter().flat_map(|(a, _)| {
        let matched = a.matched.iter().map(|(o, c)| AssignmentRecord {
            image_id: &a.image_id,
            object_id: o,
            candidate_id: Some(c),
        });
        let unmatched = a.unmatched.iter().map(|o| AssignmentRecord {
            image_id: &a.image_id,
            object_id: o,
            candidate_id: None,
        });
        matched.chain(unmatched)
    });
    let text = jsonl::to_string(jsonl::ASSIGNMENTS, records)?;
    write_atomic(&args.out, |out| Ok(out.write_all(text.as_bytes())?))?;

    let images: Vec<ImageLoss> = results.into_iter().map(|(_, l)| l).collect();
    let report = LossReport {
        ce_loss: images.iter().map(|l| l.ce_loss).sum(),
        contrastive_loss: args
            .gamma
            .map(|_| images.iter().filter_map(|l| l.contrastive_loss).sum()),
        images,
    };
    match &args.report {
        Some(p) => write_json(p, &report),
        None => print_json(&report),
    }
}

#[derive(Serialize)]
struct EvalOutput {
    threshold: f64,
    #[serde(flatten)]
    report: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    comparison: Option<ReportComparison>,
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(refmatch_core::Error::Parameter(format!(
            "threshold must lie in [0, 1], got {}",
            args.threshold
        ))
        .into());
    }
    let preds = load_predictions(&args.predictions)?;
    let gt = load_ground_truth(&args.groundtruth)?;
    let report = evaluate(&preds, &gt, args.threshold)?;
    let comparison = match &args.baseline {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let baseline: MetricsReport = serde_json::from_str(&text)
                .with_context(|| format!("parsing report {}", p.display()))?;
            Some(compare_reports(&report, &baseline)?)
        }
        None => None,
    };
    if let Some(csv) = &args.csv {
        let table = report.to_csv();
        write_atomic(csv, |out| Ok(out.write_all(table.as_bytes())?))?;
    }
    write_json(
        &args.out,
        &EvalOutput {
            threshold: args.threshold,
            report,
            comparison,
        },
    )
}

#[derive(Serialize)]
struct SimulateOutput {
    scenario: Scenario,
    #[serde(skip_serializing_if = "Option::is_none")]
    benchmark: Option<ScenarioConfig>,
    #[serde(flatten)]
    report: ExperimentReport,
}

fn simulate(args: SimulateArgs) -> anyhow::Result<()> {
    let cfg = TrainConfig {
        pretrain_steps: args.steps,
        correct_steps: args.steps,
        learning_rate: args.lr,
        gamma: args.gamma,
        seed: args.seed,
    };
    cfg.validate()?;
    let (experiment, benchmark) = match args.scenario {
        Scenario::Fig5 => (fig5_scenario(args.grid, args.seed, true)?, None),
        Scenario::Random => {
            let bench = ScenarioConfig {
                images: args.images,
                objects: args.objects,
                candidates: args.candidates,
                refs_per_object: args.refs,
                grid: args.grid,
                zero_shot_accuracy: args.zero_shot_accuracy,
                seed: args.seed,
                ..Default::default()
            };
            (random_scenario(&bench)?, Some(bench))
        }
    };
    let report = run_experiment(&experiment, &cfg)?;
    write_json(
        &args.out,
        &SimulateOutput {
            scenario: args.scenario,
            benchmark,
            report,
        },
    )
}

fn stats(args: StatsArgs) -> anyhow::Result<()> {
    #[derive(Serialize)]
    struct Out {
        images: usize,
        histogram: BTreeMap<usize, usize>,
        mean: f64,
    }
    let stats: ObjectStats = objects_per_image_stats(&ReferringDataset::load(&args.dataset)?)?;
    let out = Out {
        images: stats.images,
        mean: stats.mean_rounded(),
        histogram: stats.histogram,
    };
    match &args.out {
        Some(p) => write_json(p, &out),
        None => print_json(&out),
    }
}

fn prompt(args: PromptArgs) -> anyhow::Result<()> {
    let image = ImageBuffer::read(&args.image)?;
    let mask = match (&args.mask, &args.candidates) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<RleMask>(&text).map_err(refmatch_core::Error::from)?
        }
        (None, Some(p)) => {
            let index = load_candidates(p)?;
            let image_id = args.image_id.as_deref().expect("required by clap");
            let candidate_id = args.candidate_id.as_deref().expect("required by clap");
            let set = index.get(image_id).ok_or_else(|| {
                refmatch_core::Error::UnknownId(format!("image {image_id:?} in {}", p.display()))
            })?;
            set.mask(candidate_id)?.clone()
        }
        (None, None) => return Err(param("give --mask, or --candidates with --image-id and --candidate-id")),
    };
    let prompted = reverse_blur_prompt(&image, &mask, args.sigma)?;
    let ppm = refmatch_core::image::is_ppm(&args.out);
    write_atomic(&args.out, |out| Ok(prompted.write_to(out, ppm)?))
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("REFMATCH_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| refmatch_core::Error::Parameter(format!("REFMATCH_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Validate(a) => validate(a),
        Command::Select(a) => select(a),
        Command::Match(a) => run_match(a),
        Command::Eval(a) => eval(a),
        Command::Simulate(a) => simulate(a),
        Command::Stats(a) => stats(a),
        Command::Prompt(a) => prompt(a),
    }
}

fn error_json(err: &anyhow::Error) -> serde_json::Value {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<refmatch_core::Error>())
        .map(|e| e.kind())
        .or_else(|| err.chain().find_map(|e| e.downcast_ref::<io::Error>()).map(|_| "io"))
        .unwrap_or("usage");
    let message = err
        .chain()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join(": ");
    serde_json::json!({ "error": { "kind": kind, "message": message } })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
