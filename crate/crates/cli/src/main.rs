use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use teamfuse::ccl::{ccl_align, ComponentParams, Connectivity};
use teamfuse::consensus::{fuse_dataset, ENSEMBLE_MODEL_ID};
use teamfuse::diversity::{build_correctness_table, rank_teams, DiversityMetric, DiversityOptions, RankedTeam};
use teamfuse::evaluation::{mean_average_precision, EvalConfig, Interpolation};
use teamfuse::io::{read_json, read_segf, to_json, DetectionFile, GroundTruthFile};
use teamfuse::vulnerability::{verify_theory, TheoryGrid, TheoryRow};
use teamfuse::{ConfidenceAggregation, ConsensusConfig, Error, ImageId, ModelId, ModelOutput, Result};

#[derive(Parser)]
#[command(name = "teamfuse", version, about = "Fuse, align, rank and evaluate detector ensembles")]
struct Cli {
    /// TOML configuration file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Reject unknown fields in input and configuration files.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Consensus fusion of several detection files.
    Fuse(FuseArgs),
    /// Turn a segmentation score volume into detections.
    Align(AlignArgs),
    /// Rank candidate teams by focal diversity.
    Rank(RankArgs),
    /// mAP of one detection file against ground truth.
    Eval(EvalArgs),
    /// Monte Carlo check of the ensemble vulnerability closed form.
    VerifyTheory(TheoryArgs),
}

#[derive(Args)]
struct Output {
    /// Output path; standard output when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    iou_threshold: Option<f64>,
    #[arg(long)]
    quorum: Option<f64>,
    #[arg(long, value_enum)]
    conf_agg: Option<ConfAgg>,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
struct AlignArgs {
    input: PathBuf,
    #[arg(long)]
    minsize: Option<usize>,
    #[arg(long, value_enum)]
    connectivity: Option<Conn>,
    /// Apply a per-pixel softmax across classes first.
    #[arg(long)]
    softmax: bool,
    #[arg(long)]
    model_id: Option<String>,
    /// Image id of the emitted detections; defaults to the input file stem.
    #[arg(long)]
    image_id: Option<String>,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
struct RankArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    min_size: Option<usize>,
    #[arg(long)]
    max_size: Option<usize>,
    #[arg(long, value_enum)]
    metric: Option<Metric>,
    /// IoU a detection needs to count as correct.
    #[arg(long)]
    iou_threshold: Option<f64>,
    /// Confidence a detection needs to count as correct.
    #[arg(long)]
    conf_threshold: Option<f64>,
    /// Report raw scores without batch normalisation.
    #[arg(long)]
    raw: bool,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
struct EvalArgs {
    input: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, conflicts_with = "iou_sweep")]
    iou_threshold: Option<f64>,
    /// Evaluate at 0.50, 0.55, ..., 0.95.
    #[arg(long)]
    iou_sweep: bool,
    #[arg(long, value_enum)]
    interp: Option<Interp>,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[command(flatten)]
    out: Output,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConfAgg {
    Mean,
    Max,
}

#[derive(Clone, Copy, ValueEnum)]
enum Conn {
    #[value(name = "4")]
    Four,
    #[value(name = "8")]
    Eight,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Pairwise,
    Nonpairwise,
}

#[derive(Clone, Copy, ValueEnum)]
enum Interp {
    All,
    #[value(name = "11pt")]
    ElevenPoint,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct Config {
    fuse: ConsensusConfig,
    align: AlignConfig,
    rank: RankConfig,
    eval: EvalConfig,
    theory: TheoryGrid,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct AlignConfig {
    minsize: Option<usize>,
    connectivity: Connectivity,
    softmax: bool,
    model_id: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(default)]
struct RankConfig {
    min_size: usize,
    max_size: Option<usize>,
    metric: DiversityMetric,
    iou_threshold: f64,
    confidence_threshold: f64,
    normalize: bool,
    weights: BTreeMap<ModelId, f64>,
}

impl Default for RankConfig {
    fn default() -> Self {
        RankConfig {
            min_size: 2,
            max_size: None,
            metric: DiversityMetric::NonPairwise,
            iou_threshold: 0.5,
            confidence_threshold: 0.5,
            normalize: true,
            weights: BTreeMap::new(),
        }
    }
}

#[derive(Serialize)]
struct RankReport {
    metric: DiversityMetric,
    iou_threshold: f64,
    confidence_threshold: f64,
    normalize: bool,
    teams: Vec<RankedTeam>,
}

#[derive(Serialize)]
struct TheoryReport {
    grid: TheoryGrid,
    all_pass: bool,
    rows: Vec<TheoryRow>,
}

fn load_config(path: Option<&Path>, strict: bool) -> Result<Config> {
    let Some(path) = path else {
        return Ok(Config::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let value: toml::Value =
        toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut unknown = Vec::new();
    let config: Config = serde_ignored::deserialize(value, |p| unknown.push(p.to_string()))
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if strict && !unknown.is_empty() {
        return Err(Error::Format(format!("{}: unknown keys: {}", path.display(), unknown.join(", "))));
    }
    Ok(config)
}

fn write_output(out: &Output, text: &str) -> Result<()> {
    match &out.output {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_detections(paths: &[PathBuf], strict: bool) -> Result<Vec<(DetectionFile, ModelOutput)>> {
    let mut seen = BTreeSet::new();
    paths
        .iter()
        .map(|p| {
            let file: DetectionFile = read_json(p, strict)?;
            let output = file.to_model_output()?;
            if !seen.insert(output.model_id.clone()) {
                return Err(Error::DuplicateMember(output.model_id.clone()));
            }
            Ok((file, output))
        })
        .collect()
}

fn fuse(args: &FuseArgs, config: Config, strict: bool) -> Result<()> {
    let mut consensus = config.fuse;
    if let Some(t) = args.iou_threshold {
        consensus.iou_threshold = t;
    }
    if let Some(q) = args.quorum {
        consensus.quorum = q;
    }
    if let Some(a) = args.conf_agg {
        consensus.confidence_aggregation = match a {
            ConfAgg::Mean => ConfidenceAggregation::Mean,
            ConfAgg::Max => ConfidenceAggregation::Max,
        };
    }
    let inputs = read_detections(&args.inputs, strict)?;
    let images: BTreeSet<ImageId> = inputs.iter().flat_map(|(f, _)| f.image_ids()).collect();
    let outputs: Vec<ModelOutput> = inputs.into_iter().map(|(_, o)| o).collect();
    let fused = fuse_dataset(&outputs, &consensus)?;
    debug_assert_eq!(fused.model_id.as_str(), ENSEMBLE_MODEL_ID);
    write_output(&args.out, &to_json(&DetectionFile::from_model_output(&fused, &images)))
}

fn align(args: &AlignArgs, config: Config) -> Result<()> {
    let mut scores = read_segf(&args.input)?;
    if args.softmax || config.align.softmax {
        scores = scores.softmax();
    }
    let mut params = ComponentParams::default_for(scores.height(), scores.width());
    params.connectivity = config.align.connectivity;
    if let Some(m) = args.minsize.or(config.align.minsize) {
        params.minsize = m;
    }
    if let Some(c) = args.connectivity {
        params.connectivity = match c {
            Conn::Four => Connectivity::Four,
            Conn::Eight => Connectivity::Eight,
        };
    }
    let model_id = ModelId::new(
        args.model_id
            .clone()
            .or(config.align.model_id)
            .unwrap_or_else(|| "segmentation".into()),
    );
    let image_id = ImageId::new(args.image_id.clone().unwrap_or_else(|| {
        args.input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into())
    }));
    let mut output = ModelOutput::new(model_id.clone());
    for d in ccl_align(&scores, &params, &model_id)? {
        output.push(image_id.clone(), d);
    }
    let images = BTreeSet::from([image_id]);
    write_output(&args.out, &to_json(&DetectionFile::from_model_output(&output, &images)))
}

fn rank(args: &RankArgs, config: Config, strict: bool) -> Result<()> {
    let mut rc = config.rank;
    if let Some(t) = args.iou_threshold {
        rc.iou_threshold = t;
    }
    if let Some(t) = args.conf_threshold {
        rc.confidence_threshold = t;
    }
    if let Some(m) = args.metric {
        rc.metric = match m {
            Metric::Pairwise => DiversityMetric::Pairwise,
            Metric::Nonpairwise => DiversityMetric::NonPairwise,
        };
    }
    if args.raw {
        rc.normalize = false;
    }
    let gt_file: GroundTruthFile = read_json(&args.gt, strict)?;
    let gt = gt_file.to_objects()?;
    let gt_images = gt_file.image_ids();
    let inputs = read_detections(&args.inputs, strict)?;
    for (file, output) in &inputs {
        let covered = file.image_ids();
        if let Some(missing) = gt_images.iter().find(|i| !covered.contains(*i)) {
            return Err(Error::Config(format!(
                "model {} has no entry for ground-truth image {missing}",
                output.model_id
            )));
        }
    }
    let outputs: Vec<ModelOutput> = inputs.into_iter().map(|(_, o)| o).collect();
    let pool: Vec<ModelId> = outputs.iter().map(|o| o.model_id.clone()).collect();
    let min_size = args.min_size.unwrap_or(rc.min_size);
    let max_size = args.max_size.or(rc.max_size).unwrap_or(pool.len());
    let table = build_correctness_table(&outputs, &gt, rc.iou_threshold, rc.confidence_threshold)?;
    let options = DiversityOptions {
        weights: rc.weights,
        normalize: rc.normalize,
    };
    let teams = rank_teams(&pool, &table, min_size, max_size, rc.metric, &options)?;
    let report = RankReport {
        metric: rc.metric,
        iou_threshold: rc.iou_threshold,
        confidence_threshold: rc.confidence_threshold,
        normalize: rc.normalize,
        teams,
    };
    write_output(&args.out, &to_json(&report))
}

fn eval(args: &EvalArgs, config: Config, strict: bool) -> Result<()> {
    let mut ec = config.eval;
    if let Some(i) = args.interp {
        ec.interpolation = match i {
            Interp::All => Interpolation::AllPoint,
            Interp::ElevenPoint => Interpolation::ElevenPoint,
        };
    }
    if args.iou_sweep {
        ec = EvalConfig::coco_sweep(ec.interpolation);
    } else if let Some(t) = args.iou_threshold {
        ec.iou_thresholds = vec![t];
    }
    let gt: GroundTruthFile = read_json(&args.gt, strict)?;
    let gt = gt.to_objects()?;
    let dets: DetectionFile = read_json(&args.input, strict)?;
    let dets = dets.to_model_output()?;
    let report = mean_average_precision(&dets.detections, &gt, &ec)?;
    write_output(&args.out, &to_json(&report))
}

fn verify(args: &TheoryArgs, config: Config) -> Result<bool> {
    let mut grid = config.theory;
    if let Some(s) = args.seed {
        grid.seed = s;
    }
    if let Some(t) = args.trials {
        grid.trials = t;
    }
    if let Some(d) = args.dim {
        grid.dim = d;
    }
    if let Some(t) = args.tolerance {
        grid.tolerance = t;
    }
    let rows = verify_theory(&grid)?;
    let all_pass = rows.iter().all(|r| r.pass);
    write_output(&args.out, &to_json(&TheoryReport { grid, all_pass, rows }))?;
    Ok(all_pass)
}

fn run(cli: Cli) -> Result<bool> {
    let config = load_config(cli.config.as_deref(), cli.strict)?;
    match &cli.command {
        Command::Fuse(a) => fuse(a, config, cli.strict).map(|_| true),
        Command::Align(a) => align(a, config).map(|_| true),
        Command::Rank(a) => rank(a, config, cli.strict).map(|_| true),
        Command::Eval(a) => eval(a, config, cli.strict).map(|_| true),
        Command::VerifyTheory(a) => verify(a, config),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("teamfuse: closed-form check failed for at least one grid cell");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("teamfuse: {e}");
            ExitCode::from(if e.is_parse() { 2 } else { 3 })
        }
    }
}
