//! The `groupwalk` command line.
//!
//! Exit statuses: 0 success, 2 usage or config error, 3 missing or unreadable
//! file, 4 invalid data, 5 numerical failure.

use std::ffi::OsString;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, RunConfig};
use crate::eval::{
    evaluate_variants, generate, view_graphs, write_results, SynthError, VariantResults, GALLERY_CAMERA,
    PROBE_CAMERA,
};
use crate::feature_store::{load_dataset, validate_dataset, DatasetManifest, StoreError};
use crate::matching::{MatchError, MatchParams};
use crate::pipeline::{Pipeline, PipelineError, PipelineFlags};
use crate::training::{node_budget, train, TrainError};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

/// Largest acceptable relative error for `train --grad-check`.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "groupwalk", version, about = "Group re-identification with random-walk subgroup selection and graph matching")]
pub struct Cli {
    /// TOML run config; defaults to $GROUPWALK_CONFIG when set.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a feature file and print a summary.
    Ingest {
        path: PathBuf,
        /// Body parts per feature vector.
        #[arg(long)]
        parts: Option<usize>,
    },
    /// Write a synthetic two-camera dataset.
    Synth(SynthArgs),
    /// Fit matching weights and write a checkpoint and loss log.
    Train(TrainArgs),
    /// Rank every probe group against the gallery and write CMC results.
    Eval(EvalArgs),
    /// Rank the gallery for a single probe group.
    Match(MatchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub identities: Option<usize>,
    #[arg(long)]
    pub members_min: Option<usize>,
    #[arg(long)]
    pub members_max: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub parts: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub churn: Option<usize>,
    #[arg(long)]
    pub distractors: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct StageArgs {
    /// Skip random-walk subgroup selection.
    #[arg(long)]
    pub no_rw: bool,
    /// Skip graph matching; compare mean member features instead.
    #[arg(long)]
    pub no_gm: bool,
    /// Node budget per graph.
    #[arg(long)]
    pub n_max: Option<usize>,
    #[arg(long)]
    pub walk_steps: Option<usize>,
    /// Body parts per feature vector when no checkpoint fixes it.
    #[arg(long)]
    pub parts: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Feature file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Per-epoch loss log; defaults to the checkpoint path with `.loss` appended.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_pairs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Train with the mean-gap loss instead of the circle loss.
    #[arg(long)]
    pub no_cl: bool,
    /// Compare analytic and numerical gradients on the first batch.
    #[arg(long)]
    pub grad_check: bool,
    #[command(flatten)]
    pub stages: StageArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Results file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Evaluate Base, +RW, +GM and +RW+GM.
    #[arg(long)]
    pub ablate: bool,
    #[arg(long, default_value = PROBE_CAMERA)]
    pub probe_camera: String,
    #[arg(long, default_value = GALLERY_CAMERA)]
    pub gallery_camera: String,
    #[command(flatten)]
    pub stages: StageArgs,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Probe group id.
    #[arg(long)]
    pub probe: String,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    #[arg(long, default_value = PROBE_CAMERA)]
    pub probe_camera: String,
    #[arg(long, default_value = GALLERY_CAMERA)]
    pub gallery_camera: String,
    #[command(flatten)]
    pub stages: StageArgs,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let code = match e {
            ConfigError::Parse { .. } => EXIT_USAGE,
            _ => EXIT_IO,
        };
        Self::new(code, e.to_string())
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        let code = match e {
            StoreError::NotFound(_) | StoreError::Io { .. } => EXIT_IO,
            _ => EXIT_DATA,
        };
        Self::new(code, e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Store(s) => s.into(),
            other => Self::new(EXIT_USAGE, other.to_string()),
        }
    }
}

impl From<MatchError> for CliError {
    fn from(e: MatchError) -> Self {
        let code = match e {
            MatchError::NonFinite | MatchError::ZeroEmbedding => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Self::new(code, e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Match(m) => m.into(),
            PipelineError::MissingParams => Self::new(EXIT_USAGE, e.to_string()),
            other => Self::new(EXIT_DATA, other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Match(m) => m.into(),
            TrainError::Pipeline(p) => p.into(),
            TrainError::NonFiniteLoss { .. } => Self::new(EXIT_NUMERIC, e.to_string()),
            TrainError::BadConfig(_) | TrainError::NothingToTrain => Self::new(EXIT_USAGE, e.to_string()),
            other => Self::new(EXIT_DATA, other.to_string()),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(EXIT_IO, format!("{}: {e}", path.display()))
}

fn required(value: Option<PathBuf>, fallback: &Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    value
        .or_else(|| fallback.clone())
        .ok_or_else(|| CliError::new(EXIT_USAGE, format!("missing --{flag} (or the matching [paths] key)")))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| io_error(path, e))
}

fn load_params(path: &Path) -> Result<MatchParams, CliError> {
    if !path.exists() {
        return Err(CliError::new(EXIT_IO, format!("{}: checkpoint not found", path.display())));
    }
    Ok(MatchParams::load(path)?)
}

fn apply_stages(cfg: &mut RunConfig, stages: &StageArgs) {
    if stages.no_rw {
        cfg.pipeline.flags.rw = false;
    }
    if stages.no_gm {
        cfg.pipeline.flags.gm = false;
    }
    if let Some(n) = stages.n_max {
        cfg.pipeline.n_max = Some(n);
    }
    if let Some(s) = stages.walk_steps {
        cfg.pipeline.walk_steps = s;
    }
    if let Some(p) = stages.parts {
        cfg.model.part_count = p;
    }
}

/// Checkpoint (when GM needs one) and dataset for `eval` and `match`.
fn load_for_ranking(
    cfg: &mut RunConfig,
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    needs_params: bool,
) -> Result<(DatasetManifest, Option<MatchParams>), CliError> {
    let data = required(data, &cfg.paths.features, "data")?;
    let params = match checkpoint.or_else(|| cfg.paths.checkpoint.clone()) {
        Some(p) if needs_params => Some(load_params(&p)?),
        Some(_) => None,
        None if needs_params => {
            return Err(CliError::new(
                EXIT_USAGE,
                "graph matching is enabled but no --checkpoint was given",
            ))
        }
        None => None,
    };
    if let Some(p) = &params {
        cfg.model.part_count = p.part_count;
    }
    let dataset = load_dataset(&data, cfg.model.part_count)?;
    if let Some(p) = &params {
        if p.feature_dim() != dataset.feature_dim {
            return Err(CliError::new(
                EXIT_DATA,
                format!(
                    "checkpoint expects {}-dimensional features, data has {}",
                    p.feature_dim(),
                    dataset.feature_dim
                ),
            ));
        }
    }
    Ok((dataset, params))
}

fn cmd_ingest(cfg: &RunConfig, path: &Path, parts: Option<usize>, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let dataset = load_dataset(path, parts.unwrap_or(cfg.model.part_count))?;
    let w = |e| io_error(Path::new("stdout"), e);
    writeln!(out, "groups\t{}", dataset.groups.len()).map_err(w)?;
    writeln!(out, "cameras\t{}", dataset.cameras().join(",")).map_err(w)?;
    writeln!(out, "persons\t{}", dataset.person_count()).map_err(w)?;
    writeln!(out, "feature_dim\t{}", dataset.feature_dim).map_err(w)?;
    writeln!(out, "part_count\t{}", dataset.part_count).map_err(w)?;
    let violations = validate_dataset(&dataset);
    writeln!(out, "violations\t{}", violations.len()).map_err(w)?;
    for v in &violations {
        writeln!(out, "violation\t{v}").map_err(w)?;
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(EXIT_DATA, format!("{} violation(s)", violations.len())))
    }
}

fn cmd_synth(cfg: &mut RunConfig, args: SynthArgs) -> Result<(), CliError> {
    let s = &mut cfg.synth;
    if let Some(v) = args.identities {
        s.n_identities = v;
    }
    if let Some(v) = args.members_min {
        s.members_per_group[0] = v;
    }
    if let Some(v) = args.members_max {
        s.members_per_group[1] = v;
    }
    if let Some(v) = args.dim {
        s.feature_dim = v;
    }
    if let Some(v) = args.parts {
        s.part_count = v;
    }
    if let Some(v) = args.sigma {
        s.noise_sigma = v;
    }
    if let Some(v) = args.churn {
        s.churn_count = v;
    }
    if let Some(v) = args.distractors {
        s.distractor_count = v;
    }
    if let Some(v) = args.seed {
        s.seed = v;
    }
    let dataset = generate(s)?;
    let mut w = create(&args.out)?;
    dataset
        .write_to(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| io_error(&args.out, e))
}

fn cmd_train(cfg: &mut RunConfig, args: TrainArgs, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    apply_stages(cfg, &args.stages);
    let t = &mut cfg.train;
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.lr {
        t.learning_rate = v;
    }
    if let Some(v) = args.batch_pairs {
        t.batch_pairs = v;
    }
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.rounds {
        cfg.model.rounds = v;
    }
    if args.no_cl {
        cfg.pipeline.flags.cl = false;
    }
    t.grad_check |= args.grad_check;
    let data = required(args.data, &cfg.paths.features, "data")?;
    let checkpoint = required(args.checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    let loss_log = args
        .loss_log
        .or_else(|| cfg.paths.loss_log.clone())
        .unwrap_or_else(|| {
            let mut p = checkpoint.clone().into_os_string();
            p.push(".loss");
            PathBuf::from(p)
        });

    let dataset = load_dataset(&data, cfg.model.part_count)?;
    let report = train(&dataset, &cfg.train, &cfg.model, &cfg.pipeline)?;

    let mut w = create(&loss_log)?;
    for (epoch, loss) in report.epoch_losses.iter().enumerate() {
        writeln!(w, "{epoch}\t{loss:?}").map_err(|e| io_error(&loss_log, e))?;
    }
    w.flush().map_err(|e| io_error(&loss_log, e))?;
    if let Some(dir) = checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    report.params.save(&checkpoint).map_err(|e| io_error(&checkpoint, e))?;

    let stdout = |e| io_error(Path::new("stdout"), e);
    if let Some(last) = report.epoch_losses.last() {
        writeln!(out, "epochs\t{}\nfinal_loss\t{last:.6}", report.epoch_losses.len()).map_err(stdout)?;
    }
    if let Some(check) = report.grad_check {
        writeln!(out, "grad_check_max_rel_error\t{:e}", check.max_rel_error).map_err(stdout)?;
        if !(check.max_rel_error <= GRAD_CHECK_TOLERANCE) {
            return Err(CliError::new(
                EXIT_NUMERIC,
                format!(
                    "gradient check failed: relative error {:e} exceeds {GRAD_CHECK_TOLERANCE:e}",
                    check.max_rel_error
                ),
            ));
        }
    }
    Ok(())
}

fn cmd_eval(cfg: &mut RunConfig, args: EvalArgs, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    apply_stages(cfg, &args.stages);
    let variants: Vec<(&str, PipelineFlags)> = if args.ablate {
        PipelineFlags::ablation_grid().to_vec()
    } else {
        vec![(cfg.pipeline.flags.label(), cfg.pipeline.flags)]
    };
    let needs_params = variants.iter().any(|(_, f)| f.gm);
    let results_path = required(args.out, &cfg.paths.results, "out")?;
    let (dataset, params) = load_for_ranking(cfg, args.data, args.checkpoint, needs_params)?;
    let n_max = node_budget(&dataset, cfg.pipeline.n_max);
    let probes = view_graphs(&dataset, &args.probe_camera, n_max).map_err(|e| CliError::new(EXIT_DATA, e.to_string()))?;
    let gallery = view_graphs(&dataset, &args.gallery_camera, n_max).map_err(|e| CliError::new(EXIT_DATA, e.to_string()))?;
    if probes.is_empty() {
        return Err(CliError::new(EXIT_DATA, format!("no groups seen by camera {}", args.probe_camera)));
    }
    let pipeline = Pipeline::new(&cfg.pipeline, dataset.feature_dim)?;
    let results: Vec<VariantResults> = evaluate_variants(&probes, &gallery, params.as_ref(), &pipeline, &variants)?;

    let mut w = create(&results_path)?;
    write_results(&mut w, &results)
        .and_then(|_| w.flush())
        .map_err(|e| io_error(&results_path, e))?;
    let stdout = |e| io_error(Path::new("stdout"), e);
    writeln!(out, "variant\trank1\trank5\trank10\trank20").map_err(stdout)?;
    for v in &results {
        let s = v.summary();
        writeln!(out, "{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}", v.label, s[0], s[1], s[2], s[3]).map_err(stdout)?;
    }
    Ok(())
}

fn cmd_match(cfg: &mut RunConfig, args: MatchArgs, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    apply_stages(cfg, &args.stages);
    let (dataset, params) = load_for_ranking(cfg, args.data, args.checkpoint, cfg.pipeline.flags.gm)?;
    let n_max = node_budget(&dataset, cfg.pipeline.n_max);
    let probe = view_graphs(&dataset, &args.probe_camera, n_max)
        .map_err(|e| CliError::new(EXIT_DATA, e.to_string()))?
        .into_iter()
        .find(|g| g.group_id == args.probe)
        .ok_or_else(|| {
            CliError::new(
                EXIT_DATA,
                format!("probe group {} not seen by camera {}", args.probe, args.probe_camera),
            )
        })?;
    let gallery = view_graphs(&dataset, &args.gallery_camera, n_max).map_err(|e| CliError::new(EXIT_DATA, e.to_string()))?;
    let pipeline = Pipeline::new(&cfg.pipeline, dataset.feature_dim)?;
    let ranked = crate::eval::rank_all(std::slice::from_ref(&probe), &gallery, params.as_ref(), &pipeline)?;
    let stdout = |e| io_error(Path::new("stdout"), e);
    for (k, (id, score)) in ranked[0].ranked.iter().take(args.top_k).enumerate() {
        writeln!(out, "{}\t{id}\t{score:.6}", k + 1).map_err(stdout)?;
    }
    Ok(())
}

fn dispatch(cli: Cli, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let mut cfg = RunConfig::resolve(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest { path, parts } => cmd_ingest(&cfg, &path, parts, out),
        Command::Synth(a) => cmd_synth(&mut cfg, a),
        Command::Train(a) => cmd_train(&mut cfg, a, out),
        Command::Eval(a) => cmd_eval(&mut cfg, a, out),
        Command::Match(a) => cmd_match(&mut cfg, a, out),
    }
}

/// Parses `args`, runs the command and returns the exit status. Diagnostics
/// go to stderr.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(cli, out)),
            Err(e) => Err(CliError::new(EXIT_USAGE, format!("--threads: {e}"))),
        },
        None => dispatch(cli, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
