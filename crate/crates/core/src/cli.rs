//! Command-line front end: config resolution, manifests and dispatch.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::diffusion::{diffuse, Signal, SmoothingOperator};
use crate::experiments::{
    self, blobs, classifier_arch, synthetic_images, trial_seed, ExperimentKind, ExperimentOutcome,
    ExperimentSpec, ToyTask,
};
use crate::speclab::hessian;
use crate::{export, verify, BranchArch, BranchedModel, LossSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Run(#[from] crate::Error),
    #[error("{0} identity checks failed")]
    ChecksFailed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Config(_) | CliError::Run(crate::Error::Config(_)) => EXIT_CONFIG,
            _ => EXIT_FAILURE,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "branchlab", version, about = "Branch specialization experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON config merged over the defaults of the subcommand.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config field, e.g. `train.learning_rate=0.1`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, global = true, env = "BRANCHLAB_SEED")]
    pub seed: Option<u64>,
    /// Defaults to `out/<subcommand>`.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Maximum number of worker threads.
    #[arg(long, global = true, value_parser = positive)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one Toy1 model and record its dynamics.
    Toy1(SingleArgs),
    /// Train one Toy2 model and record its dynamics.
    Toy2(SingleArgs),
    /// Success rate and branch statistics over a range of M.
    Sweep(SweepArgs),
    /// Blob classification with clamped cross-entropy.
    Classify(SingleArgs),
    /// Learn a sum of branches on diffusion bands of synthetic images.
    Decompose(SingleArgs),
    /// Dense Hessian of a model and its block structure.
    Hessian(HessianArgs),
    /// Diffusion decomposition of a signal or image.
    Diffuse(DiffuseArgs),
    /// Run the identity suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SingleArgs {
    /// Number of branches.
    #[arg(long, value_parser = positive)]
    pub m: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskArg {
    Toy1,
    Toy2,
}

impl From<TaskArg> for ToyTask {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Toy1 => ToyTask::Toy1,
            TaskArg::Toy2 => ToyTask::Toy2,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub experiment: Option<TaskArg>,
    /// Branch counts: `a..b` (inclusive), `a,b,c` or a single value.
    #[arg(long, value_parser = parse_m_values)]
    pub m: Option<MValues>,
    #[arg(long, value_parser = positive)]
    pub trials: Option<usize>,
    /// Shorthand for 1000 trials per M.
    #[arg(long, conflicts_with = "trials")]
    pub full: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MValues(pub Vec<usize>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianTask {
    Toy1,
    Toy2,
    Blobs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct HessianArgs {
    #[arg(long, value_enum, default_value = "toy1")]
    pub task: HessianTask,
    /// Saved `model.json`; a fresh model is initialized when absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_parser = positive)]
    pub m: Option<usize>,
    /// Finite-difference step.
    #[arg(long)]
    pub step: Option<f64>,
    /// Restrict to first-layer weights.
    #[arg(long)]
    pub first_layer: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorArg {
    Laplacian,
    Box,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DiffuseArgs {
    /// Text file of numbers; one row is a 1-D signal, several rows an image.
    /// A synthetic image is used when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, value_parser = positive, default_value_t = 4)]
    pub bands: usize,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long, value_enum)]
    pub operator: Option<OperatorArg>,
    #[arg(long, default_value_t = 1.0)]
    pub weight: f64,
    #[arg(long, default_value_t = 1)]
    pub radius: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VerifyArgs {
    /// Random cases per identity.
    #[arg(long, value_parser = positive, default_value_t = 100)]
    pub cases: usize,
}

fn positive(s: &str) -> Result<usize, String> {
    match s.trim().parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

/// Parses `a..b` (inclusive), a comma list, or a single value; every M ≥ 1.
pub fn parse_m_values(s: &str) -> Result<MValues, String> {
    let values: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let a = positive(a).map_err(|e| format!("M range start: {e}"))?;
        let b = positive(b).map_err(|e| format!("M range end: {e}"))?;
        if a > b {
            return Err(format!("empty M range {a}..{b}"));
        }
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|p| positive(p).map_err(|e| format!("M value {p:?}: {e}")))
            .collect::<Result<_, _>>()?
    };
    Ok(MValues(values))
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Toy1(_) => "toy1",
            Command::Toy2(_) => "toy2",
            Command::Sweep(_) => "sweep",
            Command::Classify(_) => "classify",
            Command::Decompose(_) => "decompose",
            Command::Hessian(_) => "hessian",
            Command::Diffuse(_) => "diffuse",
            Command::Verify(_) => "verify",
        }
    }

    fn kind(&self) -> ExperimentKind {
        match self {
            Command::Toy1(_) | Command::Verify(_) => ExperimentKind::Toy1,
            Command::Toy2(_) => ExperimentKind::Toy2,
            Command::Sweep(_) => ExperimentKind::ToySweep,
            Command::Classify(_) => ExperimentKind::Classify,
            Command::Decompose(_) | Command::Diffuse(_) => ExperimentKind::Decompose,
            Command::Hessian(a) => match a.task {
                HessianTask::Toy1 => ExperimentKind::Toy1,
                HessianTask::Toy2 => ExperimentKind::Toy2,
                HessianTask::Blobs => ExperimentKind::Classify,
            },
        }
    }

    fn options(&self) -> Value {
        let v = match self {
            Command::Toy1(a) | Command::Toy2(a) | Command::Classify(a) | Command::Decompose(a) => {
                serde_json::to_value(a)
            }
            Command::Sweep(a) => serde_json::to_value(a),
            Command::Hessian(a) => serde_json::to_value(a),
            Command::Diffuse(a) => serde_json::to_value(a),
            Command::Verify(a) => serde_json::to_value(a),
        };
        v.unwrap_or(Value::Null)
    }
}

/// Recursively overlays `patch` on `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// Applies `a.b.c=value`; the value is read as JSON, falling back to a string.
fn apply_override(root: &mut Value, item: &str) -> Result<(), CliError> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {item:?} is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(CliError::Config(format!("empty key in override {item:?}")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("{path}: {key} is not inside an object")))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

/// Defaults, then the config file, then `--set` overrides, then flags.
pub fn resolve_spec(common: &CommonArgs, command: &Command) -> Result<ExperimentSpec, CliError> {
    let mut defaults = ExperimentSpec::for_kind(command.kind());
    defaults.output_dir = Path::new("out").join(command.name());
    let mut value = serde_json::to_value(&defaults).map_err(crate::Error::from)?;
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if !patch.is_object() {
            return Err(CliError::Config(format!("{}: expected a JSON object", path.display())));
        }
        merge(&mut value, patch);
    }
    for item in &common.overrides {
        apply_override(&mut value, item)?;
    }
    let mut spec: ExperimentSpec =
        serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
    // the subcommand always decides which runner is used
    spec.name = command.kind();
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    if let Some(dir) = &common.output_dir {
        spec.output_dir = dir.clone();
    }
    if common.jobs.is_some() {
        spec.jobs = common.jobs;
    }
    match command {
        Command::Toy1(a) | Command::Toy2(a) | Command::Classify(a) | Command::Decompose(a) => {
            if let Some(m) = a.m {
                spec.m_values = vec![m];
            }
        }
        Command::Sweep(a) => {
            if let Some(t) = a.experiment {
                spec.task = t.into();
            }
            if let Some(m) = &a.m {
                spec.m_values = m.0.clone();
            }
            if a.full {
                spec.trials = 1000;
            } else if let Some(t) = a.trials {
                spec.trials = t;
            }
        }
        Command::Hessian(a) => {
            if let Some(m) = a.m {
                spec.m_values = vec![m];
            }
        }
        Command::Diffuse(a) => spec.m_values = vec![a.bands],
        Command::Verify(_) => {}
    }
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(spec)
}

/// The manifest written next to every run's outputs.
pub fn manifest(command: &Command, spec: &ExperimentSpec) -> Value {
    json!({
        "program": "branchlab",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command.name(),
        "options": command.options(),
        "config": spec,
    })
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    EXIT_OK
                }
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let spec = resolve_spec(&cli.common, &cli.command)?;
    let dir = spec.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(crate::Error::from)?;
    let text = serde_json::to_string_pretty(&manifest(&cli.command, &spec)).map_err(crate::Error::from)?;
    export::write_text(&dir.join("manifest.json"), &(text + "\n"))?;

    match &cli.command {
        Command::Hessian(a) => run_hessian(a, &spec),
        Command::Diffuse(a) => run_diffuse(a, &spec),
        Command::Verify(a) => run_verify(a, &spec),
        _ => {
            let outcome = experiments::run(&spec)?;
            print_outcome(&outcome);
            println!("outputs written to {}", dir.display());
            Ok(())
        }
    }
}

fn print_outcome(outcome: &ExperimentOutcome) {
    match outcome {
        ExperimentOutcome::Toy(r) => println!(
            "M={} converged_at={:?} final_loss={:.3e} active={:?} silent={:?}",
            r.m, r.converged_at, r.final_loss, r.active, r.silent
        ),
        ExperimentOutcome::Sweep(r) => {
            println!("{:>4} {:>8} {:>8} {:>8}", "M", "success", "active", "silent");
            for a in &r.aggregates {
                println!(
                    "{:>4} {:>8.3} {:>8.2} {:>8.2}",
                    a.m, a.success_rate, a.mean_active, a.mean_silent
                );
            }
        }
        ExperimentOutcome::Classify(r) => {
            println!(
                "M={} train_acc={:.4} test_acc={:.4} active={:?} silent={:?}",
                r.branches, r.train_accuracy, r.test_accuracy, r.active, r.silent
            );
            if let (Some(i), Some(f)) = (&r.hessian_init, &r.hessian_final) {
                println!(
                    "off_block_ratio init={:.4} final={:.4}",
                    i.off_block_ratio, f.off_block_ratio
                );
            }
        }
        ExperimentOutcome::Decompose(r) => println!(
            "M={} mean_rel_err={:.4} residual_only={:.4} active={:?} silent={:?}",
            r.branches, r.mean_relative_error, r.residual_only_error, r.active, r.silent
        ),
    }
}

#[derive(Debug, Serialize)]
struct HessianSummaryOut {
    params: usize,
    branches: usize,
    h: f64,
    off_block_ratio: f64,
    off_block_max_ratio: f64,
    asymmetry: f64,
    block_norms: Vec<Vec<f64>>,
}

fn run_hessian(a: &HessianArgs, spec: &ExperimentSpec) -> Result<(), CliError> {
    let (arch, data, loss) = match a.task {
        HessianTask::Toy1 | HessianTask::Toy2 => (
            BranchArch::scalar_perceptron(),
            spec.task.dataset(),
            LossSpec::SquaredL2,
        ),
        HessianTask::Blobs => {
            let opts = &spec.classify;
            let train = blobs(opts, spec.seed)?.train;
            let n = opts.hessian_samples.min(train.len());
            let idx: Vec<usize> = (0..n).map(|i| i * train.len() / n).collect();
            (
                classifier_arch(opts),
                train.subset(&idx),
                LossSpec::ClampedCrossEntropy {
                    classes: opts.classes,
                },
            )
        }
    };
    let model = match &a.model {
        Some(path) => BranchedModel::from_json(&std::fs::read_to_string(path).map_err(crate::Error::from)?)?,
        None => {
            let m = spec.single_m()?;
            BranchedModel::init(arch, m, trial_seed(spec.seed, m, 0))?
        }
    };
    let mut report = hessian(&model, &loss, &data, a.step)?;
    if a.first_layer {
        report = report.restricted(&model.first_layer_indices())?;
    }
    let dir = &spec.output_dir;
    report.save_csv(&dir.join("hessian.csv"))?;
    export::write_text(&dir.join("hessian.svg"), &report.heatmap_svg("Hessian"))?;
    let norms = &report.per_pair_block_norms;
    export::write_matrix_csv(&dir.join("block_norms.csv"), norms)?;
    let summary = HessianSummaryOut {
        params: report.matrix.nrows(),
        branches: report.branches(),
        h: report.h,
        off_block_ratio: report.off_block_ratio,
        off_block_max_ratio: report.off_block_max_ratio,
        asymmetry: report.asymmetry,
        block_norms: (0..norms.nrows())
            .map(|i| norms.row(i).iter().copied().collect())
            .collect(),
    };
    write_summary(dir, &summary)?;
    println!(
        "params={} off_block_ratio={:.4} off_block_max_ratio={:.4}",
        summary.params, summary.off_block_ratio, summary.off_block_max_ratio
    );
    Ok(())
}

fn read_signal(path: &Path) -> Result<Signal, CliError> {
    let text = std::fs::read_to_string(path).map_err(crate::Error::from)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Usage(format!("{}:{}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    match rows.len() {
        0 => Err(CliError::Usage(format!("{} holds no numbers", path.display()))),
        1 => Ok(Signal::line(rows.remove(0))),
        h => {
            let w = rows[0].len();
            if rows.iter().any(|r| r.len() != w) {
                return Err(CliError::Usage(format!("{}: ragged rows", path.display())));
            }
            Ok(Signal::image(w, h, rows.concat())?)
        }
    }
}

#[derive(Debug, Serialize)]
struct DiffuseSummary {
    width: usize,
    height: usize,
    bands: usize,
    dt: f64,
    operator: SmoothingOperator,
    reconstruction_error: f64,
    band_norms: Vec<f64>,
    residual_norm: f64,
}

fn run_diffuse(a: &DiffuseArgs, spec: &ExperimentSpec) -> Result<(), CliError> {
    let signal = match &a.input {
        Some(path) => read_signal(path)?,
        None => {
            let n = spec.decompose.size;
            let img = synthetic_images(&spec.decompose, spec.seed)?.remove(0).image;
            Signal::image(n, n, img)?
        }
    };
    let op = match a.operator {
        Some(OperatorArg::Laplacian) => SmoothingOperator::LinearLaplacian { weight: a.weight },
        Some(OperatorArg::Box) => SmoothingOperator::BoxBlurResidual { radius: a.radius },
        None => spec.decompose.operator,
    };
    let dt = a
        .dt
        .unwrap_or_else(|| spec.decompose.dt.min(op.max_stable_dt(signal.is_1d())));
    let dec = diffuse(&signal, &op, dt, a.bands)?;
    let dir = &spec.output_dir;
    dec.save_csv(&dir.join("results.csv"))?;
    if !signal.is_1d() {
        dec.save_pgm(dir, "band")?;
        export::write_pgm(&dir.join("input.pgm"), signal.width, signal.height, &signal.data)?;
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let summary = DiffuseSummary {
        width: signal.width,
        height: signal.height,
        bands: dec.bands(),
        dt,
        operator: op,
        reconstruction_error: dec.reconstruction_error(),
        band_norms: dec.phis.iter().map(|p| norm(p)).collect(),
        residual_norm: norm(&dec.residual),
    };
    write_summary(dir, &summary)?;
    println!(
        "bands={} dt={} reconstruction_error={:.3e}",
        summary.bands, dt, summary.reconstruction_error
    );
    Ok(())
}

fn run_verify(a: &VerifyArgs, spec: &ExperimentSpec) -> Result<(), CliError> {
    let checks = verify::identity_suite(spec.seed, a.cases);
    let mut passed = 0;
    let mut failed = 0;
    for c in &checks {
        println!(
            "{:<26} {} ({}/{} cases, worst {:.2e}, tolerance {:.0e})",
            c.name,
            if c.ok() { "PASS" } else { "FAIL" },
            c.passed,
            c.passed + c.failed,
            c.worst,
            c.tolerance
        );
        if c.ok() {
            passed += 1;
        } else {
            failed += 1;
        }
    }
    println!("verify: {passed} passed, {failed} failed");
    write_summary(&spec.output_dir, &json!({ "passed": passed, "failed": failed, "checks": checks }))?;
    if failed > 0 {
        return Err(CliError::ChecksFailed(failed));
    }
    Ok(())
}

fn write_summary(dir: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(crate::Error::from)?;
    export::write_text(&dir.join("summary.json"), &(text + "\n"))?;
    Ok(())
}
