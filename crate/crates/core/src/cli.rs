//! Command-line front end. Every subcommand parses its own flags, loads what
//! it needs through `io`, and writes results to stdout or the named files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datagen::{
    pairs_dataset, pendulum_knowledge, pendulum_trajectories, split_for, vehicle_knowledge, vehicle_runs,
    PendulumKnowledge, PendulumParams, VehicleParams,
};
use crate::editing::{Activation, PhyTaylorModel};
use crate::error::{Error, Result};
use crate::io::{
    dataset_to_csv, load_csv, load_weights, parse_safety_config, save_weights, ComplianceSummary, LayerConfig,
    ModelConfig, RunReport,
};
use crate::monomial::{basis_len, cascade_complexity_closed_form, cascade_complexity_difference, MonomialBasis};
use crate::network::{forward, knowledge_deviation};
use crate::selfcorrect::{correct_commands, revise, verify_nonneg, CommandBox, CorrectionProblem, Verification};
use crate::train::{rollout_error, train_model, Dataset, LossKind, OptimizerKind, Split, TrainConfig};

/// Environment variable read for the log level (`error` .. `trace`).
pub const LOG_ENV: &str = "PHYTAYLOR_LOG";

/// Largest tolerated deviation from known coefficients in `verify`.
pub const COMPLIANCE_TOL: f64 = 1e-9;

#[derive(Debug, Parser)]
#[command(name = "phytaylor", version, about = "Physics-compatible Taylor-monomial networks")]
pub struct Cli {
    /// Output style for tables.
    #[arg(long, value_enum, global = true, default_value_t = Format::Text)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
    Tsv,
}

impl Format {
    fn sep(self) -> &'static str {
        match self {
            Format::Text => "  ",
            Format::Csv => ",",
            Format::Tsv => "\t",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the monomial basis, optionally evaluated at a point.
    Augment(AugmentArgs),
    /// Generate a one-step dataset from a simulated system.
    Simulate(SimulateArgs),
    /// Train a model on a CSV dataset.
    Train(TrainArgs),
    /// Evaluate a trained model.
    Predict(PredictArgs),
    /// Closed-loop prediction error over trajectories in a dataset.
    Rollout(RolloutArgs),
    /// Check that a model's Jacobian reproduces its known coefficients.
    Verify(VerifyArgs),
    /// Correct a command pair so both safety metrics stay within bounds.
    Correct(CorrectArgs),
    /// Compare single and cascade layer sizes.
    Complexity(ComplexityArgs),
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub dim: usize,
    #[arg(long)]
    pub order: u32,
    /// Comma-separated point to evaluate the basis at.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub eval: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum System {
    Pendulum,
    Vehicle,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(value_enum)]
    pub system: System,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of trajectories; every sixth goes to validation and the next to test.
    #[arg(long, default_value_t = 12)]
    pub trajectories: usize,
    /// Samples per trajectory.
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    /// Lower end of the initial angle range (pendulum).
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    pub theta_min: f64,
    /// Upper end of the initial angle range (pendulum).
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub theta_max: f64,
    /// Observation noise (vehicle).
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Also write a single-layer model config carrying the system's knowledge.
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    /// Knowledge level for the pendulum model config.
    #[arg(long, value_enum, default_value_t = KnowledgeLevel::Full)]
    pub knowledge: KnowledgeLevel,
    /// Basis order of the emitted model config.
    #[arg(long, default_value_t = 1)]
    pub order: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KnowledgeLevel {
    Full,
    Partial,
    None,
}

impl From<KnowledgeLevel> for PendulumKnowledge {
    fn from(k: KnowledgeLevel) -> Self {
        match k {
            KnowledgeLevel::Full => PendulumKnowledge::Full,
            KnowledgeLevel::Partial => PendulumKnowledge::Partial,
            KnowledgeLevel::None => PendulumKnowledge::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Mse,
    Mae,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Weights file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lr_decay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    #[arg(long, value_enum, default_value_t = LossArg::Mse)]
    pub loss: LossArg,
    /// Where to write the per-epoch history; stdout when omitted.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// JSON run report.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Rollout horizon for the report's test-trajectory errors.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Random probes for the report's compliance check.
    #[arg(long, default_value_t = 20)]
    pub probes: usize,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
}

impl ModelArgs {
    fn load(&self) -> Result<(ModelConfig, PhyTaylorModel)> {
        let config = ModelConfig::load(&self.model)?;
        let model = load_weights(&self.weights, &config)?;
        Ok((config, model))
    }
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Comma-separated input.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with = "data")]
    pub input: Option<Vec<f64>>,
    /// CSV whose input columns are evaluated row by row.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub horizon: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 50)]
    pub probes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Probe inputs are drawn uniformly from `[-scale, scale]`.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
}

#[derive(Debug, Args)]
pub struct CorrectArgs {
    /// TOML file with two `[[quadratic]]` entries.
    #[arg(long)]
    pub safety: PathBuf,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub bounds: Vec<f64>,
    /// `lo1,hi1,lo2,hi2`.
    #[arg(long = "box", value_delimiter = ',', allow_hyphen_values = true)]
    pub command_box: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub u: Vec<f64>,
    /// Revise quadratics that fail the non-negativity check instead of rejecting them.
    #[arg(long)]
    pub revise: bool,
}

#[derive(Debug, Args)]
pub struct ComplexityArgs {
    /// Input dimension.
    #[arg(long)]
    pub n: usize,
    /// Order of the single layer.
    #[arg(long)]
    pub r: u32,
    /// Cascade orders, multiplying to `r`.
    #[arg(long, value_delimiter = ',')]
    pub orders: Vec<u32>,
    /// Output widths of all cascade layers but the last.
    #[arg(long, value_delimiter = ',')]
    pub dims: Vec<usize>,
    /// Width of the final output.
    #[arg(long, default_value_t = 1)]
    pub out_dim: usize,
}

fn write_file(path: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path.as_ref(), contents).map_err(|e| Error::file(path.as_ref(), e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::file(path, e))
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env).try_init();
}

/// Parses `args`, runs the subcommand and returns the process exit code.
pub fn run_from<I, T>(args: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match run(&cli) {
        Ok(Outcome { text, code }) => {
            let _ = out.write_all(text.as_bytes());
            code
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

/// Text for stdout plus the exit code; failures that still produce a report
/// (a failed compliance check) come back here rather than as `Err`.
pub struct Outcome {
    pub text: String,
    pub code: i32,
}

impl Outcome {
    fn ok(text: String) -> Self {
        Self { text, code: 0 }
    }
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let f = cli.format;
    match &cli.command {
        Command::Augment(a) => augment(a, f).map(Outcome::ok),
        Command::Simulate(a) => simulate(a).map(Outcome::ok),
        Command::Train(a) => train(a).map(Outcome::ok),
        Command::Predict(a) => predict(a, f).map(Outcome::ok),
        Command::Rollout(a) => rollout(a, f).map(Outcome::ok),
        Command::Verify(a) => verify(a, f),
        Command::Correct(a) => correct(a, f).map(Outcome::ok),
        Command::Complexity(a) => complexity(a, f).map(Outcome::ok),
    }
}

fn row(f: Format, cells: &[String]) -> String {
    let mut s = cells.join(f.sep());
    s.push('\n');
    s
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",")
}

fn augment(a: &AugmentArgs, f: Format) -> Result<String> {
    let basis = MonomialBasis::new(a.dim, a.order)?;
    let names: Vec<String> = (1..=a.dim).map(|i| format!("x{i}")).collect();
    let mut out = String::new();
    if f != Format::Text {
        out += &row(f, &["index".into(), "exponents".into(), "term".into()]);
    }
    for (i, term) in basis.terms().iter().enumerate() {
        let exps = term.exponents().iter().map(|e| e.to_string()).collect::<Vec<_>>().join(" ");
        let exps = if f == Format::Text { format!("({})", exps.replace(' ', ",")) } else { exps };
        out += &row(f, &[i.to_string(), exps, term.display_with(&names)]);
    }
    if let Some(x) = &a.eval {
        let values = basis.evaluate(x)?;
        let _ = writeln!(out, "{}", fmt_vec(values.as_slice()));
    }
    Ok(out)
}

#[derive(Serialize)]
struct PendulumSidecar<'a> {
    system: &'static str,
    seed: u64,
    trajectories: usize,
    steps: usize,
    theta_range: [f64; 2],
    params: &'a PendulumParams,
}

#[derive(Serialize)]
struct VehicleSidecar<'a> {
    system: &'static str,
    seed: u64,
    trajectories: usize,
    steps: usize,
    params: &'a VehicleParams,
}

fn sidecar_path(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(suffix);
    out.with_file_name(name)
}

fn state_names() -> (Vec<String>, Vec<String>) {
    let now: Vec<String> = (1..=6).map(|i| format!("x{i}")).collect();
    let next = now.iter().map(|n| format!("{n}_next")).collect();
    (now, next)
}

fn single_layer_config(spec: &crate::knowledge::KnowledgeSpec, order: u32) -> ModelConfig {
    ModelConfig {
        input_dim: spec.basis().input_dim(),
        first_order: order,
        terminal_out_dim: spec.out_dim(),
        knowledge: (spec.known_count() > 0).then(|| spec.to_text()),
        layers: vec![LayerConfig {
            out_dim: spec.out_dim(),
            order,
            activation: Activation::Identity,
            suppressor: Vec::new(),
        }],
    }
}

fn to_toml<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("sidecar always serializes")
}

fn simulate(a: &SimulateArgs) -> Result<String> {
    if a.trajectories == 0 || a.steps == 0 {
        return Err(Error::InvalidArgument("trajectories and steps must be at least 1".into()));
    }
    let (now, next) = state_names();
    let mut written = vec![a.out.display().to_string()];
    match a.system {
        System::Pendulum => {
            let params = PendulumParams::default();
            let trajs = pendulum_trajectories(&params, a.trajectories, a.steps, (a.theta_min, a.theta_max), a.seed)?;
            let data = pairs_dataset(&trajs, split_for)?;
            write_file(&a.out, dataset_to_csv(&data, &now, &next)?)?;
            let side = sidecar_path(&a.out, ".params.toml");
            write_file(
                &side,
                to_toml(&PendulumSidecar {
                    system: "pendulum",
                    seed: a.seed,
                    trajectories: a.trajectories,
                    steps: a.steps,
                    theta_range: [a.theta_min, a.theta_max],
                    params: &params,
                }),
            )?;
            written.push(side.display().to_string());
            if let Some(path) = &a.model_out {
                let spec = pendulum_knowledge(a.knowledge.into(), a.order, params.period())?;
                write_file(path, single_layer_config(&spec, a.order).to_toml())?;
                written.push(path.display().to_string());
            }
        }
        System::Vehicle => {
            let params = VehicleParams {
                noise_std: a.noise,
                ..VehicleParams::default()
            };
            let runs = vehicle_runs(&params, a.trajectories, a.steps, a.seed)?;
            let observed: Vec<_> = runs.iter().map(|r| r.observed.clone()).collect();
            let truth: Vec<_> = runs.iter().map(|r| r.truth.clone()).collect();
            write_file(&a.out, dataset_to_csv(&pairs_dataset(&observed, split_for)?, &now, &next)?)?;
            let truth_path = sidecar_path(&a.out, ".truth.csv");
            write_file(&truth_path, dataset_to_csv(&pairs_dataset(&truth, split_for)?, &now, &next)?)?;
            let side = sidecar_path(&a.out, ".params.toml");
            write_file(
                &side,
                to_toml(&VehicleSidecar {
                    system: "vehicle",
                    seed: a.seed,
                    trajectories: a.trajectories,
                    steps: a.steps,
                    params: &params,
                }),
            )?;
            written.push(truth_path.display().to_string());
            written.push(side.display().to_string());
            if let Some(path) = &a.model_out {
                let spec = vehicle_knowledge(&params, a.order)?;
                write_file(path, single_layer_config(&spec, a.order).to_toml())?;
                written.push(path.display().to_string());
            }
        }
    }
    Ok(written.iter().map(|w| format!("wrote {w}\n")).collect())
}

fn probe_inputs(dim: usize, count: usize, scale: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..dim).map(|_| rng.random_range(-scale..=scale)).collect())
        .collect()
}

/// Rollout error of every trajectory in `split`, keyed by trajectory id.
fn trajectory_errors(model: &PhyTaylorModel, data: &Dataset, split: Option<Split>, horizon: usize) -> Result<Vec<(usize, f64)>> {
    let data = match split {
        Some(s) => data.subset(s),
        None => data.clone(),
    };
    let mut ids: Vec<usize> = Vec::new();
    for &t in &data.trajectories {
        if !ids.contains(&t) {
            ids.push(t);
        }
    }
    ids.into_iter()
        .zip(data.state_trajectories())
        .map(|(id, traj)| Ok((id, rollout_error(model, &traj, horizon)?)))
        .collect()
}

fn train(a: &TrainArgs) -> Result<String> {
    let config = ModelConfig::load(&a.model)?;
    let mut model = config.build()?;
    let data = load_csv(&a.data, model.input_dim(), model.terminal_out_dim())?;
    let cfg = TrainConfig {
        optimizer: match a.optimizer {
            OptimizerArg::Adam => OptimizerKind::Adam,
            OptimizerArg::Sgd => OptimizerKind::Sgd,
        },
        learning_rate: a.lr,
        lr_decay: a.lr_decay,
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed: a.seed,
        loss: match a.loss {
            LossArg::Mse => LossKind::Mse,
            LossArg::Mae => LossKind::Mae,
        },
        ..TrainConfig::default()
    };
    cfg.validate()?;
    model.initialize(&mut ChaCha8Rng::seed_from_u64(a.seed));
    let history = train_model(&mut model, &data, &cfg)?;
    save_weights(&a.out, &model, &config)?;
    log::info!("wrote weights to {}", a.out.display());

    let mut out = String::new();
    match &a.history {
        Some(path) => write_file(path, history.to_csv())?,
        None => out += &history.to_csv(),
    }
    if let Some(path) = &a.report {
        let probes = probe_inputs(model.input_dim(), a.probes, 1.0, a.seed);
        let compliance = ComplianceSummary {
            probes: probes.len(),
            known_positions: model.knowledge().known_count(),
            max_deviation: knowledge_deviation(&model, &probes)?,
        };
        let rollout_errors = match a.horizon {
            Some(h) => trajectory_errors(&model, &data, Some(Split::Test), h)?
                .into_iter()
                .map(|(_, e)| e)
                .collect(),
            None => Vec::new(),
        };
        let report = RunReport {
            config_hash: config.hash(),
            seed: a.seed,
            epochs: history.epochs.clone(),
            compliance: Some(compliance),
            rollout_errors,
        };
        write_file(path, report.to_json())?;
    }
    Ok(out)
}

fn predict(a: &PredictArgs, f: Format) -> Result<String> {
    let (_, model) = a.model.load()?;
    let inputs = match (&a.input, &a.data) {
        (Some(x), None) => vec![x.clone()],
        (None, Some(path)) => load_csv(path, model.input_dim(), model.terminal_out_dim())?.inputs,
        _ => return Err(Error::InvalidArgument("give exactly one of --input or --data".into())),
    };
    let mut out = String::new();
    if f != Format::Text {
        let header: Vec<String> = (1..=model.terminal_out_dim()).map(|i| format!("y{i}")).collect();
        out += &row(f, &header);
    }
    for x in &inputs {
        let y = forward(&model, x)?;
        let cells: Vec<String> = y.iter().map(|v| format!("{v}")).collect();
        out += &row(f, &cells);
    }
    Ok(out)
}

fn rollout(a: &RolloutArgs, f: Format) -> Result<String> {
    let (_, model) = a.model.load()?;
    let data = load_csv(&a.data, model.input_dim(), model.terminal_out_dim())?;
    let split = match a.split {
        SplitArg::Train => Some(Split::Train),
        SplitArg::Val => Some(Split::Val),
        SplitArg::Test => Some(Split::Test),
        SplitArg::All => None,
    };
    let errors = trajectory_errors(&model, &data, split, a.horizon)?;
    if errors.is_empty() {
        return Err(Error::InvalidArgument("no trajectories in the selected split".into()));
    }
    let mut out = row(f, &["traj".into(), "error".into()]);
    for (id, e) in &errors {
        out += &row(f, &[id.to_string(), format!("{e}")]);
    }
    let mean = errors.iter().map(|(_, e)| e).sum::<f64>() / errors.len() as f64;
    out += &row(f, &["mean".into(), format!("{mean}")]);
    Ok(out)
}

fn verify(a: &VerifyArgs, f: Format) -> Result<Outcome> {
    let (_, model) = a.model.load()?;
    if a.probes == 0 {
        return Err(Error::InvalidArgument("need at least one probe".into()));
    }
    let known = model.knowledge().known_count();
    let probes = probe_inputs(model.input_dim(), a.probes, a.scale, a.seed);
    let deviation = knowledge_deviation(&model, &probes)?;
    let pass = deviation <= COMPLIANCE_TOL;
    let mut out = match f {
        Format::Text => {
            let mut s = format!("{known} known positions, {} probes\nmax deviation {deviation:e}\n", a.probes);
            if known == 0 {
                s += "nothing to check: the model has no known coefficients\n";
            }
            s
        }
        _ => {
            row(f, &["known_positions".into(), "probes".into(), "max_deviation".into(), "pass".into()])
                + &row(f, &[known.to_string(), a.probes.to_string(), format!("{deviation:e}"), pass.to_string()])
        }
    };
    if f == Format::Text {
        out += if pass { "PASS\n" } else { "FAIL\n" };
    }
    Ok(Outcome {
        text: out,
        code: if pass { 0 } else { 4 },
    })
}

fn pair(name: &str, v: &[f64]) -> Result<[f64; 2]> {
    match v {
        [a, b] => Ok([*a, *b]),
        _ => Err(Error::InvalidArgument(format!(
            "--{name} needs two comma-separated values, got {}",
            v.len()
        ))),
    }
}

fn correct(a: &CorrectArgs, f: Format) -> Result<String> {
    let quadratics = parse_safety_config(&read_file(&a.safety)?)?;
    let [q1, q2] = <[_; 2]>::try_from(quadratics).map_err(|q: Vec<_>| {
        Error::InvalidArgument(format!("safety config needs exactly two quadratics, has {}", q.len()))
    })?;
    let bounds = pair("bounds", &a.bounds)?;
    let u = pair("u", &a.u)?;
    let bx = match a.command_box.as_slice() {
        [l1, h1, l2, h2] => CommandBox::new([*l1, *l2], [*h1, *h2])?,
        other => {
            return Err(Error::InvalidArgument(format!(
                "--box needs lo1,hi1,lo2,hi2, got {} values",
                other.len()
            )))
        }
    };
    let mut notes = String::new();
    let mut checked = Vec::with_capacity(2);
    for (k, q) in [q1, q2].into_iter().enumerate() {
        match verify_nonneg(&q, &bx) {
            Verification::Ok { .. } => checked.push(q),
            Verification::Violated { witness, value } if a.revise => {
                let _ = writeln!(
                    notes,
                    "# quadratic {} revised: violated at ({}, {}) with {value:e}",
                    k + 1,
                    witness[0],
                    witness[1]
                );
                checked.push(revise(&q, &bx)?);
            }
            Verification::Violated { witness, value } => {
                return Err(Error::InvalidArgument(format!(
                    "quadratic {} fails the non-negativity check at ({}, {}) with value {value:e}; pass --revise to repair it",
                    k + 1,
                    witness[0],
                    witness[1]
                )))
            }
        }
    }
    let problem = CorrectionProblem {
        quadratics: [checked[0], checked[1]],
        bounds,
        command_box: bx,
    };
    let c = correct_commands(&problem, &u)?;
    let metrics = [
        problem.quadratics[0].eval(&Vector2::from(c.command)),
        problem.quadratics[1].eval(&Vector2::from(c.command)),
    ];
    let header = ["u1", "u2", "corrected", "s1", "s2", "residual1", "residual2"].map(String::from);
    let cells = [
        format!("{}", c.command[0]),
        format!("{}", c.command[1]),
        c.corrected.to_string(),
        format!("{}", metrics[0]),
        format!("{}", metrics[1]),
        format!("{:e}", c.residuals[0]),
        format!("{:e}", c.residuals[1]),
    ];
    Ok(notes + &row(f, &header) + &row(f, &cells))
}

fn complexity(a: &ComplexityArgs, f: Format) -> Result<String> {
    if a.orders.iter().product::<u32>() != a.r {
        return Err(Error::InvalidArgument(format!(
            "cascade orders {:?} do not multiply to {}",
            a.orders, a.r
        )));
    }
    let direct = cascade_complexity_difference(a.n, a.r, &a.dims, &a.orders)?;
    let closed = cascade_complexity_closed_form(a.n, a.r, &a.dims, &a.orders)?;
    let single = basis_len(a.n, a.r)?;
    let mut ins = vec![a.n];
    ins.extend(&a.dims);
    let mut outs = a.dims.clone();
    outs.push(a.out_dim);
    let mut lens = Vec::with_capacity(a.orders.len());
    let mut cascade_weights = 0u64;
    for ((&n, &r), &m) in ins.iter().zip(&a.orders).zip(&outs) {
        let len = basis_len(n, r)?;
        lens.push(len);
        cascade_weights += (len - 1) * m as u64;
    }
    let single_weights = (single - 1) * a.out_dim as u64;
    // two dense layers of width len(m) versus one layer on the augmented input
    let dense_delta = (a.n as u64 + 1) * single;
    let rows: Vec<(&str, String)> = vec![
        ("single_basis_len", single.to_string()),
        (
            "cascade_basis_lens",
            lens.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" "),
        ),
        ("cascade_basis_sum", lens.iter().sum::<u64>().to_string()),
        ("difference_direct", direct.to_string()),
        ("difference_closed_form", closed.to_string()),
        ("single_weights", single_weights.to_string()),
        ("cascade_weights", cascade_weights.to_string()),
        ("dense_parameter_delta", dense_delta.to_string()),
    ];
    let mut out = String::new();
    if f != Format::Text {
        out += &row(f, &["quantity".into(), "value".into()]);
    }
    for (k, v) in rows {
        out += &row(f, &[k.to_string(), v]);
    }
    Ok(out)
}
