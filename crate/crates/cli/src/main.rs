mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lwrfit::{Execution, ParamMode, SchemeKind};

use crate::config::{parse_lambda, Observed, RunConfig, SynthSource};

#[derive(Debug, Parser)]
#[command(name = "lwrfit", version, about = "Discretize the LWR traffic model and estimate its flux parameter")]
struct Cli {
    /// TOML or JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Directory for output files.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic ground truth and density matrices.
    Synth(SynthArgs),
    /// Fit the flux parameter to a density matrix.
    Estimate(EstimateArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Build Edie density and flow matrices from trajectories.
    Edie(EdieArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    source: Option<SynthSource>,
    /// Rows of the density matrix (replaces the configured grid list).
    #[arg(long)]
    n_t: Option<usize>,
    /// Columns of the density matrix.
    #[arg(long)]
    n_x: Option<usize>,
    /// Speed of the ground truth.
    #[arg(long)]
    v_bar: Option<f64>,
    /// Cell width of the reference solve.
    #[arg(long)]
    dx: Option<f64>,
    /// Coefficient of the rollout source.
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    rollout_scheme: Option<SchemeKind>,
    #[arg(long)]
    rollout_p_t: Option<usize>,
    #[arg(long)]
    rollout_p_x: Option<usize>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// Density matrix, CSV or JSON.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    scheme: Option<SchemeKind>,
    #[arg(long)]
    mode: Option<ParamMode>,
    #[arg(long)]
    p_x: Option<usize>,
    #[arg(long)]
    p_t: Option<usize>,
    #[arg(long)]
    v_max: Option<f64>,
    /// `all`, `center` or a comma separated list of columns.
    #[arg(long)]
    observed: Option<Observed>,
    /// `auto`, a weight, or a comma separated list of candidate weights.
    #[arg(long, value_parser = parse_lambda)]
    lambda: Option<lwrfit::estimation::Lambda>,
    /// Divide raw input densities by this value.
    #[arg(long)]
    rho_max: Option<f64>,
    /// Raw flow matrix for data points in the fundamental diagram.
    #[arg(long)]
    flow: Option<PathBuf>,
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Restrict to these schemes (repeatable).
    #[arg(long = "scheme")]
    schemes: Vec<SchemeKind>,
    /// Restrict to these modes (repeatable).
    #[arg(long = "mode")]
    modes: Vec<ParamMode>,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long, hide = true)]
    inject_trm_sign_flip: bool,
}

#[derive(Debug, Args)]
struct EdieArgs {
    /// Trajectory CSV; the bundled fixture when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    n_t: Option<usize>,
    #[arg(long)]
    n_x: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    dx: Option<f64>,
    #[arg(long)]
    t_start: Option<f64>,
    #[arg(long)]
    x_start: Option<f64>,
    /// Estimate the maximal density from vehicle lengths over this many lanes.
    #[arg(long)]
    lanes: Option<usize>,
}

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum Failure {
    /// A check ran and did not pass.
    Check(String),
    /// Bad flags or configuration.
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

pub type Outcome = Result<(), Failure>;

pub trait UsageExt<T> {
    fn usage(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> UsageExt<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn apply_overrides(cfg: &mut RunConfig, command: &Command) {
    match command {
        Command::Synth(a) => {
            let s = &mut cfg.synth;
            if let Some(v) = a.source {
                s.source = v;
            }
            if a.n_t.is_some() || a.n_x.is_some() {
                let (n_t, n_x) = s.reference.grids.first().copied().unwrap_or((51, 51));
                s.reference.grids = vec![(a.n_t.unwrap_or(n_t), a.n_x.unwrap_or(n_x))];
            }
            if let Some(v) = a.v_bar {
                s.reference.v_bar = v;
            }
            if let Some(v) = a.dx {
                s.reference.dx = v;
            }
            if let Some(v) = a.c {
                s.rollout.c = v;
            }
            if let Some(v) = a.rollout_scheme {
                s.rollout.scheme = v;
            }
            if let Some(v) = a.rollout_p_t {
                s.rollout.p_t = v;
            }
            if let Some(v) = a.rollout_p_x {
                s.rollout.p_x = v;
            }
        }
        Command::Estimate(a) => {
            let e = &mut cfg.estimate;
            if let Some(v) = &a.input {
                e.input = Some(v.clone());
            }
            if let Some(v) = a.scheme {
                e.scheme = v;
            }
            if let Some(v) = a.mode {
                e.mode = v;
            }
            if let Some(v) = a.p_x {
                e.p_x = v;
            }
            if a.p_t.is_some() {
                e.p_t = a.p_t;
            }
            if let Some(v) = a.v_max {
                e.v_max = v;
            }
            if let Some(v) = &a.observed {
                e.observed = v.clone();
            }
            if let Some(v) = &a.lambda {
                e.lambda = v.clone();
            }
            if a.rho_max.is_some() {
                e.rho_max = a.rho_max;
            }
            if let Some(v) = &a.flow {
                e.flow = Some(v.clone());
            }
            if let Some(v) = a.max_iters {
                e.optimizer.max_iters = v;
            }
        }
        Command::Gradcheck(a) => {
            let g = &mut cfg.gradcheck;
            if !a.schemes.is_empty() {
                g.schemes = a.schemes.clone();
            }
            if !a.modes.is_empty() {
                g.modes = a.modes.clone();
            }
            if let Some(v) = a.instances {
                g.instances_per_case = v;
            }
            if let Some(v) = a.seed {
                g.seed = v;
            }
            if let Some(v) = a.tolerance {
                g.tolerance = v;
            }
            g.inject_trm_diagonal_sign_flip |= a.inject_trm_sign_flip;
        }
        Command::Edie(a) => {
            let e = &mut cfg.edie;
            if let Some(v) = &a.input {
                e.input = Some(v.clone());
            }
            if let Some(v) = a.n_t {
                e.n_t = v;
            }
            if let Some(v) = a.n_x {
                e.n_x = v;
            }
            if let Some(v) = a.dt {
                e.dt = v;
            }
            if let Some(v) = a.dx {
                e.dx = v;
            }
            if let Some(v) = a.t_start {
                e.t_start = v;
            }
            if let Some(v) = a.x_start {
                e.x_start = v;
            }
            if a.lanes.is_some() {
                e.lanes = a.lanes;
            }
        }
    }
}

fn execute(cli: Cli) -> Outcome {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).usage()?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, &cli.command);

    let exec = match cli.threads {
        Some(0) => return Err(Failure::Usage(anyhow::anyhow!("--threads must be positive"))),
        Some(1) => Execution::Sequential,
        Some(n) => {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global().runtime()?;
            Execution::Parallel
        }
        None => Execution::Parallel,
    };
    std::fs::create_dir_all(&cli.out).runtime()?;

    match cli.command {
        Command::Synth(_) => commands::synth(&cfg, &cli.out, exec),
        Command::Estimate(_) => commands::estimate(&cfg, &cli.out, exec),
        Command::Gradcheck(_) => commands::gradcheck(&cfg, &cli.out, exec),
        Command::Edie(_) => commands::edie(&cfg, &cli.out, exec),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = if cli.verbose { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Check(msg) => eprintln!("check failed: {msg}"),
                Failure::Usage(e) => eprintln!("error: {e:#}"),
                Failure::Runtime(e) => eprintln!("error: {e:#}"),
            }
            ExitCode::from(f.code())
        }
    }
}
