//! Command-line front end: `estimate`, `optimize`, `verify` and `sweep`.
//!
//! Settings come from an optional JSON run config and from flags; flags win.
//! Exit codes: 0 success, 1 a requested check failed, 2 usage error,
//! 3 config error, 4 any other runtime error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{free_energy_from_records, DerivativeForm, RecordSet};
use crate::model::{CoeffVector, ProblemSpec};
use crate::optimize::{gradient_descent, newton, LineSearch, OptTrace, OptimizerSettings};
use crate::problems::{load_problem, BuiltinParams};
use crate::simulate::write_records_csv;
use crate::verify::{self, parse_grid, Suite, SuiteSettings, VerifyReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

pub const THREADS_ENV: &str = "GIRSANOV_GRAD_THREADS";

#[derive(Debug, Parser)]
#[command(name = "girsanov-grad", version, about = "Monte Carlo gradients for entropy-regularized exit-time control")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Builtin problem name or path to a JSON problem file.
    #[arg(long, global = true)]
    pub problem: Option<String>,
    /// JSON run config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (required here or in the run config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 means all cores.
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub dt: Option<f64>,
    #[arg(long, global = true)]
    pub t_max: Option<f64>,
    /// Brownian-bridge exit correction.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub bridge: Option<bool>,
    /// Right endpoint for brownian-exit.
    #[arg(long, global = true)]
    pub b: Option<f64>,
    /// Horizon for the quadratic builtin.
    #[arg(long, global = true)]
    pub horizon: Option<f64>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Number of trajectories.
    #[arg(long = "n", global = true)]
    pub n_samples: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Objective, gradient, Hessian, KL and free-energy estimates at fixed coefficients.
    Estimate(EstimateArgs),
    /// Gradient descent or Newton iterations on the fixed-seed objective.
    Optimize(OptimizeArgs),
    /// Oracle and identity checks.
    Verify(VerifyArgs),
    /// Objective and gradient over a parameter grid.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Coefficients, comma separated (default zeros).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub a: Option<Vec<f64>>,
    /// KL direction, comma separated (default `a`).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub w: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub form: Option<FormArg>,
    /// Also write the per-trajectory CSV.
    #[arg(long)]
    pub dump_paths: bool,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Starting coefficients (default zeros).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub a0: Option<Vec<f64>>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub grad_tol: Option<f64>,
    #[arg(long, value_enum)]
    pub form: Option<FormArg>,
    #[arg(long, value_enum)]
    pub line_search: Option<LineSearchArg>,
    #[arg(long)]
    pub ridge_floor: Option<f64>,
    /// New seed every iteration (no convergence guarantees).
    #[arg(long)]
    pub fresh_samples: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum)]
    pub suite: Option<SuiteArg>,
    /// `start:stop:step` or a comma list.
    #[arg(long)]
    pub b_grid: Option<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub over: Option<SweepParam>,
    /// `start:stop:step` or a comma list.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub a: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub form: Option<FormArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormArg {
    Plain,
    Compensated,
}

impl From<FormArg> for DerivativeForm {
    fn from(f: FormArg) -> Self {
        match f {
            FormArg::Plain => DerivativeForm::Plain,
            FormArg::Compensated => DerivativeForm::Compensated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    Gd,
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineSearchArg {
    Reweight,
    Resimulate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteArg {
    Nonconvexity,
    ExitLaw,
    Identities,
    Gradient,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    B,
    Lambda,
    Dt,
}

/// JSON run config. Every field is optional; command-line flags override.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: Option<String>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub dt: Option<f64>,
    pub t_max: Option<f64>,
    pub bridge: Option<bool>,
    pub b: Option<f64>,
    pub horizon: Option<f64>,
    pub lambda: Option<f64>,
    pub n_samples: Option<usize>,
    pub a: Option<Vec<f64>>,
    pub w: Option<Vec<f64>>,
    pub form: Option<FormArg>,
    pub dump_paths: Option<bool>,
    pub method: Option<MethodArg>,
    pub a0: Option<Vec<f64>>,
    pub max_iter: Option<usize>,
    pub grad_tol: Option<f64>,
    pub line_search: Option<LineSearchArg>,
    pub ridge_floor: Option<f64>,
    pub fresh_samples: Option<bool>,
    pub suite: Option<SuiteArg>,
    pub b_grid: Option<String>,
    pub sweep_over: Option<SweepParam>,
    pub grid: Option<String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// A failure carrying the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

/// Settings shared by all commands after merging flags over the config.
struct Context {
    spec: ProblemSpec,
    seed: u64,
    n_samples: usize,
    out_dir: PathBuf,
    cfg: RunConfig,
}

const DEFAULT_N: usize = 10_000;

fn context(g: &GlobalArgs, cfg: RunConfig, default_problem: &str) -> std::result::Result<Context, Failure> {
    let seed = g
        .seed
        .or(cfg.seed)
        .ok_or_else(|| usage("the --seed option is required (or \"seed\" in the run config)"))?;
    let problem = g
        .problem
        .clone()
        .or_else(|| cfg.problem.clone())
        .unwrap_or_else(|| default_problem.to_string());
    let defaults = BuiltinParams::default();
    let params = BuiltinParams {
        b: g.b.or(cfg.b).unwrap_or(defaults.b),
        horizon: g.horizon.or(cfg.horizon).unwrap_or(defaults.horizon),
    };
    let mut spec = load_problem(&problem, params)?;
    if let Some(dt) = g.dt.or(cfg.dt) {
        spec = spec.with_dt(dt)?;
    }
    if let Some(t_max) = g.t_max.or(cfg.t_max) {
        spec = spec.with_t_max(t_max)?;
    }
    if let Some(bridge) = g.bridge.or(cfg.bridge) {
        spec = spec.with_bridge(bridge);
    }
    if let Some(lambda) = g.lambda.or(cfg.lambda) {
        spec = spec.with_lambda(lambda)?;
    }
    let n_samples = g.n_samples.or(cfg.n_samples).unwrap_or(DEFAULT_N);
    if n_samples < 2 {
        return Err(usage("--n must be at least 2"));
    }
    let out_dir = g.out_dir.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out_dir).map_err(|e| Failure {
        code: EXIT_RUNTIME,
        message: format!("cannot create output directory {}: {e}", out_dir.display()),
    })?;
    Ok(Context {
        spec,
        seed,
        n_samples,
        out_dir,
        cfg,
    })
}

fn coefficients(values: Option<Vec<f64>>, spec: &ProblemSpec, what: &str) -> std::result::Result<CoeffVector, Failure> {
    let a = CoeffVector::new(values.unwrap_or_else(|| vec![0.0; spec.basis_size()]));
    if a.len() != spec.basis_size() {
        return Err(usage(format!(
            "--{what} has {} entries but the problem has {} basis functions",
            a.len(),
            spec.basis_size()
        )));
    }
    Ok(a)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(&path, text)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn create(dir: &Path, name: &str) -> Result<std::io::BufWriter<fs::File>> {
    let path = dir.join(name);
    info!("writing {}", path.display());
    Ok(std::io::BufWriter::new(fs::File::create(path)?))
}

fn cmd_estimate(ctx: &Context, args: &EstimateArgs) -> std::result::Result<i32, Failure> {
    let spec = &ctx.spec;
    let a = coefficients(args.a.clone().or_else(|| ctx.cfg.a.clone()), spec, "a")?;
    let w = match args.w.clone().or_else(|| ctx.cfg.w.clone()) {
        Some(w) => coefficients(Some(w), spec, "w")?,
        None => a.clone(),
    };
    let form: DerivativeForm = args.form.or(ctx.cfg.form).map_or(DerivativeForm::Plain, Into::into);

    let records = RecordSet::simulate(spec, &a, ctx.n_samples, ctx.seed)?;
    let phi = records.phi()?;
    let gradient = records.gradient(form)?;
    let hessian = records.hessian(form)?;
    let kl = records.kl(&w)?;
    let free_energy = if a.iter().all(|&v| v == 0.0) {
        free_energy_from_records(&records, spec.lambda())?
    } else {
        let zero = CoeffVector::zeros(spec.basis_size());
        free_energy_from_records(&RecordSet::simulate(spec, &zero, ctx.n_samples, ctx.seed)?, spec.lambda())?
    };

    write_json(&ctx.out_dir, "phi.json", &phi)?;
    write_json(&ctx.out_dir, "gradient.json", &gradient)?;
    write_json(&ctx.out_dir, "hessian.json", &hessian)?;
    write_json(&ctx.out_dir, "kl.json", &kl)?;
    write_json(&ctx.out_dir, "free_energy.json", &free_energy)?;
    if args.dump_paths || ctx.cfg.dump_paths == Some(true) {
        write_records_csv(records.records(), create(&ctx.out_dir, "paths.csv")?)?;
    }
    println!("phi = {:.6} ± {:.6} (n = {})", phi.mean, phi.std_error, phi.n_samples);
    println!("gradient = {:?}", gradient.values());
    Ok(EXIT_OK)
}

fn optimizer_settings(ctx: &Context, args: &OptimizeArgs) -> OptimizerSettings {
    let cfg = &ctx.cfg;
    let mut s = OptimizerSettings::new(ctx.n_samples, ctx.seed);
    if let Some(v) = args.max_iter.or(cfg.max_iter) {
        s.max_iter = v;
    }
    if let Some(v) = args.grad_tol.or(cfg.grad_tol) {
        s.grad_tol = v;
    }
    if let Some(v) = args.form.or(cfg.form) {
        s.form = v.into();
    }
    if let Some(v) = args.line_search.or(cfg.line_search) {
        s.line_search = match v {
            LineSearchArg::Reweight => LineSearch::Reweight,
            LineSearchArg::Resimulate => LineSearch::Resimulate,
        };
    }
    s.ridge_floor = args.ridge_floor.or(cfg.ridge_floor);
    s.fresh_samples = args.fresh_samples || cfg.fresh_samples == Some(true);
    s
}

fn write_trace(dir: &Path, trace: &OptTrace) -> Result<()> {
    trace.write_csv(create(dir, "trace.csv")?)?;
    write_json(dir, "trace.json", trace)
}

fn cmd_optimize(ctx: &Context, args: &OptimizeArgs) -> std::result::Result<i32, Failure> {
    let method = args
        .method
        .or(ctx.cfg.method)
        .ok_or_else(|| usage("--method is required (gd or newton)"))?;
    let a0 = coefficients(args.a0.clone().or_else(|| ctx.cfg.a0.clone()), &ctx.spec, "a0")?;
    let settings = optimizer_settings(ctx, args);
    let trace = match method {
        MethodArg::Gd => gradient_descent(&ctx.spec, &a0, &settings)?,
        MethodArg::Newton => newton(&ctx.spec, &a0, &settings)?,
    };
    write_trace(&ctx.out_dir, &trace)?;
    println!(
        "{:?} after {} iterates: a = {:?}, |grad| = {:.3e}",
        trace.termination,
        trace.iterates.len(),
        &trace.final_iterate()[..],
        trace.final_grad_norm()
    );
    Ok(EXIT_OK)
}

fn cmd_verify(ctx: &Context, g: &GlobalArgs, args: &VerifyArgs) -> std::result::Result<i32, Failure> {
    let suite = match args.suite.or(ctx.cfg.suite).unwrap_or(SuiteArg::All) {
        SuiteArg::Nonconvexity => Suite::Nonconvexity,
        SuiteArg::ExitLaw => Suite::ExitLaw,
        SuiteArg::Identities => Suite::Identities,
        SuiteArg::Gradient => Suite::Gradient,
        SuiteArg::All => Suite::All,
    };
    let mut settings = SuiteSettings::new(ctx.seed);
    if let Some(text) = args.b_grid.clone().or_else(|| ctx.cfg.b_grid.clone()) {
        settings.b_grid = parse_grid(&text).map_err(|e| usage(e.to_string()))?;
    }
    if g.n_samples.or(ctx.cfg.n_samples).is_some() {
        settings.n_samples = ctx.n_samples;
    }
    if let Some(dt) = g.dt.or(ctx.cfg.dt) {
        settings.dt = dt;
    }
    if let Some(bridge) = g.bridge.or(ctx.cfg.bridge) {
        settings.bridge = bridge;
    }

    let mut report = VerifyReport::default();
    let all = suite == Suite::All;
    if all || suite == Suite::Nonconvexity {
        let (r, rows) = verify::nonconvexity_suite(&settings)?;
        verify::write_sweep_csv(&rows, create(&ctx.out_dir, "q_sweep.csv")?)?;
        report.extend(r);
    }
    if all || suite == Suite::ExitLaw {
        report.extend(verify::exit_law_suite(&settings)?);
    }
    if all || suite == Suite::Identities {
        report.extend(verify::identities_suite(&settings)?);
    }
    if all || suite == Suite::Gradient {
        report.extend(verify::gradient_suite(&settings)?);
    }
    report.write_json(&ctx.out_dir.join("verify_report.json"))?;
    for c in &report.checks {
        println!(
            "{} {} value={:.6} oracle={:.6} tol={:.3e}",
            if c.pass { "PASS" } else { "FAIL" },
            c.check_name,
            c.value,
            c.oracle,
            c.tolerance
        );
    }
    Ok(if report.all_pass() { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn cmd_sweep(ctx: &Context, g: &GlobalArgs, args: &SweepArgs) -> std::result::Result<i32, Failure> {
    let over = args
        .over
        .or(ctx.cfg.sweep_over)
        .ok_or_else(|| usage("--over is required (b, lambda or dt)"))?;
    let text = args
        .grid
        .clone()
        .or_else(|| ctx.cfg.grid.clone())
        .ok_or_else(|| usage("--grid is required"))?;
    let grid = parse_grid(&text).map_err(|e| usage(e.to_string()))?;
    let form: DerivativeForm = args.form.or(ctx.cfg.form).map_or(DerivativeForm::Plain, Into::into);
    let a_values = args.a.clone().or_else(|| ctx.cfg.a.clone());
    let a = coefficients(a_values, &ctx.spec, "a")?;

    let mut out = csv::Writer::from_writer(create(&ctx.out_dir, "sweep.csv")?);
    let n = ctx.spec.basis_size();
    let mut header = vec![sweep_name(over).to_string(), "phi_mean".into(), "phi_se".into()];
    for k in 0..n {
        header.push(format!("grad_{k}"));
        header.push(format!("grad_{k}_se"));
    }
    out.write_record(&header).map_err(Error::from)?;
    for &value in &grid {
        let spec = match over {
            SweepParam::B => {
                let problem = g.problem.clone().or_else(|| ctx.cfg.problem.clone());
                if problem.as_deref().is_some_and(|p| p != "brownian-exit") {
                    return Err(usage("--over b applies to the brownian-exit builtin"));
                }
                let mut spec = crate::problems::brownian_exit(value)?;
                if let Some(dt) = g.dt.or(ctx.cfg.dt) {
                    spec = spec.with_dt(dt)?;
                }
                if let Some(t_max) = g.t_max.or(ctx.cfg.t_max) {
                    spec = spec.with_t_max(t_max)?;
                }
                if let Some(bridge) = g.bridge.or(ctx.cfg.bridge) {
                    spec = spec.with_bridge(bridge);
                }
                if let Some(lambda) = g.lambda.or(ctx.cfg.lambda) {
                    spec = spec.with_lambda(lambda)?;
                }
                spec
            }
            SweepParam::Lambda => ctx.spec.with_lambda(value)?,
            SweepParam::Dt => ctx.spec.with_dt(value)?,
        };
        let records = RecordSet::simulate(&spec, &a, ctx.n_samples, ctx.seed)?;
        let phi = records.phi()?;
        let grad = records.gradient(form)?;
        let mut row = vec![value.to_string(), phi.mean.to_string(), phi.std_error.to_string()];
        for k in 0..n {
            row.push(grad.get(k).to_string());
            row.push(grad.std_errors()[k].to_string());
        }
        out.write_record(&row).map_err(Error::from)?;
        println!("{}={value}: phi = {:.6} ± {:.6}", sweep_name(over), phi.mean, phi.std_error);
    }
    out.flush().map_err(Error::from)?;
    Ok(EXIT_OK)
}

fn sweep_name(p: SweepParam) -> &'static str {
    match p {
        SweepParam::B => "b",
        SweepParam::Lambda => "lambda",
        SweepParam::Dt => "dt",
    }
}

fn dispatch(cli: &Cli) -> std::result::Result<i32, Failure> {
    let cfg = match &cli.global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let threads = cli.global.threads.or(cfg.threads).unwrap_or(0);
    let default_problem = match &cli.command {
        Command::Verify(_) | Command::Sweep(_) => "brownian-exit",
        _ => "double-well",
    };
    let ctx = context(&cli.global, cfg, default_problem)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure {
            code: EXIT_RUNTIME,
            message: format!("cannot start worker pool: {e}"),
        })?;
    info!("{} worker threads", pool.current_num_threads());
    pool.install(|| match &cli.command {
        Command::Estimate(a) => cmd_estimate(&ctx, a),
        Command::Optimize(a) => cmd_optimize(&ctx, a),
        Command::Verify(a) => cmd_verify(&ctx, &cli.global, a),
        Command::Sweep(a) => cmd_sweep(&ctx, &cli.global, a),
    })
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(f) => {
            if f.code == EXIT_USAGE {
                let _ = Cli::command()
                    .error(clap::error::ErrorKind::MissingRequiredArgument, &f.message)
                    .print();
            } else {
                eprintln!("error: {}", f.message);
            }
            f.code
        }
    }
}
