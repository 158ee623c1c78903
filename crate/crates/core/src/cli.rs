//! Batch command-line front end.
//!
//! Exit codes: 0 success, 1 domain failure (validation, solver breakdown or
//! a failed identity check), 2 usage or parse error.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::control::{Policy, SeparatedController, ZeroPolicy};
use crate::model::{validate_assumptions, ModelError};
use crate::odesolve::{solve_gain_tables, GainTables, TimeGrid};
use crate::scenarios::{builtin, load_scenario, save_results, Scenario, ScenarioError};
use crate::sim::{mc_run, variance_ratio, CostReport, McConfig, McOutput};
use crate::Error;

/// Index of the first machine's angular velocity in the machines state.
const MACHINE1_VELOCITY: usize = 2;
const BOOTSTRAP_RESAMPLES: usize = 2000;

#[derive(Debug, Parser)]
#[command(name = "cmflq", version, about = "Conditional mean-field LQ control under partial observation and regime switching")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a problem against the standing assumptions.
    Validate {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        dt: Option<f64>,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Solve the coupled Riccati systems and write the gain tables.
    Solve {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Closed-loop Monte Carlo with trajectories and a cost report.
    Simulate {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        mc: McArgs,
        /// Number of realizations written as trajectory CSVs.
        #[arg(long, default_value_t = 1)]
        keep: usize,
        /// Simulate with zero control instead of the separated controller.
        #[arg(long)]
        no_control: bool,
    },
    /// Full output bundle of a built-in scenario.
    Reproduce {
        /// `example-1d` or `machines`.
        name: String,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        mc: McArgs,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct Source {
    /// Scenario JSON file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in scenario name.
    #[arg(long)]
    pub scenario: Option<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Grid step; defaults to the scenario's recommendation.
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Also print the main result as JSON on stdout.
    #[arg(long)]
    pub json: bool,
    /// Record the wall-clock time in the manifest.
    #[arg(long)]
    pub timestamp: bool,
}

#[derive(Debug, Args)]
pub struct McArgs {
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub noise: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    pub threads: Option<usize>,
}

/// Written next to every output set.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub scenario: String,
    pub config: Option<String>,
    pub step: f64,
    pub chain_paths: Option<usize>,
    pub noise_draws: Option<usize>,
    pub seed: Option<u64>,
    pub out: String,
    pub version: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

/// One pass/fail identity in a run summary.
#[derive(Debug, Clone, Serialize)]
pub struct IdentityCheck {
    pub name: String,
    pub difference: f64,
    pub combined_se: f64,
    /// Standard error of the difference paired by chain path.
    pub paired_se: f64,
    pub pass: bool,
}

/// `J_P - J_F - J_err` and, when available, `J_P - V_P`, each against
/// three combined standard errors.
pub fn identity_checks(r: &CostReport) -> Vec<IdentityCheck> {
    let mut out = vec![{
        let se = (r.j_p.se.powi(2) + r.j_f.se.powi(2) + r.j_err.se.powi(2)).sqrt();
        IdentityCheck {
            name: "decomposition".into(),
            difference: r.gap.mean,
            combined_se: se,
            paired_se: r.gap.se,
            pass: r.gap.mean.abs() < 3.0 * se,
        }
    }];
    if let (Some(v), Some(gap)) = (r.v_p_theory, r.theory_gap) {
        let se = (r.j_p.se.powi(2) + v.se.powi(2)).sqrt();
        out.push(IdentityCheck {
            name: "theory".into(),
            difference: gap.mean,
            combined_se: se,
            paired_se: gap.se,
            pass: gap.mean.abs() < 3.0 * se,
        });
    }
    out
}

enum Failure {
    Usage(String),
    Domain(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Model(m) => model_failure(m),
            Error::Scenario(ScenarioError::Model(m)) => model_failure(m),
            Error::Scenario(ScenarioError::Unknown(n)) => Failure::Usage(format!("unknown scenario `{n}`")),
            other => Failure::Domain(other.to_string()),
        }
    }
}

fn model_failure(m: ModelError) -> Failure {
    match m {
        ModelError::Parse(_) | ModelError::Schema { .. } => Failure::Usage(m.to_string()),
        other => Failure::Domain(other.to_string()),
    }
}

macro_rules! fail {
    ($e:expr) => {
        Failure::from(Error::from($e))
    };
}

/// Parse `std::env::args` and run; returns the process exit code.
pub fn run_from_env() -> i32 {
    match Cli::try_parse() {
        Ok(cli) => run(cli),
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            code
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Domain(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

fn load(source: &Source) -> Result<(Scenario, Option<String>), Failure> {
    match (&source.config, &source.scenario) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            Ok((load_scenario(&text).map_err(|e| fail!(e))?, Some(path.display().to_string())))
        }
        (None, Some(name)) => Ok((builtin(name).map_err(|e| fail!(e))?, None)),
        (None, None) => Err(Failure::Usage("one of --config or --scenario is required".into())),
    }
}

fn grid_for(s: &Scenario, dt: Option<f64>) -> Result<TimeGrid, Failure> {
    TimeGrid::new(s.spec.horizon, dt.unwrap_or(s.step)).map_err(|e| Failure::Usage(e.to_string()))
}

fn require_valid(s: &Scenario, grid: &TimeGrid) -> Result<(), Failure> {
    let report = validate_assumptions(&s.spec, grid.step());
    if report.passes {
        return Ok(());
    }
    let first = &report.violations[0];
    Err(Failure::Domain(format!("assumption {} violated: {}", first.assumption, first.detail)))
}

fn with_pool<T>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, Failure>
where
    T: Send,
{
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    let pool = b.build().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(pool.install(f))
}

fn prepare_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| fail!(e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), Failure> {
    save_results(value, path).map_err(|e| fail!(e))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    Ok(BufWriter::new(File::create(path).map_err(|e| fail!(e))?))
}

fn write_gains(g: &GainTables, dir: &Path) -> Result<(), Failure> {
    for (series, name) in [(&g.lambda, "lambda"), (&g.gamma, "gamma"), (&g.phi, "phi")] {
        series.write_csv(create(&dir.join(format!("{name}.csv")))?, name, name == "phi").map_err(|e| fail!(e))?;
    }
    Ok(())
}

fn write_trajectories(out: &McOutput, dir: &Path, prefix: &str) -> Result<(), Failure> {
    for (i, t) in out.trajectories.iter().enumerate() {
        t.write_csv(create(&dir.join(format!("{prefix}trajectory_{i:04}.csv")))?).map_err(|e| fail!(e))?;
        t.path.write_csv(create(&dir.join(format!("{prefix}chain_path_{i:04}.csv")))?).map_err(|e| fail!(e))?;
    }
    Ok(())
}

fn now() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn manifest(command: &str, s: &Scenario, config: Option<String>, grid: &TimeGrid, run: &RunArgs, mc: Option<(&McConfig, u64)>) -> RunManifest {
    RunManifest {
        command: command.into(),
        scenario: s.name.clone(),
        config,
        step: grid.step(),
        chain_paths: mc.map(|m| m.0.chain_paths),
        noise_draws: mc.map(|m| m.0.noise_draws),
        seed: mc.map(|m| m.1),
        out: run.out.display().to_string(),
        version: env!("CARGO_PKG_VERSION"),
        timestamp: run.timestamp.then(now),
    }
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn dispatch(cmd: Command) -> Result<i32, Failure> {
    match cmd {
        Command::Validate { source, dt, json } => {
            let (s, _) = load(&source)?;
            let grid = grid_for(&s, dt)?;
            let report = validate_assumptions(&s.spec, grid.step());
            if json {
                print_json(&report);
            } else {
                println!("{}: {}", s.name, if report.passes { "assumptions hold" } else { "assumptions violated" });
                println!("delta1 = {}, delta2 = {}", report.delta1, report.delta2);
                for v in &report.violations {
                    let regime = v.regime.map(|r| format!(" regime {r}")).unwrap_or_default();
                    let time = v.time.map(|t| format!(" t = {t}")).unwrap_or_default();
                    println!("  {}{regime}{time}: {}", v.assumption, v.detail);
                }
            }
            Ok(if report.passes { 0 } else { 1 })
        }
        Command::Solve { source, run } => {
            let (s, config) = load(&source)?;
            let grid = grid_for(&s, run.dt)?;
            require_valid(&s, &grid)?;
            let gains = solve_gain_tables(&s.spec, &grid).map_err(|e| fail!(e))?;
            prepare_out(&run.out)?;
            write_gains(&gains, &run.out)?;
            write_json(&manifest("solve", &s, config, &grid, &run, None), &run.out.join("manifest.json"))?;
            if run.json {
                print_json(&serde_json::json!({ "nodes": grid.nodes(), "regimes": s.spec.regimes(), "out": run.out }));
            }
            Ok(0)
        }
        Command::Simulate { source, run, mc, keep, no_control } => {
            let (s, config) = load(&source)?;
            let grid = grid_for(&s, run.dt)?;
            require_valid(&s, &grid)?;
            let cfg = McConfig {
                keep,
                theory: !no_control,
                ..McConfig::new(mc.paths.unwrap_or(s.chain_paths), mc.noise.unwrap_or(s.noise_draws), mc.seed)
            };
            let out = with_pool(mc.threads, || -> Result<McOutput, Error> {
                let gains = solve_gain_tables(&s.spec, &grid)?;
                Ok(if no_control {
                    mc_run(&s.spec, &gains, &ZeroPolicy::new(&s.spec.dims), &cfg)?
                } else {
                    mc_run(&s.spec, &gains, &SeparatedController::new(&s.spec, &gains), &cfg)?
                })
            })?
            .map_err(Failure::from)?;
            prepare_out(&run.out)?;
            write_trajectories(&out, &run.out, "")?;
            write_json(&out, &run.out.join("cost_report.json"))?;
            write_json(&identity_checks(&out.report), &run.out.join("checks.json"))?;
            write_json(&manifest("simulate", &s, config, &grid, &run, Some((&cfg, mc.seed))), &run.out.join("manifest.json"))?;
            if run.json {
                print_json(&out.report);
            }
            Ok(0)
        }
        Command::Reproduce { name, run, mc } => match name.as_str() {
            "example-1d" => reproduce_example(run, mc),
            "machines" => reproduce_machines(run, mc),
            other => Err(Failure::Usage(format!("unknown scenario `{other}`"))),
        },
    }
}

fn reproduce_example(run: RunArgs, mc: McArgs) -> Result<i32, Failure> {
    let s = builtin("example-1d").map_err(|e| fail!(e))?;
    let grid = grid_for(&s, run.dt)?;
    require_valid(&s, &grid)?;
    let cfg = McConfig {
        keep: 3,
        theory: true,
        ..McConfig::new(mc.paths.unwrap_or(s.chain_paths), mc.noise.unwrap_or(s.noise_draws), mc.seed)
    };
    let (gains, out) = with_pool(mc.threads, || -> Result<_, Error> {
        let gains = solve_gain_tables(&s.spec, &grid)?;
        let out = mc_run(&s.spec, &gains, &SeparatedController::new(&s.spec, &gains), &cfg)?;
        Ok((gains, out))
    })?
    .map_err(Failure::from)?;
    prepare_out(&run.out)?;
    write_gains(&gains, &run.out)?;
    write_trajectories(&out, &run.out, "")?;
    write_json(&out, &run.out.join("cost_report.json"))?;
    let checks = identity_checks(&out.report);
    write_json(&checks, &run.out.join("checks.json"))?;
    write_json(&manifest("reproduce", &s, None, &grid, &run, Some((&cfg, mc.seed))), &run.out.join("manifest.json"))?;
    if run.json {
        print_json(&out.report);
    }
    report_checks(&checks)
}

fn report_checks(checks: &[IdentityCheck]) -> Result<i32, Failure> {
    for c in checks {
        eprintln!(
            "{}: {} difference {:.6} (combined se {:.6})",
            if c.pass { "ok" } else { "FAILED" },
            c.name,
            c.difference,
            c.combined_se
        );
    }
    Ok(if checks.iter().all(|c| c.pass) { 0 } else { 1 })
}

fn write_ensemble(series: &[Vec<f64>], grid: &TimeGrid, path: &Path) -> Result<(), Failure> {
    let mut wtr = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["t".to_string()];
    header.extend((1..=series.len()).map(|i| format!("r{i}")));
    wtr.write_record(&header).map_err(|e| fail!(e))?;
    for k in 0..grid.nodes() {
        let mut row = vec![grid.time(k).to_string()];
        row.extend(series.iter().map(|s| s[k].to_string()));
        wtr.write_record(&row).map_err(|e| fail!(e))?;
    }
    wtr.flush().map_err(|e| fail!(e))
}

#[derive(Serialize)]
struct MachinesComparison {
    component: &'static str,
    realizations: usize,
    /// Uncontrolled over controlled time-averaged cross-realization variance.
    variance_ratio: crate::sim::VarianceRatio,
    pass: bool,
}

fn reproduce_machines(run: RunArgs, mc: McArgs) -> Result<i32, Failure> {
    let s = builtin("machines").map_err(|e| fail!(e))?;
    let grid = grid_for(&s, run.dt)?;
    require_valid(&s, &grid)?;
    let cfg = McConfig {
        keep: 1,
        track_component: Some(MACHINE1_VELOCITY),
        ..McConfig::new(mc.paths.unwrap_or(s.chain_paths), mc.noise.unwrap_or(s.noise_draws), mc.seed)
    };
    let (gains, controlled, free) = with_pool(mc.threads, || -> Result<_, Error> {
        let gains = solve_gain_tables(&s.spec, &grid)?;
        let ctl = SeparatedController::new(&s.spec, &gains);
        let controlled = mc_run(&s.spec, &gains, &ctl as &dyn Policy, &cfg)?;
        let free = mc_run(&s.spec, &gains, &ZeroPolicy::new(&s.spec.dims), &cfg)?;
        Ok((gains, controlled, free))
    })?
    .map_err(Failure::from)?;
    let ratio = variance_ratio(&free.tracked, &controlled.tracked, BOOTSTRAP_RESAMPLES, mc.seed);
    let comparison = MachinesComparison {
        component: "X_3",
        realizations: controlled.tracked.len(),
        pass: ratio.lower_5pct > 1.0,
        variance_ratio: ratio,
    };
    prepare_out(&run.out)?;
    write_gains(&gains, &run.out)?;
    write_trajectories(&controlled, &run.out, "controlled_")?;
    write_trajectories(&free, &run.out, "uncontrolled_")?;
    write_ensemble(&controlled.tracked, &grid, &run.out.join("velocity1_controlled.csv"))?;
    write_ensemble(&free.tracked, &grid, &run.out.join("velocity1_uncontrolled.csv"))?;
    write_json(&controlled, &run.out.join("cost_report_controlled.json"))?;
    write_json(&free, &run.out.join("cost_report_uncontrolled.json"))?;
    write_json(&comparison, &run.out.join("comparison.json"))?;
    let checks = identity_checks(&controlled.report);
    write_json(&checks, &run.out.join("checks.json"))?;
    write_json(&manifest("reproduce", &s, None, &grid, &run, Some((&cfg, mc.seed))), &run.out.join("manifest.json"))?;
    if run.json {
        print_json(&comparison);
    }
    eprintln!(
        "variance ratio {:.4} (5th percentile {:.4})",
        comparison.variance_ratio.ratio, comparison.variance_ratio.lower_5pct
    );
    let code = report_checks(&checks)?;
    Ok(if comparison.pass { code } else { 1 })
}
