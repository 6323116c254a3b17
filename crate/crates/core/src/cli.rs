//! The `nleval` command line.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::{DmProcess, ExperimentConfig, FixedPointDriver};
use crate::decomposition::{check_uniform_bounds, default_schedule, doob_meyer, energy_moments, LevelStats};
use crate::error::{Error, Result};
use crate::evaluation::{check_axioms, check_domination, Evaluation};
use crate::fixed_point::{solve_e_bsde, EDrivenProblem, PicardTrace};
use crate::generator::check_a1_on;
use crate::modulus::check_modulus;
use crate::report::ValidationReport;
use crate::representation::{
    quick_recover, recover_generator_with, verify_representation, RecoveryGrid, RecoveryOptions, Tabulation,
};
use crate::solver::{solve_node, IntegrandK, SolverSettings};
use crate::tree::{AdaptedProcess, BinomialTree, LatticeStoppingTime};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PROPERTY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "nleval",
    version,
    about = "Nonlinear evaluations and BSDEs on a binomial lattice"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Solve the configured BSDE and export the solution.
    Solve,
    /// Run the axiom, domination and (A1) checks.
    Properties,
    /// Doob-Meyer decomposition by penalization.
    Dm,
    /// Picard iteration for an evaluation-driven BSDE.
    Fixedpoint,
    /// Recover a hidden generator from its evaluation.
    Recover,
    /// Resolution-doubling convergence study of Y_0.
    Convergence,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Self::Solve => "solve",
            Self::Properties => "properties",
            Self::Dm => "dm",
            Self::Fixedpoint => "fixedpoint",
            Self::Recover => "recover",
            Self::Convergence => "convergence",
        }
    }
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    engine: &'static str,
    version: &'static str,
    command: &'static str,
    config_hash: &'a str,
    seed: u64,
    passed: bool,
    result: T,
}

struct Ctx {
    cfg: ExperimentConfig,
    hash: String,
    out: PathBuf,
    command: Command,
}

impl Ctx {
    fn write_json<T: Serialize>(&self, name: &str, passed: bool, result: T) -> Result<()> {
        let env = Envelope {
            engine: "nleval",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command.name(),
            config_hash: &self.hash,
            seed: self.cfg.seed,
            passed,
            result,
        };
        let mut text = serde_json::to_string_pretty(&env).map_err(|e| Error::Io(e.into()))?;
        text.push('\n');
        fs::write(self.out.join(name), text)?;
        Ok(())
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }

    fn csv(&self, name: &str) -> Result<csv::Writer<BufWriter<File>>> {
        Ok(csv::Writer::from_writer(self.create(name)?))
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(true) => EXIT_OK,
        Ok(false) => {
            eprintln!("nleval {}: property check failed, see report", cli.command.name());
            EXIT_PROPERTY
        }
        Err(Error::Config(msg)) => {
            eprintln!("nleval: invalid config: {msg}");
            EXIT_CONFIG
        }
        Err(e) => {
            eprintln!("nleval {}: {e}", cli.command.name());
            EXIT_NUMERICAL
        }
    }
}

fn execute(cli: &Cli) -> Result<bool> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        // a pool may already exist when several commands share a process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    fs::create_dir_all(&cfg.output_dir)?;
    let ctx = Ctx {
        hash: cfg.hash(),
        out: cfg.output_dir.clone(),
        cfg,
        command: cli.command,
    };
    match cli.command {
        Command::Solve => run_solve(&ctx),
        Command::Properties => run_properties(&ctx),
        Command::Dm => run_dm(&ctx),
        Command::Fixedpoint => run_fixedpoint(&ctx),
        Command::Recover => run_recover(&ctx),
        Command::Convergence => run_convergence(&ctx),
    }
}

fn settings(cfg: &ExperimentConfig) -> SolverSettings {
    SolverSettings {
        tolerance: cfg.solver.tolerance,
        max_iterations: cfg.solver.max_iterations,
    }
}

fn solve_on(cfg: &ExperimentConfig, tree: &BinomialTree) -> Result<crate::solver::Solution> {
    let g = cfg.generator()?;
    let terminal = cfg.terminal.process(tree)?;
    let k = IntegrandK::constant(tree, cfg.solver.gamma)?;
    let tau = LatticeStoppingTime::deterministic(tree, 0, tree.steps())?;
    solve_node(tree, &g, &terminal, &k, &tau, &settings(cfg))
}

#[derive(Serialize)]
struct SolveSummary {
    steps: usize,
    horizon: f64,
    y0: f64,
    z0: f64,
    max_defect: f64,
    residual: f64,
    max_iterations_used: usize,
}

fn run_solve(ctx: &Ctx) -> Result<bool> {
    let tree = ctx.cfg.build_tree()?;
    let sol = solve_on(&ctx.cfg, &tree)?;
    sol.write_csv(&tree, ctx.create("solution.csv")?)?;
    let summary = SolveSummary {
        steps: tree.steps(),
        horizon: tree.horizon(),
        y0: sol.y0(),
        z0: sol.z.get(0, 0),
        max_defect: sol.defect.sup_norm(0, tree.steps()),
        residual: sol.residual,
        max_iterations_used: sol.max_iterations_used,
    };
    ctx.write_json("solve.json", true, summary)?;
    Ok(true)
}

fn run_properties(ctx: &Ctx) -> Result<bool> {
    let cfg = &ctx.cfg;
    let tree = cfg.build_tree()?;
    let g = cfg.generator()?;
    let e = cfg.evaluation(tree)?;
    let p = &cfg.properties;
    let reports: Vec<ValidationReport> = vec![
        check_axioms(&e, p.trials, cfg.seed)?,
        check_domination(&e, p.trials, cfg.seed.wrapping_add(1))?,
        check_a1_on(&g, p.a1_samples, p.a1_radius, tree.horizon(), cfg.seed.wrapping_add(2)),
        check_modulus(g.phi()),
    ];
    let mut w = ctx.csv("properties.csv")?;
    w.write_record(["subject", "check", "passed", "worst_violation", "samples", "witness"])?;
    for r in &reports {
        for c in &r.checks {
            w.write_record(&[
                r.subject.clone(),
                c.name.clone(),
                c.passed.to_string(),
                c.worst_violation.to_string(),
                c.samples.to_string(),
                c.witness.clone().unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    let passed = reports.iter().all(ValidationReport::passed);
    let failing: Vec<String> = reports
        .iter()
        .flat_map(|r| r.failing().into_iter().map(move |c| format!("{}/{c}", r.subject)))
        .collect();
    #[derive(Serialize)]
    struct Out<'a> {
        failing: Vec<String>,
        reports: &'a [ValidationReport],
    }
    ctx.write_json(
        "properties.json",
        passed,
        Out {
            failing,
            reports: &reports,
        },
    )?;
    Ok(passed)
}

fn run_dm(ctx: &Ctx) -> Result<bool> {
    let cfg = &ctx.cfg;
    let tree = cfg.build_tree()?;
    let e = cfg.evaluation(tree)?;
    let tau = LatticeStoppingTime::deterministic(&tree, 0, tree.steps())?;
    let y = match cfg.dm.process {
        DmProcess::OneMinusT => AdaptedProcess::from_fn(&tree, |k, _| 1.0 - tree.time(k)),
        DmProcess::Solved => {
            let terminal = cfg.terminal.process(&tree)?;
            let k = IntegrandK::constant(&tree, cfg.dm.gamma)?;
            solve_node(&tree, &cfg.generator()?, &terminal, &k, &tau, &settings(cfg))?.y
        }
    };
    let schedule = cfg
        .dm
        .schedule
        .clone()
        .unwrap_or_else(|| default_schedule(&tree, e.declared_mu()));
    let (result, reached) = match doob_meyer(&e, &y, &tau, &schedule, cfg.dm.target_residual) {
        Ok(r) => (r, true),
        Err(Error::ToleranceNotReached { result, .. }) => (*result, false),
        Err(err) => return Err(err),
    };
    let bounds = check_uniform_bounds(&tree, &result.iterates, cfg.dm.bound_factor)?;
    let mut w = ctx.csv("dm_levels.csv")?;
    w.write_record(["n", "residual", "z_energy", "a_square", "monotonicity_slack"])?;
    for l in &bounds.levels {
        w.write_record(&[
            l.n.to_string(),
            l.residual.to_string(),
            l.z_energy.to_string(),
            l.a_square.to_string(),
            l.monotonicity_slack.to_string(),
        ])?;
    }
    w.flush()?;
    let last = result.iterates.last().unwrap();
    let (z_energy, a_square) = energy_moments(&tree, last);
    let passed = reached && result.checks.passed() && bounds.report.passed();
    #[derive(Serialize)]
    struct Out<'a> {
        target_residual: f64,
        reached: bool,
        residual: f64,
        levels_used: &'a [f64],
        z_energy: f64,
        a_square: f64,
        levels: &'a [LevelStats],
        checks: &'a ValidationReport,
        uniform_bounds: &'a ValidationReport,
    }
    ctx.write_json(
        "dm.json",
        passed,
        Out {
            target_residual: cfg.dm.target_residual,
            reached,
            residual: result.residual,
            levels_used: &result.levels_used,
            z_energy,
            a_square,
            levels: &bounds.levels,
            checks: &result.checks,
            uniform_bounds: &bounds.report,
        },
    )?;
    Ok(passed)
}

fn run_fixedpoint(ctx: &Ctx) -> Result<bool> {
    let cfg = &ctx.cfg;
    let tree = cfg.build_tree()?;
    let e = cfg.evaluation(tree)?;
    let fp = &cfg.fixedpoint;
    let lambda = fp.lambda;
    let f: Box<dyn Fn(f64, f64) -> f64 + Send + Sync> = match fp.f {
        FixedPointDriver::Linear => Box::new(move |_, y| lambda * y),
        FixedPointDriver::Abs => Box::new(move |_, y| lambda * y.abs()),
        FixedPointDriver::Sin => Box::new(move |_, y| lambda * y.sin()),
    };
    let problem = EDrivenProblem::at_horizon(e, f, lambda, &cfg.terminal.layer(&tree))?;
    let (y, trace) = solve_e_bsde(&problem, fp.tol)?;
    let mut w = ctx.csv("picard.csv")?;
    w.write_record(["piece", "from", "to", "sweep", "change"])?;
    for (i, piece) in trace.pieces.iter().enumerate() {
        for (s, c) in piece.changes.iter().enumerate() {
            w.write_record(&[
                i.to_string(),
                piece.from.to_string(),
                piece.to.to_string(),
                (s + 1).to_string(),
                c.to_string(),
            ])?;
        }
    }
    w.flush()?;
    let passed = trace.defect <= 10.0 * fp.tol + 1e-12;
    #[derive(Serialize)]
    struct Out<'a> {
        y0: f64,
        lambda: f64,
        tol: f64,
        trace: &'a PicardTrace,
    }
    ctx.write_json(
        "fixedpoint.json",
        passed,
        Out {
            y0: y.get(0, 0),
            lambda,
            tol: fp.tol,
            trace: &trace,
        },
    )?;
    Ok(passed)
}

#[derive(Serialize)]
struct RecoveryRow {
    steps: usize,
    max_error: f64,
    quick_gap: f64,
    verify: ValidationReport,
    a1: ValidationReport,
}

fn run_recover(ctx: &Ctx) -> Result<bool> {
    let cfg = &ctx.cfg;
    let rc = &cfg.recover;
    let hidden = cfg.generator()?;
    let resolutions = rc
        .resolutions
        .clone()
        .unwrap_or_else(|| vec![cfg.tree.steps, 2 * cfg.tree.steps]);
    let opts = RecoveryOptions {
        barrier: rc.barrier,
        tabulation: if rc.interval_average {
            Tabulation::IntervalAverage
        } else {
            Tabulation::BasePoint
        },
        raw_only: false,
        window_steps: (rc.window > 0).then_some(rc.window),
    };
    let ys = RecoveryGrid::points(rc.y.lo, rc.y.hi, rc.y.count);
    let zs = RecoveryGrid::points(rc.z.lo, rc.z.hi, rc.z.count);
    let mut rows = Vec::new();
    for &n in &resolutions {
        let tree = BinomialTree::new(cfg.tree.horizon, n)?;
        let e: Evaluation = cfg.evaluation(tree)?.into_black_box();
        let grid = RecoveryGrid::dyadic(&tree, rc.level, ys.clone(), zs.clone())?;
        let rec = recover_generator_with(&e, &grid, &opts)?;
        rec.write_csv(ctx.create(&format!("recovered_{n}.csv"))?)?;
        let truth = |t: f64, y: f64, z: f64| hidden.eval(t, y, z);
        let max_error = rec.max_cell_error(truth);
        let mut quick_gap = 0.0_f64;
        let h = 4.min(tree.steps() - grid.time_steps.last().unwrap());
        for c in &rec.cells {
            let q = quick_recover(&e, c.time_step, c.y, c.z, h)?;
            quick_gap = quick_gap.max((q - c.value).abs());
        }
        let verify = verify_representation(
            &e,
            &rec,
            rc.verify_trials,
            cfg.seed,
            rc.verify_factor * max_error.max(1e-12),
        )?;
        let a1 = rec.check_a1(rc.a1_samples, cfg.seed)?;
        rows.push(RecoveryRow {
            steps: n,
            max_error,
            quick_gap,
            verify,
            a1,
        });
    }
    let mut w = ctx.csv("recover_errors.csv")?;
    w.write_record(["steps", "max_error", "quick_gap", "verify_gap", "a1_passed"])?;
    for r in &rows {
        w.write_record(&[
            r.steps.to_string(),
            r.max_error.to_string(),
            r.quick_gap.to_string(),
            r.verify.checks[0].worst_violation.to_string(),
            r.a1.passed().to_string(),
        ])?;
    }
    w.flush()?;
    let errors: Vec<f64> = rows.iter().map(|r| r.max_error).collect();
    let decreasing = errors.windows(2).all(|w| w[1] < w[0]) || errors.iter().all(|&e| e <= 1e-9);
    let passed = decreasing && rows.iter().all(|r| r.verify.passed() && r.a1.passed());
    #[derive(Serialize)]
    struct Out<'a> {
        level: u32,
        error_decreasing: bool,
        resolutions: &'a [RecoveryRow],
    }
    ctx.write_json(
        "recover.json",
        passed,
        Out {
            level: rc.level,
            error_decreasing: decreasing,
            resolutions: &rows,
        },
    )?;
    Ok(passed)
}

fn run_convergence(ctx: &Ctx) -> Result<bool> {
    let cfg = &ctx.cfg;
    let steps = &cfg.convergence.steps;
    let y0_at = |n: usize| -> Result<f64> { solve_on(cfg, &BinomialTree::new(cfg.tree.horizon, n)?).map(|s| s.y0()) };
    let (reference, reference_steps) = match cfg.convergence.reference {
        Some(r) => (r, None),
        None => {
            let n = 8 * steps.last().unwrap();
            (y0_at(n)?, Some(n))
        }
    };
    #[derive(Serialize)]
    struct Row {
        steps: usize,
        dt: f64,
        y0: f64,
        error: f64,
        ratio: Option<f64>,
    }
    let mut rows: Vec<Row> = Vec::new();
    for &n in steps {
        let y0 = y0_at(n)?;
        let error = (y0 - reference).abs();
        let ratio = rows.last().map(|r| r.error / error);
        rows.push(Row {
            steps: n,
            dt: cfg.tree.horizon / n as f64,
            y0,
            error,
            ratio,
        });
    }
    let mut w = ctx.csv("convergence.csv")?;
    w.write_record(["steps", "dt", "y0", "error", "ratio"])?;
    for r in &rows {
        w.write_record(&[
            r.steps.to_string(),
            r.dt.to_string(),
            r.y0.to_string(),
            r.error.to_string(),
            r.ratio.map(|x| x.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    let decreasing = rows.windows(2).all(|w| w[1].error < w[0].error);
    #[derive(Serialize)]
    struct Out<'a> {
        reference: f64,
        reference_steps: Option<usize>,
        strictly_decreasing: bool,
        rows: &'a [Row],
    }
    ctx.write_json(
        "convergence.json",
        decreasing,
        Out {
            reference,
            reference_steps,
            strictly_decreasing: decreasing,
            rows: &rows,
        },
    )?;
    Ok(decreasing)
}
