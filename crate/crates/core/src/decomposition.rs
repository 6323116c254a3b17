//! Doob-Meyer decomposition of evaluation supermartingales by penalization.
//!
//! The increasing process `A^n` has density `gamma = n (Y - y^n)`. Since `A`
//! is path-dependent on a recombining lattice it is stored through that
//! density; path functionals such as `E|A_tau|^2` are computed by backward
//! moment recursions.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluation::Evaluation;
use crate::fixed_point::{piece_steps, solve_e_bsde_with, EDrivenProblem, InitialGuess, PicardOptions};
use crate::report::{ValidationReport, ViolationTracker};
use crate::solver::{last_live_step, solve_node, IntegrandK, NodeFn, Solution, SolverSettings};
use crate::tree::{AdaptedProcess, BinomialTree, LatticeStoppingTime};

pub const DRIVER_BOUND_TOL: f64 = 1e-8;
pub const MONOTONE_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct PenalizationIterate {
    pub n: f64,
    pub y: AdaptedProcess,
    /// Density of `A^n`.
    pub a: IntegrandK,
    pub g: AdaptedProcess,
    pub z: AdaptedProcess,
    /// `sup |Y - y^n|` over live nodes.
    pub residual: f64,
    /// `sup (y^n - Y)`; positive values break `y^n <= Y`.
    pub excess: f64,
    pub tau: LatticeStoppingTime,
}

#[derive(Debug, Clone)]
pub struct DecompositionResult {
    /// Density of the increasing process.
    pub a: IntegrandK,
    pub g: AdaptedProcess,
    pub z: AdaptedProcess,
    pub y: AdaptedProcess,
    pub residual: f64,
    pub residuals: Vec<f64>,
    pub levels_used: Vec<f64>,
    pub iterates: Vec<PenalizationIterate>,
    pub checks: ValidationReport,
}

fn live_nodes(tau: &LatticeStoppingTime) -> Vec<Vec<bool>> {
    let mut reach = tau.reachable();
    for (k, layer) in reach.iter_mut().enumerate() {
        for (j, r) in layer.iter_mut().enumerate() {
            *r = *r && !tau.is_stop_node(k, j);
        }
    }
    reach
}

pub fn penalize(
    e: &Evaluation,
    y_target: &AdaptedProcess,
    tau: &LatticeStoppingTime,
    n: f64,
) -> Result<PenalizationIterate> {
    penalize_from(e, y_target, tau, n, None)
}

/// Penalized BSDE `y_k = E_{k,k+1}[y_{k+1} + n (Y_k - y_k) dt]`, optionally warm-started.
pub fn penalize_from(
    e: &Evaluation,
    y_target: &AdaptedProcess,
    tau: &LatticeStoppingTime,
    n: f64,
    warm: Option<&AdaptedProcess>,
) -> Result<PenalizationIterate> {
    if !(n >= 0.0 && n.is_finite()) {
        return Err(Error::Parameter(format!(
            "penalty level must be finite and nonnegative, got {n}"
        )));
    }
    let tree = *e.tree();
    if n * tree.dt() >= 1.0 {
        return Err(Error::Parameter(format!("n*dt = {} must be below 1", n * tree.dt())));
    }
    let target = y_target.clone();
    let problem = EDrivenProblem::new(
        e.clone(),
        move |k, j, _, y| n * (target.get(k, j) - y),
        n,
        y_target.clone(),
        tau.clone(),
    )?;
    let opts = PicardOptions {
        initial: warm.map_or(InitialGuess::Zero, |w| InitialGuess::Process(w.clone())),
        ..PicardOptions::default()
    };
    let (y, _) = solve_e_bsde_with(&problem, &opts)?;

    let live = live_nodes(tau);
    let dt = tree.dt();
    let mut gamma = AdaptedProcess::zeros(&tree);
    let mut g = AdaptedProcess::zeros(&tree);
    let mut z = AdaptedProcess::zeros(&tree);
    let (mut residual, mut excess) = (0.0_f64, f64::NEG_INFINITY);
    let reach = tau.reachable();
    for k in tau.start()..=tree.steps() {
        for j in 0..=k {
            if !reach[k][j] {
                continue;
            }
            let d = y_target.get(k, j) - y.get(k, j);
            residual = residual.max(d.abs());
            excess = excess.max(-d);
            if !live[k][j] {
                continue;
            }
            let gm = n * d;
            let (down, up) = (y.get(k + 1, j), y.get(k + 1, j + 1));
            gamma.set(k, j, gm);
            z.set(k, j, tree.z_of(down, up));
            g.set(k, j, (y.get(k, j) - 0.5 * (down + up) - gm * dt) / dt);
        }
    }
    Ok(PenalizationIterate {
        n,
        y,
        a: IntegrandK::new(gamma)?,
        g,
        z,
        residual,
        excess: excess.max(0.0),
        tau: tau.clone(),
    })
}

/// Penalty levels `1, 2, 4, ...` for which a single step still contracts,
/// i.e. `n dt e^{mu dt} <= 1/2`.
pub fn default_schedule(tree: &BinomialTree, mu: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut n = 1.0;
    while piece_steps(n, mu, tree.dt(), 1) == 1 {
        out.push(n);
        n *= 2.0;
    }
    out
}

/// Runs the schedule until `sup |Y - y^n| <= target_residual`.
///
/// On success the last iterate's `(A, g, Z)` is returned together with the
/// driver-bound and one-step martingale checks. If the schedule runs out
/// first, the error carries the same result for the caller to inspect.
pub fn doob_meyer(
    e: &Evaluation,
    y_target: &AdaptedProcess,
    tau: &LatticeStoppingTime,
    schedule: &[f64],
    target_residual: f64,
) -> Result<DecompositionResult> {
    if schedule.is_empty() || schedule.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Parameter(
            "schedule must be nonempty and strictly ascending".into(),
        ));
    }
    let mut iterates: Vec<PenalizationIterate> = Vec::new();
    let mut residuals = Vec::new();
    for &n in schedule {
        let warm = iterates.last().map(|it| &it.y);
        let it = penalize_from(e, y_target, tau, n, warm)?;
        residuals.push(it.residual);
        let done = it.residual <= target_residual;
        iterates.push(it);
        if done {
            break;
        }
    }
    let last = iterates.last().unwrap().clone();
    let checks = decomposition_checks(e, y_target, &last)?;
    let result = DecompositionResult {
        a: last.a,
        g: last.g,
        z: last.z,
        y: last.y,
        residual: last.residual,
        levels_used: iterates.iter().map(|it| it.n).collect(),
        residuals: residuals.clone(),
        iterates,
        checks,
    };
    if result.residual > target_residual {
        return Err(Error::ToleranceNotReached {
            target: target_residual,
            residuals,
            result: Box::new(result),
        });
    }
    Ok(result)
}

/// Driver bound `|g| <= mu |Y| + phi(|Z|)` and the one-step identity
/// `E_{k,k+1}[Y_{k+1}; A] = Y_k` up to a few residuals.
fn decomposition_checks(
    e: &Evaluation,
    y_target: &AdaptedProcess,
    it: &PenalizationIterate,
) -> Result<ValidationReport> {
    let tree = *e.tree();
    let (mu, phi) = (e.declared_mu(), e.declared_phi());
    let live = live_nodes(&it.tau);
    let mut bound = ViolationTracker::new("driver_bound", DRIVER_BOUND_TOL);
    let mut mart = ViolationTracker::new("martingale_identity", 3.0 * it.residual + 1e-9);
    for k in it.tau.start()..tree.steps() {
        for j in 0..=k {
            if !live[k][j] {
                continue;
            }
            let (g, z, y) = (it.g.get(k, j), it.z.get(k, j), y_target.get(k, j));
            let v = g.abs() - (mu * y.abs() + phi.value(z.abs()));
            bound.record(v, || format!("|g| = {} exceeds bound at ({k}, {j})", g.abs()));
            let step = e.step_k(
                k,
                j,
                y_target.get(k + 1, j),
                y_target.get(k + 1, j + 1),
                it.a.density(k, j),
            )?;
            let gap = (step - y).abs();
            mart.record(gap, || format!("one-step gap {gap} at ({k}, {j})"));
        }
    }
    let mut report = ValidationReport::new("doob_meyer");
    report.push(bound);
    report.push(mart);
    Ok(report)
}

/// Re-solves `y_k = E[y_{k+1}] + g_k dt + gamma_k dt` with the tabulated driver
/// and increasing process of a decomposition.
pub fn reconstruct(
    tree: &BinomialTree,
    result: &DecompositionResult,
    terminal: &AdaptedProcess,
    tau: &LatticeStoppingTime,
) -> Result<Solution> {
    let g = result.g.clone();
    let driver = NodeFn::new(move |k, j, _, _, _| g.get(k, j), 0.0);
    solve_node(tree, &driver, terminal, &result.a, tau, &SolverSettings::default())
}

/// Probability of each start-layer node.
fn start_weights(tau: &LatticeStoppingTime) -> Vec<f64> {
    let s = tau.start();
    let mut w = vec![1.0];
    for _ in 0..s {
        let mut next = vec![0.0; w.len() + 1];
        for (j, v) in w.iter().enumerate() {
            next[j] += 0.5 * v;
            next[j + 1] += 0.5 * v;
        }
        w = next;
    }
    w
}

/// `(E sum_{k<tau} Z_k^2 dt, E A_tau^2)` by backward recursion.
pub fn energy_moments(tree: &BinomialTree, it: &PenalizationIterate) -> (f64, f64) {
    let tau = &it.tau;
    let live = live_nodes(tau);
    let reach = tau.reachable();
    let dt = tree.dt();
    let last = last_live_step(tau, &reach);
    let mut ez = vec![0.0; last + 2];
    let mut m1 = vec![0.0; last + 2];
    let mut m2 = vec![0.0; last + 2];
    for k in (tau.start()..=last).rev() {
        let mut nz = vec![0.0; k + 1];
        let mut n1 = vec![0.0; k + 1];
        let mut n2 = vec![0.0; k + 1];
        for j in 0..=k {
            if !live[k][j] {
                continue;
            }
            let z = it.z.get(k, j);
            let inc = it.a.density(k, j) * dt;
            let (a1, a2) = (0.5 * (m1[j] + m1[j + 1]), 0.5 * (m2[j] + m2[j + 1]));
            nz[j] = z * z * dt + 0.5 * (ez[j] + ez[j + 1]);
            n1[j] = inc + a1;
            n2[j] = inc * inc + 2.0 * inc * a1 + a2;
        }
        ez = nz;
        m1 = n1;
        m2 = n2;
    }
    let w = start_weights(tau);
    let ez0 = w.iter().zip(&ez).map(|(p, v)| p * v).sum();
    let a0 = w.iter().zip(&m2).map(|(p, v)| p * v).sum();
    (ez0, a0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelStats {
    pub n: f64,
    pub residual: f64,
    pub z_energy: f64,
    pub a_square: f64,
    /// `sup (y^{prev} - y^n)` against the previous level and `sup (y^n - Y)`, whichever is worse.
    pub monotonicity_slack: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct UniformBounds {
    pub levels: Vec<LevelStats>,
    pub bound_z: f64,
    pub bound_a: f64,
    pub report: ValidationReport,
}

/// Uniform bounds on `E sum Z^2 dt` and `E A_tau^2` across iterates, with
/// `C = factor * (first iterate's value)`, plus monotonicity in `n` and `A` increasing.
pub fn check_uniform_bounds(
    tree: &BinomialTree,
    iterates: &[PenalizationIterate],
    factor: f64,
) -> Result<UniformBounds> {
    if iterates.len() < 2 {
        return Err(Error::Parameter("need at least two iterates".into()));
    }
    let reach = iterates[0].tau.reachable();
    let mut levels = Vec::new();
    let mut mono = ViolationTracker::new("monotone_in_n", MONOTONE_TOL);
    let mut incr = ViolationTracker::new("a_increasing", 1e-12);
    for (i, it) in iterates.iter().enumerate() {
        let (z_energy, a_square) = energy_moments(tree, it);
        let mut slack = it.excess;
        mono.record(it.excess, || format!("y^n above Y by {} at n = {}", it.excess, it.n));
        if i > 0 {
            let prev = &iterates[i - 1];
            for (k, layer) in reach.iter().enumerate() {
                for (j, &r) in layer.iter().enumerate() {
                    if r {
                        let v = prev.y.get(k, j) - it.y.get(k, j);
                        slack = slack.max(v);
                        mono.record(v, || format!("y^{} above y^{} by {v} at ({k}, {j})", prev.n, it.n));
                    }
                }
            }
        }
        for (k, layer) in it.a.gamma().layers().iter().enumerate() {
            for (j, &gm) in layer.iter().enumerate() {
                incr.record(-gm, || format!("negative density {gm} at ({k}, {j}), n = {}", it.n));
            }
        }
        levels.push(LevelStats {
            n: it.n,
            residual: it.residual,
            z_energy,
            a_square,
            monotonicity_slack: slack,
        });
    }
    let bound_z = factor * levels[0].z_energy;
    let bound_a = factor * levels[0].a_square;
    let mut bz = ViolationTracker::new("z_energy_bounded", 1e-12);
    let mut ba = ViolationTracker::new("a_square_bounded", 1e-12);
    for l in &levels {
        bz.record(l.z_energy - bound_z, || {
            format!("E int Z^2 = {} at n = {}", l.z_energy, l.n)
        });
        ba.record(l.a_square - bound_a, || {
            format!("E A^2 = {} at n = {}", l.a_square, l.n)
        });
    }
    let mut report = ValidationReport::new("uniform_bounds");
    for tr in [mono, incr, bz, ba] {
        report.push(tr);
    }
    Ok(UniformBounds {
        levels,
        bound_z,
        bound_a,
        report,
    })
}

/// `|g1 - g2| <= mu |Y1 - Y2| + phi(|Z1 - Z2|)` on nodes live for both decompositions.
pub fn check_driver_transfer(
    e: &Evaluation,
    y1: &AdaptedProcess,
    r1: &DecompositionResult,
    y2: &AdaptedProcess,
    r2: &DecompositionResult,
    tau: &LatticeStoppingTime,
) -> ValidationReport {
    let (mu, phi) = (e.declared_mu(), e.declared_phi());
    let live = live_nodes(tau);
    let mut tracker = ViolationTracker::new("driver_transfer", DRIVER_BOUND_TOL);
    for (k, layer) in live.iter().enumerate() {
        for (j, &l) in layer.iter().enumerate() {
            if !l {
                continue;
            }
            let dg = (r1.g.get(k, j) - r2.g.get(k, j)).abs();
            let rhs = mu * (y1.get(k, j) - y2.get(k, j)).abs() + phi.value((r1.z.get(k, j) - r2.z.get(k, j)).abs());
            tracker.record(dg - rhs, || format!("|dg| = {dg} vs {rhs} at ({k}, {j})"));
        }
    }
    let mut report = ValidationReport::new("driver_transfer");
    report.push(tracker);
    report
}
