//! BSDEs driven by an evaluation: `y_s = E_{s,tau}[X; int f(r, y_r) dr]`,
//! solved by Picard iteration on pieces short enough to contract.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluation::Evaluation;
use crate::report::{ValidationReport, ViolationTracker};
use crate::solver::last_live_step;
use crate::tree::{AdaptedProcess, LatticeStoppingTime};

pub const PICARD_TOL: f64 = 1e-10;
pub const PICARD_MAX_ITERATIONS: usize = 60;

/// `f(step, node, t, y)`.
pub type AdaptedFn = Arc<dyn Fn(usize, usize, f64, f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct EDrivenProblem {
    pub e: Evaluation,
    f: AdaptedFn,
    lambda: f64,
    pub terminal: AdaptedProcess,
    pub tau: LatticeStoppingTime,
}

impl fmt::Debug for EDrivenProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EDrivenProblem")
            .field("lambda", &self.lambda)
            .field("start", &self.tau.start())
            .finish_non_exhaustive()
    }
}

impl EDrivenProblem {
    /// Problem with `f` depending on `(t, y)` and terminal layer `x` at the tree's horizon.
    pub fn at_horizon(
        e: Evaluation,
        f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        lambda: f64,
        x: &[f64],
    ) -> Result<Self> {
        let tree = *e.tree();
        let n = tree.steps();
        if x.len() != n + 1 {
            return Err(Error::Shape(format!("terminal layer needs {} values", n + 1)));
        }
        let mut terminal = AdaptedProcess::zeros(&tree);
        terminal.set_layer(n, x)?;
        let tau = LatticeStoppingTime::deterministic(&tree, 0, n)?;
        Self::new(e, move |_, _, t, y| f(t, y), lambda, terminal, tau)
    }

    pub fn new(
        e: Evaluation,
        f: impl Fn(usize, usize, f64, f64) -> f64 + Send + Sync + 'static,
        lambda: f64,
        terminal: AdaptedProcess,
        tau: LatticeStoppingTime,
    ) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Parameter(format!(
                "lambda must be finite and nonnegative, got {lambda}"
            )));
        }
        if tau.steps() != e.tree().steps() || terminal.steps() != e.tree().steps() {
            return Err(Error::Shape("terminal or stopping time on a different tree".into()));
        }
        Ok(Self {
            e,
            f: Arc::new(f),
            lambda,
            terminal,
            tau,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    #[inline]
    pub fn f(&self, step: usize, node: usize, t: f64, y: f64) -> f64 {
        (self.f)(step, node, t, y)
    }

    /// Same problem with `f + eta` and another terminal.
    pub fn perturbed(
        &self,
        eta: impl Fn(usize, usize, f64) -> f64 + Send + Sync + 'static,
        terminal: AdaptedProcess,
    ) -> Result<Self> {
        let f = self.f.clone();
        Self::new(
            self.e.clone(),
            move |k, j, t, y| f(k, j, t, y) + eta(k, j, t),
            self.lambda,
            terminal,
            self.tau.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PieceTrace {
    pub from: usize,
    pub to: usize,
    /// Sup-norm change of each Picard sweep.
    pub changes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PicardTrace {
    /// Piece boundaries in ascending order, from the start step to the last live step.
    pub partition: Vec<usize>,
    /// Pieces in the order solved (right to left).
    pub pieces: Vec<PieceTrace>,
    /// Successive change ratios over all pieces.
    pub contraction_ratios: Vec<f64>,
    /// Largest one-step defect of the fixed-point equation.
    pub defect: f64,
}

#[derive(Debug, Clone)]
pub enum InitialGuess {
    Zero,
    Constant(f64),
    Process(AdaptedProcess),
}

#[derive(Debug, Clone)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iterations: usize,
    pub initial: InitialGuess,
    /// Caps the piece length below the contraction criterion.
    pub max_piece: Option<usize>,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            tol: PICARD_TOL,
            max_iterations: PICARD_MAX_ITERATIONS,
            initial: InitialGuess::Zero,
            max_piece: None,
        }
    }
}

impl PicardOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

/// Largest horizon `beta` with `lambda beta e^{mu beta} = 1/2`, by bisection.
pub fn contraction_horizon(lambda: f64, mu: f64) -> f64 {
    if lambda <= 0.0 {
        return f64::INFINITY;
    }
    let h = |b: f64| lambda * b * (mu * b).exp() - 0.5;
    let (mut lo, mut hi) = (0.0, 1.0);
    while h(hi) < 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if h(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Number of lattice steps per piece allowed by `lambda T e^{mu T} <= 1/2`.
pub fn piece_steps(lambda: f64, mu: f64, dt: f64, total: usize) -> usize {
    if lambda <= 0.0 {
        return total;
    }
    let mut m = 0;
    while m < total {
        let t = (m + 1) as f64 * dt;
        if lambda * t * (mu * t).exp() > 0.5 {
            break;
        }
        m += 1;
    }
    m
}

/// Partition boundaries for the problem, ascending.
pub fn partition(problem: &EDrivenProblem, max_piece: Option<usize>) -> Result<Vec<usize>> {
    let tree = problem.e.tree();
    let reach = problem.tau.reachable();
    let start = problem.tau.start();
    let end = last_live_step(&problem.tau, &reach);
    let mut m = piece_steps(problem.lambda, problem.e.declared_mu(), tree.dt(), end - start);
    if let Some(cap) = max_piece {
        m = m.min(cap);
    }
    if m == 0 && end > start {
        return Err(Error::NonContraction {
            lambda: problem.lambda,
            mu: problem.e.declared_mu(),
            dt: tree.dt(),
        });
    }
    let mut cuts = vec![end];
    let mut b = end;
    while b > start {
        b = b.saturating_sub(m).max(start);
        cuts.push(b);
    }
    cuts.reverse();
    Ok(cuts)
}

/// One Picard map on `[from, to]`: backward sweep with `gamma_k = f(t_k, old_k)`.
///
/// Values on layer `to`, on stopped nodes and outside `reach` are taken from `y`.
fn sweep(
    problem: &EDrivenProblem,
    reach: &[Vec<bool>],
    old: &AdaptedProcess,
    y: &mut AdaptedProcess,
    from: usize,
    to: usize,
) -> Result<()> {
    let tree = problem.e.tree();
    let dt = tree.dt();
    for k in (from..to).rev() {
        let t = tree.time(k);
        for j in 0..=k {
            if !reach[k][j] || problem.tau.is_stop_node(k, j) {
                continue;
            }
            let gamma = problem.f(k, j, t, old.get(k, j));
            let v = problem
                .e
                .step(k, j, y.get(k + 1, j) + gamma * dt, y.get(k + 1, j + 1) + gamma * dt)?;
            y.set(k, j, v);
        }
    }
    Ok(())
}

fn sup_change(
    problem: &EDrivenProblem,
    reach: &[Vec<bool>],
    a: &AdaptedProcess,
    b: &AdaptedProcess,
    from: usize,
    to: usize,
) -> f64 {
    let mut m: f64 = 0.0;
    for k in from..=to {
        for j in 0..=k {
            if reach[k][j] && !problem.tau.is_stop_node(k, j) {
                m = m.max((a.get(k, j) - b.get(k, j)).abs());
            }
        }
    }
    m
}

pub fn solve_e_bsde(problem: &EDrivenProblem, tol: f64) -> Result<(AdaptedProcess, PicardTrace)> {
    solve_e_bsde_with(problem, &PicardOptions::with_tol(tol))
}

pub fn solve_e_bsde_with(problem: &EDrivenProblem, opts: &PicardOptions) -> Result<(AdaptedProcess, PicardTrace)> {
    let tree = *problem.e.tree();
    let cuts = partition(problem, opts.max_piece)?;
    let reach = problem.tau.reachable();

    // stopped nodes carry the terminal; live nodes start from the initial guess
    let mut y = match &opts.initial {
        InitialGuess::Zero => AdaptedProcess::zeros(&tree),
        InitialGuess::Constant(c) => AdaptedProcess::constant(&tree, *c),
        InitialGuess::Process(p) => {
            if p.steps() != tree.steps() {
                return Err(Error::Shape("initial guess on a different tree".into()));
            }
            p.clone()
        }
    };
    for (k, layer) in reach.iter().enumerate() {
        for (j, &r) in layer.iter().enumerate() {
            if !r {
                y.set(k, j, 0.0);
            } else if problem.tau.is_stop_node(k, j) {
                y.set(k, j, problem.terminal.get(k, j));
            }
        }
    }

    let mut pieces = Vec::new();
    let mut ratios = Vec::new();
    for w in cuts.windows(2).rev() {
        let (from, to) = (w[0], w[1]);
        let mut changes = Vec::new();
        let mut converged = false;
        // with f independent of y the map is constant and one sweep is exact
        let budget = if problem.lambda == 0.0 { 1 } else { opts.max_iterations };
        for _ in 0..budget {
            let old = y.clone();
            sweep(problem, &reach, &old, &mut y, from, to)?;
            let c = sup_change(problem, &reach, &old, &y, from, to);
            if let Some(&prev) = changes.last() {
                if prev > 0.0 {
                    ratios.push(c / prev);
                }
            }
            changes.push(c);
            if c <= opts.tol || budget == 1 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Picard {
                from,
                to,
                iterations: opts.max_iterations,
                last_change: changes.last().copied().unwrap_or(f64::NAN),
            });
        }
        pieces.push(PieceTrace { from, to, changes });
    }

    let defect = fixed_point_defect(problem, &y)?;
    Ok((
        y,
        PicardTrace {
            partition: cuts,
            pieces,
            contraction_ratios: ratios,
            defect,
        },
    ))
}

/// Largest `|y_k - E_{k,k+1}[y_{k+1} + f(t_k, y_k) dt]|` over live nodes.
pub fn fixed_point_defect(problem: &EDrivenProblem, y: &AdaptedProcess) -> Result<f64> {
    let tree = problem.e.tree();
    let reach = problem.tau.reachable();
    let mut worst: f64 = 0.0;
    for k in problem.tau.start()..tree.steps() {
        for j in 0..=k {
            if !reach[k][j] || problem.tau.is_stop_node(k, j) {
                continue;
            }
            let g = problem.f(k, j, tree.time(k), y.get(k, j)) * tree.dt();
            let v = problem.e.step(k, j, y.get(k + 1, j) + g, y.get(k + 1, j + 1) + g)?;
            worst = worst.max((v - y.get(k, j)).abs());
        }
    }
    Ok(worst)
}

/// `|I(y1) - I(y2)|_inf / |y1 - y2|_inf` for one Picard map over the whole horizon.
pub fn measure_contraction(problem: &EDrivenProblem, y1: &AdaptedProcess, y2: &AdaptedProcess) -> Result<f64> {
    let reach = problem.tau.reachable();
    let start = problem.tau.start();
    let end = last_live_step(&problem.tau, &reach);
    let prepare = |y: &AdaptedProcess| {
        let mut out = y.clone();
        for k in start..=end {
            for j in 0..=k {
                if reach[k][j] && problem.tau.is_stop_node(k, j) {
                    out.set(k, j, problem.terminal.get(k, j));
                }
            }
        }
        out
    };
    let (a, b) = (prepare(y1), prepare(y2));
    let den = sup_change(problem, &reach, &a, &b, start, end);
    if den == 0.0 {
        return Ok(0.0);
    }
    let mut ia = a.clone();
    let mut ib = b.clone();
    sweep(problem, &reach, &a, &mut ia, start, end)?;
    sweep(problem, &reach, &b, &mut ib, start, end)?;
    Ok(sup_change(problem, &reach, &ia, &ib, start, end) / den)
}

/// Solves both problems and asserts `y_bar >= y - 1e-9` on every live node.
///
/// Fails with a precondition error unless `X_bar >= X` on the stopping nodes.
pub fn compare_e_bsde(problem: &EDrivenProblem, bar: &EDrivenProblem, tol: f64) -> Result<ValidationReport> {
    if problem.tau != bar.tau {
        return Err(Error::Precondition("problems must share the stopping time".into()));
    }
    for (k, j) in problem.tau.stopping_nodes() {
        if bar.terminal.get(k, j) < problem.terminal.get(k, j) {
            return Err(Error::Precondition(format!("X_bar < X at ({k}, {j})")));
        }
    }
    let (y, _) = solve_e_bsde(problem, tol)?;
    let (yb, _) = solve_e_bsde(bar, tol)?;
    let reach = problem.tau.reachable();
    let mut tracker = ViolationTracker::new("comparison", 1e-9);
    for (k, layer) in reach.iter().enumerate() {
        for (j, &r) in layer.iter().enumerate() {
            if r {
                let v = y.get(k, j) - yb.get(k, j);
                tracker.record(v, || format!("y - y_bar = {v} at ({k}, {j})"));
            }
        }
    }
    let mut report = ValidationReport::new("e_bsde_comparison");
    report.push(tracker);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{make_mu_phi, Generator, Sign};
    use crate::modulus::Modulus;
    use crate::solver::{solve, IntegrandK};
    use crate::tree::build_tree;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plain(n: usize) -> Evaluation {
        Evaluation::from_generator(build_tree(1.0, n).unwrap(), Generator::zero()).unwrap()
    }

    #[test]
    fn beta_root() {
        let b = contraction_horizon(1.0, 1.0);
        assert!((b * b.exp() - 0.5).abs() < 1e-12);
        assert!((b - 0.3517).abs() < 1e-4);
        assert_eq!(contraction_horizon(0.0, 1.0), f64::INFINITY);
    }

    #[test]
    fn zero_f_needs_one_sweep() {
        let e = plain(16);
        let t = *e.tree();
        let x = t.brownian_layer(16);
        let p = EDrivenProblem::at_horizon(e.clone(), |_, _| 0.0, 0.0, &x).unwrap();
        let (y, trace) = solve_e_bsde(&p, 1e-10).unwrap();
        assert_eq!(trace.pieces.len(), 1);
        assert_eq!(trace.pieces[0].changes.len(), 1);
        for k in 0..=16 {
            for j in 0..=k {
                assert!((y.get(k, j) - t.brownian(k, j)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn linear_f_matches_solver() {
        let e = plain(64);
        let t = *e.tree();
        let p = EDrivenProblem::at_horizon(e, |_, y| 0.25 * y, 0.25, &[1.0; 65]).unwrap();
        let (y, trace) = solve_e_bsde(&p, 1e-10).unwrap();
        assert!((y.get(0, 0) - 0.25f64.exp()).abs() < 0.01);
        assert!(trace.defect < 1e-9);
        let tau = LatticeStoppingTime::deterministic(&t, 0, 64).unwrap();
        let s = solve(
            &t,
            &Generator::linear(0.25, 0.0, 0.0).unwrap(),
            &AdaptedProcess::constant(&t, 1.0),
            &IntegrandK::zero(&t),
            &tau,
        )
        .unwrap();
        assert!((y.get(0, 0) - s.y0()).abs() < 1e-9);
    }

    #[test]
    fn unit_rates_need_several_pieces() {
        let t = build_tree(1.0, 64).unwrap();
        let g = make_mu_phi(1.0, Modulus::capped_sqrt(), Sign::Plus).unwrap();
        let e = Evaluation::from_generator(t, g).unwrap();
        let x: Vec<f64> = t.brownian_layer(64).iter().map(|b| b.sin()).collect();
        let p = EDrivenProblem::at_horizon(e, |_, y| y.sin(), 1.0, &x).unwrap();
        let (_, trace) = solve_e_bsde(&p, 1e-10).unwrap();
        assert!(trace.partition.len() > 3);
        for w in trace.partition.windows(2) {
            let len = (w[1] - w[0]) as f64 * t.dt();
            assert!(len * len.exp() <= 0.5);
        }
    }

    #[test]
    fn non_contraction_on_coarse_grid() {
        let t = build_tree(1.0, 2).unwrap();
        let p = EDrivenProblem::at_horizon(
            Evaluation::from_generator(t, Generator::zero()).unwrap(),
            |_, y| 5.0 * y,
            5.0,
            &[1.0; 3],
        )
        .unwrap();
        assert!(matches!(solve_e_bsde(&p, 1e-10), Err(Error::NonContraction { .. })));
    }

    #[test]
    fn contraction_ratio_is_small() {
        let t = build_tree(0.34, 32).unwrap();
        let g = make_mu_phi(1.0, Modulus::capped_sqrt(), Sign::Plus).unwrap();
        let e = Evaluation::from_generator(t, g).unwrap();
        let p = EDrivenProblem::at_horizon(e, |_, y| y.abs(), 1.0, &[0.5; 33]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y1 = AdaptedProcess::from_fn(&t, |_, _| rng.gen_range(-1.0..1.0));
        assert_eq!(measure_contraction(&p, &y1, &y1).unwrap(), 0.0);
        for _ in 0..20 {
            let y2 = AdaptedProcess::from_fn(&t, |_, _| rng.gen_range(-1.0..1.0));
            assert!(measure_contraction(&p, &y1, &y2).unwrap() <= 0.55);
        }
    }

    #[test]
    fn comparison_examples() {
        let e = plain(16);
        let t = *e.tree();
        let x = t.brownian_layer(16);
        let p = EDrivenProblem::at_horizon(e, |_, _| 0.0, 0.0, &x).unwrap();
        let bar = p.perturbed(|_, _, _| 1.0, p.terminal.clone()).unwrap();
        assert!(compare_e_bsde(&p, &bar, 1e-10).unwrap().passed());
        let (y, _) = solve_e_bsde(&p, 1e-10).unwrap();
        let (yb, _) = solve_e_bsde(&bar, 1e-10).unwrap();
        for k in 0..=16 {
            for j in 0..=k {
                assert!((yb.get(k, j) - y.get(k, j) - (1.0 - t.time(k))).abs() < 1e-12);
            }
        }
        let worse = p.perturbed(|_, _, _| 0.0, p.terminal.map(|v| v - 1.0)).unwrap();
        assert!(matches!(compare_e_bsde(&p, &worse, 1e-10), Err(Error::Precondition(_))));
    }

    #[test]
    fn initial_guess_does_not_matter() {
        let t = build_tree(1.0, 64).unwrap();
        let g = make_mu_phi(1.0, Modulus::capped_sqrt(), Sign::Minus).unwrap();
        let e = Evaluation::from_generator(t, g).unwrap();
        let x: Vec<f64> = t.brownian_layer(64).iter().map(|b| b.cos()).collect();
        let p = EDrivenProblem::at_horizon(e, |_, y| (1.0 + y * y).sqrt(), 1.0, &x).unwrap();
        let (a, _) = solve_e_bsde(&p, 1e-10).unwrap();
        let opts = PicardOptions {
            initial: InitialGuess::Constant(1.0),
            ..PicardOptions::default()
        };
        let (b, _) = solve_e_bsde_with(&p, &opts).unwrap();
        for k in 0..=64 {
            for j in 0..=k {
                assert!((a.get(k, j) - b.get(k, j)).abs() <= 2e-10);
            }
        }
    }
}
