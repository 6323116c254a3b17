//! Backward induction for the discrete BSDE `(g, X, K, tau)` and the linear
//! closed form used to cross-check it.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::modulus::Modulus;
use crate::report::{ValidationReport, ViolationTracker};
use crate::tree::{AdaptedProcess, BinomialTree, LatticeStoppingTime};

/// Driver evaluated at a lattice node; lets the driver depend on the node itself.
pub trait NodeDriver: Sync {
    fn eval_node(&self, step: usize, node: usize, t: f64, y: f64, z: f64) -> f64;

    /// Lipschitz constant in y.
    fn mu(&self) -> f64;
}

impl NodeDriver for Generator {
    #[inline]
    fn eval_node(&self, _step: usize, _node: usize, t: f64, y: f64, z: f64) -> f64 {
        self.eval(t, y, z)
    }

    fn mu(&self) -> f64 {
        Generator::mu(self)
    }
}

/// A node driver built from a closure.
pub struct NodeFn<F> {
    f: F,
    mu: f64,
}

impl<F> NodeFn<F>
where
    F: Fn(usize, usize, f64, f64, f64) -> f64 + Sync,
{
    pub fn new(f: F, mu: f64) -> Self {
        Self { f, mu }
    }
}

impl<F> NodeDriver for NodeFn<F>
where
    F: Fn(usize, usize, f64, f64, f64) -> f64 + Sync,
{
    #[inline]
    fn eval_node(&self, step: usize, node: usize, t: f64, y: f64, z: f64) -> f64 {
        (self.f)(step, node, t, y, z)
    }

    fn mu(&self) -> f64 {
        self.mu
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct SolverSettings {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-12,
            max_iterations: 200,
        }
    }
}

/// Density `gamma` of an absolutely continuous increasing-or-not process `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegrandK {
    gamma: AdaptedProcess,
    sup_norm: f64,
}

impl IntegrandK {
    pub fn new(gamma: AdaptedProcess) -> Result<Self> {
        if !gamma.is_finite() {
            return Err(Error::Parameter("gamma must be finite".into()));
        }
        let sup_norm = gamma.sup_norm(0, gamma.steps());
        Ok(Self { gamma, sup_norm })
    }

    pub fn zero(tree: &BinomialTree) -> Self {
        Self {
            gamma: AdaptedProcess::zeros(tree),
            sup_norm: 0.0,
        }
    }

    pub fn constant(tree: &BinomialTree, c: f64) -> Result<Self> {
        Self::new(AdaptedProcess::constant(tree, c))
    }

    pub fn gamma(&self) -> &AdaptedProcess {
        &self.gamma
    }

    pub fn sup_norm(&self) -> f64 {
        self.sup_norm
    }

    #[inline]
    pub fn density(&self, step: usize, node: usize) -> f64 {
        self.gamma.get(step, node)
    }

    /// `K_k` per step when `gamma` depends on time only.
    pub fn deterministic_path(&self, tree: &BinomialTree) -> Option<Vec<f64>> {
        let mut out = vec![0.0; tree.steps() + 1];
        for k in 0..tree.steps() {
            let layer = self.gamma.layer(k);
            if layer.iter().any(|&v| v != layer[0]) {
                return None;
            }
            out[k + 1] = out[k] + layer[0] * tree.dt();
        }
        Some(out)
    }

    pub fn negated(&self) -> Self {
        Self {
            gamma: self.gamma.map(|v| -v),
            sup_norm: self.sup_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub y: AdaptedProcess,
    pub z: AdaptedProcess,
    pub defect: AdaptedProcess,
    pub residual: f64,
    pub start: usize,
    pub max_iterations_used: usize,
}

impl Solution {
    pub fn y0(&self) -> f64 {
        self.y.get(self.start, 0)
    }

    /// CSV with columns `step, up_moves, brownian_value, y, z, defect`.
    pub fn write_csv<W: Write>(&self, tree: &BinomialTree, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "up_moves", "brownian_value", "y", "z", "defect"])?;
        for k in self.start..=tree.steps() {
            for j in 0..=k {
                w.write_record(&[
                    k.to_string(),
                    j.to_string(),
                    tree.brownian(k, j).to_string(),
                    self.y.get(k, j).to_string(),
                    self.z.get(k, j).to_string(),
                    self.defect.get(k, j).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Solves `y = (down + up)/2 + g(t, y, z) dt + gamma dt` at node `(step, node)`.
///
/// Returns `(y, z, iterations)`.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn implicit_step(
    tree: &BinomialTree,
    driver: &dyn NodeDriver,
    step: usize,
    node: usize,
    down: f64,
    up: f64,
    gamma: f64,
    settings: &SolverSettings,
) -> Result<(f64, f64, usize)> {
    let dt = tree.dt();
    let t = tree.time(step);
    let e = 0.5 * (down + up) + gamma * dt;
    let z = tree.z_of(down, up);
    let mut y = e;
    for it in 1..=settings.max_iterations {
        let next = e + driver.eval_node(step, node, t, y, z) * dt;
        if !next.is_finite() {
            break;
        }
        if (next - y).abs() <= settings.tolerance * next.abs().max(1.0) {
            return Ok((next, z, it));
        }
        y = next;
    }
    Err(Error::Convergence {
        step,
        node,
        iterations: settings.max_iterations,
    })
}

fn check_step_size(tree: &BinomialTree, mu: f64) -> Result<()> {
    if mu * tree.dt() >= 1.0 {
        return Err(Error::Parameter(format!(
            "mu*dt = {} must be below 1 for the implicit step",
            mu * tree.dt()
        )));
    }
    Ok(())
}

fn check_terminal(terminal: &AdaptedProcess, tau: &LatticeStoppingTime, reach: &[Vec<bool>]) -> Result<()> {
    if terminal.steps() != tau.steps() {
        return Err(Error::Shape(
            "terminal and stopping time live on different trees".into(),
        ));
    }
    for (k, layer) in reach.iter().enumerate() {
        for (j, &r) in layer.iter().enumerate() {
            if r && tau.is_stop_node(k, j) && !terminal.get(k, j).is_finite() {
                return Err(Error::Parameter(format!("terminal value at ({k}, {j}) is not finite")));
            }
        }
    }
    Ok(())
}

/// Last layer the backward sweep has to touch.
pub(crate) fn last_live_step(tau: &LatticeStoppingTime, reach: &[Vec<bool>]) -> usize {
    (tau.start()..=tau.steps())
        .find(|&k| (0..=k).all(|j| !reach[k][j] || tau.is_stop_node(k, j)))
        .unwrap_or(tau.steps())
}

pub fn solve(
    tree: &BinomialTree,
    g: &Generator,
    terminal: &AdaptedProcess,
    k: &IntegrandK,
    tau: &LatticeStoppingTime,
) -> Result<Solution> {
    solve_node(tree, g, terminal, k, tau, &SolverSettings::default())
}

/// Backward induction with a node-dependent driver.
///
/// Only nodes reachable from `tau.start()` before stopping are computed; the
/// rest stay zero.
pub fn solve_node(
    tree: &BinomialTree,
    driver: &dyn NodeDriver,
    terminal: &AdaptedProcess,
    k: &IntegrandK,
    tau: &LatticeStoppingTime,
    settings: &SolverSettings,
) -> Result<Solution> {
    check_step_size(tree, driver.mu())?;
    if tau.steps() != tree.steps() {
        return Err(Error::Shape("stopping time lives on a different tree".into()));
    }
    let reach = tau.reachable();
    check_terminal(terminal, tau, &reach)?;
    let dt = tree.dt();
    let mut y = AdaptedProcess::zeros(tree);
    let mut z = AdaptedProcess::zeros(tree);
    let mut defect = AdaptedProcess::zeros(tree);
    let mut residual: f64 = 0.0;
    let mut max_it = 0;
    let last = last_live_step(tau, &reach);
    for step in (tau.start()..=last).rev() {
        for j in 0..=step {
            if !reach[step][j] {
                continue;
            }
            if tau.is_stop_node(step, j) {
                y.set(step, j, terminal.get(step, j));
                continue;
            }
            let (d, u) = (y.get(step + 1, j), y.get(step + 1, j + 1));
            let gamma = k.density(step, j);
            let (yv, zv, it) = implicit_step(tree, driver, step, j, d, u, gamma, settings)?;
            let def = (yv - 0.5 * (d + u) - driver.eval_node(step, j, tree.time(step), yv, zv) * dt - gamma * dt).abs();
            y.set(step, j, yv);
            z.set(step, j, zv);
            defect.set(step, j, def);
            residual = residual.max(def);
            max_it = max_it.max(it);
        }
    }
    Ok(Solution {
        y,
        z,
        defect,
        residual,
        start: tau.start(),
        max_iterations_used: max_it,
    })
}

/// Coefficients of the linear driver `a y + b z + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCoefficients {
    pub a: AdaptedProcess,
    pub b: AdaptedProcess,
    pub c: AdaptedProcess,
    mu: f64,
}

impl LinearCoefficients {
    pub fn new(a: AdaptedProcess, b: AdaptedProcess, c: AdaptedProcess) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && c.is_finite()) {
            return Err(Error::Parameter("linear coefficients must be finite".into()));
        }
        if a.steps() != b.steps() || a.steps() != c.steps() {
            return Err(Error::Shape("linear coefficients on different trees".into()));
        }
        let mu = a.sup_norm(0, a.steps());
        Ok(Self { a, b, c, mu })
    }

    pub fn constant(tree: &BinomialTree, a: f64, b: f64, c: f64) -> Result<Self> {
        Self::new(
            AdaptedProcess::constant(tree, a),
            AdaptedProcess::constant(tree, b),
            AdaptedProcess::constant(tree, c),
        )
    }
}

impl NodeDriver for LinearCoefficients {
    #[inline]
    fn eval_node(&self, step: usize, node: usize, _t: f64, y: f64, z: f64) -> f64 {
        self.a.get(step, node) * y + self.b.get(step, node) * z + self.c.get(step, node)
    }

    fn mu(&self) -> f64 {
        self.mu
    }
}

/// Linear BSDE through discrete Girsanov weights.
///
/// From each live node, mass is pushed forward with weights
/// `(1 +- b sqrt(dt)) / (2 (1 - a dt))` and the value is the weighted sum of
/// running costs and stopped terminal values.
pub fn solve_linear_closed_form(
    tree: &BinomialTree,
    coeffs: &LinearCoefficients,
    terminal: &AdaptedProcess,
    k: &IntegrandK,
    tau: &LatticeStoppingTime,
) -> Result<Solution> {
    let n = tree.steps();
    let (dt, sq) = (tree.dt(), tree.increment());
    if tau.steps() != n || coeffs.a.steps() != n {
        return Err(Error::Shape("inputs live on different trees".into()));
    }
    let reach = tau.reachable();
    check_terminal(terminal, tau, &reach)?;
    for step in tau.start()..n {
        for j in 0..=step {
            if !reach[step][j] || tau.is_stop_node(step, j) {
                continue;
            }
            let (a, b) = (coeffs.a.get(step, j), coeffs.b.get(step, j));
            if a.abs() * dt >= 1.0 {
                return Err(Error::Parameter(format!("|a| dt >= 1 at ({step}, {j})")));
            }
            let w = 0.5 * (1.0 - b * sq);
            if !(w > 0.0 && w < 1.0) {
                return Err(Error::Parameter(format!(
                    "measure weights leave (0, 1) at ({step}, {j}): b = {b}"
                )));
            }
        }
    }

    let mut y = AdaptedProcess::zeros(tree);
    let mut mass = vec![0.0; n + 2];
    let mut next = vec![0.0; n + 2];
    for step in tau.start()..=n {
        for j in 0..=step {
            if !reach[step][j] {
                continue;
            }
            mass.iter_mut().for_each(|m| *m = 0.0);
            mass[j] = 1.0;
            let (mut lo, mut hi) = (j, j);
            let mut value = 0.0;
            let mut kk = step;
            loop {
                next[lo..=hi + 1].iter_mut().for_each(|m| *m = 0.0);
                let mut any = false;
                for jj in lo..=hi {
                    let m = mass[jj];
                    if m == 0.0 {
                        continue;
                    }
                    if tau.is_stop_node(kk, jj) {
                        value += m * terminal.get(kk, jj);
                        continue;
                    }
                    let (a, b, c) = (coeffs.a.get(kk, jj), coeffs.b.get(kk, jj), coeffs.c.get(kk, jj));
                    let scale = 1.0 / (1.0 - a * dt);
                    value += m * scale * (c + k.density(kk, jj)) * dt;
                    next[jj] += m * scale * 0.5 * (1.0 - b * sq);
                    next[jj + 1] += m * scale * 0.5 * (1.0 + b * sq);
                    any = true;
                }
                if !any {
                    break;
                }
                std::mem::swap(&mut mass, &mut next);
                kk += 1;
                hi += 1;
                while mass[lo] == 0.0 && lo < hi {
                    lo += 1;
                }
            }
            y.set(step, j, value);
        }
    }

    let mut z = AdaptedProcess::zeros(tree);
    let mut defect = AdaptedProcess::zeros(tree);
    let mut residual: f64 = 0.0;
    for step in tau.start()..n {
        for j in 0..=step {
            if !reach[step][j] || tau.is_stop_node(step, j) {
                continue;
            }
            let (d, u) = (y.get(step + 1, j), y.get(step + 1, j + 1));
            let zv = tree.z_of(d, u);
            let yv = y.get(step, j);
            let g = coeffs.eval_node(step, j, tree.time(step), yv, zv);
            let def = (yv - 0.5 * (d + u) - (g + k.density(step, j)) * dt).abs();
            z.set(step, j, zv);
            defect.set(step, j, def);
            residual = residual.max(def);
        }
    }
    Ok(Solution {
        y,
        z,
        defect,
        residual,
        start: tau.start(),
        max_iterations_used: 0,
    })
}

/// `f_n(t, y, z) = mu|y| + n|z| + phi(2 nu / n) + |g(t, 0, 0)|`, which dominates `|g|`.
pub fn lipschitz_majorant_driver(g: &Generator, n: f64) -> Result<Generator> {
    let nu = g.phi().nu();
    if !(n > 0.0 && n >= 2.0 * nu) {
        return Err(Error::Parameter(format!(
            "majorant needs n >= 2 nu = {}, got {n}",
            2.0 * nu
        )));
    }
    let intercept = g.phi().value(2.0 * nu / n);
    let mu = g.mu();
    let inner = g.clone();
    Ok(Generator::new(
        move |t, y, z| mu * y.abs() + n * z.abs() + intercept + inner.eval(t, 0.0, 0.0).abs(),
        mu,
        Modulus::scaled(n)?,
        false,
    )?
    .with_lipschitz_z(n)
    .with_label(format!("majorant({}, {n})", g.label())))
}

/// Largest number of steps any path from each node needs before `tau` stops it.
pub fn remaining_steps(tau: &LatticeStoppingTime) -> Vec<Vec<usize>> {
    let n = tau.steps();
    let mut out: Vec<Vec<usize>> = (0..=n).map(|k| vec![0; k + 1]).collect();
    for k in (0..n).rev() {
        for j in 0..=k {
            if !tau.is_stop_node(k, j) {
                out[k][j] = 1 + out[k + 1][j].max(out[k + 1][j + 1]);
            }
        }
    }
    out
}

/// `sup_k |g(t_k, 0, 0)|` over the lattice times.
pub fn sup_driver_at_origin(tree: &BinomialTree, g: &Generator) -> f64 {
    (0..=tree.steps()).fold(0.0, |m, k| m.max(g.eval(tree.time(k), 0.0, 0.0).abs()))
}

/// Checks the a-priori sup bound
/// `|Y_k| <= (1 - mu dt)^(-j) (|X|_inf + j dt (|g(.,0,0)|_inf + |gamma|_inf))`
/// with `j` the longest remaining time to `tau`.
///
/// The bound is exact on the lattice when `g` is Lipschitz in z with
/// constant `L` and `L sqrt(dt) <= 1`.
pub fn check_sup_bound(
    tree: &BinomialTree,
    g: &Generator,
    terminal: &AdaptedProcess,
    k: &IntegrandK,
    tau: &LatticeStoppingTime,
    tol: f64,
) -> Result<ValidationReport> {
    require_lipschitz(tree, g)?;
    let sol = solve(tree, g, terminal, k, tau)?;
    let reach = tau.reachable();
    let x_norm = tau
        .stopping_nodes()
        .iter()
        .fold(0.0_f64, |m, &(s, j)| m.max(terminal.get(s, j).abs()));
    let c = sup_driver_at_origin(tree, g) + k.sup_norm();
    let rem = remaining_steps(tau);
    let q = 1.0 / (1.0 - g.mu() * tree.dt());
    let mut tracker = ViolationTracker::new("sup_bound", tol);
    for step in tau.start()..=tree.steps() {
        for j in 0..=step {
            if !reach[step][j] {
                continue;
            }
            let r = rem[step][j];
            let bound = q.powi(r as i32) * (x_norm + r as f64 * tree.dt() * c);
            let v = sol.y.get(step, j).abs();
            tracker.record(v - bound, || format!("|Y| = {v} vs bound {bound} at ({step}, {j})"));
        }
    }
    let mut report = ValidationReport::new("sup_bound");
    report.push(tracker);
    Ok(report)
}

/// Checks `|Y_s - X| <= (1 - mu dt)^(-j) j dt (mu |X| + |g(.,0,0)|_inf + |gamma|_inf)`
/// for a terminal value `X` known at time `s`.
///
/// `x_at_s` holds `X` on layer `s = tau.start()`. Each start node is solved
/// with the constant terminal `X(s, j)` on its own cone.
pub fn check_anchoring_bound(
    tree: &BinomialTree,
    g: &Generator,
    x_at_s: &[f64],
    k: &IntegrandK,
    tau: &LatticeStoppingTime,
    tol: f64,
) -> Result<ValidationReport> {
    require_lipschitz(tree, g)?;
    let s = tau.start();
    if x_at_s.len() != s + 1 {
        return Err(Error::Shape(format!("X must have {} values on layer {s}", s + 1)));
    }
    let c = sup_driver_at_origin(tree, g) + k.sup_norm();
    let rem = remaining_steps(tau);
    let q = 1.0 / (1.0 - g.mu() * tree.dt());
    let mut tracker = ViolationTracker::new("anchoring_bound", tol);
    for (j, &x) in x_at_s.iter().enumerate() {
        let terminal = AdaptedProcess::constant(tree, x);
        let sol = solve(tree, g, &terminal, k, tau)?;
        let r = rem[s][j];
        let bound = q.powi(r as i32) * r as f64 * tree.dt() * (g.mu() * x.abs() + c);
        let gap = (sol.y.get(s, j) - x).abs();
        tracker.record(gap - bound, || {
            format!("|Y - X| = {gap} vs bound {bound} at ({s}, {j})")
        });
    }
    let mut report = ValidationReport::new("anchoring_bound");
    report.push(tracker);
    Ok(report)
}

fn require_lipschitz(tree: &BinomialTree, g: &Generator) -> Result<()> {
    match g.lipschitz_z() {
        Some(l) if l * tree.increment() <= 1.0 => Ok(()),
        Some(l) => Err(Error::Precondition(format!(
            "z-Lipschitz constant {l} too large for sqrt(dt) = {}",
            tree.increment()
        ))),
        None => Err(Error::Precondition("sup bounds need a driver Lipschitz in z".into())),
    }
}
