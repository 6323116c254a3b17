//! Recovering the generator of a black-box evaluation.
//!
//! For each grid cell `(t_i, y, z)` a test process is started at `(t_i, y)`
//! with constant volatility `z`. It is a supermartingale under any evaluation
//! dominated by `(mu, phi)`, and the driver of its Doob-Meyer decomposition at
//! the start node is `g(t_i, y, z)`.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::decomposition::{default_schedule, doob_meyer, DecompositionResult};
use crate::error::{Error, Result};
use crate::evaluation::Evaluation;
use crate::generator::{check_a1_on, make_mu_phi, BilinearTable, Generator, Sign};
use crate::modulus::Modulus;
use crate::report::{ValidationReport, ViolationTracker};
use crate::tree::{hitting_time, AdaptedProcess, BinomialTree, LatticeStoppingTime};

/// Penalization stops early once `sup |Y - y^n|` is this small.
const EXTRACTION_TARGET: f64 = 1e-12;

/// `max(1, 4 sqrt(dt))`.
pub fn default_barrier(tree: &BinomialTree) -> f64 {
    1f64.max(4.0 * tree.increment())
}

#[derive(Debug, Clone, Default)]
pub struct TestProcessOptions {
    /// Hitting barrier; `None` uses [`default_barrier`].
    pub barrier: Option<f64>,
    /// Additional deterministic cap on the window.
    pub end_step: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TestProcess {
    pub t_start_step: usize,
    /// Start node on layer `t_start_step`; the other start nodes stop at once.
    pub anchor: usize,
    pub y0: f64,
    pub z: f64,
    pub mu: f64,
    pub phi: Modulus,
    pub barrier: f64,
    /// Forward recursion, zero outside the window.
    pub forward: AdaptedProcess,
    /// `E^{mu,phi}` evaluation of the stopped forward values.
    pub y: AdaptedProcess,
    pub tau_t: LatticeStoppingTime,
    /// `tau_t` capped at `end_step`.
    pub window: LatticeStoppingTime,
}

pub fn build_test_process(
    tree: &BinomialTree,
    mu: f64,
    phi: &Modulus,
    t_step: usize,
    y0: f64,
    z: f64,
) -> Result<TestProcess> {
    build_test_process_with(tree, mu, phi, t_step, y0, z, &TestProcessOptions::default())
}

pub fn build_test_process_with(
    tree: &BinomialTree,
    mu: f64,
    phi: &Modulus,
    t_step: usize,
    y0: f64,
    z: f64,
    opts: &TestProcessOptions,
) -> Result<TestProcess> {
    let n = tree.steps();
    if t_step >= n {
        return Err(Error::Parameter(format!("start step {t_step} must be below N = {n}")));
    }
    if !(y0.is_finite() && z.is_finite()) {
        return Err(Error::Domain(format!("test process start ({y0}, {z}) must be finite")));
    }
    let end = opts.end_step.unwrap_or(n);
    if end <= t_step || end > n {
        return Err(Error::Parameter(format!(
            "window end {end} must lie in ({t_step}, {n}]"
        )));
    }
    let barrier = opts.barrier.unwrap_or_else(|| default_barrier(tree));
    let anchor = t_step / 2;
    let tau_t = hitting_time(tree, t_step, anchor, barrier)?;
    let window = tau_t.min(&LatticeStoppingTime::deterministic(tree, t_step, end)?)?;

    let dt = tree.dt();
    let sq = tree.increment();
    let drift = |y: f64| (mu * y.abs() + phi.value(z.abs())) * dt;
    let origin = tree.brownian(t_step, anchor);
    let reach = window.reachable();
    let mut forward = AdaptedProcess::zeros(tree);
    for j in 0..=t_step {
        forward.set(t_step, j, y0 + z * (tree.brownian(t_step, j) - origin));
    }
    for k in t_step + 1..=n {
        for j in 0..=k {
            if !reach[k][j] {
                continue;
            }
            let live = |jj: usize| reach[k - 1][jj] && !window.is_stop_node(k - 1, jj);
            let (mut sum, mut count) = (0.0, 0.0);
            if j < k && live(j) {
                let p = forward.get(k - 1, j);
                sum += p - drift(p) - z * sq;
                count += 1.0;
            }
            if j > 0 && live(j - 1) {
                let p = forward.get(k - 1, j - 1);
                sum += p - drift(p) + z * sq;
                count += 1.0;
            }
            forward.set(k, j, sum / count);
        }
    }

    let dominating = Evaluation::from_generator(*tree, make_mu_phi(mu, phi.clone(), Sign::Plus)?)?;
    let y = dominating.evaluate_until(&window, &forward, None)?;
    Ok(TestProcess {
        t_start_step: t_step,
        anchor,
        y0,
        z,
        mu,
        phi: phi.clone(),
        barrier,
        forward,
        y,
        tau_t,
        window,
    })
}

impl TestProcess {
    /// Nodes reached before or at the window's end, from the anchor.
    pub fn region(&self) -> Vec<Vec<bool>> {
        let mut reach = self.window.reachable();
        let t = self.t_start_step;
        for (j, r) in reach[t].iter_mut().enumerate() {
            *r = j == self.anchor;
        }
        reach
    }

    /// `(|y0| + |z| b + phi(|z|) T) (1 - mu dt)^{-N}` with `b` the largest
    /// Brownian displacement inside the window.
    pub fn gronwall_bound(&self, tree: &BinomialTree) -> f64 {
        let origin = tree.brownian(self.t_start_step, self.anchor);
        let mut b = 0.0_f64;
        for (k, layer) in self.region().iter().enumerate() {
            for (j, &r) in layer.iter().enumerate() {
                if r {
                    b = b.max((tree.brownian(k, j) - origin).abs());
                }
            }
        }
        let base = self.y0.abs() + self.z.abs() * b + self.phi.value(self.z.abs()) * tree.horizon();
        base * (1.0 - self.mu * tree.dt()).powi(-(tree.steps() as i32))
    }

    pub fn check_gronwall(&self, tree: &BinomialTree) -> ValidationReport {
        let bound = self.gronwall_bound(tree);
        let mut tracker = ViolationTracker::new("gronwall_bound", 1e-12 * bound.max(1.0));
        for (k, layer) in self.region().iter().enumerate() {
            for (j, &r) in layer.iter().enumerate() {
                if r {
                    let v = self.forward.get(k, j).abs();
                    tracker.record(v - bound, || format!("|Y| = {v} at ({k}, {j}), bound {bound}"));
                }
            }
        }
        let mut report = ValidationReport::new("test_process");
        report.push(tracker);
        report
    }

    /// Largest `|E_{k,k+1}[P_{k+1}] - P_k|` over live window nodes.
    pub fn one_step_gap(&self, e: &Evaluation, process: &AdaptedProcess) -> Result<f64> {
        let region = self.region();
        let mut gap = 0.0_f64;
        for k in self.t_start_step..e.tree().steps() {
            for j in 0..=k {
                if !region[k][j] || self.window.is_stop_node(k, j) {
                    continue;
                }
                let v = e.step(k, j, process.get(k + 1, j), process.get(k + 1, j + 1))?;
                gap = gap.max((v - process.get(k, j)).abs());
            }
        }
        Ok(gap)
    }
}

#[derive(Debug, Clone)]
pub struct LocalGenerator {
    /// Driver of the decomposition on the live window nodes.
    pub g: AdaptedProcess,
    pub z: AdaptedProcess,
    /// `g` at the start node.
    pub value: f64,
    /// Probability-weighted mean of `g` over the live window.
    pub window_mean: f64,
    /// `|Z - z|` at the start node.
    pub z_gap: f64,
    /// `sup |Z - z|` over the live window.
    pub sup_z_gap: f64,
    pub residual: f64,
    pub levels_used: Vec<f64>,
}

/// Doob-Meyer decomposition of `tp.y` under `e` on the test window.
pub fn extract_local_generator(e: &Evaluation, tp: &TestProcess) -> Result<LocalGenerator> {
    let tree = *e.tree();
    if (e.declared_mu() - tp.mu).abs() > 1e-15 {
        return Err(Error::Precondition(format!(
            "test process built with mu = {} but the evaluation declares {}",
            tp.mu,
            e.declared_mu()
        )));
    }
    let schedule = default_schedule(&tree, e.declared_mu());
    if schedule.is_empty() {
        return Err(Error::NonContraction {
            lambda: 1.0,
            mu: e.declared_mu(),
            dt: tree.dt(),
        });
    }
    let result: DecompositionResult = match doob_meyer(e, &tp.y, &tp.window, &schedule, EXTRACTION_TARGET) {
        Ok(r) => r,
        Err(Error::ToleranceNotReached { result, .. }) => *result,
        Err(err) => return Err(err),
    };

    let region = tp.region();
    let (t, a) = (tp.t_start_step, tp.anchor);
    let mut sup_z_gap = 0.0_f64;
    let (mut mass, mut weighted) = (0.0, 0.0);
    let mut prob = vec![0.0; t + 2];
    prob[a] = 1.0;
    for k in t..tree.steps() {
        let mut next = vec![0.0; k + 2];
        for j in 0..=k {
            if !region[k][j] || tp.window.is_stop_node(k, j) || prob[j] == 0.0 {
                continue;
            }
            sup_z_gap = sup_z_gap.max((result.z.get(k, j) - tp.z).abs());
            weighted += prob[j] * result.g.get(k, j);
            mass += prob[j];
            next[j] += 0.5 * prob[j];
            next[j + 1] += 0.5 * prob[j];
        }
        prob = next;
    }
    Ok(LocalGenerator {
        value: result.g.get(t, a),
        window_mean: if mass > 0.0 {
            weighted / mass
        } else {
            result.g.get(t, a)
        },
        z_gap: (result.z.get(t, a) - tp.z).abs(),
        sup_z_gap,
        residual: result.residual,
        levels_used: result.levels_used,
        g: result.g,
        z: result.z,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryGrid {
    pub time_steps: Vec<usize>,
    pub y_points: Vec<f64>,
    pub z_points: Vec<f64>,
    pub level: u32,
}

impl RecoveryGrid {
    /// Cells `t_i = i 2^{-level} T` snapped to the nearest lattice step.
    ///
    /// Each cell must span at least four lattice steps.
    pub fn dyadic(tree: &BinomialTree, level: u32, y_points: Vec<f64>, z_points: Vec<f64>) -> Result<Self> {
        let n = tree.steps();
        let cells = 1usize
            .checked_shl(level)
            .filter(|&c| c <= n)
            .ok_or_else(|| Error::Parameter(format!("level {level} is finer than the lattice")))?;
        if n < 4 * cells {
            return Err(Error::Parameter(format!(
                "level {level} needs 2^-n T >= 4 dt, i.e. N >= {}",
                4 * cells
            )));
        }
        let time_steps = (0..cells)
            .map(|i| ((i * n) as f64 / cells as f64).round() as usize)
            .collect();
        let grid = Self {
            time_steps,
            y_points,
            z_points,
            level,
        };
        grid.validate(tree)?;
        Ok(grid)
    }

    pub fn validate(&self, tree: &BinomialTree) -> Result<()> {
        let ascending =
            |v: &[f64]| !v.is_empty() && v.iter().all(|x| x.is_finite()) && v.windows(2).all(|w| w[0] < w[1]);
        if !ascending(&self.y_points) || !ascending(&self.z_points) {
            return Err(Error::Parameter(
                "y and z grids must be finite, nonempty and strictly ascending".into(),
            ));
        }
        if self.time_steps.is_empty()
            || self.time_steps.windows(2).any(|w| w[0] >= w[1])
            || *self.time_steps.last().unwrap() >= tree.steps()
        {
            return Err(Error::Parameter("time steps must be ascending and below N".into()));
        }
        Ok(())
    }

    /// `count` equally spaced points on `[lo, hi]`.
    pub fn points(lo: f64, hi: f64, count: usize) -> Vec<f64> {
        match count {
            0 => Vec::new(),
            1 => vec![lo],
            _ => (0..count)
                .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
                .collect(),
        }
    }

    /// Last step of cell `i`.
    pub fn cell_end(&self, i: usize, tree: &BinomialTree) -> usize {
        self.time_steps.get(i + 1).copied().unwrap_or(tree.steps())
    }

    pub fn cell_count(&self) -> usize {
        self.time_steps.len() * self.y_points.len() * self.z_points.len()
    }
}

/// Which value of the local generator goes into the table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Tabulation {
    /// Value at the cell's base node.
    #[default]
    BasePoint,
    /// Probability-weighted mean over the cell window.
    IntervalAverage,
}

/// Default cap on the extraction window, in lattice steps.
pub const DEFAULT_WINDOW_STEPS: usize = 32;

#[derive(Debug, Clone)]
pub struct RecoveryOptions {
    pub barrier: Option<f64>,
    pub tabulation: Tabulation,
    /// Skip the (A1) regularization of each time slice.
    pub raw_only: bool,
    /// Longest extraction window in steps; `None` uses the whole cell.
    pub window_steps: Option<usize>,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        Self {
            barrier: None,
            tabulation: Tabulation::default(),
            raw_only: false,
            window_steps: Some(DEFAULT_WINDOW_STEPS),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellRecord {
    pub time_step: usize,
    pub y: f64,
    pub z: f64,
    pub value: f64,
    pub raw: f64,
    pub z_gap: f64,
    pub residual: f64,
    pub max_level: f64,
}

#[derive(Debug, Clone)]
pub struct RecoveredGenerator {
    pub grid: RecoveryGrid,
    pub times: Vec<f64>,
    /// Regularized slice per time cell.
    pub tables: Vec<BilinearTable>,
    pub raw: Vec<BilinearTable>,
    pub cells: Vec<CellRecord>,
    pub mu: f64,
    pub phi: Modulus,
    pub tree: BinomialTree,
}

/// Shifts the table by a constant so that it vanishes at `(0, 0)`; (A1) is unaffected.
fn anchor_origin(table: &BilinearTable) -> Result<BilinearTable> {
    let (ys, zs) = (table.ys(), table.zs());
    let c = table.interpolate(
        0.0_f64.clamp(ys[0], ys[ys.len() - 1]),
        0.0_f64.clamp(zs[0], zs[zs.len() - 1]),
    );
    BilinearTable::new(ys.to_vec(), zs.to_vec(), table.values().iter().map(|v| v - c).collect())
}

/// Smallest `d`-Lipschitz adjustment: the mean of the upper and lower
/// McShane extensions for `d = mu |dy| + phi(|dz|)`. The sup distance to the
/// input is at most the input's own worst Lipschitz excess over two.
fn regularize(table: &BilinearTable, mu: f64, phi: &Modulus) -> Result<BilinearTable> {
    let (ys, zs) = (table.ys(), table.zs());
    let mut out = Vec::with_capacity(ys.len() * zs.len());
    for &y in ys {
        for &z in zs {
            let (mut upper, mut lower) = (f64::INFINITY, f64::NEG_INFINITY);
            for (qy, &y2) in ys.iter().enumerate() {
                for (qz, &z2) in zs.iter().enumerate() {
                    let d = mu * (y - y2).abs() + phi.value((z - z2).abs());
                    let v = table.at(qy, qz);
                    upper = upper.min(v + d);
                    lower = lower.max(v - d);
                }
            }
            out.push(0.5 * (upper + lower));
        }
    }
    BilinearTable::new(ys.to_vec(), zs.to_vec(), out)
}

pub fn recover_generator(e: &Evaluation, grid: &RecoveryGrid) -> Result<RecoveredGenerator> {
    recover_generator_with(e, grid, &RecoveryOptions::default())
}

pub fn recover_generator_with(
    e: &Evaluation,
    grid: &RecoveryGrid,
    opts: &RecoveryOptions,
) -> Result<RecoveredGenerator> {
    let tree = *e.tree();
    grid.validate(&tree)?;
    let (mu, phi) = (e.declared_mu(), e.declared_phi().clone());
    let (ny, nz) = (grid.y_points.len(), grid.z_points.len());
    let jobs: Vec<(usize, usize, usize)> = (0..grid.time_steps.len())
        .flat_map(|i| (0..ny).flat_map(move |iy| (0..nz).map(move |iz| (i, iy, iz))))
        .collect();
    let outcomes: Vec<Result<CellRecord>> = jobs
        .par_iter()
        .map(|&(i, iy, iz)| {
            let (t, y, z) = (grid.time_steps[i], grid.y_points[iy], grid.z_points[iz]);
            let tp_opts = TestProcessOptions {
                barrier: opts.barrier,
                end_step: Some(match opts.window_steps {
                    Some(w) => grid.cell_end(i, &tree).min(t + w.max(1)),
                    None => grid.cell_end(i, &tree),
                }),
            };
            let tp = build_test_process_with(&tree, mu, &phi, t, y, z, &tp_opts)?;
            let local = extract_local_generator(e, &tp)?;
            let raw = match opts.tabulation {
                Tabulation::BasePoint => local.value,
                Tabulation::IntervalAverage => local.window_mean,
            };
            Ok(CellRecord {
                time_step: t,
                y,
                z,
                value: raw,
                raw,
                z_gap: local.z_gap,
                residual: local.residual,
                max_level: local.levels_used.last().copied().unwrap_or(0.0),
            })
        })
        .collect();

    let mut cells = Vec::with_capacity(jobs.len());
    let mut failures = Vec::new();
    for (&(i, iy, iz), out) in jobs.iter().zip(outcomes) {
        match out {
            Ok(c) => cells.push(c),
            Err(err) => failures.push(format!(
                "cell (t={}, y={}, z={}): {err}",
                grid.time_steps[i], grid.y_points[iy], grid.z_points[iz]
            )),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Recovery {
            total: jobs.len(),
            failures,
        });
    }

    let per_slice = ny * nz;
    let mut raw = Vec::new();
    let mut tables = Vec::new();
    for slice in cells.chunks_mut(per_slice) {
        let values: Vec<f64> = slice.iter().map(|c| c.raw).collect();
        let table = BilinearTable::new(grid.y_points.clone(), grid.z_points.clone(), values)?;
        let reg = if opts.raw_only {
            table.clone()
        } else {
            anchor_origin(&regularize(&table, mu, &phi)?)?
        };
        for (c, v) in slice.iter_mut().zip(reg.values()) {
            c.value = *v;
        }
        raw.push(table);
        tables.push(reg);
    }
    Ok(RecoveredGenerator {
        times: grid.time_steps.iter().map(|&k| tree.time(k)).collect(),
        grid: grid.clone(),
        tables,
        raw,
        cells,
        mu,
        phi,
        tree,
    })
}

impl RecoveredGenerator {
    fn slice_at(&self, t: f64) -> usize {
        let eps = 1e-12 * self.tree.horizon();
        self.times.partition_point(|&ti| ti <= t + eps).saturating_sub(1)
    }

    /// Piecewise constant in `t`, bilinear in `(y, z)`, constant outside the grid.
    pub fn eval(&self, t: f64, y: f64, z: f64) -> f64 {
        let table = &self.tables[self.slice_at(t)];
        let (ys, zs) = (table.ys(), table.zs());
        let y = y.clamp(ys[0], ys[ys.len() - 1]);
        let z = z.clamp(zs[0], zs[zs.len() - 1]);
        table.interpolate(y, z)
    }

    /// Largest `|g(t_i, 0, 0)|`.
    pub fn value_at_origin(&self) -> f64 {
        self.times
            .iter()
            .map(|&t| self.eval(t, 0.0, 0.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn as_generator(&self) -> Result<Generator> {
        let me = Arc::new(self.clone());
        let zero = self.value_at_origin() <= 1e-12;
        let f = Arc::clone(&me);
        Ok(
            Generator::new(move |t, y, z| f.eval(t, y, z), self.mu, self.phi.clone(), zero)?
                .with_label(format!("recovered[level {}]", self.grid.level)),
        )
    }

    /// `max |table - truth|` over the grid cells.
    pub fn max_cell_error(&self, truth: impl Fn(f64, f64, f64) -> f64) -> f64 {
        self.cells
            .iter()
            .map(|c| (c.value - truth(self.tree.time(c.time_step), c.y, c.z)).abs())
            .fold(0.0, f64::max)
    }

    /// Discrete `L^2(dt x grid)` distance between two recovered generators on
    /// the steps of this lattice and this grid's `(y, z)` points.
    pub fn l2_distance(&self, other: &RecoveredGenerator) -> f64 {
        let dt = self.tree.dt();
        let mut sum = 0.0;
        let points = self.grid.y_points.len() * self.grid.z_points.len();
        for k in 0..self.tree.steps() {
            let t = self.tree.time(k);
            for &y in &self.grid.y_points {
                for &z in &self.grid.z_points {
                    let d = self.eval(t, y, z) - other.eval(t, y, z);
                    sum += d * d * dt;
                }
            }
        }
        (sum / points as f64).sqrt()
    }

    /// (A1) with the inherited `(mu, phi)` on random pairs, plus `g(t, 0, 0) = 0`.
    pub fn check_a1(&self, samples: usize, seed: u64) -> Result<ValidationReport> {
        let radius = self
            .grid
            .y_points
            .iter()
            .chain(&self.grid.z_points)
            .fold(0.0_f64, |m, v| m.max(v.abs()))
            + 1.0;
        let mut report = check_a1_on(&self.as_generator()?, samples, radius, self.tree.horizon(), seed);
        let mut origin = ViolationTracker::new("origin_value", 1e-9);
        let v = self.value_at_origin();
        origin.record(v, || format!("|g(t, 0, 0)| = {v}"));
        report.push(origin);
        Ok(report)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time_step", "time", "y", "z", "value", "raw", "z_gap", "residual"])?;
        for c in &self.cells {
            w.write_record(&[
                c.time_step.to_string(),
                self.tree.time(c.time_step).to_string(),
                c.y.to_string(),
                c.z.to_string(),
                c.value.to_string(),
                c.raw.to_string(),
                c.z_gap.to_string(),
                c.residual.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `(E_{t,t+h}[y + z (B_{t+h} - B_t)] - y) / (h dt)` at the central node of layer `t`.
pub fn quick_recover(e: &Evaluation, t_step: usize, y: f64, z: f64, h_steps: usize) -> Result<f64> {
    let tree = *e.tree();
    if h_steps == 0 || t_step + h_steps > tree.steps() {
        return Err(Error::Parameter(format!(
            "probe window [{t_step}, {}] must be nonempty and within N = {}",
            t_step + h_steps,
            tree.steps()
        )));
    }
    let anchor = t_step / 2;
    let origin = tree.brownian(t_step, anchor);
    let end = t_step + h_steps;
    let mut layer: Vec<f64> = (0..=h_steps)
        .map(|i| y + z * (tree.brownian(end, anchor + i) - origin))
        .collect();
    for k in (t_step..end).rev() {
        let width = k - t_step;
        layer = (0..=width)
            .map(|i| e.step(k, anchor + i, layer[i], layer[i + 1]))
            .collect::<Result<_>>()?;
    }
    Ok((layer[0] - y) / (h_steps as f64 * tree.dt()))
}

/// Reprices random smooth claims with the black box and with `g_rec`.
///
/// Claims are `a + b tanh(c B_t)` with `|a|, |b| <= 1/2`, `c in [1/2, 2]`, over
/// spans of at most `N/4` steps, so values and `Z` stay inside `[-2, 2]`.
pub fn verify_representation(
    e: &Evaluation,
    g_rec: &RecoveredGenerator,
    trials: usize,
    seed: u64,
    threshold: f64,
) -> Result<ValidationReport> {
    let tree = *e.tree();
    if g_rec.tree != tree {
        return Err(Error::Shape("recovered generator lives on a different lattice".into()));
    }
    let rec = Evaluation::from_generator(tree, g_rec.as_generator()?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = tree.steps();
    let mut gap = ViolationTracker::new("representation_gap", threshold);
    for trial in 0..trials {
        let span = rng.gen_range(1..=(n / 4).max(1));
        let t = rng.gen_range(span..=n);
        let s = t - span;
        let (a, b, c) = (
            rng.gen_range(-0.5..=0.5),
            rng.gen_range(-0.5..=0.5),
            rng.gen_range(0.5..=2.0),
        );
        let x: Vec<f64> = tree.brownian_layer(t).iter().map(|w| a + b * (c * w).tanh()).collect();
        let lhs = e.evaluate(s, t, &x, None)?;
        let rhs = rec.evaluate(s, t, &x, None)?;
        for (j, (l, r)) in lhs.iter().zip(&rhs).enumerate() {
            let d = (l - r).abs();
            gap.record(d, || format!("trial {trial}: gap {d} at ({s}, {j}), t = {t}"));
        }
    }
    let mut report = ValidationReport::new("representation");
    report.push(gap);
    Ok(report)
}
