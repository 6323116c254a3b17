//! Recombining binomial lattice for a one-dimensional Brownian motion.
//!
//! Node `(k, j)` sits at step `k` after `j` up-moves; its Brownian value is
//! `(2j - k) sqrt(dt)`. Children of `(k, j)` are `(k+1, j)` (down) and
//! `(k+1, j+1)` (up), each with probability one half.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_STEPS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinomialTree {
    horizon: f64,
    steps: usize,
    dt: f64,
    increment: f64,
}

pub fn build_tree(horizon: f64, steps: usize) -> Result<BinomialTree> {
    BinomialTree::new(horizon, steps)
}

impl BinomialTree {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Parameter(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 || steps > MAX_STEPS {
            return Err(Error::Parameter(format!(
                "steps must be in 1..={MAX_STEPS}, got {steps}"
            )));
        }
        let dt = horizon / steps as f64;
        Ok(Self {
            horizon,
            steps,
            dt,
            increment: dt.sqrt(),
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn increment(&self) -> f64 {
        self.increment
    }

    pub fn node_count(&self) -> usize {
        (self.steps + 1) * (self.steps + 2) / 2
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    #[inline]
    pub fn brownian(&self, step: usize, up_moves: usize) -> f64 {
        (2.0 * up_moves as f64 - step as f64) * self.increment
    }

    /// Brownian values on one layer.
    pub fn brownian_layer(&self, step: usize) -> Vec<f64> {
        (0..=step).map(|j| self.brownian(step, j)).collect()
    }

    /// Finite-difference martingale-representation coefficient at the parent of `(down, up)`.
    #[inline]
    pub fn z_of(&self, down: f64, up: f64) -> f64 {
        (up - down) / (2.0 * self.increment)
    }
}

/// One real value per node on every layer `0..=N`.
///
/// Layers before a process's start step are carried but hold zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptedProcess {
    layers: Vec<Vec<f64>>,
}

impl AdaptedProcess {
    pub fn zeros(tree: &BinomialTree) -> Self {
        Self::constant(tree, 0.0)
    }

    pub fn constant(tree: &BinomialTree, c: f64) -> Self {
        Self {
            layers: (0..=tree.steps()).map(|k| vec![c; k + 1]).collect(),
        }
    }

    pub fn from_fn(tree: &BinomialTree, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        Self {
            layers: (0..=tree.steps()).map(|k| (0..=k).map(|j| f(k, j)).collect()).collect(),
        }
    }

    /// The Brownian motion itself.
    pub fn brownian(tree: &BinomialTree) -> Self {
        Self::from_fn(tree, |k, j| tree.brownian(k, j))
    }

    pub fn from_layers(tree: &BinomialTree, layers: Vec<Vec<f64>>) -> Result<Self> {
        if layers.len() != tree.steps() + 1 || layers.iter().enumerate().any(|(k, l)| l.len() != k + 1) {
            return Err(Error::Shape("layer k must hold k+1 values for k = 0..=N".into()));
        }
        Ok(Self { layers })
    }

    pub fn steps(&self) -> usize {
        self.layers.len() - 1
    }

    #[inline]
    pub fn get(&self, step: usize, node: usize) -> f64 {
        self.layers[step][node]
    }

    #[inline]
    pub fn set(&mut self, step: usize, node: usize, v: f64) {
        self.layers[step][node] = v;
    }

    pub fn layer(&self, step: usize) -> &[f64] {
        &self.layers[step]
    }

    pub fn layer_mut(&mut self, step: usize) -> &mut Vec<f64> {
        &mut self.layers[step]
    }

    pub fn set_layer(&mut self, step: usize, values: &[f64]) -> Result<()> {
        if values.len() != step + 1 {
            return Err(Error::Shape(format!(
                "layer {step} needs {} values, got {}",
                step + 1,
                values.len()
            )));
        }
        self.layers[step].copy_from_slice(values);
        Ok(())
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            layers: self.layers.iter().map(|l| l.iter().map(|&v| f(v)).collect()).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .zip(&other.layers)
                .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
                .collect(),
        }
    }

    /// Sup norm over layers `from..=to`.
    pub fn sup_norm(&self, from: usize, to: usize) -> f64 {
        self.layers[from..=to].iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().all(|v| v.is_finite())
    }

    /// CSV with columns `step, up_moves, brownian_value, value`.
    pub fn write_csv<W: Write>(&self, tree: &BinomialTree, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "up_moves", "brownian_value", "value"])?;
        for (k, layer) in self.layers.iter().enumerate() {
            for (j, v) in layer.iter().enumerate() {
                w.write_record(&[
                    k.to_string(),
                    j.to_string(),
                    tree.brownian(k, j).to_string(),
                    v.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `E[X | F_k]` from a layer at step `k + 1`.
pub fn conditional_expectation(tree: &BinomialTree, next: &[f64]) -> Result<Vec<f64>> {
    if next.len() < 2 || next.len() > tree.steps() + 1 {
        return Err(Error::Shape(format!(
            "expected a layer at step 1..={}, got {} values",
            tree.steps(),
            next.len()
        )));
    }
    Ok(next.windows(2).map(|w| 0.5 * w[0] + 0.5 * w[1]).collect())
}

/// Stopping time given by a stopping region on the lattice.
///
/// A path started at `start` stops at the first node it visits whose flag is
/// set; every node at step `N` is flagged. Regions make the stopping rule a
/// function of the current node, which is what the recombining lattice can
/// represent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeStoppingTime {
    start: usize,
    stop: Vec<Vec<bool>>,
}

impl LatticeStoppingTime {
    /// Builds from an explicit region; layer `N` is forced to stop.
    pub fn from_region(tree: &BinomialTree, start: usize, mut stop: Vec<Vec<bool>>) -> Result<Self> {
        let n = tree.steps();
        if start > n {
            return Err(Error::Parameter(format!("start step {start} beyond horizon {n}")));
        }
        if stop.len() != n + 1 || stop.iter().enumerate().any(|(k, l)| l.len() != k + 1) {
            return Err(Error::Shape("stopping region must have k+1 flags on layer k".into()));
        }
        stop[n].iter_mut().for_each(|s| *s = true);
        Ok(Self { start, stop })
    }

    /// The constant time `step`, observed from `start`.
    pub fn deterministic(tree: &BinomialTree, start: usize, step: usize) -> Result<Self> {
        if start > step || step > tree.steps() {
            return Err(Error::Parameter(format!(
                "need start <= step <= N, got {start}, {step}"
            )));
        }
        let stop = (0..=tree.steps()).map(|k| vec![k >= step; k + 1]).collect();
        Self::from_region(tree, start, stop)
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn steps(&self) -> usize {
        self.stop.len() - 1
    }

    #[inline]
    pub fn is_stop_node(&self, step: usize, node: usize) -> bool {
        self.stop[step][node]
    }

    /// Earliest step at which the time can stop.
    pub fn min_step(&self) -> usize {
        (self.start..=self.steps())
            .find(|&k| self.stop[k].iter().any(|&s| s))
            .unwrap_or(self.steps())
    }

    /// Nodes reachable by a path that has not stopped strictly before them.
    pub fn reachable(&self) -> Vec<Vec<bool>> {
        let n = self.steps();
        let mut reach: Vec<Vec<bool>> = (0..=n).map(|k| vec![false; k + 1]).collect();
        reach[self.start].iter_mut().for_each(|r| *r = true);
        for k in self.start..n {
            for j in 0..=k {
                if reach[k][j] && !self.stop[k][j] {
                    reach[k + 1][j] = true;
                    reach[k + 1][j + 1] = true;
                }
            }
        }
        reach
    }

    /// Nodes where the stopping time takes effect: reachable and flagged.
    pub fn stopping_nodes(&self) -> Vec<(usize, usize)> {
        let reach = self.reachable();
        let mut out = Vec::new();
        for k in self.start..=self.steps() {
            for j in 0..=k {
                if reach[k][j] && self.stop[k][j] {
                    out.push((k, j));
                }
            }
        }
        out
    }

    /// Stop step along an explicit path of up (`true`) / down moves started at node `(start, start_node)`.
    pub fn stop_step_on_path(&self, start_node: usize, moves: &[bool]) -> usize {
        let mut j = start_node;
        let mut k = self.start;
        loop {
            if self.stop[k][j] {
                return k;
            }
            let up = moves[k - self.start];
            k += 1;
            if up {
                j += 1;
            }
        }
    }

    /// Earlier of two stopping times with the same start.
    pub fn min(&self, other: &Self) -> Result<Self> {
        if self.start != other.start || self.steps() != other.steps() {
            return Err(Error::Parameter("stopping times must share start and horizon".into()));
        }
        let stop = self
            .stop
            .iter()
            .zip(&other.stop)
            .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| x || y).collect())
            .collect();
        Ok(Self {
            start: self.start,
            stop,
        })
    }

    /// Whether `self <= other` on every path.
    ///
    /// Walks the nodes reachable with neither time stopped; a node where only
    /// `other` stops witnesses a violation.
    pub fn precedes(&self, other: &Self) -> Option<(usize, usize)> {
        if self.start != other.start {
            return Some((self.start.min(other.start), 0));
        }
        let n = self.steps();
        let mut alive: Vec<bool> = vec![true; self.start + 1];
        for k in self.start..=n {
            let mut next = vec![false; k + 2];
            for j in 0..=k {
                if !alive[j] {
                    continue;
                }
                let (s, o) = (self.stop[k][j], other.stop[k][j]);
                if o && !s {
                    return Some((k, j));
                }
                if !s && !o && k < n {
                    next[j] = true;
                    next[j + 1] = true;
                }
            }
            alive = next;
        }
        None
    }
}

/// First step `k >= start` with `|B_k - B_start| >= barrier`, capped at `N`.
///
/// The displacement is measured from the anchor node `(start, anchor)`. Paths
/// through the other nodes of the start layer stop immediately, which keeps the
/// rule a function of the current node.
pub fn hitting_time(tree: &BinomialTree, start: usize, anchor: usize, barrier: f64) -> Result<LatticeStoppingTime> {
    if start > tree.steps() || anchor > start {
        return Err(Error::Parameter(format!(
            "anchor ({start}, {anchor}) is not a lattice node"
        )));
    }
    if !(barrier > 0.0) {
        return Err(Error::Parameter(format!("barrier must be positive, got {barrier}")));
    }
    let origin = tree.brownian(start, anchor);
    let stop = (0..=tree.steps())
        .map(|k| {
            (0..=k)
                .map(|j| {
                    if k < start {
                        false
                    } else if k == start {
                        j != anchor
                    } else {
                        // small slack so barrier = m sqrt(dt) triggers at level m
                        (tree.brownian(k, j) - origin).abs() >= barrier - 1e-12
                    }
                })
                .collect()
        })
        .collect();
    LatticeStoppingTime::from_region(tree, start, stop)
}
