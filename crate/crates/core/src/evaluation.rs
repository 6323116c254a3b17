//! Nonlinear evaluations on the lattice.
//!
//! An evaluation is described by its one-step map `E_{k,k+1}` at node `(k, j)`:
//! the value at the node given the two child values. Multi-step and stopped
//! evaluations are compositions of one-step calls.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::generator::{make_mu_phi, Generator, Sign};
use crate::modulus::Modulus;
use crate::report::{ValidationReport, ViolationTracker};
use crate::solver::{implicit_step, last_live_step, IntegrandK, SolverSettings};
use crate::tree::{AdaptedProcess, BinomialTree, LatticeStoppingTime};

pub const AXIOM_TOL: f64 = 1e-10;
pub const MARTINGALE_TOL: f64 = 1e-9;

/// One-step oracle `(step, node, down, up) -> value at (step, node)`.
pub type OneStepFn = Arc<dyn Fn(usize, usize, f64, f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum Backend {
    Generator(Generator),
    BlackBox(OneStepFn),
}

impl fmt::Debug for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Generator(g) => f.debug_tuple("Generator").field(g).finish(),
            Self::BlackBox(_) => f.write_str("BlackBox"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    tree: BinomialTree,
    backend: Backend,
    mu: f64,
    phi: Modulus,
    settings: SolverSettings,
}

impl Evaluation {
    /// `E^g`, dominated by the generator's own `(mu, phi)`.
    pub fn from_generator(tree: BinomialTree, g: Generator) -> Result<Self> {
        if g.mu() * tree.dt() >= 1.0 {
            return Err(Error::Parameter(format!(
                "mu*dt = {} must be below 1",
                g.mu() * tree.dt()
            )));
        }
        let (mu, phi) = (g.mu(), g.phi().clone());
        Ok(Self {
            tree,
            backend: Backend::Generator(g),
            mu,
            phi,
            settings: SolverSettings::default(),
        })
    }

    pub fn black_box(
        tree: BinomialTree,
        oracle: impl Fn(usize, usize, f64, f64) -> f64 + Send + Sync + 'static,
        mu: f64,
        phi: Modulus,
    ) -> Result<Self> {
        if !(mu >= 0.0 && mu * tree.dt() < 1.0) {
            return Err(Error::Parameter(format!("declared mu = {mu} needs 0 <= mu*dt < 1")));
        }
        Ok(Self {
            tree,
            backend: Backend::BlackBox(Arc::new(oracle)),
            mu,
            phi,
            settings: SolverSettings::default(),
        })
    }

    /// Replaces the declared domination pair.
    pub fn with_declared(mut self, mu: f64, phi: Modulus) -> Result<Self> {
        if !(mu >= 0.0 && mu * self.tree.dt() < 1.0) {
            return Err(Error::Parameter(format!("declared mu = {mu} needs 0 <= mu*dt < 1")));
        }
        self.mu = mu;
        self.phi = phi;
        Ok(self)
    }

    pub fn with_settings(mut self, settings: SolverSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn tree(&self) -> &BinomialTree {
        &self.tree
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    pub fn declared_mu(&self) -> f64 {
        self.mu
    }

    pub fn declared_phi(&self) -> &Modulus {
        &self.phi
    }

    /// Hides the driver behind the one-step oracle.
    pub fn into_black_box(self) -> Self {
        match self.backend {
            Backend::BlackBox(_) => self,
            Backend::Generator(g) => {
                let (tree, settings) = (self.tree, self.settings);
                let oracle = move |k, j, d, u| match implicit_step(&tree, &g, k, j, d, u, 0.0, &settings) {
                    Ok((y, _, _)) => y,
                    Err(_) => f64::NAN,
                };
                Self {
                    tree,
                    backend: Backend::BlackBox(Arc::new(oracle)),
                    mu: self.mu,
                    phi: self.phi,
                    settings,
                }
            }
        }
    }

    /// `E^{mu,phi}` for the declared pair.
    pub fn dominating(&self, sign: Sign) -> Result<Self> {
        let g = make_mu_phi(self.mu, self.phi.clone(), sign)?;
        Self::from_generator(self.tree, g)
    }

    /// `E_{k,k+1}` at node `(k, j)`.
    #[inline]
    pub fn step(&self, k: usize, j: usize, down: f64, up: f64) -> Result<f64> {
        match &self.backend {
            Backend::Generator(g) => implicit_step(&self.tree, g, k, j, down, up, 0.0, &self.settings).map(|r| r.0),
            Backend::BlackBox(f) => {
                let v = f(k, j, down, up);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::Convergence {
                        step: k,
                        node: j,
                        iterations: 0,
                    })
                }
            }
        }
    }

    /// One step of `E[.; K]`: the claim is shifted by `gamma_k dt`.
    #[inline]
    pub fn step_k(&self, k: usize, j: usize, down: f64, up: f64, gamma: f64) -> Result<f64> {
        let shift = gamma * self.tree.dt();
        self.step(k, j, down + shift, up + shift)
    }

    /// Applies the one-step map to a whole layer at step `k + 1`.
    pub fn step_layer(&self, k: usize, next: &[f64], kk: Option<&IntegrandK>) -> Result<Vec<f64>> {
        (0..=k)
            .map(|j| {
                let g = kk.map_or(0.0, |kk| kk.density(k, j));
                self.step_k(k, j, next[j], next[j + 1], g)
            })
            .collect()
    }

    fn check_layer(&self, t: usize, x: &[f64]) -> Result<()> {
        if t > self.tree.steps() {
            return Err(Error::Parameter(format!(
                "step {t} beyond horizon {}",
                self.tree.steps()
            )));
        }
        if x.len() != t + 1 {
            return Err(Error::Shape(format!(
                "claim at step {t} needs {} values, got {}",
                t + 1,
                x.len()
            )));
        }
        Ok(())
    }

    /// `E_{s,t}[X; K]` for a claim `X` given on layer `t`.
    pub fn evaluate(&self, s: usize, t: usize, x: &[f64], k: Option<&IntegrandK>) -> Result<Vec<f64>> {
        self.evaluate_layers(s, t, x, k).map(|mut l| l.pop().unwrap())
    }

    /// Every intermediate layer of `E_{r,t}[X; K]` for `r = t, t-1, ..., s`.
    pub fn evaluate_layers(&self, s: usize, t: usize, x: &[f64], k: Option<&IntegrandK>) -> Result<Vec<Vec<f64>>> {
        self.check_layer(t, x)?;
        if s > t {
            return Err(Error::Parameter(format!("need s <= t, got s = {s}, t = {t}")));
        }
        let mut out = vec![x.to_vec()];
        for step in (s..t).rev() {
            let next = self.step_layer(step, out.last().unwrap(), k)?;
            out.push(next);
        }
        Ok(out)
    }

    /// `E_{., tau}[X; K]` on every node reachable before `tau`, frozen at `X` on stopping nodes.
    ///
    /// Read the result on the stopping nodes of `sigma`. Fails when `sigma > tau` on some path.
    pub fn evaluate_stopped(
        &self,
        sigma: &LatticeStoppingTime,
        tau: &LatticeStoppingTime,
        x: &AdaptedProcess,
        k: Option<&IntegrandK>,
    ) -> Result<AdaptedProcess> {
        if let Some((s, j)) = sigma.precedes(tau) {
            return Err(Error::Precondition(format!("sigma > tau on a path through ({s}, {j})")));
        }
        self.evaluate_until(tau, x, k)
    }

    /// The stopped evaluation started from `tau.start()`.
    pub fn evaluate_until(
        &self,
        tau: &LatticeStoppingTime,
        x: &AdaptedProcess,
        k: Option<&IntegrandK>,
    ) -> Result<AdaptedProcess> {
        if tau.steps() != self.tree.steps() || x.steps() != self.tree.steps() {
            return Err(Error::Shape("stopping time or claim on a different tree".into()));
        }
        let reach = tau.reachable();
        let mut y = AdaptedProcess::zeros(&self.tree);
        let last = last_live_step(tau, &reach);
        for step in (tau.start()..=last).rev() {
            for j in 0..=step {
                if !reach[step][j] {
                    continue;
                }
                let v = if tau.is_stop_node(step, j) {
                    x.get(step, j)
                } else {
                    let g = k.map_or(0.0, |kk| kk.density(step, j));
                    self.step_k(step, j, y.get(step + 1, j), y.get(step + 1, j + 1), g)?
                };
                y.set(step, j, v);
            }
        }
        Ok(y)
    }
}

/// Values of `process` at the stopping nodes of `sigma`, as `(step, node, value)`.
pub fn values_at(sigma: &LatticeStoppingTime, process: &AdaptedProcess) -> Vec<(usize, usize, f64)> {
    sigma
        .stopping_nodes()
        .into_iter()
        .map(|(k, j)| (k, j, process.get(k, j)))
        .collect()
}

fn random_layer(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-scale..=scale)).collect()
}

/// Nodes of layer `t` reachable from node `(s, j)`.
fn in_cone(s: usize, j: usize, t: usize, i: usize) -> bool {
    i >= j && i <= j + (t - s)
}

/// Randomized check of monotonicity, `E_{t,t} = id`, consistency, the 0-1 law,
/// `E[0] = 0` and the 0-1 law with zero outside the set.
pub fn check_axioms(e: &Evaluation, trials: usize, seed: u64) -> Result<ValidationReport> {
    if trials == 0 {
        return Err(Error::Parameter("trials must be at least 1".into()));
    }
    let n = e.tree.steps();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mono = ViolationTracker::new("monotonicity", AXIOM_TOL);
    let mut ident = ViolationTracker::new("identity", AXIOM_TOL);
    let mut cons = ViolationTracker::new("consistency", AXIOM_TOL);
    let mut zero_one = ViolationTracker::new("zero_one_law", AXIOM_TOL);
    let mut h2 = ViolationTracker::new("zero_preserving", AXIOM_TOL);
    let mut h3 = ViolationTracker::new("zero_one_law_strict", AXIOM_TOL);

    for trial in 0..trials {
        let t = rng.gen_range(0..=n);
        let s = rng.gen_range(0..=t);
        let r = rng.gen_range(0..=s);
        let xi = random_layer(&mut rng, t + 1, 2.0);
        let eta: Vec<f64> = xi.iter().map(|v| v - rng.gen_range(0.0..1.0)).collect();

        let e_xi = e.evaluate(s, t, &xi, None)?;
        let e_eta = e.evaluate(s, t, &eta, None)?;
        for j in 0..=s {
            let v = e_eta[j] - e_xi[j];
            mono.record(v, || {
                format!("trial {trial}: E[eta] - E[xi] = {v} at ({s}, {j}), t = {t}")
            });
        }

        let same = e.evaluate(t, t, &xi, None)?;
        let v = same.iter().zip(&xi).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        ident.record(v, || format!("trial {trial}: |E_tt[xi] - xi| = {v} at t = {t}"));

        let direct = e.evaluate(r, t, &xi, None)?;
        let nested = e.evaluate(r, s, &e_xi, None)?;
        let v = direct
            .iter()
            .zip(&nested)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        cons.record(v, || {
            format!("trial {trial}: consistency gap {v} for r = {r}, s = {s}, t = {t}")
        });

        let zero = e.evaluate(s, t, &vec![0.0; t + 1], None)?;
        let v = zero.iter().fold(0.0_f64, |m, a| m.max(a.abs()));
        h2.record(v, || format!("trial {trial}: |E[0]| = {v} at step {s}, t = {t}"));

        // A = random union of step-s nodes. On the cone of each s-node the
        // claim 1_A xi is xi (inside A) or 0 (outside A); everything off the
        // cone is replaced by noise, which a local evaluation must ignore.
        for j in 0..=s {
            let in_a = rng.gen_bool(0.5);
            let noise = random_layer(&mut rng, t + 1, 5.0);
            let claim: Vec<f64> = (0..=t)
                .map(|i| {
                    if !in_cone(s, j, t, i) {
                        noise[i]
                    } else if in_a {
                        xi[i]
                    } else {
                        0.0
                    }
                })
                .collect();
            let v_claim = e.evaluate(s, t, &claim, None)?[j];
            if in_a {
                let v = (v_claim - e_xi[j]).abs();
                zero_one.record(v, || format!("trial {trial}: 0-1 law gap {v} at ({s}, {j}), t = {t}"));
                h3.record(v, || format!("trial {trial}: 0-1 law gap {v} at ({s}, {j}), t = {t}"));
            } else {
                // 1_A E[xi] and 1_A E[1_A xi] both vanish here.
                zero_one.record(0.0, String::new);
                let v = v_claim.abs();
                h3.record(v, || {
                    format!("trial {trial}: E[1_A xi] = {v} off A at ({s}, {j}), t = {t}")
                });
            }
        }
    }

    let mut report = ValidationReport::new("axioms");
    for tr in [mono, ident, cons, zero_one, h2, h3] {
        report.push(tr);
    }
    Ok(report)
}

/// Randomized two-sided domination check
/// `E^{-mu,-phi}[X - X'; K - K'] <= E[X; K] - E[X'; K'] <= E^{mu,phi}[X - X'; K - K']`.
pub fn check_domination(e: &Evaluation, trials: usize, seed: u64) -> Result<ValidationReport> {
    if trials == 0 {
        return Err(Error::Parameter("trials must be at least 1".into()));
    }
    let n = e.tree.steps();
    let upper = e.dominating(Sign::Plus)?;
    let lower = e.dominating(Sign::Minus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut up = ViolationTracker::new("dominated_above", AXIOM_TOL);
    let mut lo = ViolationTracker::new("dominated_below", AXIOM_TOL);
    for trial in 0..trials {
        let t = rng.gen_range(1..=n);
        let s = rng.gen_range(0..t);
        let x = random_layer(&mut rng, t + 1, 2.0);
        let xp = random_layer(&mut rng, t + 1, 2.0);
        let kg = IntegrandK::new(AdaptedProcess::from_fn(&e.tree, |_, _| rng.gen_range(-1.0..1.0)))?;
        let kpg = IntegrandK::new(AdaptedProcess::from_fn(&e.tree, |_, _| rng.gen_range(-1.0..1.0)))?;
        let dk = IntegrandK::new(kg.gamma().zip_with(kpg.gamma(), |a, b| a - b))?;
        let dx: Vec<f64> = x.iter().zip(&xp).map(|(a, b)| a - b).collect();

        let a = e.evaluate(s, t, &x, Some(&kg))?;
        let b = e.evaluate(s, t, &xp, Some(&kpg))?;
        let hi = upper.evaluate(s, t, &dx, Some(&dk))?;
        let low = lower.evaluate(s, t, &dx, Some(&dk))?;
        for j in 0..=s {
            let mid = a[j] - b[j];
            let v = mid - hi[j];
            up.record(v, || {
                format!("trial {trial}: difference {mid} above {} at ({s}, {j}), t = {t}", hi[j])
            });
            let v = low[j] - mid;
            lo.record(v, || {
                format!(
                    "trial {trial}: difference {mid} below {} at ({s}, {j}), t = {t}",
                    low[j]
                )
            });
        }
    }
    let mut report = ValidationReport::new("domination");
    report.push(up);
    report.push(lo);
    Ok(report)
}

/// `|E_{s,t}[X]| <= E^{mu,phi}_{s,t}[|X|]` on every layer between `s` and `t`.
pub fn absolute_bound(e: &Evaluation, s: usize, t: usize, x: &[f64]) -> Result<ValidationReport> {
    let upper = e.dominating(Sign::Plus)?;
    let abs: Vec<f64> = x.iter().map(|v| v.abs()).collect();
    let lhs = e.evaluate_layers(s, t, x, None)?;
    let rhs = upper.evaluate_layers(s, t, &abs, None)?;
    let mut tracker = ViolationTracker::new("absolute_bound", AXIOM_TOL);
    for (i, (l, r)) in lhs.iter().zip(&rhs).enumerate() {
        let step = t - i;
        for j in 0..=step {
            let v = l[j].abs() - r[j];
            tracker.record(v, || format!("|E[X]| = {} above {} at ({step}, {j})", l[j].abs(), r[j]));
        }
    }
    let mut report = ValidationReport::new("absolute_bound");
    report.push(tracker);
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MartingaleKind {
    Martingale,
    Supermartingale,
    Submartingale,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MartingaleVerdict {
    pub kind: MartingaleKind,
    /// Largest `E_{s,t}[Y_t; K] - Y_s`; positive values rule out supermartingales.
    pub max_excess: f64,
    /// Largest `Y_s - E_{s,t}[Y_t; K]`; positive values rule out submartingales.
    pub max_deficit: f64,
    /// Signed gap of largest magnitude.
    pub worst_violation: f64,
    /// `(s, t, node)` where `worst_violation` occurs.
    pub witness: Option<(usize, usize, usize)>,
}

/// Compares `E_{s,t}[Y_t; K]` with `Y_s` for all `s < t` on multiples of `stride` (plus `N`).
pub fn classify(
    e: &Evaluation,
    y: &AdaptedProcess,
    k: Option<&IntegrandK>,
    stride: usize,
) -> Result<MartingaleVerdict> {
    classify_with_tol(e, y, k, stride, MARTINGALE_TOL)
}

pub fn classify_with_tol(
    e: &Evaluation,
    y: &AdaptedProcess,
    k: Option<&IntegrandK>,
    stride: usize,
    tol: f64,
) -> Result<MartingaleVerdict> {
    let n = e.tree.steps();
    if y.steps() != n {
        return Err(Error::Shape("process lives on a different tree".into()));
    }
    let stride = stride.max(1);
    let mut times: Vec<usize> = (0..=n).step_by(stride).collect();
    if *times.last().unwrap() != n {
        times.push(n);
    }
    let (mut excess, mut deficit) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut worst = 0.0_f64;
    let mut witness = None;
    for (ti, &t) in times.iter().enumerate().skip(1) {
        let layers = e.evaluate_layers(0, t, y.layer(t), k)?;
        for &s in &times[..ti] {
            let vals = &layers[t - s];
            for (j, v) in vals.iter().enumerate() {
                let d = v - y.get(s, j);
                excess = excess.max(d);
                deficit = deficit.max(-d);
                if d.abs() > worst.abs() || witness.is_none() {
                    worst = d;
                    witness = Some((s, t, j));
                }
            }
        }
    }
    let kind = if excess <= tol && deficit <= tol {
        MartingaleKind::Martingale
    } else if excess <= tol {
        MartingaleKind::Supermartingale
    } else if deficit <= tol {
        MartingaleKind::Submartingale
    } else {
        MartingaleKind::None
    };
    Ok(MartingaleVerdict {
        kind,
        max_excess: excess.max(0.0),
        max_deficit: deficit.max(0.0),
        worst_violation: worst,
        witness,
    })
}

/// `E_{sigma,tau}[Y_tau; K] <= Y_sigma` on every stopping node of `sigma`.
pub fn optional_stopping_check(
    e: &Evaluation,
    y: &AdaptedProcess,
    sigma: &LatticeStoppingTime,
    tau: &LatticeStoppingTime,
    k: Option<&IntegrandK>,
) -> Result<ValidationReport> {
    let stopped = e.evaluate_stopped(sigma, tau, y, k)?;
    let mut tracker = ViolationTracker::new("optional_stopping", MARTINGALE_TOL);
    for (s, j, v) in values_at(sigma, &stopped) {
        let d = v - y.get(s, j);
        tracker.record(d, || format!("E[Y_tau] - Y_sigma = {d} at ({s}, {j})"));
    }
    let mut report = ValidationReport::new("optional_stopping");
    report.push(tracker);
    Ok(report)
}
