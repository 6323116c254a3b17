//! Moduli of continuity for the z-argument of a driver.
//!
//! A modulus `phi` is increasing, subadditive, vanishes at zero and grows at
//! most linearly: `phi(x) <= nu * (x + 1)`. The properties quantify over all
//! of `[0, inf)`, so they are validated on a finite check grid.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::report::{ValidationReport, ViolationTracker};

/// Slack used by every inequality check on a modulus.
pub const MODULUS_TOL: f64 = 1e-12;

#[derive(Clone)]
pub enum ModulusKind {
    Identity,
    /// `c * x`
    Scaled(f64),
    Sqrt,
    /// `min(x, sqrt(x))`
    CappedSqrt,
    /// `c * x / (1 + x)`
    Rational(f64),
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for ModulusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Identity => write!(f, "Identity"),
            Self::Scaled(c) => write!(f, "Scaled({c})"),
            Self::Sqrt => write!(f, "Sqrt"),
            Self::CappedSqrt => write!(f, "CappedSqrt"),
            Self::Rational(c) => write!(f, "Rational({c})"),
            Self::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Modulus {
    kind: ModulusKind,
    nu: f64,
    check_grid: Arc<Vec<f64>>,
}

/// 0..=1 in 5000 equal steps followed by 5000 log-spaced points up to 100.
pub fn default_check_grid() -> Vec<f64> {
    let mut grid = Vec::with_capacity(10_001);
    for i in 0..=5000 {
        grid.push(i as f64 / 5000.0);
    }
    let (lo, hi) = (0.0_f64, 100.0_f64.ln());
    for i in 1..=5000 {
        grid.push((lo + (hi - lo) * i as f64 / 5000.0).exp());
    }
    grid
}

impl Modulus {
    pub fn new(kind: ModulusKind, nu: f64) -> Result<Self> {
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::Parameter(format!(
                "linear-growth constant nu must be positive, got {nu}"
            )));
        }
        match kind {
            ModulusKind::Scaled(c) | ModulusKind::Rational(c) if !(c >= 0.0 && c.is_finite()) => {
                return Err(Error::Parameter(format!("modulus scale must be nonnegative, got {c}")));
            }
            _ => {}
        }
        Ok(Self {
            kind,
            nu,
            check_grid: Arc::new(default_check_grid()),
        })
    }

    pub fn identity() -> Self {
        Self::new(ModulusKind::Identity, 1.0).unwrap()
    }

    pub fn scaled(c: f64) -> Result<Self> {
        Self::new(ModulusKind::Scaled(c), c.max(f64::MIN_POSITIVE))
    }

    pub fn sqrt(nu: f64) -> Result<Self> {
        Self::new(ModulusKind::Sqrt, nu)
    }

    pub fn capped_sqrt() -> Self {
        Self::new(ModulusKind::CappedSqrt, 1.0).unwrap()
    }

    pub fn rational(c: f64) -> Result<Self> {
        Self::new(ModulusKind::Rational(c), c.max(f64::MIN_POSITIVE))
    }

    pub fn custom(f: impl Fn(f64) -> f64 + Send + Sync + 'static, nu: f64) -> Result<Self> {
        Self::new(ModulusKind::Custom(Arc::new(f)), nu)
    }

    /// The zero modulus, for drivers that do not depend on z.
    pub fn zero() -> Self {
        Self::new(ModulusKind::Scaled(0.0), 1.0).unwrap()
    }

    pub fn with_check_grid(mut self, grid: Vec<f64>) -> Result<Self> {
        if grid.is_empty() || grid[0] != 0.0 || grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Parameter(
                "check grid must be nonempty, strictly ascending and start at 0".into(),
            ));
        }
        self.check_grid = Arc::new(grid);
        Ok(self)
    }

    pub fn kind(&self) -> &ModulusKind {
        &self.kind
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn check_grid(&self) -> &[f64] {
        &self.check_grid
    }

    /// Global Lipschitz constant of the built-in kinds; `None` when unbounded or unknown.
    pub fn lipschitz(&self) -> Option<f64> {
        match &self.kind {
            ModulusKind::Identity | ModulusKind::CappedSqrt => Some(1.0),
            ModulusKind::Scaled(c) | ModulusKind::Rational(c) => Some(*c),
            ModulusKind::Sqrt | ModulusKind::Custom(_) => None,
        }
    }

    /// Evaluates without domain checks. Callers guarantee `x >= 0`.
    #[inline]
    pub(crate) fn value(&self, x: f64) -> f64 {
        match &self.kind {
            ModulusKind::Identity => x,
            ModulusKind::Scaled(c) => c * x,
            ModulusKind::Sqrt => x.sqrt(),
            ModulusKind::CappedSqrt => x.min(x.sqrt()),
            ModulusKind::Rational(c) => c * x / (1.0 + x),
            ModulusKind::Custom(f) => f(x),
        }
    }
}

pub fn eval_modulus(phi: &Modulus, x: f64) -> Result<f64> {
    if !(x >= 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!(
            "modulus argument must be finite and nonnegative, got {x}"
        )));
    }
    let v = phi.value(x);
    if !(v >= 0.0) || !v.is_finite() {
        return Err(Error::Domain(format!("modulus returned {v} at {x}")));
    }
    Ok(v)
}

/// Linear majorant `phi(x) <= n x + phi(2 nu / n)`, valid for `n >= 2 nu`.
///
/// Returns `(slope, intercept)` after asserting the inequality on the check grid.
pub fn fan_jiang_majorant(phi: &Modulus, n: f64) -> Result<(f64, f64)> {
    if !(n >= 2.0 * phi.nu) {
        return Err(Error::Parameter(format!(
            "majorant slope {n} must be at least 2*nu = {}",
            2.0 * phi.nu
        )));
    }
    let intercept = eval_modulus(phi, 2.0 * phi.nu / n)?;
    for &x in phi.check_grid.iter() {
        let lhs = phi.value(x);
        if lhs > n * x + intercept + MODULUS_TOL {
            return Err(Error::Domain(format!(
                "majorant fails at x={x}: phi={lhs} > {}",
                n * x + intercept
            )));
        }
    }
    Ok((n, intercept))
}

pub fn check_modulus(phi: &Modulus) -> ValidationReport {
    let grid = phi.check_grid();
    let values: Vec<f64> = grid.iter().map(|&x| phi.value(x)).collect();
    let mut report = ValidationReport::new("modulus");

    let mut zero = ViolationTracker::new("zero_at_zero", 0.0);
    zero.record(values[0].abs(), || format!("phi(0) = {}", values[0]));
    report.push(zero);

    let mut mono = ViolationTracker::new("monotone", MODULUS_TOL);
    let mut first_drop = None;
    for i in 1..grid.len() {
        let v = values[i - 1] - values[i];
        if v > MODULUS_TOL && first_drop.is_none() {
            first_drop = Some(grid[i]);
        }
        mono.record(v, || format!("x = {}", grid[i]));
    }
    if let Some(x) = first_drop {
        mono.witness = Some(format!("first violation at x = {x}"));
    }
    report.push(mono);

    // all unordered pairs; phi(a + b) is evaluated off-grid
    let mut sub = ViolationTracker::new("subadditive", MODULUS_TOL);
    let mut first_sub: Option<(f64, f64)> = None;
    for i in 0..grid.len() {
        for j in i..grid.len() {
            let v = phi.value(grid[i] + grid[j]) - values[i] - values[j];
            if v > MODULUS_TOL && first_sub.is_none() {
                first_sub = Some((grid[i], grid[j]));
            }
            if v > sub.worst || v.is_nan() {
                let (a, b) = (grid[i], grid[j]);
                sub.record(v, || format!("a = {a}, b = {b}"));
            } else {
                sub.samples += 1;
            }
        }
    }
    if let Some((a, b)) = first_sub {
        sub.witness = Some(format!("first violation at a = {a}, b = {b}"));
    }
    report.push(sub);

    let mut growth = ViolationTracker::new("linear_growth", MODULUS_TOL);
    let mut first_growth = None;
    for (x, v) in grid.iter().zip(&values) {
        let excess = v - phi.nu * (x + 1.0);
        if excess > MODULUS_TOL && first_growth.is_none() {
            first_growth = Some(*x);
        }
        growth.record(excess, || format!("x = {x}"));
    }
    if let Some(x) = first_growth {
        growth.witness = Some(format!("first violation at x = {x}"));
    }
    report.push(growth);

    report
}
