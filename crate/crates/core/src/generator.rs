//! BSDE drivers `g(t, y, z)` and their Lipschitz regularizations.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::modulus::Modulus;
use crate::report::{ValidationReport, ViolationTracker};

pub type DriverFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

/// A driver together with its declared regularity constants.
///
/// `mu` is the Lipschitz constant in y and `phi` the modulus of continuity in z.
#[derive(Clone)]
pub struct Generator {
    driver: DriverFn,
    mu: f64,
    phi: Modulus,
    zero_at_zero: bool,
    lipschitz_z: Option<f64>,
    label: String,
}

impl fmt::Debug for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Generator")
            .field("label", &self.label)
            .field("mu", &self.mu)
            .field("phi", self.phi.kind())
            .field("nu", &self.phi.nu())
            .field("zero_at_zero", &self.zero_at_zero)
            .field("lipschitz_z", &self.lipschitz_z)
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Plus,
    Minus,
}

impl Generator {
    pub fn new(
        driver: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        mu: f64,
        phi: Modulus,
        zero_at_zero: bool,
    ) -> Result<Self> {
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(Error::Parameter(format!("mu must be finite and nonnegative, got {mu}")));
        }
        Ok(Self {
            driver: Arc::new(driver),
            mu,
            phi,
            zero_at_zero,
            lipschitz_z: None,
            label: "custom".into(),
        })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn with_lipschitz_z(mut self, l: f64) -> Self {
        self.lipschitz_z = Some(l);
        self
    }

    pub fn zero() -> Self {
        Self::new(|_, _, _| 0.0, 0.0, Modulus::zero(), true)
            .unwrap()
            .with_lipschitz_z(0.0)
            .with_label("zero")
    }

    /// `a*y + b*z + c` with constant coefficients.
    pub fn linear(a: f64, b: f64, c: f64) -> Result<Self> {
        let phi = Modulus::scaled(b.abs())?;
        Ok(Self::new(move |_, y, z| a * y + b * z + c, a.abs(), phi, c == 0.0)?
            .with_lipschitz_z(b.abs())
            .with_label(format!("linear({a},{b},{c})")))
    }

    #[inline]
    pub fn eval(&self, t: f64, y: f64, z: f64) -> f64 {
        (self.driver)(t, y, z)
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn phi(&self) -> &Modulus {
        &self.phi
    }

    pub fn zero_at_zero(&self) -> bool {
        self.zero_at_zero
    }

    pub fn lipschitz_z(&self) -> Option<f64> {
        self.lipschitz_z
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// `g(t, y - shift(t), z)`: the driver seen by the shifted problem `Y + K`.
    pub fn shifted(&self, shift: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        let inner = self.driver.clone();
        Self {
            driver: Arc::new(move |t, y, z| inner(t, y - shift(t), z)),
            mu: self.mu,
            phi: self.phi.clone(),
            zero_at_zero: false,
            lipschitz_z: self.lipschitz_z,
            label: format!("{}^K", self.label),
        }
    }

    /// Pointwise sum of two drivers; constants add.
    pub fn plus(&self, other: &Generator) -> Result<Self> {
        let (f, g) = (self.driver.clone(), other.driver.clone());
        let (pf, pg) = (self.phi.clone(), other.phi.clone());
        let phi = Modulus::custom(move |x| pf.value(x) + pg.value(x), self.phi.nu() + other.phi.nu())?;
        let mut out = Self::new(
            move |t, y, z| f(t, y, z) + g(t, y, z),
            self.mu + other.mu,
            phi,
            self.zero_at_zero && other.zero_at_zero,
        )?;
        out.lipschitz_z = match (self.lipschitz_z, other.lipschitz_z) {
            (Some(a), Some(b)) => Some(a + b),
            _ => None,
        };
        out.label = format!("{}+{}", self.label, other.label);
        Ok(out)
    }
}

/// `mu|y| + phi(|z|)` (plus) or `-mu|y| - phi(|z|)` (minus).
pub fn make_mu_phi(mu: f64, phi: Modulus, sign: Sign) -> Result<Generator> {
    let p = phi.clone();
    let s = match sign {
        Sign::Plus => 1.0,
        Sign::Minus => -1.0,
    };
    let label = match sign {
        Sign::Plus => format!("mu_phi({mu})"),
        Sign::Minus => format!("neg_mu_phi({mu})"),
    };
    let lip = phi.lipschitz();
    let mut g = Generator::new(move |_, y, z| s * (mu * y.abs() + p.value(z.abs())), mu, phi, true)?.with_label(label);
    g.lipschitz_z = lip;
    Ok(g)
}

/// Finite surrogate for the rational lattice in the (a, b) plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvolutionLattice {
    radius: f64,
    spacing: f64,
}

impl ConvolutionLattice {
    pub fn new(radius: f64, spacing: f64) -> Result<Self> {
        if !(radius > 0.0 && spacing > 0.0 && spacing <= radius && radius.is_finite()) {
            return Err(Error::Parameter(format!(
                "lattice needs 0 < spacing <= radius, got radius={radius}, spacing={spacing}"
            )));
        }
        Ok(Self { radius, spacing })
    }

    /// Default lattice for a query point: `R = 8 max(1, |y|, |z|)`, `delta = R / 2048`.
    pub fn for_point(y: f64, z: f64) -> Self {
        let radius = 8.0 * 1f64.max(y.abs()).max(z.abs());
        Self {
            radius,
            spacing: radius / 2048.0,
        }
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    fn last_index(&self) -> i64 {
        (2.0 * self.radius / self.spacing).floor() as i64
    }

    #[inline]
    fn point(&self, i: i64) -> f64 {
        -self.radius + i as f64 * self.spacing
    }

    fn nearest(&self, x: f64) -> i64 {
        (((x + self.radius) / self.spacing).round() as i64).clamp(0, self.last_index())
    }

    /// Index range of lattice points within `half_width` of `x`.
    fn window(&self, x: f64, half_width: f64) -> (i64, i64) {
        let lo = ((x - half_width + self.radius) / self.spacing).floor() as i64;
        let hi = ((x + half_width + self.radius) / self.spacing).ceil() as i64;
        (lo.max(0), hi.min(self.last_index()))
    }
}

#[derive(Clone, Copy)]
enum Envelope {
    Lower,
    Upper,
}

fn convolve(g: &Generator, m: f64, lattice: &ConvolutionLattice, t: f64, y: f64, z: f64, env: Envelope) -> Result<f64> {
    let (mu, nu) = (g.mu(), g.phi().nu());
    if !(m > mu.max(nu)) {
        return Err(Error::Parameter(format!(
            "convolution slope m={m} must exceed max(mu, nu) = {}",
            mu.max(nu)
        )));
    }
    let half = lattice.radius() / 2.0;
    if !(y.abs() <= half && z.abs() <= half) {
        return Err(Error::Parameter(format!(
            "query ({y}, {z}) outside half the lattice radius {}",
            lattice.radius()
        )));
    }
    let (ia, ib) = (lattice.nearest(y), lattice.nearest(z));
    let (a0, b0) = (lattice.point(ia), lattice.point(ib));
    let sign = match env {
        Envelope::Lower => 1.0,
        Envelope::Upper => -1.0,
    };
    let objective = |a: f64, b: f64| g.eval(t, a, b) + sign * m * ((y - a).abs() + (z - b).abs());
    let mut best = objective(a0, b0);

    // Any point that can beat the nearest lattice point lies in the diamond
    // (m - mu)|a - y| + (m - nu)|b - z| <= budget, by (A1) and linear growth of phi.
    let budget = (m + mu) * (y - a0).abs() + (m + nu) * (z - b0).abs() + nu;
    let (alo, ahi) = lattice.window(y, budget / (m - mu));
    let (blo, bhi) = lattice.window(z, budget / (m - nu));
    for i in alo..=ahi {
        let a = lattice.point(i);
        let rest = budget - (m - mu) * (a - y).abs();
        if rest < 0.0 {
            continue;
        }
        let (lo, hi) = lattice.window(z, rest / (m - nu));
        for j in lo.max(blo)..=hi.min(bhi) {
            let v = objective(a, lattice.point(j));
            match env {
                Envelope::Lower => best = best.min(v),
                Envelope::Upper => best = best.max(v),
            }
        }
    }
    Ok(best)
}

/// Lower Lipschitz approximant: `min_{(a,b)} g(t,a,b) + m(|y-a| + |z-b|)` over the lattice.
pub fn inf_convolution(g: &Generator, m: f64, lattice: &ConvolutionLattice, t: f64, y: f64, z: f64) -> Result<f64> {
    convolve(g, m, lattice, t, y, z, Envelope::Lower)
}

/// Upper Lipschitz approximant: `max_{(a,b)} g(t,a,b) - m(|y-a| + |z-b|)` over the lattice.
pub fn sup_convolution(g: &Generator, m: f64, lattice: &ConvolutionLattice, t: f64, y: f64, z: f64) -> Result<f64> {
    convolve(g, m, lattice, t, y, z, Envelope::Upper)
}

/// Samples the (A1) bound on random pairs with `t` in `[0, 1]`.
pub fn check_a1(g: &Generator, sample_count: usize, domain_radius: f64, seed: u64) -> ValidationReport {
    check_a1_on(g, sample_count, domain_radius, 1.0, seed)
}

/// As [`check_a1`] with `t` drawn from `[0, horizon]`.
///
/// A third of the pairs perturb only y, a third only z (with log-uniform gaps
/// so the modulus is probed near zero), the rest both.
pub fn check_a1_on(
    g: &Generator,
    sample_count: usize,
    domain_radius: f64,
    horizon: f64,
    seed: u64,
) -> ValidationReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = domain_radius;
    let mut bound = ViolationTracker::new("a1_bound", 1e-10);
    let mut finite = ViolationTracker::new("finite", 0.0);
    let mut a3 = ViolationTracker::new("zero_at_zero", 1e-12);
    for i in 0..sample_count {
        let t = rng.gen_range(0.0..=horizon);
        let y1 = rng.gen_range(-r..=r);
        let z1 = rng.gen_range(-r..=r);
        let gap = 10f64.powf(rng.gen_range(-4.0..0.0)) * 2.0 * r;
        let (y2, z2) = match i % 3 {
            0 => ((y1 + gap * if rng.gen() { 1.0 } else { -1.0 }).clamp(-r, r), z1),
            1 => (y1, (z1 + gap * if rng.gen() { 1.0 } else { -1.0 }).clamp(-r, r)),
            _ => (rng.gen_range(-r..=r), rng.gen_range(-r..=r)),
        };
        let (g1, g2) = (g.eval(t, y1, z1), g.eval(t, y2, z2));
        finite.record(if g1.is_finite() && g2.is_finite() { 0.0 } else { 1.0 }, || {
            format!("t={t}, ({y1}, {z1}) or ({y2}, {z2})")
        });
        let rhs = g.mu() * (y1 - y2).abs() + g.phi().value((z1 - z2).abs());
        bound.record((g1 - g2).abs() - rhs, || {
            format!("t={t}, (y,z)=({y1}, {z1}) vs ({y2}, {z2})")
        });
        if g.zero_at_zero() {
            let v = g.eval(t, 0.0, 0.0);
            a3.record(v.abs(), || format!("g({t}, 0, 0) = {v}"));
        }
    }
    let mut report = ValidationReport::new(format!("a1[{}]", g.label()));
    report.push(bound);
    report.push(finite);
    if g.zero_at_zero() {
        report.push(a3);
    }
    report
}

/// Bilinear interpolation on a rectangular (y, z) grid with linear extrapolation.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearTable {
    ys: Vec<f64>,
    zs: Vec<f64>,
    /// Row-major: `values[iy * zs.len() + iz]`.
    values: Vec<f64>,
}

fn bracket(grid: &[f64], x: f64) -> (usize, f64) {
    if grid.len() == 1 {
        return (0, 0.0);
    }
    let i = match grid.partition_point(|&g| g <= x) {
        0 => 0,
        p => (p - 1).min(grid.len() - 2),
    };
    (i, (x - grid[i]) / (grid[i + 1] - grid[i]))
}

impl BilinearTable {
    pub fn new(ys: Vec<f64>, zs: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let ascending = |v: &[f64]| !v.is_empty() && v.windows(2).all(|w| w[0] < w[1]);
        if !ascending(&ys) || !ascending(&zs) {
            return Err(Error::Parameter(
                "table axes must be nonempty and strictly ascending".into(),
            ));
        }
        if values.len() != ys.len() * zs.len() {
            return Err(Error::Shape(format!(
                "table has {} values for a {}x{} grid",
                values.len(),
                ys.len(),
                zs.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("table values must be finite".into()));
        }
        Ok(Self { ys, zs, values })
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn zs(&self) -> &[f64] {
        &self.zs
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, iy: usize, iz: usize) -> f64 {
        self.values[iy * self.zs.len() + iz]
    }

    pub fn interpolate(&self, y: f64, z: f64) -> f64 {
        let (iy, u) = bracket(&self.ys, y);
        let (iz, v) = bracket(&self.zs, z);
        let ny = if self.ys.len() > 1 { iy + 1 } else { iy };
        let nz = if self.zs.len() > 1 { iz + 1 } else { iz };
        let f00 = self.at(iy, iz);
        let f01 = self.at(iy, nz);
        let f10 = self.at(ny, iz);
        let f11 = self.at(ny, nz);
        (1.0 - u) * ((1.0 - v) * f00 + v * f01) + u * ((1.0 - v) * f10 + v * f11)
    }
}

/// Time-independent driver given by a bilinear table and declared constants.
pub fn custom_table(table: BilinearTable, mu: f64, phi: Modulus) -> Result<Generator> {
    let zero = table.interpolate(0.0, 0.0).abs() < 1e-12;
    Ok(Generator::new(move |_, y, z| table.interpolate(y, z), mu, phi, zero)?.with_label("custom_table"))
}
