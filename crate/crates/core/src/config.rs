//! Experiment configuration read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::Evaluation;
use crate::generator::{custom_table, make_mu_phi, BilinearTable, Generator, Sign};
use crate::modulus::Modulus;
use crate::tree::{AdaptedProcess, BinomialTree, MAX_STEPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub tree: TreeSpec,
    #[serde(default)]
    pub generator: GeneratorSpec,
    /// Domination pair announced by the evaluation; defaults to the generator's own.
    #[serde(default)]
    pub declared: Option<DeclaredSpec>,
    #[serde(default)]
    pub terminal: TerminalSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub properties: PropertiesSpec,
    #[serde(default)]
    pub dm: DmSpec,
    #[serde(default)]
    pub fixedpoint: FixedPointSpec,
    #[serde(default)]
    pub recover: RecoverSpec,
    #[serde(default)]
    pub convergence: ConvergenceSpec,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSpec {
    #[serde(default = "one")]
    pub horizon: f64,
    pub steps: usize,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModulusSpec {
    Identity,
    Scaled { c: f64 },
    Sqrt { nu: f64 },
    CappedSqrt,
    Rational { c: f64 },
    Zero,
}

impl ModulusSpec {
    pub fn build(&self) -> Result<Modulus> {
        match *self {
            Self::Identity => Ok(Modulus::identity()),
            Self::Scaled { c } => Modulus::scaled(c),
            Self::Sqrt { nu } => Modulus::sqrt(nu),
            Self::CappedSqrt => Ok(Modulus::capped_sqrt()),
            Self::Rational { c } => Modulus::rational(c),
            Self::Zero => Ok(Modulus::zero()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    #[default]
    Zero,
    /// `mu|y| + phi(|z|) + offset`; a nonzero offset breaks `g(t, 0, 0) = 0`.
    MuPhi {
        mu: f64,
        modulus: ModulusSpec,
        #[serde(default)]
        offset: f64,
    },
    NegMuPhi {
        mu: f64,
        modulus: ModulusSpec,
    },
    Linear {
        a: f64,
        b: f64,
        c: f64,
    },
    CustomTable {
        ys: Vec<f64>,
        zs: Vec<f64>,
        values: Vec<f64>,
        mu: f64,
        modulus: ModulusSpec,
    },
}

impl GeneratorSpec {
    pub fn build(&self) -> Result<Generator> {
        match self {
            Self::Zero => Ok(Generator::zero()),
            Self::MuPhi { mu, modulus, offset } => {
                let g = make_mu_phi(*mu, modulus.build()?, Sign::Plus)?;
                if *offset == 0.0 {
                    return Ok(g);
                }
                let off = *offset;
                let inner = g.clone();
                Ok(
                    Generator::new(move |t, y, z| inner.eval(t, y, z) + off, *mu, g.phi().clone(), false)?
                        .with_label(format!("mu_phi({mu}) + {off}")),
                )
            }
            Self::NegMuPhi { mu, modulus } => make_mu_phi(*mu, modulus.build()?, Sign::Minus),
            Self::Linear { a, b, c } => Generator::linear(*a, *b, *c),
            Self::CustomTable {
                ys,
                zs,
                values,
                mu,
                modulus,
            } => {
                let table = BilinearTable::new(ys.clone(), zs.clone(), values.clone())?;
                custom_table(table, *mu, modulus.build()?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeclaredSpec {
    pub mu: f64,
    pub modulus: ModulusSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalSpec {
    /// `scale * B_T`
    Brownian {
        #[serde(default = "one")]
        scale: f64,
    },
    Constant {
        value: f64,
    },
    Call {
        strike: f64,
    },
    Put {
        strike: f64,
    },
    /// `a + b tanh(c B_T)`
    Tanh {
        a: f64,
        b: f64,
        c: f64,
    },
}

impl Default for TerminalSpec {
    fn default() -> Self {
        Self::Brownian { scale: 1.0 }
    }
}

impl TerminalSpec {
    pub fn value(&self, b: f64) -> f64 {
        match *self {
            Self::Brownian { scale } => scale * b,
            Self::Constant { value } => value,
            Self::Call { strike } => (b - strike).max(0.0),
            Self::Put { strike } => (strike - b).max(0.0),
            Self::Tanh { a, b: amp, c } => a + amp * (c * b).tanh(),
        }
    }

    pub fn layer(&self, tree: &BinomialTree) -> Vec<f64> {
        tree.brownian_layer(tree.steps())
            .into_iter()
            .map(|b| self.value(b))
            .collect()
    }

    /// Process holding the claim on the last layer and zeros elsewhere.
    pub fn process(&self, tree: &BinomialTree) -> Result<AdaptedProcess> {
        let mut x = AdaptedProcess::zeros(tree);
        x.set_layer(tree.steps(), &self.layer(tree))?;
        Ok(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Constant density of `K`.
    pub gamma: f64,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            tolerance: 1e-12,
            max_iterations: 200,
            gamma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropertiesSpec {
    pub trials: usize,
    pub a1_samples: usize,
    pub a1_radius: f64,
}

impl Default for PropertiesSpec {
    fn default() -> Self {
        Self {
            trials: 200,
            a1_samples: 2000,
            a1_radius: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DmProcess {
    /// `Y_k = 1 - t_k`
    OneMinusT,
    /// Solution with the configured terminal and `K = gamma t`.
    Solved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DmSpec {
    pub process: DmProcess,
    pub gamma: f64,
    pub schedule: Option<Vec<f64>>,
    pub target_residual: f64,
    pub bound_factor: f64,
}

impl Default for DmSpec {
    fn default() -> Self {
        Self {
            process: DmProcess::OneMinusT,
            gamma: 0.5,
            schedule: None,
            target_residual: 0.05,
            bound_factor: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedPointDriver {
    /// `lambda y`
    Linear,
    /// `lambda |y|`
    Abs,
    /// `lambda sin(y)`
    Sin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixedPointSpec {
    pub lambda: f64,
    pub f: FixedPointDriver,
    pub tol: f64,
}

impl Default for FixedPointSpec {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            f: FixedPointDriver::Linear,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeSpec {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl RangeSpec {
    fn standard() -> Self {
        Self {
            lo: -2.0,
            hi: 2.0,
            count: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoverSpec {
    pub level: u32,
    pub y: RangeSpec,
    pub z: RangeSpec,
    /// Lattice sizes to recover on; defaults to `N` and `2N`.
    pub resolutions: Option<Vec<usize>>,
    pub barrier: Option<f64>,
    pub verify_trials: usize,
    /// Pass threshold for the repricing gap as a multiple of the grid error.
    pub verify_factor: f64,
    pub a1_samples: usize,
    pub interval_average: bool,
    /// Longest extraction window in lattice steps; 0 uses the whole cell.
    pub window: usize,
}

impl Default for RecoverSpec {
    fn default() -> Self {
        Self {
            level: 3,
            y: RangeSpec::standard(),
            z: RangeSpec::standard(),
            resolutions: None,
            barrier: None,
            verify_trials: 50,
            verify_factor: 10.0,
            a1_samples: 2000,
            interval_average: false,
            window: crate::representation::DEFAULT_WINDOW_STEPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceSpec {
    pub steps: Vec<usize>,
    /// Exact `Y_0`; when absent a run at 8x the finest lattice serves as reference.
    pub reference: Option<f64>,
}

impl Default for ConvergenceSpec {
    fn default() -> Self {
        Self {
            steps: vec![32, 64, 128],
            reference: None,
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Structural checks. Numerical feasibility (for instance `mu dt < 1`)
    /// is left to the engine.
    pub fn validate(&self) -> Result<()> {
        let t = &self.tree;
        if !(t.horizon > 0.0 && t.horizon.is_finite()) {
            return Err(config_err(format!("tree.horizon must be positive, got {}", t.horizon)));
        }
        if t.steps == 0 || t.steps > MAX_STEPS {
            return Err(config_err(format!(
                "tree.steps must lie in 1..={MAX_STEPS}, got {}",
                t.steps
            )));
        }
        self.generator
            .build()
            .map_err(|e| config_err(format!("generator: {e}")))?;
        if let Some(d) = &self.declared {
            d.modulus
                .build()
                .map_err(|e| config_err(format!("declared.modulus: {e}")))?;
            if !(d.mu >= 0.0 && d.mu.is_finite()) {
                return Err(config_err(format!("declared.mu must be nonnegative, got {}", d.mu)));
            }
        }
        let s = &self.solver;
        if !(s.tolerance > 0.0) || s.max_iterations == 0 || !s.gamma.is_finite() {
            return Err(config_err(
                "solver needs tolerance > 0, max_iterations > 0 and finite gamma",
            ));
        }
        if self.properties.trials == 0 || !(self.properties.a1_radius > 0.0) {
            return Err(config_err("properties needs trials > 0 and a1_radius > 0"));
        }
        if let Some(sch) = &self.dm.schedule {
            if sch.is_empty() || sch.windows(2).any(|w| !(w[0] < w[1])) || sch.iter().any(|&n| !(n > 0.0)) {
                return Err(config_err("dm.schedule must be positive and strictly ascending"));
            }
        }
        if !(self.dm.target_residual > 0.0 && self.dm.bound_factor > 0.0) {
            return Err(config_err("dm.target_residual and dm.bound_factor must be positive"));
        }
        if !(self.fixedpoint.lambda >= 0.0 && self.fixedpoint.lambda.is_finite() && self.fixedpoint.tol > 0.0) {
            return Err(config_err("fixedpoint needs lambda >= 0 and tol > 0"));
        }
        let r = &self.recover;
        for (name, range) in [("recover.y", &r.y), ("recover.z", &r.z)] {
            if range.count == 0 || !(range.lo <= range.hi) || (range.count > 1 && range.lo == range.hi) {
                return Err(config_err(format!("{name} must be a nonempty range")));
            }
        }
        if let Some(res) = &r.resolutions {
            if res.is_empty() || res.iter().any(|&n| n == 0 || n > MAX_STEPS) {
                return Err(config_err("recover.resolutions must be nonempty lattice sizes"));
            }
        }
        if r.barrier.is_some_and(|b| !(b > 0.0)) || r.verify_factor <= 0.0 {
            return Err(config_err("recover.barrier and recover.verify_factor must be positive"));
        }
        let c = &self.convergence;
        if c.steps.is_empty() || c.steps.windows(2).any(|w| w[0] >= w[1]) || c.steps[0] == 0 {
            return Err(config_err("convergence.steps must be positive and strictly ascending"));
        }
        if c.reference.is_none() && c.steps.last().unwrap() * 8 > MAX_STEPS {
            return Err(config_err(format!(
                "reference run at 8 x {} steps exceeds {MAX_STEPS}; give convergence.reference",
                c.steps.last().unwrap()
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the effective configuration,
    /// output location excluded.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn build_tree(&self) -> Result<BinomialTree> {
        BinomialTree::new(self.tree.horizon, self.tree.steps)
    }

    pub fn generator(&self) -> Result<Generator> {
        self.generator.build()
    }

    /// Evaluation backed by the configured generator, with the declared pair if given.
    pub fn evaluation(&self, tree: BinomialTree) -> Result<Evaluation> {
        let e = Evaluation::from_generator(tree, self.generator()?)?;
        match &self.declared {
            Some(d) => e.with_declared(d.mu, d.modulus.build()?),
            None => Ok(e),
        }
    }
}
