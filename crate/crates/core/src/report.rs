use serde::Serialize;

/// Outcome of one named property check.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Largest observed violation (positive means the inequality was broken).
    pub worst_violation: f64,
    /// Human-readable location of the worst case, if any.
    pub witness: Option<String>,
    pub samples: usize,
}

/// A bundle of checks produced by the `check_*` operations.
#[derive(Debug, Clone, Default, Serialize, PartialEq)]
pub struct ValidationReport {
    pub subject: String,
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn new(subject: impl Into<String>) -> Self {
        Self {
            subject: subject.into(),
            checks: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect()
    }

    pub(crate) fn push(&mut self, tracker: ViolationTracker) {
        self.checks.push(tracker.finish());
    }
}

/// Accumulates the worst violation of `lhs <= rhs + tol` style assertions.
#[derive(Debug, Clone)]
pub(crate) struct ViolationTracker {
    name: String,
    tolerance: f64,
    pub(crate) worst: f64,
    pub(crate) witness: Option<String>,
    pub(crate) samples: usize,
}

impl ViolationTracker {
    pub fn new(name: impl Into<String>, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            tolerance,
            worst: f64::NEG_INFINITY,
            witness: None,
            samples: 0,
        }
    }

    /// Records `violation`, which is positive when the property fails before tolerance.
    pub fn record(&mut self, violation: f64, witness: impl FnOnce() -> String) {
        self.samples += 1;
        if violation > self.worst || violation.is_nan() {
            self.worst = if violation.is_nan() { f64::INFINITY } else { violation };
            self.witness = Some(witness());
        }
    }

    pub fn finish(self) -> Check {
        let worst = if self.samples == 0 { 0.0 } else { self.worst };
        Check {
            passed: worst <= self.tolerance,
            name: self.name,
            worst_violation: worst,
            witness: self.witness,
            samples: self.samples,
        }
    }
}
