//! Nonlinear evaluations, BSDEs and their generators on a recombining binomial lattice.
//!
//! The lattice ([`tree`]) carries adapted processes and node-region stopping
//! times. [`solver`] runs implicit backward induction for a driver `g`,
//! [`evaluation`] wraps one-step maps (driver-backed or black-box) and checks
//! their axioms, [`decomposition`] and [`fixed_point`] implement penalization
//! and Picard schemes on top, and [`representation`] recovers a hidden
//! generator from its evaluation.

// NaN-rejecting checks are written as negated comparisons; lattice loops index several layers at once.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod config;
pub mod decomposition;
pub mod error;
pub mod evaluation;
pub mod fixed_point;
pub mod generator;
pub mod modulus;
pub mod report;
pub mod representation;
pub mod solver;
pub mod tree;

pub use error::{Error, Result};
pub use evaluation::Evaluation;
pub use generator::{make_mu_phi, Generator, Sign};
pub use modulus::Modulus;
pub use report::{Check, ValidationReport};
pub use solver::{solve, IntegrandK, Solution};
pub use tree::{build_tree, AdaptedProcess, BinomialTree, LatticeStoppingTime};
