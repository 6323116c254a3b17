//! C interface to the `nleval` lattice engine.
//!
//! Every fallible call returns an [`NlStatus`]; on failure the message is
//! available from [`nl_last_error_message`] on the same thread. Handles are
//! created by `*_new` functions and released with the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use nleval::evaluation::check_axioms;
use nleval::representation::quick_recover;
use nleval::{
    build_tree, make_mu_phi, solve, AdaptedProcess, BinomialTree, Error, Evaluation, Generator, IntegrandK,
    LatticeStoppingTime, Modulus, Sign,
};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlStatus {
    Ok = 0,
    NullPointer = 1,
    Domain = 2,
    Parameter = 3,
    Shape = 4,
    Precondition = 5,
    Convergence = 6,
    NonContraction = 7,
    Picard = 8,
    ToleranceNotReached = 9,
    Recovery = 10,
    Config = 11,
    Io = 12,
    Panic = 13,
}

/// Modulus families; `param` supplies `c` for `Scaled` and `Rational`, `nu` for `Sqrt`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlModulus {
    Identity = 0,
    Scaled = 1,
    Sqrt = 2,
    CappedSqrt = 3,
    Rational = 4,
    Zero = 5,
}

/// Sign of the extremal driver `+-(mu |y| + phi(|z|))`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlSign {
    Plus = 0,
    Minus = 1,
}

/// Recombining binomial lattice.
pub struct NlTree(BinomialTree);

/// Driver `g(t, y, z)` with its declared `(mu, phi)`.
pub struct NlGenerator(Generator);

/// Lattice evaluation backed by a generator.
pub struct NlEvaluation(Evaluation);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> NlStatus {
    match err {
        Error::Domain(_) => NlStatus::Domain,
        Error::Parameter(_) => NlStatus::Parameter,
        Error::Shape(_) => NlStatus::Shape,
        Error::Precondition(_) => NlStatus::Precondition,
        Error::Convergence { .. } => NlStatus::Convergence,
        Error::NonContraction { .. } => NlStatus::NonContraction,
        Error::Picard { .. } => NlStatus::Picard,
        Error::ToleranceNotReached { .. } => NlStatus::ToleranceNotReached,
        Error::Recovery { .. } => NlStatus::Recovery,
        Error::Config(_) => NlStatus::Config,
        Error::Io(_) | Error::Csv(_) => NlStatus::Io,
    }
}

struct Fail(NlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(NlStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, records any failure and converts panics into `NlStatus::Panic`.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NlStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            NlStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn modulus(kind: NlModulus, param: f64) -> Result<Modulus, Fail> {
    Ok(match kind {
        NlModulus::Identity => Modulus::identity(),
        NlModulus::Scaled => Modulus::scaled(param)?,
        NlModulus::Sqrt => Modulus::sqrt(param)?,
        NlModulus::CappedSqrt => Modulus::capped_sqrt(),
        NlModulus::Rational => Modulus::rational(param)?,
        NlModulus::Zero => Modulus::zero(),
    })
}

/// Message of the last failure on this thread, or null if none.
///
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn nl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn nl_tree_new(horizon: f64, steps: usize, out: *mut *mut NlTree) -> NlStatus {
    guard(|| emit(out, NlTree(build_tree(horizon, steps)?)))
}

/// # Safety
/// `tree` must be null or a handle from `nl_tree_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nl_tree_free(tree: *mut NlTree) {
    if !tree.is_null() {
        drop(Box::from_raw(tree));
    }
}

/// Number of time steps, or 0 for a null handle.
///
/// # Safety
/// `tree` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nl_tree_steps(tree: *const NlTree) -> usize {
    tree.as_ref().map_or(0, |t| t.0.steps())
}

/// Total node count `(N + 1)(N + 2) / 2`, or 0 for a null handle.
///
/// # Safety
/// `tree` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nl_tree_node_count(tree: *const NlTree) -> usize {
    tree.as_ref().map_or(0, |t| t.0.node_count())
}

/// Extremal driver `sign * (mu |y| + phi(|z|))`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn nl_generator_mu_phi(
    mu: f64,
    kind: NlModulus,
    param: f64,
    sign: NlSign,
    out: *mut *mut NlGenerator,
) -> NlStatus {
    guard(|| {
        let sign = match sign {
            NlSign::Plus => Sign::Plus,
            NlSign::Minus => Sign::Minus,
        };
        emit(out, NlGenerator(make_mu_phi(mu, modulus(kind, param)?, sign)?))
    })
}

/// Linear driver `a y + b z + c`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn nl_generator_linear(a: f64, b: f64, c: f64, out: *mut *mut NlGenerator) -> NlStatus {
    guard(|| emit(out, NlGenerator(Generator::linear(a, b, c)?)))
}

/// # Safety
/// `g` must be null or a live generator handle.
#[no_mangle]
pub unsafe extern "C" fn nl_generator_free(g: *mut NlGenerator) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

unsafe fn solve_impl(
    tree: *const NlTree,
    g: *const NlGenerator,
    terminal: *const f64,
    terminal_len: usize,
    gamma: f64,
) -> Result<(BinomialTree, AdaptedProcess), Fail> {
    let tree = deref(tree, "tree")?.0;
    let g = &deref(g, "generator")?.0;
    let n = tree.steps();
    if terminal_len != n + 1 {
        return Err(Fail(
            NlStatus::Shape,
            format!("terminal layer needs {} values, got {terminal_len}", n + 1),
        ));
    }
    let mut x = AdaptedProcess::zeros(&tree);
    x.set_layer(n, input(terminal, terminal_len, "terminal")?)?;
    let k = IntegrandK::constant(&tree, gamma)?;
    let tau = LatticeStoppingTime::deterministic(&tree, 0, n)?;
    Ok((tree, solve(&tree, g, &x, &k, &tau)?.y))
}

/// Solves the BSDE to the horizon with terminal layer `terminal` (N + 1 values)
/// and constant `dK = gamma dt`; writes `Y_0`.
///
/// # Safety
/// Handles must be live; `terminal` must hold `terminal_len` doubles and
/// `out_y0` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nl_solve(
    tree: *const NlTree,
    g: *const NlGenerator,
    terminal: *const f64,
    terminal_len: usize,
    gamma: f64,
    out_y0: *mut f64,
) -> NlStatus {
    guard(|| {
        let out = output(out_y0, 1, "out_y0")?;
        let (_, y) = solve_impl(tree, g, terminal, terminal_len, gamma)?;
        out[0] = y.get(0, 0);
        Ok(())
    })
}

/// Same as `nl_solve` but writes every node, layer by layer (step 0 first),
/// into `out`, which must hold `nl_tree_node_count(tree)` doubles.
///
/// # Safety
/// Handles must be live; `terminal` must hold `terminal_len` doubles and
/// `out` must hold `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn nl_solve_layers(
    tree: *const NlTree,
    g: *const NlGenerator,
    terminal: *const f64,
    terminal_len: usize,
    gamma: f64,
    out: *mut f64,
    out_len: usize,
) -> NlStatus {
    guard(|| {
        let dst = output(out, out_len, "out")?;
        let (tree, y) = solve_impl(tree, g, terminal, terminal_len, gamma)?;
        if out_len != tree.node_count() {
            return Err(Fail(
                NlStatus::Shape,
                format!("output needs {} values, got {out_len}", tree.node_count()),
            ));
        }
        for (d, v) in dst.iter_mut().zip(y.layers().iter().flatten()) {
            *d = *v;
        }
        Ok(())
    })
}

/// Evaluation driven by a copy of `g` on a copy of `tree`.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nl_evaluation_new(
    tree: *const NlTree,
    g: *const NlGenerator,
    out: *mut *mut NlEvaluation,
) -> NlStatus {
    guard(|| {
        let tree = deref(tree, "tree")?.0;
        let g = deref(g, "generator")?.0.clone();
        emit(out, NlEvaluation(Evaluation::from_generator(tree, g)?))
    })
}

/// Replaces the declared `(mu, phi)` used by extraction and recovery.
///
/// # Safety
/// `e` must be a live evaluation handle.
#[no_mangle]
pub unsafe extern "C" fn nl_evaluation_set_declared(
    e: *mut NlEvaluation,
    mu: f64,
    kind: NlModulus,
    param: f64,
) -> NlStatus {
    guard(|| {
        let e = e.as_mut().ok_or_else(|| null("evaluation"))?;
        e.0 = e.0.clone().with_declared(mu, modulus(kind, param)?)?;
        Ok(())
    })
}

/// # Safety
/// `e` must be null or a live evaluation handle.
#[no_mangle]
pub unsafe extern "C" fn nl_evaluation_free(e: *mut NlEvaluation) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// `E_{s,t}[X]` for `X` given on layer `t` (`t + 1` values); writes layer `s` (`s + 1` values).
///
/// # Safety
/// `e` must be live; `x` must hold `x_len` doubles and `out` `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn nl_evaluate(
    e: *const NlEvaluation,
    s: usize,
    t: usize,
    x: *const f64,
    x_len: usize,
    out: *mut f64,
    out_len: usize,
) -> NlStatus {
    guard(|| {
        let e = &deref(e, "evaluation")?.0;
        let x = input(x, x_len, "x")?;
        let dst = output(out, out_len, "out")?;
        if out_len != s + 1 {
            return Err(Fail(
                NlStatus::Shape,
                format!("output needs {} values, got {out_len}", s + 1),
            ));
        }
        dst.copy_from_slice(&e.evaluate(s, t, x, None)?);
        Ok(())
    })
}

/// Runs the randomized axiom suite; writes 1 to `out_passed` if every check held.
///
/// # Safety
/// `e` must be live and `out_passed` writable.
#[no_mangle]
pub unsafe extern "C" fn nl_check_axioms(
    e: *const NlEvaluation,
    trials: usize,
    seed: u64,
    out_passed: *mut i32,
) -> NlStatus {
    guard(|| {
        let e = &deref(e, "evaluation")?.0;
        if out_passed.is_null() {
            return Err(null("out_passed"));
        }
        *out_passed = i32::from(check_axioms(e, trials, seed)?.passed());
        Ok(())
    })
}

/// Local generator estimate at `(t_step, y, z)` from a window of `h_steps` steps.
///
/// # Safety
/// `e` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nl_quick_recover(
    e: *const NlEvaluation,
    t_step: usize,
    y: f64,
    z: f64,
    h_steps: usize,
    out: *mut f64,
) -> NlStatus {
    guard(|| {
        let e = &deref(e, "evaluation")?.0;
        let dst = output(out, 1, "out")?;
        dst[0] = quick_recover(e, t_step, y, z, h_steps)?;
        Ok(())
    })
}
