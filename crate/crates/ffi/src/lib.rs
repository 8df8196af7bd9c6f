//! C interface to `tokalign`.
//!
//! Every entry point returns an `int32_t` status code. On failure the message
//! is available from [`tokalign_last_error`] on the calling thread until the
//! next call into the library from that thread. Prompt sets and class banks
//! are opaque heap handles released with their matching `_free` function.
//!
//! Matrices are row-major `double` buffers. Output buffers are written only
//! when the call succeeds.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use tokalign::alignment::{hierarchical_distance, AlignConfig, CostMode, PromptFeature, PromptSet, Side};
use tokalign::classifier::{classify, ClassBank};
use tokalign::numerics::DenseMatrix;
use tokalign::ot::{exact_ot_uniform, sinkhorn, CostMatrix, DiscreteMeasure, SinkhornSettings};
use tokalign::error::Error;

pub const TOKALIGN_OK: i32 = 0;
/// A required pointer argument was null.
pub const TOKALIGN_ERR_NULL: i32 = 1;
/// Bad shapes, weights or settings.
pub const TOKALIGN_ERR_INPUT: i32 = 2;
/// The solver diverged or produced non-finite values.
pub const TOKALIGN_ERR_NUMERICAL: i32 = 3;
/// A Rust panic was caught at the boundary. Indicates a library bug.
pub const TOKALIGN_ERR_PANIC: i32 = 4;

pub const TOKALIGN_SIDE_IMAGE: i32 = 0;
pub const TOKALIGN_SIDE_CLASS: i32 = 1;

pub const TOKALIGN_COST_ADDITIVE: i32 = 0;
pub const TOKALIGN_COST_CONVEX: i32 = 1;

/// Prompt features for one image or one class.
pub struct TokalignPromptSet(PromptSet);

/// Class prompt sets scored together by [`tokalign_classify`].
pub struct TokalignClassBank(ClassBank);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokalignAlignConfig {
    pub beta: f64,
    pub tau: f64,
    pub lambda: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub accelerated: bool,
    /// `TOKALIGN_COST_ADDITIVE` or `TOKALIGN_COST_CONVEX`.
    pub cost_mode: i32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TokalignSinkhornResult {
    pub transport_cost: f64,
    pub regularized_objective: f64,
    pub marginal_violation: f64,
    pub iterations: usize,
    pub converged: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

enum Failure {
    Null(&'static str),
    Core(Error),
    Panic(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Null(_) => TOKALIGN_ERR_NULL,
            Failure::Core(e) if e.is_numerical() => TOKALIGN_ERR_NUMERICAL,
            Failure::Core(_) => TOKALIGN_ERR_INPUT,
            Failure::Panic(_) => TOKALIGN_ERR_PANIC,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Null(what) => format!("null pointer: {what}"),
            Failure::Core(e) => e.to_string(),
            Failure::Panic(msg) => format!("internal panic: {msg}"),
        }
    }
}

fn set_last_error(msg: Option<String>) {
    let msg = msg.map(|m| CString::new(m.replace('\0', " ")).expect("interior nul removed"));
    LAST_ERROR.with(|slot| *slot.borrow_mut() = msg);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    set_last_error(None);
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|payload| {
        let msg = payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "unknown".into());
        Err(Failure::Panic(msg))
    });
    match outcome {
        Ok(()) => TOKALIGN_OK,
        Err(f) => {
            set_last_error(Some(f.message()));
            f.code()
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn reference<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn write_out<T>(p: *mut T, value: T, what: &'static str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    p.write(value);
    Ok(())
}

fn area(rows: usize, cols: usize) -> Result<usize, Failure> {
    rows.checked_mul(cols)
        .ok_or_else(|| Error::InvalidInput(format!("{rows}x{cols} overflows")).into())
}

impl TryFrom<&TokalignAlignConfig> for AlignConfig {
    type Error = Error;

    fn try_from(c: &TokalignAlignConfig) -> Result<Self, Error> {
        let cost_mode = match c.cost_mode {
            TOKALIGN_COST_ADDITIVE => CostMode::Additive,
            TOKALIGN_COST_CONVEX => CostMode::Convex,
            other => return Err(Error::InvalidInput(format!("unknown cost mode {other}"))),
        };
        let cfg = AlignConfig {
            beta: c.beta,
            tau: c.tau,
            sinkhorn: SinkhornSettings {
                lambda: c.lambda,
                max_iterations: c.max_iterations,
                tolerance: c.tolerance,
                accelerated: c.accelerated,
            },
            cost_mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Message describing the most recent failure on this thread, or null.
///
/// The string is owned by the library and stays valid until the next call
/// into the library from the same thread.
#[no_mangle]
pub extern "C" fn tokalign_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library defaults for the alignment settings.
#[no_mangle]
pub extern "C" fn tokalign_align_config_default() -> TokalignAlignConfig {
    let d = AlignConfig::default();
    TokalignAlignConfig {
        beta: d.beta,
        tau: d.tau,
        lambda: d.sinkhorn.lambda,
        max_iterations: d.sinkhorn.max_iterations,
        tolerance: d.sinkhorn.tolerance,
        accelerated: d.sinkhorn.accelerated,
        cost_mode: TOKALIGN_COST_ADDITIVE,
    }
}

/// Entropic OT between weights `a` (length `m`) and `b` (length `n`) under
/// the `m x n` cost. `plan_out` may be null; otherwise it receives `m * n`
/// values.
///
/// # Safety
/// Every non-null pointer must be valid for the lengths implied by `m` and
/// `n`.
#[no_mangle]
pub unsafe extern "C" fn tokalign_sinkhorn(
    cost: *const f64,
    m: usize,
    n: usize,
    a: *const f64,
    b: *const f64,
    lambda: f64,
    max_iterations: usize,
    tolerance: f64,
    plan_out: *mut f64,
    result_out: *mut TokalignSinkhornResult,
) -> i32 {
    guard(|| {
        if result_out.is_null() {
            return Err(Failure::Null("result_out"));
        }
        let cost = CostMatrix::new(DenseMatrix::new(m, n, slice(cost, area(m, n)?, "cost")?.to_vec())?)?;
        let a = DiscreteMeasure::new(slice(a, m, "a")?.to_vec())?;
        let b = DiscreteMeasure::new(slice(b, n, "b")?.to_vec())?;
        let settings = SinkhornSettings::new(lambda, max_iterations, tolerance)?;
        let sol = sinkhorn(&a, &b, &cost, &settings)?;
        if !plan_out.is_null() {
            slice_mut(plan_out, m * n, "plan_out")?.copy_from_slice(sol.plan.matrix().as_slice());
        }
        write_out(
            result_out,
            TokalignSinkhornResult {
                transport_cost: sol.transport_cost,
                regularized_objective: sol.regularized_objective,
                marginal_violation: sol.plan.marginal_violation(),
                iterations: sol.plan.iterations_used(),
                converged: sol.plan.is_converged(),
            },
            "result_out",
        )
    })
}

/// Unregularized OT between uniform measures on `n` points each, by
/// enumeration. Small `n` only.
///
/// # Safety
/// `cost` must hold `n * n` values; `plan_out`, if non-null, must have room
/// for `n * n`.
#[no_mangle]
pub unsafe extern "C" fn tokalign_exact_ot_uniform(
    cost: *const f64,
    n: usize,
    plan_out: *mut f64,
    cost_out: *mut f64,
) -> i32 {
    guard(|| {
        if cost_out.is_null() {
            return Err(Failure::Null("cost_out"));
        }
        let c = CostMatrix::new(DenseMatrix::new(n, n, slice(cost, area(n, n)?, "cost")?.to_vec())?)?;
        let (plan, value) = exact_ot_uniform(&c)?;
        if !plan_out.is_null() {
            slice_mut(plan_out, n * n, "plan_out")?.copy_from_slice(plan.as_slice());
        }
        write_out(cost_out, value, "cost_out")
    })
}

/// Build a prompt set of `count` prompts in dimension `dim`.
///
/// `globals` holds `count * dim` values. Prompt `i` has `token_counts[i]`
/// token rows, stored consecutively in `tokens`. All vectors are scaled to
/// unit length; a zero vector is rejected.
///
/// # Safety
/// The arrays must be valid for the lengths above and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tokalign_prompt_set_new(
    side: i32,
    count: usize,
    dim: usize,
    token_counts: *const usize,
    globals: *const f64,
    tokens: *const f64,
    out: *mut *mut TokalignPromptSet,
) -> i32 {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let side = match side {
            TOKALIGN_SIDE_IMAGE => Side::Image,
            TOKALIGN_SIDE_CLASS => Side::Class,
            other => return Err(Error::InvalidInput(format!("unknown side {other}")).into()),
        };
        let counts = slice(token_counts, count, "token_counts")?;
        let total = counts
            .iter()
            .try_fold(0usize, |acc, &j| acc.checked_add(j))
            .ok_or_else(|| Error::InvalidInput("token count overflows".into()))?;
        let globals = slice(globals, area(count, dim)?, "globals")?;
        let tokens = slice(tokens, area(total, dim)?, "tokens")?;

        let mut prompts = Vec::with_capacity(count);
        let mut offset = 0;
        for (i, &j) in counts.iter().enumerate() {
            let rows = DenseMatrix::new(j, dim, tokens[offset * dim..(offset + j) * dim].to_vec())?;
            prompts.push(PromptFeature::normalized(&globals[i * dim..(i + 1) * dim], &rows)?);
            offset += j;
        }
        let set = PromptSet::new(prompts, side)?;
        out.write(Box::into_raw(Box::new(TokalignPromptSet(set))));
        Ok(())
    })
}

/// Number of prompts in `set`, or 0 for null.
///
/// # Safety
/// `set` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tokalign_prompt_set_len(set: *const TokalignPromptSet) -> usize {
    set.as_ref().map_or(0, |s| s.0.len())
}

/// # Safety
/// `set` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tokalign_prompt_set_free(set: *mut TokalignPromptSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Copy `count` class-side prompt sets into a new bank.
///
/// # Safety
/// `classes` must point to `count` live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tokalign_class_bank_new(
    classes: *const *const TokalignPromptSet,
    count: usize,
    out: *mut *mut TokalignClassBank,
) -> i32 {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let sets = slice(classes, count, "classes")?
            .iter()
            .map(|&p| reference(p, "class handle").map(|s| s.0.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let bank = ClassBank::unnamed(sets)?;
        out.write(Box::into_raw(Box::new(TokalignClassBank(bank))));
        Ok(())
    })
}

/// Number of classes in `bank`, or 0 for null.
///
/// # Safety
/// `bank` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tokalign_class_bank_len(bank: *const TokalignClassBank) -> usize {
    bank.as_ref().map_or(0, |b| b.0.len())
}

/// # Safety
/// `bank` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tokalign_class_bank_free(bank: *mut TokalignClassBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Prompt-level OT distance between an image set and a class set.
///
/// # Safety
/// Handles and `config` must be live; `distance_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tokalign_hierarchical_distance(
    image: *const TokalignPromptSet,
    class: *const TokalignPromptSet,
    config: *const TokalignAlignConfig,
    distance_out: *mut f64,
) -> i32 {
    guard(|| {
        let image = reference(image, "image")?;
        let class = reference(class, "class")?;
        let cfg = AlignConfig::try_from(reference(config, "config")?)?;
        let d = hierarchical_distance(&image.0, &class.0, &cfg)?.distance();
        write_out(distance_out, d, "distance_out")
    })
}

/// Class probabilities for one image. `len` must equal the bank size.
/// `predicted_out` may be null.
///
/// # Safety
/// Handles and `config` must be live; `probabilities_out` must have room for
/// `len` values.
#[no_mangle]
pub unsafe extern "C" fn tokalign_classify(
    image: *const TokalignPromptSet,
    bank: *const TokalignClassBank,
    config: *const TokalignAlignConfig,
    probabilities_out: *mut f64,
    len: usize,
    predicted_out: *mut usize,
) -> i32 {
    guard(|| {
        let image = reference(image, "image")?;
        let bank = reference(bank, "bank")?;
        let cfg = AlignConfig::try_from(reference(config, "config")?)?;
        if len != bank.0.len() {
            return Err(Error::DimensionMismatch(format!(
                "output holds {len} values but the bank has {} classes",
                bank.0.len()
            ))
            .into());
        }
        let out = slice_mut(probabilities_out, len, "probabilities_out")?;
        let pred = classify(&image.0, &bank.0, &cfg)?;
        out.copy_from_slice(pred.probabilities.as_slice());
        if !predicted_out.is_null() {
            predicted_out.write(pred.argmax);
        }
        Ok(())
    })
}
