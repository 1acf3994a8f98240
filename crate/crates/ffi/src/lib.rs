//! C interface to morphnet.
//!
//! Every function returns an [`MnStatus`]. On failure the message is kept
//! per thread and can be read with [`mn_last_error`]. Panics are caught at
//! the boundary and reported as `MN_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use morphnet::gz2::{propagate_tree, select_clean, CatalogRow, Combine, DecisionTree, RuleSet, NUM_ANSWERS};
use morphnet::metrics::{report, rmse, ConfusionMatrix};
use morphnet::nn::HeadMode;
use morphnet::scaling::{check_constraint, Network, ScalingCoefficients};
use morphnet::tensor::Tensor;
use morphnet::train::Checkpoint;
use morphnet::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Schema = 4,
    Config = 5,
    Integrity = 6,
    NonFinite = 7,
    Io = 8,
    Image = 9,
    Csv = 10,
    Panic = 11,
}

impl From<&Error> for MnStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) => MnStatus::InvalidArgument,
            Error::Shape(_) => MnStatus::Shape,
            Error::Schema(_) => MnStatus::Schema,
            Error::Config(_) => MnStatus::Config,
            Error::Integrity(_) => MnStatus::Integrity,
            Error::NonFinite(_) => MnStatus::NonFinite,
            Error::Io { .. } => MnStatus::Io,
            Error::Image { .. } => MnStatus::Image,
            Error::Csv(_) => MnStatus::Csv,
        }
    }
}

/// Selection result for a row matching no class.
pub const MN_CLASS_NONE: i32 = -1;
/// Selection result for a row matching more than one class.
pub const MN_CLASS_AMBIGUOUS: i32 = -2;

/// Number of answers in the decision tree.
pub const MN_NUM_ANSWERS: usize = 37;

const _: () = assert!(MN_NUM_ANSWERS == NUM_ANSWERS);

/// Loaded network. Created by [`mn_network_load`], released by
/// [`mn_network_free`].
pub struct MnNetwork {
    net: Network<f32>,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MnClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when a denominator was zero; the affected values are 0.
    pub undefined: bool,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MnReportSummary {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub total: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(MnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(MnStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MnStatus::NullPointer, format!("{what} is null"))
}

fn bad(msg: impl Into<String>) -> Fail {
    Fail(MnStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MnStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            MnStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn out<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    ptr.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null after a
/// successful one. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file and rebuilds its network.
///
/// # Safety
/// `path` must be a nul-terminated string; `out_net` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mn_network_load(path: *const c_char, out_net: *mut *mut MnNetwork) -> MnStatus {
    guard(|| {
        let slot = out(out_net, "out_net")?;
        *slot = std::ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| bad("path is not UTF-8"))?;
        let (net, _) = Checkpoint::load(Path::new(path))?.restore()?;
        *slot = Box::into_raw(Box::new(MnNetwork { net }));
        Ok(())
    })
}

/// Releases a network. Null is ignored.
///
/// # Safety
/// `net` must come from [`mn_network_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mn_network_free(net: *mut MnNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Input side length, outputs per image, and whether the outputs are class
/// probabilities (otherwise vote fractions).
///
/// # Safety
/// `net` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn mn_network_info(
    net: *const MnNetwork,
    resolution: *mut usize,
    outputs: *mut usize,
    classify: *mut bool,
) -> MnStatus {
    guard(|| {
        let net = &net.as_ref().ok_or_else(|| null("net"))?.net;
        *out(resolution, "resolution")? = net.arch.resolution;
        *out(outputs, "outputs")? = net.arch.head.outputs;
        *out(classify, "classify")? = net.arch.head.mode == HeadMode::Classify;
        Ok(())
    })
}

/// Runs inference on `n` images of `height x width x 3` floats in [0, 1],
/// channel-last, and writes `n * outputs` values to `out_values`.
///
/// # Safety
/// `images` must hold `n * height * width * 3` floats and `out_values`
/// `out_len`.
#[no_mangle]
pub unsafe extern "C" fn mn_network_predict(
    net: *const MnNetwork,
    images: *const f32,
    n: usize,
    height: usize,
    width: usize,
    out_values: *mut f32,
    out_len: usize,
) -> MnStatus {
    guard(|| {
        let net = &net.as_ref().ok_or_else(|| null("net"))?.net;
        if n == 0 || height == 0 || width == 0 {
            return Err(bad("image batch is empty"));
        }
        let want = n * net.arch.head.outputs;
        if out_len < want {
            return Err(bad(format!("output buffer holds {out_len} values, {want} needed")));
        }
        let data = slice(images, n * height * width * 3, "images")?.to_vec();
        let x = Tensor::new(vec![n, height, width, 3], data)?;
        let y = net.predict(&x)?;
        slice_mut(out_values, want, "out")?.copy_from_slice(y.data());
        Ok(())
    })
}

/// Per-class and macro metrics of a `classes x classes` confusion matrix
/// given row-major with rows as true classes.
///
/// # Safety
/// `counts` must hold `classes * classes` values and `per_class` `classes`
/// entries; `summary` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mn_classification_report(
    counts: *const u64,
    classes: usize,
    per_class: *mut MnClassMetrics,
    summary: *mut MnReportSummary,
) -> MnStatus {
    guard(|| {
        if classes == 0 {
            return Err(bad("confusion matrix is empty"));
        }
        let flat = slice(counts, classes * classes, "counts")?;
        let rows: Vec<Vec<u64>> = flat.chunks(classes).map(<[u64]>::to_vec).collect();
        let r = report(&ConfusionMatrix::from_rows(&rows)?)?;
        let dst = slice_mut(per_class, classes, "per_class")?;
        for (d, m) in dst.iter_mut().zip(&r.classes) {
            *d = MnClassMetrics {
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
                support: m.support,
                undefined: m.undefined,
            };
        }
        *out(summary, "summary")? = MnReportSummary {
            accuracy: r.accuracy,
            macro_precision: r.macro_precision,
            macro_recall: r.macro_recall,
            macro_f1: r.macro_f1,
            total: r.total,
        };
        Ok(())
    })
}

/// Root mean squared error over `n x k` row-major predictions and targets.
///
/// # Safety
/// `pred` and `target` must hold `n * k` values; `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mn_rmse(pred: *const f64, target: *const f64, n: usize, k: usize, result: *mut f64) -> MnStatus {
    guard(|| {
        let len = n * k;
        let p = Tensor::new(vec![n, k], slice(pred, len, "pred")?.to_vec())?;
        let t = Tensor::new(vec![n, k], slice(target, len, "target")?.to_vec())?;
        *out(result, "result")? = rmse(&p, &t)?.rmse;
        Ok(())
    })
}

unsafe fn row(fractions: *const f64) -> Result<CatalogRow, Fail> {
    Ok(CatalogRow {
        galaxy_id: String::new(),
        fractions: slice(fractions, NUM_ANSWERS, "fractions")?.to_vec(),
    })
}

/// Weights each of the 37 answers by the vote mass reaching its task.
///
/// # Safety
/// `fractions` and `weighted` must each hold 37 values.
#[no_mangle]
pub unsafe extern "C" fn mn_propagate_tree(fractions: *const f64, weighted: *mut f64) -> MnStatus {
    guard(|| {
        let w = propagate_tree(&row(fractions)?, &DecisionTree::gz2())?;
        slice_mut(weighted, NUM_ANSWERS, "weighted")?.copy_from_slice(&w);
        Ok(())
    })
}

/// Clean-sample class of one row of 37 vote fractions: 0..6, or
/// [`MN_CLASS_NONE`] / [`MN_CLASS_AMBIGUOUS`]. `class6_any` makes the
/// irregular rule accept any single odd-feature answer instead of the sum.
///
/// # Safety
/// `fractions` must hold 37 values; `class` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mn_select_class(fractions: *const f64, class6_any: bool, class: *mut i32) -> MnStatus {
    guard(|| {
        let dst = out(class, "class")?;
        let combine = if class6_any { Combine::Any } else { Combine::Sum };
        let c = select_clean(&[row(fractions)?], &RuleSet::gz2(combine))?;
        *dst = match (c.samples.first(), c.ambiguous.is_empty()) {
            (Some(s), _) => s.label as i32,
            (None, false) => MN_CLASS_AMBIGUOUS,
            (None, true) => MN_CLASS_NONE,
        };
        Ok(())
    })
}

/// `alpha * beta^2 * gamma^2 - 2` for scaling coefficients, each >= 1.
///
/// # Safety
/// `deviation` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mn_check_constraint(alpha: f64, beta: f64, gamma: f64, deviation: *mut f64) -> MnStatus {
    guard(|| {
        let c = ScalingCoefficients {
            alpha,
            beta,
            gamma,
            phi: 1.0,
        };
        *out(deviation, "deviation")? = check_constraint(&c)?;
        Ok(())
    })
}
