//! C ABI over the hgnet engine.
//!
//! Networks are opaque `HgNetwork` handles created by
//! [`hg_network_from_json`] or [`hg_network_load_checkpoint`] and released
//! with [`hg_network_free`]. Every fallible call returns an [`HgStatus`];
//! the message of the most recent failure on the calling thread is
//! available from [`hg_last_error`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use hgnet::complexity::{count_madds, count_params};
use hgnet::graph::{Mode, Tape};
use hgnet::hourglass::{Network, NetworkConfig};
use hgnet::metrics::{pckh, tradeoff_metric, MeanMode, ModelStats, PckhSample, NUM_JOINTS};
use hgnet::params::ParamStore;
use hgnet::tensor::Tensor4;
use hgnet::HgError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HgStatus {
    Ok = 0,
    /// A required pointer argument was null.
    Null = 1,
    Config = 2,
    Data = 3,
    Io = 4,
    Usage = 5,
    Training = 6,
    /// The engine panicked; the handle involved should be freed.
    Panic = 7,
}

/// Accuracy and compute of one model, as used by [`hg_tradeoff`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct HgModelStats {
    /// Mean PCKh in percent.
    pub pckh: f64,
    pub params: f64,
    pub madds: f64,
}

/// A network structure with its parameters.
pub struct HgNetwork {
    network: Network,
    store: ParamStore<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &HgError) -> HgStatus {
    match e {
        HgError::Config(_) => HgStatus::Config,
        HgError::Data(_) => HgStatus::Data,
        HgError::Usage(_) => HgStatus::Usage,
        HgError::Training(_) => HgStatus::Training,
        HgError::Io(_) => HgStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Engine(HgError),
}

impl From<HgError> for Failure {
    fn from(e: HgError) -> Self {
        Failure::Engine(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            HgStatus::Ok
        }
        Ok(Err(Failure::Null(arg))) => {
            set_error(&format!("{arg} is null"));
            HgStatus::Null
        }
        Ok(Err(Failure::Engine(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            HgStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Engine(HgError::usage(format!("{name} is not valid UTF-8"))))
}

unsafe fn net_arg<'a>(p: *const HgNetwork) -> Result<&'a HgNetwork, Failure> {
    p.as_ref().ok_or(Failure::Null("network"))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(name))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Builds a network from an architecture JSON string with parameters
/// initialized from `seed`. On success `*out` owns a new handle.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hg_network_from_json(json: *const c_char, seed: u64, out: *mut *mut HgNetwork) -> HgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let cfg = NetworkConfig::from_json(str_arg(json, "json")?)?;
        let (network, store) = Network::with_seed::<f32>(&cfg, seed)?;
        *out = Box::into_raw(Box::new(HgNetwork { network, store }));
        Ok(())
    })
}

/// Loads a checkpoint file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hg_network_load_checkpoint(path: *const c_char, out: *mut *mut HgNetwork) -> HgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let ckpt = hgnet::data::load_checkpoint(str_arg(path, "path")?)?;
        let network = ckpt.network()?;
        *out = Box::into_raw(Box::new(HgNetwork {
            network,
            store: ckpt.store,
        }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `net` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hg_network_free(net: *mut HgNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Number of trainable parameters.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn hg_network_param_count(net: *const HgNetwork, out: *mut u64) -> HgStatus {
    guard(|| {
        let n = net_arg(net)?;
        *out_arg(out, "out")? = count_params(&n.network, &n.store).total_params;
        Ok(())
    })
}

/// Multiply-adds for one image at the configured input resolution.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn hg_network_madds(net: *const HgNetwork, out: *mut u64) -> HgStatus {
    guard(|| {
        let n = net_arg(net)?;
        *out_arg(out, "out")? = count_madds(&n.network, &n.store, n.network.input_shape(1))?.total_madds;
        Ok(())
    })
}

/// Input resolution, heatmap resolution and joint count.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn hg_network_dims(
    net: *const HgNetwork,
    input_res: *mut usize,
    heatmap_res: *mut usize,
    joints: *mut usize,
) -> HgStatus {
    guard(|| {
        let c = &net_arg(net)?.network.config;
        *out_arg(input_res, "input_res")? = c.input_resolution;
        *out_arg(heatmap_res, "heatmap_res")? = c.heatmap_resolution();
        *out_arg(joints, "joints")? = c.num_joints;
        Ok(())
    })
}

/// Runs inference on `batch` images laid out as `batch×3×R×R` floats and
/// writes the final stack's heatmaps, `batch×J×R/4×R/4`, into `heatmaps`.
/// Array lengths are in elements and must match exactly.
///
/// # Safety
/// `images` and `heatmaps` must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn hg_network_forward(
    net: *const HgNetwork,
    images: *const f32,
    images_len: usize,
    batch: usize,
    heatmaps: *mut f32,
    heatmaps_len: usize,
) -> HgStatus {
    guard(|| {
        let n = net_arg(net)?;
        let in_shape = n.network.input_shape(batch);
        let out_shape = n.network.heatmap_shape(batch);
        if images_len != in_shape.numel() {
            return Err(HgError::usage(format!(
                "images holds {images_len} floats, input {in_shape} needs {}",
                in_shape.numel()
            ))
            .into());
        }
        if heatmaps_len != out_shape.numel() {
            return Err(HgError::usage(format!(
                "heatmaps holds {heatmaps_len} floats, output {out_shape} needs {}",
                out_shape.numel()
            ))
            .into());
        }
        let data = slice_arg(images, images_len, "images")?.to_vec();
        if heatmaps.is_null() {
            return Err(Failure::Null("heatmaps"));
        }
        let mut tape = Tape::<f32>::new(Mode::Eval);
        let x = tape.input(Tensor4::from_vec(in_shape, data)?, false);
        let o = n.network.forward(&mut tape, &n.store, x)?;
        let last = *o.heatmaps.last().expect("at least one stack");
        std::slice::from_raw_parts_mut(heatmaps, heatmaps_len).copy_from_slice(tape.value(last).data());
        Ok(())
    })
}

/// PCKh at `threshold` (0.5 for PCKh@0.5) as a fraction in `[0, 1]`,
/// averaged over the visible scored joints (pelvis and thorax are not
/// scored). `pred` and `gt` hold `n×16×2` coordinates, `visible` `n×16`
/// flags and `head_size` `n` values.
///
/// # Safety
/// Arrays must be valid for the lengths implied by `n`.
#[no_mangle]
pub unsafe extern "C" fn hg_pckh(
    pred: *const f64,
    gt: *const f64,
    visible: *const u8,
    head_size: *const f64,
    n: usize,
    threshold: f64,
    out: *mut f64,
) -> HgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let pred = slice_arg(pred, n * NUM_JOINTS * 2, "pred")?;
        let gt = slice_arg(gt, n * NUM_JOINTS * 2, "gt")?;
        let visible = slice_arg(visible, n * NUM_JOINTS, "visible")?;
        let head = slice_arg(head_size, n, "head_size")?;
        let joints = |v: &[f64]| std::array::from_fn(|j| [v[2 * j], v[2 * j + 1]]);
        let samples: Vec<PckhSample> = (0..n)
            .map(|i| PckhSample {
                pred: joints(&pred[i * 2 * NUM_JOINTS..]),
                gt: joints(&gt[i * 2 * NUM_JOINTS..]),
                visible: std::array::from_fn(|j| visible[i * NUM_JOINTS + j] != 0),
                head_size: head[i],
            })
            .collect();
        *out = pckh(&samples, threshold, MeanMode::PerJoint)?.mean;
        Ok(())
    })
}

/// Weighted accuracy/compute tradeoff of `candidate` against `baseline`;
/// `weights` holds `w_acc, w_params, w_madds`.
///
/// # Safety
/// Pointers must be valid; `weights` must hold three values.
#[no_mangle]
pub unsafe extern "C" fn hg_tradeoff(
    baseline: *const HgModelStats,
    candidate: *const HgModelStats,
    weights: *const f64,
    out: *mut f64,
) -> HgStatus {
    guard(|| {
        let b = baseline.as_ref().ok_or(Failure::Null("baseline"))?;
        let c = candidate.as_ref().ok_or(Failure::Null("candidate"))?;
        let w = slice_arg(weights, 3, "weights")?;
        let stats = |s: &HgModelStats| ModelStats {
            pckh: s.pckh,
            params: s.params,
            madds: s.madds,
        };
        *out_arg(out, "out")? = tradeoff_metric(&stats(b), &stats(c), [w[0], w[1], w[2]])?;
        Ok(())
    })
}

/// Message of the last failed call on this thread, empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn hg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn hg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
