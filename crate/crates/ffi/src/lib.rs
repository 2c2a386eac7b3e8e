//! C interface to `munet-core`.
//!
//! Every fallible function returns a [`MunetStatus`]; on failure the message
//! is available from [`munet_last_error`] on the same thread until the next
//! call. Networks are opaque handles owned by the caller and released with
//! [`munet_network_free`]. Arrays are row-major and their lengths are passed
//! explicitly. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use munet_core::analysis::{permeation_rate, BranchRule};
use munet_core::data::scale_intensity;
use munet_core::metrics::{evaluate_class, Label, MetricValue, SegmentationMask};
use munet_core::network::{NetworkConfig, NetworkGraph, Variant, WidthMultiplier};
use munet_core::training::{init_params, Checkpoint};
use munet_core::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MunetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Io = 5,
    Corrupt = 6,
    Topology = 7,
    NonFinite = 8,
    Internal = 9,
}

impl From<&Error> for MunetStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) => MunetStatus::Shape,
            Error::InvalidArgument(_) | Error::UnknownTap(_) => MunetStatus::InvalidArgument,
            Error::Config(_) | Error::Infeasible(_) => MunetStatus::Config,
            Error::Io { .. } => MunetStatus::Io,
            Error::Corrupt { .. } | Error::Version { .. } => MunetStatus::Corrupt,
            Error::Topology { .. } => MunetStatus::Topology,
            Error::NonFinite(_) => MunetStatus::NonFinite,
            _ => MunetStatus::Internal,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Failure {
    Status(MunetStatus, String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(MunetStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Status(MunetStatus::InvalidArgument, msg.into())
}

/// Run `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MunetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            MunetStatus::Ok
        }
        Ok(Err(Failure::Core(e))) => {
            set_last_error(&e.to_string());
            MunetStatus::from(&e)
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_last_error(&msg);
            s
        }
        Err(_) => {
            set_last_error("internal panic");
            MunetStatus::Internal
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn path(ptr: *const c_char) -> Result<PathBuf, Failure> {
    if ptr.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(ptr).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

fn checked_product(dims: &[usize]) -> Result<usize, Failure> {
    dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| invalid("dimensions overflow"))
}

/// Message of the last failure on this thread; empty after a success. The
/// pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn munet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn munet_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Network geometry. `variant` is 0 for U-Net and 1 for mU-Net; the width
/// multiplier is `width_num / width_den`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MunetNetworkConfig {
    pub stages: usize,
    pub base_features: usize,
    pub in_channels: usize,
    pub out_classes: usize,
    pub input_extent: usize,
    pub variant: u32,
    pub width_num: usize,
    pub width_den: usize,
}

impl MunetNetworkConfig {
    fn to_core(self) -> Result<NetworkConfig, Failure> {
        let variant = match self.variant {
            0 => Variant::Unet,
            1 => Variant::Munet,
            v => return Err(invalid(format!("unknown variant {v}"))),
        };
        Ok(NetworkConfig {
            stages: self.stages,
            base_features: self.base_features,
            in_channels: self.in_channels,
            out_classes: self.out_classes,
            input_extent: self.input_extent,
            variant,
            width_multiplier: WidthMultiplier::new(self.width_num, self.width_den)?,
        })
    }

    fn from_core(c: &NetworkConfig) -> Self {
        MunetNetworkConfig {
            stages: c.stages,
            base_features: c.base_features,
            in_channels: c.in_channels,
            out_classes: c.out_classes,
            input_extent: c.input_extent,
            variant: match c.variant {
                Variant::Unet => 0,
                Variant::Munet => 1,
            },
            width_num: c.width_multiplier.num,
            width_den: c.width_multiplier.den,
        }
    }
}

/// Opaque network handle.
pub struct MunetNetwork {
    net: NetworkGraph,
}

/// Fill `out` with the desk-scale geometry (three stages, one-eighth
/// width, 64² inputs, mU-Net).
///
/// # Safety
/// `out` must be null or point to writable memory for one config.
#[no_mangle]
pub unsafe extern "C" fn munet_network_config_desk(out: *mut MunetNetworkConfig) -> MunetStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = MunetNetworkConfig::from_core(&NetworkConfig::desk());
        Ok(())
    })
}

/// Build a network and initialize its parameters from `seed`.
///
/// # Safety
/// `config` must point to a valid config and `out` to writable storage for
/// one handle pointer.
#[no_mangle]
pub unsafe extern "C" fn munet_network_new(
    config: *const MunetNetworkConfig,
    seed: u64,
    out: *mut *mut MunetNetwork,
) -> MunetStatus {
    guard(|| {
        let cfg = config.as_ref().ok_or_else(|| null("config"))?.to_core()?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let mut net = NetworkGraph::build(cfg)?;
        init_params(&mut net, seed);
        *out = Box::into_raw(Box::new(MunetNetwork { net }));
        Ok(())
    })
}

/// Load a network, geometry included, from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable storage for
/// one handle pointer.
#[no_mangle]
pub unsafe extern "C" fn munet_network_load(path: *const c_char, out: *mut *mut MunetNetwork) -> MunetStatus {
    guard(|| {
        let p = self::path(path)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let net = Checkpoint::load(&p)?.network()?;
        *out = Box::into_raw(Box::new(MunetNetwork { net }));
        Ok(())
    })
}

/// Save parameters and batch-norm moments (no optimizer state).
///
/// # Safety
/// `net` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn munet_network_save(net: *const MunetNetwork, path: *const c_char) -> MunetStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        Checkpoint::weights_only(&net.net).save(&self::path(path)?)?;
        Ok(())
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `net` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn munet_network_free(net: *mut MunetNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// # Safety
/// `net` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn munet_network_config(net: *const MunetNetwork, out: *mut MunetNetworkConfig) -> MunetStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = MunetNetworkConfig::from_core(net.net.config());
        Ok(())
    })
}

/// Number of trainable scalars; 0 for a null handle.
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn munet_network_param_count(net: *const MunetNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.net.param_count())
}

/// Class scores (`n × classes × h × w`) for `n × in_channels × h × w`
/// images already scaled to `[0, 1]`.
///
/// # Safety
/// `images` must hold `images_len` doubles and `scores` `scores_len`.
#[no_mangle]
pub unsafe extern "C" fn munet_network_predict(
    net: *mut MunetNetwork,
    images: *const f64,
    images_len: usize,
    n: usize,
    h: usize,
    w: usize,
    scores: *mut f64,
    scores_len: usize,
) -> MunetStatus {
    guard(|| {
        let net = net.as_mut().ok_or_else(|| null("net"))?;
        let cfg = net.net.config();
        let shape = vec![n, cfg.in_channels, h, w];
        let expected = checked_product(&shape)?;
        let want_out = checked_product(&[n, cfg.out_classes, h, w])?;
        if images_len != expected {
            return Err(invalid(format!("images_len {images_len}, expected {expected}")));
        }
        if scores_len != want_out {
            return Err(invalid(format!("scores_len {scores_len}, expected {want_out}")));
        }
        let x = Tensor::new(shape, slice(images, images_len, "images")?.to_vec())?;
        let y = net.net.predict(&x)?;
        slice_mut(scores, scores_len, "scores")?.copy_from_slice(y.data());
        Ok(())
    })
}

/// Map intensities linearly from `[low, high]` to `[0, 1]` with clipping.
///
/// # Safety
/// `input` and `output` must each hold `len` doubles; they may alias.
#[no_mangle]
pub unsafe extern "C" fn munet_scale_intensity(
    input: *const f64,
    output: *mut f64,
    len: usize,
    low: f64,
    high: f64,
) -> MunetStatus {
    guard(|| {
        let x = Tensor::new(vec![len], slice(input, len, "input")?.to_vec())?;
        let y = scale_intensity(&x, low, high)?;
        slice_mut(output, len, "output")?.copy_from_slice(y.data());
        Ok(())
    })
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MunetMetricState {
    Value = 0,
    /// The metric has no value for this input (e.g. distances to an empty
    /// surface).
    Undefined = 1,
    /// The class is absent from both masks.
    NotApplicable = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MunetMetric {
    pub state: MunetMetricState,
    /// Meaningful only when `state` is `Value`; NaN otherwise.
    pub value: f64,
}

impl From<MetricValue> for MunetMetric {
    fn from(v: MetricValue) -> Self {
        match v {
            MetricValue::Value(value) => MunetMetric { state: MunetMetricState::Value, value },
            MetricValue::Undefined => MunetMetric { state: MunetMetricState::Undefined, value: f64::NAN },
            MetricValue::NotApplicable => MunetMetric { state: MunetMetricState::NotApplicable, value: f64::NAN },
        }
    }
}

/// Percentages for DSC, VOE and RVD; millimetres for ASSD and MSSD.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MunetClassMetrics {
    pub dsc: MunetMetric,
    pub voe: MunetMetric,
    pub rvd: MunetMetric,
    pub assd: MunetMetric,
    pub mssd: MunetMetric,
}

/// Compare one class of a predicted and a reference label volume.
/// `dims` and `spacing` give `rank` (2 or 3) extents and voxel sizes in mm.
///
/// # Safety
/// `dims` and `spacing` must hold `rank` values, `pred` and `truth` the
/// product of `dims` labels, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn munet_evaluate_class(
    pred: *const u16,
    truth: *const u16,
    dims: *const usize,
    spacing: *const f64,
    rank: usize,
    class: u16,
    out: *mut MunetClassMetrics,
) -> MunetStatus {
    guard(|| {
        let dims = slice(dims, rank, "dims")?.to_vec();
        let spacing = slice(spacing, rank, "spacing")?.to_vec();
        let len = checked_product(&dims)?;
        let p = slice(pred, len, "pred")?;
        let t = slice(truth, len, "truth")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let top = p.iter().chain(t).copied().chain([class]).max().unwrap_or(0) as usize;
        let classes = SegmentationMask::numbered_classes(top + 1);
        let pm = SegmentationMask::new(dims.clone(), spacing.clone(), p.to_vec(), classes.clone())?;
        let tm = SegmentationMask::new(dims, spacing, t.to_vec(), classes)?;
        let m = evaluate_class(&pm, &tm, class as Label)?;
        *out = MunetClassMetrics {
            dsc: m.dsc.into(),
            voe: m.voe.into(),
            rvd: m.rvd.into(),
            assd: m.assd.into(),
            mssd: m.mssd.into(),
        };
        Ok(())
    })
}

/// Permeation rate of one object between two `h × w` maps already
/// normalized to `[0, 1]`. `object` holds one byte per pixel (non-zero is
/// inside); `any_below` selects the any-pixel quantifier instead of the
/// default all-pixels one.
///
/// # Safety
/// `fm_a`, `fm_b` and `object` must each hold `h * w` elements and `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn munet_permeation_rate(
    fm_a: *const f64,
    fm_b: *const f64,
    object: *const u8,
    h: usize,
    w: usize,
    any_below: bool,
    out: *mut f64,
) -> MunetStatus {
    guard(|| {
        let len = checked_product(&[h, w])?;
        let a = Tensor::new(vec![h, w], slice(fm_a, len, "fm_a")?.to_vec())?;
        let b = Tensor::new(vec![h, w], slice(fm_b, len, "fm_b")?.to_vec())?;
        let m: Vec<bool> = slice(object, len, "object")?.iter().map(|&v| v != 0).collect();
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let rule = if any_below { BranchRule::AnyBelow } else { BranchRule::AllBelow };
        *out = permeation_rate(&a, &b, &m, rule)?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        unsafe { CStr::from_ptr(munet_last_error()) }.to_string_lossy().into_owned()
    }

    #[test]
    fn null_pointers_are_reported() {
        let s = unsafe { munet_network_new(std::ptr::null(), 0, std::ptr::null_mut()) };
        assert_eq!(s, MunetStatus::NullPointer);
        assert!(last_error().contains("config"));
        assert_eq!(unsafe { munet_network_param_count(std::ptr::null()) }, 0);
        unsafe { munet_network_free(std::ptr::null_mut()) };
    }

    #[test]
    fn bad_variant_is_invalid_argument() {
        let mut c = MunetNetworkConfig::from_core(&NetworkConfig::desk());
        c.variant = 7;
        let mut h = std::ptr::null_mut();
        assert_eq!(unsafe { munet_network_new(&c, 0, &mut h) }, MunetStatus::InvalidArgument);
        assert!(h.is_null());
    }

    #[test]
    fn version_is_the_crate_version() {
        let v = unsafe { CStr::from_ptr(munet_version()) }.to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
    }
}
