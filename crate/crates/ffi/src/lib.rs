//! C interface to the mbanet network: build or load a model, embed image
//! batches, and score retrieval over raw descriptors.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mbanet::evaluation::{score, EmbeddingSet};
use mbanet::network::{Network, NetworkConfig};
use mbanet::tensor::Tensor;
use mbanet::Error;

/// Status returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MbaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Checkpoint = 5,
    Data = 6,
    Numeric = 7,
    Panic = 8,
}

/// Opaque network handle.
pub struct MbaNetwork {
    inner: Network<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> MbaStatus {
    match err {
        Error::Shape { .. } | Error::ElementCount { .. } => MbaStatus::Shape,
        Error::InvalidArgument { .. } | Error::Config(_) => MbaStatus::InvalidArgument,
        Error::Io { .. } | Error::Image { .. } => MbaStatus::Io,
        Error::Checkpoint(_) => MbaStatus::Checkpoint,
        Error::Data(_) => MbaStatus::Data,
        Error::NonFinite { .. } | Error::Numeric(_) | Error::NotScalar(_) => MbaStatus::Numeric,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (MbaStatus, String)>) -> MbaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MbaStatus::Ok,
        Ok(Err((status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            MbaStatus::Panic
        }
    }
}

fn lift(err: Error) -> (MbaStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (MbaStatus, String) {
    (MbaStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, (MbaStatus, String)> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| (MbaStatus::InvalidArgument, "path is not valid UTF-8".to_string()))?;
    Ok(PathBuf::from(s))
}

/// Message for the last failed call on this thread, or null if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mba_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mba_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Build the small 32x32 network with `num_ids` classifier outputs.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn mba_network_new_toy(num_ids: usize, seed: u64, out: *mut *mut MbaNetwork) -> MbaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = NetworkConfig {
            seed,
            ..NetworkConfig::toy(num_ids)
        };
        let inner = Network::new(cfg).map_err(lift)?;
        *out = Box::into_raw(Box::new(MbaNetwork { inner }));
        Ok(())
    })
}

/// Load a network from a checkpoint written by `mba_network_save` or the CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mba_network_load(path: *const c_char, out: *mut *mut MbaNetwork) -> MbaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path)?;
        let inner = Network::load(&path).map_err(lift)?;
        *out = Box::into_raw(Box::new(MbaNetwork { inner }));
        Ok(())
    })
}

/// # Safety
/// `net` must come from this library and `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mba_network_save(net: *const MbaNetwork, path: *const c_char) -> MbaStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        let path = path_arg(path)?;
        net.inner.save(&path).map_err(lift)
    })
}

/// Descriptor width per image, or 0 for a null handle.
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mba_network_descriptor_dim(net: *const MbaNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.inner.descriptor_dim())
}

/// Expected input height and width.
///
/// # Safety
/// `net` must be a live handle; `height` and `width` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mba_network_input_size(
    net: *const MbaNetwork,
    height: *mut usize,
    width: *mut usize,
) -> MbaStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        if height.is_null() || width.is_null() {
            return Err(null("height or width"));
        }
        let (h, w) = net.inner.cfg.input_hw;
        *height = h;
        *width = w;
        Ok(())
    })
}

/// Embed `batch` normalized images laid out as `[batch, 3, H, W]`.
/// Writes `batch * descriptor_dim` floats to `out`; `out_len` is its capacity.
///
/// # Safety
/// `images` must hold `batch * 3 * H * W` floats and `out` must hold `out_len`.
#[no_mangle]
pub unsafe extern "C" fn mba_network_embed(
    net: *mut MbaNetwork,
    images: *const f32,
    batch: usize,
    out: *mut f32,
    out_len: usize,
) -> MbaStatus {
    guard(|| {
        let net = net.as_mut().ok_or_else(|| null("net"))?;
        if images.is_null() || out.is_null() {
            return Err(null("images or out"));
        }
        if batch == 0 {
            return Err((MbaStatus::InvalidArgument, "batch must be positive".into()));
        }
        let (h, w) = net.inner.cfg.input_hw;
        let dim = net.inner.descriptor_dim();
        if out_len < batch * dim {
            return Err((
                MbaStatus::Shape,
                format!("output holds {out_len} floats, {} needed", batch * dim),
            ));
        }
        let pixels = std::slice::from_raw_parts(images, batch * 3 * h * w).to_vec();
        let x = Tensor::new(vec![batch, 3, h, w], pixels).map_err(lift)?;
        let d = net.inner.embed(&x).map_err(lift)?;
        if d.data().iter().any(|v| !v.is_finite()) {
            return Err((MbaStatus::Numeric, "descriptor has non-finite values".into()));
        }
        std::slice::from_raw_parts_mut(out, batch * dim).copy_from_slice(d.data());
        Ok(())
    })
}

/// # Safety
/// `net` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mba_network_free(net: *mut MbaNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Cosine-ranked rank-1 accuracy and mAP of `query` rows against `gallery` rows.
///
/// # Safety
/// `query` holds `num_query * dim` doubles, `gallery` holds `num_gallery * dim`,
/// label arrays match their row counts, and `rank1`/`map` are writable.
#[no_mangle]
pub unsafe extern "C" fn mba_retrieval_metrics(
    query: *const f64,
    query_labels: *const i64,
    num_query: usize,
    gallery: *const f64,
    gallery_labels: *const i64,
    num_gallery: usize,
    dim: usize,
    rank1: *mut f64,
    map: *mut f64,
) -> MbaStatus {
    guard(|| {
        if query.is_null() || query_labels.is_null() || gallery.is_null() || gallery_labels.is_null() {
            return Err(null("input array"));
        }
        if rank1.is_null() || map.is_null() {
            return Err(null("rank1 or map"));
        }
        let set = |rows: *const f64, labels: *const i64, n: usize| {
            EmbeddingSet::new(
                dim,
                std::slice::from_raw_parts(rows, n * dim).to_vec(),
                std::slice::from_raw_parts(labels, n).to_vec(),
            )
            .map_err(lift)
        };
        let q = set(query, query_labels, num_query)?;
        let g = set(gallery, gallery_labels, num_gallery)?;
        let m = score(&q, &g, 0).map_err(lift)?;
        *rank1 = m.rank1;
        *map = m.map;
        Ok(())
    })
}
