//! C ABI over the distzo library.
//!
//! Every fallible function returns a [`DzStatus`]; on failure the message is
//! available from [`dz_last_error_message`] on the same thread. Handles are
//! opaque and owned by the caller until passed to the matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use distzo::bench::{self, RunConfig};
use distzo::comm::{plan_sliced_upload, simulate_plan, LinkTopology, SliceLayout};
use distzo::model::{checkpoint, evaluate, init_model, Batch, ModelConfig, ParamStore};
use distzo::real::{Dtype, Real};
use distzo::zo::{mezo_step, zo_grad, ZoHyper};
use distzo::{Error, ErrorKind};

/// Result codes. Values 2, 3 and 4 match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DzStatus {
    Ok = 0,
    Internal = 1,
    Config = 2,
    Numeric = 3,
    Fabric = 4,
    Dimension = 5,
    Protocol = 6,
    OutOfMemory = 7,
    Io = 8,
    Consistency = 9,
    Simulation = 10,
    Layout = 11,
    NullPointer = 12,
    Utf8 = 13,
    Schedule = 14,
}

/// One training iteration as seen through the C ABI.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DzStep {
    pub iter: u64,
    pub seed: u64,
    pub loss_pos: f64,
    pub loss_neg: f64,
    pub g: f64,
}

enum Store {
    F64(ParamStore<f64>),
    F32(ParamStore<f32>),
}

/// Opaque model handle.
pub struct DzModel {
    store: Store,
}

enum Failure {
    Core(Error),
    Null(&'static str),
    Utf8(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn status(&self) -> DzStatus {
        match self {
            Failure::Null(_) => DzStatus::NullPointer,
            Failure::Utf8(_) => DzStatus::Utf8,
            Failure::Core(e) => match e.kind() {
                ErrorKind::Config => DzStatus::Config,
                ErrorKind::Numeric | ErrorKind::Domain => DzStatus::Numeric,
                ErrorKind::Fabric => DzStatus::Fabric,
                ErrorKind::Dimension => DzStatus::Dimension,
                ErrorKind::Protocol => DzStatus::Protocol,
                ErrorKind::OutOfMemory => DzStatus::OutOfMemory,
                ErrorKind::Io => DzStatus::Io,
                ErrorKind::Consistency => DzStatus::Consistency,
                ErrorKind::Simulation => DzStatus::Simulation,
                ErrorKind::Layout => DzStatus::Layout,
                ErrorKind::Schedule => DzStatus::Schedule,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Core(e) => e.to_string(),
            Failure::Null(what) => format!("null pointer passed for {what}"),
            Failure::Utf8(what) => format!("{what} is not valid UTF-8"),
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DzStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DzStatus::Ok,
        Ok(Err(fail)) => {
            set_error(fail.message());
            fail.status()
        }
        Err(_) => {
            set_error("internal panic".into());
            DzStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Utf8(what))
}

unsafe fn model_ref<'a>(p: *const DzModel) -> Result<&'a DzModel, Failure> {
    p.as_ref().ok_or(Failure::Null("model"))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

fn config_of(store: &Store) -> &ModelConfig {
    match store {
        Store::F64(s) => s.config(),
        Store::F32(s) => s.config(),
    }
}

/// Last error message on this thread, or null. Valid until the next failing
/// call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn dz_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dz_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Build a model from a JSON `ModelConfig` and an init seed.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dz_model_new(config_json: *const c_char, init_seed: u64, out: *mut *mut DzModel) -> DzStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let cfg = ModelConfig::from_json(str_arg(config_json, "config_json")?)?;
        let store = match cfg.dtype {
            Dtype::F64 => Store::F64(init_model(&cfg, init_seed)?),
            Dtype::F32 => Store::F32(init_model(&cfg, init_seed)?),
        };
        *out = Box::into_raw(Box::new(DzModel { store }));
        Ok(())
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn dz_model_free(model: *mut DzModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dz_model_param_count(model: *const DzModel, out: *mut usize) -> DzStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out_ref(out, "out")? = match &m.store {
            Store::F64(s) => s.param_count(),
            Store::F32(s) => s.param_count(),
        };
        Ok(())
    })
}

/// Order-sensitive hash of every parameter's bits.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dz_model_checksum(model: *const DzModel, out: *mut u64) -> DzStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out_ref(out, "out")? = match &m.store {
            Store::F64(s) => s.checksum(),
            Store::F32(s) => s.checksum(),
        };
        Ok(())
    })
}

fn synthetic(cfg: &ModelConfig, batch_size: usize, data_seed: u64) -> Result<Batch, Failure> {
    Ok(Batch::synthetic(cfg.vocab_size, batch_size, cfg.seq_len, data_seed)?)
}

/// Loss on a synthetic batch of `batch_size` rows.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dz_model_loss(model: *const DzModel, batch_size: usize, data_seed: u64, out: *mut f64) -> DzStatus {
    guard(|| {
        let m = model_ref(model)?;
        let batch = synthetic(config_of(&m.store), batch_size, data_seed)?;
        *out_ref(out, "out")? = match &m.store {
            Store::F64(s) => evaluate(s, &batch)?,
            Store::F32(s) => evaluate(s, &batch)?,
        };
        Ok(())
    })
}

fn step_typed<T: Real>(
    s: &mut ParamStore<T>,
    batch: &Batch,
    hyper: &ZoHyper,
    seed: u64,
    iter: u64,
) -> Result<DzStep, Failure> {
    let st = mezo_step(s, batch, hyper, seed, iter)?;
    Ok(DzStep {
        iter: st.iter,
        seed: st.seed,
        loss_pos: st.loss_pos,
        loss_neg: st.loss_neg,
        g: st.g,
    })
}

/// One in-place MeZO iteration on a synthetic batch.
///
/// # Safety
/// `model` must be a live handle not used concurrently; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn dz_mezo_step(
    model: *mut DzModel,
    epsilon: f64,
    lr: f64,
    batch_size: usize,
    data_seed: u64,
    seed: u64,
    iter: u64,
    out: *mut DzStep,
) -> DzStatus {
    guard(|| {
        let m = model.as_mut().ok_or(Failure::Null("model"))?;
        let out = out_ref(out, "out")?;
        let hyper = ZoHyper::new(epsilon, lr, 1)?;
        let batch = synthetic(config_of(&m.store), batch_size, data_seed)?;
        *out = match &mut m.store {
            Store::F64(s) => step_typed(s, &batch, &hyper, seed, iter)?,
            Store::F32(s) => step_typed(s, &batch, &hyper, seed, iter)?,
        };
        Ok(())
    })
}

/// Central-difference projected gradient from two losses.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dz_zo_grad(loss_pos: f64, loss_neg: f64, epsilon: f64, out: *mut f64) -> DzStatus {
    guard(|| {
        *out_ref(out, "out")? = zo_grad(loss_pos, loss_neg, epsilon)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dz_model_save(model: *const DzModel, path: *const c_char) -> DzStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = Path::new(str_arg(path, "path")?);
        match &m.store {
            Store::F64(s) => checkpoint::save(s, path)?,
            Store::F32(s) => checkpoint::save(s, path)?,
        }
        Ok(())
    })
}

/// Load a checkpoint of either precision.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dz_model_load(path: *const c_char, out: *mut *mut DzModel) -> DzStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let bytes = checkpoint::read_bytes(Path::new(str_arg(path, "path")?))?;
        let store = match checkpoint::dtype_of(&bytes)? {
            Dtype::F64 => Store::F64(checkpoint::decode(&bytes)?),
            Dtype::F32 => Store::F32(checkpoint::decode(&bytes)?),
        };
        *out = Box::into_raw(Box::new(DzModel { store }));
        Ok(())
    })
}

/// Simulated makespan of the sliced upload of `params` parameters across
/// `devices` devices with a shared host link.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dz_comm_sliced_upload_makespan(
    host_bw: f64,
    peer_bw: f64,
    latency: f64,
    devices: usize,
    params: usize,
    out: *mut f64,
) -> DzStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let topo = LinkTopology::new(host_bw, peer_bw, latency, devices)?;
        let layout = SliceLayout::new(0, params, devices)?;
        *out = simulate_plan(&plan_sliced_upload(&layout, &topo)?, &topo)?.makespan;
        Ok(())
    })
}

/// Run a JSON run config and return the report as a JSON string, to be
/// released with [`dz_string_free`]. Nothing is written to disk.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dz_run_config(config_json: *const c_char, out: *mut *mut c_char) -> DzStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let cfg = RunConfig::from_json(str_arg(config_json, "config_json")?)?;
        let report = bench::run(&cfg)?.report;
        let text = serde_json::to_string(&report).map_err(Error::from)?;
        *out = CString::new(text).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn dz_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
