//! C ABI over the coast pipeline. Models travel as opaque handles, every
//! entry point returns a status code, and the most recent error message is
//! retrievable per thread. The generated header lives at `include/coast.h`.

use coast_core::config::CoastConfig;
use coast_core::data::{export_benchmark, import_benchmark, make_benchmark};
use coast_core::metrics::evaluate_all;
use coast_core::model::{Head, Mode, ModelBundle};
use coast_core::trainer::selftrain_run;
use coast_core::warmup::warmup_run;
use coast_core::{CoastError, Tape, Tensor};
use libc::{c_char, size_t};
use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

/// Status code returned by every API entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoastStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    IoError = 3,
    CorruptData = 4,
    InternalError = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn status_of(err: &CoastError) -> CoastStatus {
    match err {
        CoastError::Io(_) => CoastStatus::IoError,
        CoastError::Checkpoint(_) | CoastError::Dataset(_) | CoastError::Json(_) => {
            CoastStatus::CorruptData
        }
        CoastError::NonFinite(_) => CoastStatus::InternalError,
        _ => CoastStatus::InvalidArgument,
    }
}

fn fail(err: CoastError) -> CoastStatus {
    let code = status_of(&err);
    set_error(&err.to_string());
    code
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, CoastStatus> {
    if p.is_null() {
        set_error(&format!("{what} is null"));
        return Err(CoastStatus::NullArgument);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(&format!("{what} is not valid UTF-8"));
        CoastStatus::InvalidArgument
    })
}

fn parse_config(json: Option<&str>) -> Result<CoastConfig, CoastStatus> {
    match json {
        None => Ok(CoastConfig::default()),
        Some(s) if s.trim().is_empty() => Ok(CoastConfig::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| {
            set_error(&format!("config JSON: {e}"));
            CoastStatus::InvalidArgument
        }),
    }
}

/// Opaque trained-model handle.
pub struct CoastModel {
    bundle: ModelBundle,
}

/// Copy the last error message for the calling thread into `buf` (truncated
/// to `cap - 1` bytes, always NUL-terminated) and return the full message
/// length in bytes.
#[no_mangle]
pub unsafe extern "C" fn coast_last_error_message(buf: *mut c_char, cap: size_t) -> size_t {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn coast_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Generate the benchmark datasets described by `config_json` (NULL for the
/// defaults) into `out_dir`.
#[no_mangle]
pub unsafe extern "C" fn coast_generate_data(
    config_json: *const c_char,
    out_dir: *const c_char,
) -> CoastStatus {
    let cfg = match parse_config(if config_json.is_null() {
        None
    } else {
        match read_str(config_json, "config_json") {
            Ok(s) => Some(s),
            Err(c) => return c,
        }
    }) {
        Ok(c) => c,
        Err(c) => return c,
    };
    let out = match read_str(out_dir, "out_dir") {
        Ok(s) => s,
        Err(c) => return c,
    };
    match make_benchmark(&cfg.data).and_then(|b| export_benchmark(&b, Path::new(out))) {
        Ok(()) => CoastStatus::Ok,
        Err(e) => fail(e),
    }
}

/// Run the adversarial warm-up stage on a dataset directory and write the
/// resulting checkpoint.
#[no_mangle]
pub unsafe extern "C" fn coast_run_warmup(
    config_json: *const c_char,
    data_dir: *const c_char,
    out_checkpoint: *const c_char,
) -> CoastStatus {
    let cfg = match parse_config(if config_json.is_null() {
        None
    } else {
        match read_str(config_json, "config_json") {
            Ok(s) => Some(s),
            Err(c) => return c,
        }
    }) {
        Ok(c) => c,
        Err(c) => return c,
    };
    let data = match read_str(data_dir, "data_dir") {
        Ok(s) => s,
        Err(c) => return c,
    };
    let out = match read_str(out_checkpoint, "out_checkpoint") {
        Ok(s) => s,
        Err(c) => return c,
    };
    let run = || -> coast_core::Result<()> {
        let bench = import_benchmark(Path::new(data))?;
        let mut bundle = ModelBundle::new(
            cfg.model.clone(),
            bench.source.num_classes,
            bench.targets.len(),
            cfg.warmup.seed,
        )?;
        warmup_run(&mut bundle, &bench.source, &bench.targets, &cfg.warmup)?;
        bundle.save_checkpoint(Path::new(out))
    };
    match run() {
        Ok(()) => CoastStatus::Ok,
        Err(e) => fail(e),
    }
}

/// Run the self-training stage from a warm-up checkpoint; checkpoints and the
/// metrics CSV land in `out_dir`.
#[no_mangle]
pub unsafe extern "C" fn coast_run_selftrain(
    config_json: *const c_char,
    data_dir: *const c_char,
    in_checkpoint: *const c_char,
    out_dir: *const c_char,
) -> CoastStatus {
    let cfg = match parse_config(if config_json.is_null() {
        None
    } else {
        match read_str(config_json, "config_json") {
            Ok(s) => Some(s),
            Err(c) => return c,
        }
    }) {
        Ok(c) => c,
        Err(c) => return c,
    };
    let data = match read_str(data_dir, "data_dir") {
        Ok(s) => s,
        Err(c) => return c,
    };
    let ckpt = match read_str(in_checkpoint, "in_checkpoint") {
        Ok(s) => s,
        Err(c) => return c,
    };
    let out = match read_str(out_dir, "out_dir") {
        Ok(s) => s,
        Err(c) => return c,
    };
    let run = || -> coast_core::Result<()> {
        let bench = import_benchmark(Path::new(data))?;
        let mut bundle = ModelBundle::load_checkpoint(Path::new(ckpt), cfg.model.clone())?;
        let result = selftrain_run(&mut bundle, &bench, &cfg.train, Some(Path::new(out)))?;
        std::fs::write(Path::new(out).join("metrics.csv"), result.metrics_csv)?;
        Ok(())
    };
    match run() {
        Ok(()) => CoastStatus::Ok,
        Err(e) => fail(e),
    }
}

/// Load a checkpoint into an opaque model handle. `config_json` (NULL for
/// defaults) supplies the architecture section the checkpoint was trained
/// with. The handle must be released with `coast_model_free`.
#[no_mangle]
pub unsafe extern "C" fn coast_model_load(
    checkpoint_path: *const c_char,
    config_json: *const c_char,
    out_model: *mut *mut CoastModel,
) -> CoastStatus {
    if out_model.is_null() {
        set_error("out_model is null");
        return CoastStatus::NullArgument;
    }
    *out_model = ptr::null_mut();
    let path = match read_str(checkpoint_path, "checkpoint_path") {
        Ok(s) => s,
        Err(c) => return c,
    };
    let cfg = match parse_config(if config_json.is_null() {
        None
    } else {
        match read_str(config_json, "config_json") {
            Ok(s) => Some(s),
            Err(c) => return c,
        }
    }) {
        Ok(c) => c,
        Err(c) => return c,
    };
    match ModelBundle::load_checkpoint(Path::new(path), cfg.model) {
        Ok(bundle) => {
            *out_model = Box::into_raw(Box::new(CoastModel { bundle }));
            CoastStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Release a model handle. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn coast_model_free(model: *mut CoastModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of semantic classes the model predicts, or -1 on NULL.
#[no_mangle]
pub unsafe extern "C" fn coast_model_num_classes(model: *const CoastModel) -> i32 {
    if model.is_null() {
        return -1;
    }
    (*model).bundle.num_classes as i32
}

/// Number of target domains the model was trained against, or -1 on NULL.
#[no_mangle]
pub unsafe extern "C" fn coast_model_num_targets(model: *const CoastModel) -> i32 {
    if model.is_null() {
        return -1;
    }
    (*model).bundle.num_targets as i32
}

/// Segment one image. `image` holds `3*height*width` doubles in channel-major
/// order with values in [0,1]; `out_labels` receives `height*width` class
/// ids. `head` selects a domain-specific classifier by index, or the
/// domain-agnostic classifier when negative (the inference default, since the
/// domain of a test image is unknown).
#[no_mangle]
pub unsafe extern "C" fn coast_model_predict(
    model: *const CoastModel,
    image: *const f64,
    height: size_t,
    width: size_t,
    head: i32,
    out_labels: *mut u8,
) -> CoastStatus {
    if model.is_null() || image.is_null() || out_labels.is_null() {
        set_error("model, image, and out_labels must be non-null");
        return CoastStatus::NullArgument;
    }
    let bundle = &(*model).bundle;
    let hw = height * width;
    let values: Vec<coast_core::Real> =
        std::slice::from_raw_parts(image, 3 * hw).iter().map(|&v| v as coast_core::Real).collect();
    let tensor = match Tensor::new(vec![1, 3, height, width], values) {
        Ok(t) => t,
        Err(e) => return fail(e),
    };
    let selector = if head < 0 { Head::Agnostic } else { Head::Domain(head as usize) };
    let run = || -> coast_core::Result<Vec<u8>> {
        let mut tape = Tape::new();
        let staged = bundle.stage(&mut tape);
        let xid = tape.leaf(&tensor);
        let out = bundle.forward(&mut tape, &staged, xid, selector, None, &mut Mode::Eval)?;
        Ok(coast_core::autograd::argmax_classes(
            tape.values(out.probs),
            tape.shape(out.probs),
        ))
    };
    match run() {
        Ok(classes) => {
            ptr::copy_nonoverlapping(classes.as_ptr(), out_labels, hw);
            CoastStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Evaluate a model over a dataset directory and write the average mIoU
/// across that directory's labeled evaluation sets to `out_avg_miou`.
/// `unseen_only` restricts scoring to the held-out domain.
#[no_mangle]
pub unsafe extern "C" fn coast_evaluate(
    model: *const CoastModel,
    data_dir: *const c_char,
    unseen_only: bool,
    out_avg_miou: *mut f64,
) -> CoastStatus {
    if model.is_null() || out_avg_miou.is_null() {
        set_error("model and out_avg_miou must be non-null");
        return CoastStatus::NullArgument;
    }
    let data = match read_str(data_dir, "data_dir") {
        Ok(s) => s,
        Err(c) => return c,
    };
    let run = || -> coast_core::Result<f64> {
        let bench = import_benchmark(Path::new(data))?;
        let datasets: Vec<&coast_core::data::DomainDataset> = if unseen_only {
            vec![&bench.unseen_eval]
        } else {
            bench.target_eval.iter().collect()
        };
        Ok(evaluate_all(&(*model).bundle, &datasets, Head::Agnostic)?.avg_miou)
    };
    match run() {
        Ok(miou) => {
            *out_avg_miou = miou;
            CoastStatus::Ok
        }
        Err(e) => fail(e),
    }
}
