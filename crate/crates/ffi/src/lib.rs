//! C ABI for the ssa-tta library: opaque handles, integer error codes, and a
//! thread-local last-error message. The header `include/ssa_tta.h` is
//! generated by cbindgen at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ssa_tta::adapt::{run_tta, train_source, AdaptConfig, AdaptMode, SourceStats, TrainConfig};
use ssa_tta::cli::{Checkpoint, CHECKPOINT_VERSION};
use ssa_tta::data::TabularDataset;
use ssa_tta::linalg::Matrix;
use ssa_tta::netcore::{ForwardMode, RegressionModel};
use ssa_tta::Error;

/// Status code returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsaStatus {
    Ok = 0,
    ConfigError = 1,
    Divergence = 2,
    IoError = 3,
    DimensionError = 4,
    NumericalError = 5,
    NullArgument = 6,
    InvalidUtf8 = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> SsaStatus {
    match err {
        Error::Config(_) | Error::Usage(_) => SsaStatus::ConfigError,
        Error::Divergence(_) => SsaStatus::Divergence,
        Error::Io { .. } | Error::Serialization(_) => SsaStatus::IoError,
        Error::Dimension(_) | Error::RankExceeded { .. } | Error::BatchTooSmall { .. } => {
            SsaStatus::DimensionError
        }
        _ => SsaStatus::NumericalError,
    }
}

fn fail(err: Error) -> SsaStatus {
    let code = status_of(&err);
    set_error(err.to_string());
    code
}

/// Runs a closure, converting panics and errors into status codes.
fn guarded(f: impl FnOnce() -> Result<(), Error>) -> SsaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SsaStatus::Ok,
        Ok(Err(e)) => fail(e),
        Err(_) => {
            set_error("internal panic".to_string());
            SsaStatus::Panic
        }
    }
}

/// Message for the most recent error on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ssa_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| match &*e.borrow() {
        Some(c) => c.as_ptr(),
        None => std::ptr::null(),
    })
}

/// Opaque regression model handle.
pub struct SsaModel {
    inner: RegressionModel,
}

/// Opaque source-statistics handle (feature moments + subspace).
pub struct SsaSourceStats {
    inner: SourceStats,
}

unsafe fn slice_arg<'a, T>(ptr: *const T, len: usize) -> Result<&'a [T], Error> {
    if ptr.is_null() && len > 0 {
        return Err(Error::Usage("null pointer argument".into()));
    }
    Ok(unsafe { std::slice::from_raw_parts(ptr, len) })
}

unsafe fn matrix_arg(ptr: *const f64, rows: usize, cols: usize) -> Result<Matrix, Error> {
    let data = unsafe { slice_arg(ptr, rows * cols)? };
    Matrix::from_vec(rows, cols, data.to_vec())
}

/// Creates an MLP regressor (Linear → BatchNorm → ReLU blocks + linear head).
/// Returns NULL on invalid arguments.
#[no_mangle]
pub unsafe extern "C" fn ssa_model_new_mlp(
    d_in: usize,
    hidden: *const usize,
    n_hidden: usize,
    init_seed: u64,
) -> *mut SsaModel {
    if d_in == 0 || n_hidden == 0 || hidden.is_null() {
        set_error("d_in and hidden widths must be non-empty".into());
        return std::ptr::null_mut();
    }
    let widths = unsafe { std::slice::from_raw_parts(hidden, n_hidden) };
    if widths.iter().any(|&w| w == 0) {
        set_error("hidden widths must be positive".into());
        return std::ptr::null_mut();
    }
    let model = RegressionModel::new_mlp(d_in, widths, init_seed);
    Box::into_raw(Box::new(SsaModel { inner: model }))
}

#[no_mangle]
pub unsafe extern "C" fn ssa_model_free(model: *mut SsaModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

#[no_mangle]
pub unsafe extern "C" fn ssa_stats_free(stats: *mut SsaSourceStats) {
    if !stats.is_null() {
        drop(unsafe { Box::from_raw(stats) });
    }
}

/// Number of feature dimensions (last hidden width).
#[no_mangle]
pub unsafe extern "C" fn ssa_model_feature_dim(model: *const SsaModel) -> usize {
    if model.is_null() {
        return 0;
    }
    unsafe { &*model }.inner.feature_dim()
}

/// Predicts `rows` outputs into `out`. `use_batch_stats != 0` normalizes with
/// the incoming batch (requires rows >= 2), otherwise running statistics.
#[no_mangle]
pub unsafe extern "C" fn ssa_model_predict(
    model: *mut SsaModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    use_batch_stats: i32,
    out: *mut f64,
) -> SsaStatus {
    guarded(|| {
        if model.is_null() || out.is_null() {
            return Err(Error::Usage("null pointer argument".into()));
        }
        let model = unsafe { &mut *model };
        let batch = unsafe { matrix_arg(x, rows, cols)? };
        let mode = if use_batch_stats != 0 { ForwardMode::BatchStat } else { ForwardMode::Eval };
        let fp = model.inner.forward(&batch, mode)?;
        unsafe { std::slice::from_raw_parts_mut(out, rows) }.copy_from_slice(&fp.predictions);
        Ok(())
    })
}

/// Supervised source training (Adam on MSE), then captures feature statistics
/// and the significant subspace. `k = 0` means "full numeric rank". On
/// success `*out_stats` owns the captured statistics.
#[no_mangle]
pub unsafe extern "C" fn ssa_train_source(
    model: *mut SsaModel,
    x: *const f64,
    y: *const f64,
    rows: usize,
    cols: usize,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    k: usize,
    out_stats: *mut *mut SsaSourceStats,
) -> SsaStatus {
    guarded(|| {
        if model.is_null() || out_stats.is_null() {
            return Err(Error::Usage("null pointer argument".into()));
        }
        let model = unsafe { &mut *model };
        let inputs = unsafe { matrix_arg(x, rows, cols)? };
        let labels = unsafe { slice_arg(y, rows)? }.to_vec();
        let dataset = TabularDataset {
            inputs,
            labels: Some(labels),
            feature_names: (0..cols).map(|j| format!("x{j}")).collect(),
            domain_tag: "source".into(),
        };
        let cfg = TrainConfig { epochs, lr, batch_size, seed };
        let k = if k == 0 { usize::MAX } else { k };
        let (stats, _) = train_source(&mut model.inner, &dataset, &cfg, k)?;
        unsafe {
            *out_stats = Box::into_raw(Box::new(SsaSourceStats { inner: stats }));
        }
        Ok(())
    })
}

/// Detected subspace size K.
#[no_mangle]
pub unsafe extern "C" fn ssa_stats_subspace_k(stats: *const SsaSourceStats) -> usize {
    if stats.is_null() {
        return 0;
    }
    unsafe { &*stats }.inner.subspace.k()
}

/// Offline significant-subspace alignment on unlabeled target rows,
/// updating only normalization affine parameters. A recorded divergence
/// returns `Divergence` with the reason in the last-error message.
#[no_mangle]
pub unsafe extern "C" fn ssa_run_tta(
    model: *mut SsaModel,
    stats: *const SsaSourceStats,
    x: *const f64,
    rows: usize,
    cols: usize,
    k: usize,
    lr: f64,
    batch_size: usize,
    epochs: usize,
    seed: u64,
) -> SsaStatus {
    guarded(|| {
        if model.is_null() || stats.is_null() {
            return Err(Error::Usage("null pointer argument".into()));
        }
        let model = unsafe { &mut *model };
        let stats = unsafe { &*stats };
        let target = unsafe { matrix_arg(x, rows, cols)? };
        let k = if k == 0 { stats.inner.subspace.k().min(100) } else { k };
        let cfg = AdaptConfig {
            k,
            lr,
            batch_size,
            epochs,
            seed,
            mode: AdaptMode::Offline,
            ..Default::default()
        };
        let trace = run_tta(&mut model.inner, &stats.inner, &target, &cfg)?;
        if let Some(reason) = trace.divergence {
            return Err(Error::Divergence(reason));
        }
        Ok(())
    })
}

/// Closed-form KL divergence between two univariate Gaussians.
#[no_mangle]
pub unsafe extern "C" fn ssa_gaussian_kl(
    mu1: f64,
    var1: f64,
    mu2: f64,
    var2: f64,
    out: *mut f64,
) -> SsaStatus {
    guarded(|| {
        if out.is_null() {
            return Err(Error::Usage("null pointer argument".into()));
        }
        let v = ssa_tta::alignstat::gaussian_kl(mu1, var1, mu2, var2)?;
        unsafe { *out = v };
        Ok(())
    })
}

/// Saves model + statistics as a versioned JSON checkpoint.
#[no_mangle]
pub unsafe extern "C" fn ssa_checkpoint_save(
    model: *const SsaModel,
    stats: *const SsaSourceStats,
    path: *const c_char,
) -> SsaStatus {
    guarded(|| {
        if model.is_null() || stats.is_null() || path.is_null() {
            return Err(Error::Usage("null pointer argument".into()));
        }
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| Error::Usage("path is not valid UTF-8".into()))?;
        let model = unsafe { &*model };
        let stats = unsafe { &*stats };
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            model: model.inner.clone(),
            standardizer: None,
            stats: stats.inner.clone(),
            feature_names: (0..model.inner.d_in).map(|j| format!("x{j}")).collect(),
            label_column: None,
            config_hash: String::new(),
        };
        ckpt.save(Path::new(path))
    })
}

/// Loads a checkpoint saved by `ssa_checkpoint_save` or the CLI.
#[no_mangle]
pub unsafe extern "C" fn ssa_checkpoint_load(
    path: *const c_char,
    out_model: *mut *mut SsaModel,
    out_stats: *mut *mut SsaSourceStats,
) -> SsaStatus {
    guarded(|| {
        if path.is_null() || out_model.is_null() || out_stats.is_null() {
            return Err(Error::Usage("null pointer argument".into()));
        }
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| Error::Usage("path is not valid UTF-8".into()))?;
        let ckpt = Checkpoint::load(Path::new(path))?;
        unsafe {
            *out_model = Box::into_raw(Box::new(SsaModel { inner: ckpt.model }));
            *out_stats = Box::into_raw(Box::new(SsaSourceStats { inner: ckpt.stats }));
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn make_shift_data(n: usize, shift: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
        // simple deterministic pseudo-data: x ~ grid + jitter, y = tanh-ish
        use ssa_tta::data::{generate_shift_pair, GroundTruth, ShiftSpec};
        let spec = ShiftSpec::mean_shift(
            4,
            vec![shift; 4],
            GroundTruth::TanhNet { hidden: 8, seed: 3 },
            0.05,
        );
        let (src, tgt) = generate_shift_pair(&spec, n, n, seed).unwrap();
        let pick = if shift == 0.0 { src } else { tgt };
        let xs = pick.inputs.data().to_vec();
        let ys = pick.labels.unwrap();
        (xs, ys)
    }

    #[test]
    fn full_ffi_lifecycle() {
        unsafe {
            let hidden = [12usize, 12];
            let model = ssa_model_new_mlp(4, hidden.as_ptr(), 2, 1);
            assert!(!model.is_null());
            assert_eq!(ssa_model_feature_dim(model), 12);

            let (xs, ys) = make_shift_data(400, 0.0, 9);
            let mut stats: *mut SsaSourceStats = std::ptr::null_mut();
            let st = ssa_train_source(
                model, xs.as_ptr(), ys.as_ptr(), 400, 4, 5, 1e-3, 64, 0, 0, &mut stats,
            );
            assert_eq!(st, SsaStatus::Ok);
            assert!(!stats.is_null());
            assert!(ssa_stats_subspace_k(stats) >= 1);

            let (txs, _) = make_shift_data(300, 1.0, 9);
            let st = ssa_run_tta(model, stats, txs.as_ptr(), 300, 4, 0, 1e-3, 64, 1, 0);
            assert_eq!(st, SsaStatus::Ok);

            let mut preds = vec![0.0f64; 300];
            let st = ssa_model_predict(model, txs.as_ptr(), 300, 4, 1, preds.as_mut_ptr());
            assert_eq!(st, SsaStatus::Ok);
            assert!(preds.iter().all(|p| p.is_finite()));

            // checkpoint round trip through the C surface
            let dir = std::env::temp_dir().join(format!("ssa_ffi_{}", std::process::id()));
            std::fs::create_dir_all(&dir).unwrap();
            let path = CString::new(dir.join("ckpt.json").to_str().unwrap()).unwrap();
            assert_eq!(ssa_checkpoint_save(model, stats, path.as_ptr()), SsaStatus::Ok);
            let mut m2: *mut SsaModel = std::ptr::null_mut();
            let mut s2: *mut SsaSourceStats = std::ptr::null_mut();
            assert_eq!(ssa_checkpoint_load(path.as_ptr(), &mut m2, &mut s2), SsaStatus::Ok);
            let mut preds2 = vec![0.0f64; 300];
            ssa_model_predict(m2, txs.as_ptr(), 300, 4, 1, preds2.as_mut_ptr());
            assert_eq!(preds, preds2);

            ssa_model_free(model);
            ssa_model_free(m2);
            ssa_stats_free(stats);
            ssa_stats_free(s2);
            std::fs::remove_dir_all(&dir).ok();
        }
    }

    #[test]
    fn null_arguments_reported() {
        unsafe {
            let mut out = 0.0f64;
            let st = ssa_model_predict(
                std::ptr::null_mut(),
                std::ptr::null(),
                0,
                0,
                0,
                &mut out,
            );
            assert_eq!(st, SsaStatus::ConfigError);
            let msg = CStr::from_ptr(ssa_last_error_message());
            assert!(msg.to_str().unwrap().contains("null"));
        }
    }

    #[test]
    fn error_codes_and_messages() {
        unsafe {
            let mut out = f64::NAN;
            // negative variance is a numerical-domain error
            let st = ssa_gaussian_kl(0.0, -1.0, 0.0, 1.0, &mut out);
            assert_ne!(st, SsaStatus::Ok);
            assert!(!ssa_last_error_message().is_null());

            let st = ssa_gaussian_kl(1.0, 2.0, 3.0, 4.0, &mut out);
            assert_eq!(st, SsaStatus::Ok);
            assert!(out.is_finite() && out > 0.0);

            // loading a missing checkpoint is an IO error
            let path = CString::new("/nonexistent/ckpt.json").unwrap();
            let mut m: *mut SsaModel = std::ptr::null_mut();
            let mut s: *mut SsaSourceStats = std::ptr::null_mut();
            let st = ssa_checkpoint_load(path.as_ptr(), &mut m, &mut s);
            assert_eq!(st, SsaStatus::IoError);
        }
    }

    #[test]
    fn header_generated() {
        let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/ssa_tta.h");
        let text = std::fs::read_to_string(&header).expect("cbindgen header missing");
        for symbol in [
            "ssa_model_new_mlp",
            "ssa_train_source",
            "ssa_run_tta",
            "ssa_last_error_message",
            "SsaStatus",
        ] {
            assert!(text.contains(symbol), "{symbol} missing from header");
        }
    }
}
