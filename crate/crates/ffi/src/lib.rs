//! C ABI for mindcross: load a checkpoint, query its shape, predict
//! semantic embeddings, read cached subject similarity, and compute DE
//! features.
//!
//! Every function returns an [`McStatus`]; on failure a message is kept per
//! thread and can be copied out with [`mc_last_error`]. Models are opaque
//! handles owned by the caller and released with [`mc_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mindcross::checkpoint::load_checkpoint;
use mindcross::data::{de_feature, SubjectData, SEED_BANDS};
use mindcross::eval::predictions;
use mindcross::pipeline::RunConfig;
use mindcross::{Error, MindCrossModel, Tensor};

/// Opaque model handle.
pub struct McModel {
    model: MindCrossModel,
    run: RunConfig,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum McStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    UnknownSubject = 3,
    Io = 4,
    Format = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> McStatus {
    match e {
        Error::UnknownSubject(_) => McStatus::UnknownSubject,
        Error::Io { .. } => McStatus::Io,
        Error::BadMagic { .. } | Error::Truncated { .. } | Error::VersionMismatch { .. } | Error::Header(_) | Error::Json(_) => {
            McStatus::Format
        }
        Error::NonFiniteLoss { .. } | Error::GradcheckFailed(_) | Error::FrozenDrift(_) => McStatus::Numeric,
        _ => McStatus::InvalidArgument,
    }
}

struct Fail(McStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> McStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => McStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            McStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(McStatus::NullPointer, format!("`{what}` is NULL"))
}

/// # Safety
/// `p` must be NULL or a NUL-terminated string.
unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(McStatus::InvalidArgument, format!("`{what}` is not valid UTF-8")))
}

/// # Safety
/// `p` must be NULL or point to `len` writable doubles.
unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if len < need {
        return Err(Fail(
            McStatus::BufferTooSmall,
            format!("`{what}` holds {len} values, {need} needed"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `cap > 0`). Returns the full message length
/// excluding the terminator, or 0 when there is none.
///
/// # Safety
/// `buf` must be NULL or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mc_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a checkpoint written by `mindcross train` or `mindcross calibrate`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mc_model_load(path: *const c_char, out: *mut *mut McModel) -> McStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let path = c_str(path, "path")?;
        let ck = load_checkpoint(Path::new(path))?;
        let run = match ck.run_config.pointer("/config/run") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| Fail(McStatus::Format, e.to_string()))?,
            None => RunConfig::default(),
        };
        *out = Box::into_raw(Box::new(McModel { model: ck.model, run }));
        Ok(())
    })
}

/// Releases a model; NULL is ignored.
///
/// # Safety
/// `model` must be NULL or a handle from [`mc_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mc_model_free(model: *mut McModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input length, embedding length, and number of subjects with a branch.
///
/// # Safety
/// `model` must be a live handle; outputs must be writable or NULL.
#[no_mangle]
pub unsafe extern "C" fn mc_model_dims(
    model: *const McModel,
    in_dim: *mut usize,
    embed_dim: *mut usize,
    n_subjects: *mut usize,
) -> McStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let cfg = m.model.config();
        for (p, v) in [
            (in_dim, cfg.in_dim),
            (embed_dim, cfg.embed_dim),
            (n_subjects, m.model.subjects().count()),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Predicts `rows` semantic embeddings for `subject` from row-major inputs
/// `x` (`rows × in_dim`) into `out` (`rows × embed_dim`). Training subjects
/// use their own branch; calibrated subjects use Top-K collaboration with
/// the checkpoint's λ and K.
///
/// # Safety
/// `model` must be a live handle, `subject` a NUL-terminated string, `x`
/// readable for `rows * in_dim` doubles and `out` writable for `out_len`.
#[no_mangle]
pub unsafe extern "C" fn mc_model_predict(
    model: *const McModel,
    subject: *const c_char,
    x: *const f64,
    rows: usize,
    out: *mut f64,
    out_len: usize,
) -> McStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let subject = c_str(subject, "subject")?;
        if x.is_null() {
            return Err(null("x"));
        }
        if rows == 0 {
            return Err(Fail(McStatus::InvalidArgument, "`rows` must be >= 1".into()));
        }
        let (m_dim, d) = (m.model.config().in_dim, m.model.config().embed_dim);
        let dst = out_slice(out, out_len, rows * d, "out")?;
        let input = Tensor::new(vec![rows, m_dim], std::slice::from_raw_parts(x, rows * m_dim).to_vec())?;
        let data = SubjectData {
            x: input,
            e: Tensor::zeros(vec![rows, d]),
            classes: vec![0; rows],
        };
        let pred = predictions(&m.model, subject, &data, &m.run)?;
        dst.copy_from_slice(pred.data());
        Ok(())
    })
}

/// Copies the cached similarity of a calibrated subject over the training
/// subjects (in training order) into `out`.
///
/// # Safety
/// `model` must be a live handle, `subject` a NUL-terminated string and
/// `out` writable for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mc_model_similarity(
    model: *const McModel,
    subject: *const c_char,
    out: *mut f64,
    out_len: usize,
) -> McStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let subject = c_str(subject, "subject")?;
        let p = m.model.similarity.get(subject).ok_or_else(|| {
            Fail(
                McStatus::UnknownSubject,
                format!("no cached similarity for `{subject}`; is it a calibrated subject?"),
            )
        })?;
        out_slice(out, out_len, p.len(), "out")?.copy_from_slice(p);
        Ok(())
    })
}

/// Differential-entropy features of a row-major `channels × samples`
/// window over the five standard EEG bands, channel-major into `out`
/// (`channels * 5` values).
///
/// # Safety
/// `signal` must be readable for `channels * samples` doubles and `out`
/// writable for `out_len`.
#[no_mangle]
pub unsafe extern "C" fn mc_de_feature(
    signal: *const f64,
    channels: usize,
    samples: usize,
    sample_rate: f64,
    out: *mut f64,
    out_len: usize,
) -> McStatus {
    guard(|| {
        if signal.is_null() {
            return Err(null("signal"));
        }
        if channels == 0 {
            return Err(Fail(McStatus::InvalidArgument, "`channels` must be >= 1".into()));
        }
        let dst = out_slice(out, out_len, channels * SEED_BANDS.len(), "out")?;
        let all = std::slice::from_raw_parts(signal, channels * samples);
        let rows: Vec<&[f64]> = all.chunks_exact(samples.max(1)).collect();
        let de = de_feature(&rows, &SEED_BANDS, sample_rate)?;
        dst.copy_from_slice(&de.values);
        Ok(())
    })
}
