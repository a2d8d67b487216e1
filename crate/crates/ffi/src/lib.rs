//! C interface to the workbench.
//!
//! Every fallible function returns a [`BatStatus`]. On failure the message
//! is available from [`bat_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use bat_core::adversarial::{fgm_perturbation, AdvConfig, Exclusion};
use bat_core::experiment::config::{normalize_key, read_kv_file};
use bat_core::experiment::{prepare_data, resolve_dataset, train_all, TrainConfig, DATA_DIR_ENV};
use bat_core::metrics::{accuracy, macro_f1, span_f1, span_set};
use bat_core::model::{Batch, Labels, Model, Prediction, TokenKind};
use bat_core::tokenizer::{Bio, Vocab};
use bat_core::{BatError, Task, Tensor};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferTooSmall = 3,
    Usage = 4,
    Config = 5,
    Data = 6,
    Parse = 7,
    Io = 8,
    Dimension = 9,
    Index = 10,
    Panic = 11,
}

/// Task codes used by [`bat_model_task`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatTask {
    Ae = 0,
    Asc = 1,
}

/// Opaque vocabulary handle.
pub struct BatVocab {
    inner: Vocab,
}

/// Opaque model handle.
pub struct BatModel {
    inner: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(BatStatus, String);

impl From<BatError> for Failure {
    fn from(e: BatError) -> Self {
        let status = match &e {
            BatError::Dimension { .. } => BatStatus::Dimension,
            BatError::Index(_) => BatStatus::Index,
            BatError::Usage(_) => BatStatus::Usage,
            BatError::Config(_) => BatStatus::Config,
            BatError::Data { .. } => BatStatus::Data,
            BatError::Parse { .. } => BatStatus::Parse,
            BatError::Io { .. } => BatStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: BatStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BatStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            BatStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            BatStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(BatStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(BatStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(BatStatus::NullPointer, format!("{name} is null")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(BatStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<T>(p: *mut T, value: T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(fail(BatStatus::NullPointer, format!("{name} is null")));
    }
    p.write(value);
    Ok(())
}

/// Message for the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next call into this library.
#[no_mangle]
pub extern "C" fn bat_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a vocabulary file (one token per line).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bat_vocab_load(path: *const c_char, lowercase: bool, out: *mut *mut BatVocab) -> BatStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(fail(BatStatus::NullPointer, "out is null"));
        }
        let inner = Vocab::load(Path::new(path), lowercase)?;
        out.write(Box::into_raw(Box::new(BatVocab { inner })));
        Ok(())
    })
}

/// # Safety
/// `vocab` must come from [`bat_vocab_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bat_vocab_free(vocab: *mut BatVocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

/// Number of tokens, or 0 for a null handle.
///
/// # Safety
/// `vocab` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bat_vocab_len(vocab: *const BatVocab) -> usize {
    vocab.as_ref().map_or(0, |v| v.inner.len())
}

/// WordPiece ids for `text`, without special tokens. `*len` receives the
/// number of ids; when it exceeds `capacity` nothing is written and
/// `BufferTooSmall` is returned.
///
/// # Safety
/// `ids` must hold `capacity` elements; the other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bat_tokenize(
    vocab: *const BatVocab,
    text: *const c_char,
    ids: *mut u32,
    capacity: usize,
    len: *mut usize,
) -> BatStatus {
    guard(|| {
        let vocab = ref_arg(vocab, "vocab")?;
        let text = str_arg(text, "text")?;
        let (tokens, _) = vocab.inner.tokenize(text);
        out_arg(len, tokens.len(), "len")?;
        if tokens.len() > capacity {
            return Err(fail(
                BatStatus::BufferTooSmall,
                format!("{} ids do not fit in {capacity}", tokens.len()),
            ));
        }
        if !tokens.is_empty() {
            if ids.is_null() {
                return Err(fail(BatStatus::NullPointer, "ids is null"));
            }
            ptr::copy_nonoverlapping(tokens.as_ptr(), ids, tokens.len());
        }
        Ok(())
    })
}

/// Loads a checkpoint written by training.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bat_model_load(path: *const c_char, out: *mut *mut BatModel) -> BatStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(fail(BatStatus::NullPointer, "out is null"));
        }
        let inner = Model::<f32>::load(Path::new(path))?;
        out.write(Box::into_raw(Box::new(BatModel { inner })));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`bat_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bat_model_free(model: *mut BatModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bat_model_task(model: *const BatModel, out: *mut BatTask) -> BatStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let task = match model.inner.config.task {
            Task::Ae => BatTask::Ae,
            Task::Asc => BatTask::Asc,
        };
        out_arg(out, task, "out")
    })
}

/// Predicts for one sentence. Extraction models take `aspect = NULL` and
/// write one tag per word (0 = B, 1 = I, 2 = O); sentiment models take an
/// aspect and write one class (0 = positive, 1 = negative, 2 = neutral).
/// `*len` receives the number of values; when it exceeds `capacity`
/// nothing is written and `BufferTooSmall` is returned.
///
/// # Safety
/// `labels` must hold `capacity` elements; the other pointers must be
/// valid, except `aspect`, which may be null.
#[no_mangle]
pub unsafe extern "C" fn bat_model_predict(
    model: *const BatModel,
    vocab: *const BatVocab,
    text: *const c_char,
    aspect: *const c_char,
    labels: *mut u8,
    capacity: usize,
    len: *mut usize,
) -> BatStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let vocab = ref_arg(vocab, "vocab")?;
        let text = str_arg(text, "text")?;
        let aspect = if aspect.is_null() { None } else { Some(str_arg(aspect, "aspect")?) };
        let values: Vec<u8> = match model.inner.predict_text(&vocab.inner, text, aspect)? {
            Prediction::Ae(mut tags) => tags.remove(0).iter().map(|t| t.index() as u8).collect(),
            Prediction::Asc(classes) => vec![classes[0] as u8],
        };
        out_arg(len, values.len(), "len")?;
        if values.len() > capacity {
            return Err(fail(
                BatStatus::BufferTooSmall,
                format!("{} labels do not fit in {capacity}", values.len()),
            ));
        }
        if labels.is_null() {
            return Err(fail(BatStatus::NullPointer, "labels is null"));
        }
        ptr::copy_nonoverlapping(values.as_ptr(), labels, values.len());
        Ok(())
    })
}

/// `r_adv = -epsilon * g / ||g||` per example over rows not flagged in
/// `excluded`. `g` and `r_out` are `[batch, seq, dim]` row-major;
/// `excluded` is `[batch, seq]` (non-zero = left unperturbed). `norms_out`
/// (`[batch]`) and `degenerate_out` (`[batch]`, 1 when the gradient norm
/// is too small to scale) may be null.
///
/// # Safety
/// Buffers must hold the sizes described above.
#[no_mangle]
pub unsafe extern "C" fn bat_fgm_perturbation(
    g: *const f32,
    batch: usize,
    seq: usize,
    dim: usize,
    excluded: *const u8,
    epsilon: f64,
    r_out: *mut f32,
    norms_out: *mut f64,
    degenerate_out: *mut u8,
) -> BatStatus {
    guard(|| {
        let n = batch
            .checked_mul(seq)
            .and_then(|r| r.checked_mul(dim))
            .ok_or_else(|| fail(BatStatus::Dimension, "size overflow"))?;
        if n == 0 {
            return Err(fail(BatStatus::Dimension, "empty gradient"));
        }
        let g = slice_arg(g, n, "g")?;
        let excluded = slice_arg(excluded, batch * seq, "excluded")?;
        if r_out.is_null() {
            return Err(fail(BatStatus::NullPointer, "r_out is null"));
        }
        let cfg = AdvConfig::new(Task::Ae, epsilon)?;
        debug_assert_eq!(cfg.exclusion, Exclusion::Padding);
        // excluded rows are presented as padding
        let kinds = excluded
            .iter()
            .map(|&e| if e != 0 { TokenKind::Pad } else { TokenKind::Content })
            .collect();
        let shape = Batch {
            size: batch,
            seq,
            input_ids: vec![0; batch * seq],
            segment_ids: vec![0; batch * seq],
            position_ids: (0..batch * seq).map(|i| i % seq).collect(),
            kinds,
            word_positions: vec![Vec::new(); batch],
            labels: Labels::None,
        };
        let g = Tensor::new(vec![batch, seq, dim], g.to_vec())?;
        let p = fgm_perturbation(&g, &cfg, &shape)?;
        ptr::copy_nonoverlapping(p.r_adv.data().as_ptr(), r_out, n);
        if !norms_out.is_null() {
            ptr::copy_nonoverlapping(p.norms.as_ptr(), norms_out, batch);
        }
        if !degenerate_out.is_null() {
            for (i, &d) in p.degenerate.iter().enumerate() {
                degenerate_out.add(i).write(d as u8);
            }
        }
        Ok(())
    })
}

fn bio_of(code: u8) -> Result<Bio, Failure> {
    Bio::from_index(code as usize).ok_or_else(|| fail(BatStatus::Index, format!("tag code {code} is not 0, 1 or 2")))
}

/// Exact-match span precision, recall and F1. `pred` and `gold` hold the
/// tags of all sentences back to back (0 = B, 1 = I, 2 = O); `lengths`
/// gives each sentence's length.
///
/// # Safety
/// `pred` and `gold` must each hold `sum(lengths)` values; outputs must
/// be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn bat_span_f1(
    pred: *const u8,
    gold: *const u8,
    lengths: *const usize,
    sentences: usize,
    precision: *mut f64,
    recall: *mut f64,
    f1: *mut f64,
) -> BatStatus {
    guard(|| {
        let lengths = slice_arg(lengths, sentences, "lengths")?;
        let total: usize = lengths.iter().sum();
        let pred = slice_arg(pred, total, "pred")?;
        let gold = slice_arg(gold, total, "gold")?;
        let (mut ps, mut gs) = (Vec::new(), Vec::new());
        let mut at = 0;
        for &len in lengths {
            let p: Vec<Bio> = pred[at..at + len].iter().map(|&c| bio_of(c)).collect::<Result<_, _>>()?;
            let g: Vec<Bio> = gold[at..at + len].iter().map(|&c| bio_of(c)).collect::<Result<_, _>>()?;
            ps.push(span_set(&p));
            gs.push(span_set(&g));
            at += len;
        }
        let prf = span_f1(&ps, &gs)?;
        out_arg(precision, prf.precision, "precision")?;
        out_arg(recall, prf.recall, "recall")?;
        out_arg(f1, prf.f1, "f1")
    })
}

/// # Safety
/// `pred` and `gold` must hold `n` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bat_accuracy(pred: *const u32, gold: *const u32, n: usize, out: *mut f64) -> BatStatus {
    guard(|| {
        let p: Vec<usize> = slice_arg(pred, n, "pred")?.iter().map(|&c| c as usize).collect();
        let g: Vec<usize> = slice_arg(gold, n, "gold")?.iter().map(|&c| c as usize).collect();
        out_arg(out, accuracy(&p, &g)?, "out")
    })
}

/// Unweighted mean F1 over classes `0..classes` that occur in gold or
/// predictions.
///
/// # Safety
/// `pred` and `gold` must hold `n` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bat_macro_f1(
    pred: *const u32,
    gold: *const u32,
    n: usize,
    classes: usize,
    out: *mut f64,
) -> BatStatus {
    guard(|| {
        let p: Vec<usize> = slice_arg(pred, n, "pred")?.iter().map(|&c| c as usize).collect();
        let g: Vec<usize> = slice_arg(gold, n, "gold")?.iter().map(|&c| c as usize).collect();
        out_arg(out, macro_f1(&p, &g, classes)?, "out")
    })
}

/// Trains from a `key=value` config file and writes results to `out_dir`
/// (which overrides any `out` setting). Official dataset names are looked
/// up in the `data-dir` setting or the data directory environment variable.
///
/// # Safety
/// Both arguments must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn bat_train(config_path: *const c_char, out_dir: *const c_char) -> BatStatus {
    guard(|| {
        let config_path = str_arg(config_path, "config_path")?;
        let out_dir = str_arg(out_dir, "out_dir")?;
        let mut cfg = TrainConfig::new(Task::Ae);
        let mut data_dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
        for (key, value) in read_kv_file(Path::new(config_path))? {
            if normalize_key(&key) == "data-dir" {
                data_dir = Some(PathBuf::from(value));
            } else if !cfg.set(&key, &value)? {
                return Err(fail(BatStatus::Config, format!("unknown setting {key:?}")));
            }
        }
        cfg.out_dir = Some(PathBuf::from(out_dir));
        resolve_dataset(&mut cfg, data_dir.as_deref())?;
        cfg.validate()?;
        let data = prepare_data(&cfg)?;
        train_all(&cfg, &data)?;
        Ok(())
    })
}
