//! C ABI over `mese-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_load`,
//! `*_generate` or `*_build` and released by the matching `*_free`. Every
//! fallible call returns a [`MeseStatus`]; on failure the message is kept
//! per thread and read back with [`mese_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mese_core::corpus::{generate_synthetic, load_corpus, Corpus, SyntheticSpec};
use mese_core::dataset_tools::{self, ImageCandidate, RerankQuery};
use mese_core::encoder::{load_checkpoint, ModalityMask, Model};
use mese_core::evaluation;
use mese_core::expansion::{rerank, window_search, ExpansionConfig, Representations};
use mese_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeseStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Parse = 4,
    Io = 5,
    Shape = 6,
    Undefined = 7,
    BufferTooSmall = 8,
    Runtime = 9,
    Panic = 10,
}

/// A loaded or generated corpus.
pub struct MeseCorpus(Corpus);

/// A trained model.
pub struct MeseModel(Model);

/// Per-entity distributions of one model over one corpus, ready for
/// expansion.
pub struct MeseIndex(Representations);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &Error) -> MeseStatus {
    match err {
        Error::Parse { .. } | Error::Json(_) => MeseStatus::Parse,
        Error::Validation(_) | Error::Config(_) => MeseStatus::Config,
        Error::Shape(_) => MeseStatus::Shape,
        Error::InvalidArgument(_) => MeseStatus::InvalidArgument,
        Error::Undefined(_) => MeseStatus::Undefined,
        Error::Io { .. } => MeseStatus::Io,
        Error::NonFinite { .. } => MeseStatus::Runtime,
    }
}

enum Fail {
    Core(Error),
    Status(MeseStatus, String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(MeseStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MeseStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MeseStatus::Ok,
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            MeseStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Status(MeseStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn mese_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `dir` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mese_corpus_load(dir: *const c_char, out: *mut *mut MeseCorpus) -> MeseStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let corpus = load_corpus(path_arg(dir, "dir")?)?;
        *out = Box::into_raw(Box::new(MeseCorpus(corpus)));
        Ok(())
    })
}

/// Synthetic corpus with default settings. `sibling_pairs` and
/// `token_overlap` control the hard-negative classes.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mese_corpus_generate(
    seed: u64,
    sibling_pairs: usize,
    token_overlap: f64,
    out: *mut *mut MeseCorpus,
) -> MeseStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let spec = SyntheticSpec {
            rng_seed: seed,
            sibling_pairs,
            token_overlap,
            ..SyntheticSpec::default()
        };
        *out = Box::into_raw(Box::new(MeseCorpus(generate_synthetic(&spec)?)));
        Ok(())
    })
}

/// # Safety
/// `corpus` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mese_corpus_free(corpus: *mut MeseCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// # Safety
/// `corpus` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mese_corpus_entity_count(corpus: *const MeseCorpus, out: *mut usize) -> MeseStatus {
    guard(|| {
        *out_arg(out, "out")? = handle(corpus, "corpus")?.0.entity_count();
        Ok(())
    })
}

/// # Safety
/// `corpus` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mese_corpus_query_count(corpus: *const MeseCorpus, out: *mut usize) -> MeseStatus {
    guard(|| {
        *out_arg(out, "out")? = handle(corpus, "corpus")?.0.queries().len();
        Ok(())
    })
}

/// Copies the seeds of query `index` into `seeds` and stores their count
/// in `out_len`. Fails with `BufferTooSmall` (after setting `out_len`)
/// when `capacity` is too small.
///
/// # Safety
/// `seeds` must hold `capacity` elements; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mese_corpus_query_seeds(
    corpus: *const MeseCorpus,
    index: usize,
    seeds: *mut usize,
    capacity: usize,
    out_len: *mut usize,
) -> MeseStatus {
    guard(|| {
        let corpus = &handle(corpus, "corpus")?.0;
        let out_len = out_arg(out_len, "out_len")?;
        let q = corpus.queries().get(index).ok_or_else(|| {
            Fail::Status(MeseStatus::InvalidArgument, format!("query index {index} out of range"))
        })?;
        *out_len = q.seeds.len();
        copy_out(&q.seeds, seeds, capacity)
    })
}

unsafe fn copy_out<T: Copy>(src: &[T], dst: *mut T, capacity: usize) -> Result<(), Fail> {
    if src.len() > capacity {
        return Err(Fail::Status(
            MeseStatus::BufferTooSmall,
            format!("buffer holds {capacity} elements, {} needed", src.len()),
        ));
    }
    if !src.is_empty() {
        if dst.is_null() {
            return Err(null("output buffer"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    }
    Ok(())
}

/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mese_model_load(path: *const c_char, out: *mut *mut MeseModel) -> MeseStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let model = load_checkpoint(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(MeseModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mese_model_free(model: *mut MeseModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Entity distributions of `model` over `corpus` with both modalities.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mese_index_build(
    model: *const MeseModel,
    corpus: *const MeseCorpus,
    out: *mut *mut MeseIndex,
) -> MeseStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let model = &handle(model, "model")?.0;
        let corpus = &handle(corpus, "corpus")?.0;
        let reps = Representations::from_model(model, corpus, ModalityMask::NONE, ModalityMask::NONE)?;
        *out = Box::into_raw(Box::new(MeseIndex(reps)));
        Ok(())
    })
}

/// # Safety
/// `index` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mese_index_free(index: *mut MeseIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Expands `seeds` to `target_size` entities. Ids go to `out_ids` and,
/// when `out_scores` is non-null, scores to `out_scores`, both best first.
/// `out_len` receives the list length.
///
/// # Safety
/// `seeds` must hold `n_seeds` elements, `out_ids` (and `out_scores` if
/// non-null) `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn mese_expand(
    index: *const MeseIndex,
    seeds: *const usize,
    n_seeds: usize,
    target_size: usize,
    ensemble: bool,
    out_ids: *mut usize,
    out_scores: *mut f64,
    capacity: usize,
    out_len: *mut usize,
) -> MeseStatus {
    guard(|| {
        let reps = &handle(index, "index")?.0;
        let seeds = slice_arg(seeds, n_seeds, "seeds")?;
        let out_len = out_arg(out_len, "out_len")?;
        let config = ExpansionConfig {
            target_size,
            ensemble,
            ..ExpansionConfig::default()
        };
        let ranked = if ensemble {
            rerank(seeds, reps, &config)?
        } else {
            window_search(seeds, reps, &config)?
        };
        *out_len = ranked.len();
        let ids: Vec<usize> = ranked.iter().map(|r| r.0).collect();
        copy_out(&ids, out_ids, capacity)?;
        if !out_scores.is_null() {
            let scores: Vec<f64> = ranked.iter().map(|r| r.1).collect();
            copy_out(&scores, out_scores, capacity)?;
        }
        Ok(())
    })
}

/// P@K of `ranked` against the ground-truth set `gt`.
///
/// # Safety
/// Arrays must hold the stated number of elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mese_precision_at_k(
    ranked: *const usize,
    n_ranked: usize,
    gt: *const usize,
    n_gt: usize,
    k: usize,
    out: *mut f64,
) -> MeseStatus {
    guard(|| {
        let ranked = slice_arg(ranked, n_ranked, "ranked")?;
        let gt = slice_arg(gt, n_gt, "gt")?.iter().copied().collect();
        *out_arg(out, "out")? = evaluation::precision_at_k(ranked, &gt, k)?;
        Ok(())
    })
}

/// AP@K of `ranked` against the ground-truth set `gt`.
///
/// # Safety
/// Arrays must hold the stated number of elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mese_average_precision_at_k(
    ranked: *const usize,
    n_ranked: usize,
    gt: *const usize,
    n_gt: usize,
    k: usize,
    out: *mut f64,
) -> MeseStatus {
    guard(|| {
        let ranked = slice_arg(ranked, n_ranked, "ranked")?;
        let gt = slice_arg(gt, n_gt, "gt")?.iter().copied().collect();
        *out_arg(out, "out")? = evaluation::average_precision_at_k(ranked, &gt, k)?;
        Ok(())
    })
}

/// Fleiss' κ of a row-major `items × categories` count table.
///
/// # Safety
/// `table` must hold `items * categories` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mese_fleiss_kappa(
    table: *const usize,
    items: usize,
    categories: usize,
    raters: usize,
    out: *mut f64,
) -> MeseStatus {
    guard(|| {
        if categories == 0 {
            return Err(Fail::Status(MeseStatus::InvalidArgument, "no categories".into()));
        }
        let len = items
            .checked_mul(categories)
            .ok_or_else(|| Fail::Status(MeseStatus::InvalidArgument, "table too large".into()))?;
        let flat = slice_arg(table, len, "table")?;
        let rows: Vec<Vec<usize>> = flat.chunks(categories).map(<[usize]>::to_vec).collect();
        *out_arg(out, "out")? = dataset_tools::fleiss_kappa(&rows, raters)?;
        Ok(())
    })
}

/// Diversity of `n` row-major embeddings of width `dim`.
///
/// # Safety
/// `embeddings` must hold `n * dim` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mese_diversity(embeddings: *const f64, n: usize, dim: usize, out: *mut f64) -> MeseStatus {
    guard(|| {
        if dim == 0 {
            return Err(Fail::Status(MeseStatus::InvalidArgument, "zero dimension".into()));
        }
        let len = n
            .checked_mul(dim)
            .ok_or_else(|| Fail::Status(MeseStatus::InvalidArgument, "input too large".into()))?;
        let rows: Vec<Vec<f64>> = slice_arg(embeddings, len, "embeddings")?
            .chunks(dim)
            .map(<[f64]>::to_vec)
            .collect();
        *out_arg(out, "out")? = dataset_tools::diversity(&rows)?;
        Ok(())
    })
}

/// Image score α·(image·text) + (1−α)·max over objects of
/// cos(object, typical). All vectors have width `dim` and unit norm;
/// `objects` is row-major with `n_objects` rows and may be null when
/// `n_objects` is 0.
///
/// # Safety
/// Arrays must hold the stated number of elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mese_score_image(
    clip_image: *const f64,
    objects: *const f64,
    n_objects: usize,
    clip_text: *const f64,
    typical_image: *const f64,
    dim: usize,
    alpha: f64,
    out: *mut f64,
) -> MeseStatus {
    guard(|| {
        let len = n_objects
            .checked_mul(dim)
            .ok_or_else(|| Fail::Status(MeseStatus::InvalidArgument, "input too large".into()))?;
        let objects = if dim == 0 {
            Vec::new()
        } else {
            slice_arg(objects, len, "objects")?.chunks(dim).map(<[f64]>::to_vec).collect()
        };
        let candidate = ImageCandidate {
            id: 0,
            clip_image: slice_arg(clip_image, dim, "clip_image")?.to_vec(),
            objects,
        };
        let query = RerankQuery {
            clip_text: slice_arg(clip_text, dim, "clip_text")?.to_vec(),
            typical_image: slice_arg(typical_image, dim, "typical_image")?.to_vec(),
            alpha,
        };
        *out_arg(out, "out")? = dataset_tools::score_image(&candidate, &query)?;
        Ok(())
    })
}
