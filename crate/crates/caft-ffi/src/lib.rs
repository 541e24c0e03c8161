//! C ABI over the core library: load a checkpoint, score an image against a
//! caption, and ground a query to heatmap/mask files. Handles are opaque;
//! every call returns a status code and the last failure message is
//! retrievable per thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use caft::align::{self, CaptionEncoding};
use caft::config::ModelConfig;
use caft::eval;
use caft::params::{Graph, ParamStore};
use caft::synth;
use caft::text::{self, Vocabulary};
use caft::train::{self, Variant};
use caft::vision;

/// Status codes shared with the CLI: 0 ok, 2 usage, 3 I/O, 4 numeric,
/// 5 compatibility.
pub const CAFT_OK: i32 = 0;
pub const CAFT_ERR_USAGE: i32 = 2;
pub const CAFT_ERR_IO: i32 = 3;
pub const CAFT_ERR_NUMERIC: i32 = 4;
pub const CAFT_ERR_COMPAT: i32 = 5;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Loaded model: parameters, config, variant, vocabulary.
pub struct CaftModel {
    store: ParamStore,
    cfg: ModelConfig,
    variant: Variant,
    vocab: Vocabulary,
}

unsafe fn cstr<'a>(p: *const c_char) -> Option<&'a str> {
    if p.is_null() {
        return None;
    }
    CStr::from_ptr(p).to_str().ok()
}

/// Load a model from a checkpoint plus its vocabulary file and preset name
/// ("desk" or "paper"). Returns null on failure; call `caft_last_error`.
///
/// # Safety
/// All pointers must be valid NUL-terminated UTF-8 strings.
#[no_mangle]
pub unsafe extern "C" fn caft_model_load(
    ckpt_path: *const c_char,
    vocab_path: *const c_char,
    preset: *const c_char,
) -> *mut CaftModel {
    let (Some(ckpt), Some(vocab_path), Some(preset)) =
        (cstr(ckpt_path), cstr(vocab_path), cstr(preset))
    else {
        set_error("null or non-utf8 argument");
        return std::ptr::null_mut();
    };
    let vocab = match Vocabulary::from_file(Path::new(vocab_path)) {
        Ok(v) => v,
        Err(e) => {
            set_error(&e.to_string());
            return std::ptr::null_mut();
        }
    };
    let Some(cfg) = ModelConfig::by_name(preset, vocab.len()) else {
        set_error("unknown preset");
        return std::ptr::null_mut();
    };
    match train::checkpoint_load(Path::new(ckpt), &cfg) {
        Ok(loaded) => Box::into_raw(Box::new(CaftModel {
            store: loaded.store,
            cfg,
            variant: loaded.variant,
            vocab,
        })),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Message for the most recent failure on this thread. Valid until the next
/// failing call.
#[no_mangle]
pub extern "C" fn caft_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Blended similarity between an image (binary PPM path) and a caption.
/// Writes the score through `out_score` and returns a status code.
///
/// # Safety
/// `model` must come from `caft_model_load`; strings as in `caft_model_load`;
/// `out_score` must point to a writable f64.
#[no_mangle]
pub unsafe extern "C" fn caft_score(
    model: *const CaftModel,
    image_path: *const c_char,
    caption: *const c_char,
    alpha: f64,
    out_score: *mut f64,
) -> i32 {
    let Some(m) = model.as_ref() else {
        set_error("null model");
        return CAFT_ERR_USAGE;
    };
    let (Some(image_path), Some(caption)) = (cstr(image_path), cstr(caption)) else {
        set_error("null or non-utf8 argument");
        return CAFT_ERR_USAGE;
    };
    if out_score.is_null() {
        set_error("null out_score");
        return CAFT_ERR_USAGE;
    }
    let image = match synth::read_ppm(Path::new(image_path)) {
        Ok(i) => i,
        Err(e) => {
            set_error(&e.to_string());
            return CAFT_ERR_IO;
        }
    };
    match score_inner(m, &image, caption, alpha) {
        Ok(s) => {
            *out_score = s;
            CAFT_OK
        }
        Err((code, msg)) => {
            set_error(&msg);
            code
        }
    }
}

fn score_inner(
    m: &CaftModel,
    image: &synth::ImageGrid,
    caption: &str,
    alpha: f64,
) -> Result<f64, (i32, String)> {
    let g = Graph::frozen(&m.store);
    let hier = vision::encode_image(&g, &m.cfg, image, m.variant.grouping())
        .map_err(|e| (CAFT_ERR_NUMERIC, e.to_string()))?;
    let cap = text::balanced_hierarchy(caption, &m.cfg, &m.vocab)
        .map_err(|e| (CAFT_ERR_USAGE, e.to_string()))?;
    let t_sub = text::encode_sub(&g, &m.cfg, &cap.token_ids)
        .map_err(|e| (CAFT_ERR_NUMERIC, e.to_string()))?;
    let t_whole = match m.variant {
        Variant::FlatText => {
            let ids = text::tokenize_chunk(caption, &m.vocab, m.cfg.ctx_sub);
            text::encode_chunk(&g, &m.cfg, &ids).map_err(|e| (CAFT_ERR_NUMERIC, e.to_string()))?
        }
        _ => {
            let adapted =
                text::adapt(&g, &t_sub).map_err(|e| (CAFT_ERR_NUMERIC, e.to_string()))?;
            text::encode_whole(&g, &m.cfg, &adapted, &cap.chunk_mask)
                .map_err(|e| (CAFT_ERR_NUMERIC, e.to_string()))?
        }
    };
    let captions = [CaptionEncoding {
        t_sub,
        t_whole,
        mask: cap.chunk_mask,
    }];
    let report = align::score_matrix(&g, &[hier], &captions, m.cfg.heads, alpha)
        .map_err(|e| (CAFT_ERR_USAGE, e.to_string()))?;
    Ok(report.combined_at(0, 0))
}

/// Ground a query against an image, writing heatmap and mask PGMs.
///
/// # Safety
/// Pointer contracts as in `caft_score`.
#[no_mangle]
pub unsafe extern "C" fn caft_ground(
    model: *const CaftModel,
    image_path: *const c_char,
    query: *const c_char,
    heatmap_out: *const c_char,
    mask_out: *const c_char,
) -> i32 {
    let Some(m) = model.as_ref() else {
        set_error("null model");
        return CAFT_ERR_USAGE;
    };
    let (Some(image_path), Some(query), Some(heat), Some(mask)) = (
        cstr(image_path),
        cstr(query),
        cstr(heatmap_out),
        cstr(mask_out),
    ) else {
        set_error("null or non-utf8 argument");
        return CAFT_ERR_USAGE;
    };
    let image = match synth::read_ppm(Path::new(image_path)) {
        Ok(i) => i,
        Err(e) => {
            set_error(&e.to_string());
            return CAFT_ERR_IO;
        }
    };
    let g = Graph::frozen(&m.store);
    let hier = match vision::encode_image(&g, &m.cfg, &image, m.variant.grouping()) {
        Ok(h) => h,
        Err(e) => {
            set_error(&e.to_string());
            return CAFT_ERR_NUMERIC;
        }
    };
    let res = match eval::ground_query(&m.store, &m.cfg, &hier, query, &m.vocab, None) {
        Ok(r) => r,
        Err(e) => {
            set_error(&e.to_string());
            return CAFT_ERR_USAGE;
        }
    };
    if let Err(e) = eval::write_heatmap_pgm(Path::new(heat), &hier, &res)
        .and_then(|_| eval::write_mask_pgm(Path::new(mask), &hier, &res))
    {
        set_error(&e.to_string());
        return CAFT_ERR_IO;
    }
    CAFT_OK
}

/// Release a model handle. Null is a no-op.
///
/// # Safety
/// `model` must come from `caft_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn caft_model_free(model: *mut CaftModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
