//! Evaluation: retrieval R@1 in both directions, the alpha sweep over the
//! blended score, and zero-shot grounding via pooled attention maps.

use std::fmt::Write as _;
use std::path::Path;

use crate::align::{self, AlignError, CaptionEncoding};
use crate::config::ModelConfig;
use crate::params::{Graph, ParamStore};
use crate::synth::{self, AnnotatedSample, SynthError};
use crate::tensor::TensorError;
use crate::text::{self, TextError};
use crate::train::Variant;
use crate::vision::{self, SegmentHierarchy, VisionError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("empty score matrix")]
    EmptyScores,
    #[error("truth index {0} out of range")]
    BadTruth(usize),
    #[error("mask sizes differ: {0} vs {1}")]
    MaskMismatch(usize, usize),
    #[error("empty query text")]
    EmptyQuery,
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Fraction of rows whose argmax hits the ground-truth column; ties break
/// toward the lowest index.
pub fn recall_at_1(scores: &[f64], rows: usize, cols: usize, truth: &[usize]) -> Result<f64> {
    if rows == 0 || cols == 0 || scores.len() != rows * cols || truth.len() != rows {
        return Err(EvalError::EmptyScores);
    }
    let mut hits = 0usize;
    for (i, &t) in truth.iter().enumerate() {
        if t >= cols {
            return Err(EvalError::BadTruth(t));
        }
        let row = &scores[i * cols..(i + 1) * cols];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == t {
            hits += 1;
        }
    }
    Ok(hits as f64 / rows as f64)
}

/// Otsu binarization over a min-max normalized 256-bin histogram. The
/// returned flag is true when the input is degenerate (under two distinct
/// values), in which case the mask is all zeros.
pub fn otsu_threshold(values: &[f64]) -> (Vec<bool>, f64, bool) {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || hi <= lo {
        return (vec![false; values.len()], 0.0, true);
    }
    const BINS: usize = 256;
    let norm: Vec<f64> = values.iter().map(|&v| (v - lo) / (hi - lo)).collect();
    let mut hist = [0usize; BINS];
    for &v in &norm {
        let b = ((v * BINS as f64) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let total_mean: f64 = hist
        .iter()
        .enumerate()
        .map(|(b, &c)| b as f64 * c as f64)
        .sum::<f64>()
        / total;

    let mut best_t = 0usize;
    let mut best_var = f64::NEG_INFINITY;
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    #[allow(clippy::needless_range_loop)]
    for t in 0..BINS - 1 {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        if w0 == 0.0 || w0 == total {
            continue;
        }
        let w1 = total - w0;
        let m0 = sum0 / w0;
        let m1 = (total_mean * total - sum0) / w1;
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best_var {
            best_var = var;
            best_t = t;
        }
    }
    // Threshold in normalized units is the upper edge of the chosen bin.
    let thresh = (best_t as f64 + 1.0) / BINS as f64;
    let mask: Vec<bool> = norm.iter().map(|&v| v > thresh).collect();
    (mask, thresh * (hi - lo) + lo, false)
}

/// Intersection over union for a single mask pair; both-empty scores 1.
pub fn iou(pred: &[bool], truth: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(EvalError::MaskMismatch(pred.len(), truth.len()));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        inter += usize::from(p && t);
        union += usize::from(p || t);
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Mean IoU over matched mask pairs.
pub fn miou(pairs: &[(Vec<bool>, Vec<bool>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyScores);
    }
    let mut s = 0.0;
    for (p, t) in pairs {
        s += iou(p, t)?;
    }
    Ok(s / pairs.len() as f64)
}

#[derive(Debug, Clone)]
pub struct GroundingResult {
    /// Pixel heatmap summing to 1.
    pub heatmap: Vec<f64>,
    pub mask: Vec<bool>,
    pub degenerate: bool,
    pub iou: Option<f64>,
}

/// Project pooled segment attention to pixel space. The transport is the
/// column-normalized pixel-to-fine assignment, so the unit of attention
/// mass arrives intact in the heatmap.
pub fn segment_weights_to_heatmap(image: &SegmentHierarchy, weights: &[f64]) -> Vec<f64> {
    let hw = image.map.height * image.map.width;
    let k = image.stage_sizes[0];
    let p2f = image.pixel_to_fine();
    let mut col_mass = vec![0.0; k];
    for p in 0..hw {
        for g in 0..k {
            col_mass[g] += p2f[p * k + g];
        }
    }
    let mut heat = vec![0.0; hw];
    for p in 0..hw {
        for g in 0..k {
            if col_mass[g] > 0.0 {
                heat[p] += p2f[p * k + g] / col_mass[g] * weights[g];
            }
        }
    }
    heat
}

/// Ground a single-sentence query against an encoded image.
pub fn ground_query(
    store: &ParamStore,
    cfg: &ModelConfig,
    image: &SegmentHierarchy,
    query: &str,
    vocab: &text::Vocabulary,
    truth: Option<&[bool]>,
) -> Result<GroundingResult> {
    if query.trim().is_empty() {
        return Err(EvalError::EmptyQuery);
    }
    let g = Graph::frozen(store);
    let ids = text::tokenize_chunk(query, vocab, cfg.ctx_sub);
    let t = text::encode_chunk(&g, cfg, &ids)?.reshape(vec![1, cfg.d])?;
    let (_, attn) = align::attn_pool(&g, &t, &image.v_fine, cfg.heads)?;
    let heatmap = segment_weights_to_heatmap(image, attn.values());
    let (mask, _, degenerate) = otsu_threshold(&heatmap);
    let iou_val = match truth {
        Some(tm) => Some(iou(&mask, tm)?),
        None => None,
    };
    Ok(GroundingResult {
        heatmap,
        mask,
        degenerate,
        iou: iou_val,
    })
}

#[derive(Debug, Clone)]
pub struct RetrievalResult {
    pub alpha: f64,
    pub i2t_r1: f64,
    pub t2i_r1: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub retrieval: Vec<RetrievalResult>,
    pub grounding_ious: Vec<(String, f64)>,
    pub miou: f64,
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("alpha,i2t_r1,t2i_r1\n");
        for r in &self.retrieval {
            let _ = writeln!(out, "{},{:.6},{:.6}", r.alpha, r.i2t_r1, r.t2i_r1);
        }
        out.push_str("query_id,iou\n");
        for (q, v) in &self.grounding_ious {
            let _ = writeln!(out, "{q},{v:.6}");
        }
        let _ = writeln!(out, "miou,{:.6}", self.miou);
        out
    }
}

/// Full held-out evaluation: balanced chunking for every caption, the alpha
/// sweep, and grounding over every object sentence with a known mask.
/// When `artifacts` is set, per-query heatmaps and masks are written there
/// as PGMs.
pub fn evaluate(
    store: &ParamStore,
    cfg: &ModelConfig,
    variant: Variant,
    samples: &[AnnotatedSample],
    vocab: &text::Vocabulary,
    alphas: &[f64],
    artifacts: Option<&Path>,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(EvalError::EmptyScores);
    }
    let g = Graph::frozen(store);

    let mut images = Vec::with_capacity(samples.len());
    let mut captions = Vec::with_capacity(samples.len());
    for sample in samples {
        images.push(vision::encode_image(&g, cfg, &sample.image, variant.grouping())?);
        let sentences = sample.long_caption.clone();
        let (chunks, chunk_mask) = text::chunk_balanced(sentences.len(), cfg.n_chunks)?;
        let hier = text::build_hierarchy(sentences, chunks, chunk_mask, vocab, cfg.ctx_sub);
        let t_sub = text::encode_sub(&g, cfg, &hier.token_ids)?;
        let t_whole = match variant {
            Variant::FlatText => {
                let ids =
                    text::tokenize_chunk(&sample.long_caption.join(" "), vocab, cfg.ctx_sub);
                text::encode_chunk(&g, cfg, &ids)?
            }
            _ => {
                let adapted = text::adapt(&g, &t_sub)?;
                text::encode_whole(&g, cfg, &adapted, &hier.chunk_mask)?
            }
        };
        captions.push(CaptionEncoding {
            t_sub,
            t_whole,
            mask: hier.chunk_mask.clone(),
        });
    }

    let mut retrieval = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let report = align::score_matrix(&g, &images, &captions, cfg.heads, alpha)?;
        let n = report.n_images;
        let truth: Vec<usize> = (0..n).collect();
        let i2t = recall_at_1(&report.combined, n, n, &truth)?;
        // Transpose for text-to-image.
        let mut t_scores = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                t_scores[j * n + i] = report.combined[i * n + j];
            }
        }
        let t2i = recall_at_1(&t_scores, n, n, &truth)?;
        retrieval.push(RetrievalResult {
            alpha,
            i2t_r1: i2t,
            t2i_r1: t2i,
        });
    }

    let mut grounding_ious = Vec::new();
    let mut pairs = Vec::new();
    for (si, sample) in samples.iter().enumerate() {
        for (oi, obj) in sample.spec.objects.iter().enumerate() {
            let query = synth::short_caption(obj);
            let flat = sample.masks[oi].clone();
            let res = ground_query(store, cfg, &images[si], &query, vocab, Some(&flat))?;
            let qid = format!("{}_{}", sample.id, oi);
            grounding_ious.push((qid.clone(), res.iou.unwrap_or(0.0)));
            pairs.push((res.mask.clone(), flat));
            if let Some(dir) = artifacts {
                write_heatmap_pgm(&dir.join(format!("{qid}_heat.pgm")), &images[si], &res)?;
                write_mask_pgm(&dir.join(format!("{qid}_mask.pgm")), &images[si], &res)?;
            }
        }
    }
    let miou_val = miou(&pairs)?;

    Ok(EvalReport {
        retrieval,
        grounding_ious,
        miou: miou_val,
    })
}

pub fn write_heatmap_pgm(path: &Path, image: &SegmentHierarchy, res: &GroundingResult) -> Result<()> {
    let lo = res.heatmap.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = res.heatmap.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bytes: Vec<u8> = res
        .heatmap
        .iter()
        .map(|&v| ((v - lo) / span * 255.0).round() as u8)
        .collect();
    synth::write_pgm(path, image.map.width, image.map.height, &bytes)?;
    Ok(())
}

pub fn write_mask_pgm(path: &Path, image: &SegmentHierarchy, res: &GroundingResult) -> Result<()> {
    let bytes: Vec<u8> = res.mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    synth::write_pgm(path, image.map.width, image.map.height, &bytes)?;
    Ok(())
}
