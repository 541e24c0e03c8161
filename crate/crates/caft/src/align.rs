//! Cross-modal alignment: attention pooling of segment tokens by sub-caption
//! queries, the part/whole sigmoid losses, and the blended scoring rule used
//! at retrieval time.

use rand::Rng;

use crate::config::ModelConfig;
use crate::nn::{self, AttnMask};
use crate::params::{Graph, ParamStore};
use crate::synth::AnnotatedSample;
use crate::tensor::{Tensor, TensorError};
use crate::text::{self, CaptionHierarchy, TextError, Vocabulary};
use crate::vision::SegmentHierarchy;

#[derive(Debug, thiserror::Error)]
pub enum AlignError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("alpha must lie in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("caption set for sample {0} has no sentences to draw from")]
    NoCaptions(usize),
}

pub type Result<T> = std::result::Result<T, AlignError>;

/// Where each of a sample's K sub-captions came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubSource {
    /// Chunk `c` of the long caption.
    LongChunk(usize),
    /// Short caption with this index.
    Short(usize),
}

/// One sample's text inputs for a training step: the chunked long caption
/// (first N slots) padded out to K with independently drawn short captions.
#[derive(Debug, Clone)]
pub struct SampleSubs {
    /// K rows of ctx_sub token ids.
    pub token_ids: Vec<Vec<u32>>,
    /// Validity per slot; slots `n_chunks..k_subs` are always valid.
    pub mask: Vec<bool>,
    pub sources: Vec<SubSource>,
    /// The hierarchy built for the long caption (drives the whole-level arm).
    pub hierarchy: CaptionHierarchy,
}

/// Draw the K sub-captions for one sample.
pub fn assemble_subs(
    sample: &AnnotatedSample,
    vocab: &Vocabulary,
    cfg: &ModelConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<SampleSubs> {
    let sentences = sample.long_caption.clone();
    let (chunks, chunk_mask) = text::chunk_random(sentences.len(), cfg.n_chunks, rng)?;
    let hierarchy = text::build_hierarchy(sentences, chunks, chunk_mask, vocab, cfg.ctx_sub);
    let mut token_ids = hierarchy.token_ids.clone();
    let mut mask = hierarchy.chunk_mask.clone();
    let mut sources: Vec<SubSource> = (0..cfg.n_chunks).map(SubSource::LongChunk).collect();

    if sample.short_captions.is_empty() {
        return Err(AlignError::NoCaptions(sample.id));
    }
    for _ in cfg.n_chunks..cfg.k_subs {
        let pick = rng.gen_range(0..sample.short_captions.len());
        token_ids.push(text::tokenize_chunk(
            &sample.short_captions[pick],
            vocab,
            cfg.ctx_sub,
        ));
        mask.push(true);
        sources.push(SubSource::Short(pick));
    }
    Ok(SampleSubs {
        token_ids,
        mask,
        sources,
        hierarchy,
    })
}

pub fn register_align_params(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) {
    let d = cfg.d;
    nn::register_affine(store, "align.pool.q", d, d, rng);
    nn::register_affine(store, "align.pool.k", d, d, rng);
    nn::register_affine(store, "align.pool.v", d, d, rng);
    nn::register_affine(store, "align.pool.o", d, d, rng);
    let tau = (1.0f64 / 0.07).ln();
    store.register_const("align.part.log_scale", vec![1], tau, true);
    store.register_const("align.part.bias", vec![1], -10.0, true);
    store.register_const("align.whole.log_scale", vec![1], tau, true);
    store.register_const("align.whole.bias", vec![1], -10.0, true);
}

/// Pool an image's fine tokens under a batch of text queries. Returns the
/// pooled features `[Q, D]` and the head-averaged attention `[Q, M]`.
pub fn attn_pool(
    g: &Graph,
    queries: &Tensor,
    v_fine: &Tensor,
    heads: usize,
) -> Result<(Tensor, Tensor)> {
    let (out, attn) =
        nn::multihead_attention(g, "align.pool", queries, v_fine, heads, AttnMask::None)?;
    Ok((out, attn))
}

fn rowwise_cosine(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let sims = a
        .l2_normalize_last()?
        .mul(&b.l2_normalize_last()?)?
        .sum_axis(1)?;
    Ok(sims)
}

/// Part-level loss over the full B x B x K grid. `t_sub` stacks every
/// sample's K sub-caption features as `[B*K, D]`; `valid` runs parallel to
/// its rows. Pairs (i, j) are positive iff i == j.
pub fn part_loss(
    g: &Graph,
    images: &[SegmentHierarchy],
    t_sub: &Tensor,
    valid: &[bool],
    fine_override: Option<&[Tensor]>,
    heads: usize,
) -> Result<Tensor> {
    let b = images.len();
    if b == 0 {
        return Err(AlignError::EmptyBatch);
    }
    let bk = t_sub.shape()[0];
    let k = bk / b;
    let n_valid = valid.iter().filter(|&&v| v).count();

    let valid01: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let valid_t = Tensor::constant(vec![bk], valid01);
    let scale = g.p("align.part.log_scale").exp()?;
    let bias = g.p("align.part.bias");

    let mut total: Option<Tensor> = None;
    for (i, img) in images.iter().enumerate() {
        let fine = match fine_override {
            Some(alt) => &alt[i],
            None => &img.v_fine,
        };
        let (pooled, _) = attn_pool(g, t_sub, fine, heads)?;
        let cos = rowwise_cosine(&pooled, t_sub)?;
        let logits = cos.mul(&scale)?.add(&bias)?;
        let mut sign = vec![-1.0; bk];
        for s in sign.iter_mut().skip(i * k).take(k) {
            *s = 1.0;
        }
        let terms = logits
            .mul(&Tensor::constant(vec![bk], sign))?
            .log_sigmoid()?
            .neg()?
            .mul(&valid_t)?;
        let part = terms.sum_all()?;
        total = Some(match total {
            Some(t) => t.add(&part)?,
            None => part,
        });
    }
    let denom = (b * n_valid) as f64;
    Ok(total.expect("b > 0").scale(1.0 / denom)?)
}

/// Whole-level loss over the B x B grid of global features.
pub fn whole_loss(g: &Graph, v_coarse: &Tensor, t_whole: &Tensor) -> Result<Tensor> {
    let b = v_coarse.shape()[0];
    if b == 0 {
        return Err(AlignError::EmptyBatch);
    }
    let cos = v_coarse
        .l2_normalize_last()?
        .matmul(&t_whole.l2_normalize_last()?.transpose()?)?;
    let scale = g.p("align.whole.log_scale").exp()?;
    let logits = cos.mul(&scale)?.add(&g.p("align.whole.bias"))?;
    let mut sign = vec![-1.0; b * b];
    for i in 0..b {
        sign[i * b + i] = 1.0;
    }
    let terms = logits
        .mul(&Tensor::constant(vec![b, b], sign))?
        .log_sigmoid()?
        .neg()?;
    Ok(terms.mean_all()?)
}

/// Pairwise similarity matrices for a gallery of images against a gallery of
/// captions. `whole[i][j]` scores image i against caption j.
#[derive(Debug, Clone)]
pub struct SimilarityReport {
    pub n_images: usize,
    pub n_captions: usize,
    pub whole: Vec<f64>,
    pub part: Vec<f64>,
    pub combined: Vec<f64>,
    pub alpha: f64,
}

impl SimilarityReport {
    pub fn whole_at(&self, i: usize, j: usize) -> f64 {
        self.whole[i * self.n_captions + j]
    }
    pub fn combined_at(&self, i: usize, j: usize) -> f64 {
        self.combined[i * self.n_captions + j]
    }
}

/// Encoded caption as used for scoring: per-chunk features plus the global
/// feature and the chunk validity mask.
pub struct CaptionEncoding {
    pub t_sub: Tensor,
    pub t_whole: Tensor,
    pub mask: Vec<bool>,
}

/// Blend of the two similarity levels: `(1 - alpha) * whole + alpha * part`,
/// where the part term sums cosines between pooled segment features and each
/// valid chunk.
pub fn score_matrix(
    g: &Graph,
    images: &[SegmentHierarchy],
    captions: &[CaptionEncoding],
    heads: usize,
    alpha: f64,
) -> Result<SimilarityReport> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(AlignError::BadAlpha(alpha));
    }
    let n_images = images.len();
    let n_captions = captions.len();
    if n_images == 0 || n_captions == 0 {
        return Err(AlignError::EmptyBatch);
    }

    let chunk_rows: Vec<Tensor> = captions.iter().map(|c| c.t_sub.clone()).collect();
    let all_chunks = Tensor::concat_rows(&chunk_rows)?;
    let whole_rows: Vec<Tensor> = captions
        .iter()
        .map(|c| c.t_whole.reshape(vec![1, c.t_whole.shape()[0]]))
        .collect::<std::result::Result<_, _>>()?;
    let all_whole = Tensor::concat_rows(&whole_rows)?;

    let mut whole = vec![0.0; n_images * n_captions];
    let mut part = vec![0.0; n_images * n_captions];
    for (i, img) in images.iter().enumerate() {
        let vc = img.v_coarse.reshape(vec![1, img.v_coarse.shape()[0]])?;
        let w = vc
            .l2_normalize_last()?
            .matmul(&all_whole.l2_normalize_last()?.transpose()?)?;
        whole[i * n_captions..(i + 1) * n_captions].copy_from_slice(w.values());

        let (pooled, _) = attn_pool(g, &all_chunks, &img.v_fine, heads)?;
        let cos = rowwise_cosine(&pooled, &all_chunks)?;
        let mut row = 0usize;
        for (j, cap) in captions.iter().enumerate() {
            let mut s = 0.0;
            for &v in &cap.mask {
                if v {
                    s += cos.values()[row];
                }
                row += 1;
            }
            part[i * n_captions + j] = s;
        }
    }

    let combined: Vec<f64> = whole
        .iter()
        .zip(&part)
        .map(|(&w, &p)| (1.0 - alpha) * w + alpha * p)
        .collect();
    Ok(SimilarityReport {
        n_images,
        n_captions,
        whole,
        part,
        combined,
        alpha,
    })
}
