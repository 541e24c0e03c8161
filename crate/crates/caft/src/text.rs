//! Text hierarchy: sentence splitting, chunking, word-level tokenization,
//! and the two-stage Sub-caption / Whole-caption transformer encoder.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::ModelConfig;
use crate::nn::{self, AttnMask};
use crate::params::{Graph, ParamStore};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TextError {
    #[error("caption has no alphanumeric content")]
    EmptyCaption,
    #[error("chunk count must be at least 1")]
    ZeroChunks,
    #[error("all chunks are masked out")]
    AllMasked,
    #[error("vocabulary file {path}: {reason}")]
    BadVocabulary { path: String, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TextError>;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

/// Word-level vocabulary with dense ids; ids 0-3 are reserved for
/// PAD/BOS/EOS/UNK in that order.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn from_words(words: &[String]) -> Self {
        let mut tokens = vec![
            "<pad>".to_string(),
            "<bos>".to_string(),
            "<eos>".to_string(),
            "<unk>".to_string(),
        ];
        tokens.extend(words.iter().cloned());
        Vocabulary { tokens }
    }

    /// One token per line, line number = id, first four lines reserved.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
        if tokens.len() < 4 || tokens[..4] != ["<pad>", "<bos>", "<eos>", "<unk>"] {
            return Err(TextError::BadVocabulary {
                path: path.display().to_string(),
                reason: "first four lines must be <pad>/<bos>/<eos>/<unk>".into(),
            });
        }
        Ok(Vocabulary { tokens })
    }

    pub fn to_file(&self, path: &Path) -> Result<()> {
        fs::write(path, self.tokens.join("\n") + "\n")?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id_of(&self, word: &str) -> u32 {
        self.tokens
            .iter()
            .position(|t| t == word)
            .map(|i| i as u32)
            .unwrap_or(UNK)
    }
}

/// A long caption split into sentences, grouped into N chunks, tokenized.
#[derive(Clone, Debug)]
pub struct CaptionHierarchy {
    pub sentences: Vec<String>,
    pub chunks: Vec<Vec<usize>>,
    pub token_ids: Vec<Vec<u32>>,
    pub chunk_mask: Vec<bool>,
}

/// Splits on sentence-final punctuation followed by whitespace or end of
/// text; a trailing fragment without a terminator is kept as a sentence.
pub fn split_sentences(caption: &str) -> Result<Vec<String>> {
    if !caption.chars().any(|c| c.is_alphanumeric()) {
        return Err(TextError::EmptyCaption);
    }
    let chars: Vec<char> = caption.chars().collect();
    let mut sentences = Vec::new();
    let mut start = 0;
    for i in 0..chars.len() {
        if matches!(chars[i], '.' | '!' | '?')
            && (i + 1 == chars.len() || chars[i + 1].is_whitespace())
        {
            let s: String = chars[start..=i].iter().collect();
            let s = s.trim().to_string();
            if !s.is_empty() {
                sentences.push(s);
            }
            start = i + 1;
        }
    }
    let tail: String = chars[start..].iter().collect();
    let tail = tail.trim().to_string();
    if !tail.is_empty() {
        sentences.push(tail);
    }
    sentences.retain(|s| s.chars().any(|c| c.is_alphanumeric()));
    Ok(sentences)
}

/// Training-time chunking: 1-3 consecutive sentences per chunk, excess
/// discarded, short captions resampled with replacement.
pub fn chunk_random(
    sentence_count: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<usize>>, Vec<bool>)> {
    if n == 0 {
        return Err(TextError::ZeroChunks);
    }
    let l = sentence_count;
    let mut chunks = Vec::with_capacity(n);
    if l < n {
        for i in 0..n {
            if i < l {
                chunks.push(vec![i]);
            } else {
                chunks.push(vec![rng.gen_range(0..l)]);
            }
        }
    } else {
        let mut next = 0usize;
        for i in 0..n {
            let chunks_left = n - 1 - i;
            let available = l - next;
            let max_take = 3.min(available - chunks_left);
            let take = rng.gen_range(1..=max_take);
            chunks.push((next..next + take).collect());
            next += take;
        }
    }
    let mask = vec![true; n];
    Ok((chunks, mask))
}

/// Inference-time chunking: fairest consecutive split; short captions pad
/// trailing chunks with the last sentence, masked out.
pub fn chunk_balanced(sentence_count: usize, n: usize) -> Result<(Vec<Vec<usize>>, Vec<bool>)> {
    if n == 0 {
        return Err(TextError::ZeroChunks);
    }
    let l = sentence_count;
    let mut chunks = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    if l < n {
        for i in 0..n {
            if i < l {
                chunks.push(vec![i]);
                mask.push(true);
            } else {
                chunks.push(vec![l - 1]);
                mask.push(false);
            }
        }
    } else {
        let base = l / n;
        let extra = l % n;
        let mut next = 0;
        for i in 0..n {
            let take = base + usize::from(i < extra);
            chunks.push((next..next + take).collect());
            mask.push(true);
            next += take;
        }
    }
    Ok((chunks, mask))
}

/// Lowercased word tokens, BOS-prefixed, EOS-appended, truncated keeping
/// BOS and EOS, PAD-filled to `context`. Total on strings.
pub fn tokenize_chunk(chunk_text: &str, vocab: &Vocabulary, context: usize) -> Vec<u32> {
    assert!(context >= 3, "context must be at least 3");
    let words = chunk_text
        .split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_ascii_alphanumeric())
                .collect::<String>()
                .to_lowercase()
        })
        .filter(|w| !w.is_empty());
    let mut ids = vec![BOS];
    for w in words {
        if ids.len() == context - 1 {
            break;
        }
        ids.push(vocab.id_of(&w));
    }
    ids.push(EOS);
    ids.resize(context, PAD);
    ids
}

fn chunk_text(sentences: &[String], chunk: &[usize]) -> String {
    chunk
        .iter()
        .map(|&i| sentences[i].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn build_hierarchy(
    sentences: Vec<String>,
    chunks: Vec<Vec<usize>>,
    chunk_mask: Vec<bool>,
    vocab: &Vocabulary,
    context: usize,
) -> CaptionHierarchy {
    let token_ids = chunks
        .iter()
        .map(|c| tokenize_chunk(&chunk_text(&sentences, c), vocab, context))
        .collect();
    CaptionHierarchy {
        sentences,
        chunks,
        token_ids,
        chunk_mask,
    }
}

pub fn balanced_hierarchy(
    caption: &str,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
) -> Result<CaptionHierarchy> {
    let sentences = split_sentences(caption)?;
    let (chunks, mask) = chunk_balanced(sentences.len(), cfg.n_chunks)?;
    Ok(build_hierarchy(sentences, chunks, mask, vocab, cfg.ctx_sub))
}

// ---------------------------------------------------------------------------
// Encoder parameters and forward passes.

pub fn register_text_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let d = cfg.d;
    store.register_normal("text.token_emb", vec![cfg.vocab_size, d], 0.02, rng);
    store.register_normal("text.pos_sub", vec![cfg.ctx_sub, d], 0.01, rng);
    store.mark_no_decay("text.pos_sub");
    store.register_normal("text.pos_whole", vec![cfg.n_chunks + 1, d], 0.01, rng);
    store.mark_no_decay("text.pos_whole");
    for i in 0..cfg.l1 {
        nn::register_block(store, &format!("text.sub.block{i}"), d, rng);
    }
    store.register_const("text.sub.lnf.g", vec![d], 1.0, true);
    store.register_const("text.sub.lnf.b", vec![d], 0.0, true);
    nn::register_affine(store, "text.sub.proj", d, d, rng);
    // Residual adapter D -> D/4 -> D with a learnable scalar gate.
    nn::register_affine(store, "text.adapter.fc1", d, d / 4, rng);
    nn::register_affine(store, "text.adapter.fc2", d / 4, d, rng);
    store.register_const("text.adapter.gate", vec![1], 0.2, true);
    store.register_normal("text.whole.cls", vec![d], 0.02, rng);
    store.mark_no_decay("text.whole.cls");
    for i in 0..cfg.l2 {
        nn::register_block(store, &format!("text.whole.block{i}"), d, rng);
    }
    store.register_const("text.whole.lnf.g", vec![d], 1.0, true);
    store.register_const("text.whole.lnf.b", vec![d], 0.0, true);
    nn::register_affine(store, "text.whole.proj", d, d, rng);
}

/// Encodes one tokenized chunk through the Sub-caption Transformer:
/// causal attention, readout at the EOS position, projection to D.
pub fn encode_chunk(g: &Graph, cfg: &ModelConfig, token_ids: &[u32]) -> Result<Tensor> {
    let ids: Vec<usize> = token_ids.iter().map(|&t| t as usize).collect();
    let mut x = g
        .p("text.token_emb")
        .embedding_lookup(&ids)?
        .add(&g.p("text.pos_sub").slice_rows(0, ids.len())?)?;
    for i in 0..cfg.l1 {
        x = nn::block_forward(g, &format!("text.sub.block{i}"), &x, cfg.heads, AttnMask::Causal)?;
    }
    let eos_pos = token_ids
        .iter()
        .position(|&t| t == EOS)
        .expect("tokenize_chunk always emits EOS");
    let x = x
        .layernorm_last()?
        .mul(&g.p("text.sub.lnf.g"))?
        .add(&g.p("text.sub.lnf.b"))?;
    let row = x.slice_rows(eos_pos, eos_pos + 1)?;
    Ok(nn::affine(g, "text.sub.proj", &row)?.reshape(vec![cfg.d])?)
}

/// Encodes each chunk independently; rows are unnormalized embeddings.
pub fn encode_sub(g: &Graph, cfg: &ModelConfig, token_seqs: &[Vec<u32>]) -> Result<Tensor> {
    let rows: Vec<Tensor> = token_seqs
        .iter()
        .map(|seq| encode_chunk(g, cfg, seq))
        .collect::<Result<_>>()?;
    Ok(Tensor::concat_rows(&rows)?)
}

/// Residual adapter: `gate * MLP(x) + (1 - gate) * x`, row-wise.
pub fn adapt(g: &Graph, t_sub: &Tensor) -> Result<Tensor> {
    let gate = g.p("text.adapter.gate");
    let h = nn::affine(g, "text.adapter.fc1", t_sub)?.gelu()?;
    let h = nn::affine(g, "text.adapter.fc2", &h)?;
    let one_minus = gate.scale(-1.0)?.add_scalar(1.0)?;
    Ok(h.mul(&gate)?.add(&t_sub.mul(&one_minus)?)?)
}

/// Composes adapted chunk embeddings and a CLS token through the
/// Whole-caption Transformer; masked chunks are hidden from attention.
pub fn encode_whole(
    g: &Graph,
    cfg: &ModelConfig,
    t_sub_adapted: &Tensor,
    chunk_mask: &[bool],
) -> Result<Tensor> {
    if chunk_mask.iter().all(|&m| !m) {
        return Err(TextError::AllMasked);
    }
    let n = chunk_mask.len();
    let cls = g.p("text.whole.cls").reshape(vec![1, cfg.d])?;
    let mut x = Tensor::concat_rows(&[t_sub_adapted.clone(), cls])?
        .add(&g.p("text.pos_whole"))?;
    let mut hidden: Vec<bool> = chunk_mask.iter().map(|&m| !m).collect();
    hidden.push(false); // CLS always visible
    for i in 0..cfg.l2 {
        x = nn::block_forward(
            g,
            &format!("text.whole.block{i}"),
            &x,
            cfg.heads,
            AttnMask::KeyPad(&hidden),
        )?;
    }
    let x = x
        .layernorm_last()?
        .mul(&g.p("text.whole.lnf.g"))?
        .add(&g.p("text.whole.lnf.b"))?;
    let row = x.slice_rows(n, n + 1)?;
    Ok(nn::affine(g, "text.whole.proj", &row)?.reshape(vec![cfg.d])?)
}
