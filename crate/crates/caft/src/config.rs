//! Model-shape configuration and named presets.

use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub preset: String,
    /// Joint embedding dimension D.
    pub d: usize,
    pub heads: usize,
    /// Sub-caption transformer depth.
    pub l1: usize,
    /// Whole-caption transformer depth.
    pub l2: usize,
    pub ctx_sub: usize,
    /// Chunks per caption N.
    pub n_chunks: usize,
    /// Positive sub-captions per image K.
    pub k_subs: usize,
    /// Vision branch width C.
    pub c: usize,
    pub vision_blocks_per_stage: usize,
    /// Superpixel count S.
    pub superpixels: usize,
    /// Strictly decreasing grouping schedule.
    pub schedule: [usize; 3],
    pub canvas: usize,
    pub superpixel_iters: usize,
    /// Position weight in superpixel clustering features.
    pub lambda_pos: f64,
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            preset: "desk".into(),
            d: 64,
            heads: 4,
            l1: 4,
            l2: 2,
            ctx_sub: 32,
            n_chunks: 4,
            k_subs: 8,
            c: 64,
            vision_blocks_per_stage: 2,
            superpixels: 64,
            schedule: [16, 8, 4],
            canvas: 32,
            superpixel_iters: 10,
            lambda_pos: 0.5,
            vocab_size,
        }
    }

    pub fn paper(vocab_size: usize) -> Self {
        ModelConfig {
            preset: "paper".into(),
            d: 512,
            heads: 8,
            l1: 8,
            l2: 4,
            ctx_sub: 77,
            n_chunks: 4,
            k_subs: 8,
            c: 768,
            vision_blocks_per_stage: 4,
            superpixels: 196,
            schedule: [64, 32, 16],
            canvas: 224,
            superpixel_iters: 10,
            lambda_pos: 0.5,
            vocab_size,
        }
    }

    pub fn by_name(name: &str, vocab_size: usize) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk(vocab_size)),
            "paper" => Some(Self::paper(vocab_size)),
            _ => None,
        }
    }

    pub fn canonical_string(&self) -> String {
        format!(
            "preset={} d={} heads={} l1={} l2={} ctx_sub={} n={} k={} c={} vbps={} s={} schedule={},{},{} canvas={} sp_iters={} lambda={} vocab={}",
            self.preset,
            self.d,
            self.heads,
            self.l1,
            self.l2,
            self.ctx_sub,
            self.n_chunks,
            self.k_subs,
            self.c,
            self.vision_blocks_per_stage,
            self.superpixels,
            self.schedule[0],
            self.schedule[1],
            self.schedule[2],
            self.canvas,
            self.superpixel_iters,
            self.lambda_pos,
            self.vocab_size
        )
    }

    /// Digest stored in checkpoints and verified at load time.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.canonical_string().as_bytes());
        let d = h.finalize();
        let mut out = [0u8; 32];
        out.copy_from_slice(&d);
        out
    }
}
