//! Shared transformer machinery: pre-norm blocks with multi-head
//! self-attention, used by both the text and vision branches.

use rand_chacha::ChaCha8Rng;

use crate::params::{Graph, ParamStore};
use crate::tensor::{Result, Tensor};

pub const MASK_FILL: f64 = -1e30;

#[derive(Clone, Copy)]
pub enum AttnMask<'a> {
    None,
    /// Position i attends to positions <= i.
    Causal,
    /// Keys flagged true are hidden from every query.
    KeyPad(&'a [bool]),
}

pub fn register_affine(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) {
    let std = 1.0 / (d_in as f64).sqrt();
    store.register_normal(&format!("{prefix}.w"), vec![d_in, d_out], std, rng);
    store.register_const(&format!("{prefix}.b"), vec![d_out], 0.0, true);
}

pub fn affine(g: &Graph, prefix: &str, x: &Tensor) -> Result<Tensor> {
    x.matmul(&g.p(&format!("{prefix}.w")))?
        .add(&g.p(&format!("{prefix}.b")))
}

fn register_layernorm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.register_const(&format!("{prefix}.g"), vec![d], 1.0, true);
    store.register_const(&format!("{prefix}.b"), vec![d], 0.0, true);
}

fn layernorm(g: &Graph, prefix: &str, x: &Tensor) -> Result<Tensor> {
    x.layernorm_last()?
        .mul(&g.p(&format!("{prefix}.g")))?
        .add(&g.p(&format!("{prefix}.b")))
}

pub fn register_block(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) {
    register_layernorm(store, &format!("{prefix}.ln1"), d);
    for name in ["q", "k", "v", "o"] {
        register_affine(store, &format!("{prefix}.attn.{name}"), d, d, rng);
    }
    register_layernorm(store, &format!("{prefix}.ln2"), d);
    register_affine(store, &format!("{prefix}.mlp.fc1"), d, 4 * d, rng);
    register_affine(store, &format!("{prefix}.mlp.fc2"), 4 * d, d, rng);
}

fn causal_mask(t: usize) -> Vec<bool> {
    let mut m = vec![false; t * t];
    for i in 0..t {
        for j in i + 1..t {
            m[i * t + j] = true;
        }
    }
    m
}

fn keypad_mask(t: usize, hidden: &[bool]) -> Vec<bool> {
    let mut m = vec![false; t * t];
    for i in 0..t {
        for (j, &h) in hidden.iter().enumerate() {
            m[i * t + j] = h;
        }
    }
    m
}

/// Multi-head scaled-dot attention of `queries` over `keys_values`.
/// Returns the projected output and the head-averaged attention weights
/// (one row per query, summing to 1).
pub fn multihead_attention(
    g: &Graph,
    prefix: &str,
    queries: &Tensor,
    keys_values: &Tensor,
    heads: usize,
    mask: AttnMask,
) -> Result<(Tensor, Tensor)> {
    let d = *queries.shape().last().expect("rank >= 1");
    assert_eq!(d % heads, 0, "head count must divide the model width");
    let dh = d / heads;
    let tq = queries.shape()[0];
    let tk = keys_values.shape()[0];

    let q = affine(g, &format!("{prefix}.q"), queries)?;
    let k = affine(g, &format!("{prefix}.k"), keys_values)?;
    let v = affine(g, &format!("{prefix}.v"), keys_values)?;

    let mask_vec = match mask {
        AttnMask::None => None,
        AttnMask::Causal => Some(causal_mask(tq)),
        AttnMask::KeyPad(hidden) => Some(keypad_mask(tq, hidden)),
    };

    let mut head_outs = Vec::with_capacity(heads);
    let mut head_attns = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * dh, (h + 1) * dh)?;
        let kh = k.slice_cols(h * dh, (h + 1) * dh)?;
        let vh = v.slice_cols(h * dh, (h + 1) * dh)?;
        let mut scores = qh.matmul(&kh.transpose()?)?.scale(1.0 / (dh as f64).sqrt())?;
        if let Some(m) = &mask_vec {
            scores = scores.masked_fill(m, MASK_FILL)?;
        }
        let attn = scores.softmax_last()?;
        head_outs.push(attn.matmul(&vh)?);
        head_attns.push(attn);
    }
    let concat = Tensor::concat_cols(&head_outs)?;
    let out = affine(g, &format!("{prefix}.o"), &concat)?;

    let mut attn_sum = head_attns[0].clone();
    for a in &head_attns[1..] {
        attn_sum = attn_sum.add(a)?;
    }
    let attn_avg = attn_sum.scale(1.0 / heads as f64)?;
    let _ = tk;
    Ok((out, attn_avg))
}

/// One pre-norm transformer block: `x + MHA(LN(x))`, then `x + MLP(LN(x))`.
pub fn block_forward(
    g: &Graph,
    prefix: &str,
    x: &Tensor,
    heads: usize,
    mask: AttnMask,
) -> Result<Tensor> {
    let h = layernorm(g, &format!("{prefix}.ln1"), x)?;
    let (attn_out, _) = multihead_attention(g, &format!("{prefix}.attn"), &h, &h, heads, mask)?;
    let x = x.add(&attn_out)?;

    let h = layernorm(g, &format!("{prefix}.ln2"), &x)?;
    let h = affine(g, &format!("{prefix}.mlp.fc1"), &h)?.gelu()?;
    let h = affine(g, &format!("{prefix}.mlp.fc2"), &h)?;
    x.add(&h)
}
