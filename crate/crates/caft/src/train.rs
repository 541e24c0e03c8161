//! Training loop: schedule, AdamW, gradient clipping, checkpointing, and the
//! ablation variants.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::align::{self, AlignError};
use crate::config::ModelConfig;
use crate::params::{Graph, ParamStore};
use crate::stream::substream;
use crate::synth::AnnotatedSample;
use crate::tensor::{Tensor, TensorError};
use crate::text::{self, TextError};
use crate::vision::{self, VisionError};

const MAGIC: &[u8; 4] = b"CAFT";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("warmup ({warmup}) must be shorter than the total step count ({total})")]
    BadSchedule { warmup: usize, total: usize },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint was written for a different model configuration")]
    ConfigMismatch,
    #[error("training set is empty or smaller than one batch")]
    TooFewSamples,
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Model variants: `caft` is the full model, the rest are ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Caft,
    /// Part loss reads the final coarse tokens instead of the fine stage.
    FlatLoss,
    /// Whole-level loss only.
    NoPart,
    /// No segment grouping; uniform patch tokens throughout.
    PlainVit,
    /// Whole caption encoded directly by the sub-caption transformer.
    FlatText,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Caft => "caft",
            Variant::FlatLoss => "flat-loss",
            Variant::NoPart => "no-part",
            Variant::PlainVit => "plain-vit",
            Variant::FlatText => "flat-text",
        }
    }

    pub fn grouping(self) -> bool {
        self != Variant::PlainVit
    }
}

impl FromStr for Variant {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "caft" => Ok(Variant::Caft),
            "flat-loss" => Ok(Variant::FlatLoss),
            "no-part" => Ok(Variant::NoPart),
            "plain-vit" => Ok(Variant::PlainVit),
            "flat-text" => Ok(Variant::FlatText),
            other => Err(TrainError::UnknownVariant(other.to_string())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    pub seed: u64,
    pub variant: Variant,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            batch: 16,
            epochs: 30,
            lr: 3e-3,
            weight_decay: 0.05,
            warmup: 100,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            clip: 1.0,
            seed: 0,
            variant: Variant::Caft,
        }
    }
}

/// Linear warmup to `base_lr` followed by cosine decay to zero.
pub fn lr_at(step: usize, total: usize, warmup: usize, base_lr: f64) -> Result<f64> {
    if total <= warmup {
        return Err(TrainError::BadSchedule { warmup, total });
    }
    if step < warmup {
        return Ok(base_lr * (step + 1) as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// First and second moment buffers, keyed like the parameter store.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub t: u64,
    pub m: HashMap<String, Vec<f64>>,
    pub v: HashMap<String, Vec<f64>>,
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grads(grads: &mut HashMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm: f64 = grads
        .values()
        .flat_map(|g| g.iter().map(|x| x * x))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// One decoupled-weight-decay Adam update. Parameters without a gradient
/// (unused this step) are left untouched.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &HashMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
    tc: &TrainConfig,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - tc.beta1.powi(t);
    let bc2 = 1.0 - tc.beta2.powi(t);
    for param in store.iter_mut() {
        let Some(grad) = grads.get(&param.name) else {
            continue;
        };
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGrad(param.name.clone()));
        }
        let m = state
            .m
            .entry(param.name.clone())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let v = state
            .v
            .entry(param.name.clone())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let wd = if param.no_decay {
            0.0
        } else {
            tc.weight_decay
        };
        for i in 0..grad.len() {
            m[i] = tc.beta1 * m[i] + (1.0 - tc.beta1) * grad[i];
            v[i] = tc.beta2 * v[i] + (1.0 - tc.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            param.values[i] -= lr * (m_hat / (v_hat.sqrt() + tc.eps) + wd * param.values[i]);
        }
    }
    Ok(())
}

/// Register every parameter group for a model in the canonical order.
pub fn build_store(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = substream(seed, "init");
    text::register_text_params(&mut store, cfg, &mut rng);
    vision::register_vision_params(&mut store, cfg, &mut rng);
    align::register_align_params(&mut store, cfg, &mut rng);
    store
}

/// Per-step loss values, as logged to the metrics CSV.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub part_loss: f64,
    pub whole_loss: f64,
    pub total: f64,
    pub tau_p: f64,
    pub tau_w: f64,
}

/// Forward/backward for one batch; returns the loss values and fills
/// `grads`.
fn train_step(
    store: &ParamStore,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    vocab: &crate::text::Vocabulary,
    batch: &[&AnnotatedSample],
    step_rng: &mut ChaCha8Rng,
    grads_out: &mut HashMap<String, Vec<f64>>,
) -> Result<(f64, f64, f64)> {
    let g = Graph::trainable(store);
    let b = batch.len();

    let mut images = Vec::with_capacity(b);
    for sample in batch {
        images.push(vision::encode_image(
            &g,
            cfg,
            &sample.image,
            tc.variant.grouping(),
        )?);
    }

    let mut sub_rows = Vec::with_capacity(b);
    let mut valid = Vec::with_capacity(b * cfg.k_subs);
    let mut whole_rows = Vec::with_capacity(b);
    for sample in batch {
        let subs = align::assemble_subs(sample, vocab, cfg, step_rng)?;
        let t_sub = text::encode_sub(&g, cfg, &subs.token_ids)?;
        let t_whole = match tc.variant {
            Variant::FlatText => {
                let ids =
                    text::tokenize_chunk(&sample.long_caption.join(" "), vocab, cfg.ctx_sub);
                text::encode_chunk(&g, cfg, &ids)?
            }
            _ => {
                let first_n = t_sub.slice_rows(0, cfg.n_chunks)?;
                let adapted = text::adapt(&g, &first_n)?;
                text::encode_whole(&g, cfg, &adapted, &subs.hierarchy.chunk_mask)?
            }
        };
        whole_rows.push(t_whole.reshape(vec![1, cfg.d])?);
        valid.extend_from_slice(&subs.mask);
        sub_rows.push(t_sub);
    }
    let t_sub_all = Tensor::concat_rows(&sub_rows)?;
    let t_whole_all = Tensor::concat_rows(&whole_rows)?;
    let coarse_rows: Vec<Tensor> = images
        .iter()
        .map(|im| im.v_coarse.reshape(vec![1, cfg.d]))
        .collect::<std::result::Result<_, _>>()?;
    let v_coarse_all = Tensor::concat_rows(&coarse_rows)?;

    let whole = align::whole_loss(&g, &v_coarse_all, &t_whole_all)?;
    let (total, part_val) = match tc.variant {
        Variant::NoPart => (whole.clone(), 0.0),
        Variant::FlatLoss => {
            let tops: Vec<Tensor> = images.iter().map(|im| im.v_top.clone()).collect();
            let part =
                align::part_loss(&g, &images, &t_sub_all, &valid, Some(&tops), cfg.heads)?;
            let pv = part.values()[0];
            (whole.add(&part)?, pv)
        }
        _ => {
            let part = align::part_loss(&g, &images, &t_sub_all, &valid, None, cfg.heads)?;
            let pv = part.values()[0];
            (whole.add(&part)?, pv)
        }
    };
    let whole_val = whole.values()[0];
    let total_val = total.values()[0];
    total.backward()?;
    *grads_out = g.grads();
    Ok((part_val, whole_val, total_val))
}

/// Run the full schedule, writing `metrics.csv` and `checkpoint.bin` under
/// `out_dir`. Resumes from `out_dir/checkpoint.bin` when `resume` is set.
pub fn train(
    samples: &[AnnotatedSample],
    vocab: &crate::text::Vocabulary,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    out_dir: &Path,
    resume: bool,
) -> Result<()> {
    if samples.len() < tc.batch || tc.batch == 0 {
        return Err(TrainError::TooFewSamples);
    }
    let batches_per_epoch = samples.len() / tc.batch;
    let total_steps = batches_per_epoch * tc.epochs;
    // Fail fast on a schedule the lr curve cannot express.
    lr_at(0, total_steps, tc.warmup, tc.lr)?;

    std::fs::create_dir_all(out_dir)?;
    let ckpt_path = out_dir.join("checkpoint.bin");
    let metrics_path = out_dir.join("metrics.csv");

    let mut store = build_store(cfg, tc.seed);
    let mut opt = AdamState::default();
    let mut start_step = 0usize;
    if resume {
        let loaded = checkpoint_load(&ckpt_path, cfg)?;
        store = loaded.store;
        opt = loaded.opt;
        start_step = loaded.step;
    }

    let mut metrics = BufWriter::new(if resume && metrics_path.exists() {
        std::fs::OpenOptions::new().append(true).open(&metrics_path)?
    } else {
        File::create(&metrics_path)?
    });
    if start_step == 0 {
        writeln!(metrics, "step,lr,part_loss,whole_loss,total,tau_p,tau_w")?;
    }

    let mut grads = HashMap::new();
    for step in start_step..total_steps {
        let epoch = step / batches_per_epoch;
        let batch_idx = step % batches_per_epoch;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        shuffle(&mut order, &mut substream(tc.seed, &format!("epoch/{epoch}")));
        let batch: Vec<&AnnotatedSample> = order
            [batch_idx * tc.batch..(batch_idx + 1) * tc.batch]
            .iter()
            .map(|&i| &samples[i])
            .collect();

        let mut step_rng = substream(tc.seed, &format!("step/{step}"));
        let (part_v, whole_v, total_v) =
            train_step(&store, cfg, tc, vocab, &batch, &mut step_rng, &mut grads)?;
        clip_grads(&mut grads, tc.clip);
        let lr = lr_at(step, total_steps, tc.warmup, tc.lr)?;
        adamw_step(&mut store, &grads, &mut opt, lr, tc)?;

        let rec = StepRecord {
            step,
            lr,
            part_loss: part_v,
            whole_loss: whole_v,
            total: total_v,
            tau_p: store.get("align.part.log_scale").values[0].exp(),
            tau_w: store.get("align.whole.log_scale").values[0].exp(),
        };
        writeln!(
            metrics,
            "{},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10}",
            rec.step, rec.lr, rec.part_loss, rec.whole_loss, rec.total, rec.tau_p, rec.tau_w
        )?;
        metrics.flush()?;
        if (step + 1) % batches_per_epoch == 0 || step + 1 == total_steps {
            checkpoint_save(&ckpt_path, cfg, &store, &opt, step + 1, tc.seed, tc.variant)?;
        }
    }
    Ok(())
}

/// Fisher-Yates using the crate's deterministic streams.
pub fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

// ---------------------------------------------------------------------------
// Checkpoint serialization.

pub struct Checkpoint {
    pub store: ParamStore,
    pub opt: AdamState,
    pub step: usize,
    pub seed: u64,
    pub variant: Variant,
}

fn write_vec(w: &mut impl Write, v: &[f64]) -> std::io::Result<()> {
    w.write_all(&(v.len() as u64).to_le_bytes())?;
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_vec(r: &mut impl Read) -> Result<Vec<f64>> {
    let n = read_u64(r)? as usize;
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| TrainError::BadCheckpoint("non-utf8 name".into()))
}

pub fn checkpoint_save(
    path: &Path,
    cfg: &ModelConfig,
    store: &ParamStore,
    opt: &AdamState,
    step: usize,
    seed: u64,
    variant: Variant,
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&cfg.digest())?;
        w.write_all(&(step as u64).to_le_bytes())?;
        w.write_all(&seed.to_le_bytes())?;
        let vname = variant.name().as_bytes();
        w.write_all(&(vname.len() as u32).to_le_bytes())?;
        w.write_all(vname)?;
        w.write_all(&(store.len() as u64).to_le_bytes())?;
        for p in store.iter() {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&[u8::from(p.no_decay)])?;
            w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
            for &e in &p.shape {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            write_vec(&mut w, &p.values)?;
        }
        w.write_all(&opt.t.to_le_bytes())?;
        for p in store.iter() {
            let zero = vec![0.0; p.values.len()];
            write_vec(&mut w, opt.m.get(&p.name).unwrap_or(&zero))?;
            write_vec(&mut w, opt.v.get(&p.name).unwrap_or(&zero))?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn checkpoint_load(path: &Path, cfg: &ModelConfig) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TrainError::BadCheckpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(TrainError::BadCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let mut digest = [0u8; 32];
    r.read_exact(&mut digest)?;
    if digest != cfg.digest() {
        return Err(TrainError::ConfigMismatch);
    }
    let step = read_u64(&mut r)? as usize;
    let seed = read_u64(&mut r)?;
    let variant: Variant = read_string(&mut r)?.parse()?;
    let n_params = read_u64(&mut r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n_params {
        let name = read_string(&mut r)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let values = read_vec(&mut r)?;
        if values.len() != shape.iter().product::<usize>() {
            return Err(TrainError::BadCheckpoint(format!(
                "size mismatch for `{name}`"
            )));
        }
        store.register(&name, shape, values, flag[0] != 0);
    }
    let mut opt = AdamState {
        t: read_u64(&mut r)?,
        ..AdamState::default()
    };
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for name in names {
        opt.m.insert(name.clone(), read_vec(&mut r)?);
        opt.v.insert(name, read_vec(&mut r)?);
    }
    Ok(Checkpoint {
        store,
        opt,
        step,
        seed,
        variant,
    })
}

// The step-level RNG is derived statelessly from (seed, step), so a resumed
// run replays the exact same sampling decisions without serializing RNG
// internals; the stored seed is enough.
