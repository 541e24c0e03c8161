//! Vision hierarchy: superpixel tokenization, fine-to-coarse token
//! grouping interleaved with transformer blocks, and the fine/coarse
//! feature taps used by the alignment losses.

#![allow(clippy::needless_range_loop)]

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::ModelConfig;
use crate::nn::{self, AttnMask};
use crate::params::{Graph, ParamStore};
use crate::synth::ImageGrid;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("superpixel count {s} exceeds {max} (pixels / 4)")]
    TooManySuperpixels { s: usize, max: usize },
    #[error("grouping target {target} must be smaller than token count {tokens}")]
    BadGroupTarget { target: usize, tokens: usize },
    #[error("schedule must be strictly decreasing and start below the superpixel count")]
    BadSchedule,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, VisionError>;

/// Hard pixel-to-superpixel assignment; superpixels are 4-connected and
/// every id owns at least one pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperpixelMap {
    pub height: usize,
    pub width: usize,
    pub assignment: Vec<usize>,
    pub s: usize,
}

/// Per-stage outputs of the fine-to-coarse encoder. Soft assignment
/// matrices are retained (as plain values) for pixel-space traceability.
pub struct SegmentHierarchy {
    pub map: SuperpixelMap,
    /// Row-stochastic matrices, finer tokens x coarser tokens, per stage.
    pub stage_assignments: Vec<Vec<f64>>,
    pub stage_sizes: Vec<usize>,
    /// Second-stage segment features projected to D.
    pub v_fine: Tensor,
    /// Final-layer CLS projected to D.
    pub v_coarse: Tensor,
    /// Final-stage tokens through the fine projection head, used by the
    /// flat-loss ablation.
    pub v_top: Tensor,
}

impl SegmentHierarchy {
    /// Pixel -> fine-stage soft assignment, rows summing to 1.
    pub fn pixel_to_fine(&self) -> Vec<f64> {
        let hw = self.map.height * self.map.width;
        let k = self.stage_sizes[0];
        let a1 = &self.stage_assignments[0];
        let mut out = vec![0.0; hw * k];
        for (p, &sp) in self.map.assignment.iter().enumerate() {
            out[p * k..(p + 1) * k].copy_from_slice(&a1[sp * k..(sp + 1) * k]);
        }
        out
    }
}

fn pixel_features(image: &ImageGrid, lambda: f64) -> Vec<[f64; 5]> {
    let (h, w) = (image.height, image.width);
    let mut feats = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let [r, g, b] = image.pixel(y, x);
            feats.push([
                r,
                g,
                b,
                lambda * (x as f64 + 0.5) / w as f64,
                lambda * (y as f64 + 0.5) / h as f64,
            ]);
        }
    }
    feats
}

fn dist2(a: &[f64; 5], b: &[f64; 5]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Seeded k-means over (r, g, b, lambda*x, lambda*y) starting from a
/// uniform grid, followed by a connectivity repair pass.
pub fn superpixelize(image: &ImageGrid, s: usize, iterations: usize, lambda: f64) -> Result<SuperpixelMap> {
    let (h, w) = (image.height, image.width);
    let max = h * w / 4;
    if s > max || s == 0 {
        return Err(VisionError::TooManySuperpixels { s, max });
    }
    let feats = pixel_features(image, lambda);

    // Grid seeding: rows x cols covering s seeds.
    let rows = (s as f64).sqrt().round().max(1.0) as usize;
    let cols = s.div_ceil(rows);
    let mut centroids: Vec<[f64; 5]> = (0..s)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            let y = (((r as f64 + 0.5) / rows as f64) * h as f64) as usize;
            let x = (((c as f64 + 0.5) / cols as f64) * w as f64) as usize;
            feats[y.min(h - 1) * w + x.min(w - 1)]
        })
        .collect();

    let mut assignment = vec![0usize; h * w];
    for _ in 0..iterations {
        for (p, f) in feats.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, c) in centroids.iter().enumerate() {
                let d = dist2(f, c);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            assignment[p] = best;
        }
        let mut sums = vec![[0.0; 5]; s];
        let mut counts = vec![0usize; s];
        for (p, f) in feats.iter().enumerate() {
            let k = assignment[p];
            counts[k] += 1;
            for j in 0..5 {
                sums[k][j] += f[j];
            }
        }
        for k in 0..s {
            if counts[k] > 0 {
                for j in 0..5 {
                    centroids[k][j] = sums[k][j] / counts[k] as f64;
                }
            }
            // Empty clusters are reseeded to the pixel worst served by its
            // current centroid.
            if counts[k] == 0 {
                let p = (0..h * w)
                    .max_by(|&a, &b| {
                        dist2(&feats[a], &centroids[assignment[a]])
                            .partial_cmp(&dist2(&feats[b], &centroids[assignment[b]]))
                            .unwrap()
                    })
                    .unwrap();
                centroids[k] = feats[p];
                assignment[p] = k;
            }
        }
    }

    repair_connectivity(&mut assignment, h, w, s, &feats, &centroids);
    Ok(SuperpixelMap {
        height: h,
        width: w,
        assignment,
        s,
    })
}

/// Keeps each label's largest 4-connected component and reassigns orphan
/// components to their dominant neighbor label; then guarantees every
/// label owns at least one pixel.
fn repair_connectivity(
    assignment: &mut [usize],
    h: usize,
    w: usize,
    s: usize,
    feats: &[[f64; 5]],
    centroids: &[[f64; 5]],
) {
    let neighbors = |p: usize| {
        let (y, x) = (p / w, p % w);
        let mut out = Vec::with_capacity(4);
        if y > 0 {
            out.push(p - w);
        }
        if y + 1 < h {
            out.push(p + w);
        }
        if x > 0 {
            out.push(p - 1);
        }
        if x + 1 < w {
            out.push(p + 1);
        }
        out
    };

    loop {
        // Component labeling per superpixel id.
        let mut comp = vec![usize::MAX; h * w];
        let mut comp_sizes = Vec::new();
        let mut comp_label = Vec::new();
        for start in 0..h * w {
            if comp[start] != usize::MAX {
                continue;
            }
            let cid = comp_sizes.len();
            let label = assignment[start];
            let mut queue = vec![start];
            comp[start] = cid;
            let mut size = 0;
            while let Some(p) = queue.pop() {
                size += 1;
                for q in neighbors(p) {
                    if comp[q] == usize::MAX && assignment[q] == label {
                        comp[q] = cid;
                        queue.push(q);
                    }
                }
            }
            comp_sizes.push(size);
            comp_label.push(label);
        }
        // Largest component per label is the core.
        let mut core = vec![usize::MAX; s];
        for cid in 0..comp_sizes.len() {
            let l = comp_label[cid];
            if core[l] == usize::MAX || comp_sizes[cid] > comp_sizes[core[l]] {
                core[l] = cid;
            }
        }
        // Orphan pixels take the dominant neighboring core label.
        let mut changed = false;
        for p in 0..h * w {
            if comp[p] == core[assignment[p]] {
                continue;
            }
            let mut counts = std::collections::HashMap::new();
            for q in neighbors(p) {
                if comp[q] == core[assignment[q]] && assignment[q] != assignment[p] {
                    *counts.entry(assignment[q]).or_insert(0usize) += 1;
                }
            }
            if let Some((&label, _)) = counts.iter().max_by_key(|(l, c)| (**c, usize::MAX - **l)) {
                assignment[p] = label;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    // Any label that lost all pixels steals its best-matching pixel from a
    // donor whose region stays connected and nonempty.
    let mut counts = vec![0usize; s];
    for &a in assignment.iter() {
        counts[a] += 1;
    }
    for label in 0..s {
        if counts[label] > 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..h * w).collect();
        order.sort_by(|&a, &b| {
            dist2(&feats[a], &centroids[label])
                .partial_cmp(&dist2(&feats[b], &centroids[label]))
                .unwrap()
        });
        for p in order {
            let donor = assignment[p];
            if counts[donor] < 2 {
                continue;
            }
            assignment[p] = label;
            if region_connected(assignment, h, w, donor) {
                counts[donor] -= 1;
                counts[label] += 1;
                break;
            }
            assignment[p] = donor;
        }
    }
}

fn region_connected(assignment: &[usize], h: usize, w: usize, label: usize) -> bool {
    let start = match assignment.iter().position(|&a| a == label) {
        Some(p) => p,
        None => return false,
    };
    let total = assignment.iter().filter(|&&a| a == label).count();
    let mut seen = vec![false; h * w];
    let mut queue = vec![start];
    seen[start] = true;
    let mut visited = 0;
    while let Some(p) = queue.pop() {
        visited += 1;
        let (y, x) = (p / w, p % w);
        for q in [
            (y > 0).then(|| p - w),
            (y + 1 < h).then(|| p + w),
            (x > 0).then(|| p - 1),
            (x + 1 < w).then(|| p + 1),
        ]
        .into_iter()
        .flatten()
        {
            if !seen[q] && assignment[q] == label {
                seen[q] = true;
                queue.push(q);
            }
        }
    }
    visited == total
}

/// Square patch tiling for the plain-ViT ablation: pixel -> patch id on a
/// uniform grid with `s` cells.
pub fn uniform_patch_map(h: usize, w: usize, s: usize) -> SuperpixelMap {
    let rows = (s as f64).sqrt().round().max(1.0) as usize;
    let cols = s.div_ceil(rows);
    let mut assignment = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            let r = (y * rows / h).min(rows - 1);
            let c = (x * cols / w).min(cols - 1);
            assignment[y * w + x] = (r * cols + c).min(s - 1);
        }
    }
    SuperpixelMap {
        height: h,
        width: w,
        assignment,
        s,
    }
}

pub fn register_vision_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let c = cfg.c;
    nn::register_affine(store, "vision.pix_proj", 3, c, rng);
    nn::register_affine(store, "vision.pos_proj", 2, c, rng);
    store.register_normal("vision.cls", vec![c], 0.02, rng);
    store.mark_no_decay("vision.cls");
    for stage in 0..3 {
        for b in 0..cfg.vision_blocks_per_stage {
            nn::register_block(store, &format!("vision.stage{stage}.block{b}"), c, rng);
        }
        store.register_const(
            &format!("vision.stage{stage}.group.log_temp"),
            vec![1],
            (0.07f64).ln(),
            true,
        );
        nn::register_block(store, &format!("vision.stage{stage}.group.mix"), c, rng);
    }
    store.register_const("vision.fine.lnf.g", vec![c], 1.0, true);
    store.register_const("vision.fine.lnf.b", vec![c], 0.0, true);
    nn::register_affine(store, "vision.fine.proj", c, cfg.d, rng);
    store.register_const("vision.coarse.lnf.g", vec![c], 1.0, true);
    store.register_const("vision.coarse.lnf.b", vec![c], 0.0, true);
    nn::register_affine(store, "vision.coarse.proj", c, cfg.d, rng);
}

/// Per-superpixel mean of projected pixel colors plus a positional
/// embedding from the centroid. Mean-then-project equals
/// project-then-mean because the projection is affine.
pub fn superpixel_tokens(g: &Graph, image: &ImageGrid, map: &SuperpixelMap) -> Result<Tensor> {
    let s = map.s;
    let mut color_sums = vec![0.0; s * 3];
    let mut pos_sums = vec![0.0; s * 2];
    let mut counts = vec![0.0f64; s];
    for (p, &k) in map.assignment.iter().enumerate() {
        let (y, x) = (p / map.width, p % map.width);
        let [r, gr, b] = image.pixel(y, x);
        color_sums[k * 3] += r;
        color_sums[k * 3 + 1] += gr;
        color_sums[k * 3 + 2] += b;
        pos_sums[k * 2] += (x as f64 + 0.5) / map.width as f64;
        pos_sums[k * 2 + 1] += (y as f64 + 0.5) / map.height as f64;
        counts[k] += 1.0;
    }
    for k in 0..s {
        for j in 0..3 {
            color_sums[k * 3 + j] /= counts[k];
        }
        for j in 0..2 {
            pos_sums[k * 2 + j] /= counts[k];
        }
    }
    let colors = Tensor::from_vec(vec![s, 3], color_sums)?;
    let centroids = Tensor::from_vec(vec![s, 2], pos_sums)?;
    Ok(nn::affine(g, "vision.pix_proj", &colors)?
        .add(&nn::affine(g, "vision.pos_proj", &centroids)?)?)
}

/// Deterministic farthest-point sampling over token features, starting
/// from token 0.
fn farthest_point_sample(tokens: &Tensor, k: usize) -> Vec<usize> {
    let [m, c] = [tokens.shape()[0], tokens.shape()[1]];
    let row = |i: usize| &tokens.values()[i * c..(i + 1) * c];
    let mut chosen = vec![0usize];
    let mut min_d: Vec<f64> = (0..m)
        .map(|i| {
            row(i)
                .iter()
                .zip(row(0))
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        })
        .collect();
    while chosen.len() < k {
        let next = (0..m)
            .max_by(|&a, &b| min_d[a].partial_cmp(&min_d[b]).unwrap())
            .unwrap();
        chosen.push(next);
        for i in 0..m {
            let d: f64 = row(i)
                .iter()
                .zip(row(next))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            min_d[i] = min_d[i].min(d);
        }
    }
    chosen
}

/// Soft cosine-similarity grouping to farthest-point-sampled centroids.
/// Returns the coarse tokens, the row-stochastic assignment, and the
/// carried CLS token.
pub fn group_stage(
    g: &Graph,
    prefix: &str,
    tokens: &Tensor,
    cls: &Tensor,
    target: usize,
    heads: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let m = tokens.shape()[0];
    if target >= m {
        return Err(VisionError::BadGroupTarget { target, tokens: m });
    }
    let picks = farthest_point_sample(tokens, target);
    let centroid_rows: Vec<Tensor> = picks
        .iter()
        .map(|&i| tokens.slice_rows(i, i + 1))
        .collect::<std::result::Result<_, _>>()?;
    let centroids = Tensor::concat_rows(&centroid_rows)?;

    let cos = tokens
        .l2_normalize_last()?
        .matmul(&centroids.l2_normalize_last()?.transpose()?)?;
    let temp = g.p(&format!("{prefix}.log_temp")).exp()?;
    let assign = cos.div(&temp)?.softmax_last()?;

    let col_mass = assign.sum_axis(0)?;
    let pooled = assign.div(&col_mass)?.transpose()?.matmul(tokens)?;

    let mixed = nn::block_forward(
        g,
        &format!("{prefix}.mix"),
        &Tensor::concat_rows(&[pooled, cls.clone()])?,
        heads,
        AttnMask::None,
    )?;
    let new_tokens = mixed.slice_rows(0, target)?;
    let new_cls = mixed.slice_rows(target, target + 1)?;
    Ok((new_tokens, assign, new_cls))
}

/// Full fine-to-coarse encoding. When `grouping` is false (the plain-ViT
/// ablation) tokens stay at the superpixel resolution through every block
/// and `v_fine` is a fixed leading slice of the top-layer tokens.
pub fn encode_image(
    g: &Graph,
    cfg: &ModelConfig,
    image: &ImageGrid,
    grouping: bool,
) -> Result<SegmentHierarchy> {
    let sched = cfg.schedule;
    if !(sched[0] > sched[1] && sched[1] > sched[2] && sched[0] < cfg.superpixels) {
        return Err(VisionError::BadSchedule);
    }
    let map = if grouping {
        superpixelize(image, cfg.superpixels, cfg.superpixel_iters, cfg.lambda_pos)?
    } else {
        uniform_patch_map(image.height, image.width, cfg.superpixels)
    };
    let mut tokens = superpixel_tokens(g, image, &map)?;
    let mut cls = g.p("vision.cls").reshape(vec![1, cfg.c])?;

    let mut stage_assignments = Vec::new();
    let mut stage_sizes = Vec::new();
    let mut v_fine = None;

    for stage in 0..3 {
        let m = tokens.shape()[0];
        let mut x = Tensor::concat_rows(&[tokens.clone(), cls.clone()])?;
        for b in 0..cfg.vision_blocks_per_stage {
            x = nn::block_forward(
                g,
                &format!("vision.stage{stage}.block{b}"),
                &x,
                cfg.heads,
                AttnMask::None,
            )?;
        }
        tokens = x.slice_rows(0, m)?;
        cls = x.slice_rows(m, m + 1)?;

        if grouping {
            let (t, a, c) = group_stage(
                g,
                &format!("vision.stage{stage}.group"),
                &tokens,
                &cls,
                sched[stage],
                cfg.heads,
            )?;
            stage_assignments.push(a.values().to_vec());
            stage_sizes.push(sched[stage]);
            tokens = t;
            cls = c;
        }

        if stage == 0 {
            let fine_src = if grouping {
                tokens.clone()
            } else {
                tokens.slice_rows(0, sched[0])?
            };
            let normed = fine_src
                .layernorm_last()?
                .mul(&g.p("vision.fine.lnf.g"))?
                .add(&g.p("vision.fine.lnf.b"))?;
            v_fine = Some(nn::affine(g, "vision.fine.proj", &normed)?);
        }
    }

    if !grouping {
        // Identity transport: token i owns superpixel i's pixels.
        let k = sched[0];
        let mut a1 = vec![0.0; cfg.superpixels * k];
        for i in 0..cfg.superpixels.min(k) {
            a1[i * k + i] = 1.0;
        }
        stage_assignments.push(a1);
        stage_sizes.push(k);
    }

    let normed = cls
        .layernorm_last()?
        .mul(&g.p("vision.coarse.lnf.g"))?
        .add(&g.p("vision.coarse.lnf.b"))?;
    let v_coarse = nn::affine(g, "vision.coarse.proj", &normed)?.reshape(vec![cfg.d])?;
    let top_normed = tokens
        .layernorm_last()?
        .mul(&g.p("vision.fine.lnf.g"))?
        .add(&g.p("vision.fine.lnf.b"))?;
    let v_top = nn::affine(g, "vision.fine.proj", &top_normed)?;

    Ok(SegmentHierarchy {
        map,
        stage_assignments,
        stage_sizes,
        v_fine: v_fine.expect("stage 0 always taps v_fine"),
        v_coarse,
        v_top,
    })
}
