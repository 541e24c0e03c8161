//! Forward operations and their backward closures.
//!
//! Elementwise binaries support one broadcast form only: the right operand
//! may match a trailing suffix of the left operand's shape (leading-batch
//! expansion) or be a scalar. Everything else is a shape error.

#![allow(clippy::needless_range_loop)]

use super::{Result, Tensor, TensorError};

/// Dense row-major matrix product with optional logical transposes,
/// backed by a tuned dgemm kernel.
fn mm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn broadcast_kind(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<usize> {
    // Returns the repeat count of rhs along leading dims (1 when shapes match).
    let ln: usize = lhs.iter().product();
    let rn: usize = rhs.iter().product();
    if rn == 1 {
        return Ok(ln);
    }
    if lhs.len() >= rhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
        return Ok(ln / rn);
    }
    Err(TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
    dfda: impl Fn(f64, f64) -> f64 + 'static,
    dfdb: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Tensor> {
    let reps = broadcast_kind(op, a.shape(), b.shape())?;
    let bn = b.numel();
    let values: Vec<f64> = a
        .values()
        .iter()
        .enumerate()
        .map(|(i, &av)| f(av, b.values()[i % bn]))
        .collect();
    let (ac, bc) = (a.clone(), b.clone());
    let shape = a.shape().to_vec();
    Tensor::from_op(
        op,
        shape,
        values,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            if ac.requires_grad() {
                let da: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * dfda(ac.values()[i], bc.values()[i % bn]))
                    .collect();
                ac.accumulate_grad(&da);
            }
            if bc.requires_grad() {
                let mut db = vec![0.0; bn];
                for (i, &gi) in g.iter().enumerate() {
                    db[i % bn] += gi * dfdb(ac.values()[i], bc.values()[i % bn]);
                }
                bc.accumulate_grad(&db);
            }
            let _ = reps;
        }),
    )
}

fn unary(
    op: &'static str,
    x: &Tensor,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static, // (x, y) -> dy/dx
) -> Result<Tensor> {
    let values: Vec<f64> = x.values().iter().map(|&v| f(v)).collect();
    let xc = x.clone();
    let yvals = values.clone();
    Tensor::from_op(
        op,
        x.shape().to_vec(),
        values,
        vec![x.clone()],
        Box::new(move |g| {
            let dx: Vec<f64> = g
                .iter()
                .enumerate()
                .map(|(i, &gi)| gi * df(xc.values()[i], yvals[i]))
                .collect();
            xc.accumulate_grad(&dx);
        }),
    )
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        binary("add", self, rhs, |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        binary("sub", self, rhs, |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        binary("mul", self, rhs, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(
            "div",
            self,
            rhs,
            |a, b| a / b,
            |_, b| 1.0 / b,
            |a, b| -a / (b * b),
        )
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        unary("scale", self, |v| c * v, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        unary("add-scalar", self, |v| v + c, |_, _| 1.0)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        unary("sigmoid", self, sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    pub fn exp(&self) -> Result<Tensor> {
        unary("exp", self, |v| v.exp(), |_, y| y)
    }

    pub fn log(&self) -> Result<Tensor> {
        unary("log", self, |v| v.ln(), |x, _| 1.0 / x)
    }

    /// Fused log-sigmoid: `logsigma(x) = -softplus(-x)`, stable at large |x|.
    pub fn log_sigmoid(&self) -> Result<Tensor> {
        unary(
            "log-sigmoid",
            self,
            |v| -softplus_scalar(-v),
            |x, _| sigmoid_scalar(-x),
        )
    }

    pub fn gelu(&self) -> Result<Tensor> {
        unary(
            "gelu",
            self,
            |x| {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            },
            |x, _| {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            },
        )
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape,
                reason: format!("source has {} elements", self.numel()),
            });
        }
        let xc = self.clone();
        Tensor::from_op(
            "reshape",
            shape,
            self.values().to_vec(),
            vec![self.clone()],
            Box::new(move |g| xc.accumulate_grad(g)),
        )
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let [r, c] = two_d("transpose", self.shape())?;
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                values[j * r + i] = self.values()[i * c + j];
            }
        }
        let xc = self.clone();
        Tensor::from_op(
            "transpose",
            vec![c, r],
            values,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; r * c];
                for j in 0..c {
                    for i in 0..r {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                xc.accumulate_grad(&dx);
            }),
        )
    }

    /// 2-D (and leading-batch 3-D) matrix product.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        match (self.shape(), rhs.shape()) {
            ([m, k], [k2, n]) if k == k2 => {
                let (m, k, n) = (*m, *k, *n);
                let values = mm(m, k, n, self.values(), false, rhs.values(), false);
                let (ac, bc) = (self.clone(), rhs.clone());
                Tensor::from_op(
                    "matmul",
                    vec![m, n],
                    values,
                    vec![self.clone(), rhs.clone()],
                    Box::new(move |g| {
                        if ac.requires_grad() {
                            let da = mm(m, n, k, g, false, bc.values(), true);
                            ac.accumulate_grad(&da);
                        }
                        if bc.requires_grad() {
                            let db = mm(k, m, n, ac.values(), true, g, false);
                            bc.accumulate_grad(&db);
                        }
                    }),
                )
            }
            ([b, m, k], [b2, k2, n]) if b == b2 && k == k2 => {
                let (b, m, k, n) = (*b, *m, *k, *n);
                let mut values = vec![0.0; b * m * n];
                for i in 0..b {
                    let c = mm(
                        m,
                        k,
                        n,
                        &self.values()[i * m * k..(i + 1) * m * k],
                        false,
                        &rhs.values()[i * k * n..(i + 1) * k * n],
                        false,
                    );
                    values[i * m * n..(i + 1) * m * n].copy_from_slice(&c);
                }
                let (ac, bc) = (self.clone(), rhs.clone());
                Tensor::from_op(
                    "matmul",
                    vec![b, m, n],
                    values,
                    vec![self.clone(), rhs.clone()],
                    Box::new(move |g| {
                        for i in 0..b {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            if ac.requires_grad() {
                                let da = mm(
                                    m,
                                    n,
                                    k,
                                    gi,
                                    false,
                                    &bc.values()[i * k * n..(i + 1) * k * n],
                                    true,
                                );
                                let mut full = vec![0.0; b * m * k];
                                full[i * m * k..(i + 1) * m * k].copy_from_slice(&da);
                                ac.accumulate_grad(&full);
                            }
                            if bc.requires_grad() {
                                let db = mm(
                                    k,
                                    m,
                                    n,
                                    &ac.values()[i * m * k..(i + 1) * m * k],
                                    true,
                                    gi,
                                    false,
                                );
                                let mut full = vec![0.0; b * k * n];
                                full[i * k * n..(i + 1) * k * n].copy_from_slice(&db);
                                bc.accumulate_grad(&full);
                            }
                        }
                    }),
                )
            }
            (l, r) => Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: l.to_vec(),
                rhs: r.to_vec(),
            }),
        }
    }

    /// Softmax over the last axis with max-subtraction.
    pub fn softmax_last(&self) -> Result<Tensor> {
        let cols = last_axis("softmax-last-axis", self.shape())?;
        let mut values = self.values().to_vec();
        for row in values.chunks_mut(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let xc = self.clone();
        let y = values.clone();
        Tensor::from_op(
            "softmax-last-axis",
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / cols {
                    let o = r * cols;
                    let dot: f64 = (0..cols).map(|j| g[o + j] * y[o + j]).sum();
                    for j in 0..cols {
                        dx[o + j] = y[o + j] * (g[o + j] - dot);
                    }
                }
                xc.accumulate_grad(&dx);
            }),
        )
    }

    /// Normalizes the last axis to zero mean and unit variance (eps 1e-5
    /// inside the square root); affine parameters are the caller's business.
    pub fn layernorm_last(&self) -> Result<Tensor> {
        const EPS: f64 = 1e-5;
        let cols = last_axis("layernorm", self.shape())?;
        let rows = self.numel() / cols;
        let mut values = vec![0.0; self.numel()];
        let mut inv_sigma = vec![0.0; rows];
        for r in 0..rows {
            let x = &self.values()[r * cols..(r + 1) * cols];
            let mu = x.iter().sum::<f64>() / cols as f64;
            let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            inv_sigma[r] = inv;
            for j in 0..cols {
                values[r * cols + j] = (x[j] - mu) * inv;
            }
        }
        let xc = self.clone();
        let y = values.clone();
        Tensor::from_op(
            "layernorm",
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / cols {
                    let o = r * cols;
                    let gm: f64 = g[o..o + cols].iter().sum::<f64>() / cols as f64;
                    let gym: f64 =
                        (0..cols).map(|j| g[o + j] * y[o + j]).sum::<f64>() / cols as f64;
                    for j in 0..cols {
                        dx[o + j] = inv_sigma[r] * (g[o + j] - gm - y[o + j] * gym);
                    }
                }
                xc.accumulate_grad(&dx);
            }),
        )
    }

    /// Rows scaled to unit L2 norm (norm floored at 1e-12).
    pub fn l2_normalize_last(&self) -> Result<Tensor> {
        let cols = last_axis("l2-normalize-last-axis", self.shape())?;
        let rows = self.numel() / cols;
        let mut values = vec![0.0; self.numel()];
        let mut norms = vec![0.0; rows];
        for r in 0..rows {
            let x = &self.values()[r * cols..(r + 1) * cols];
            let n = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms[r] = n;
            for j in 0..cols {
                values[r * cols + j] = x[j] / n;
            }
        }
        let xc = self.clone();
        let y = values.clone();
        Tensor::from_op(
            "l2-normalize-last-axis",
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / cols {
                    let o = r * cols;
                    let dot: f64 = (0..cols).map(|j| g[o + j] * y[o + j]).sum();
                    for j in 0..cols {
                        dx[o + j] = (g[o + j] - y[o + j] * dot) / norms[r];
                    }
                }
                xc.accumulate_grad(&dx);
            }),
        )
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let xc = self.clone();
        let n = self.numel();
        Tensor::from_op(
            "sum-axis",
            vec![1],
            vec![self.values().iter().sum()],
            vec![self.clone()],
            Box::new(move |g| xc.accumulate_grad(&vec![g[0]; n])),
        )
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        self.sum_all()?.scale(1.0 / self.numel() as f64)
    }

    /// Sum of a 2-D tensor over the given axis (0 → per-column, 1 → per-row).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let [r, c] = two_d("sum-axis", self.shape())?;
        let out_len = if axis == 0 { c } else { r };
        let mut values = vec![0.0; out_len];
        for i in 0..r {
            for j in 0..c {
                let o = if axis == 0 { j } else { i };
                values[o] += self.values()[i * c + j];
            }
        }
        let xc = self.clone();
        Tensor::from_op(
            "sum-axis",
            vec![out_len],
            values,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[if axis == 0 { j } else { i }];
                    }
                }
                xc.accumulate_grad(&dx);
            }),
        )
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let [r, c] = two_d("mean-axis", self.shape())?;
        let denom = if axis == 0 { r } else { c } as f64;
        self.sum_axis(axis)?.scale(1.0 / denom)
    }

    /// Rows of `self` (a `V x D` table) gathered by token id.
    pub fn embedding_lookup(&self, ids: &[usize]) -> Result<Tensor> {
        let [v, d] = two_d("embedding-lookup", self.shape())?;
        for &id in ids {
            if id >= v {
                return Err(TensorError::TokenOutOfRange { id, vocab: v });
            }
        }
        let mut values = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            values.extend_from_slice(&self.values()[id * d..(id + 1) * d]);
        }
        let xc = self.clone();
        let ids = ids.to_vec();
        Tensor::from_op(
            "embedding-lookup",
            vec![ids.len(), d],
            values,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; v * d];
                for (t, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dx[id * d + j] += g[t * d + j];
                    }
                }
                xc.accumulate_grad(&dx);
            }),
        )
    }

    /// Replaces masked positions with `fill`; gradient flows only through
    /// unmasked positions.
    pub fn masked_fill(&self, mask: &[bool], fill: f64) -> Result<Tensor> {
        if mask.len() != self.numel() {
            return Err(TensorError::InvalidShape {
                op: "masked-fill",
                shape: self.shape().to_vec(),
                reason: format!("mask has {} entries", mask.len()),
            });
        }
        let values: Vec<f64> = self
            .values()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let xc = self.clone();
        let mask = mask.to_vec();
        Tensor::from_op(
            "masked-fill",
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Box::new(move |g| {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&mask)
                    .map(|(&gi, &m)| if m { 0.0 } else { gi })
                    .collect();
                xc.accumulate_grad(&dx);
            }),
        )
    }

    /// Concatenation of 2-D tensors along rows (axis 0); 1-D inputs are
    /// treated as single rows.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: vec![],
                reason: "no inputs".into(),
            });
        }
        let cols = match parts[0].shape() {
            [c] => *c,
            [_, c] => *c,
            s => {
                return Err(TensorError::InvalidShape {
                    op: "concat",
                    shape: s.to_vec(),
                    reason: "expected rank 1 or 2".into(),
                })
            }
        };
        let mut values = Vec::new();
        let mut row_counts = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = match p.shape() {
                [c] => (1, *c),
                [r, c] => (*r, *c),
                s => {
                    return Err(TensorError::InvalidShape {
                        op: "concat",
                        shape: s.to_vec(),
                        reason: "expected rank 1 or 2".into(),
                    })
                }
            };
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            row_counts.push(r);
            values.extend_from_slice(p.values());
        }
        let total_rows: usize = row_counts.iter().sum();
        let owned: Vec<Tensor> = parts.to_vec();
        let rc = row_counts.clone();
        Tensor::from_op(
            "concat",
            vec![total_rows, cols],
            values,
            owned.clone(),
            Box::new(move |g| {
                let mut off = 0;
                for (p, &r) in owned.iter().zip(&rc) {
                    p.accumulate_grad(&g[off..off + r * cols]);
                    off += r * cols;
                }
            }),
        )
    }

    /// Concatenation of 2-D tensors along columns (axis 1).
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: vec![],
                reason: "no inputs".into(),
            });
        }
        let [rows, _] = two_d("concat", parts[0].shape())?;
        let mut col_counts = Vec::with_capacity(parts.len());
        for p in parts {
            let [r, c] = two_d("concat", p.shape())?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            col_counts.push(c);
        }
        let total_cols: usize = col_counts.iter().sum();
        let mut values = vec![0.0; rows * total_cols];
        let mut off = 0;
        for (p, &c) in parts.iter().zip(&col_counts) {
            for i in 0..rows {
                values[i * total_cols + off..i * total_cols + off + c]
                    .copy_from_slice(&p.values()[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let owned: Vec<Tensor> = parts.to_vec();
        let cc = col_counts.clone();
        Tensor::from_op(
            "concat",
            vec![rows, total_cols],
            values,
            owned.clone(),
            Box::new(move |g| {
                let mut off = 0;
                for (p, &c) in owned.iter().zip(&cc) {
                    let mut dp = vec![0.0; rows * c];
                    for i in 0..rows {
                        dp[i * c..(i + 1) * c]
                            .copy_from_slice(&g[i * total_cols + off..i * total_cols + off + c]);
                    }
                    p.accumulate_grad(&dp);
                    off += c;
                }
            }),
        )
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let [r, c] = two_d("slice", self.shape())?;
        if start >= end || end > r {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape: self.shape().to_vec(),
                reason: format!("row range {}..{}", start, end),
            });
        }
        let values = self.values()[start * c..end * c].to_vec();
        let xc = self.clone();
        Tensor::from_op(
            "slice",
            vec![end - start, c],
            values,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; r * c];
                dx[start * c..end * c].copy_from_slice(g);
                xc.accumulate_grad(&dx);
            }),
        )
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let [r, c] = two_d("slice", self.shape())?;
        if start >= end || end > c {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape: self.shape().to_vec(),
                reason: format!("column range {}..{}", start, end),
            });
        }
        let w = end - start;
        let mut values = vec![0.0; r * w];
        for i in 0..r {
            values[i * w..(i + 1) * w].copy_from_slice(&self.values()[i * c + start..i * c + end]);
        }
        let xc = self.clone();
        Tensor::from_op(
            "slice",
            vec![r, w],
            values,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                xc.accumulate_grad(&dx);
            }),
        )
    }

    pub fn row(&self, i: usize) -> Result<Tensor> {
        let [_, c] = two_d("slice", self.shape())?;
        self.slice_rows(i, i + 1)?.reshape(vec![c])
    }
}

fn two_d(op: &'static str, shape: &[usize]) -> Result<[usize; 2]> {
    match shape {
        [r, c] => Ok([*r, *c]),
        _ => Err(TensorError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "expected rank 2".into(),
        }),
    }
}

fn last_axis(op: &'static str, shape: &[usize]) -> Result<usize> {
    match shape.last() {
        Some(&c) if c > 0 => Ok(c),
        _ => Err(TensorError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "needs a nonempty last axis".into(),
        }),
    }
}
