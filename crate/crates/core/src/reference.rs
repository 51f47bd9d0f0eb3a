//! Slow f64 reference implementations.
//!
//! These exist as independent oracles for the test suites: straightforward
//! loops, 64-bit accumulation, no shared code with the f32 kernels. Nothing
//! here is used on any training or inference path.

pub fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum()
}

/// Triple-loop matmul: a r×k times b k×n.
pub fn matmul64(a: &[f32], b: &[f32], r: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; r * n];
    for i in 0..r {
        for j in 0..n {
            let mut acc = 0.0f64;
            for kk in 0..k {
                acc += a[i * k + kk] as f64 * b[kk * n + j] as f64;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

pub fn softmax64(row: &[f32]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = row.iter().map(|&x| (x as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

pub fn log_sum_exp64(row: &[f32]) -> f64 {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum();
    max + sum.ln()
}

/// Elementwise sign with sign(0) = −1, evaluated in f64.
pub fn sign64(x: f32) -> f32 {
    if (x as f64) > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Column mean and mean absolute deviation of a m×n matrix, in f64.
pub fn init_scales64(w: &[f32], m: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut alpha = vec![0.0f64; n];
    let mut beta = vec![0.0f64; n];
    for j in 0..n {
        let mut mean = 0.0f64;
        for i in 0..m {
            mean += w[i * n + j] as f64;
        }
        mean /= m as f64;
        let mut mad = 0.0f64;
        for i in 0..m {
            mad += (w[i * n + j] as f64 - mean).abs();
        }
        alpha[j] = mean;
        beta[j] = mad / m as f64;
    }
    (alpha, beta)
}

/// α_j·sign(w)_ij + β_j elementwise, in f64.
pub fn effective_weight64(w: &[f32], alpha: &[f32], beta: &[f32], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = alpha[j] as f64 * sign64(w[i * n + j]) as f64 + beta[j] as f64;
        }
    }
    out
}

/// Direct-summation soft-label cross-entropy:
/// −(1/n)Σ_rows Σ_v t[r,v]·log softmax(logits[r])[v] over unmasked rows.
pub fn soft_ce64(logits: &[f32], teacher: &[f32], rows: usize, v: usize, mask: &[bool]) -> f64 {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        let row = &logits[r * v..(r + 1) * v];
        let lz = log_sum_exp64(row);
        let mut acc = 0.0f64;
        for j in 0..v {
            acc += teacher[r * v + j] as f64 * (lz - row[j] as f64);
        }
        total += acc;
        count += 1;
    }
    total / count as f64
}

/// Mean negative log-likelihood of integer targets over unmasked rows.
pub fn nll64(logits: &[f32], targets: &[u32], rows: usize, v: usize, mask: &[bool]) -> f64 {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        let row = &logits[r * v..(r + 1) * v];
        total += log_sum_exp64(row) - row[targets[r] as usize] as f64;
        count += 1;
    }
    total / count as f64
}

/// Shannon entropy of one probability row, in nats.
pub fn entropy64(p: &[f32]) -> f64 {
    p.iter()
        .map(|&x| {
            let x = x as f64;
            if x > 0.0 {
                -x * x.ln()
            } else {
                0.0
            }
        })
        .sum()
}

pub fn silu64(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Rotary rotation in f64: rows×dim, adjacent-lane pairs, row r at position
/// r % seq. Mirrors the f32 kernel's layout conventions.
pub fn rope64(x: &[f64], dim: usize, seq: usize, n_heads: usize, base: f64) -> Vec<f64> {
    let head_dim = dim / n_heads;
    let half = head_dim / 2;
    let mut out = x.to_vec();
    for (r, row) in out.chunks_mut(dim).enumerate() {
        let pos = (r % seq) as f64;
        for h in 0..n_heads {
            let head = &mut row[h * head_dim..(h + 1) * head_dim];
            for d in 0..half {
                let freq = base.powf(-2.0 * d as f64 / head_dim as f64);
                let (s, c) = (pos * freq).sin_cos();
                let (x0, x1) = (head[2 * d], head[2 * d + 1]);
                head[2 * d] = x0 * c - x1 * s;
                head[2 * d + 1] = x0 * s + x1 * c;
            }
        }
    }
    out
}

/// Causal multi-head attention in f64.
pub fn attention64(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    batch: usize,
    seq: usize,
    dim: usize,
    n_heads: usize,
) -> Vec<f64> {
    let head_dim = dim / n_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut ctx = vec![0.0f64; batch * seq * dim];
    for b in 0..batch {
        for h in 0..n_heads {
            let col = h * head_dim;
            for i in 0..seq {
                let qi = &q[(b * seq + i) * dim + col..(b * seq + i) * dim + col + head_dim];
                let mut scores = vec![0.0f64; i + 1];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &k[(b * seq + j) * dim + col..(b * seq + j) * dim + col + head_dim];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0f64;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                for (j, s) in scores.iter().enumerate() {
                    let p = s / denom;
                    let vj = &v[(b * seq + j) * dim + col..(b * seq + j) * dim + col + head_dim];
                    let crow = &mut ctx[(b * seq + i) * dim + col..(b * seq + i) * dim + col + head_dim];
                    for (cd, vd) in crow.iter_mut().zip(vj) {
                        *cd += p * vd;
                    }
                }
            }
        }
    }
    ctx
}

/// RMS norm of packed rows in f64.
pub fn rmsnorm_rows64(x: &[f64], w: &[f64], eps: f64) -> Vec<f64> {
    let h = w.len();
    let mut out = vec![0.0f64; x.len()];
    for (r, row) in x.chunks(h).enumerate() {
        let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / h as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        for i in 0..h {
            out[r * h + i] = row[i] * inv * w[i];
        }
    }
    out
}

pub fn rmsnorm64(x: &[f32], w: &[f32], eps: f64) -> Vec<f64> {
    let n = x.len();
    let ms: f64 = x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / n as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    (0..n).map(|i| x[i] as f64 * inv * w[i] as f64).collect()
}

/// Central finite differences of a scalar function around x. Divides by the
/// realized f32 spread so step rounding does not pollute the estimate; the
/// function is responsible for evaluating in f64 where precision matters.
pub fn central_diff(mut f: impl FnMut(&[f32]) -> f64, x: &[f32], h: f32) -> Vec<f64> {
    let mut grad = vec![0.0f64; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        let hi = orig + h;
        let lo = orig - h;
        xp[i] = hi;
        let up = f(&xp);
        xp[i] = lo;
        let down = f(&xp);
        xp[i] = orig;
        grad[i] = (up - down) / (hi as f64 - lo as f64);
    }
    grad
}
