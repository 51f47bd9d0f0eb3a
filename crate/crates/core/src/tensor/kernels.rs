//! f32 compute kernels shared by the autodiff graph and the no-graph
//! inference path.
//!
//! Every reduction has a fixed per-element order (ascending index, 32-lane
//! accumulator blocks), so results are bit-identical whether or not the
//! row-parallel outer loops run on multiple threads.

use rayon::prelude::*;
use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Enable or disable internal row-level parallelism. Results are identical
/// either way; serial mode exists for the strict determinism tests.
pub fn set_parallel(on: bool) {
    PARALLEL.store(on, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

const PAR_MIN_WORK: usize = 1 << 16;

/// Dot product with 32 fixed accumulator lanes.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let split = n - n % 32;
    let mut acc = [0.0f32; 32];
    for (ca, cb) in a[..split].chunks_exact(32).zip(b[..split].chunks_exact(32)) {
        for l in 0..32 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in a[split..].iter().zip(&b[split..]) {
        tail += x * y;
    }
    // fixed pairwise combine
    for stride in [16usize, 8, 4, 2, 1] {
        for l in 0..stride {
            acc[l] += acc[l + stride];
        }
    }
    acc[0] + tail
}

/// y += s * x
#[inline]
pub fn axpy(y: &mut [f32], s: f32, x: &[f32]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

fn for_each_row_par<F>(out: &mut [f32], row_len: usize, work_per_row: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync,
{
    debug_assert_eq!(out.len() % row_len.max(1), 0);
    if parallel_enabled() && out.len() / row_len.max(1) > 1 && work_per_row.saturating_mul(2) > PAR_MIN_WORK {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    } else {
        for (i, row) in out.chunks_mut(row_len).enumerate() {
            f(i, row);
        }
    }
}

const NB: usize = 64;

/// One output row of a·b: orow[j] += Σ_kk arow[kk]·b[kk,j].
/// Column blocks of NB stay in registers across the whole kk loop; the
/// per-element reduction order (kk ascending) is identical in both paths.
#[inline]
fn gemm_row_block<const W: usize>(orow: &mut [f32], arow: &[f32], b: &[f32], n: usize, jb: usize) {
    let mut acc = [0.0f32; W];
    acc.copy_from_slice(&orow[jb..jb + W]);
    for (kk, &aik) in arow.iter().enumerate() {
        let brow = &b[kk * n + jb..kk * n + jb + W];
        for l in 0..W {
            acc[l] += aik * brow[l];
        }
    }
    orow[jb..jb + W].copy_from_slice(&acc);
}

#[inline]
fn gemm_row_nn(orow: &mut [f32], arow: &[f32], b: &[f32], n: usize) {
    let mut jb = 0;
    while jb + NB <= n {
        gemm_row_block::<NB>(orow, arow, b, n, jb);
        jb += NB;
    }
    if jb + 32 <= n {
        gemm_row_block::<32>(orow, arow, b, n, jb);
        jb += 32;
    }
    if jb < n {
        let w = n - jb;
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n + jb..kk * n + jb + w];
            for (o, &bv) in orow[jb..jb + w].iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// out += a · b, with a: r×k, b: k×n, all row-major.
pub fn add_matmul_nn(out: &mut [f32], a: &[f32], b: &[f32], r: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), r * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), r * n);
    for_each_row_par(out, n, k * n, |i, orow| {
        gemm_row_nn(orow, &a[i * k..(i + 1) * k], b, n);
    });
}

/// out = a · b (allocating).
pub fn matmul_nn(a: &[f32], b: &[f32], r: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; r * n];
    let work = k * n;
    for_each_row_par(&mut out, n, work, |i, orow| {
        gemm_row_nn(orow, &a[i * k..(i + 1) * k], b, n);
    });
    out
}

/// Transpose a r×c row-major matrix.
pub fn transpose(a: &[f32], r: usize, c: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), r * c);
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// out += a · bᵀ, with a: r×k, bt: n×k (row-major), out: r×n.
pub fn add_matmul_nt(out: &mut [f32], a: &[f32], bt: &[f32], r: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), r * k);
    debug_assert_eq!(bt.len(), n * k);
    debug_assert_eq!(out.len(), r * n);
    let work = k * n;
    for_each_row_par(out, n, work, |i, orow| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            *o += dot(arow, &bt[j * k..(j + 1) * k]);
        }
    });
}

/// out += aᵀ · b, with a: r×k, b: r×n, out: k×n (weight-gradient shape).
pub fn add_matmul_tn(out: &mut [f32], a: &[f32], b: &[f32], r: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), r * k);
    debug_assert_eq!(b.len(), r * n);
    debug_assert_eq!(out.len(), k * n);
    let work = r * n;
    for_each_row_par(out, n, work, |i, orow| {
        // orow is row i of out: Σ_rr a[rr,i] * b[rr,:]
        let col = ColStride { a, k, i };
        let mut jb = 0;
        while jb + NB <= n {
            tn_row_block::<NB>(orow, &col, b, r, n, jb);
            jb += NB;
        }
        if jb + 32 <= n {
            tn_row_block::<32>(orow, &col, b, r, n, jb);
            jb += 32;
        }
        if jb < n {
            let w = n - jb;
            for rr in 0..r {
                let s = a[rr * k + i];
                let brow = &b[rr * n + jb..rr * n + jb + w];
                for (o, &bv) in orow[jb..jb + w].iter_mut().zip(brow) {
                    *o += s * bv;
                }
            }
        }
    });
}

struct ColStride<'a> {
    a: &'a [f32],
    k: usize,
    i: usize,
}

#[inline]
fn tn_row_block<const W: usize>(
    orow: &mut [f32],
    col: &ColStride<'_>,
    b: &[f32],
    r: usize,
    n: usize,
    jb: usize,
) {
    let mut acc = [0.0f32; W];
    acc.copy_from_slice(&orow[jb..jb + W]);
    for rr in 0..r {
        let s = col.a[rr * col.k + col.i];
        let brow = &b[rr * n + jb..rr * n + jb + W];
        for l in 0..W {
            acc[l] += s * brow[l];
        }
    }
    orow[jb..jb + W].copy_from_slice(&acc);
}

/// Row softmax in place with max subtraction; denominator accumulated in f64.
pub fn softmax_row(row: &mut [f32]) {
    let mut max = f32::NEG_INFINITY;
    for &x in row.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = 0.0f64;
    for x in row.iter_mut() {
        let e = (*x - max).exp();
        *x = e;
        sum += e as f64;
    }
    let inv = (1.0 / sum) as f32;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// log(Σ exp(row)) with max subtraction, f64 accumulation.
pub fn log_sum_exp(row: &[f32]) -> f64 {
    let mut max = f32::NEG_INFINITY;
    for &x in row {
        if x > max {
            max = x;
        }
    }
    let mut sum = 0.0f64;
    for &x in row {
        sum += ((x - max) as f64).exp();
    }
    max as f64 + sum.ln()
}

/// y = x / rms(x) ⊙ w for one row; returns the inverse rms for backward.
pub fn rmsnorm_row(y: &mut [f32], x: &[f32], w: &[f32], eps: f32) -> f32 {
    let n = x.len();
    let mut ms = 0.0f64;
    for &v in x {
        ms += (v as f64) * (v as f64);
    }
    let inv = (1.0 / (ms / n as f64 + eps as f64).sqrt()) as f32;
    for i in 0..n {
        y[i] = x[i] * inv * w[i];
    }
    inv
}

pub fn rmsnorm_backward_row(
    dx: &mut [f32],
    dw: &mut [f32],
    g: &[f32],
    x: &[f32],
    w: &[f32],
    inv: f32,
) {
    let n = x.len();
    let mut t = 0.0f64;
    for i in 0..n {
        t += (g[i] as f64) * (w[i] as f64) * (x[i] as f64);
    }
    let c = (inv as f64).powi(3) * t / n as f64;
    for i in 0..n {
        dx[i] += inv * g[i] * w[i] - (c as f32) * x[i];
        dw[i] += g[i] * x[i] * inv;
    }
}

/// Rotary rotation: x is rows×dim row-major, dim = n_heads * head_dim,
/// head_dim even, pairs are adjacent lanes (2d, 2d+1). Row `r` uses position
/// `r % seq`. `inverse` rotates by the negative angle (backward pass).
pub fn rope_rows_dim(
    x: &mut [f32],
    dim: usize,
    seq: usize,
    n_heads: usize,
    base: f32,
    inverse: bool,
) {
    let head_dim = dim / n_heads;
    debug_assert_eq!(head_dim % 2, 0);
    let half = head_dim / 2;
    for_each_row_par(x, dim, dim * 8, |r, row| {
        let pos = (r % seq) as f64;
        for h in 0..n_heads {
            let head = &mut row[h * head_dim..(h + 1) * head_dim];
            for d in 0..half {
                let freq = (base as f64).powf(-2.0 * d as f64 / head_dim as f64);
                let angle = pos * freq;
                let (mut s, c) = (angle.sin() as f32, angle.cos() as f32);
                if inverse {
                    s = -s;
                }
                let (x0, x1) = (head[2 * d], head[2 * d + 1]);
                head[2 * d] = x0 * c - x1 * s;
                head[2 * d + 1] = x0 * s + x1 * c;
            }
        }
    });
}

/// x·sigmoid(x) elementwise.
pub fn silu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// d/dx silu(x) = sigmoid(x)(1 + x(1 − sigmoid(x)))
#[inline]
pub fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Causal multi-head attention forward.
///
/// q, k, v are (batch*seq)×dim row-major; returns the context tensor of the
/// same shape plus the attention probabilities (batch·heads·seq·seq, rows
/// beyond the causal prefix left at zero) needed for backward.
pub fn attention_forward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    batch: usize,
    seq: usize,
    dim: usize,
    n_heads: usize,
) -> (Vec<f32>, Vec<f32>) {
    let head_dim = dim / n_heads;
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut ctx = vec![0.0f32; batch * seq * dim];
    let mut probs = vec![0.0f32; batch * n_heads * seq * seq];

    let run_batch = |b: usize, ctx_b: &mut [f32], probs_b: &mut [f32]| {
        for h in 0..n_heads {
            let col = h * head_dim;
            let pb = &mut probs_b[h * seq * seq..(h + 1) * seq * seq];
            for i in 0..seq {
                let qi = &q[(b * seq + i) * dim + col..(b * seq + i) * dim + col + head_dim];
                let prow = &mut pb[i * seq..i * seq + i + 1];
                for (j, p) in prow.iter_mut().enumerate() {
                    let kj = &k[(b * seq + j) * dim + col..(b * seq + j) * dim + col + head_dim];
                    *p = dot(qi, kj) * scale;
                }
                softmax_row(prow);
                let crow = &mut ctx_b[i * dim + col..i * dim + col + head_dim];
                for (j, &p) in prow.iter().enumerate() {
                    let vj = &v[(b * seq + j) * dim + col..(b * seq + j) * dim + col + head_dim];
                    axpy(crow, p, vj);
                }
            }
        }
    };

    if parallel_enabled() && batch > 1 && seq * seq * dim > PAR_MIN_WORK {
        ctx.par_chunks_mut(seq * dim)
            .zip(probs.par_chunks_mut(n_heads * seq * seq))
            .enumerate()
            .for_each(|(b, (cb, pb))| run_batch(b, cb, pb));
    } else {
        for (b, (cb, pb)) in ctx
            .chunks_mut(seq * dim)
            .zip(probs.chunks_mut(n_heads * seq * seq))
            .enumerate()
        {
            run_batch(b, cb, pb);
        }
    }
    (ctx, probs)
}

/// Backward of `attention_forward`. Accumulates into dq, dk, dv.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    dq: &mut [f32],
    dk: &mut [f32],
    dv: &mut [f32],
    d_ctx: &[f32],
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    batch: usize,
    seq: usize,
    dim: usize,
    n_heads: usize,
) {
    let head_dim = dim / n_heads;
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut dp = vec![0.0f32; seq];
    for b in 0..batch {
        for h in 0..n_heads {
            let col = h * head_dim;
            let pb = &probs[(b * n_heads + h) * seq * seq..];
            for i in 0..seq {
                let row = b * seq + i;
                let dci = &d_ctx[row * dim + col..row * dim + col + head_dim];
                let prow = &pb[i * seq..i * seq + i + 1];
                // d_probs then softmax backward
                let mut inner = 0.0f64;
                for j in 0..=i {
                    let vj = &v[(b * seq + j) * dim + col..(b * seq + j) * dim + col + head_dim];
                    dp[j] = dot(dci, vj);
                    inner += (prow[j] as f64) * (dp[j] as f64);
                }
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - inner as f32) * scale;
                    let kj = &k[(b * seq + j) * dim + col..(b * seq + j) * dim + col + head_dim];
                    let qi = &q[row * dim + col..row * dim + col + head_dim];
                    axpy(&mut dq[row * dim + col..row * dim + col + head_dim], ds, kj);
                    axpy(
                        &mut dk[(b * seq + j) * dim + col..(b * seq + j) * dim + col + head_dim],
                        ds,
                        qi,
                    );
                    axpy(
                        &mut dv[(b * seq + j) * dim + col..(b * seq + j) * dim + col + head_dim],
                        prow[j],
                        dci,
                    );
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use crate::rng::Rng;

    #[test]
    fn dot_matches_f64_reference() {
        let mut rng = Rng::seed_from_u64(1);
        for len in [1usize, 7, 31, 32, 33, 100, 1000] {
            let a = rng.normal_vec(len, 1.0);
            let b = rng.normal_vec(len, 1.0);
            let got = dot(&a, &b) as f64;
            let want = reference::dot64(&a, &b);
            assert!((got - want).abs() <= 1e-4 * want.abs().max(1.0), "len {len}");
        }
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::seed_from_u64(2);
        let (r, k, n) = (5, 4, 6);
        let a = rng.normal_vec(r * k, 1.0);
        let b = rng.normal_vec(k * n, 1.0);
        let got = matmul_nn(&a, &b, r, k, n);
        let want = reference::matmul64(&a, &b, r, k, n);
        for (g, w) in got.iter().zip(&want) {
            assert!((*g as f64 - w).abs() <= 1e-5);
        }
    }

    #[test]
    fn matmul_nt_tn_agree_with_nn() {
        let mut rng = Rng::seed_from_u64(3);
        let (r, k, n) = (7, 9, 5);
        let a = rng.normal_vec(r * k, 1.0);
        let b = rng.normal_vec(k * n, 1.0);
        // bt: n×k = transpose of b
        let mut bt = vec![0.0f32; n * k];
        for i in 0..k {
            for j in 0..n {
                bt[j * k + i] = b[i * n + j];
            }
        }
        let want = matmul_nn(&a, &b, r, k, n);
        let mut got = vec![0.0f32; r * n];
        add_matmul_nt(&mut got, &a, &bt, r, k, n);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-5);
        }
        // aᵀ·c via tn, with c r×n
        let c = rng.normal_vec(r * n, 1.0);
        let mut got_tn = vec![0.0f32; k * n];
        add_matmul_tn(&mut got_tn, &a, &c, r, k, n);
        let mut at = vec![0.0f32; k * r];
        for i in 0..r {
            for j in 0..k {
                at[j * r + i] = a[i * k + j];
            }
        }
        let want_tn = matmul_nn(&at, &c, k, r, n);
        for (g, w) in got_tn.iter().zip(&want_tn) {
            assert!((g - w).abs() <= 1e-5);
        }
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let mut row = vec![0.0f32; 4];
        softmax_row(&mut row);
        for &p in &row {
            assert!((p - 0.25).abs() <= 1e-7);
        }
        let mut big = vec![1000.0f32, 0.0];
        softmax_row(&mut big);
        assert!(big[0] > 0.9999 && big[0].is_finite());
        assert!(big[1] >= 0.0 && big[1] < 1e-6);
    }

    #[test]
    fn softmax_matches_f64_reference() {
        let mut rng = Rng::seed_from_u64(4);
        for _ in 0..10 {
            let row = rng.normal_vec(5, 2.0);
            let mut got = row.clone();
            softmax_row(&mut got);
            let want = reference::softmax64(&row);
            for (g, w) in got.iter().zip(&want) {
                assert!((*g as f64 - w).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn parallel_and_serial_bit_identical() {
        let mut rng = Rng::seed_from_u64(5);
        let (r, k, n) = (64, 300, 200);
        let a = rng.normal_vec(r * k, 1.0);
        let b = rng.normal_vec(k * n, 1.0);
        set_parallel(true);
        let par = matmul_nn(&a, &b, r, k, n);
        set_parallel(false);
        let ser = matmul_nn(&a, &b, r, k, n);
        set_parallel(true);
        assert_eq!(par, ser);
    }
}
