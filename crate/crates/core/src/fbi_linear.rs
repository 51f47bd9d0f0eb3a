//! The binarized linear layer: latent full-precision weights are binarized
//! by sign on every forward pass, then scaled and shifted per output column
//! by the learnable vectors alpha and beta. Training flows gradients to the
//! latents through the straight-through estimator.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, NodeId};

/// Latent weights plus per-column scale/shift. `w_f` is m×n row-major,
/// mapping m input features to n output features; the binarized view is
/// always derived as sign(w_f), never stored.
#[derive(Clone, Debug)]
pub struct FbiLinearParams {
    pub m: usize,
    pub n: usize,
    pub w_f: Vec<f32>,
    pub alpha: Vec<f32>,
    pub beta: Vec<f32>,
}

#[inline]
pub fn sign(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Column means a_j and mean absolute deviations around them:
/// alpha_j = a_j, beta_j = (1/m)·Σ_i |w[i,j] − a_j|.
pub fn init_scales(w_f: &[f32], m: usize, n: usize) -> Result<(Vec<f32>, Vec<f32>)> {
    if m == 0 || n == 0 {
        return Err(Error::Contract(format!("empty matrix {m}x{n} in init_scales")));
    }
    if w_f.len() != m * n {
        return Err(Error::Dimension(format!(
            "w_f length {} != {m}x{n}",
            w_f.len()
        )));
    }
    let mut alpha = vec![0.0f32; n];
    let mut beta = vec![0.0f32; n];
    for j in 0..n {
        let mut mean = 0.0f64;
        for i in 0..m {
            mean += w_f[i * n + j] as f64;
        }
        mean /= m as f64;
        let mut mad = 0.0f64;
        for i in 0..m {
            mad += (w_f[i * n + j] as f64 - mean).abs();
        }
        alpha[j] = mean as f32;
        beta[j] = (mad / m as f64) as f32;
    }
    Ok((alpha, beta))
}

impl FbiLinearParams {
    /// Latents drawn from N(0, std); alpha and beta from the column statistics.
    pub fn random(m: usize, n: usize, std: f32, rng: &mut Rng) -> Result<Self> {
        let w_f = rng.normal_vec(m * n, std);
        Self::from_latent(m, n, w_f)
    }

    pub fn from_latent(m: usize, n: usize, w_f: Vec<f32>) -> Result<Self> {
        let (alpha, beta) = init_scales(&w_f, m, n)?;
        Ok(FbiLinearParams { m, n, w_f, alpha, beta })
    }

    /// sign(w_f) as a dense ±1 matrix.
    pub fn binarized(&self) -> Vec<f32> {
        self.w_f.iter().map(|&x| sign(x)).collect()
    }

    /// W̃[i,j] = alpha[j]·sign(w_f)[i,j] + beta[j], recomputed from the
    /// current latents.
    pub fn effective_weight(&self) -> Vec<f32> {
        let mut out = vec![0.0f32; self.m * self.n];
        for i in 0..self.m {
            for j in 0..self.n {
                out[i * self.n + j] = self.alpha[j] * sign(self.w_f[i * self.n + j]) + self.beta[j];
            }
        }
        out
    }
}

/// Graph node ids of one layer's trainable leaves.
#[derive(Clone, Copy, Debug)]
pub struct FbiNodes {
    pub w_f: NodeId,
    pub alpha: NodeId,
    pub beta: NodeId,
}

/// Records sign → column scale/shift → matmul on the graph:
/// y = x · (alpha ⊙ sign(w_f) + beta). Backward populates grad(w_f) through
/// the straight-through estimator and grads of alpha/beta by the chain rule.
pub fn forward(g: &mut Graph, nodes: FbiNodes, x: NodeId) -> Result<NodeId> {
    let w_b = g.ste_sign(nodes.w_f)?;
    let eff = g.col_scale_shift(w_b, nodes.alpha, nodes.beta)?;
    g.matmul(x, eff)
}

/// Leaf nodes for a standalone layer (model code builds its own leaves).
pub fn leaves(g: &mut Graph, p: &FbiLinearParams, trainable: bool) -> Result<FbiNodes> {
    Ok(FbiNodes {
        w_f: g.leaf(p.w_f.clone(), &[p.m, p.n], trainable)?,
        alpha: g.leaf(p.alpha.clone(), &[p.n], trainable)?,
        beta: g.leaf(p.beta.clone(), &[p.n], trainable)?,
    })
}

/// Gradients of one layer after `backward`, read off the graph leaves.
/// Errors if backward has not populated them yet.
pub fn grads_consistency(
    g: &Graph,
    nodes: FbiNodes,
) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
    let take = |id: NodeId, what: &str| -> Result<Vec<f32>> {
        g.grad(id)
            .map(|s| s.to_vec())
            .ok_or_else(|| Error::Contract(format!("{what} gradient absent: backward not run")))
    };
    Ok((
        take(nodes.w_f, "w_f")?,
        take(nodes.alpha, "alpha")?,
        take(nodes.beta, "beta")?,
    ))
}

/// Closed-form layer gradients from the upstream ∂L/∂W̃ (m×n):
/// g_alpha[j] = Σ_i up[i,j]·sign(w_f)[i,j], g_beta[j] = Σ_i up[i,j],
/// g_wf[i,j] = alpha[j]·up[i,j].
pub fn grads_from_upstream(
    p: &FbiLinearParams,
    upstream: &[f32],
) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
    if upstream.len() != p.m * p.n {
        return Err(Error::Dimension(format!(
            "upstream length {} != {}x{}",
            upstream.len(),
            p.m,
            p.n
        )));
    }
    let (m, n) = (p.m, p.n);
    let mut g_wf = vec![0.0f32; m * n];
    let mut g_alpha = vec![0.0f32; n];
    let mut g_beta = vec![0.0f32; n];
    for j in 0..n {
        let mut ga = 0.0f64;
        let mut gb = 0.0f64;
        for i in 0..m {
            let up = upstream[i * n + j];
            ga += up as f64 * sign(p.w_f[i * n + j]) as f64;
            gb += up as f64;
            g_wf[i * n + j] = p.alpha[j] * up;
        }
        g_alpha[j] = ga as f32;
        g_beta[j] = gb as f32;
    }
    Ok((g_wf, g_alpha, g_beta))
}
