//! LLaMA2-style decoder-only transformer. Every linear (attention
//! projections and MLP) is a binarized FBI layer when `binarize` is set;
//! embedding, RMSNorm weights, and the causal head always stay full
//! precision. Pre-norm blocks, rotary positions, SwiGLU MLP, no biases,
//! untied embedding/head.

use crate::bitpack::PackedLinear;
use crate::config::{ModelConfig, RMS_EPS, ROPE_BASE};
use crate::distill::DistributionBatch;
use crate::error::{Error, Result};
use crate::fbi_linear::{self, FbiNodes};
use crate::params::{ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::{kernels, Graph, NodeId};

#[derive(Clone, Copy, Debug)]
pub enum LinearRef {
    Binarized {
        w_f: ParamId,
        alpha: ParamId,
        beta: ParamId,
    },
    Dense {
        w: ParamId,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct LayerRefs {
    pub attn_norm: ParamId,
    pub q: LinearRef,
    pub k: LinearRef,
    pub v: LinearRef,
    pub o: LinearRef,
    pub mlp_norm: ParamId,
    pub gate: LinearRef,
    pub up: LinearRef,
    pub down: LinearRef,
}

impl LayerRefs {
    pub fn linears(&self) -> [(&'static str, LinearRef); 7] {
        [
            ("q", self.q),
            ("k", self.k),
            ("v", self.v),
            ("o", self.o),
            ("gate", self.gate),
            ("up", self.up),
            ("down", self.down),
        ]
    }
}

pub struct ModelParams {
    pub cfg: ModelConfig,
    pub store: ParamSet,
    pub embedding: ParamId,
    pub layers: Vec<LayerRefs>,
    pub final_norm: ParamId,
    pub head: ParamId,
}

/// (name, input features, output features) for each linear in one layer.
fn layer_linear_shapes(cfg: &ModelConfig) -> [(&'static str, usize, usize); 7] {
    let h = cfg.hidden_size;
    let i = cfg.intermediate_size;
    [
        ("q", h, h),
        ("k", h, h),
        ("v", h, h),
        ("o", h, h),
        ("gate", h, i),
        ("up", h, i),
        ("down", i, h),
    ]
}

impl ModelParams {
    /// Fresh parameters: embedding/head/latents from N(0, initializer_range),
    /// norm weights at one, alpha/beta from the column statistics of the
    /// latents they scale.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::seed_from_u64(seed);
        let mut store = ParamSet::new();
        let h = cfg.hidden_size;
        let v = cfg.vocab_size;
        let std = cfg.initializer_range;

        let embedding = store.add("embedding", &[v, h], rng.normal_vec(v * h, std))?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let attn_norm = store.add(&format!("layers.{l}.attn_norm"), &[h], vec![1.0; h])?;
            let linear = |store: &mut ParamSet, rng: &mut Rng, name: &str, m: usize, n: usize| -> Result<LinearRef> {
                let latent = rng.normal_vec(m * n, std);
                if cfg.binarize {
                    let (alpha, beta) = fbi_linear::init_scales(&latent, m, n)?;
                    Ok(LinearRef::Binarized {
                        w_f: store.add(&format!("layers.{l}.{name}.w_f"), &[m, n], latent)?,
                        alpha: store.add(&format!("layers.{l}.{name}.alpha"), &[n], alpha)?,
                        beta: store.add(&format!("layers.{l}.{name}.beta"), &[n], beta)?,
                    })
                } else {
                    Ok(LinearRef::Dense {
                        w: store.add(&format!("layers.{l}.{name}.w"), &[m, n], latent)?,
                    })
                }
            };
            let shapes = layer_linear_shapes(cfg);
            let q = linear(&mut store, &mut rng, shapes[0].0, shapes[0].1, shapes[0].2)?;
            let k = linear(&mut store, &mut rng, shapes[1].0, shapes[1].1, shapes[1].2)?;
            let vv = linear(&mut store, &mut rng, shapes[2].0, shapes[2].1, shapes[2].2)?;
            let o = linear(&mut store, &mut rng, shapes[3].0, shapes[3].1, shapes[3].2)?;
            let mlp_norm = store.add(&format!("layers.{l}.mlp_norm"), &[h], vec![1.0; h])?;
            let gate = linear(&mut store, &mut rng, shapes[4].0, shapes[4].1, shapes[4].2)?;
            let up = linear(&mut store, &mut rng, shapes[5].0, shapes[5].1, shapes[5].2)?;
            let down = linear(&mut store, &mut rng, shapes[6].0, shapes[6].1, shapes[6].2)?;
            layers.push(LayerRefs {
                attn_norm,
                q,
                k,
                v: vv,
                o,
                mlp_norm,
                gate,
                up,
                down,
            });
        }
        let final_norm = store.add("final_norm", &[h], vec![1.0; h])?;
        let head = store.add("head", &[h, v], rng.normal_vec(h * v, std))?;
        Ok(ModelParams {
            cfg: cfg.clone(),
            store,
            embedding,
            layers,
            final_norm,
            head,
        })
    }

    /// Binarized model whose latents are harvested from a full-precision
    /// twin's dense weights (alpha/beta re-derived from column statistics);
    /// embedding, norms, and head are copied.
    pub fn init_from_twin(twin: &ModelParams) -> Result<Self> {
        if twin.cfg.binarize {
            return Err(Error::Config(
                "init_from_twin needs a full-precision twin (binarize = false)".into(),
            ));
        }
        let cfg = ModelConfig {
            binarize: true,
            ..twin.cfg.clone()
        };
        let mut out = ModelParams::init(&cfg, 0)?;
        for (_, p) in twin.store.iter() {
            if let Some(stripped) = p.name.strip_suffix(".w") {
                let w_f = out
                    .store
                    .by_name(&format!("{stripped}.w_f"))
                    .ok_or_else(|| Error::Config(format!("no latent for {}", p.name)))?;
                let (m, n) = (p.shape[0], p.shape[1]);
                let (alpha, beta) = fbi_linear::init_scales(&p.data, m, n)?;
                out.store.get_mut(w_f).data.copy_from_slice(&p.data);
                let a_id = out.store.by_name(&format!("{stripped}.alpha")).unwrap();
                let b_id = out.store.by_name(&format!("{stripped}.beta")).unwrap();
                out.store.get_mut(a_id).data.copy_from_slice(&alpha);
                out.store.get_mut(b_id).data.copy_from_slice(&beta);
            } else {
                let id = out.store.by_name(&p.name).ok_or_else(|| {
                    Error::Config(format!("twin parameter {} missing in student", p.name))
                })?;
                if out.store.get(id).shape != p.shape {
                    return Err(Error::Config(format!("shape mismatch for {}", p.name)));
                }
                out.store.get_mut(id).data.copy_from_slice(&p.data);
            }
        }
        Ok(out)
    }

    fn check_tokens(&self, tokens: &[u32], batch: usize, seq: usize) -> Result<()> {
        if batch * seq != tokens.len() {
            return Err(Error::Dimension(format!(
                "token count {} != batch {batch} x seq {seq}",
                tokens.len()
            )));
        }
        if seq == 0 || seq > self.cfg.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {seq} out of range (max {})",
                self.cfg.max_seq_len
            )));
        }
        for &t in tokens {
            if t as usize >= self.cfg.vocab_size {
                return Err(Error::Input(format!(
                    "token id {t} out of range for vocab {}",
                    self.cfg.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Record the full forward pass on a graph. Returns the logits node and
    /// the leaf node of every parameter for gradient readback.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        tokens: &[u32],
        batch: usize,
        seq: usize,
    ) -> Result<TrainForward> {
        self.check_tokens(tokens, batch, seq)?;
        let cfg = &self.cfg;
        let mut leaves: Vec<(ParamId, NodeId)> = Vec::with_capacity(self.store.len());
        let leaf = |g: &mut Graph, leaves: &mut Vec<(ParamId, NodeId)>, id: ParamId| -> Result<NodeId> {
            let p = self.store.get(id);
            let node = g.leaf(p.data.clone(), &p.shape, true)?;
            leaves.push((id, node));
            Ok(node)
        };

        let emb = leaf(g, &mut leaves, self.embedding)?;
        let mut x = g.embed(emb, tokens)?;
        for layer in &self.layers {
            let lin_nodes = |g: &mut Graph, leaves: &mut Vec<(ParamId, NodeId)>, r: LinearRef| -> Result<LinearNodes> {
                Ok(match r {
                    LinearRef::Binarized { w_f, alpha, beta } => LinearNodes::Binarized(FbiNodes {
                        w_f: leaf(g, leaves, w_f)?,
                        alpha: leaf(g, leaves, alpha)?,
                        beta: leaf(g, leaves, beta)?,
                    }),
                    LinearRef::Dense { w } => LinearNodes::Dense(leaf(g, leaves, w)?),
                })
            };
            let attn_norm = leaf(g, &mut leaves, layer.attn_norm)?;
            let qn = lin_nodes(g, &mut leaves, layer.q)?;
            let kn = lin_nodes(g, &mut leaves, layer.k)?;
            let vn = lin_nodes(g, &mut leaves, layer.v)?;
            let on = lin_nodes(g, &mut leaves, layer.o)?;
            let mlp_norm = leaf(g, &mut leaves, layer.mlp_norm)?;
            let gn = lin_nodes(g, &mut leaves, layer.gate)?;
            let un = lin_nodes(g, &mut leaves, layer.up)?;
            let dn = lin_nodes(g, &mut leaves, layer.down)?;

            let normed = g.rmsnorm(x, attn_norm, RMS_EPS)?;
            let q = apply_linear(g, &qn, normed)?;
            let k = apply_linear(g, &kn, normed)?;
            let v = apply_linear(g, &vn, normed)?;
            let q = g.rope(q, seq, cfg.n_heads, ROPE_BASE)?;
            let k = g.rope(k, seq, cfg.n_heads, ROPE_BASE)?;
            let ctx = g.causal_attention(q, k, v, batch, seq, cfg.n_heads)?;
            let attn_out = apply_linear(g, &on, ctx)?;
            x = g.add(x, attn_out)?;

            let normed = g.rmsnorm(x, mlp_norm, RMS_EPS)?;
            let gate = apply_linear(g, &gn, normed)?;
            let up = apply_linear(g, &un, normed)?;
            let act = g.silu(gate)?;
            let act = g.mul(act, up)?;
            let down = apply_linear(g, &dn, act)?;
            x = g.add(x, down)?;
        }
        let fnorm = leaf(g, &mut leaves, self.final_norm)?;
        let x = g.rmsnorm(x, fnorm, RMS_EPS)?;
        let head = leaf(g, &mut leaves, self.head)?;
        let logits = g.matmul(x, head)?;
        Ok(TrainForward { logits, leaves })
    }

    /// Logits via the no-graph inference path.
    pub fn forward_logits(&self, tokens: &[u32], batch: usize, seq: usize) -> Result<Vec<f32>> {
        InferModel::dense(self)?.forward(tokens, batch, seq)
    }

    /// Softmax over the vocabulary at every position.
    pub fn next_token_distribution(
        &self,
        tokens: &[u32],
        batch: usize,
        seq: usize,
    ) -> Result<DistributionBatch> {
        InferModel::dense(self)?.next_token_distribution(tokens, batch, seq)
    }

    pub fn census(&self) -> ParamCensus {
        let mut c = ParamCensus::default();
        for (_, p) in self.store.iter() {
            c.total += p.numel();
            if p.name.ends_with(".w_f") {
                c.binarizable += p.numel();
            } else {
                c.full_precision += p.numel();
                if p.name.ends_with(".alpha") || p.name.ends_with(".beta") {
                    c.alpha_beta += p.numel();
                }
            }
        }
        c
    }
}

enum LinearNodes {
    Binarized(FbiNodes),
    Dense(NodeId),
}

fn apply_linear(g: &mut Graph, nodes: &LinearNodes, x: NodeId) -> Result<NodeId> {
    match nodes {
        LinearNodes::Binarized(fbi) => fbi_linear::forward(g, *fbi, x),
        LinearNodes::Dense(w) => g.matmul(x, *w),
    }
}

pub struct TrainForward {
    pub logits: NodeId,
    pub leaves: Vec<(ParamId, NodeId)>,
}

/// Parameter counts split by role. `alpha_beta` is the slice of
/// `full_precision` taken by the learnable scale/shift vectors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamCensus {
    pub binarizable: usize,
    pub full_precision: usize,
    pub alpha_beta: usize,
    pub total: usize,
}

impl ModelConfig {
    /// Census by shape arithmetic alone (must match `ModelParams::census`).
    pub fn expected_census(&self) -> ParamCensus {
        let h = self.hidden_size;
        let i = self.intermediate_size;
        let v = self.vocab_size;
        let l = self.n_layers;
        let linear_weights = l * (4 * h * h + 3 * h * i);
        let alpha_beta = if self.binarize { l * (10 * h + 4 * i) } else { 0 };
        let norms = 2 * l * h + h;
        let emb_head = 2 * v * h;
        let binarizable = if self.binarize { linear_weights } else { 0 };
        let full_precision = alpha_beta
            + norms
            + emb_head
            + if self.binarize { 0 } else { linear_weights };
        ParamCensus {
            binarizable,
            full_precision,
            alpha_beta,
            total: binarizable + full_precision,
        }
    }
}

// ---------------------------------------------------------------------------
// Inference path (no graph): shared by teacher evaluation, perplexity, the
// generation demo, and the packed 1-bit model.
// ---------------------------------------------------------------------------

pub enum InferLinear {
    Dense { w: Vec<f32>, m: usize, n: usize },
    Packed(PackedLinear),
}

impl InferLinear {
    pub fn out_features(&self) -> usize {
        match self {
            InferLinear::Dense { n, .. } => *n,
            InferLinear::Packed(p) => p.n,
        }
    }

    pub fn in_features(&self) -> usize {
        match self {
            InferLinear::Dense { m, .. } => *m,
            InferLinear::Packed(p) => p.m,
        }
    }

    fn apply(&self, x: &[f32], rows: usize) -> Vec<f32> {
        match self {
            InferLinear::Dense { w, m, n } => kernels::matmul_nn(x, w, rows, *m, *n),
            InferLinear::Packed(p) => p.forward(x, rows),
        }
    }
}

pub struct InferLayer {
    pub attn_norm: Vec<f32>,
    pub q: InferLinear,
    pub k: InferLinear,
    pub v: InferLinear,
    pub o: InferLinear,
    pub mlp_norm: Vec<f32>,
    pub gate: InferLinear,
    pub up: InferLinear,
    pub down: InferLinear,
}

pub struct InferModel {
    pub cfg: ModelConfig,
    pub embedding: Vec<f32>,
    pub layers: Vec<InferLayer>,
    pub final_norm: Vec<f32>,
    pub head: Vec<f32>,
}

impl InferModel {
    /// Dense snapshot of the current parameters: binarized linears are
    /// materialized as their effective weights, exactly as the training
    /// forward sees them.
    pub fn dense(p: &ModelParams) -> Result<Self> {
        let dense_of = |r: LinearRef| -> InferLinear {
            match r {
                LinearRef::Binarized { w_f, alpha, beta } => {
                    let w = p.store.get(w_f);
                    let (m, n) = (w.shape[0], w.shape[1]);
                    let al = &p.store.get(alpha).data;
                    let be = &p.store.get(beta).data;
                    let mut eff = vec![0.0f32; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            eff[i * n + j] =
                                al[j] * crate::fbi_linear::sign(w.data[i * n + j]) + be[j];
                        }
                    }
                    InferLinear::Dense { w: eff, m, n }
                }
                LinearRef::Dense { w } => {
                    let wp = p.store.get(w);
                    InferLinear::Dense {
                        w: wp.data.clone(),
                        m: wp.shape[0],
                        n: wp.shape[1],
                    }
                }
            }
        };
        let layers = p
            .layers
            .iter()
            .map(|l| InferLayer {
                attn_norm: p.store.get(l.attn_norm).data.clone(),
                q: dense_of(l.q),
                k: dense_of(l.k),
                v: dense_of(l.v),
                o: dense_of(l.o),
                mlp_norm: p.store.get(l.mlp_norm).data.clone(),
                gate: dense_of(l.gate),
                up: dense_of(l.up),
                down: dense_of(l.down),
            })
            .collect();
        Ok(InferModel {
            cfg: p.cfg.clone(),
            embedding: p.store.get(p.embedding).data.clone(),
            layers,
            final_norm: p.store.get(p.final_norm).data.clone(),
            head: p.store.get(p.head).data.clone(),
        })
    }

    pub fn forward(&self, tokens: &[u32], batch: usize, seq: usize) -> Result<Vec<f32>> {
        let cfg = &self.cfg;
        if batch * seq != tokens.len() {
            return Err(Error::Dimension(format!(
                "token count {} != batch {batch} x seq {seq}",
                tokens.len()
            )));
        }
        if seq == 0 || seq > cfg.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {seq} out of range (max {})",
                cfg.max_seq_len
            )));
        }
        let h = cfg.hidden_size;
        let rows = batch * seq;
        let mut x = vec![0.0f32; rows * h];
        for (r, &t) in tokens.iter().enumerate() {
            let t = t as usize;
            if t >= cfg.vocab_size {
                return Err(Error::Input(format!(
                    "token id {t} out of range for vocab {}",
                    cfg.vocab_size
                )));
            }
            x[r * h..(r + 1) * h].copy_from_slice(&self.embedding[t * h..(t + 1) * h]);
        }
        let mut normed = vec![0.0f32; rows * h];
        for layer in &self.layers {
            for r in 0..rows {
                kernels::rmsnorm_row(
                    &mut normed[r * h..(r + 1) * h],
                    &x[r * h..(r + 1) * h],
                    &layer.attn_norm,
                    RMS_EPS,
                );
            }
            let mut q = layer.q.apply(&normed, rows);
            let mut k = layer.k.apply(&normed, rows);
            let v = layer.v.apply(&normed, rows);
            kernels::rope_rows_dim(&mut q, h, seq, cfg.n_heads, ROPE_BASE, false);
            kernels::rope_rows_dim(&mut k, h, seq, cfg.n_heads, ROPE_BASE, false);
            let (ctx, _) = kernels::attention_forward(&q, &k, &v, batch, seq, h, cfg.n_heads);
            let attn_out = layer.o.apply(&ctx, rows);
            for (xi, ai) in x.iter_mut().zip(&attn_out) {
                *xi += ai;
            }
            for r in 0..rows {
                kernels::rmsnorm_row(
                    &mut normed[r * h..(r + 1) * h],
                    &x[r * h..(r + 1) * h],
                    &layer.mlp_norm,
                    RMS_EPS,
                );
            }
            let gate = layer.gate.apply(&normed, rows);
            let up = layer.up.apply(&normed, rows);
            let mut act = kernels::silu(&gate);
            for (a, u) in act.iter_mut().zip(&up) {
                *a *= u;
            }
            let down = layer.down.apply(&act, rows);
            for (xi, di) in x.iter_mut().zip(&down) {
                *xi += di;
            }
        }
        for r in 0..rows {
            kernels::rmsnorm_row(
                &mut normed[r * h..(r + 1) * h],
                &x[r * h..(r + 1) * h],
                &self.final_norm,
                RMS_EPS,
            );
        }
        Ok(kernels::matmul_nn(
            &normed,
            &self.head,
            rows,
            h,
            cfg.vocab_size,
        ))
    }

    pub fn next_token_distribution(
        &self,
        tokens: &[u32],
        batch: usize,
        seq: usize,
    ) -> Result<DistributionBatch> {
        let mut logits = self.forward(tokens, batch, seq)?;
        for row in logits.chunks_mut(self.cfg.vocab_size) {
            kernels::softmax_row(row);
        }
        Ok(DistributionBatch::new(
            logits,
            batch,
            seq,
            self.cfg.vocab_size,
        ))
    }

    /// Autoregressive sampling demo. temperature == 0 is greedy argmax;
    /// otherwise logits are divided by the temperature and sampled.
    pub fn generate(
        &self,
        prompt: &[u32],
        max_new_tokens: usize,
        temperature: f32,
        rng: &mut Rng,
    ) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::Input("empty prompt".into()));
        }
        let mut ids = prompt.to_vec();
        for _ in 0..max_new_tokens {
            let ctx_start = ids.len().saturating_sub(self.cfg.max_seq_len);
            let ctx = &ids[ctx_start..];
            let logits = self.forward(ctx, 1, ctx.len())?;
            let last = &logits[(ctx.len() - 1) * self.cfg.vocab_size..];
            let next = if temperature <= 0.0 {
                argmax(last)
            } else {
                let mut scaled: Vec<f32> = last.iter().map(|&l| l / temperature).collect();
                kernels::softmax_row(&mut scaled);
                sample_index(&scaled, rng)
            };
            ids.push(next as u32);
        }
        Ok(ids)
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_index(probs: &[f32], rng: &mut Rng) -> usize {
    let r = rng.uniform(0.0, 1.0);
    let mut acc = 0.0f32;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if r < acc {
            return i;
        }
    }
    probs.len() - 1
}
