//! Dense f32 tensor arithmetic with reverse-mode automatic differentiation.
//!
//! A `Graph` is a tape: every op appends a node holding the forward value and
//! whatever it needs for the backward rule. `backward` walks the tape in
//! reverse and accumulates gradients into every `requires_grad` leaf.
//! Includes the straight-through-estimator sign node used by binarized
//! training (forward sign, backward identity).

pub mod kernels;

use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

struct Node {
    data: Vec<f32>,
    shape: Vec<usize>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        c: f32,
    },
    Silu {
        a: NodeId,
    },
    Sum {
        a: NodeId,
    },
    RmsNorm {
        x: NodeId,
        w: NodeId,
        inv: Vec<f32>,
    },
    SteSign {
        a: NodeId,
    },
    ColScaleShift {
        w: NodeId,
        alpha: NodeId,
        beta: NodeId,
    },
    Embed {
        table: NodeId,
        ids: Vec<u32>,
    },
    Rope {
        x: NodeId,
        seq: usize,
        n_heads: usize,
        base: f32,
    },
    CausalAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        n_heads: usize,
        probs: Vec<f32>,
    },
    SoftmaxRows {
        x: NodeId,
    },
    /// −(1/n)Σ teacher·log softmax(logits) over unmasked rows (soft labels).
    SoftCrossEntropy {
        logits: NodeId,
        teacher: Vec<f32>,
        mask: Vec<bool>,
        probs: Vec<f32>,
        n: usize,
    },
    /// Mean negative log-likelihood of integer targets over unmasked rows.
    NllLoss {
        logits: NodeId,
        targets: Vec<u32>,
        mask: Vec<bool>,
        probs: Vec<f32>,
        n: usize,
    },
    Reshape {
        x: NodeId,
    },
    Transpose2 {
        x: NodeId,
    },
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, data: Vec<f32>, shape: Vec<usize>, requires_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, data: Vec<f32>, shape: &[usize], requires_grad: bool) -> Result<NodeId> {
        if numel(shape) != data.len() {
            return Err(Error::Dimension(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(data, shape.to_vec(), requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, data: Vec<f32>, shape: &[usize]) -> Result<NodeId> {
        self.leaf(data, shape, false)
    }

    pub fn data(&self, id: NodeId) -> &[f32] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Value of a scalar node.
    pub fn value(&self, id: NodeId) -> f32 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Rows×cols view of a node that must be 2-d (or scalar-free reshape of one).
    fn dims2(&self, id: NodeId) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::Dimension(format!("expected 2-d tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, m) = self.dims2(a)?;
        let (m2, n) = self.dims2(b)?;
        if m != m2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: {r}x{m} vs {m2}x{n}"
            )));
        }
        let data = kernels::matmul_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, r, m, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(data, vec![r, n], rg, Op::Matmul { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let data: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(data, shape, rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let data: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(data, shape, rg, Op::Mul { a, b }))
    }

    fn same_shape(&self, a: NodeId, b: NodeId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Dimension(format!(
                "shape mismatch: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> Result<NodeId> {
        let data: Vec<f32> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let rg = self.requires(a);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(data, shape, rg, Op::Scale { a, c }))
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        let data = kernels::silu(&self.nodes[a.0].data);
        let rg = self.requires(a);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(data, shape, rg, Op::Silu { a }))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let mut acc = 0.0f64;
        for &v in &self.nodes[a.0].data {
            acc += v as f64;
        }
        let rg = self.requires(a);
        Ok(self.push(vec![acc as f32], vec![], rg, Op::Sum { a }))
    }

    /// Forward sign per Eq-style binarization: +1 for x > 0, −1 for x ≤ 0
    /// (so −0.0 and 0.0 both map to −1). Backward passes the upstream
    /// gradient through unchanged.
    pub fn ste_sign(&mut self, a: NodeId) -> Result<NodeId> {
        let data: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| if x > 0.0 { 1.0 } else { -1.0 })
            .collect();
        let rg = self.requires(a);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(data, shape, rg, Op::SteSign { a }))
    }

    /// W̃[i,j] = alpha[j]·w[i,j] + beta[j] (per-column scale and shift).
    pub fn col_scale_shift(&mut self, w: NodeId, alpha: NodeId, beta: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(w)?;
        if self.shape(alpha) != [n] || self.shape(beta) != [n] {
            return Err(Error::Dimension(format!(
                "scale/shift must have length {n}: alpha {:?}, beta {:?}",
                self.shape(alpha),
                self.shape(beta)
            )));
        }
        let mut data = vec![0.0f32; m * n];
        {
            let wd = &self.nodes[w.0].data;
            let al = &self.nodes[alpha.0].data;
            let be = &self.nodes[beta.0].data;
            for i in 0..m {
                for j in 0..n {
                    data[i * n + j] = al[j] * wd[i * n + j] + be[j];
                }
            }
        }
        let rg = self.requires(w) || self.requires(alpha) || self.requires(beta);
        Ok(self.push(data, vec![m, n], rg, Op::ColScaleShift { w, alpha, beta }))
    }

    /// Row-gather from an embedding table. ids index rows of `table`.
    pub fn embed(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let (v, h) = self.dims2(table)?;
        for &id in ids {
            if id as usize >= v {
                return Err(Error::Input(format!(
                    "token id {id} out of range for vocab {v}"
                )));
            }
        }
        let mut data = vec![0.0f32; ids.len() * h];
        for (r, &id) in ids.iter().enumerate() {
            data[r * h..(r + 1) * h]
                .copy_from_slice(&self.nodes[table.0].data[id as usize * h..(id as usize + 1) * h]);
        }
        let rg = self.requires(table);
        Ok(self.push(
            data,
            vec![ids.len(), h],
            rg,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn rope(&mut self, x: NodeId, seq: usize, n_heads: usize, base: f32) -> Result<NodeId> {
        let (rows, dim) = self.dims2(x)?;
        if rows % seq != 0 || dim % n_heads != 0 || (dim / n_heads) % 2 != 0 {
            return Err(Error::Dimension(format!(
                "rope: rows {rows} seq {seq} dim {dim} heads {n_heads}"
            )));
        }
        let mut data = self.nodes[x.0].data.clone();
        kernels::rope_rows_dim(&mut data, dim, seq, n_heads, base, false);
        let rg = self.requires(x);
        Ok(self.push(
            data,
            vec![rows, dim],
            rg,
            Op::Rope {
                x,
                seq,
                n_heads,
                base,
            },
        ))
    }

    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        n_heads: usize,
    ) -> Result<NodeId> {
        let (rows, dim) = self.dims2(q)?;
        self.same_shape(q, k)?;
        self.same_shape(q, v)?;
        if rows != batch * seq || dim % n_heads != 0 {
            return Err(Error::Dimension(format!(
                "attention: rows {rows} != batch {batch} x seq {seq} or dim {dim} not divisible by {n_heads}"
            )));
        }
        let (ctx, probs) = kernels::attention_forward(
            &self.nodes[q.0].data,
            &self.nodes[k.0].data,
            &self.nodes[v.0].data,
            batch,
            seq,
            dim,
            n_heads,
        );
        let rg = self.requires(q) || self.requires(k) || self.requires(v);
        Ok(self.push(
            ctx,
            vec![rows, dim],
            rg,
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                n_heads,
                probs,
            },
        ))
    }

    pub fn rmsnorm(&mut self, x: NodeId, w: NodeId, eps: f32) -> Result<NodeId> {
        let (rows, h) = self.dims2(x)?;
        if self.shape(w) != [h] {
            return Err(Error::Dimension(format!(
                "rmsnorm weight shape {:?} != [{h}]",
                self.shape(w)
            )));
        }
        let mut data = vec![0.0f32; rows * h];
        let mut inv = vec![0.0f32; rows];
        for r in 0..rows {
            inv[r] = kernels::rmsnorm_row(
                &mut data[r * h..(r + 1) * h],
                &self.nodes[x.0].data[r * h..(r + 1) * h],
                &self.nodes[w.0].data,
                eps,
            );
        }
        let rg = self.requires(x) || self.requires(w);
        Ok(self.push(data, vec![rows, h], rg, Op::RmsNorm { x, w, inv }))
    }

    /// Row-wise softmax over the trailing dimension, max-subtracted.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape.clone();
        let v = *shape.last().ok_or_else(|| {
            Error::Dimension("softmax_rows needs at least one dimension".into())
        })?;
        let mut data = self.nodes[x.0].data.clone();
        for row in data.chunks_mut(v) {
            kernels::softmax_row(row);
        }
        let rg = self.requires(x);
        Ok(self.push(data, shape, rg, Op::SoftmaxRows { x }))
    }

    /// Soft-label cross-entropy: −(1/n)·Σ_unmasked Σ_v teacher·log softmax(logits).
    /// Teacher rows are checked to sum to 1 within `norm_tol` on unmasked rows.
    pub fn soft_cross_entropy(
        &mut self,
        logits: NodeId,
        teacher: &[f32],
        mask: &[bool],
        norm_tol: f32,
    ) -> Result<NodeId> {
        let (rows, v) = self.dims2(logits)?;
        if teacher.len() != rows * v {
            return Err(Error::Dimension(format!(
                "teacher probs length {} != logits {}x{}",
                teacher.len(),
                rows,
                v
            )));
        }
        if mask.len() != rows {
            return Err(Error::Dimension(format!(
                "mask length {} != rows {rows}",
                mask.len()
            )));
        }
        let n = mask.iter().filter(|&&m| m).count();
        if n == 0 {
            return Err(Error::Contract("all positions masked in loss".into()));
        }
        let mut probs = vec![0.0f32; rows * v];
        let mut total = 0.0f64;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let row = &self.nodes[logits.0].data[r * v..(r + 1) * v];
            let trow = &teacher[r * v..(r + 1) * v];
            let mut tsum = 0.0f64;
            for &t in trow {
                if t < 0.0 {
                    return Err(Error::Input("teacher probability < 0".into()));
                }
                tsum += t as f64;
            }
            if (tsum - 1.0).abs() > norm_tol as f64 {
                return Err(Error::Input(format!(
                    "teacher row {r} sums to {tsum}, not normalized"
                )));
            }
            let lz = kernels::log_sum_exp(row);
            let prow = &mut probs[r * v..(r + 1) * v];
            let mut acc = 0.0f64;
            for j in 0..v {
                acc += trow[j] as f64 * (lz - row[j] as f64);
                prow[j] = ((row[j] as f64 - lz).exp()) as f32;
            }
            total += acc;
        }
        let loss = (total / n as f64) as f32;
        let rg = self.requires(logits);
        Ok(self.push(
            vec![loss],
            vec![],
            rg,
            Op::SoftCrossEntropy {
                logits,
                teacher: teacher.to_vec(),
                mask: mask.to_vec(),
                probs,
                n,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` over unmasked rows.
    pub fn nll_loss(&mut self, logits: NodeId, targets: &[u32], mask: &[bool]) -> Result<NodeId> {
        let (rows, v) = self.dims2(logits)?;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Dimension(format!(
                "targets/mask length {}/{} != rows {rows}",
                targets.len(),
                mask.len()
            )));
        }
        let n = mask.iter().filter(|&&m| m).count();
        if n == 0 {
            return Err(Error::Contract("all positions masked in loss".into()));
        }
        let mut probs = vec![0.0f32; rows * v];
        let mut total = 0.0f64;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            if targets[r] as usize >= v {
                return Err(Error::Input(format!(
                    "target id {} out of range for vocab {v}",
                    targets[r]
                )));
            }
            let row = &self.nodes[logits.0].data[r * v..(r + 1) * v];
            let lz = kernels::log_sum_exp(row);
            total += lz - row[targets[r] as usize] as f64;
            let prow = &mut probs[r * v..(r + 1) * v];
            for j in 0..v {
                prow[j] = ((row[j] as f64 - lz).exp()) as f32;
            }
        }
        let loss = (total / n as f64) as f32;
        let rg = self.requires(logits);
        Ok(self.push(
            vec![loss],
            vec![],
            rg,
            Op::NllLoss {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                n,
            },
        ))
    }

    pub fn reshape(&mut self, x: NodeId, new_shape: &[usize]) -> Result<NodeId> {
        if numel(new_shape) != self.nodes[x.0].data.len() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {:?} changes element count",
                self.nodes[x.0].shape, new_shape
            )));
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.requires(x);
        Ok(self.push(data, new_shape.to_vec(), rg, Op::Reshape { x }))
    }

    pub fn transpose2(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(x)?;
        let xd = &self.nodes[x.0].data;
        let mut data = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xd[i * c + j];
            }
        }
        let rg = self.requires(x);
        Ok(self.push(data, vec![c, r], rg, Op::Transpose2 { x }))
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut [f32] {
        // sized from the shape: a parent's data may be temporarily taken
        // during backprop (e.g. mul(x, x) aliases both operands)
        let len = numel(&self.nodes[id.0].shape);
        self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0f32; len])
    }

    /// Reverse pass from a scalar loss. Accumulates into existing grads.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        {
            let g = self.grad_buf(loss);
            g[0] += 1.0;
        }
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize) {
        // Take the node's grad temporarily to satisfy the borrow checker.
        let g = self.nodes[idx].grad.take().expect("grad present");
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (r, m) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.requires(a) {
                    let bd = if a == b {
                        self.nodes[b.0].data.clone()
                    } else {
                        std::mem::take(&mut self.nodes[b.0].data)
                    };
                    // da += g · bᵀ, materialized transpose keeps the axpy
                    // kernel on its fast path
                    let bt = kernels::transpose(&bd, m, n);
                    kernels::add_matmul_nn(self.grad_buf(a), &g, &bt, r, n, m);
                    if a != b {
                        self.nodes[b.0].data = bd;
                    }
                }
                if self.requires(b) {
                    let ad = std::mem::take(&mut self.nodes[a.0].data);
                    // db += aᵀ · g via the same transpose-then-stream trick
                    let at = kernels::transpose(&ad, r, m);
                    kernels::add_matmul_nn(self.grad_buf(b), &at, &g, m, r, n);
                    self.nodes[a.0].data = ad;
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    kernels::axpy(self.grad_buf(a), 1.0, &g);
                }
                if self.requires(b) {
                    kernels::axpy(self.grad_buf(b), 1.0, &g);
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if a == b {
                    if self.requires(a) {
                        let ad = std::mem::take(&mut self.nodes[a.0].data);
                        let ga = self.grad_buf(a);
                        for i in 0..g.len() {
                            ga[i] += 2.0 * g[i] * ad[i];
                        }
                        self.nodes[a.0].data = ad;
                    }
                } else {
                    if self.requires(a) {
                        let bd = std::mem::take(&mut self.nodes[b.0].data);
                        let ga = self.grad_buf(a);
                        for i in 0..g.len() {
                            ga[i] += g[i] * bd[i];
                        }
                        self.nodes[b.0].data = bd;
                    }
                    if self.requires(b) {
                        let ad = std::mem::take(&mut self.nodes[a.0].data);
                        let gb = self.grad_buf(b);
                        for i in 0..g.len() {
                            gb[i] += g[i] * ad[i];
                        }
                        self.nodes[a.0].data = ad;
                    }
                }
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                if self.requires(a) {
                    kernels::axpy(self.grad_buf(a), c, &g);
                }
            }
            Op::Silu { a } => {
                let a = *a;
                if self.requires(a) {
                    let ad = std::mem::take(&mut self.nodes[a.0].data);
                    let ga = self.grad_buf(a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * kernels::silu_grad(ad[i]);
                    }
                    self.nodes[a.0].data = ad;
                }
            }
            Op::Sum { a } => {
                let a = *a;
                if self.requires(a) {
                    let up = g[0];
                    for v in self.grad_buf(a).iter_mut() {
                        *v += up;
                    }
                }
            }
            Op::RmsNorm { x, w, .. } => {
                let (x, w) = (*x, *w);
                let inv = std::mem::take(match &mut self.nodes[idx].op {
                    Op::RmsNorm { inv, .. } => inv,
                    _ => unreachable!(),
                });
                let h = self.nodes[w.0].data.len();
                let rows = g.len() / h;
                let xd = std::mem::take(&mut self.nodes[x.0].data);
                let wd = std::mem::take(&mut self.nodes[w.0].data);
                let mut dx_full = vec![0.0f32; xd.len()];
                let mut dw_full = vec![0.0f32; h];
                for r in 0..rows {
                    kernels::rmsnorm_backward_row(
                        &mut dx_full[r * h..(r + 1) * h],
                        &mut dw_full,
                        &g[r * h..(r + 1) * h],
                        &xd[r * h..(r + 1) * h],
                        &wd,
                        inv[r],
                    );
                }
                self.nodes[x.0].data = xd;
                self.nodes[w.0].data = wd;
                if self.requires(x) {
                    kernels::axpy(self.grad_buf(x), 1.0, &dx_full);
                }
                if self.requires(w) {
                    kernels::axpy(self.grad_buf(w), 1.0, &dw_full);
                }
                match &mut self.nodes[idx].op {
                    Op::RmsNorm { inv: slot, .. } => *slot = inv,
                    _ => unreachable!(),
                }
            }
            Op::SteSign { a } => {
                let a = *a;
                if self.requires(a) {
                    // straight-through: copy the upstream gradient unchanged
                    kernels::axpy(self.grad_buf(a), 1.0, &g);
                }
            }
            Op::ColScaleShift { w, alpha, beta } => {
                let (w, alpha, beta) = (*w, *alpha, *beta);
                let (m, n) = (self.nodes[w.0].shape[0], self.nodes[w.0].shape[1]);
                let wd = std::mem::take(&mut self.nodes[w.0].data);
                let al = std::mem::take(&mut self.nodes[alpha.0].data);
                if self.requires(w) {
                    let gw = self.grad_buf(w);
                    for i in 0..m {
                        for j in 0..n {
                            gw[i * n + j] += al[j] * g[i * n + j];
                        }
                    }
                }
                if self.requires(alpha) {
                    let mut da = vec![0.0f64; n];
                    for i in 0..m {
                        for j in 0..n {
                            da[j] += g[i * n + j] as f64 * wd[i * n + j] as f64;
                        }
                    }
                    let ga = self.grad_buf(alpha);
                    for j in 0..n {
                        ga[j] += da[j] as f32;
                    }
                }
                if self.requires(beta) {
                    let mut db = vec![0.0f64; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j] as f64;
                        }
                    }
                    let gb = self.grad_buf(beta);
                    for j in 0..n {
                        gb[j] += db[j] as f32;
                    }
                }
                self.nodes[w.0].data = wd;
                self.nodes[alpha.0].data = al;
            }
            Op::Embed { table, ids: _ } => {
                let table = *table;
                let ids = std::mem::take(match &mut self.nodes[idx].op {
                    Op::Embed { ids, .. } => ids,
                    _ => unreachable!(),
                });
                if self.requires(table) {
                    let h = self.nodes[table.0].shape[1];
                    let gt = self.grad_buf(table);
                    for (r, &id) in ids.iter().enumerate() {
                        kernels::axpy(
                            &mut gt[id as usize * h..(id as usize + 1) * h],
                            1.0,
                            &g[r * h..(r + 1) * h],
                        );
                    }
                }
                match &mut self.nodes[idx].op {
                    Op::Embed { ids: slot, .. } => *slot = ids,
                    _ => unreachable!(),
                }
            }
            Op::Rope {
                x,
                seq,
                n_heads,
                base,
            } => {
                let (x, seq, n_heads, base) = (*x, *seq, *n_heads, *base);
                if self.requires(x) {
                    let dim = self.nodes[x.0].shape[1];
                    let mut dg = g.clone();
                    kernels::rope_rows_dim(&mut dg, dim, seq, n_heads, base, true);
                    kernels::axpy(self.grad_buf(x), 1.0, &dg);
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                n_heads,
                probs: _,
            } => {
                let (q, k, v, batch, seq, n_heads) = (*q, *k, *v, *batch, *seq, *n_heads);
                let probs = std::mem::take(match &mut self.nodes[idx].op {
                    Op::CausalAttention { probs, .. } => probs,
                    _ => unreachable!(),
                });
                let dim = self.nodes[q.0].shape[1];
                let qd = std::mem::take(&mut self.nodes[q.0].data);
                let kd = if k == q {
                    qd.clone()
                } else {
                    std::mem::take(&mut self.nodes[k.0].data)
                };
                let vd = if v == q {
                    qd.clone()
                } else if v == k {
                    kd.clone()
                } else {
                    std::mem::take(&mut self.nodes[v.0].data)
                };
                let mut dq = vec![0.0f32; qd.len()];
                let mut dk = vec![0.0f32; kd.len()];
                let mut dv = vec![0.0f32; vd.len()];
                kernels::attention_backward(
                    &mut dq, &mut dk, &mut dv, &g, &qd, &kd, &vd, &probs, batch, seq, dim, n_heads,
                );
                if v != q && v != k {
                    self.nodes[v.0].data = vd;
                }
                if k != q {
                    self.nodes[k.0].data = kd;
                }
                self.nodes[q.0].data = qd;
                if self.requires(q) {
                    kernels::axpy(self.grad_buf(q), 1.0, &dq);
                }
                if self.requires(k) {
                    kernels::axpy(self.grad_buf(k), 1.0, &dk);
                }
                if self.requires(v) {
                    kernels::axpy(self.grad_buf(v), 1.0, &dv);
                }
                match &mut self.nodes[idx].op {
                    Op::CausalAttention { probs: slot, .. } => *slot = probs,
                    _ => unreachable!(),
                }
            }
            Op::SoftmaxRows { x } => {
                let x = *x;
                if self.requires(x) {
                    let vdim = *self.nodes[idx].shape.last().unwrap();
                    let y = std::mem::take(&mut self.nodes[idx].data);
                    {
                        let gx = self.grad_buf(x);
                        for r in 0..y.len() / vdim {
                            let yr = &y[r * vdim..(r + 1) * vdim];
                            let gr = &g[r * vdim..(r + 1) * vdim];
                            let mut inner = 0.0f64;
                            for j in 0..vdim {
                                inner += yr[j] as f64 * gr[j] as f64;
                            }
                            let gxr = &mut gx[r * vdim..(r + 1) * vdim];
                            for j in 0..vdim {
                                gxr[j] += yr[j] * (gr[j] - inner as f32);
                            }
                        }
                    }
                    self.nodes[idx].data = y;
                }
            }
            Op::SoftCrossEntropy {
                logits,
                teacher: _,
                mask: _,
                probs: _,
                n,
            } => {
                let (logits, n) = (*logits, *n);
                if self.requires(logits) {
                    let up = g[0] / n as f32;
                    let (teacher, mask, probs) = match &mut self.nodes[idx].op {
                        Op::SoftCrossEntropy {
                            teacher,
                            mask,
                            probs,
                            ..
                        } => (
                            std::mem::take(teacher),
                            std::mem::take(mask),
                            std::mem::take(probs),
                        ),
                        _ => unreachable!(),
                    };
                    let v = self.nodes[logits.0].shape[1];
                    {
                        let gl = self.grad_buf(logits);
                        for (r, &keep) in mask.iter().enumerate() {
                            if !keep {
                                continue;
                            }
                            for j in 0..v {
                                gl[r * v + j] += up * (probs[r * v + j] - teacher[r * v + j]);
                            }
                        }
                    }
                    match &mut self.nodes[idx].op {
                        Op::SoftCrossEntropy {
                            teacher: t,
                            mask: m,
                            probs: p,
                            ..
                        } => {
                            *t = teacher;
                            *m = mask;
                            *p = probs;
                        }
                        _ => unreachable!(),
                    }
                }
            }
            Op::NllLoss {
                logits,
                targets: _,
                mask: _,
                probs: _,
                n,
            } => {
                let (logits, n) = (*logits, *n);
                if self.requires(logits) {
                    let up = g[0] / n as f32;
                    let (targets, mask, probs) = match &mut self.nodes[idx].op {
                        Op::NllLoss {
                            targets,
                            mask,
                            probs,
                            ..
                        } => (
                            std::mem::take(targets),
                            std::mem::take(mask),
                            std::mem::take(probs),
                        ),
                        _ => unreachable!(),
                    };
                    let v = self.nodes[logits.0].shape[1];
                    {
                        let gl = self.grad_buf(logits);
                        for (r, &keep) in mask.iter().enumerate() {
                            if !keep {
                                continue;
                            }
                            for j in 0..v {
                                let t = if targets[r] as usize == j { 1.0 } else { 0.0 };
                                gl[r * v + j] += up * (probs[r * v + j] - t);
                            }
                        }
                    }
                    match &mut self.nodes[idx].op {
                        Op::NllLoss {
                            targets: t,
                            mask: m,
                            probs: p,
                            ..
                        } => {
                            *t = targets;
                            *m = mask;
                            *p = probs;
                        }
                        _ => unreachable!(),
                    }
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                if self.requires(x) {
                    kernels::axpy(self.grad_buf(x), 1.0, &g);
                }
            }
            Op::Transpose2 { x } => {
                let x = *x;
                if self.requires(x) {
                    let (r, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    let gx = self.grad_buf(x);
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
        }
        // Leaves accumulate across backward calls; intermediate grads are
        // consumed once propagated so a second backward adds exactly one
        // more unit of gradient to every leaf.
        if matches!(self.nodes[idx].op, Op::Leaf) {
            self.nodes[idx].grad = Some(g);
        }
    }
}
