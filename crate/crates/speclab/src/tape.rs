//! Reverse-mode automatic differentiation over an operation tape.
//!
//! Nodes live in an arena in construction order, so reverse insertion order
//! is a valid reverse-topological traversal and gradients propagate
//! deterministically. The tape owns forward values and (after [`Tape::backward`])
//! gradients; handles are plain [`Var`] indices.
//!
//! Two fused ops carry hand-written backward rules: block-sparse streaming
//! attention (recompute-based, never materializing the logit matrix) and the
//! masked soft-label log-softmax loss (gradient written into the logits
//! buffer, which is repurposed as the gradient buffer).

use std::rc::Rc;

use crate::blockmask::BlockMask;
use crate::error::{Error, Result};
use crate::loss as loss_kernel;
use crate::meter::AllocCategory;
use crate::tensor::{self, Tensor};
use crate::attention as attn_kernel;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Silu(Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<f32>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    RowSums(Var),
    ScaleRows {
        x: Var,
        col: Var,
    },
    Rope {
        x: Var,
        positions: Rc<Vec<u32>>,
        base: f32,
    },
    Sum(Var),
    StreamAttn {
        q: Var,
        k: Var,
        v: Var,
        mask: Rc<BlockMask>,
        lse: Vec<f32>,
    },
    SoftLoss {
        z: Var,
        target: Rc<Tensor>,
        row_mask: Rc<Vec<bool>>,
        n_masked: usize,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Operation tape. One tape per training step; confined to a single thread.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const ACT: AllocCategory = AllocCategory::Activation;

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Register a tensor as a leaf. Gradients accumulate at grad-requiring
    /// leaves; everything else treats the value as a constant.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that never participates in gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Clone a parameter tensor onto the tape as a grad-requiring leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let copy = Tensor::from_vec(t.shape(), t.data().to_vec(), AllocCategory::Parameter);
        self.push(copy, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Scalar value of a 1-element node.
    pub fn scalar_value(&self, v: Var) -> f32 {
        self.nodes[v.0].value.data()[0]
    }

    // ── Recorded operations ──────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b), ACT)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = tensor::transpose(self.value(x), ACT)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Transpose(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::add(self.value(a), self.value(b), ACT)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::mul(self.value(a), self.value(b), ACT)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let value = tensor::scale(self.value(x), c, ACT);
        let rg = self.rg(x);
        self.push(value, rg, Op::Scale(x, c))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = tensor::silu(self.value(x), ACT);
        let rg = self.rg(x);
        self.push(value, rg, Op::Silu(x))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).shape().len().max(1);
        let value = tensor::softmax(self.value(x), rank - 1, ACT)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Softmax(x)))
    }

    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f32) -> Result<Var> {
        let (value, inv_rms) = tensor::rms_norm(self.value(x), self.value(w), eps, ACT)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, rg, Op::RmsNorm { x, w, inv_rms }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = tensor::concat_rows(&tensors, ACT)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = tensor::concat_cols(&tensors, ACT)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = tensor::slice_rows(self.value(x), start, end, ACT)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = tensor::slice_cols(self.value(x), start, end, ACT)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::SliceCols { x, start }))
    }

    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let value = tensor::embedding_lookup(self.value(table), ids, ACT)?;
        let rg = self.rg(table);
        Ok(self.push(
            value,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn row_sums(&mut self, x: Var) -> Result<Var> {
        let value = tensor::row_sums(self.value(x), ACT)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::RowSums(x)))
    }

    pub fn scale_rows(&mut self, x: Var, col: Var) -> Result<Var> {
        let value = tensor::scale_rows(self.value(x), self.value(col), ACT)?;
        let rg = self.rg(x) || self.rg(col);
        Ok(self.push(value, rg, Op::ScaleRows { x, col }))
    }

    pub fn rope(&mut self, x: Var, positions: Rc<Vec<u32>>, base: f32) -> Result<Var> {
        let value = tensor::rope(self.value(x), &positions, base, false, ACT)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Rope { x, positions, base }))
    }

    /// Full sum to a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = 0.0f64;
        for &v in self.value(x).data() {
            acc += f64::from(v);
        }
        let value = Tensor::scalar(acc as f32, ACT);
        let rg = self.rg(x);
        self.push(value, rg, Op::Sum(x))
    }

    /// Fused block-sparse streaming attention.
    pub fn stream_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Rc<BlockMask>,
    ) -> Result<Var> {
        let qs = self.value(q).shape().to_vec();
        let ks = self.value(k).shape().to_vec();
        let vs = self.value(v).shape().to_vec();
        if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
            return Err(Error::Dimension(format!(
                "stream_attention: q {qs:?} k {ks:?} v {vs:?}"
            )));
        }
        let p = mask.params();
        if qs[0] != p.q_len || ks[0] != p.kv_len() {
            return Err(Error::Dimension(format!(
                "stream_attention: mask geometry {}×{} vs tensors {}×{}",
                p.q_len,
                p.kv_len(),
                qs[0],
                ks[0]
            )));
        }
        let (out, lse) = attn_kernel::stream_forward_kernel(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            qs[1],
            vs[1],
            &mask,
        )?;
        let value = Tensor::from_vec(&[qs[0], vs[1]], out, ACT);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(value, rg, Op::StreamAttn { q, k, v, mask, lse }))
    }

    /// Masked soft-label log-softmax loss:
    /// `L = −Σ_masked Σ_v p·log_softmax(z) / n_masked`. Scalar node.
    pub fn soft_loss(
        &mut self,
        z: Var,
        target: Rc<Tensor>,
        row_mask: Rc<Vec<bool>>,
    ) -> Result<Var> {
        let zs = self.value(z).shape().to_vec();
        if zs.len() != 2 || target.shape() != zs.as_slice() {
            return Err(Error::Dimension(format!(
                "soft_loss: z {:?} vs target {:?}",
                zs,
                target.shape()
            )));
        }
        if row_mask.len() != zs[0] {
            return Err(Error::Dimension(format!(
                "soft_loss: {} mask rows for {} logit rows",
                row_mask.len(),
                zs[0]
            )));
        }
        let n_masked = row_mask.iter().filter(|&&m| m).count();
        if n_masked == 0 {
            return Err(Error::EmptyBatch("soft_loss: no masked rows".into()));
        }
        let l = loss_kernel::soft_loss_forward_kernel(
            self.value(z).data(),
            target.data(),
            zs[0],
            zs[1],
            &row_mask,
        );
        if !l.is_finite() {
            return Err(Error::Training(format!("soft_loss is not finite: {l}")));
        }
        let value = Tensor::scalar(l as f32, ACT);
        let rg = self.rg(z);
        Ok(self.push(
            value,
            rg,
            Op::SoftLoss {
                z,
                target,
                row_mask,
                n_masked,
            },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar root. Populates `grad` on every
    /// grad-requiring node reachable from the root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward: root has {} elements, expected scalar",
                self.value(root).numel()
            )));
        }
        if !self.rg(root) {
            return Err(Error::InvalidParams(
                "backward: root does not require grad".into(),
            ));
        }
        // Consumer counts let the loss op decide whether the logits buffer
        // can be repurposed as its gradient buffer.
        let mut consumers = vec![0u32; self.nodes.len()];
        for node in &self.nodes {
            for_each_parent(&node.op, |p| consumers[p.0] += 1);
        }
        self.nodes[root.0].grad = Some(Tensor::from_vec(&[1], vec![1.0], ACT));

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            let (head, tail) = self.nodes.split_at_mut(idx);
            let node = &mut tail[0];
            match &node.op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let g = node.grad.as_ref().unwrap();
                    if head[a.0].requires_grad {
                        let bt = tensor::transpose(&head[b.0].value, AllocCategory::Scratch)?;
                        let da = tensor::matmul(g, &bt, AllocCategory::Scratch)?;
                        accumulate(head, *a, da.data());
                    }
                    if head[b.0].requires_grad {
                        let at = tensor::transpose(&head[a.0].value, AllocCategory::Scratch)?;
                        let db = tensor::matmul(&at, g, AllocCategory::Scratch)?;
                        accumulate(head, *b, db.data());
                    }
                }
                Op::Transpose(x) => {
                    let g = node.grad.as_ref().unwrap();
                    let gt = tensor::transpose(g, AllocCategory::Scratch)?;
                    accumulate(head, *x, gt.data());
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    let g = node.grad.take().unwrap();
                    accumulate(head, a, g.data());
                    accumulate(head, b, g.data());
                    node.grad = Some(g);
                }
                Op::Mul(a, b) => {
                    let g = node.grad.as_ref().unwrap();
                    if head[a.0].requires_grad {
                        let da = tensor::mul(g, &head[b.0].value, AllocCategory::Scratch)?;
                        accumulate(head, *a, da.data());
                    }
                    if head[b.0].requires_grad {
                        let db = tensor::mul(g, &head[a.0].value, AllocCategory::Scratch)?;
                        accumulate(head, *b, db.data());
                    }
                }
                Op::Scale(x, c) => {
                    let g = node.grad.as_ref().unwrap();
                    let dx = tensor::scale(g, *c, AllocCategory::Scratch);
                    accumulate(head, *x, dx.data());
                }
                Op::Silu(x) => {
                    let g = node.grad.as_ref().unwrap();
                    let xv = &head[x.0].value;
                    let dx: Vec<f32> = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gv, &v)| {
                            let s = tensor::sigmoid(v);
                            gv * (s + v * s * (1.0 - s))
                        })
                        .collect();
                    accumulate(head, *x, &dx);
                }
                Op::Softmax(x) => {
                    let g = node.grad.as_ref().unwrap();
                    let y = &node.value;
                    let n = *y.shape().last().unwrap();
                    let rows = y.numel() / n;
                    let mut dx = vec![0.0f32; y.numel()];
                    for r in 0..rows {
                        let yr = &y.data()[r * n..(r + 1) * n];
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let mut dot = 0.0f64;
                        for (a, b) in gr.iter().zip(yr) {
                            dot += f64::from(*a) * f64::from(*b);
                        }
                        for ((d, &yv), &gv) in
                            dx[r * n..(r + 1) * n].iter_mut().zip(yr).zip(gr)
                        {
                            *d = ((f64::from(gv) - dot) * f64::from(yv)) as f32;
                        }
                    }
                    accumulate(head, *x, &dx);
                }
                Op::RmsNorm { x, w, inv_rms } => {
                    let g = node.grad.as_ref().unwrap();
                    let xv = &head[x.0].value;
                    let wv = &head[w.0].value;
                    let (m, n) = (xv.shape()[0], xv.shape()[1]);
                    let mut dx = vec![0.0f32; m * n];
                    let mut dw = vec![0.0f32; n];
                    for r in 0..m {
                        let inv = f64::from(inv_rms[r]);
                        let xr = &xv.data()[r * n..(r + 1) * n];
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let mut dot = 0.0f64;
                        for ((&gv, &wv_), &xv_) in gr.iter().zip(wv.data()).zip(xr) {
                            dot += f64::from(gv) * f64::from(wv_) * f64::from(xv_);
                        }
                        let coeff = inv * inv * inv * dot / n as f64;
                        for (j, ((d, &gv), &xv_)) in dx[r * n..(r + 1) * n]
                            .iter_mut()
                            .zip(gr)
                            .zip(xr)
                            .enumerate()
                        {
                            let wv_ = f64::from(wv.data()[j]);
                            *d = (f64::from(gv) * wv_ * inv - coeff * f64::from(xv_)) as f32;
                            dw[j] += (f64::from(gv) * f64::from(xv_) * inv) as f32;
                        }
                    }
                    accumulate(head, *x, &dx);
                    accumulate(head, *w, &dw);
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let g = node.grad.as_ref().unwrap();
                    let w = g.cols();
                    let mut row = 0;
                    for p in parts {
                        let rows = head[p.0].value.rows();
                        let chunk = &g.data()[row * w..(row + rows) * w];
                        accumulate(head, p, chunk);
                        row += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let g = node.grad.as_ref().unwrap();
                    let total_w = g.cols();
                    let rows = g.rows();
                    let mut col = 0;
                    let gdata = g.data().to_vec();
                    for p in parts {
                        let w = head[p.0].value.cols();
                        let mut chunk = vec![0.0f32; rows * w];
                        for r in 0..rows {
                            chunk[r * w..(r + 1) * w].copy_from_slice(
                                &gdata[r * total_w + col..r * total_w + col + w],
                            );
                        }
                        accumulate(head, p, &chunk);
                        col += w;
                    }
                }
                Op::SliceRows { x, start } => {
                    let g = node.grad.as_ref().unwrap();
                    let xv = &head[x.0].value;
                    let w = xv.cols();
                    let mut dx = vec![0.0f32; xv.numel()];
                    dx[start * w..start * w + g.numel()].copy_from_slice(g.data());
                    accumulate(head, *x, &dx);
                }
                Op::SliceCols { x, start } => {
                    let g = node.grad.as_ref().unwrap();
                    let xv = &head[x.0].value;
                    let (m, n) = (xv.shape()[0], xv.shape()[1]);
                    let w = g.cols();
                    let mut dx = vec![0.0f32; m * n];
                    for r in 0..m {
                        dx[r * n + start..r * n + start + w]
                            .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                    accumulate(head, *x, &dx);
                }
                Op::Embedding { table, ids } => {
                    let g = node.grad.as_ref().unwrap();
                    let tv = &head[table.0].value;
                    let d = tv.shape()[1];
                    let mut dt = vec![0.0f32; tv.numel()];
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                        for (a, &b) in dst.iter_mut().zip(&g.data()[row * d..(row + 1) * d]) {
                            *a += b;
                        }
                    }
                    accumulate(head, *table, &dt);
                }
                Op::RowSums(x) => {
                    let g = node.grad.as_ref().unwrap();
                    let xv = &head[x.0].value;
                    let (m, n) = (xv.shape()[0], xv.shape()[1]);
                    let mut dx = vec![0.0f32; m * n];
                    for r in 0..m {
                        let gv = g.data()[r];
                        for d in &mut dx[r * n..(r + 1) * n] {
                            *d = gv;
                        }
                    }
                    accumulate(head, *x, &dx);
                }
                Op::ScaleRows { x, col } => {
                    let g = node.grad.as_ref().unwrap();
                    let xv = &head[x.0].value;
                    let cv = &head[col.0].value;
                    let (m, n) = (xv.shape()[0], xv.shape()[1]);
                    let mut dx = Vec::new();
                    if head[x.0].requires_grad {
                        dx = vec![0.0f32; m * n];
                        for r in 0..m {
                            let c = cv.data()[r];
                            for (d, &gv) in dx[r * n..(r + 1) * n]
                                .iter_mut()
                                .zip(&g.data()[r * n..(r + 1) * n])
                            {
                                *d = gv * c;
                            }
                        }
                    }
                    let mut dc = Vec::new();
                    if head[col.0].requires_grad {
                        dc = vec![0.0f32; m];
                        for r in 0..m {
                            let mut acc = 0.0f64;
                            for (&gv, &xv_) in g.data()[r * n..(r + 1) * n]
                                .iter()
                                .zip(&xv.data()[r * n..(r + 1) * n])
                            {
                                acc += f64::from(gv) * f64::from(xv_);
                            }
                            dc[r] = acc as f32;
                        }
                    }
                    if !dx.is_empty() {
                        accumulate(head, *x, &dx);
                    }
                    if !dc.is_empty() {
                        accumulate(head, *col, &dc);
                    }
                }
                Op::Rope { x, positions, base } => {
                    let g = node.grad.as_ref().unwrap();
                    let dx = tensor::rope(g, positions, *base, true, AllocCategory::Scratch)?;
                    accumulate(head, *x, dx.data());
                }
                Op::Sum(x) => {
                    let g = node.grad.as_ref().unwrap().data()[0];
                    let n = head[x.0].value.numel();
                    let dx = vec![g; n];
                    accumulate(head, *x, &dx);
                }
                Op::StreamAttn { q, k, v, mask, lse } => {
                    let g = node.grad.as_ref().unwrap();
                    let qv = &head[q.0].value;
                    let kv = &head[k.0].value;
                    let vv = &head[v.0].value;
                    let dk_dim = qv.shape()[1];
                    let dv_dim = vv.shape()[1];
                    let mut dq = vec![0.0f32; qv.numel()];
                    let mut dk = vec![0.0f32; kv.numel()];
                    let mut dv = vec![0.0f32; vv.numel()];
                    attn_kernel::stream_backward_kernel(
                        qv.data(),
                        kv.data(),
                        vv.data(),
                        node.value.data(),
                        lse,
                        g.data(),
                        dk_dim,
                        dv_dim,
                        mask,
                        &mut dq,
                        &mut dk,
                        &mut dv,
                    );
                    accumulate(head, *q, &dq);
                    accumulate(head, *k, &dk);
                    accumulate(head, *v, &dv);
                }
                Op::SoftLoss {
                    z,
                    target,
                    row_mask,
                    n_masked,
                } => {
                    let upstream = node.grad.as_ref().unwrap().data()[0];
                    let g_row = upstream / *n_masked as f32;
                    let znode = &mut head[z.0];
                    let (rows, cols) = (znode.value.shape()[0], znode.value.shape()[1]);
                    // Alg.-3 path: overwrite the logits buffer with the
                    // gradient, then move it into the grad slot when this
                    // loss is the sole consumer of z.
                    loss_kernel::soft_loss_backward_kernel_inplace(
                        znode.value.data_mut(),
                        target.data(),
                        rows,
                        cols,
                        row_mask,
                        g_row,
                    );
                    let sole_consumer = consumers[z.0] == 1;
                    if sole_consumer && znode.grad.is_none() {
                        let shape = znode.value.shape().to_vec();
                        let buf = std::mem::replace(
                            &mut znode.value,
                            Tensor::zeros(&[0], AllocCategory::Activation),
                        );
                        znode.grad = Some(Tensor::from_vec(&shape, buf.into_raw(), ACT));
                    } else {
                        let contrib = znode.value.data().to_vec();
                        accumulate(head, *z, &contrib);
                    }
                }
            }
        }
        Ok(())
    }
}

fn for_each_parent(op: &Op, mut f: impl FnMut(Var)) {
    match op {
        Op::Leaf => {}
        Op::Matmul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => {
            f(*a);
            f(*b);
        }
        Op::Transpose(x)
        | Op::Scale(x, _)
        | Op::Silu(x)
        | Op::Softmax(x)
        | Op::RowSums(x)
        | Op::Sum(x) => f(*x),
        Op::RmsNorm { x, w, .. } => {
            f(*x);
            f(*w);
        }
        Op::ConcatRows(parts) | Op::ConcatCols(parts) => {
            for p in parts {
                f(*p);
            }
        }
        Op::SliceRows { x, .. } | Op::SliceCols { x, .. } | Op::Rope { x, .. } => f(*x),
        Op::Embedding { table, .. } => f(*table),
        Op::ScaleRows { x, col } => {
            f(*x);
            f(*col);
        }
        Op::StreamAttn { q, k, v, .. } => {
            f(*q);
            f(*k);
            f(*v);
        }
        Op::SoftLoss { z, .. } => f(*z),
    }
}

/// Add a contribution into a node's grad buffer, allocating it on first use.
fn accumulate(nodes: &mut [Node], v: Var, contrib: &[f32]) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    match &mut node.grad {
        Some(g) => {
            for (a, &b) in g.data_mut().iter_mut().zip(contrib) {
                *a += b;
            }
        }
        None => {
            let shape = node.value.shape().to_vec();
            node.grad = Some(Tensor::from_vec(&shape, contrib.to_vec(), ACT));
        }
    }
}

// ─── Finite-difference oracle ────────────────────────────────────────────────

/// Central-difference gradient of `f` at `x`. The oracle re-evaluates the
/// forward path only; it never touches the backward machinery it checks.
pub mod gradcheck {
    /// Central differences with step `h` per coordinate.
    pub fn central_diff<F: Fn(&[f32]) -> f64>(f: F, x: &[f32], h: f64) -> Vec<f64> {
        let mut grad = Vec::with_capacity(x.len());
        let mut buf = x.to_vec();
        for i in 0..x.len() {
            let orig = buf[i];
            buf[i] = (f64::from(orig) + h) as f32;
            let up = f(&buf);
            buf[i] = (f64::from(orig) - h) as f32;
            let down = f(&buf);
            buf[i] = orig;
            grad.push((up - down) / (2.0 * h));
        }
        grad
    }

    /// Compare an autodiff gradient against a finite-difference one:
    /// each component must satisfy `|a − b| ≤ rtol·max(|a|,|b|) + atol`.
    /// The absolute term absorbs the 32-bit storage noise central
    /// differences pick up on near-zero components. Returns the worst
    /// violation (≤ 0 means every component passed).
    pub fn max_violation(ad: &[f32], fd: &[f64], rtol: f64, atol: f64) -> f64 {
        assert_eq!(ad.len(), fd.len());
        let mut worst = f64::NEG_INFINITY;
        for (&a, &b) in ad.iter().zip(fd) {
            let a = f64::from(a);
            let v = (a - b).abs() - rtol * a.abs().max(b.abs()) - atol;
            if v > worst {
                worst = v;
            }
        }
        worst
    }

    /// `max_violation` with the check folded in, for use in asserts.
    pub fn close(ad: &[f32], fd: &[f64], rtol: f64, atol: f64) -> bool {
        max_violation(ad, fd, rtol, atol) <= 0.0
    }
}
