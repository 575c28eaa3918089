//! Three interoperable attention implementations.
//!
//! * [`dense_masked_attention`] — reference oracle; materializes the full
//!   logit matrix (disallowed entries at −1e30) and row-softmaxes it.
//! * [`streaming_attention`] — block-sparse online-softmax implementation
//!   driven by a [`BlockMask`]; skipped blocks are never touched and the full
//!   logit matrix is never materialized.
//! * [`ttt_attention_step`] — the step-wise cached form used by the draft
//!   decoder during multi-step unrolling: prefix logits plus one diagonal
//!   column per cached step.
//!
//! All routes agree within 1e-5 absolute; the streaming route's working
//! memory is independent of the query-length × key-length product.

use std::rc::Rc;

use crate::blockmask::{expand_dense_bool, BlockKind, BlockMask};
use crate::error::{Error, Result};
use crate::meter::{AllocCategory, ScratchGuard};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

const NEG_INF_FILL: f32 = -1e30;

// ─── Dense reference ─────────────────────────────────────────────────────────

/// Masked attention oracle: softmax(q·kᵀ/√d_k + mask)·v with the logit matrix
/// held in full as scratch. `mask` is row-major `[Lq × Lkv]`, true = allowed.
pub fn dense_masked_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &[bool],
) -> Result<Tensor> {
    let (lq, dk) = dims2(q, "q")?;
    let (lkv, dk2) = dims2(k, "k")?;
    let (lkv2, _dv) = dims2(v, "v")?;
    if dk != dk2 || lkv != lkv2 {
        return Err(Error::Dimension(format!(
            "dense_masked_attention: q {:?} k {:?} v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if mask.len() != lq * lkv {
        return Err(Error::Dimension(format!(
            "dense_masked_attention: mask has {} cells for {lq}×{lkv}",
            mask.len()
        )));
    }
    for r in 0..lq {
        if !mask[r * lkv..(r + 1) * lkv].iter().any(|&m| m) {
            return Err(Error::DegenerateRow(format!(
                "query row {r} has no allowed key"
            )));
        }
    }
    let scale = 1.0 / (dk as f64).sqrt();

    let mut logits = Tensor::zeros(&[lq, lkv], AllocCategory::Scratch);
    for r in 0..lq {
        let qrow = q.row(r);
        let lrow = logits.row_mut(r);
        for c in 0..lkv {
            if mask[r * lkv + c] {
                let mut acc = 0.0f64;
                for (a, b) in qrow.iter().zip(k.row(c)) {
                    acc += f64::from(*a) * f64::from(*b);
                }
                lrow[c] = (acc * scale) as f32;
            } else {
                lrow[c] = NEG_INF_FILL;
            }
        }
    }
    let probs = tensor::softmax(&logits, 1, AllocCategory::Scratch)?;
    tensor::matmul(&probs, v, AllocCategory::Activation)
}

// ─── Streaming kernel ────────────────────────────────────────────────────────

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "{what}: expected rank 2, got {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Visit the non-skipped key blocks of one query-block row in ascending
/// order, tagging each full or partial.
fn merged_blocks<'m>(
    mask: &'m BlockMask,
    qb: usize,
) -> impl Iterator<Item = (usize, BlockKind)> + 'm {
    let row = &mask.rows()[qb];
    let mut fi = 0;
    let mut pi = 0;
    std::iter::from_fn(move || {
        match (row.full.get(fi), row.partial.get(pi)) {
            (Some(&f), Some(&p)) if f < p => {
                fi += 1;
                Some((f, BlockKind::Full))
            }
            (Some(_), Some(&p)) => {
                pi += 1;
                Some((p, BlockKind::Partial))
            }
            (Some(&f), None) => {
                fi += 1;
                Some((f, BlockKind::Full))
            }
            (None, Some(&p)) => {
                pi += 1;
                Some((p, BlockKind::Partial))
            }
            (None, None) => None,
        }
    })
}

/// Online-softmax forward. Returns the output rows and the per-row
/// log-sum-exp needed by the backward pass.
pub(crate) fn stream_forward_kernel(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    dk: usize,
    dv: usize,
    mask: &BlockMask,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let p = *mask.params();
    let lq = p.q_len;
    let b = p.block;
    let scale = 1.0 / (dk as f64).sqrt();

    let mut out = vec![0.0f32; lq * dv];
    let mut lse = vec![0.0f32; lq];

    // Per-block working set: running max/denominator and an f64 accumulator.
    let _g = ScratchGuard::new(b * 8 * 2 + b * dv * 8 + b * b * 8);
    let mut m_run = vec![f64::NEG_INFINITY; b];
    let mut l_run = vec![0.0f64; b];
    let mut acc = vec![0.0f64; b * dv];
    let mut tile = vec![0.0f64; b * b];

    for qb in 0..mask.n_q_blocks() {
        m_run.fill(f64::NEG_INFINITY);
        l_run.fill(0.0);
        acc.fill(0.0);
        for (kb, kind) in merged_blocks(mask, qb) {
            for ri in 0..b {
                let qi = qb * b + ri;
                let qrow = &q[qi * dk..(qi + 1) * dk];
                // Tile logits for this query row; NAN marks disallowed.
                let mut tile_max = f64::NEG_INFINITY;
                let mut any = false;
                for ci in 0..b {
                    let ki = kb * b + ci;
                    let allowed = kind == BlockKind::Full || mask.allowed(qi, ki);
                    if !allowed {
                        tile[ri * b + ci] = f64::NAN;
                        continue;
                    }
                    any = true;
                    let krow = &k[ki * dk..(ki + 1) * dk];
                    let mut dot = 0.0f64;
                    for (a, bb) in qrow.iter().zip(krow) {
                        dot += f64::from(*a) * f64::from(*bb);
                    }
                    let s = dot * scale;
                    tile[ri * b + ci] = s;
                    if s > tile_max {
                        tile_max = s;
                    }
                }
                if !any {
                    continue;
                }
                let new_m = m_run[ri].max(tile_max);
                if m_run[ri].is_finite() && m_run[ri] < new_m {
                    let rescale = (m_run[ri] - new_m).exp();
                    l_run[ri] *= rescale;
                    for a in &mut acc[ri * dv..(ri + 1) * dv] {
                        *a *= rescale;
                    }
                }
                m_run[ri] = new_m;
                for ci in 0..b {
                    let s = tile[ri * b + ci];
                    if s.is_nan() {
                        continue;
                    }
                    let w = (s - new_m).exp();
                    l_run[ri] += w;
                    let ki = kb * b + ci;
                    let vrow = &v[ki * dv..(ki + 1) * dv];
                    for (a, &vv) in acc[ri * dv..(ri + 1) * dv].iter_mut().zip(vrow) {
                        *a += w * f64::from(vv);
                    }
                }
            }
        }
        for ri in 0..b {
            let qi = qb * b + ri;
            if l_run[ri] == 0.0 {
                return Err(Error::DegenerateRow(format!(
                    "query row {qi}: every key block skipped"
                )));
            }
            let inv = 1.0 / l_run[ri];
            for (o, &a) in out[qi * dv..(qi + 1) * dv].iter_mut().zip(&acc[ri * dv..(ri + 1) * dv]) {
                *o = (a * inv) as f32;
            }
            lse[qi] = (m_run[ri] + l_run[ri].ln()) as f32;
        }
    }
    Ok((out, lse))
}

/// Recompute-based backward for the streaming kernel. Adds contributions
/// into `dq`, `dk_out`, `dv_out` (all f32, same shapes as q/k/v).
#[allow(clippy::too_many_arguments)]
pub(crate) fn stream_backward_kernel(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    out: &[f32],
    lse: &[f32],
    dout: &[f32],
    dk_dim: usize,
    dv_dim: usize,
    mask: &BlockMask,
    dq: &mut [f32],
    dk_out: &mut [f32],
    dv_out: &mut [f32],
) {
    let p = *mask.params();
    let lq = p.q_len;
    let lkv = p.kv_len();
    let b = p.block;
    let scale = 1.0 / (dk_dim as f64).sqrt();

    let _g = ScratchGuard::new(lq * 8 + (lq * dk_dim + lkv * dk_dim + lkv * dv_dim) * 8);
    // D_r = Σ_c dout·out, per row.
    let mut d_row = vec![0.0f64; lq];
    for r in 0..lq {
        let mut acc = 0.0f64;
        for (a, o) in dout[r * dv_dim..(r + 1) * dv_dim]
            .iter()
            .zip(&out[r * dv_dim..(r + 1) * dv_dim])
        {
            acc += f64::from(*a) * f64::from(*o);
        }
        d_row[r] = acc;
    }
    let mut dq_acc = vec![0.0f64; lq * dk_dim];
    let mut dk_acc = vec![0.0f64; lkv * dk_dim];
    let mut dv_acc = vec![0.0f64; lkv * dv_dim];

    for qb in 0..mask.n_q_blocks() {
        for (kb, kind) in merged_blocks(mask, qb) {
            for ri in 0..b {
                let qi = qb * b + ri;
                let qrow = &q[qi * dk_dim..(qi + 1) * dk_dim];
                let dorow = &dout[qi * dv_dim..(qi + 1) * dv_dim];
                for ci in 0..b {
                    let ki = kb * b + ci;
                    if kind != BlockKind::Full && !mask.allowed(qi, ki) {
                        continue;
                    }
                    let krow = &k[ki * dk_dim..(ki + 1) * dk_dim];
                    let vrow = &v[ki * dv_dim..(ki + 1) * dv_dim];
                    let mut dot = 0.0f64;
                    for (a, bb) in qrow.iter().zip(krow) {
                        dot += f64::from(*a) * f64::from(*bb);
                    }
                    let prob = (dot * scale - f64::from(lse[qi])).exp();
                    // dV
                    for (dvk, &g) in dv_acc[ki * dv_dim..(ki + 1) * dv_dim]
                        .iter_mut()
                        .zip(dorow)
                    {
                        *dvk += prob * f64::from(g);
                    }
                    // dP then dS
                    let mut dp = 0.0f64;
                    for (&g, &vv) in dorow.iter().zip(vrow) {
                        dp += f64::from(g) * f64::from(vv);
                    }
                    let ds = prob * (dp - d_row[qi]) * scale;
                    for (dqj, &kj) in dq_acc[qi * dk_dim..(qi + 1) * dk_dim]
                        .iter_mut()
                        .zip(krow)
                    {
                        *dqj += ds * f64::from(kj);
                    }
                    for (dkj, &qj) in dk_acc[ki * dk_dim..(ki + 1) * dk_dim]
                        .iter_mut()
                        .zip(qrow)
                    {
                        *dkj += ds * f64::from(qj);
                    }
                }
            }
        }
    }
    for (o, &a) in dq.iter_mut().zip(&dq_acc) {
        *o += a as f32;
    }
    for (o, &a) in dk_out.iter_mut().zip(&dk_acc) {
        *o += a as f32;
    }
    for (o, &a) in dv_out.iter_mut().zip(&dv_acc) {
        *o += a as f32;
    }
}

/// Block-sparse attention over plain tensors. Never materializes the full
/// logit matrix; key blocks the mask skips are never read.
pub fn streaming_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &BlockMask) -> Result<Tensor> {
    let (lq, dk) = dims2(q, "q")?;
    let (lkv, dk2) = dims2(k, "k")?;
    let (lkv2, dv) = dims2(v, "v")?;
    if dk != dk2 || lkv != lkv2 {
        return Err(Error::Dimension(format!(
            "streaming_attention: q {:?} k {:?} v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let p = mask.params();
    if lq != p.q_len || lkv != p.kv_len() {
        return Err(Error::Dimension(format!(
            "streaming_attention: mask geometry {}×{} vs tensors {lq}×{lkv}",
            p.q_len,
            p.kv_len()
        )));
    }
    let (out, _lse) = stream_forward_kernel(q.data(), k.data(), v.data(), dk, dv, mask)?;
    Ok(Tensor::from_vec(&[lq, dv], out, AllocCategory::Activation))
}

// ─── Graph-recorded routes ───────────────────────────────────────────────────

/// Dense masked attention recorded on the tape from primitive ops; gradient
/// support comes from the primitives' rules. The oracle route for gradients.
pub fn dense_attention_graph(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: &[bool],
) -> Result<Var> {
    let (lq, dk) = dims2(tape.value(q), "q")?;
    let lkv = tape.value(k).shape()[0];
    if mask.len() != lq * lkv {
        return Err(Error::Dimension(format!(
            "dense_attention_graph: mask has {} cells for {lq}×{lkv}",
            mask.len()
        )));
    }
    for r in 0..lq {
        if !mask[r * lkv..(r + 1) * lkv].iter().any(|&m| m) {
            return Err(Error::DegenerateRow(format!(
                "query row {r} has no allowed key"
            )));
        }
    }
    let mask_fill: Vec<f32> = mask
        .iter()
        .map(|&m| if m { 0.0 } else { NEG_INF_FILL })
        .collect();
    let fill = tape.constant(Tensor::from_vec(
        &[lq, lkv],
        mask_fill,
        AllocCategory::Scratch,
    ));
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    let s = tape.scale(s, 1.0 / (dk as f32).sqrt());
    let s = tape.add(s, fill)?;
    let a = tape.softmax(s)?;
    tape.matmul(a, v)
}

/// Streaming attention as a single fused tape op (forward above, recompute
/// backward).
pub fn streaming_attention_graph(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Rc<BlockMask>,
) -> Result<Var> {
    tape.stream_attention(q, k, v, mask)
}

// ─── Step-wise cached attention ──────────────────────────────────────────────

/// Which implementation backs a cached attention step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnRoute {
    /// Prefix logits + per-step diagonal columns, from primitive ops.
    StepWise,
    /// Concatenated KV through the fused streaming op.
    Streaming,
    /// Concatenated KV through the dense composite (oracle).
    Dense,
}

/// Per-step KV cache for multi-step unrolling. The first step's keys/values
/// become the prefix (the training-sequence cache); later steps append their
/// own keys/values before attending, so step `j` sees the prefix causally
/// plus one diagonal entry per step up to and including itself.
#[derive(Debug)]
pub struct TTTState {
    prefix_k: Option<Var>,
    prefix_v: Option<Var>,
    step_k: Vec<Var>,
    step_v: Vec<Var>,
    d_k: usize,
}

impl TTTState {
    pub fn new(d_k: usize) -> TTTState {
        TTTState {
            prefix_k: None,
            prefix_v: None,
            step_k: Vec::new(),
            step_v: Vec::new(),
            d_k,
        }
    }

    /// Steps completed so far; also the required `mask.step` of the next call.
    pub fn completed_steps(&self) -> usize {
        usize::from(self.prefix_k.is_some()) + self.step_k.len()
    }

    pub fn d_k(&self) -> usize {
        self.d_k
    }

    pub fn prefix(&self) -> Option<(Var, Var)> {
        self.prefix_k.zip(self.prefix_v)
    }

    pub fn steps(&self) -> (&[Var], &[Var]) {
        (&self.step_k, &self.step_v)
    }
}

/// One attention step of the unrolled draft. Appends `new_k`/`new_v` to the
/// state (as prefix on the first call, as a step entry afterwards) and
/// attends `q` over everything the step's mask allows.
pub fn ttt_attention_step(
    tape: &mut Tape,
    state: &mut TTTState,
    q: Var,
    new_k: Var,
    new_v: Var,
    mask: &Rc<BlockMask>,
    route: AttnRoute,
) -> Result<Var> {
    if mask.step() != state.completed_steps() {
        return Err(Error::Training(format!(
            "mask/state desync: mask.step {} but state has {} completed steps",
            mask.step(),
            state.completed_steps()
        )));
    }
    let (t_pad, dk) = dims2(tape.value(q), "q")?;
    if dk != state.d_k {
        return Err(Error::Dimension(format!(
            "ttt_attention_step: q width {dk} != state d_k {}",
            state.d_k
        )));
    }
    let p = mask.params();
    if p.q_len != t_pad {
        return Err(Error::Dimension(format!(
            "ttt_attention_step: mask q_len {} vs {t_pad} rows",
            p.q_len
        )));
    }

    if state.prefix_k.is_none() {
        state.prefix_k = Some(new_k);
        state.prefix_v = Some(new_v);
    } else {
        state.step_k.push(new_k);
        state.step_v.push(new_v);
    }
    let prefix_k = state.prefix_k.unwrap();
    let prefix_v = state.prefix_v.unwrap();

    match route {
        AttnRoute::StepWise => {
            step_wise_attention(tape, state, q, prefix_k, prefix_v, mask)
        }
        AttnRoute::Streaming => {
            let mut ks: Vec<Var> = vec![prefix_k];
            ks.extend_from_slice(&state.step_k);
            let mut vs: Vec<Var> = vec![prefix_v];
            vs.extend_from_slice(&state.step_v);
            let k_cat = tape.concat_rows(&ks)?;
            let v_cat = tape.concat_rows(&vs)?;
            tape.stream_attention(q, k_cat, v_cat, Rc::clone(mask))
        }
        AttnRoute::Dense => {
            let mut ks: Vec<Var> = vec![prefix_k];
            ks.extend_from_slice(&state.step_k);
            let mut vs: Vec<Var> = vec![prefix_v];
            vs.extend_from_slice(&state.step_v);
            let k_cat = tape.concat_rows(&ks)?;
            let v_cat = tape.concat_rows(&vs)?;
            let dense = expand_dense_bool(mask);
            dense_attention_graph(tape, q, k_cat, v_cat, &dense)
        }
    }
}

/// Prefix logits plus diagonal columns: softmax over `[S_prefix | d_1 … d_j]`
/// where `d_s[t] = q_t·k_s[t]/√d_k`, then a weighted sum of prefix values and
/// per-step value rows.
fn step_wise_attention(
    tape: &mut Tape,
    state: &TTTState,
    q: Var,
    prefix_k: Var,
    prefix_v: Var,
    mask: &Rc<BlockMask>,
) -> Result<Var> {
    let p = *mask.params();
    let t_pad = p.q_len;
    let dk = state.d_k;
    let scale = 1.0 / (dk as f32).sqrt();

    // Causal-with-padding fill for the prefix block.
    let mut fill = vec![0.0f32; t_pad * t_pad];
    for qi in 0..t_pad {
        for kv in 0..t_pad {
            if !(qi >= kv && kv < p.seq_len) {
                fill[qi * t_pad + kv] = NEG_INF_FILL;
            }
        }
    }
    let fill = tape.constant(Tensor::from_vec(
        &[t_pad, t_pad],
        fill,
        AllocCategory::Scratch,
    ));
    let kt = tape.transpose(prefix_k)?;
    let s = tape.matmul(q, kt)?;
    let s = tape.scale(s, scale);
    let s = tape.add(s, fill)?;

    // Diagonal column per cached step: rows past seq_len are padding.
    let mut col_fill = vec![0.0f32; t_pad];
    for (qi, f) in col_fill.iter_mut().enumerate() {
        if qi >= p.seq_len {
            *f = NEG_INF_FILL;
        }
    }
    let mut parts = vec![s];
    for &ks in &state.step_k {
        let prod = tape.mul(q, ks)?;
        let col = tape.row_sums(prod)?;
        let col = tape.scale(col, scale);
        let fill_c = tape.constant(Tensor::from_vec(
            &[t_pad, 1],
            col_fill.clone(),
            AllocCategory::Scratch,
        ));
        let col = tape.add(col, fill_c)?;
        parts.push(col);
    }
    let z = tape.concat_cols(&parts)?;
    let a = tape.softmax(z)?;

    let a_prefix = tape.slice_cols(a, 0, t_pad)?;
    let mut out = tape.matmul(a_prefix, prefix_v)?;
    for (s_idx, &vs) in state.step_v.iter().enumerate() {
        let col = tape.slice_cols(a, t_pad + s_idx, t_pad + s_idx + 1)?;
        let contrib = tape.scale_rows(vs, col)?;
        out = tape.add(out, contrib)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockmask::{build_blockmask, MaskParams};
    use crate::meter::{meter_scope, AllocCategory};
    use crate::rng::SeedRng;

    const ACT: AllocCategory = AllocCategory::Activation;

    fn rand_t(shape: &[usize], rng: &mut SeedRng) -> Tensor {
        Tensor::randn(shape, 1.0, rng, ACT)
    }

    #[test]
    fn single_key_returns_value_row() {
        let q = Tensor::from_vec(&[1, 2], vec![0.3, -0.7], ACT);
        let k = Tensor::from_vec(&[1, 2], vec![1.0, 2.0], ACT);
        let v = Tensor::from_vec(&[1, 3], vec![5.0, 6.0, 7.0], ACT);
        let out = dense_masked_attention(&q, &k, &v, &[true]).unwrap();
        assert_eq!(out.data(), &[5.0, 6.0, 7.0]);
    }

    #[test]
    fn uniform_logits_average_allowed_values() {
        // q ⟂ all keys → all allowed logits equal → mean of allowed v rows.
        let q = Tensor::from_vec(&[1, 2], vec![0.0, 0.0], ACT);
        let k = Tensor::from_vec(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], ACT);
        let v = Tensor::from_vec(&[3, 1], vec![1.0, 2.0, 9.0], ACT);
        let out = dense_masked_attention(&q, &k, &v, &[true, true, false]).unwrap();
        assert!((out.data()[0] - 1.5).abs() < 1e-6);
    }

    #[test]
    fn degenerate_row_rejected() {
        let q = Tensor::zeros(&[1, 2], ACT);
        let k = Tensor::zeros(&[1, 2], ACT);
        let v = Tensor::zeros(&[1, 1], ACT);
        assert!(matches!(
            dense_masked_attention(&q, &k, &v, &[false]),
            Err(Error::DegenerateRow(_))
        ));
    }

    #[test]
    fn dense_matches_per_row_formula() {
        let mut rng = SeedRng::new(11);
        let n = 8;
        let dk = 4;
        let dv = 3;
        let q = rand_t(&[n, dk], &mut rng);
        let k = rand_t(&[n, dk], &mut rng);
        let v = rand_t(&[n, dv], &mut rng);
        let mask: Vec<bool> = (0..n)
            .flat_map(|r| (0..n).map(move |c| c <= r))
            .collect();
        let out = dense_masked_attention(&q, &k, &v, &mask).unwrap();
        let scale = 1.0 / (dk as f64).sqrt();
        for r in 0..n {
            // Direct softmax over the allowed logits of row r.
            let logits: Vec<f64> = (0..=r)
                .map(|c| {
                    q.row(r)
                        .iter()
                        .zip(k.row(c))
                        .map(|(a, b)| f64::from(*a) * f64::from(*b))
                        .sum::<f64>()
                        * scale
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let den: f64 = logits.iter().map(|&s| (s - m).exp()).sum();
            for d in 0..dv {
                let want: f64 = logits
                    .iter()
                    .enumerate()
                    .map(|(c, &s)| (s - m).exp() / den * f64::from(v.at2(c, d)))
                    .sum();
                assert!((f64::from(out.at2(r, d)) - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn masked_positions_are_inert() {
        let mut rng = SeedRng::new(12);
        let q = rand_t(&[4, 4], &mut rng);
        let mut k = rand_t(&[8, 4], &mut rng);
        let mut v = rand_t(&[8, 2], &mut rng);
        let mask: Vec<bool> = (0..4)
            .flat_map(|r| (0..8).map(move |c| c <= r))
            .collect();
        let base = dense_masked_attention(&q, &k, &v, &mask).unwrap();
        // Scramble the disallowed tail rows; output must be bit-unchanged.
        for row in 4..8 {
            for x in k.row_mut(row) {
                *x += 100.0;
            }
            for x in v.row_mut(row) {
                *x -= 42.0;
            }
        }
        let scrambled = dense_masked_attention(&q, &k, &v, &mask).unwrap();
        assert_eq!(base, scrambled);
    }

    #[test]
    fn streaming_equals_dense_over_random_configs() {
        let mut rng = SeedRng::new(99);
        for trial in 0..50 {
            let block = [2usize, 4, 8][rng.below(3)];
            let q_len = block * rng.range_inclusive(1, 32 / block);
            let seq_len = rng.range_inclusive(1, q_len);
            let step = rng.below(4);
            let dk = rng.range_inclusive(1, 8);
            let dv = rng.range_inclusive(1, 8);
            let p = MaskParams::new(q_len, seq_len, step, block).unwrap();
            let mask = build_blockmask(&p).unwrap();
            let q = rand_t(&[q_len, dk], &mut rng);
            let k = rand_t(&[p.kv_len(), dk], &mut rng);
            let v = rand_t(&[p.kv_len(), dv], &mut rng);
            let dense = dense_masked_attention(&q, &k, &v, &expand_dense_bool(&mask)).unwrap();
            let stream = streaming_attention(&q, &k, &v, &mask).unwrap();
            for (a, b) in dense.data().iter().zip(stream.data()) {
                assert!((a - b).abs() < 1e-5, "trial {trial}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn streaming_step0_is_textbook_causal() {
        let mut rng = SeedRng::new(5);
        let n = 16;
        let p = MaskParams::new(n, n, 0, 4).unwrap();
        let mask = build_blockmask(&p).unwrap();
        let q = rand_t(&[n, 4], &mut rng);
        let k = rand_t(&[n, 4], &mut rng);
        let v = rand_t(&[n, 4], &mut rng);
        let causal: Vec<bool> = (0..n).flat_map(|r| (0..n).map(move |c| c <= r)).collect();
        let dense = dense_masked_attention(&q, &k, &v, &causal).unwrap();
        let stream = streaming_attention(&q, &k, &v, &mask).unwrap();
        for (a, b) in dense.data().iter().zip(stream.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn output_rows_are_convex_combinations() {
        let mut rng = SeedRng::new(31);
        let p = MaskParams::new(8, 6, 2, 4).unwrap();
        let mask = build_blockmask(&p).unwrap();
        let q = rand_t(&[8, 4], &mut rng);
        let k = rand_t(&[p.kv_len(), 4], &mut rng);
        let v = rand_t(&[p.kv_len(), 3], &mut rng);
        let out = streaming_attention(&q, &k, &v, &mask).unwrap();
        for r in 0..8 {
            let allowed: Vec<usize> = (0..p.kv_len()).filter(|&c| mask.allowed(r, c)).collect();
            for d in 0..3 {
                let lo = allowed
                    .iter()
                    .map(|&c| v.at2(c, d))
                    .fold(f32::INFINITY, f32::min);
                let hi = allowed
                    .iter()
                    .map(|&c| v.at2(c, d))
                    .fold(f32::NEG_INFINITY, f32::max);
                let got = out.at2(r, d);
                assert!(got >= lo - 1e-5 && got <= hi + 1e-5);
            }
        }
    }

    #[test]
    fn streaming_scratch_linear_dense_quadratic() {
        let mut rng = SeedRng::new(77);
        let mut stream_peaks = Vec::new();
        for &lkv in &[256usize, 512, 1024] {
            // step chosen so q_len stays 256 while kv grows.
            let step = lkv / 256 - 1;
            let p = MaskParams::new(256, 256, step, 16).unwrap();
            let mask = build_blockmask(&p).unwrap();
            let q = rand_t(&[256, 8], &mut rng);
            let k = rand_t(&[lkv, 8], &mut rng);
            let v = rand_t(&[lkv, 8], &mut rng);
            let (_, peak) = meter_scope(AllocCategory::Scratch, || {
                streaming_attention(&q, &k, &v, &mask).unwrap()
            });
            stream_peaks.push(peak);
            let (_, dense_peak) = meter_scope(AllocCategory::Scratch, || {
                dense_masked_attention(&q, &k, &v, &expand_dense_bool(&mask)).unwrap()
            });
            assert!(dense_peak >= (256 * lkv * 4) as u64);
        }
        // Streaming peaks stay nearly flat as kv length doubles; the dense
        // buffer above grows quadratically.
        let first = stream_peaks[0] as f64;
        for &pk in &stream_peaks[1..] {
            assert!((pk as f64) < first * 1.5 + 4096.0, "peaks {stream_peaks:?}");
        }
    }

    #[test]
    fn ttt_step0_equals_causal_self_attention() {
        let mut rng = SeedRng::new(21);
        let t = 8;
        let dk = 4;
        let p = MaskParams::new(t, t, 0, 4).unwrap();
        let mask = Rc::new(build_blockmask(&p).unwrap());
        let mut tape = Tape::new();
        let q = tape.leaf(rand_t(&[t, dk], &mut rng), false);
        let k = tape.leaf(rand_t(&[t, dk], &mut rng), false);
        let v = tape.leaf(rand_t(&[t, dk], &mut rng), false);
        let mut state = TTTState::new(dk);
        let out = ttt_attention_step(&mut tape, &mut state, q, k, v, &mask, AttnRoute::StepWise)
            .unwrap();
        let causal: Vec<bool> = (0..t).flat_map(|r| (0..t).map(move |c| c <= r)).collect();
        let dense =
            dense_masked_attention(tape.value(q), tape.value(k), tape.value(v), &causal).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(dense.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(state.completed_steps(), 1);
    }

    #[test]
    fn ttt_steps_match_dense_concat_oracle() {
        let mut rng = SeedRng::new(22);
        for route in [AttnRoute::StepWise, AttnRoute::Streaming] {
            let t = 8;
            let dk = 4;
            let dv = 4;
            let seq_len = 6;
            let mut tape = Tape::new();
            let mut state = TTTState::new(dk);
            let mut outs = Vec::new();
            let mut kvs = Vec::new();
            for step in 0..3 {
                let p = MaskParams::new(t, seq_len, step, 4).unwrap();
                let mask = Rc::new(build_blockmask(&p).unwrap());
                let q = tape.leaf(rand_t(&[t, dk], &mut rng), false);
                let k = tape.leaf(rand_t(&[t, dk], &mut rng), false);
                let v = tape.leaf(rand_t(&[t, dv], &mut rng), false);
                kvs.push((k, v));
                let out =
                    ttt_attention_step(&mut tape, &mut state, q, k, v, &mask, route).unwrap();
                outs.push((q, out, mask));
            }
            // Oracle: dense attention over the concatenated cache per step.
            for (step, (q, out, mask)) in outs.iter().enumerate() {
                let ks: Vec<&Tensor> = kvs[..=step].iter().map(|(k, _)| tape.value(*k)).collect();
                let vs: Vec<&Tensor> = kvs[..=step].iter().map(|(_, v)| tape.value(*v)).collect();
                let k_cat = tensor::concat_rows(&ks, ACT).unwrap();
                let v_cat = tensor::concat_rows(&vs, ACT).unwrap();
                let dense = dense_masked_attention(
                    tape.value(*q),
                    &k_cat,
                    &v_cat,
                    &expand_dense_bool(mask),
                )
                .unwrap();
                for (a, b) in tape.value(*out).data().iter().zip(dense.data()) {
                    assert!((a - b).abs() < 1e-5, "route {route:?} step {step}");
                }
            }
        }
    }

    #[test]
    fn mask_state_desync_detected() {
        let mut rng = SeedRng::new(2);
        let p = MaskParams::new(4, 4, 1, 4).unwrap();
        let mask = Rc::new(build_blockmask(&p).unwrap());
        let mut tape = Tape::new();
        let q = tape.leaf(rand_t(&[4, 2], &mut rng), false);
        let k = tape.leaf(rand_t(&[4, 2], &mut rng), false);
        let v = tape.leaf(rand_t(&[4, 2], &mut rng), false);
        let mut state = TTTState::new(2);
        let err = ttt_attention_step(&mut tape, &mut state, q, k, v, &mask, AttnRoute::StepWise);
        assert!(matches!(err, Err(Error::Training(_))));
    }
}
