//! Masked soft-label log-softmax loss with an in-place backward.
//!
//! The forward averages `−Σ_v p·log_softmax(z)` over the rows the position
//! mask marks as contributing. The backward recomputes the softmax row by
//! row from the logits and overwrites the logits buffer with the gradient
//! `π·s − p·g` (`s = Σ_v p·g` per row), so no gradient buffer of the logits'
//! shape is ever allocated. An out-of-place reference with bit-identical
//! arithmetic exists for testing.

use crate::error::{Error, Result};
use crate::meter::AllocCategory;
use crate::tensor::{self, Tensor};

/// Upstream gradient: one scalar loss weight, or one weight per row.
#[derive(Clone, Debug)]
pub enum Upstream {
    Scalar(f32),
    PerRow(Vec<f32>),
}

/// One loss evaluation: draft logits against a soft target distribution.
#[derive(Debug)]
pub struct LossBatch {
    /// Logits `[N, V]`. The in-place backward overwrites this buffer.
    pub logits: Tensor,
    /// Target distributions `[N, V]`; masked rows must sum to 1 ± 1e-5.
    pub target: Tensor,
    /// Per-row contribution flags.
    pub position_mask: Vec<bool>,
    /// Upstream gradient weight(s).
    pub upstream: Upstream,
}

impl LossBatch {
    fn validate(&self) -> Result<(usize, usize, usize)> {
        let shape = self.logits.shape();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "loss: logits must be [N, V], got {shape:?}"
            )));
        }
        let (n, v) = (shape[0], shape[1]);
        if v < 2 {
            return Err(Error::Dimension(format!("loss: vocab {v} < 2")));
        }
        if self.target.shape() != shape {
            return Err(Error::Dimension(format!(
                "loss: target {:?} vs logits {shape:?}",
                self.target.shape()
            )));
        }
        if self.position_mask.len() != n {
            return Err(Error::Dimension(format!(
                "loss: {} mask entries for {n} rows",
                self.position_mask.len()
            )));
        }
        if let Upstream::PerRow(g) = &self.upstream {
            if g.len() != n {
                return Err(Error::Dimension(format!(
                    "loss: {} upstream weights for {n} rows",
                    g.len()
                )));
            }
        }
        let n_masked = self.position_mask.iter().filter(|&&m| m).count();
        if n_masked == 0 {
            return Err(Error::EmptyBatch("loss: no contributing rows".into()));
        }
        for r in 0..n {
            if !self.position_mask[r] {
                continue;
            }
            let sum: f64 = self.target.row(r).iter().map(|&p| f64::from(p)).sum();
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidParams(format!(
                    "loss: target row {r} sums to {sum}, not 1"
                )));
            }
        }
        Ok((n, v, n_masked))
    }

    fn g_for_row(&self, r: usize, n_masked: usize) -> f32 {
        let base = match &self.upstream {
            Upstream::Scalar(g) => *g,
            Upstream::PerRow(g) => g[r],
        };
        base / n_masked as f32
    }
}

// ─── Row kernels ─────────────────────────────────────────────────────────────

fn row_stats(zrow: &[f32]) -> (f64, f64) {
    let mut maxv = f32::NEG_INFINITY;
    for &z in zrow {
        if z > maxv {
            maxv = z;
        }
    }
    let maxv = f64::from(maxv);
    let mut denom = 0.0f64;
    for &z in zrow {
        denom += (f64::from(z) - maxv).exp();
    }
    (maxv, denom)
}

/// `−Σ_v p·log_softmax(z)` for one row, in f64.
fn row_loss(zrow: &[f32], prow: &[f32]) -> f64 {
    let (maxv, denom) = row_stats(zrow);
    let lse = maxv + denom.ln();
    let mut acc = 0.0f64;
    for (&z, &p) in zrow.iter().zip(prow) {
        acc -= f64::from(p) * (f64::from(z) - lse);
    }
    acc
}

/// Write `π·s − p·g` over the logits row. Reads each `z[v]` before writing
/// it, so the buffer can be the row itself.
fn backward_row_inplace(zrow: &mut [f32], prow: &[f32], g: f32) {
    let (maxv, denom) = row_stats(zrow);
    let mut s = 0.0f64;
    for &p in prow {
        s += f64::from(p) * f64::from(g);
    }
    let inv = 1.0 / denom;
    for (z, &p) in zrow.iter_mut().zip(prow) {
        let pi = (f64::from(*z) - maxv).exp() * inv;
        *z = (pi * s - f64::from(p) * f64::from(g)) as f32;
    }
}

/// Same arithmetic in the same order, writing to a separate buffer.
fn backward_row_into(zrow: &[f32], prow: &[f32], g: f32, out: &mut [f32]) {
    let (maxv, denom) = row_stats(zrow);
    let mut s = 0.0f64;
    for &p in prow {
        s += f64::from(p) * f64::from(g);
    }
    let inv = 1.0 / denom;
    for ((&z, &p), o) in zrow.iter().zip(prow).zip(out.iter_mut()) {
        let pi = (f64::from(z) - maxv).exp() * inv;
        *o = (pi * s - f64::from(p) * f64::from(g)) as f32;
    }
}

pub(crate) fn soft_loss_forward_kernel(
    z: &[f32],
    p: &[f32],
    rows: usize,
    cols: usize,
    mask: &[bool],
) -> f64 {
    let mut acc = 0.0f64;
    let mut n_masked = 0usize;
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        n_masked += 1;
        acc += row_loss(&z[r * cols..(r + 1) * cols], &p[r * cols..(r + 1) * cols]);
    }
    acc / n_masked as f64
}

pub(crate) fn soft_loss_backward_kernel_inplace(
    z: &mut [f32],
    p: &[f32],
    rows: usize,
    cols: usize,
    mask: &[bool],
    g_row: f32,
) {
    for r in 0..rows {
        let zrow = &mut z[r * cols..(r + 1) * cols];
        if mask[r] {
            backward_row_inplace(zrow, &p[r * cols..(r + 1) * cols], g_row);
        } else {
            zrow.fill(0.0);
        }
    }
}

// ─── Public operations ───────────────────────────────────────────────────────

/// Mean masked soft-label loss. 64-bit accumulation throughout.
pub fn loss_forward(batch: &LossBatch) -> Result<f64> {
    batch.validate()?;
    let (n, v) = (batch.logits.shape()[0], batch.logits.shape()[1]);
    Ok(soft_loss_forward_kernel(
        batch.logits.data(),
        batch.target.data(),
        n,
        v,
        &batch.position_mask,
    ))
}

/// In-place backward: overwrites the logits buffer with the gradient of
/// `upstream · loss_forward` with respect to the logits. Masked-out rows are
/// zeroed. Allocates no buffer of the logits' shape.
pub fn loss_backward_inplace(batch: &mut LossBatch) -> Result<()> {
    let (n, v, n_masked) = batch.validate()?;
    for r in 0..n {
        let g = batch.g_for_row(r, n_masked);
        let masked = batch.position_mask[r];
        let prow_start = r * v;
        // Split borrows: target row copied values are read-only anyway.
        let zrow = &mut batch.logits.data_mut()[prow_start..prow_start + v];
        if masked {
            backward_row_inplace(zrow, &batch.target.data()[prow_start..prow_start + v], g);
        } else {
            zrow.fill(0.0);
        }
    }
    Ok(())
}

/// Out-of-place reference backward: identical arithmetic to the in-place
/// path, writing into a fresh tensor. Exists so in-place correctness can be
/// asserted bit-for-bit.
pub fn loss_backward_reference(batch: &LossBatch) -> Result<Tensor> {
    let (n, _v, n_masked) = batch.validate()?;
    let mut out = Tensor::zeros(batch.logits.shape(), AllocCategory::Scratch);
    for r in 0..n {
        if !batch.position_mask[r] {
            continue;
        }
        let g = batch.g_for_row(r, n_masked);
        backward_row_into(
            batch.logits.row(r),
            batch.target.row(r),
            g,
            out.row_mut(r),
        );
    }
    Ok(out)
}

/// Map a target-vocabulary distribution onto the draft vocabulary:
/// softmax the target logits, gather the mapped entries, renormalize.
/// `vocab_map[d]` is the target token id backing draft slot `d`; the map
/// must be injective.
pub fn topk_distill_target(target_logits: &Tensor, vocab_map: &[u32]) -> Result<Tensor> {
    if vocab_map.is_empty() {
        return Err(Error::InvalidParams("vocab map is empty".into()));
    }
    let shape = target_logits.shape();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!(
            "topk_distill_target: logits must be [N, V], got {shape:?}"
        )));
    }
    let (n, v_target) = (shape[0], shape[1]);
    let mut seen = vec![false; v_target];
    for &t in vocab_map {
        let t = t as usize;
        if t >= v_target {
            return Err(Error::IndexOutOfRange(format!(
                "vocab map entry {t} ≥ target vocab {v_target}"
            )));
        }
        if seen[t] {
            return Err(Error::InvalidParams(format!(
                "vocab map repeats target id {t}"
            )));
        }
        seen[t] = true;
    }
    let v_draft = vocab_map.len();
    let mut out = Tensor::zeros(&[n, v_draft], AllocCategory::Activation);
    let probs = tensor::softmax(target_logits, 1, AllocCategory::Scratch)?;
    for r in 0..n {
        let prow = probs.row(r);
        let orow = out.row_mut(r);
        let mut sum = 0.0f64;
        for (&t, o) in vocab_map.iter().zip(orow.iter_mut()) {
            *o = prow[t as usize];
            sum += f64::from(*o);
        }
        if sum > 0.0 {
            let inv = 1.0 / sum;
            for o in orow.iter_mut() {
                *o = (f64::from(*o) * inv) as f32;
            }
        } else {
            // Every kept token underflowed; fall back to uniform.
            let u = 1.0 / v_draft as f32;
            orow.fill(u);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meter::{meter_scope, AllocCategory};
    use crate::rng::SeedRng;
    use crate::tape::gradcheck;

    const A: AllocCategory = AllocCategory::Activation;

    fn batch(z: Vec<f32>, p: Vec<f32>, n: usize, v: usize, mask: Vec<bool>) -> LossBatch {
        LossBatch {
            logits: Tensor::from_vec(&[n, v], z, A),
            target: Tensor::from_vec(&[n, v], p, A),
            position_mask: mask,
            upstream: Upstream::Scalar(1.0),
        }
    }

    #[test]
    fn uniform_self_distillation_is_entropy() {
        let b = batch(
            vec![0.0; 4],
            vec![0.25; 4],
            1,
            4,
            vec![true],
        );
        let l = loss_forward(&b).unwrap();
        assert!((l - 4.0f64.ln()).abs() < 1e-9, "{l}");
    }

    #[test]
    fn one_hot_on_confident_argmax() {
        let b = batch(
            vec![10.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            1,
            3,
            vec![true],
        );
        let l = loss_forward(&b).unwrap();
        assert!((l - 9.1e-5).abs() < 2e-6, "{l}");
    }

    #[test]
    fn masked_rows_do_not_contribute() {
        let b = batch(
            vec![5.0, -3.0, 0.0, 0.0],
            vec![0.3, 0.7, 1.0, 0.0],
            2,
            2,
            vec![false, true],
        );
        let l = loss_forward(&b).unwrap();
        assert!((l - 2.0f64.ln()).abs() < 1e-9, "{l}");
    }

    #[test]
    fn zero_masked_rows_is_error() {
        let b = batch(vec![0.0, 0.0], vec![1.0, 0.0], 1, 2, vec![false]);
        assert!(matches!(loss_forward(&b), Err(Error::EmptyBatch(_))));
    }

    #[test]
    fn backward_one_hot_closed_form() {
        let mut b = batch(vec![0.0, 0.0], vec![1.0, 0.0], 1, 2, vec![true]);
        loss_backward_inplace(&mut b).unwrap();
        let g = b.logits.data();
        assert!((g[0] + 0.5).abs() < 1e-7);
        assert!((g[1] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let mut rng = SeedRng::new(2);
        for _ in 0..30 {
            let n = rng.range_inclusive(1, 5);
            let v = rng.range_inclusive(2, 8);
            let z: Vec<f32> = (0..n * v).map(|_| rng.gauss(2.0)).collect();
            let p = random_dist(n, v, &mut rng);
            let mask: Vec<bool> = (0..n).map(|r| r == 0 || rng.uniform() > 0.3).collect();
            let mut b = batch(z, p, n, v, mask);
            loss_backward_inplace(&mut b).unwrap();
            for r in 0..n {
                let s: f64 = b.logits.row(r).iter().map(|&x| f64::from(x)).sum();
                assert!(s.abs() < 1e-6, "row {r} sums to {s}");
            }
        }
    }

    fn random_dist(n: usize, v: usize, rng: &mut SeedRng) -> Vec<f32> {
        let mut p = vec![0.0f32; n * v];
        for r in 0..n {
            let mut row: Vec<f64> = (0..v).map(|_| rng.uniform() + 1e-3).collect();
            let s: f64 = row.iter().sum();
            for x in &mut row {
                *x /= s;
            }
            // Renormalize in f32 so stored rows sum to 1 within 1e-5.
            let s32: f32 = row.iter().map(|&x| x as f32).sum();
            for (c, &x) in row.iter().enumerate() {
                p[r * v + c] = x as f32 / s32;
            }
        }
        p
    }

    #[test]
    fn inplace_matches_reference_bit_for_bit() {
        let mut rng = SeedRng::new(7);
        for _ in 0..50 {
            let n = rng.range_inclusive(1, 6);
            let v = rng.range_inclusive(2, 9);
            let z: Vec<f32> = (0..n * v).map(|_| rng.gauss(3.0)).collect();
            let p = random_dist(n, v, &mut rng);
            let mask: Vec<bool> = (0..n).map(|r| r == 0 || rng.uniform() > 0.4).collect();
            let upstream = if rng.uniform() > 0.5 {
                Upstream::Scalar(rng.gauss(1.0))
            } else {
                Upstream::PerRow((0..n).map(|_| rng.gauss(1.0)).collect())
            };
            let mut b = batch(z.clone(), p.clone(), n, v, mask.clone());
            b.upstream = upstream.clone();
            let reference = loss_backward_reference(&b).unwrap();
            loss_backward_inplace(&mut b).unwrap();
            assert_eq!(b.logits.data(), reference.data());
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = SeedRng::new(13);
        for _ in 0..20 {
            let n = rng.range_inclusive(1, 3);
            let v = rng.range_inclusive(2, 8);
            let z0: Vec<f32> = (0..n * v).map(|_| rng.gauss(1.0)).collect();
            let p = random_dist(n, v, &mut rng);
            let mask: Vec<bool> = (0..n).map(|r| r == 0 || rng.uniform() > 0.3).collect();

            let eval = |zs: &[f32]| -> f64 {
                let b = batch(zs.to_vec(), p.clone(), n, v, mask.clone());
                loss_forward(&b).unwrap()
            };
            let fd = gradcheck::central_diff(eval, &z0, 1e-3);
            let mut b = batch(z0.clone(), p.clone(), n, v, mask.clone());
            loss_backward_inplace(&mut b).unwrap();
            let viol = gradcheck::max_violation(b.logits.data(), &fd, 1e-2, 1e-3);
            assert!(viol <= 0.0, "violation {viol}");
        }
    }

    #[test]
    fn loss_is_shift_invariant() {
        let mut rng = SeedRng::new(19);
        let n = 3;
        let v = 5;
        let z: Vec<f32> = (0..n * v).map(|_| rng.gauss(1.0)).collect();
        let p = random_dist(n, v, &mut rng);
        let b1 = batch(z.clone(), p.clone(), n, v, vec![true; n]);
        let shifted: Vec<f32> = z.iter().map(|&x| x + 7.5).collect();
        let b2 = batch(shifted, p, n, v, vec![true; n]);
        let l1 = loss_forward(&b1).unwrap();
        let l2 = loss_forward(&b2).unwrap();
        assert!((l1 - l2).abs() < 1e-5);
    }

    #[test]
    fn backward_scratch_is_row_independent() {
        let mut rng = SeedRng::new(23);
        let v = 32;
        let mut peaks = Vec::new();
        for &n in &[64usize, 512] {
            let z: Vec<f32> = (0..n * v).map(|_| rng.gauss(1.0)).collect();
            let p = random_dist(n, v, &mut rng);
            let mut b = batch(z, p, n, v, vec![true; n]);
            let (res, peak) = meter_scope(AllocCategory::Scratch, || loss_backward_inplace(&mut b));
            res.unwrap();
            peaks.push(peak);
        }
        assert_eq!(peaks[0], peaks[1], "scratch should not scale with rows");
        assert!(peaks[1] < (v * 4 * 8) as u64, "peak {} too large", peaks[1]);
    }

    #[test]
    fn distill_identity_map() {
        let mut rng = SeedRng::new(3);
        let logits = Tensor::randn(&[2, 4], 1.0, &mut rng, A);
        let map: Vec<u32> = (0..4).collect();
        let out = topk_distill_target(&logits, &map).unwrap();
        let probs = tensor::softmax(&logits, 1, A).unwrap();
        for (a, b) in out.data().iter().zip(probs.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn distill_renormalizes() {
        // softmax([ln5, ln3, ln2]) = [0.5, 0.3, 0.2]; keep {0,1}.
        let logits = Tensor::from_vec(&[1, 3], vec![5f32.ln(), 3f32.ln(), 2f32.ln()], A);
        let out = topk_distill_target(&logits, &[0, 1]).unwrap();
        assert!((out.data()[0] - 0.625).abs() < 1e-6);
        assert!((out.data()[1] - 0.375).abs() < 1e-6);
    }

    #[test]
    fn distill_single_token_degenerates() {
        let logits = Tensor::from_vec(&[1, 3], vec![0.1, 0.2, 0.3], A);
        let out = topk_distill_target(&logits, &[2]).unwrap();
        assert_eq!(out.data(), &[1.0]);
    }

    #[test]
    fn distill_rejects_bad_maps() {
        let logits = Tensor::zeros(&[1, 3], A);
        assert!(topk_distill_target(&logits, &[]).is_err());
        assert!(topk_distill_target(&logits, &[0, 0]).is_err());
        assert!(topk_distill_target(&logits, &[3]).is_err());
    }
}
