//! Block-compressed attention masks for multi-step draft unrolling.
//!
//! The mask of one unroll step combines a causal prefix with one diagonal
//! band per earlier step: token row `q` may see prefix keys `kv ≤ q` that are
//! real (not padding), plus the key at its own position in each earlier
//! step's cache. Instead of materializing the full `Q_LEN × (step+1)·Q_LEN`
//! boolean matrix, [`BlockMask`] classifies every `B × B` key block per query
//! block row as fully allowed, partially allowed, or skipped, which is what
//! lets the streaming attention kernel touch only useful blocks.

use crate::error::{Error, Result};
use crate::meter::AllocCategory;
use crate::tensor::Tensor;

/// Geometry of one unroll step's mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskParams {
    /// Padded per-step sequence length (tokens).
    pub q_len: usize,
    /// True unpadded length, `seq_len ≤ q_len`.
    pub seq_len: usize,
    /// Current unroll step index; key length is `(step+1)·q_len`.
    pub step: usize,
    /// Block side length; a power of two dividing `q_len`.
    pub block: usize,
}

impl MaskParams {
    pub fn new(q_len: usize, seq_len: usize, step: usize, block: usize) -> Result<MaskParams> {
        if seq_len == 0 || seq_len > q_len {
            return Err(Error::InvalidParams(format!(
                "seq_len {seq_len} must satisfy 0 < seq_len ≤ q_len {q_len}"
            )));
        }
        if block == 0 || !block.is_power_of_two() {
            return Err(Error::InvalidParams(format!(
                "block {block} must be a power of two"
            )));
        }
        if q_len % block != 0 {
            return Err(Error::InvalidParams(format!(
                "block {block} must divide q_len {q_len}"
            )));
        }
        Ok(MaskParams {
            q_len,
            seq_len,
            step,
            block,
        })
    }

    /// Total key/value length covered by this step's mask.
    pub fn kv_len(&self) -> usize {
        (self.step + 1) * self.q_len
    }
}

/// The element-level mask predicate: causal-with-padding over the first
/// `q_len` keys, one diagonal per earlier step over the rest.
pub fn ttt_mask_predicate(params: &MaskParams, q_i: usize, kv_i: usize) -> Result<bool> {
    if q_i >= params.q_len {
        return Err(Error::IndexOutOfRange(format!(
            "q_i {q_i} ≥ q_len {}",
            params.q_len
        )));
    }
    if kv_i >= params.kv_len() {
        return Err(Error::IndexOutOfRange(format!(
            "kv_i {kv_i} ≥ kv_len {}",
            params.kv_len()
        )));
    }
    Ok(predicate_unchecked(params, q_i, kv_i))
}

#[inline]
fn predicate_unchecked(params: &MaskParams, q_i: usize, kv_i: usize) -> bool {
    let causal = q_i >= kv_i && kv_i < params.seq_len;
    let suffix = kv_i >= params.q_len
        && (kv_i % params.q_len) < params.seq_len
        && (kv_i + params.q_len - q_i) % params.q_len == 0;
    causal || suffix
}

/// How a key block relates to the predicate within one query-block row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Skipped,
    Partial,
    Full,
}

/// One query-block row: indices of fully and partially allowed key blocks.
/// Key blocks listed in neither are skipped.
#[derive(Clone, Debug, Default)]
pub struct BlockRow {
    pub full: Vec<usize>,
    pub partial: Vec<usize>,
}

/// Block classification over the whole mask plus the predicate for
/// element-level re-evaluation inside partial blocks.
#[derive(Clone, Debug)]
pub struct BlockMask {
    params: MaskParams,
    rows: Vec<BlockRow>,
}

impl BlockMask {
    pub fn params(&self) -> &MaskParams {
        &self.params
    }

    pub fn step(&self) -> usize {
        self.params.step
    }

    /// Query-block rows, top to bottom.
    pub fn rows(&self) -> &[BlockRow] {
        &self.rows
    }

    pub fn kind(&self, q_block: usize, kv_block: usize) -> BlockKind {
        let row = &self.rows[q_block];
        if row.full.contains(&kv_block) {
            BlockKind::Full
        } else if row.partial.contains(&kv_block) {
            BlockKind::Partial
        } else {
            BlockKind::Skipped
        }
    }

    /// Element-level predicate, for use inside partial blocks.
    pub fn allowed(&self, q_i: usize, kv_i: usize) -> bool {
        predicate_unchecked(&self.params, q_i, kv_i)
    }

    pub fn n_q_blocks(&self) -> usize {
        self.params.q_len / self.params.block
    }

    pub fn n_kv_blocks(&self) -> usize {
        self.params.kv_len() / self.params.block
    }
}

/// Classify every block by exhaustively evaluating the predicate inside it.
pub fn build_blockmask(params: &MaskParams) -> Result<BlockMask> {
    MaskParams::new(params.q_len, params.seq_len, params.step, params.block)?;
    let b = params.block;
    let n_q_blocks = params.q_len / b;
    let n_kv_blocks = params.kv_len() / b;
    let mut rows = Vec::with_capacity(n_q_blocks);
    for qb in 0..n_q_blocks {
        let mut row = BlockRow::default();
        for kb in 0..n_kv_blocks {
            let mut any = false;
            let mut all = true;
            'cells: for qi in qb * b..(qb + 1) * b {
                for ki in kb * b..(kb + 1) * b {
                    if predicate_unchecked(params, qi, ki) {
                        any = true;
                        if !all {
                            break 'cells;
                        }
                    } else {
                        all = false;
                        if any {
                            break 'cells;
                        }
                    }
                }
            }
            if any && all {
                row.full.push(kb);
            } else if any {
                row.partial.push(kb);
            }
        }
        rows.push(row);
    }
    Ok(BlockMask {
        params: *params,
        rows,
    })
}

/// Dense 0/1 expansion, the testing oracle for the block classification.
pub fn expand_dense(mask: &BlockMask) -> Tensor {
    let p = mask.params;
    let mut out = Tensor::zeros(&[p.q_len, p.kv_len()], AllocCategory::Scratch);
    for q in 0..p.q_len {
        for kv in 0..p.kv_len() {
            if predicate_unchecked(&p, q, kv) {
                out.data_mut()[q * p.kv_len() + kv] = 1.0;
            }
        }
    }
    out
}

/// Dense boolean expansion.
pub fn expand_dense_bool(mask: &BlockMask) -> Vec<bool> {
    let p = mask.params;
    let mut out = vec![false; p.q_len * p.kv_len()];
    for q in 0..p.q_len {
        for kv in 0..p.kv_len() {
            out[q * p.kv_len() + kv] = predicate_unchecked(&p, q, kv);
        }
    }
    out
}

/// Fixed-width character grid: `█` allowed, `·` disallowed, `│` between key
/// blocks. Byte-deterministic.
pub fn render_mask(mask: &BlockMask) -> String {
    let p = mask.params;
    let mut out = String::new();
    for q in 0..p.q_len {
        if q > 0 {
            out.push('\n');
        }
        for kv in 0..p.kv_len() {
            if kv > 0 && kv % p.block == 0 {
                out.push('│');
            }
            out.push(if predicate_unchecked(&p, q, kv) {
                '█'
            } else {
                '·'
            });
        }
    }
    out
}
