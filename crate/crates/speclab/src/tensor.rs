//! Dense row-major f32 tensors and the kernel set the rest of the crate
//! builds on.
//!
//! Storage is 32-bit; every reduction (matmul inner products, softmax
//! denominators, norms) accumulates in 64-bit. Buffers register with the
//! allocation meter under their category so memory properties can be
//! asserted in tests.

use crate::error::{Error, Result};
use crate::meter::{record_alloc, record_free, AllocCategory};
use crate::rng::SeedRng;

/// Dense n-dimensional array of f32, row-major.
#[derive(Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    category: AllocCategory,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f32>, category: AllocCategory) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} wants {} elements, buffer has {}",
            shape,
            numel,
            data.len()
        );
        record_alloc(category, data.len() * 4);
        Tensor {
            shape: shape.to_vec(),
            data,
            category,
        }
    }

    pub fn zeros(shape: &[usize], category: AllocCategory) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel], category)
    }

    pub fn full(shape: &[usize], value: f32, category: AllocCategory) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel], category)
    }

    pub fn scalar(value: f32, category: AllocCategory) -> Tensor {
        Tensor::from_vec(&[1], vec![value], category)
    }

    /// Gaussian init with the given std, consuming the rng deterministically.
    pub fn randn(shape: &[usize], std: f32, rng: &mut SeedRng, category: AllocCategory) -> Tensor {
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = (0..numel).map(|_| rng.gauss(std)).collect();
        Tensor::from_vec(shape, data, category)
    }

    pub fn identity(n: usize, category: AllocCategory) -> Tensor {
        let mut t = Tensor::zeros(&[n, n], category);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn category(&self) -> AllocCategory {
        self.category
    }

    /// Number of rows when viewed as 2D (leading extent; 1 for scalars).
    pub fn rows(&self) -> usize {
        *self.shape.first().unwrap_or(&1)
    }

    /// Row width when viewed as 2D (product of trailing extents).
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product::<usize>().max(
            // 1-D tensors are a single row
            if self.shape.len() <= 1 { self.numel() } else { 1 },
        )
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let w = self.cols();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        let w = self.cols();
        &mut self.data[r * w..(r + 1) * w]
    }

    pub fn at2(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols() + c]
    }

    /// Consume the tensor and hand back its buffer without a meter event for
    /// the transfer itself (the free is recorded here, ownership moves out).
    pub fn into_raw(mut self) -> Vec<f32> {
        let data = std::mem::take(&mut self.data);
        record_free(self.category, data.len() * 4);
        std::mem::forget(self);
        data
    }

    fn check_2d(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else if self.shape.len() == 1 {
            Ok((1, self.shape[0]))
        } else {
            Err(Error::Dimension(format!(
                "{what}: expected rank ≤ 2, got shape {:?}",
                self.shape
            )))
        }
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor::from_vec(&self.shape, self.data.clone(), self.category)
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        record_free(self.category, self.data.len() * 4);
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

// ─── Kernels ─────────────────────────────────────────────────────────────────
//
// Forward math on plain tensors. The autodiff tape wraps these for recorded
// computation; inference paths call them directly.

const SCRATCH: AllocCategory = AllocCategory::Scratch;

/// C[m,n] = A[m,k] · B[k,n], accumulating each dot product in f64.
pub fn matmul(a: &Tensor, b: &Tensor, out_cat: AllocCategory) -> Result<Tensor> {
    let (m, ka) = a.check_2d("matmul lhs")?;
    let (kb, n) = b.check_2d("matmul rhs")?;
    if ka != kb {
        return Err(Error::Dimension(format!(
            "matmul: inner extents differ ({ka} vs {kb})"
        )));
    }
    let mut out = Tensor::zeros(&[m, n], out_cat);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    // Row-major friendly order; per-element addition order over p is fixed,
    // so results are bit-deterministic.
    let _g = crate::meter::ScratchGuard::new(n * 8);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        let arow = &ad[i * ka..(i + 1) * ka];
        acc.fill(0.0);
        for (p, &av) in arow.iter().enumerate() {
            let av = f64::from(av);
            let brow = &bd[p * n..(p + 1) * n];
            for (accj, &bv) in acc.iter_mut().zip(brow) {
                *accj += av * f64::from(bv);
            }
        }
        for (oj, &aj) in od[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *oj = aj as f32;
        }
    }
    Ok(out)
}

/// Bᵀ, copying.
pub fn transpose(x: &Tensor, out_cat: AllocCategory) -> Result<Tensor> {
    let (m, n) = x.check_2d("transpose")?;
    let mut out = Tensor::zeros(&[n, m], out_cat);
    let xd = x.data();
    let od = out.data_mut();
    for i in 0..m {
        for j in 0..n {
            od[j * m + i] = xd[i * n + j];
        }
    }
    Ok(out)
}

/// Elementwise sum of same-shaped tensors.
pub fn add(a: &Tensor, b: &Tensor, out_cat: AllocCategory) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "add: shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_vec(a.shape(), data, out_cat))
}

/// Elementwise product of same-shaped tensors.
pub fn mul(a: &Tensor, b: &Tensor, out_cat: AllocCategory) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "mul: shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_vec(a.shape(), data, out_cat))
}

/// x · c.
pub fn scale(x: &Tensor, c: f32, out_cat: AllocCategory) -> Tensor {
    let data: Vec<f32> = x.data().iter().map(|v| v * c).collect();
    Tensor::from_vec(x.shape(), data, out_cat)
}

/// Row-stacked concatenation; all parts must share column width.
pub fn concat_rows(parts: &[&Tensor], out_cat: AllocCategory) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Dimension("concat_rows: no parts".into()));
    }
    let w = parts[0].cols();
    let mut rows = 0;
    for p in parts {
        if p.cols() != w {
            return Err(Error::Dimension(format!(
                "concat_rows: column widths differ ({} vs {})",
                p.cols(),
                w
            )));
        }
        rows += p.rows();
    }
    let mut data = Vec::with_capacity(rows * w);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::from_vec(&[rows, w], data, out_cat))
}

/// Column-stacked concatenation; all parts must share row count.
pub fn concat_cols(parts: &[&Tensor], out_cat: AllocCategory) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Dimension("concat_cols: no parts".into()));
    }
    let rows = parts[0].rows();
    let mut width = 0;
    for p in parts {
        if p.rows() != rows {
            return Err(Error::Dimension(format!(
                "concat_cols: row counts differ ({} vs {})",
                p.rows(),
                rows
            )));
        }
        width += p.cols();
    }
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Ok(Tensor::from_vec(&[rows, width], data, out_cat))
}

/// Contiguous row range [start, end).
pub fn slice_rows(x: &Tensor, start: usize, end: usize, out_cat: AllocCategory) -> Result<Tensor> {
    let (m, n) = x.check_2d("slice_rows")?;
    if start > end || end > m {
        return Err(Error::IndexOutOfRange(format!(
            "slice_rows: [{start}, {end}) of {m} rows"
        )));
    }
    let data = x.data()[start * n..end * n].to_vec();
    Ok(Tensor::from_vec(&[end - start, n], data, out_cat))
}

/// Contiguous column range [start, end), copying.
pub fn slice_cols(x: &Tensor, start: usize, end: usize, out_cat: AllocCategory) -> Result<Tensor> {
    let (m, n) = x.check_2d("slice_cols")?;
    if start > end || end > n {
        return Err(Error::IndexOutOfRange(format!(
            "slice_cols: [{start}, {end}) of {n} cols"
        )));
    }
    let w = end - start;
    let mut data = Vec::with_capacity(m * w);
    for r in 0..m {
        data.extend_from_slice(&x.data()[r * n + start..r * n + end]);
    }
    Ok(Tensor::from_vec(&[m, w], data, out_cat))
}

/// Numerically stable softmax along the last axis. `axis` must name the last
/// axis; other axes are not supported.
pub fn softmax(x: &Tensor, axis: usize, out_cat: AllocCategory) -> Result<Tensor> {
    let rank = x.shape().len().max(1);
    if axis + 1 != rank {
        return Err(Error::Dimension(format!(
            "softmax: axis {axis} is not the last axis of shape {:?}",
            x.shape()
        )));
    }
    let n = *x.shape().last().unwrap_or(&0);
    if n == 0 {
        return Err(Error::Dimension("softmax: empty axis".into()));
    }
    let mut out = Tensor::zeros(x.shape(), out_cat);
    let rows = x.numel() / n;
    for r in 0..rows {
        let row = &x.data()[r * n..(r + 1) * n];
        let orow = &mut out.data_mut()[r * n..(r + 1) * n];
        softmax_row_into(row, orow);
    }
    Ok(out)
}

/// One softmax row: max-subtracted, f64 accumulation.
pub fn softmax_row_into(row: &[f32], out: &mut [f32]) {
    let mut maxv = f32::NEG_INFINITY;
    for &v in row {
        if v > maxv {
            maxv = v;
        }
    }
    let mut denom = 0.0f64;
    for &v in row {
        denom += f64::from(v - maxv).exp();
    }
    let inv = 1.0 / denom;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (f64::from(v - maxv).exp() * inv) as f32;
    }
}

/// RMS normalization per row with learned per-column weights:
/// y = x / rms(x) * w. Returns (y, inv_rms per row).
pub fn rms_norm(x: &Tensor, w: &Tensor, eps: f32, out_cat: AllocCategory) -> Result<(Tensor, Vec<f32>)> {
    let (m, n) = x.check_2d("rms_norm input")?;
    if w.numel() != n {
        return Err(Error::Dimension(format!(
            "rms_norm: weight length {} != row width {n}",
            w.numel()
        )));
    }
    let mut out = Tensor::zeros(x.shape(), out_cat);
    let mut inv_rms = Vec::with_capacity(m);
    for r in 0..m {
        let row = &x.data()[r * n..(r + 1) * n];
        let mut ms = 0.0f64;
        for &v in row {
            ms += f64::from(v) * f64::from(v);
        }
        let inv = 1.0 / ((ms / n as f64) + f64::from(eps)).sqrt();
        inv_rms.push(inv as f32);
        let orow = &mut out.data_mut()[r * n..(r + 1) * n];
        for ((o, &v), &wv) in orow.iter_mut().zip(row).zip(w.data()) {
            *o = ((f64::from(v) * inv) as f32) * wv;
        }
    }
    Ok((out, inv_rms))
}

/// x · σ(x), elementwise.
pub fn silu(x: &Tensor, out_cat: AllocCategory) -> Tensor {
    let data: Vec<f32> = x.data().iter().map(|&v| v * sigmoid(v)).collect();
    Tensor::from_vec(x.shape(), data, out_cat)
}

pub fn sigmoid(v: f32) -> f32 {
    (1.0 / (1.0 + f64::from(-v).exp())) as f32
}

/// Gather rows of `table` by token id.
pub fn embedding_lookup(table: &Tensor, ids: &[u32], out_cat: AllocCategory) -> Result<Tensor> {
    let (v, d) = table.check_2d("embedding table")?;
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        let id = id as usize;
        if id >= v {
            return Err(Error::IndexOutOfRange(format!(
                "embedding_lookup: id {id} ≥ vocab {v}"
            )));
        }
        data.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    Ok(Tensor::from_vec(&[ids.len(), d], data, out_cat))
}

/// Per-row sums: [m, n] → [m, 1], f64 accumulation.
pub fn row_sums(x: &Tensor, out_cat: AllocCategory) -> Result<Tensor> {
    let (m, n) = x.check_2d("row_sums")?;
    let mut data = Vec::with_capacity(m);
    for r in 0..m {
        let mut acc = 0.0f64;
        for &v in &x.data()[r * n..(r + 1) * n] {
            acc += f64::from(v);
        }
        data.push(acc as f32);
    }
    Ok(Tensor::from_vec(&[m, 1], data, out_cat))
}

/// Scale each row of `x` by the matching entry of the column vector `col`.
pub fn scale_rows(x: &Tensor, col: &Tensor, out_cat: AllocCategory) -> Result<Tensor> {
    let (m, n) = x.check_2d("scale_rows input")?;
    if col.numel() != m {
        return Err(Error::Dimension(format!(
            "scale_rows: column has {} entries for {m} rows",
            col.numel()
        )));
    }
    let mut out = Tensor::zeros(x.shape(), out_cat);
    for r in 0..m {
        let c = col.data()[r];
        let xrow = &x.data()[r * n..(r + 1) * n];
        let orow = &mut out.data_mut()[r * n..(r + 1) * n];
        for (o, &v) in orow.iter_mut().zip(xrow) {
            *o = v * c;
        }
    }
    Ok(out)
}

/// Rotary position embedding over pairs of adjacent columns. `positions`
/// gives the rotation index per row. Set `invert` to rotate backwards (the
/// gradient direction).
pub fn rope(
    x: &Tensor,
    positions: &[u32],
    base: f32,
    invert: bool,
    out_cat: AllocCategory,
) -> Result<Tensor> {
    let (m, n) = x.check_2d("rope")?;
    if positions.len() != m {
        return Err(Error::Dimension(format!(
            "rope: {} positions for {m} rows",
            positions.len()
        )));
    }
    if n % 2 != 0 {
        return Err(Error::Dimension(format!("rope: odd row width {n}")));
    }
    let mut out = Tensor::zeros(x.shape(), out_cat);
    let half = n / 2;
    for r in 0..m {
        let pos = f64::from(positions[r]);
        let xrow = &x.data()[r * n..(r + 1) * n];
        let orow = &mut out.data_mut()[r * n..(r + 1) * n];
        for i in 0..half {
            let theta = pos / f64::from(base).powf(2.0 * i as f64 / n as f64);
            let (sin, cos) = if invert {
                ((-theta).sin(), (-theta).cos())
            } else {
                (theta.sin(), theta.cos())
            };
            let a = f64::from(xrow[2 * i]);
            let b = f64::from(xrow[2 * i + 1]);
            orow[2 * i] = (a * cos - b * sin) as f32;
            orow[2 * i + 1] = (a * sin + b * cos) as f32;
        }
    }
    Ok(out)
}

/// Argmax with lowest-index tie-break.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    let mut bestv = f32::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > bestv {
            bestv = v;
            best = i;
        }
    }
    best
}

/// Allocate a metered scratch f32 buffer (registered under Scratch for its
/// lifetime via the returned tensor).
pub fn scratch(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape, SCRATCH)
}
