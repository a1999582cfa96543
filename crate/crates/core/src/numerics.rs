//! Dense tensor kernels.
//!
//! Everything is `f64`, row-major, rank at most 4. Model code mostly works on
//! flat slices through the `gemm*` helpers; `Tensor` is the exchange type at
//! module boundaries and in checkpoints.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Tensor::new(&[rows.len(), cols], rows.concat())
    }

    /// Draws entries from N(0, scale^2).
    pub fn randn(shape: &[usize], scale: f64, rng: &mut RngState) -> Self {
        let mut t = Tensor::zeros(shape);
        for v in &mut t.data {
            *v = rng.normal() * scale;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} of size {dim}");
            off = off * dim + ix;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.last_dim().max(1))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::Dimension(format!(
            "rank must be 1..={MAX_RANK}, got shape {shape:?}"
        )));
    }
    if shape.contains(&0) {
        return Err(Error::Dimension(format!(
            "all dimensions must be positive, got {shape:?}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Slice kernels. `a` is [m,k], `b` is [k,n] unless stated otherwise.

/// out = a · b
pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm_acc(&mut out, a, b, m, k, n);
    out
}

/// out += a · b
pub fn gemm_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out += aᵀ · b with a: [m,k], b: [m,n], out: [k,n].
pub fn gemm_at_b_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// a · bᵀ with a: [m,n], b: [k,n]; returns [m,k].
pub fn gemm_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    gemm_a_bt_acc(&mut out, a, b, m, n, k);
    out
}

/// out += a · bᵀ with a: [m,n], b: [k,n], out: [m,k].
pub fn gemm_a_bt_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] += dot(arow, &b[j * n..(j + 1) * n]);
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn add_assign(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = if *v == f64::NEG_INFINITY {
            0.0
        } else {
            (*v - max).exp()
        };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Given softmax output `p` and upstream gradient `dp`, returns d(logits).
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner = dot(p, dp);
    p.iter().zip(dp).map(|(pi, di)| pi * (di - inner)).collect()
}

/// Indices of the `k` largest entries, ties broken toward the lower index.
pub fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn tanh(x: f64) -> f64 {
    x.tanh()
}

// ---------------------------------------------------------------------------
// Tensor-level operations.

/// Matrix product. Rank-2 operands multiply directly; a higher-rank left
/// operand is treated as a batch of matrices against a shared right matrix,
/// and two operands with equal leading dims multiply batch-wise.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mismatch = || {
        Error::Dimension(format!(
            "cannot multiply shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        ))
    };
    if a.rank() < 2 || b.rank() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
    let (kb, n) = (b.shape[b.rank() - 2], b.shape[b.rank() - 1]);
    if k != kb {
        return Err(mismatch());
    }
    let lead_a = &a.shape[..a.rank() - 2];
    let lead_b = &b.shape[..b.rank() - 2];
    let batches: usize = lead_a.iter().product();
    let mut shape = lead_a.to_vec();
    shape.extend([m, n]);
    let mut out = vec![0.0; batches * m * n];
    if lead_b.is_empty() {
        for bi in 0..batches {
            gemm_acc(
                &mut out[bi * m * n..(bi + 1) * m * n],
                &a.data[bi * m * k..(bi + 1) * m * k],
                &b.data,
                m,
                k,
                n,
            );
        }
    } else if lead_a == lead_b {
        for bi in 0..batches {
            gemm_acc(
                &mut out[bi * m * n..(bi + 1) * m * n],
                &a.data[bi * m * k..(bi + 1) * m * k],
                &b.data[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
            );
        }
    } else {
        return Err(mismatch());
    }
    Tensor::new(&shape, out)
}

/// Softmax over the last axis.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let mut out = x.clone();
    let n = x.last_dim();
    if n == 0 {
        return Err(Error::Dimension("softmax over an empty axis".into()));
    }
    for row in out.data.chunks_exact_mut(n) {
        softmax_in_place(row);
    }
    Ok(out)
}

/// {0,1} mask with exactly `k` ones per last-axis row at the largest entries.
pub fn topk_mask(x: &Tensor, k: usize) -> Result<Tensor> {
    let n = x.last_dim();
    if k == 0 || k > n {
        return Err(Error::Parameter(format!(
            "top-k requires 1 <= k <= {n}, got k = {k}"
        )));
    }
    let mut out = Tensor::zeros(x.shape());
    for (row, orow) in x.data.chunks_exact(n).zip(out.data.chunks_exact_mut(n)) {
        for i in topk_indices(row, k) {
            orow[i] = 1.0;
        }
    }
    Ok(out)
}

pub fn relu_t(x: &Tensor) -> Tensor {
    x.map(relu)
}

pub fn sigmoid_t(x: &Tensor) -> Tensor {
    x.map(sigmoid)
}

pub fn tanh_t(x: &Tensor) -> Tensor {
    x.map(tanh)
}

/// Row-wise layer normalization followed by the affine `gain`/`bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    if gain.len() != d || bias.len() != d {
        return Err(Error::Dimension(format!(
            "layer_norm width {d} vs gain {:?} / bias {:?}",
            gain.shape(),
            bias.shape()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(d) {
        let (xhat, _) = normalize_row(row, eps);
        for i in 0..d {
            row[i] = xhat[i] * gain.data[i] + bias.data[i];
        }
    }
    Ok(out)
}

/// Returns (x̂, 1/σ) for one row.
pub(crate) fn normalize_row(row: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv_std = 1.0 / (var + eps).sqrt();
    (row.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

/// Fixed sinusoidal position code, `[len, d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

// ---------------------------------------------------------------------------

/// Seeded, platform-stable random stream (ChaCha8).
///
/// `counter` is the position in the underlying word stream, so a state can be
/// reconstructed exactly from `(seed, counter)`.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn at(seed: u64, counter: u64) -> Self {
        let mut state = RngState::new(seed);
        state.rng.set_word_pos(counter as u128);
        state
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.rng.get_word_pos() as u64
    }

    /// Independent stream derived from this seed; does not advance `self`.
    pub fn derive(&self, stream: u64) -> RngState {
        let mut state = RngState::new(self.seed);
        state.rng.set_stream(stream);
        state
    }

    pub fn uniform(&mut self) -> f64 {
        // 53 random bits -> [0, 1)
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
