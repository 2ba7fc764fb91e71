//! Dense storage and the elementary kernels shared by every other module.
//!
//! Everything is `f64`. Matrices are plain row-major `Vec<f64>` slices with
//! explicit dimensions; [`Tensor3`] adds the channel-major feature-map layout
//! used by the network.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, Error, Result};

/// Smallest value [`sigmoid`] returns; the largest is `1 - SIGMOID_FLOOR`.
///
/// Both bounds are exactly representable, so the logistic function stays
/// strictly inside `(0, 1)` even where `1 / (1 + e^-x)` rounds to 0 or 1.
pub const SIGMOID_FLOOR: f64 = 1.0 / 9_007_199_254_740_992.0; // 2^-53

/// Logistic function, clamped to `[2^-53, 1 - 2^-53]`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let z = x.exp();
        z / (1.0 + z)
    };
    s.clamp(SIGMOID_FLOOR, 1.0 - SIGMOID_FLOOR)
}

/// Derivative of the logistic function expressed through its output.
#[inline]
pub fn sigmoid_grad_from_output(s: f64) -> f64 {
    s * (1.0 - s)
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `out = W x + b` for a row-major `rows x cols` matrix.
pub fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    debug_assert_eq!(w.len(), out.len() * cols);
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o = b[r] + dot(row, x);
    }
}

/// `out += W^T g` for a row-major `rows x cols` matrix with `g.len() == rows`.
pub fn add_transposed_product(w: &[f64], g: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (r, &gr) in g.iter().enumerate() {
        if gr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += wv * gr;
        }
    }
}

/// `acc += g x^T` (outer product accumulation into a row-major matrix).
pub fn add_outer(acc: &mut [f64], g: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, &gr) in g.iter().enumerate() {
        if gr == 0.0 {
            continue;
        }
        let row = &mut acc[r * cols..(r + 1) * cols];
        for (a, &xv) in row.iter_mut().zip(x) {
            *a += gr * xv;
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A `channels x rows x cols` block of finite reals, channel-major then
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    channels: usize,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(channels: usize, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || rows == 0 || cols == 0 {
            return Err(Error::InvalidConfig(format!(
                "tensor dimensions must be positive, got {channels}x{rows}x{cols}"
            )));
        }
        check_len("Tensor3::new", channels * rows * cols, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor3::new"));
        }
        Ok(Self {
            channels,
            rows,
            cols,
            data,
        })
    }

    pub fn zeros(channels: usize, rows: usize, cols: usize) -> Self {
        Self {
            channels,
            rows,
            cols,
            data: vec![0.0; channels * rows * cols],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of spatial positions (`rows * cols`).
    pub fn positions(&self) -> usize {
        self.rows * self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn index(&self, channel: usize, row: usize, col: usize) -> usize {
        (channel * self.rows + row) * self.cols + col
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[self.index(channel, row, col)]
    }

    /// Channel vector at flat spatial position `p`.
    pub fn position(&self, p: usize) -> Vec<f64> {
        let positions = self.positions();
        (0..self.channels)
            .map(|c| self.data[c * positions + p])
            .collect()
    }

    pub(crate) fn set_position(&mut self, p: usize, values: &[f64]) {
        let positions = self.positions();
        for (c, &v) in values.iter().enumerate() {
            self.data[c * positions + p] = v;
        }
    }

    /// The spatial slice of one channel.
    pub fn channel(&self, c: usize) -> &[f64] {
        let positions = self.positions();
        &self.data[c * positions..(c + 1) * positions]
    }
}

/// Seeded, splittable random source.
///
/// Backed by ChaCha8, which is counter-based: a `(seed, stream)` pair fully
/// determines the sequence on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// An independent generator for sub-task `stream`, derived from the
    /// original seed only (not from how many draws were taken so far).
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Self {
            seed: self.seed ^ stream.rotate_left(17).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            inner,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// One Gaussian draw. `std == 0` returns `mean` exactly without consuming
/// randomness.
pub fn gaussian(rng: &mut Rng, mean: f64, std: f64) -> Result<f64> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "standard deviation must be finite and non-negative, got {std}"
        )));
    }
    if std == 0.0 {
        return Ok(mean);
    }
    Ok(mean + std * rng.standard_normal())
}

/// `len` Gaussian draws with the given spread.
pub fn gaussian_vec(rng: &mut Rng, len: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; len];
    }
    (0..len).map(|_| std * rng.standard_normal()).collect()
}
