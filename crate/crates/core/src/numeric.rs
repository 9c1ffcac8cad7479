//! Dense matrices, seeded randomness and the handful of numeric primitives
//! shared by the solvers and the network.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Row-major dense 64-bit matrix. Columns of data matrices are samples.
pub type Matrix = Array2<f64>;
pub type Vector = Array1<f64>;

pub const DEFAULT_POWER_ITERS: usize = 100;
pub const DEFAULT_SAFETY: f64 = 1.05;

/// Seeded, platform-independent random stream (ChaCha8).
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

/// Complete serializable state of an [`Rng`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub key: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent child stream; the parent is left untouched.
    pub fn derive(&self, tag: u64) -> Rng {
        let key = self.inner.get_seed();
        let base = u64::from_le_bytes(key[..8].try_into().unwrap());
        Rng::new(splitmix64(base ^ splitmix64(tag.wrapping_add(1))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, scale: f64) -> Matrix {
        Matrix::from_shape_simple_fn((rows, cols), || scale * self.normal())
    }

    pub fn state(&self) -> RngState {
        RngState {
            key: self.inner.get_seed(),
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut inner = ChaCha8Rng::from_seed(state.key);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        Rng { inner }
    }
}

pub fn check_square(m: &ArrayView2<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::domain(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

pub fn is_symmetric(m: &ArrayView2<f64>, rel_tol: f64) -> bool {
    let n = m.nrows();
    if n != m.ncols() {
        return false;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (m[[i, j]], m[[j, i]]);
            if (a - b).abs() > rel_tol * a.abs().max(b.abs()).max(1.0) {
                return false;
            }
        }
    }
    true
}

/// Power-iteration estimate of the largest eigenvalue of a symmetric PSD
/// matrix, multiplied by `safety`.
///
/// The returned value is the Rayleigh quotient of the last iterate, which
/// approaches `λ_max` from below on PSD input; `safety` supplies the slack
/// needed to use it as an upper bound.
pub fn spectral_bound(m: &Matrix, iters: usize, safety: f64, rng: &mut Rng) -> Result<f64> {
    check_square(&m.view(), "spectral_bound input")?;
    if !is_symmetric(&m.view(), 1e-10) {
        return Err(Error::domain("spectral_bound input must be symmetric"));
    }
    if iters == 0 {
        return Err(Error::domain("spectral_bound needs at least one iteration"));
    }
    if !(safety >= 1.0) {
        return Err(Error::domain(format!("safety factor {safety} < 1")));
    }
    let n = m.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    let mut v = Vector::from_shape_simple_fn(n, || rng.normal());
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 {
        v.fill(1.0 / (n as f64).sqrt());
    } else {
        v /= norm;
    }
    let mut rayleigh = 0.0;
    for _ in 0..iters {
        let w = m.dot(&v);
        rayleigh = v.dot(&w);
        let wn = w.dot(&w).sqrt();
        if wn == 0.0 {
            break;
        }
        v = w / wn;
    }
    Ok(safety * rayleigh.max(0.0))
}

pub fn frobenius_norm_sq(m: &Matrix) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Sum of element-wise products, i.e. `trace(Aᵀ B)`.
pub fn inner(a: &Matrix, b: &Matrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn all_finite(m: &Matrix) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Gather the given columns of `m` in order.
pub fn select_columns(m: &Matrix, cols: &[usize]) -> Matrix {
    let mut out = Matrix::zeros((m.nrows(), cols.len()));
    for (dst, &src) in cols.iter().enumerate() {
        out.column_mut(dst).assign(&m.column(src));
    }
    out
}
