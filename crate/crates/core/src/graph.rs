//! Gaussian-kernel affinity graphs and their unnormalized Laplacians.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{is_symmetric, Matrix, Rng};

/// Largest sample count for which a dense graph is built.
pub const DEFAULT_MAX_NODES: usize = 20_000;
pub const DEFAULT_BANDWIDTH_PAIRS: usize = 10_000;

/// Affinity `P`, Laplacian `L = Deg(P) - P` and the kernel bandwidth used.
#[derive(Clone, Debug)]
pub struct GraphPair {
    pub affinity: Matrix,
    pub laplacian: Matrix,
    pub bandwidth: f64,
}

impl GraphPair {
    /// Builds the graph over the columns of `x`. `bandwidth = None` selects
    /// the median heuristic.
    pub fn build(
        x: &Matrix,
        bandwidth: Option<f64>,
        max_nodes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let n = x.ncols();
        if n > max_nodes {
            return Err(Error::Config(format!(
                "{n} samples exceed the dense graph limit of {max_nodes}; subsample first"
            )));
        }
        let bandwidth = match bandwidth {
            Some(d) => d,
            None => median_bandwidth(x, DEFAULT_BANDWIDTH_PAIRS, rng)?,
        };
        let affinity = build_affinity(x, bandwidth)?;
        let laplacian = build_laplacian(&affinity)?;
        Ok(GraphPair {
            affinity,
            laplacian,
            bandwidth,
        })
    }

    pub fn len(&self) -> usize {
        self.laplacian.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn column_dist_sq(x: &Matrix, i: usize, j: usize) -> f64 {
    x.column(i)
        .iter()
        .zip(x.column(j).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median pairwise Euclidean distance between columns of `x`.
///
/// All pairs are used when there are at most `sample_pairs` of them;
/// otherwise `sample_pairs` pairs `i != j` are drawn uniformly. If more than
/// half of the distances are zero the median of the positive ones is
/// returned instead, so the result is always usable as a bandwidth.
pub fn median_bandwidth(x: &Matrix, sample_pairs: usize, rng: &mut Rng) -> Result<f64> {
    let n = x.ncols();
    if n < 2 {
        return Err(Error::domain("median bandwidth needs at least two samples"));
    }
    if sample_pairs == 0 {
        return Err(Error::domain("sample_pairs must be positive"));
    }
    let total = n * (n - 1) / 2;
    let mut dists = Vec::with_capacity(total.min(sample_pairs));
    if total <= sample_pairs {
        for i in 0..n {
            for j in (i + 1)..n {
                dists.push(column_dist_sq(x, i, j).sqrt());
            }
        }
    } else {
        for _ in 0..sample_pairs {
            let i = rng.below(n);
            let mut j = rng.below(n - 1);
            if j >= i {
                j += 1;
            }
            dists.push(column_dist_sq(x, i, j).sqrt());
        }
    }
    let mut positive: Vec<f64> = dists.iter().copied().filter(|&d| d > 0.0).collect();
    if positive.is_empty() {
        return Err(Error::Degenerate(
            "all sampled pairwise distances are zero".into(),
        ));
    }
    let m = median(&mut dists);
    if m > 0.0 {
        Ok(m)
    } else {
        Ok(median(&mut positive))
    }
}

/// `P_ij = exp(-||x_i - x_j||² / δ²)`, built from the upper triangle and
/// mirrored so that `P == Pᵀ` exactly.
pub fn build_affinity(x: &Matrix, bandwidth: f64) -> Result<Matrix> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::domain(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    let n = x.ncols();
    let gram = x.t().dot(x);
    let inv = 1.0 / (bandwidth * bandwidth);
    let mut p = Matrix::zeros((n, n));
    for i in 0..n {
        p[[i, i]] = 1.0;
        for j in (i + 1)..n {
            let d2 = (gram[[i, i]] + gram[[j, j]] - 2.0 * gram[[i, j]]).max(0.0);
            // keep entries strictly positive even for far-apart pairs
            let v = (-d2 * inv).exp().max(f64::MIN_POSITIVE);
            p[[i, j]] = v;
            p[[j, i]] = v;
        }
    }
    Ok(p)
}

/// Unnormalized Laplacian `Deg(P) - P`.
pub fn build_laplacian(p: &Matrix) -> Result<Matrix> {
    if p.nrows() != p.ncols() {
        return Err(Error::domain("affinity must be square"));
    }
    if !is_symmetric(&p.view(), 1e-12) {
        return Err(Error::domain("affinity must be symmetric"));
    }
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::domain("affinity must be finite and nonnegative"));
    }
    let n = p.nrows();
    let mut l = p.mapv(|v| -v);
    for i in 0..n {
        // self-loops cancel: L_ii = sum over j != i of P_ij
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| p[[i, j]]).sum();
        l[[i, i]] = off;
    }
    Ok(l)
}

/// Principal submatrix of `full` on `indices`, in the given order.
pub fn restrict(full: &Matrix, indices: &[usize]) -> Result<Matrix> {
    let n = full.nrows();
    let mut seen = HashSet::with_capacity(indices.len());
    for &i in indices {
        if i >= n {
            return Err(Error::domain(format!(
                "index {i} out of range for {n} nodes"
            )));
        }
        if !seen.insert(i) {
            return Err(Error::domain(format!("duplicate index {i}")));
        }
    }
    let b = indices.len();
    let mut out = Matrix::zeros((b, b));
    for (r, &i) in indices.iter().enumerate() {
        for (c, &j) in indices.iter().enumerate() {
            out[[r, c]] = full[[i, j]];
        }
    }
    Ok(out)
}

/// Laplacian of the subgraph induced by `indices`, scaled by
/// `(n - 1)/(b - 1)` so that its action on a uniformly drawn batch matches the
/// full Laplacian's in expectation.
pub fn induced_laplacian(affinity: &Matrix, indices: &[usize]) -> Result<Matrix> {
    let sub = restrict(affinity, indices)?;
    let (n, b) = (affinity.nrows(), indices.len());
    if b < 2 {
        return Ok(Matrix::zeros((b, b)));
    }
    let mut l = build_laplacian(&sub)?;
    l *= (n - 1) as f64 / (b - 1) as f64;
    Ok(l)
}

/// Writes a matrix as plain comma-separated rows.
pub fn write_matrix_csv(m: &Matrix, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    out.flush()?;
    Ok(())
}
