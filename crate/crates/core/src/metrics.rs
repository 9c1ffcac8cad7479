//! Clustering evaluation: best-map accuracy and normalized mutual information.

use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Minimum-cost perfect assignment. Returns `assignment[row] = col` and the
/// total cost. Rectangular inputs are padded with zero-cost dummy rows or
/// columns; rows matched to a dummy column map to `usize::MAX`.
pub fn hungarian(cost: &Matrix) -> (Vec<usize>, f64) {
    let (rows, cols) = cost.dim();
    let n = rows.max(cols);
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let at = |i: usize, j: usize| {
        if i < rows && j < cols {
            cost[[i, j]]
        } else {
            0.0
        }
    };

    // shortest augmenting path with potentials, 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![usize::MAX; rows];
    let mut total = 0.0;
    for j in 1..=n {
        let i = matched_row[j];
        if i >= 1 && i - 1 < rows && j - 1 < cols {
            assignment[i - 1] = j - 1;
            total += cost[[i - 1, j - 1]];
        }
    }
    (assignment, total)
}

fn check_lengths(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::domain(format!(
            "label vectors differ in length: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::domain("label vectors are empty"));
    }
    Ok(())
}

/// Counts of (pred, truth) label pairs.
pub fn contingency(pred: &[usize], truth: &[usize]) -> Matrix {
    let kp = pred.iter().max().map_or(0, |m| m + 1);
    let kt = truth.iter().max().map_or(0, |m| m + 1);
    let mut table = Matrix::zeros((kp, kt));
    for (&p, &t) in pred.iter().zip(truth) {
        table[[p, t]] += 1.0;
    }
    table
}

/// Fraction of samples correct under the best one-to-one relabeling of the
/// predicted clusters.
pub fn clustering_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let table = contingency(pred, truth);
    let (_, total) = hungarian(&table.mapv(|c| -c));
    Ok(-total / pred.len() as f64)
}

fn entropy(counts: impl Iterator<Item = f64>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0.0)
        .map(|c| {
            let p = c / n;
            -p * p.ln()
        })
        .sum()
}

/// `I(pred; truth) / sqrt(H(pred)·H(truth))`, natural logarithms.
///
/// Two constant labelings give 1; exactly one constant labeling gives 0.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let n = pred.len() as f64;
    let table = contingency(pred, truth);
    let row_sums: Vec<f64> = table.rows().into_iter().map(|r| r.sum()).collect();
    let col_sums: Vec<f64> = table.columns().into_iter().map(|c| c.sum()).collect();
    let hp = entropy(row_sums.iter().copied(), n);
    let ht = entropy(col_sums.iter().copied(), n);
    if hp == 0.0 && ht == 0.0 {
        return Ok(1.0);
    }
    if hp == 0.0 || ht == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for ((i, j), &c) in table.indexed_iter() {
        if c > 0.0 {
            mi += (c / n) * (c * n / (row_sums[i] * col_sums[j])).ln();
        }
    }
    Ok((mi / (hp * ht).sqrt()).clamp(0.0, 1.0))
}
