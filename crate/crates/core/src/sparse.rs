//! Classical sparse coding: shrinkage, the graph-regularized objective and
//! its fixed-point solver, orthogonal matching pursuit and K-SVD.

use std::collections::HashSet;

use ndarray::{s, ArrayView1, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::{
    frobenius_norm_sq, inner, spectral_bound, Matrix, Rng, Vector, DEFAULT_POWER_ITERS,
    DEFAULT_SAFETY,
};

const UNIT_NORM_TOL: f64 = 1e-10;
/// Fixed seed for power-iteration start vectors inside the solvers, so that
/// solving is a pure function of its inputs.
const SOLVER_POWER_SEED: u64 = 0x5eed_0f_90e4;

/// Dictionary with unit-norm atoms stored as columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Dictionary {
    atoms: Matrix,
}

impl Dictionary {
    /// Wraps `atoms`, checking every column has unit norm.
    pub fn new(atoms: Matrix) -> Result<Self> {
        for (k, col) in atoms.axis_iter(Axis(1)).enumerate() {
            let norm = col.dot(&col).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::domain(format!(
                    "atom {k} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Dictionary { atoms })
    }

    /// Normalizes every column of `m` and applies the sign convention.
    pub fn normalized(mut m: Matrix) -> Result<Self> {
        for (k, mut col) in m.axis_iter_mut(Axis(1)).enumerate() {
            let norm = col.dot(&col).sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::domain(format!("atom {k} cannot be normalized")));
            }
            col /= norm;
        }
        let mut d = Dictionary { atoms: m };
        d.canonicalize_signs();
        Ok(d)
    }

    /// Flips atoms so that the first nonzero entry of each is nonnegative.
    pub fn canonicalize_signs(&mut self) {
        for mut col in self.atoms.axis_iter_mut(Axis(1)) {
            if let Some(first) = col.iter().copied().find(|v| *v != 0.0) {
                if first < 0.0 {
                    col.mapv_inplace(|v| -v);
                }
            }
        }
    }

    pub fn atoms(&self) -> &Matrix {
        &self.atoms
    }

    pub fn into_inner(self) -> Matrix {
        self.atoms
    }

    /// Signal dimension `m`.
    pub fn dim(&self) -> usize {
        self.atoms.nrows()
    }

    /// Atom count `p`.
    pub fn len(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `DᵀD`.
    pub fn gram(&self) -> Matrix {
        self.atoms.t().dot(&self.atoms)
    }

    /// Safety-scaled power-iteration bound on `λ_max(DᵀD)`.
    pub fn lipschitz(&self) -> Result<f64> {
        let mut rng = Rng::new(SOLVER_POWER_SEED);
        spectral_bound(&self.gram(), DEFAULT_POWER_ITERS, DEFAULT_SAFETY, &mut rng)
    }
}

/// How the solver step size `N` is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    /// `N` bounds `λ_max(DᵀD)` only, exactly as the unrolled network uses it.
    PaperN,
    /// `N` also covers the graph term: `λ_max(DᵀD) + α·λ_max(L)`.
    SafeNPlusGraph,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub step_mode: StepMode,
    /// Overrides the computed step bound when set.
    pub lipschitz: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lambda: 0.3,
            alpha: 5.0,
            max_iters: 2000,
            tol: 1e-8,
            step_mode: StepMode::SafeNPlusGraph,
            lipschitz: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.alpha >= 0.0) {
            return Err(Error::domain("lambda and alpha must be nonnegative"));
        }
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(Error::domain(
                "tol must be positive and max_iters at least 1",
            ));
        }
        if let Some(n) = self.lipschitz {
            if !(n > 0.0) {
                return Err(Error::domain("lipschitz override must be positive"));
            }
        }
        Ok(())
    }
}

/// Outcome of [`gsc_solve`].
#[derive(Clone, Debug)]
pub struct SolveReport {
    pub iterations: usize,
    pub converged: bool,
    /// Largest per-entry change of the last iteration.
    pub final_change: f64,
    /// Step bound `N` actually used.
    pub lipschitz: f64,
    /// Objective of every iterate, starting with `A₀ = 0`.
    pub objective: Vec<f64>,
}

#[inline]
pub(crate) fn soft(u: f64, t: f64) -> f64 {
    let mag = u.abs() - t;
    if mag > 0.0 {
        mag.copysign(u)
    } else {
        0.0
    }
}

fn check_thresholds(u: &Matrix, theta: &[f64]) -> Result<()> {
    if theta.len() != u.nrows() {
        return Err(Error::domain(format!(
            "threshold length {} does not match {} rows",
            theta.len(),
            u.nrows()
        )));
    }
    if let Some(t) = theta.iter().find(|t| !(**t > 0.0)) {
        return Err(Error::domain(format!(
            "thresholds must be positive, got {t}"
        )));
    }
    Ok(())
}

/// Row-wise soft thresholding `sign(u)·(|u| - θ_r)₊`.
pub fn shrink(u: &Matrix, theta: &[f64]) -> Result<Matrix> {
    check_thresholds(u, theta)?;
    let mut out = u.clone();
    for (mut row, &t) in out.axis_iter_mut(Axis(0)).zip(theta) {
        row.mapv_inplace(|v| soft(v, t));
    }
    Ok(out)
}

/// Unit-threshold shrinkage `h₁`.
#[inline]
pub(crate) fn unit_shrink(v: f64) -> f64 {
    soft(v, 1.0)
}

/// Shrinkage written as two diagonal scaling layers around a unit-threshold
/// neuron: `diag(θ)·h₁(diag(1/θ)·u)`.
pub fn shrink_decomposed(u: &Matrix, theta: &[f64]) -> Result<Matrix> {
    check_thresholds(u, theta)?;
    Ok(shrink_decomposed_unchecked(u, theta))
}

pub(crate) fn shrink_decomposed_unchecked(u: &Matrix, theta: &[f64]) -> Matrix {
    let mut out = u.clone();
    for (mut row, &t) in out.axis_iter_mut(Axis(0)).zip(theta) {
        let inv = 1.0 / t;
        row.mapv_inplace(|v| t * unit_shrink(v * inv));
    }
    out
}

fn check_shapes(x: &Matrix, d: &Matrix, a: &Matrix, l: &Matrix) -> Result<()> {
    let (m, n) = x.dim();
    if d.nrows() != m || a.nrows() != d.ncols() || a.ncols() != n || l.dim() != (n, n) {
        return Err(Error::domain(format!(
            "shape mismatch: X {:?}, D {:?}, A {:?}, L {:?}",
            x.dim(),
            d.dim(),
            a.dim(),
            l.dim()
        )));
    }
    Ok(())
}

/// `½||X - DA||²_F + λ Σ_i ||a_i||₁ + (α/2) Tr(A L Aᵀ)`.
pub fn gsc_objective(
    x: &Matrix,
    d: &Matrix,
    a: &Matrix,
    lambda: f64,
    alpha: f64,
    l: &Matrix,
) -> Result<f64> {
    check_shapes(x, d, a, l)?;
    let resid = x - &d.dot(a);
    let l1: f64 = a.iter().map(|v| v.abs()).sum();
    let smooth = if alpha != 0.0 {
        inner(a, &a.dot(l))
    } else {
        0.0
    };
    Ok(0.5 * frobenius_norm_sq(&resid) + lambda * l1 + 0.5 * alpha * smooth)
}

/// One application of the fixed-point map
/// `h_{λ/N}[(I - DᵀD/N) A - A(αL/N) + DᵀX/N]`.
pub fn fixed_point_map(
    x: &Matrix,
    dict: &Dictionary,
    l: &Matrix,
    lambda: f64,
    alpha: f64,
    lipschitz: f64,
    a: &Matrix,
) -> Result<Matrix> {
    let d = dict.atoms();
    check_shapes(x, d, a, l)?;
    let gram = dict.gram();
    let b = d.t().dot(x);
    Ok(map_step(
        a,
        &gram.dot(a),
        &a.dot(l),
        &b,
        lambda,
        alpha,
        lipschitz,
    ))
}

fn map_step(
    a: &Matrix,
    ga: &Matrix,
    al: &Matrix,
    b: &Matrix,
    lambda: f64,
    alpha: f64,
    n: f64,
) -> Matrix {
    let inv = 1.0 / n;
    let graph = alpha * inv;
    let t = lambda * inv;
    let mut out = a.clone();
    ndarray::Zip::from(&mut out)
        .and(ga)
        .and(al)
        .and(b)
        .for_each(|o, &ga, &al, &b| {
            let v = *o - inv * ga - graph * al + inv * b;
            *o = soft(v, t);
        });
    out
}

/// A single ISTA step for the graph-free objective:
/// `h_{λ/N}(A - Dᵀ(DA - X)/N)`.
pub fn ista_step(x: &Matrix, dict: &Dictionary, a: &Matrix, lambda: f64, lipschitz: f64) -> Matrix {
    let d = dict.atoms();
    let grad = d.t().dot(&(d.dot(a) - x));
    let t = lambda / lipschitz;
    let mut out = a - &(grad / lipschitz);
    out.mapv_inplace(|v| soft(v, t));
    out
}

/// Solves the graph-regularized sparse coding problem by iterating the
/// fixed-point map from `A₀ = 0`.
///
/// Stops when the largest per-entry change drops below `cfg.tol`; on
/// hitting `max_iters` (or a non-finite iterate) the last finite iterate is
/// returned with `converged = false`.
pub fn gsc_solve(
    x: &Matrix,
    dict: &Dictionary,
    cfg: &SolverConfig,
    l: &Matrix,
) -> Result<(Matrix, SolveReport)> {
    cfg.validate()?;
    let d = dict.atoms();
    let (_, n) = x.dim();
    let p = dict.len();
    check_shapes(x, d, &Matrix::zeros((p, n)), l)?;

    let gram = dict.gram();
    let lipschitz = match cfg.lipschitz {
        Some(v) => v,
        None => {
            let mut rng = Rng::new(SOLVER_POWER_SEED);
            let base = spectral_bound(&gram, DEFAULT_POWER_ITERS, DEFAULT_SAFETY, &mut rng)?;
            match cfg.step_mode {
                StepMode::PaperN => base,
                StepMode::SafeNPlusGraph if cfg.alpha > 0.0 => {
                    base + cfg.alpha
                        * spectral_bound(l, DEFAULT_POWER_ITERS, DEFAULT_SAFETY, &mut rng)?
                }
                StepMode::SafeNPlusGraph => base,
            }
        }
    };
    if !(lipschitz > 0.0) {
        return Err(Error::Degenerate("dictionary Gram matrix is zero".into()));
    }

    let b = d.t().dot(x);
    let half_xx = 0.5 * frobenius_norm_sq(x);
    let mut a = Matrix::zeros((p, n));
    let mut objective = Vec::new();
    let mut converged = false;
    let mut final_change = f64::INFINITY;
    let mut iterations = 0;

    for _ in 0..cfg.max_iters {
        let ga = gram.dot(&a);
        let al = if cfg.alpha != 0.0 {
            a.dot(l)
        } else {
            Matrix::zeros((p, n))
        };
        // objective of the current iterate from the products already in hand
        let l1: f64 = a.iter().map(|v| v.abs()).sum();
        objective.push(
            half_xx - inner(&a, &b)
                + 0.5 * inner(&a, &ga)
                + cfg.lambda * l1
                + 0.5 * cfg.alpha * inner(&a, &al),
        );
        let next = map_step(&a, &ga, &al, &b, cfg.lambda, cfg.alpha, lipschitz);
        iterations += 1;
        if !next.iter().all(|v| v.is_finite()) {
            break;
        }
        final_change = next
            .iter()
            .zip(a.iter())
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max);
        a = next;
        if final_change < cfg.tol {
            converged = true;
            break;
        }
    }
    objective.push(gsc_objective(x, d, &a, cfg.lambda, cfg.alpha, l)?);

    Ok((
        a,
        SolveReport {
            iterations,
            converged,
            final_change,
            lipschitz,
            objective,
        },
    ))
}

/// Orthogonal matching pursuit with at most `sparsity` atoms.
pub fn omp(x: ArrayView1<f64>, dict: &Dictionary, sparsity: usize) -> Result<Vector> {
    if sparsity == 0 || sparsity > dict.len() {
        return Err(Error::domain(format!(
            "sparsity {sparsity} outside 1..={}",
            dict.len()
        )));
    }
    if x.len() != dict.dim() {
        return Err(Error::domain("signal length does not match dictionary"));
    }
    let corr = dict.atoms().t().dot(&x);
    Ok(batch_omp(corr.view(), &dict.gram(), sparsity))
}

/// OMP driven by the precomputed correlations `Dᵀx` and Gram matrix, with an
/// incrementally updated Cholesky factor of the selected sub-Gram.
fn batch_omp(corr0: ArrayView1<f64>, gram: &Matrix, sparsity: usize) -> Vector {
    let p = corr0.len();
    let mut code = Vector::zeros(p);
    let scale = corr0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return code;
    }
    let mut support: Vec<usize> = Vec::with_capacity(sparsity);
    // lower-triangular Cholesky factor, row-major k×k
    let mut chol: Vec<f64> = Vec::with_capacity(sparsity * sparsity);
    let mut coef: Vec<f64> = Vec::new();
    let mut corr = corr0.to_owned();

    for _ in 0..sparsity {
        let mut best = None;
        let mut best_val = 0.0;
        for (j, &c) in corr.iter().enumerate() {
            if c.abs() > best_val && !support.contains(&j) {
                best_val = c.abs();
                best = Some(j);
            }
        }
        let Some(k) = best else { break };
        if best_val <= 1e-12 * scale {
            break;
        }
        // extend the factor: solve L w = G[S, k]
        let s = support.len();
        let mut w = vec![0.0; s];
        for i in 0..s {
            let mut acc = gram[[support[i], k]];
            for j in 0..i {
                acc -= chol[i * s + j] * w[j];
            }
            w[i] = acc / chol[i * s + i];
        }
        let diag = gram[[k, k]] - w.iter().map(|v| v * v).sum::<f64>();
        if diag <= 1e-10 {
            break;
        }
        let mut next = vec![0.0; (s + 1) * (s + 1)];
        for i in 0..s {
            for j in 0..=i {
                next[i * (s + 1) + j] = chol[i * s + j];
            }
        }
        for (j, wj) in w.iter().enumerate() {
            next[s * (s + 1) + j] = *wj;
        }
        next[s * (s + 1) + s] = diag.sqrt();
        chol = next;
        support.push(k);

        // solve L Lᵀ c = (Dᵀx)[S]
        let s = support.len();
        let mut y = vec![0.0; s];
        for i in 0..s {
            let mut acc = corr0[support[i]];
            for j in 0..i {
                acc -= chol[i * s + j] * y[j];
            }
            y[i] = acc / chol[i * s + i];
        }
        coef = vec![0.0; s];
        for i in (0..s).rev() {
            let mut acc = y[i];
            for j in (i + 1)..s {
                acc -= chol[j * s + i] * coef[j];
            }
            coef[i] = acc / chol[i * s + i];
        }
        // corr = Dᵀx - G[:, S] c
        corr.assign(&corr0);
        for (&j, &c) in support.iter().zip(&coef) {
            corr.scaled_add(-c, &gram.column(j));
        }
    }
    for (&j, &c) in support.iter().zip(&coef) {
        code[j] = c;
    }
    code
}

/// Learned dictionary plus the reconstruction error `½||X - DA||²_F`
/// recorded after every iteration.
#[derive(Clone, Debug)]
pub struct KsvdResult {
    pub dictionary: Dictionary,
    pub errors: Vec<f64>,
}

fn column_key(x: &Matrix, i: usize) -> Vec<u64> {
    x.column(i).iter().map(|v| (v + 0.0).to_bits()).collect()
}

fn sparse_code_all(x: &Matrix, d: &Matrix, sparsity: usize) -> Matrix {
    let corr = d.t().dot(x);
    let gram = d.t().dot(d);
    let cols: Vec<Vector> = (0..x.ncols())
        .into_par_iter()
        .map(|i| batch_omp(corr.column(i), &gram, sparsity))
        .collect();
    let mut codes = Matrix::zeros((d.ncols(), x.ncols()));
    for (i, c) in cols.into_iter().enumerate() {
        codes.column_mut(i).assign(&c);
    }
    codes
}

/// K-SVD dictionary learning with OMP sparse coding.
///
/// Atoms start from `p` distinct random samples. Each iteration codes all
/// samples with OMP, keeping a sample's previous code when it reconstructs
/// better, then refits every atom and its coefficients with a rank-1
/// approximation of the atom's residual. Atoms used by no sample are
/// replaced by the worst-reconstructed sample. The recorded error is
/// therefore non-increasing.
pub fn ksvd(
    x: &Matrix,
    p: usize,
    iters: usize,
    sparsity: usize,
    rng: &mut Rng,
) -> Result<KsvdResult> {
    let (m, n) = x.dim();
    if p == 0 || p > n {
        return Err(Error::domain(format!("atom count {p} must be in 1..={n}")));
    }
    if iters == 0 {
        return Err(Error::domain("ksvd needs at least one iteration"));
    }
    if sparsity == 0 || sparsity > p {
        return Err(Error::domain(format!(
            "sparsity {sparsity} outside 1..={p}"
        )));
    }

    let mut seen = HashSet::new();
    let mut distinct = Vec::new();
    for i in 0..n {
        let norm_sq = x.column(i).dot(&x.column(i));
        if norm_sq > 0.0 && seen.insert(column_key(x, i)) {
            distinct.push(i);
        }
    }
    if distinct.len() < p {
        return Err(Error::Degenerate(format!(
            "{} distinct nonzero samples, need at least {p}",
            distinct.len()
        )));
    }
    rng.shuffle(&mut distinct);
    let mut d = Matrix::zeros((m, p));
    for (k, &i) in distinct[..p].iter().enumerate() {
        let col = x.column(i);
        let norm = col.dot(&col).sqrt();
        d.column_mut(k).assign(&(&col / norm));
    }

    let mut codes: Option<Matrix> = None;
    let mut errors = Vec::with_capacity(iters);
    for _ in 0..iters {
        let mut fresh = sparse_code_all(x, &d, sparsity);
        let mut resid = x - &d.dot(&fresh);
        if let Some(old) = &codes {
            let old_resid = x - &d.dot(old);
            for i in 0..n {
                let e_new = resid.column(i).dot(&resid.column(i));
                let e_old = old_resid.column(i).dot(&old_resid.column(i));
                if e_old < e_new {
                    fresh.column_mut(i).assign(&old.column(i));
                    resid.column_mut(i).assign(&old_resid.column(i));
                }
            }
        }
        let mut c = fresh;

        for k in 0..p {
            let users: Vec<usize> = (0..n).filter(|&i| c[[k, i]] != 0.0).collect();
            if users.is_empty() {
                let mut worst = None;
                let mut worst_err = 0.0;
                for i in 0..n {
                    let e = resid.column(i).dot(&resid.column(i));
                    if e > worst_err {
                        worst_err = e;
                        worst = Some(i);
                    }
                }
                if let Some(w) = worst {
                    let col = x.column(w);
                    let norm = col.dot(&col).sqrt();
                    if norm > 0.0 {
                        d.column_mut(k).assign(&(&col / norm));
                    }
                }
                continue;
            }
            let atom = d.column(k).to_owned();
            let mut e = Matrix::zeros((m, users.len()));
            for (j, &i) in users.iter().enumerate() {
                let mut col = e.column_mut(j);
                col.assign(&resid.column(i));
                col.scaled_add(c[[k, i]], &atom);
            }
            let Some((u, coeff)) = rank_one(&e, atom) else {
                continue;
            };
            for (j, &i) in users.iter().enumerate() {
                c[[k, i]] = coeff[j];
                let mut r = resid.column_mut(i);
                r.assign(&e.column(j));
                r.scaled_add(-coeff[j], &u);
            }
            d.column_mut(k).assign(&u);
        }
        errors.push(0.5 * frobenius_norm_sq(&resid));
        codes = Some(c);
    }

    let mut dictionary = Dictionary { atoms: d };
    dictionary.canonicalize_signs();
    Ok(KsvdResult { dictionary, errors })
}

/// Leading left singular vector of `e` (unit norm) and the matching
/// coefficients `eᵀu`, by power iteration warm-started at `start`.
fn rank_one(e: &Matrix, start: Vector) -> Option<(Vector, Vector)> {
    let mut u = start;
    let mut coeff = e.t().dot(&u);
    let mut energy = coeff.dot(&coeff);
    if energy == 0.0 {
        return None;
    }
    for _ in 0..100 {
        let w = e.dot(&coeff);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            break;
        }
        let cand = w / norm;
        let cand_coeff = e.t().dot(&cand);
        let cand_energy = cand_coeff.dot(&cand_coeff);
        if cand_energy < energy {
            break;
        }
        let gain = cand_energy - energy;
        u = cand;
        coeff = cand_coeff;
        energy = cand_energy;
        if gain <= 1e-14 * energy {
            break;
        }
    }
    Some((u, coeff))
}

/// Codes every column with OMP against `dict`.
pub fn omp_all(x: &Matrix, dict: &Dictionary, sparsity: usize) -> Result<Matrix> {
    if sparsity == 0 || sparsity > dict.len() {
        return Err(Error::domain(format!(
            "sparsity {sparsity} outside 1..={}",
            dict.len()
        )));
    }
    if x.nrows() != dict.dim() {
        return Err(Error::domain("signal length does not match dictionary"));
    }
    Ok(sparse_code_all(x, dict.atoms(), sparsity))
}

/// Copies the first `k` atoms; used to cap `p` when data is small.
pub fn truncate_atoms(dict: &Dictionary, k: usize) -> Dictionary {
    Dictionary {
        atoms: dict.atoms().slice(s![.., ..k.min(dict.len())]).to_owned(),
    }
}
