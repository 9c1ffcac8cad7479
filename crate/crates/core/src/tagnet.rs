//! The unrolled network: `K` shrinkage stages sharing `S` and `θ`, each
//! stage after the first fed by the input projection `W·X`, the recurrent
//! `S` branch and the fixed graph branch `Z ↦ -(α/N)·Z·L`.

use ndarray::{Axis, Zip};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, Vector};
use crate::sparse::{shrink_decomposed_unchecked, Dictionary};

/// Lower bound on every threshold, enforced after each update.
pub const THETA_FLOOR: f64 = 1e-6;
pub const DEFAULT_STAGES: usize = 2;

/// Trainable network state. `S` and `θ` are shared by all stages; `θ` is
/// stored as `log θ` so that gradient steps keep it positive.
#[derive(Clone, Debug, PartialEq)]
pub struct TagNetParams {
    /// Input projection, `p × m`.
    pub w: Matrix,
    /// Recurrent mixing, `p × p`.
    pub s: Matrix,
    log_theta: Vector,
    pub stages: usize,
    pub alpha: f64,
    /// Step bound `N` fixed at initialization; scales the graph branch.
    pub lipschitz: f64,
}

impl TagNetParams {
    pub fn new(
        w: Matrix,
        s: Matrix,
        theta: &[f64],
        stages: usize,
        alpha: f64,
        lipschitz: f64,
    ) -> Result<Self> {
        let p = w.nrows();
        if s.dim() != (p, p) || theta.len() != p {
            return Err(Error::domain(format!(
                "inconsistent shapes: W {:?}, S {:?}, θ {}",
                w.dim(),
                s.dim(),
                theta.len()
            )));
        }
        if stages == 0 {
            return Err(Error::domain("at least one stage is required"));
        }
        if !(alpha >= 0.0) || !(lipschitz > 0.0) {
            return Err(Error::domain("alpha must be nonnegative and N positive"));
        }
        if theta.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::domain("thresholds must be positive"));
        }
        let log_theta = theta.iter().map(|t| t.max(THETA_FLOOR).ln()).collect();
        Ok(TagNetParams {
            w,
            s,
            log_theta,
            stages,
            alpha,
            lipschitz,
        })
    }

    pub fn from_log_theta(
        w: Matrix,
        s: Matrix,
        log_theta: Vector,
        stages: usize,
        alpha: f64,
        lipschitz: f64,
    ) -> Result<Self> {
        let theta: Vec<f64> = log_theta.iter().map(|v| v.exp()).collect();
        let mut params = TagNetParams::new(w, s, &theta, stages, alpha, lipschitz)?;
        params.set_log_theta(log_theta);
        Ok(params)
    }

    /// Code dimension `p`.
    pub fn code_dim(&self) -> usize {
        self.w.nrows()
    }

    /// Input dimension `m`.
    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn theta(&self) -> Vec<f64> {
        self.log_theta
            .iter()
            .map(|v| v.exp().max(THETA_FLOOR))
            .collect()
    }

    pub fn log_theta(&self) -> &Vector {
        &self.log_theta
    }

    pub fn set_log_theta(&mut self, v: Vector) {
        let floor = THETA_FLOOR.ln();
        self.log_theta = v.mapv(|x| x.max(floor));
    }

    /// Coefficient `α/N` of the graph branch.
    pub fn graph_scale(&self) -> f64 {
        self.alpha / self.lipschitz
    }
}

/// `W = Dᵀ/N`, `S = I - DᵀD/N`, `θ = λ/N` with `N` the safety-scaled bound
/// on `λ_max(DᵀD)`.
pub fn init_from_dictionary(
    dict: &Dictionary,
    lambda: f64,
    alpha: f64,
    stages: usize,
) -> Result<TagNetParams> {
    init_with_lipschitz(dict, lambda, alpha, stages, dict.lipschitz()?)
}

/// Same as [`init_from_dictionary`] with a caller-supplied `N`.
pub fn init_with_lipschitz(
    dict: &Dictionary,
    lambda: f64,
    alpha: f64,
    stages: usize,
    lipschitz: f64,
) -> Result<TagNetParams> {
    if !(lambda > 0.0) {
        return Err(Error::domain(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    if !(lipschitz > 0.0) {
        return Err(Error::domain("N must be positive"));
    }
    let d = dict.atoms();
    let p = dict.len();
    let w = d.t().mapv(|v| v / lipschitz);
    let s = Matrix::eye(p) - dict.gram() / lipschitz;
    let theta = vec![lambda / lipschitz; p];
    TagNetParams::new(w, s, &theta, stages, alpha, lipschitz)
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct StageActivations {
    pub input: Matrix,
    pub laplacian: Matrix,
    /// `U_k`, one per stage; `U_1 = W·X`.
    pub pre: Vec<Matrix>,
    /// `Z_k = h_θ(U_k)`; the last one is the network output `A`.
    pub post: Vec<Matrix>,
}

impl StageActivations {
    pub fn output(&self) -> &Matrix {
        self.post.last().expect("at least one stage")
    }
}

fn check_batch(params: &TagNetParams, x: &Matrix, l: Option<&Matrix>) -> Result<()> {
    if x.nrows() != params.input_dim() {
        return Err(Error::domain(format!(
            "batch has {} rows, network expects {}",
            x.nrows(),
            params.input_dim()
        )));
    }
    if let Some(l) = l {
        let b = x.ncols();
        if l.dim() != (b, b) {
            return Err(Error::domain(format!(
                "Laplacian is {:?}, batch has {b} samples",
                l.dim()
            )));
        }
    }
    Ok(())
}

/// Runs all stages on the columns of `x`, with `l` the Laplacian restricted
/// to those samples.
pub fn forward(params: &TagNetParams, x: &Matrix, l: &Matrix) -> Result<StageActivations> {
    check_batch(params, x, Some(l))?;
    let theta = params.theta();
    let c = params.graph_scale();
    let wx = params.w.dot(x);
    let mut pre = Vec::with_capacity(params.stages);
    let mut post = Vec::with_capacity(params.stages);
    post.push(shrink_decomposed_unchecked(&wx, &theta));
    pre.push(wx.clone());
    for _ in 1..params.stages {
        let z = post.last().unwrap();
        let mut u = &wx + &params.s.dot(z);
        let zl = z.dot(l);
        Zip::from(&mut u).and(&zl).for_each(|u, &g| *u -= c * g);
        post.push(shrink_decomposed_unchecked(&u, &theta));
        pre.push(u);
    }
    Ok(StageActivations {
        input: x.clone(),
        laplacian: l.clone(),
        pre,
        post,
    })
}

/// Forward pass of the same network with the graph branch removed: the
/// learned-ISTA network with weights `W`, `S`, `θ`.
pub fn forward_without_graph(params: &TagNetParams, x: &Matrix) -> Result<Matrix> {
    check_batch(params, x, None)?;
    let theta = params.theta();
    let wx = params.w.dot(x);
    let mut z = shrink_decomposed_unchecked(&wx, &theta);
    for _ in 1..params.stages {
        let u = &wx + &params.s.dot(&z);
        z = shrink_decomposed_unchecked(&u, &theta);
    }
    Ok(z)
}

/// Stage outputs `Z_1..Z_K`; the last tap is the network output.
pub fn stage_taps(acts: &StageActivations) -> &[Matrix] {
    &acts.post
}

/// Gradients with respect to the shared parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub w: Matrix,
    pub s: Matrix,
    /// Gradient with respect to `θ` itself (not `log θ`).
    pub theta: Vector,
}

#[derive(Clone, Debug)]
pub struct BackwardResult {
    pub grads: ParamGrads,
    /// Gradient with respect to the network input.
    pub input: Matrix,
}

/// Backpropagates a gradient on the network output.
pub fn backward(
    params: &TagNetParams,
    acts: &StageActivations,
    grad_a: &Matrix,
) -> Result<BackwardResult> {
    let mut taps: Vec<Option<&Matrix>> = vec![None; acts.post.len()];
    *taps.last_mut().unwrap() = Some(grad_a);
    backward_taps(params, acts, &taps)
}

/// Backpropagates gradients arriving at any subset of stage taps. Shared
/// parameters accumulate the contributions of every stage.
pub fn backward_taps(
    params: &TagNetParams,
    acts: &StageActivations,
    tap_grads: &[Option<&Matrix>],
) -> Result<BackwardResult> {
    let stages = acts.post.len();
    if tap_grads.len() != stages {
        return Err(Error::domain(format!(
            "{} tap gradients for {stages} stages",
            tap_grads.len()
        )));
    }
    let shape = acts.post[0].dim();
    for g in tap_grads.iter().flatten() {
        if g.dim() != shape {
            return Err(Error::domain(format!(
                "tap gradient is {:?}, expected {shape:?}",
                g.dim()
            )));
        }
    }
    let theta = params.theta();
    let c = params.graph_scale();
    let (p, _) = shape;

    let mut g_s = Matrix::zeros((p, p));
    let mut g_theta = Vector::zeros(p);
    let mut sum_gu = Matrix::zeros(shape);
    let mut carry: Option<Matrix> = None;

    for k in (0..stages).rev() {
        let gz = match (carry.take(), tap_grads[k]) {
            (Some(mut c), Some(t)) => {
                c += t;
                c
            }
            (Some(c), None) => c,
            (None, Some(t)) => t.clone(),
            (None, None) => continue,
        };
        let u = &acts.pre[k];
        let mut gu = gz;
        for ((mut gu_row, u_row), (&t, gt)) in gu
            .axis_iter_mut(Axis(0))
            .zip(u.axis_iter(Axis(0)))
            .zip(theta.iter().zip(g_theta.iter_mut()))
        {
            let inv = 1.0 / t;
            for (g, &uv) in gu_row.iter_mut().zip(u_row.iter()) {
                // active exactly where the forward unit-threshold neuron is
                if (uv * inv).abs() > 1.0 {
                    *gt -= *g * uv.signum();
                } else {
                    *g = 0.0;
                }
            }
        }
        sum_gu += &gu;
        if k > 0 {
            let z_prev = &acts.post[k - 1];
            g_s += &gu.dot(&z_prev.t());
            let mut back = params.s.t().dot(&gu);
            let graph = gu.dot(&acts.laplacian.t());
            Zip::from(&mut back)
                .and(&graph)
                .for_each(|b, &g| *b -= c * g);
            carry = Some(back);
        }
    }
    let g_w = sum_gu.dot(&acts.input.t());
    let g_x = params.w.t().dot(&sum_gu);
    Ok(BackwardResult {
        grads: ParamGrads {
            w: g_w,
            s: g_s,
            theta: g_theta,
        },
        input: g_x,
    })
}
