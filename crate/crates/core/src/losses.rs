//! Clustering-oriented loss heads on top of the learned codes.
//!
//! Both heads score sample `a_i` against cluster `j` with `f_j(a_i) = ω_jᵀa_i`
//! (no bias). The entropy head turns negated scores into a softmax and
//! minimizes its entropy; the max-margin head applies a multiclass hinge
//! between the best and runner-up cluster. Ties always go to the smallest
//! cluster index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{frobenius_norm_sq, select_columns, Matrix, Rng};

pub const DEFAULT_MARGIN_REG: f64 = 0.01;
pub const HEAD_INIT_SCALE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Entropy minimization.
    Eml,
    /// Max-margin hinge.
    Mml,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Eml => "EML",
            LossKind::Mml => "MML",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "eml" => Ok(LossKind::Eml),
            "mml" => Ok(LossKind::Mml),
            other => Err(Error::Config(format!("unknown loss kind '{other}'"))),
        }
    }
}

/// Per-cluster weight vectors as columns of a `p × clusters` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LossHead {
    pub weights: Matrix,
    pub kind: LossKind,
    /// Weight of `½||ω||²` in the max-margin loss; ignored by EML.
    pub reg: f64,
}

impl LossHead {
    pub fn new(weights: Matrix, kind: LossKind, reg: f64) -> Result<Self> {
        if weights.ncols() < 2 {
            return Err(Error::domain("a loss head needs at least two clusters"));
        }
        if !weights.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("head weights must be finite"));
        }
        if !(reg >= 0.0) {
            return Err(Error::domain("regularizer weight must be nonnegative"));
        }
        Ok(LossHead { weights, kind, reg })
    }

    pub fn clusters(&self) -> usize {
        self.weights.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// Loss value with gradients for the features and the head weights.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub grad_features: Matrix,
    pub grad_weights: Matrix,
}

fn scores(a: &Matrix, head: &LossHead) -> Result<Matrix> {
    if a.nrows() != head.feature_dim() {
        return Err(Error::domain(format!(
            "features have {} rows, head expects {}",
            a.nrows(),
            head.feature_dim()
        )));
    }
    // n × clusters
    Ok(a.t().dot(&head.weights))
}

fn finish(a: &Matrix, head: &LossHead, loss: f64, grad_scores: Matrix) -> LossEval {
    LossEval {
        loss,
        grad_features: head.weights.dot(&grad_scores.t()),
        grad_weights: a.dot(&grad_scores),
    }
}

/// Row-wise log-softmax of the negated scores.
fn log_probs(s: &Matrix) -> Matrix {
    let mut out = s.clone();
    for mut row in out.rows_mut() {
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        // shift so the largest logit (-min) is zero
        let lse = row.iter().map(|v| (min - v).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| (min - v) - lse);
    }
    out
}

/// Soft assignments `p_ij ∝ exp(-ω_jᵀa_i)`, one row per sample.
pub fn eml_probabilities(a: &Matrix, head: &LossHead) -> Result<Matrix> {
    Ok(log_probs(&scores(a, head)?).mapv(f64::exp))
}

/// Summed entropy of the soft assignments, `-Σ_i Σ_j p_ij log p_ij`.
pub fn eml_loss(a: &Matrix, head: &LossHead) -> Result<LossEval> {
    if head.kind != LossKind::Eml {
        return Err(Error::domain("eml_loss called with a max-margin head"));
    }
    let s = scores(a, head)?;
    let logp = log_probs(&s);
    let mut grad = Matrix::zeros(s.dim());
    let mut loss = 0.0;
    for (i, lrow) in logp.rows().into_iter().enumerate() {
        // p log p with log p finite, so underflowed p contributes exactly 0
        let h: f64 = -lrow.iter().map(|&l| l.exp() * l).sum::<f64>();
        loss += h;
        // ∂H/∂s_ij = p_ij (log p_ij + H_i)
        for (j, &l) in lrow.iter().enumerate() {
            grad[[i, j]] = l.exp() * (l + h);
        }
    }
    Ok(finish(a, head, loss, grad))
}

/// Index of the largest and the runner-up score, smallest index on ties.
fn top_two(row: ndarray::ArrayView1<f64>) -> (usize, usize) {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    let mut second = if best == 0 { 1 } else { 0 };
    for (j, &v) in row.iter().enumerate() {
        if j != best && v > row[second] {
            second = j;
        }
    }
    (best, second)
}

/// `(λ_ω/2)||ω||² + Σ_i max(0, 1 + f_{r_i}(a_i) - f_{y_i}(a_i))`, with the
/// winner `y_i` and runner-up `r_i` held fixed for the subgradient.
pub fn mml_loss(a: &Matrix, head: &LossHead) -> Result<LossEval> {
    if head.kind != LossKind::Mml {
        return Err(Error::domain("mml_loss called with an entropy head"));
    }
    let s = scores(a, head)?;
    let mut grad = Matrix::zeros(s.dim());
    let mut loss = 0.5 * head.reg * frobenius_norm_sq(&head.weights);
    for (i, row) in s.rows().into_iter().enumerate() {
        let (y, r) = top_two(row);
        let hinge = 1.0 + row[r] - row[y];
        if hinge > 0.0 {
            loss += hinge;
            grad[[i, r]] += 1.0;
            grad[[i, y]] -= 1.0;
        }
    }
    let mut eval = finish(a, head, loss, grad);
    eval.grad_weights.scaled_add(head.reg, &head.weights);
    Ok(eval)
}

pub fn evaluate(a: &Matrix, head: &LossHead) -> Result<LossEval> {
    match head.kind {
        LossKind::Eml => eml_loss(a, head),
        LossKind::Mml => mml_loss(a, head),
    }
}

/// Loss value only.
pub fn loss_value(a: &Matrix, head: &LossHead) -> Result<f64> {
    Ok(evaluate(a, head)?.loss)
}

/// Cluster labels: EML picks the most probable cluster (smallest score),
/// MML the largest score.
pub fn predict(a: &Matrix, head: &LossHead) -> Result<Vec<usize>> {
    let s = scores(a, head)?;
    Ok(s.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                let better = match head.kind {
                    LossKind::Eml => v < row[best],
                    LossKind::Mml => v > row[best],
                };
                if better {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// SGD settings for fitting a head on fixed features.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadInitConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub reg: f64,
}

impl Default for HeadInitConfig {
    fn default() -> Self {
        HeadInitConfig {
            epochs: 50,
            learning_rate: 0.01,
            batch_size: 128,
            reg: DEFAULT_MARGIN_REG,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadInit {
    pub head: LossHead,
    /// Mean per-sample loss on all of `a`, before training and after each epoch.
    pub losses: Vec<f64>,
}

/// Draws `ω` at scale 0.01 and fits it by minibatch SGD on the chosen loss
/// with the features `a` held fixed. Batch gradients are averaged.
pub fn init_head(
    a: &Matrix,
    clusters: usize,
    kind: LossKind,
    cfg: &HeadInitConfig,
    rng: &mut Rng,
) -> Result<HeadInit> {
    if clusters < 2 {
        return Err(Error::domain("a loss head needs at least two clusters"));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::domain(
            "head init needs a positive batch size and learning rate",
        ));
    }
    let n = a.ncols();
    let weights = rng.normal_matrix(a.nrows(), clusters, HEAD_INIT_SCALE);
    let mut head = LossHead::new(weights, kind, cfg.reg)?;
    let norm = 1.0 / n.max(1) as f64;
    let mut losses = vec![loss_value(a, &head)? * norm];
    for _ in 0..cfg.epochs {
        let order = rng.permutation(n);
        for batch in order.chunks(cfg.batch_size) {
            let ab = select_columns(a, batch);
            let eval = evaluate(&ab, &head)?;
            let step = cfg.learning_rate / batch.len() as f64;
            head.weights.scaled_add(-step, &eval.grad_weights);
        }
        losses.push(loss_value(a, &head)? * norm);
    }
    Ok(HeadInit { head, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn head(w: Matrix, kind: LossKind) -> LossHead {
        LossHead::new(w, kind, 0.0).unwrap()
    }

    #[test]
    fn uniform_entropy() {
        let h = head(Matrix::zeros((3, 2)), LossKind::Eml);
        let ev = eml_loss(&array![[1.0], [2.0], [-1.0]], &h).unwrap();
        assert!((ev.loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = Rng::new(3);
        let a = rng.normal_matrix(4, 9, 30.0);
        let h = head(rng.normal_matrix(4, 5, 3.0), LossKind::Eml);
        let p = eml_probabilities(&a, &h).unwrap();
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let ev = eml_loss(&a, &h).unwrap();
        assert!(ev.loss.is_finite() && ev.loss >= 0.0);
    }

    #[test]
    fn hinge_examples() {
        // single feature equal to 1 so that scores equal the weights
        let a = array![[1.0]];
        let h = head(array![[2.0, 0.5]], LossKind::Mml);
        assert_eq!(mml_loss(&a, &h).unwrap().loss, 0.0);
        let h = head(array![[1.2, 1.0]], LossKind::Mml);
        assert!((mml_loss(&a, &h).unwrap().loss - 0.8).abs() < 1e-12);
    }

    #[test]
    fn hinge_zero_weights_tie() {
        let a = array![[1.0, -2.0], [0.5, 3.0]];
        let h = LossHead::new(Matrix::zeros((2, 3)), LossKind::Mml, 0.5).unwrap();
        let ev = mml_loss(&a, &h).unwrap();
        assert_eq!(ev.loss, 2.0);
        // winner 0, runner-up 1 for both samples
        let gw = &ev.grad_weights;
        assert_eq!(gw.column(0).to_vec(), vec![-(1.0 - 2.0), -(0.5 + 3.0)]);
        assert_eq!(gw.column(1).to_vec(), vec![1.0 - 2.0, 0.5 + 3.0]);
        assert!(gw.column(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prediction_rules() {
        let a = array![[1.0]];
        let w = array![[0.1, 0.9, 0.3]];
        assert_eq!(
            predict(&a, &head(w.clone(), LossKind::Mml)).unwrap(),
            vec![1]
        );
        assert_eq!(predict(&a, &head(w, LossKind::Eml)).unwrap(), vec![0]);
        let flat = array![[0.5, 0.5, 0.5]];
        assert_eq!(
            predict(&a, &head(flat.clone(), LossKind::Mml)).unwrap(),
            vec![0]
        );
        assert_eq!(predict(&a, &head(flat, LossKind::Eml)).unwrap(), vec![0]);
    }

    #[test]
    fn kind_mismatch_and_shape_errors() {
        let h = head(Matrix::zeros((2, 2)), LossKind::Mml);
        assert!(eml_loss(&Matrix::zeros((2, 1)), &h).is_err());
        assert!(mml_loss(&Matrix::zeros((3, 1)), &h).is_err());
        assert!(LossHead::new(Matrix::zeros((2, 1)), LossKind::Eml, 0.0).is_err());
        assert!("eml".parse::<LossKind>().is_ok());
        assert!("xyz".parse::<LossKind>().is_err());
    }

    #[test]
    fn zero_epoch_init_is_reproducible() {
        let a = Rng::new(1).normal_matrix(5, 20, 1.0);
        let cfg = HeadInitConfig {
            epochs: 0,
            ..HeadInitConfig::default()
        };
        let h1 = init_head(&a, 3, LossKind::Eml, &cfg, &mut Rng::new(42)).unwrap();
        let h2 = init_head(&a, 3, LossKind::Eml, &cfg, &mut Rng::new(42)).unwrap();
        assert_eq!(h1.head, h2.head);
        assert_eq!(h1.losses.len(), 1);
        let expect = Rng::new(42).normal_matrix(5, 3, HEAD_INIT_SCALE);
        assert_eq!(h1.head.weights, expect);
    }
}
