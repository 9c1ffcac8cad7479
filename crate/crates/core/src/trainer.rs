//! Minibatch SGD over the network and its loss heads.

use std::io::Write;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{induced_laplacian, restrict, GraphPair};
use crate::losses::{evaluate, init_head, loss_value, predict, HeadInitConfig, LossHead, LossKind};
use crate::metrics::{clustering_accuracy, nmi};
use crate::numeric::{select_columns, Matrix, Rng};
use crate::sparse::{gsc_solve, Dictionary, SolverConfig};
use crate::tagnet::{backward_taps, forward, TagNetParams};

/// How a minibatch sees the graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchGraph {
    /// Principal submatrix of the full Laplacian.
    Submatrix,
    /// Rescaled Laplacian of the induced subgraph; see [`induced_laplacian`].
    #[default]
    Rescaled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Must stay 0; kept so configs can state it explicitly.
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// One weight per stage tap. Empty means 1.0 everywhere; 0 disables a tap.
    pub aux_weights: Vec<f64>,
    pub eval_every: usize,
    pub batch_graph: BatchGraph,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.0,
            batch_size: 128,
            epochs: 20,
            seed: 0,
            aux_weights: Vec::new(),
            eval_every: 100,
            batch_graph: BatchGraph::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, stages: usize) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.momentum != 0.0 {
            return Err(Error::Config(
                "only plain SGD is supported: momentum must be 0".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if !self.aux_weights.is_empty() && self.aux_weights.len() != stages {
            return Err(Error::Config(format!(
                "{} aux weights for {stages} stages",
                self.aux_weights.len()
            )));
        }
        if self
            .aux_weights
            .iter()
            .any(|w| !(*w >= 0.0) || !w.is_finite())
        {
            return Err(Error::Config(
                "aux weights must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Weight of the auxiliary head on tap `k`.
    pub fn aux_weight(&self, k: usize) -> f64 {
        self.aux_weights.get(k).copied().unwrap_or(1.0)
    }
}

/// The overall head on the network output plus optional heads on stage taps.
#[derive(Clone, Debug, PartialEq)]
pub struct Heads {
    pub overall: LossHead,
    /// `aux[k]` attaches to the output of stage `k + 1`.
    pub aux: Vec<Option<LossHead>>,
}

impl Heads {
    pub fn new(overall: LossHead) -> Self {
        Heads {
            overall,
            aux: Vec::new(),
        }
    }

    fn aux_heads(&self) -> impl Iterator<Item = (usize, &LossHead)> {
        self.aux
            .iter()
            .enumerate()
            .filter_map(|(k, h)| h.as_ref().map(|h| (k, h)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub iteration: u64,
    /// Mean per-sample objective: overall loss plus weighted aux losses.
    pub total_loss: f64,
    /// Mean per-sample loss of each aux slot (0 for empty slots).
    pub aux_losses: Vec<f64>,
    pub accuracy: Option<f64>,
    pub nmi: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EvalRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let aux = self.records.first().map_or(0, |r| r.aux_losses.len());
        let mut out = String::from("iteration,total_loss");
        for k in 0..aux {
            out.push_str(&format!(",aux{}_loss", k + 1));
        }
        out.push_str(",accuracy,nmi\n");
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.records {
            out.push_str(&format!("{},{}", r.iteration, r.total_loss));
            for l in &r.aux_losses {
                out.push_str(&format!(",{l}"));
            }
            out.push_str(&format!(",{},{}\n", opt(r.accuracy), opt(r.nmi)));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Position in the minibatch schedule.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Progress {
    pub iteration: u64,
    pub epochs_done: u64,
    /// Current epoch's sample order; empty before the first batch.
    pub order: Vec<usize>,
    pub cursor: usize,
}

/// Trainer state: everything needed to continue a run exactly.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub params: TagNetParams,
    pub heads: Heads,
    pub config: TrainConfig,
    pub progress: Progress,
    pub history: TrainHistory,
    pub rng: Rng,
}

/// Quantities produced by one SGD step, before it is applied.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub loss: f64,
    pub w: Matrix,
    pub s: Matrix,
    /// With respect to `log θ`.
    pub log_theta: crate::numeric::Vector,
    pub overall: Matrix,
    pub aux: Vec<Option<Matrix>>,
}

impl Trainer {
    pub fn new(params: TagNetParams, heads: Heads, config: TrainConfig) -> Result<Self> {
        config.validate(params.stages)?;
        if heads.aux.len() > params.stages {
            return Err(Error::Config(format!(
                "{} aux heads for a {}-stage network",
                heads.aux.len(),
                params.stages
            )));
        }
        for (k, h) in heads.aux_heads() {
            if h.feature_dim() != params.code_dim() {
                return Err(Error::Config(format!(
                    "aux head {} has the wrong feature size",
                    k + 1
                )));
            }
        }
        if heads.overall.feature_dim() != params.code_dim() {
            return Err(Error::Config(
                "overall head has the wrong feature size".into(),
            ));
        }
        let rng = Rng::new(config.seed);
        Ok(Trainer {
            params,
            heads,
            config,
            progress: Progress::default(),
            history: TrainHistory::default(),
            rng,
        })
    }

    pub fn iterations_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.config.batch_size) as u64
    }

    pub fn total_iterations(&self, n: usize) -> u64 {
        self.config.epochs as u64 * self.iterations_per_epoch(n)
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        if self.progress.cursor >= self.progress.order.len() {
            self.progress.order = self.rng.permutation(n);
            self.progress.cursor = 0;
        }
        let start = self.progress.cursor;
        let end = (start + self.config.batch_size).min(n);
        self.progress.cursor = end;
        if end == n {
            self.progress.epochs_done += 1;
        }
        self.progress.order[start..end].to_vec()
    }

    /// Loss and gradients for one batch against the current parameters.
    pub fn gradients(&self, x: &Matrix, l: &Matrix) -> Result<StepGradients> {
        let acts = forward(&self.params, x, l)?;
        let stages = self.params.stages;
        let mut taps: Vec<Option<Matrix>> = vec![None; stages];
        let overall = evaluate(acts.output(), &self.heads.overall)?;
        let mut loss = overall.loss;
        taps[stages - 1] = Some(overall.grad_features);
        let mut aux_grads = vec![None; self.heads.aux.len()];
        for (k, head) in self.heads.aux_heads() {
            let w = self.config.aux_weight(k);
            if w == 0.0 {
                continue;
            }
            let ev = evaluate(&acts.post[k], head)?;
            loss += w * ev.loss;
            let gf = ev.grad_features * w;
            taps[k] = Some(match taps[k].take() {
                Some(t) => t + &gf,
                None => gf,
            });
            aux_grads[k] = Some(ev.grad_weights * w);
        }
        let tap_refs: Vec<Option<&Matrix>> = taps.iter().map(Option::as_ref).collect();
        let back = backward_taps(&self.params, &acts, &tap_refs)?;
        let theta = self.params.theta();
        let log_theta = back
            .grads
            .theta
            .iter()
            .zip(&theta)
            .map(|(g, t)| g * t)
            .collect();
        Ok(StepGradients {
            loss,
            w: back.grads.w,
            s: back.grads.s,
            log_theta,
            overall: overall.grad_weights,
            aux: aux_grads,
        })
    }

    /// `param -= (lr / b) · grad` for every trainable tensor.
    pub fn apply(&mut self, g: &StepGradients, batch: usize) {
        let step = -self.config.learning_rate / batch as f64;
        self.params.w.scaled_add(step, &g.w);
        self.params.s.scaled_add(step, &g.s);
        let mut lt = self.params.log_theta().clone();
        lt.scaled_add(step, &g.log_theta);
        self.params.set_log_theta(lt);
        self.heads.overall.weights.scaled_add(step, &g.overall);
        for (head, grad) in self.heads.aux.iter_mut().zip(&g.aux) {
            if let (Some(h), Some(gr)) = (head.as_mut(), grad) {
                h.weights.scaled_add(step, gr);
            }
        }
    }

    /// Takes one minibatch step; returns the summed batch loss.
    pub fn step(&mut self, ds: &Dataset, graph: &GraphPair) -> Result<f64> {
        let batch = self.next_batch(ds.len());
        let x = select_columns(&ds.x, &batch);
        let l = match self.config.batch_graph {
            BatchGraph::Submatrix => restrict(&graph.laplacian, &batch)?,
            BatchGraph::Rescaled => induced_laplacian(&graph.affinity, &batch)?,
        };
        let g = self.gradients(&x, &l)?;
        if !g.loss.is_finite() {
            return Err(Error::Degenerate(format!(
                "non-finite loss at iteration {}",
                self.progress.iteration + 1
            )));
        }
        self.apply(&g, batch.len());
        self.progress.iteration += 1;
        Ok(g.loss)
    }

    /// Full-data losses and metrics for the current parameters.
    pub fn evaluate(&self, ds: &Dataset, graph: &GraphPair) -> Result<EvalRecord> {
        let acts = forward(&self.params, &ds.x, &graph.laplacian)?;
        let n = ds.len().max(1) as f64;
        let mut total = loss_value(acts.output(), &self.heads.overall)? / n;
        let mut aux_losses = vec![0.0; self.heads.aux.len()];
        for (k, head) in self.heads.aux_heads() {
            aux_losses[k] = loss_value(&acts.post[k], head)? / n;
            total += self.config.aux_weight(k) * aux_losses[k];
        }
        let (accuracy, nmi_v) = match &ds.labels {
            Some(truth) => {
                let pred = predict(acts.output(), &self.heads.overall)?;
                (
                    Some(clustering_accuracy(&pred, truth)?),
                    Some(nmi(&pred, truth)?),
                )
            }
            None => (None, None),
        };
        Ok(EvalRecord {
            iteration: self.progress.iteration,
            total_loss: total,
            aux_losses,
            accuracy,
            nmi: nmi_v,
        })
    }

    fn record(&mut self, ds: &Dataset, graph: &GraphPair) -> Result<()> {
        let it = self.progress.iteration;
        if self
            .history
            .records
            .last()
            .is_some_and(|r| r.iteration == it)
        {
            return Ok(());
        }
        let rec = self.evaluate(ds, graph)?;
        self.history.records.push(rec);
        Ok(())
    }

    /// Trains until the configured epoch budget is spent or `stop_at`
    /// iterations have run, whichever comes first. History is recorded at
    /// iteration 0, every `eval_every` iterations and at the end of the budget.
    pub fn run(&mut self, ds: &Dataset, graph: &GraphPair, stop_at: Option<u64>) -> Result<()> {
        if ds.len() != graph.len() {
            return Err(Error::Config(format!(
                "graph has {} nodes, dataset {} samples",
                graph.len(),
                ds.len()
            )));
        }
        let total = self.total_iterations(ds.len());
        let stop = stop_at.map_or(total, |s| s.min(total));
        if total == 0 {
            return Ok(());
        }
        if self.progress.iteration == 0 {
            self.record(ds, graph)?;
        }
        while self.progress.iteration < stop {
            self.step(ds, graph)?;
            let it = self.progress.iteration;
            if it % self.config.eval_every as u64 == 0 || it == total {
                self.record(ds, graph)?;
            }
        }
        Ok(())
    }

    pub fn is_finished(&self, n: usize) -> bool {
        self.progress.iteration >= self.total_iterations(n)
    }
}

/// End-to-end training from the given initialization.
pub fn train(
    ds: &Dataset,
    graph: &GraphPair,
    params: TagNetParams,
    heads: Heads,
    cfg: TrainConfig,
) -> Result<(TagNetParams, Heads, TrainHistory)> {
    let mut t = Trainer::new(params, heads, cfg)?;
    t.run(ds, graph, None)?;
    Ok((t.params, t.heads, t.history))
}

/// Labels and scores of a fixed-feature baseline.
#[derive(Clone, Debug)]
pub struct BaselineResult {
    pub labels: Vec<usize>,
    pub head: LossHead,
    pub accuracy: Option<f64>,
    pub nmi: Option<f64>,
}

/// Scores fixed features `a` with a freshly trained head.
pub fn fixed_feature_baseline(
    ds: &Dataset,
    a: &Matrix,
    clusters: usize,
    kind: LossKind,
    head_cfg: &HeadInitConfig,
    rng: &mut Rng,
) -> Result<BaselineResult> {
    let head = init_head(a, clusters, kind, head_cfg, rng)?.head;
    let labels = predict(a, &head)?;
    let (accuracy, nmi_v) = match &ds.labels {
        Some(t) => (
            Some(clustering_accuracy(&labels, t)?),
            Some(nmi(&labels, t)?),
        ),
        None => (None, None),
    };
    Ok(BaselineResult {
        labels,
        head,
        accuracy,
        nmi: nmi_v,
    })
}

/// Sparse codes from the graph-regularized solver, then a head trained on
/// those fixed codes.
pub fn run_baseline_sc(
    ds: &Dataset,
    graph: &GraphPair,
    dict: &Dictionary,
    solver: &SolverConfig,
    clusters: usize,
    kind: LossKind,
    head_cfg: &HeadInitConfig,
    seed: u64,
) -> Result<BaselineResult> {
    let (a, _) = gsc_solve(&ds.x, dict, solver, &graph.laplacian)?;
    let mut rng = Rng::new(seed);
    fixed_feature_baseline(ds, &a, clusters, kind, head_cfg, &mut rng)
}
