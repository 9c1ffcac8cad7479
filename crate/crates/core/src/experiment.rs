//! Experiment recipes: configuration, the end-to-end pipeline and the
//! baseline, sweep and auxiliary-task drivers built on it.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{self, Dataset, HierarchicalConfig};
use crate::error::{Error, Result};
use crate::graph::{GraphPair, DEFAULT_MAX_NODES};
use crate::losses::{init_head, predict, HeadInitConfig, LossHead, LossKind, DEFAULT_MARGIN_REG};
use crate::metrics::{clustering_accuracy, nmi};
use crate::numeric::Rng;
use crate::sparse::{ksvd, Dictionary, SolverConfig, StepMode};
use crate::tagnet::{forward, init_from_dictionary, TagNetParams, DEFAULT_STAGES};
use crate::trainer::{BatchGraph, Heads, TrainConfig, TrainHistory, Trainer};

pub const DEFAULT_LAMBDA_GRID: [f64; 4] = [0.1, 0.3, 0.5, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Blobs,
    Hierarchical,
    Csv,
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// CSV file, or IDX image file.
    pub path: Option<PathBuf>,
    /// IDX label file.
    pub labels_path: Option<PathBuf>,
    /// Whether the last CSV column holds labels.
    pub has_labels: bool,
    pub dim: usize,
    pub samples: usize,
    pub clusters: usize,
    pub separation: f64,
    pub poses: usize,
    pub expressions: usize,
    pub identities: usize,
    /// Identity offset norm of the hierarchical generator.
    pub identity_separation: f64,
    /// Within-class deviation of the hierarchical generator.
    pub class_noise: f64,
    /// Seed for synthetic generation, added noise and bandwidth sampling.
    pub seed: u64,
    /// Deviation of extra Gaussian noise added before normalization.
    pub noise: f64,
    /// Keep only samples of the first this many classes.
    pub max_classes: Option<usize>,
    /// Keep only the first this many samples (applied after class filtering).
    pub max_samples: Option<usize>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        let h = HierarchicalConfig::default();
        DatasetSpec {
            kind: DatasetKind::Blobs,
            path: None,
            labels_path: None,
            has_labels: true,
            dim: 20,
            samples: 600,
            clusters: 3,
            separation: 6.0,
            poses: h.poses,
            expressions: h.expressions,
            identities: h.identities,
            identity_separation: h.identity_separation,
            class_noise: h.noise,
            seed: 0,
            noise: 0.0,
            max_classes: None,
            max_samples: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub atoms: usize,
    /// Candidate λ values; the one with the lowest final training loss wins.
    pub lambda: Vec<f64>,
    pub alpha: f64,
    pub stages: usize,
    /// Kernel bandwidth; the median heuristic when absent.
    pub bandwidth: Option<f64>,
    pub loss: LossKind,
    /// Cluster count of the overall head; the number of classes when absent.
    pub clusters: Option<usize>,
    pub ksvd_iters: usize,
    pub sparsity: usize,
    pub head_epochs: usize,
    pub head_reg: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            atoms: 128,
            lambda: DEFAULT_LAMBDA_GRID.to_vec(),
            alpha: 5.0,
            stages: DEFAULT_STAGES,
            bandwidth: None,
            loss: LossKind::Mml,
            clusters: None,
            ksvd_iters: 30,
            sparsity: 5,
            head_epochs: 50,
            head_reg: DEFAULT_MARGIN_REG,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub eval_every: usize,
    pub aux_weights: Vec<f64>,
    pub batch_graph: BatchGraph,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSpec {
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            batch_size: t.batch_size,
            epochs: t.epochs,
            eval_every: t.eval_every,
            aux_weights: t.aux_weights,
            batch_graph: t.batch_graph,
        }
    }
}

/// An auxiliary clustering head on the output of `stage` (1-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxSpec {
    pub stage: usize,
    pub clusters: usize,
    /// Dataset attribute the head is scored against, if any.
    pub attribute: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub runs: usize,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub train: TrainSpec,
    pub aux: Vec<AuxSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            runs: 5,
            seed: 0,
            dataset: DatasetSpec::default(),
            model: ModelSpec::default(),
            train: TrainSpec::default(),
            aux: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if m.atoms == 0 || m.stages == 0 || m.sparsity == 0 {
            return Err(Error::Config(
                "atoms, stages and sparsity must be positive".into(),
            ));
        }
        if m.lambda.is_empty() || m.lambda.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Config("lambda candidates must be positive".into()));
        }
        if !(m.alpha >= 0.0) {
            return Err(Error::Config("alpha must be nonnegative".into()));
        }
        if !(self.dataset.noise >= 0.0) {
            return Err(Error::Config("noise must be nonnegative".into()));
        }
        for a in &self.aux {
            if a.stage == 0 || a.stage > m.stages {
                return Err(Error::Config(format!(
                    "aux head references stage {} of a {}-stage network",
                    a.stage, m.stages
                )));
            }
            if a.clusters < 2 {
                return Err(Error::Config("aux heads need at least two clusters".into()));
            }
        }
        let mut stages: Vec<usize> = self.aux.iter().map(|a| a.stage).collect();
        stages.sort_unstable();
        if stages.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("at most one aux head per stage".into()));
        }
        self.train_config(0).validate(m.stages)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed,
            aux_weights: t.aux_weights.clone(),
            eval_every: t.eval_every,
            batch_graph: t.batch_graph,
        }
    }

    pub fn head_config(&self) -> HeadInitConfig {
        HeadInitConfig {
            epochs: self.model.head_epochs,
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            reg: self.model.head_reg,
        }
    }

    /// Seeds of the independent runs.
    pub fn run_seeds(&self) -> Vec<u64> {
        (0..self.runs as u64)
            .map(|r| self.seed.wrapping_add(r))
            .collect()
    }

    /// `TAGnet-MML`, or `LISTA-EML` for the graph-free ablation.
    pub fn model_label(&self) -> String {
        let net = if self.model.alpha == 0.0 {
            "LISTA"
        } else {
            "TAGnet"
        };
        format!("{net}-{}", self.model.loss.name())
    }
}

/// Loads or generates the raw dataset named by `spec`.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let need_path = || {
        spec.path
            .clone()
            .ok_or_else(|| Error::Config(format!("dataset kind {:?} needs a path", spec.kind)))
    };
    match spec.kind {
        DatasetKind::Blobs => data::synth_blobs(
            spec.dim,
            spec.samples,
            spec.clusters,
            spec.separation,
            spec.seed,
        ),
        DatasetKind::Hierarchical => data::synth_hierarchical(
            &HierarchicalConfig {
                dim: spec.dim,
                samples: spec.samples,
                poses: spec.poses,
                expressions: spec.expressions,
                identities: spec.identities,
                separation: spec.separation,
                identity_separation: spec.identity_separation,
                noise: spec.class_noise,
            },
            spec.seed,
        ),
        DatasetKind::Csv => data::load_csv(&need_path()?, spec.has_labels),
        DatasetKind::Idx => data::load_idx(&need_path()?, spec.labels_path.as_deref()),
    }
}

/// Normalized data and its graph, shared by all runs of an experiment.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: Dataset,
    pub graph: GraphPair,
}

/// Load, filter, add noise, normalize and build the graph.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let spec = &cfg.dataset;
    let mut ds = load_dataset(spec)?;
    if let Some(k) = spec.max_classes {
        let labels = ds
            .labels
            .as_ref()
            .ok_or_else(|| Error::Config("max_classes needs a labeled dataset".into()))?;
        let available = ds.num_classes().unwrap_or(0);
        if k < 2 || k > available {
            return Err(Error::Config(format!(
                "max_classes {k} outside 2..={available}"
            )));
        }
        let keep: Vec<usize> = (0..ds.len()).filter(|&i| labels[i] < k).collect();
        ds = ds.subset(&keep);
    }
    if let Some(n) = spec.max_samples {
        let keep: Vec<usize> = (0..n.min(ds.len())).collect();
        ds = ds.subset(&keep);
    }
    let ds = data::add_noise(&ds, spec.noise, spec.seed ^ 0x6e6f_6973_65)?;
    let ds = data::normalize(&ds);
    let mut rng = Rng::new(spec.seed).derive(7);
    let graph = GraphPair::build(&ds.x, cfg.model.bandwidth, DEFAULT_MAX_NODES, &mut rng)?;
    Ok(Prepared { dataset: ds, graph })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Scores {
    pub accuracy: Option<f64>,
    pub nmi: Option<f64>,
}

impl Scores {
    pub fn of(pred: &[usize], truth: Option<&Vec<usize>>) -> Result<Scores> {
        Ok(match truth {
            Some(t) => Scores {
                accuracy: Some(clustering_accuracy(pred, t)?),
                nmi: Some(nmi(pred, t)?),
            },
            None => Scores::default(),
        })
    }
}

/// Everything one run produces for the selected λ.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub seed: u64,
    pub lambda: f64,
    /// Final full-data training objective of the selected λ.
    pub final_loss: f64,
    pub trained: Scores,
    /// Initialized network with a head fitted on its fixed output.
    pub non_joint: Scores,
    /// Per aux spec, accuracy of its head against its attribute.
    pub aux: Vec<Scores>,
    pub history: TrainHistory,
    pub params: TagNetParams,
    pub heads: Heads,
    pub dictionary: Dictionary,
    /// Final trainer state, resumable.
    pub checkpoint: Checkpoint,
}

fn overall_clusters(cfg: &ExperimentConfig, ds: &Dataset) -> Result<usize> {
    cfg.model
        .clusters
        .or_else(|| ds.num_classes())
        .ok_or_else(|| Error::Config("unlabeled data needs model.clusters".into()))
}

/// Learns the dictionary for one run.
pub fn learn_dictionary(cfg: &ExperimentConfig, ds: &Dataset, seed: u64) -> Result<Dictionary> {
    let mut rng = Rng::new(seed).derive(1);
    Ok(ksvd(
        &ds.x,
        cfg.model.atoms,
        cfg.model.ksvd_iters,
        cfg.model.sparsity,
        &mut rng,
    )?
    .dictionary)
}

fn aux_scores(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    params: &TagNetParams,
    heads: &Heads,
    graph: &GraphPair,
) -> Result<Vec<Scores>> {
    if cfg.aux.is_empty() {
        return Ok(Vec::new());
    }
    let acts = forward(params, &ds.x, &graph.laplacian)?;
    cfg.aux
        .iter()
        .map(|a| {
            let head = heads.aux[a.stage - 1].as_ref().expect("aux head present");
            let pred = predict(&acts.post[a.stage - 1], head)?;
            let truth = a
                .attribute
                .as_ref()
                .and_then(|name| ds.attributes.get(name));
            Scores::of(&pred, truth)
        })
        .collect()
}

/// Initializes, fits heads and trains for one λ.
fn run_lambda(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    dict: &Dictionary,
    lambda: f64,
    seed: u64,
) -> Result<RunOutcome> {
    let ds = &prep.dataset;
    let clusters = overall_clusters(cfg, ds)?;
    let params = init_from_dictionary(dict, lambda, cfg.model.alpha, cfg.model.stages)?;
    let acts = forward(&params, &ds.x, &prep.graph.laplacian)?;
    let head_cfg = cfg.head_config();
    let base = Rng::new(seed);
    let mut rng = base.derive(2);
    let overall = init_head(acts.output(), clusters, cfg.model.loss, &head_cfg, &mut rng)?.head;
    let non_joint = Scores::of(&predict(acts.output(), &overall)?, ds.labels.as_ref())?;

    let mut aux: Vec<Option<LossHead>> = vec![
        None;
        if cfg.aux.is_empty() {
            0
        } else {
            cfg.model.stages
        }
    ];
    for a in &cfg.aux {
        let mut r = base.derive(100 + a.stage as u64);
        aux[a.stage - 1] = Some(
            init_head(
                &acts.post[a.stage - 1],
                a.clusters,
                cfg.model.loss,
                &head_cfg,
                &mut r,
            )?
            .head,
        );
    }
    let heads = Heads { overall, aux };
    let mut trainer = Trainer::new(
        params,
        heads,
        cfg.train_config(Rng::new(seed).derive(3).next_u64()),
    )?;
    trainer.run(ds, &prep.graph, None)?;
    let final_loss = match trainer.history.records.last() {
        Some(r) => r.total_loss,
        None => trainer.evaluate(ds, &prep.graph)?.total_loss,
    };
    let acts = forward(&trainer.params, &ds.x, &prep.graph.laplacian)?;
    let trained = Scores::of(
        &predict(acts.output(), &trainer.heads.overall)?,
        ds.labels.as_ref(),
    )?;
    let aux = aux_scores(cfg, ds, &trainer.params, &trainer.heads, &prep.graph)?;
    let checkpoint = Checkpoint::of(&trainer);
    Ok(RunOutcome {
        seed,
        lambda,
        final_loss,
        trained,
        non_joint,
        aux,
        history: trainer.history,
        params: trainer.params,
        heads: trainer.heads,
        dictionary: dict.clone(),
        checkpoint,
    })
}

/// One full pipeline run: K-SVD, then every λ candidate, keeping the one
/// with the lowest final training objective.
pub fn run_once(cfg: &ExperimentConfig, prep: &Prepared, seed: u64) -> Result<RunOutcome> {
    let dict = learn_dictionary(cfg, &prep.dataset, seed)?;
    let mut best: Option<RunOutcome> = None;
    for &lambda in &cfg.model.lambda {
        let out = run_lambda(cfg, prep, &dict, lambda, seed)?;
        if best.as_ref().is_none_or(|b| out.final_loss < b.final_loss) {
            best = Some(out);
        }
    }
    Ok(best.expect("at least one lambda"))
}

/// Runs `f` for every seed on a pool of `parallel` workers, keeping seed order.
pub fn for_each_seed<T: Send>(
    seeds: &[u64],
    parallel: usize,
    f: impl Fn(u64) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if parallel <= 1 {
        return seeds.iter().map(|&s| f(s)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| seeds.par_iter().map(|&s| f(s)).collect())
}

/// Caps the global rayon pool. Only the first call takes effect.
pub fn set_global_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

pub fn run_all(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    parallel: usize,
) -> Result<Vec<RunOutcome>> {
    for_each_seed(&cfg.run_seeds(), parallel, |s| run_once(cfg, prep, s))
}

/// One row of a comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodRow {
    pub method: String,
    pub seed: u64,
    pub scores: Scores,
}

/// SC (graph-regularized codes + head), NJ (initialized network + head) and
/// trained network rows for every seed.
pub fn baseline_table(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    parallel: usize,
) -> Result<Vec<MethodRow>> {
    let label = cfg.model_label();
    let loss = cfg.model.loss.name();
    let per_seed = for_each_seed(&cfg.run_seeds(), parallel, |seed| {
        let out = run_once(cfg, prep, seed)?;
        let sc = sc_baseline(cfg, prep, &out.dictionary, seed)?;
        Ok(vec![
            MethodRow {
                method: format!("SC-{loss}"),
                seed,
                scores: sc,
            },
            MethodRow {
                method: format!("NJ-{label}"),
                seed,
                scores: out.non_joint,
            },
            MethodRow {
                method: label.clone(),
                seed,
                scores: out.trained,
            },
        ])
    })?;
    Ok(per_seed.into_iter().flatten().collect())
}

/// Graph-regularized sparse codes for each λ candidate with a head trained
/// on them; the λ whose head ends with the lowest loss is reported.
pub fn sc_baseline(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    dict: &Dictionary,
    seed: u64,
) -> Result<Scores> {
    let ds = &prep.dataset;
    let clusters = overall_clusters(cfg, ds)?;
    let mut best: Option<(f64, Scores)> = None;
    for &lambda in &cfg.model.lambda {
        let solver = SolverConfig {
            lambda,
            alpha: cfg.model.alpha,
            step_mode: StepMode::SafeNPlusGraph,
            ..SolverConfig::default()
        };
        let (a, _) = crate::sparse::gsc_solve(&ds.x, dict, &solver, &prep.graph.laplacian)?;
        let mut rng = Rng::new(seed).derive(2);
        let init = init_head(&a, clusters, cfg.model.loss, &cfg.head_config(), &mut rng)?;
        let final_loss = *init.losses.last().unwrap();
        let res = Scores::of(&predict(&a, &init.head)?, ds.labels.as_ref())?;
        if best.as_ref().is_none_or(|(l, _)| final_loss < *l) {
            best = Some((final_loss, res));
        }
    }
    Ok(best.expect("at least one lambda").1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Alpha,
    Clusters,
    Noise,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepAxis::Alpha),
            "clusters" => Ok(SweepAxis::Clusters),
            "noise" => Ok(SweepAxis::Noise),
            other => Err(Error::Config(format!(
                "unknown sweep axis '{other}' (alpha, clusters, noise)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub run: usize,
    pub scores: Scores,
}

/// The config for one sweep point.
pub fn sweep_point(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    value: f64,
) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    match axis {
        SweepAxis::Alpha => {
            if !(value >= 0.0) {
                return Err(Error::Config(format!("alpha {value} must be nonnegative")));
            }
            c.model.alpha = value;
        }
        SweepAxis::Noise => {
            if !(value >= 0.0) {
                return Err(Error::Config(format!(
                    "noise level {value} must be nonnegative"
                )));
            }
            c.dataset.noise = value;
        }
        SweepAxis::Clusters => {
            if value.fract() != 0.0 || value < 2.0 {
                return Err(Error::Config(format!(
                    "cluster count {value} must be an integer >= 2"
                )));
            }
            c.dataset.max_classes = Some(value as usize);
            c.model.clusters = Some(value as usize);
        }
    }
    c.validate()?;
    Ok(c)
}

/// A full set of runs per sweep value, ordered by (value, run).
pub fn sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    parallel: usize,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &v in values {
        let point = sweep_point(cfg, axis, v)?;
        let prep = prepare(&point)?;
        let outs = run_all(&point, &prep, parallel)?;
        for (run, o) in outs.into_iter().enumerate() {
            rows.push(SweepRow {
                value: v,
                seed: o.seed,
                run,
                scores: o.trained,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantRow {
    pub variant: String,
    pub seed: u64,
    pub overall: Scores,
    /// One entry per aux spec of the base config; `None` when that head is off.
    pub aux: Vec<Option<Scores>>,
}

/// Every subset of the configured aux heads, from none to all, in
/// binary-counting order over the spec list.
pub fn aux_variants(cfg: &ExperimentConfig) -> Vec<(String, Vec<bool>)> {
    let k = cfg.aux.len();
    (0..1usize << k)
        .map(|mask| {
            let on: Vec<bool> = (0..k).map(|i| mask >> i & 1 == 1).collect();
            let name = if mask == 0 {
                "none".to_string()
            } else {
                cfg.aux
                    .iter()
                    .zip(&on)
                    .filter(|(_, &b)| b)
                    .map(|(a, _)| format!("stage{}", a.stage))
                    .collect::<Vec<_>>()
                    .join("+")
            };
            (name, on)
        })
        .collect()
}

/// Trains every aux-head variant for every seed.
pub fn dtagnet_table(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    parallel: usize,
) -> Result<Vec<VariantRow>> {
    let mut rows = Vec::new();
    for (name, on) in aux_variants(cfg) {
        let mut c = cfg.clone();
        c.aux = cfg
            .aux
            .iter()
            .zip(&on)
            .filter(|(_, &b)| b)
            .map(|(a, _)| a.clone())
            .collect();
        let outs = run_all(&c, prep, parallel)?;
        for o in outs {
            let mut it = o.aux.iter();
            let aux = on
                .iter()
                .map(|&b| if b { it.next().copied() } else { None })
                .collect();
            rows.push(VariantRow {
                variant: name.clone(),
                seed: o.seed,
                overall: o.trained,
                aux,
            });
        }
    }
    Ok(rows)
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

pub fn std_dev(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v.iter().copied());
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Writes `contents` to a temporary sibling then renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    use std::io::Write;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("bad output path {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
