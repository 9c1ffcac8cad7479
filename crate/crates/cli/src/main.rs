use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tagnet_core::checkpoint::{encode_checkpoint, encode_dictionary, load_checkpoint};
use tagnet_core::experiment::{
    self, baseline_table, dtagnet_table, learn_dictionary, mean, prepare, run_all, std_dev, sweep,
    write_atomic, ExperimentConfig, Scores, SweepAxis,
};
use tagnet_core::losses::predict;
use tagnet_core::tagnet::forward;
use tagnet_core::Rng;

const THREADS_ENV: &str = "UNROLL_CLUSTER_THREADS";

#[derive(Parser)]
#[command(
    name = "tagnet",
    version,
    about = "Sparse-coding-initialized clustering networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Base seed; run r uses seed + r.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    /// Independent runs executed at once.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: graph, K-SVD, init, train, metrics.
    Train(Common),
    /// Repeat training over values of one setting.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// alpha, clusters or noise.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// SC, non-joint and trained rows for the same seeds.
    Baseline(Common),
    /// Every combination of the configured auxiliary heads.
    Dtagnet(Common),
    /// Score a saved checkpoint on the configured dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Learn and save a dictionary only.
    Dict(Common),
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .with_context(|| format!("{THREADS_ENV} must be a positive integer"))?;
        rayon_threads(n)?;
    }
    match cli.command {
        Command::Train(c) => cmd_train(&c),
        Command::Sweep {
            common,
            axis,
            values,
        } => cmd_sweep(&common, &axis, &values),
        Command::Baseline(c) => cmd_baseline(&c),
        Command::Dtagnet(c) => cmd_dtagnet(&c),
        Command::Eval { common, checkpoint } => cmd_eval(&common, &checkpoint),
        Command::Dict(c) => cmd_dict(&c),
    }
}

fn rayon_threads(n: usize) -> Result<()> {
    if n == 0 {
        bail!("{THREADS_ENV} must be at least 1");
    }
    tagnet_core::experiment::set_global_threads(n)?;
    Ok(())
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(r) = c.runs {
        cfg.runs = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Git blob hash of a byte string.
fn blob_hash(bytes: &[u8]) -> String {
    let mut h = sha1_smol::Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.digest().to_string()
}

fn manifest(command: &str, cfg: &ExperimentConfig, extra: &str) -> Result<String> {
    let config = cfg.to_toml();
    let mut m = String::new();
    writeln!(m, "command = {command}")?;
    writeln!(m, "version = {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(m, "config_hash = {}", blob_hash(config.as_bytes()))?;
    for p in [&cfg.dataset.path, &cfg.dataset.labels_path]
        .into_iter()
        .flatten()
    {
        let bytes = std::fs::read(p).with_context(|| format!("hashing {}", p.display()))?;
        writeln!(m, "input {} = {}", p.display(), blob_hash(&bytes))?;
    }
    let seeds: Vec<String> = cfg.run_seeds().iter().map(u64::to_string).collect();
    writeln!(m, "seeds = {}", seeds.join(","))?;
    m.push_str(extra);
    writeln!(m, "\n# resolved config")?;
    m.push_str(&config);
    Ok(m)
}

/// Files are produced in memory first so a failed run leaves nothing behind.
struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn new() -> Self {
        Outputs { files: Vec::new() }
    }

    fn add(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.into(), bytes.into()));
    }

    fn write(self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (name, bytes) in self.files {
            let path = dir.join(&name);
            write_atomic(&path, &bytes).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn summary_line(label: &str, scores: &[Scores]) -> String {
    let acc: Vec<f64> = scores.iter().filter_map(|s| s.accuracy).collect();
    let nmi: Vec<f64> = scores.iter().filter_map(|s| s.nmi).collect();
    if acc.is_empty() {
        return format!("{label},,,,\n");
    }
    format!(
        "{label},{},{},{},{}\n",
        mean(acc.iter().copied()),
        std_dev(acc.iter().copied()),
        mean(nmi.iter().copied()),
        std_dev(nmi.iter().copied())
    )
}

const SUMMARY_HEADER: &str = "method,accuracy_mean,accuracy_std,nmi_mean,nmi_std\n";

fn cmd_train(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let prep = prepare(&cfg)?;
    let outs = run_all(&cfg, &prep, c.parallel)?;
    let label = cfg.model_label();

    let mut out = Outputs::new();
    let mut results = String::from("run,seed,lambda,final_loss,accuracy,nmi,nj_accuracy,nj_nmi\n");
    for (r, o) in outs.iter().enumerate() {
        writeln!(
            results,
            "{r},{},{},{},{},{},{},{}",
            o.seed,
            o.lambda,
            o.final_loss,
            opt(o.trained.accuracy),
            opt(o.trained.nmi),
            opt(o.non_joint.accuracy),
            opt(o.non_joint.nmi)
        )?;
        out.add(format!("history_run{r}.csv"), o.history.to_csv());
        out.add(
            format!("checkpoint_run{r}.tagn"),
            encode_checkpoint(&o.checkpoint),
        );
    }
    let mut summary = String::from(SUMMARY_HEADER);
    let trained: Vec<Scores> = outs.iter().map(|o| o.trained).collect();
    let nj: Vec<Scores> = outs.iter().map(|o| o.non_joint).collect();
    summary.push_str(&summary_line(&label, &trained));
    summary.push_str(&summary_line(&format!("NJ-{label}"), &nj));
    out.add("results.csv", results);
    out.add("summary.csv", summary.clone());
    out.add(
        "manifest.txt",
        manifest("train", &cfg, &format!("model = {label}\n"))?,
    );
    out.write(&c.out)?;
    print!("{summary}");
    Ok(())
}

fn cmd_sweep(c: &Common, axis: &str, values: &[f64]) -> Result<()> {
    let axis: SweepAxis = axis.parse()?;
    let cfg = load_config(c)?;
    for &v in values {
        experiment::sweep_point(&cfg, axis, v)?;
    }
    let rows = sweep(&cfg, axis, values, c.parallel)?;
    let mut csv = String::from("value,run,seed,accuracy,nmi\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{},{}",
            r.value,
            r.run,
            r.seed,
            opt(r.scores.accuracy),
            opt(r.scores.nmi)
        )?;
    }
    let mut summary = String::from("value,accuracy_mean,accuracy_std,nmi_mean,nmi_std\n");
    for &v in values {
        let s: Vec<Scores> = rows
            .iter()
            .filter(|r| r.value == v)
            .map(|r| r.scores)
            .collect();
        summary.push_str(&summary_line(&v.to_string(), &s));
    }
    let mut out = Outputs::new();
    out.add("sweep.csv", csv);
    out.add("sweep_summary.csv", summary.clone());
    let values: Vec<String> = values.iter().map(f64::to_string).collect();
    out.add(
        "manifest.txt",
        manifest(
            "sweep",
            &cfg,
            &format!("axis = {axis:?}\nvalues = {}\n", values.join(",")),
        )?,
    );
    out.write(&c.out)?;
    print!("{summary}");
    Ok(())
}

fn cmd_baseline(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let prep = prepare(&cfg)?;
    let rows = baseline_table(&cfg, &prep, c.parallel)?;
    let mut csv = String::from("method,seed,accuracy,nmi\n");
    let mut methods: Vec<String> = Vec::new();
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{}",
            r.method,
            r.seed,
            opt(r.scores.accuracy),
            opt(r.scores.nmi)
        )?;
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let mut summary = String::from(SUMMARY_HEADER);
    for m in &methods {
        let s: Vec<Scores> = rows
            .iter()
            .filter(|r| &r.method == m)
            .map(|r| r.scores)
            .collect();
        summary.push_str(&summary_line(m, &s));
    }
    let mut out = Outputs::new();
    out.add("baseline.csv", csv);
    out.add("baseline_summary.csv", summary.clone());
    out.add("manifest.txt", manifest("baseline", &cfg, "")?);
    out.write(&c.out)?;
    print!("{summary}");
    Ok(())
}

fn cmd_dtagnet(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    if cfg.aux.is_empty() {
        bail!("dtagnet needs at least one [[aux]] head in the config");
    }
    let prep = prepare(&cfg)?;
    let rows = dtagnet_table(&cfg, &prep, c.parallel)?;
    let loss = cfg.model.loss.name();
    let mut csv = String::from("loss,variant,seed,accuracy,nmi");
    for a in &cfg.aux {
        write!(csv, ",stage{}_accuracy", a.stage)?;
    }
    csv.push('\n');
    let mut variants: Vec<String> = Vec::new();
    for r in &rows {
        write!(
            csv,
            "{loss},{},{},{},{}",
            r.variant,
            r.seed,
            opt(r.overall.accuracy),
            opt(r.overall.nmi)
        )?;
        for a in &r.aux {
            write!(csv, ",{}", opt(a.and_then(|s| s.accuracy)))?;
        }
        csv.push('\n');
        if !variants.contains(&r.variant) {
            variants.push(r.variant.clone());
        }
    }
    let mut summary = String::from(SUMMARY_HEADER);
    for v in &variants {
        let s: Vec<Scores> = rows
            .iter()
            .filter(|r| &r.variant == v)
            .map(|r| r.overall)
            .collect();
        summary.push_str(&summary_line(&format!("{loss}:{v}"), &s));
    }
    let mut out = Outputs::new();
    out.add("dtagnet.csv", csv);
    out.add("dtagnet_summary.csv", summary.clone());
    out.add("manifest.txt", manifest("dtagnet", &cfg, "")?);
    out.write(&c.out)?;
    print!("{summary}");
    Ok(())
}

fn cmd_eval(c: &Common, checkpoint: &Path) -> Result<()> {
    let cfg = load_config(c)?;
    let cp =
        load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let prep = prepare(&cfg)?;
    if cp.params.input_dim() != prep.dataset.dim() {
        bail!(
            "checkpoint expects {}-dimensional samples, dataset has {}",
            cp.params.input_dim(),
            prep.dataset.dim()
        );
    }
    let acts = forward(&cp.params, &prep.dataset.x, &prep.graph.laplacian)?;
    let pred = predict(acts.output(), &cp.heads.overall)?;
    let scores = Scores::of(&pred, prep.dataset.labels.as_ref())?;
    let mut labels = String::from("sample,cluster\n");
    for (i, p) in pred.iter().enumerate() {
        writeln!(labels, "{i},{p}")?;
    }
    let metrics = format!(
        "iteration,accuracy,nmi\n{},{},{}\n",
        cp.progress.iteration,
        opt(scores.accuracy),
        opt(scores.nmi)
    );
    let mut out = Outputs::new();
    out.add("eval.csv", metrics.clone());
    out.add("labels.csv", labels);
    let bytes = std::fs::read(checkpoint)?;
    out.add(
        "manifest.txt",
        manifest(
            "eval",
            &cfg,
            &format!(
                "checkpoint {} = {}\n",
                checkpoint.display(),
                blob_hash(&bytes)
            ),
        )?,
    );
    out.write(&c.out)?;
    print!("{metrics}");
    Ok(())
}

fn cmd_dict(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let prep = prepare(&cfg)?;
    let mut out = Outputs::new();
    let mut csv = String::from("run,seed,atoms,dim\n");
    for (r, seed) in cfg.run_seeds().into_iter().enumerate() {
        let dict = learn_dictionary(&cfg, &prep.dataset, seed)?;
        writeln!(csv, "{r},{seed},{},{}", dict.len(), dict.dim())?;
        let rng = Rng::new(seed);
        out.add(
            format!("dictionary_run{r}.tagn"),
            encode_dictionary(&dict, &rng),
        );
    }
    out.add("dictionaries.csv", csv);
    out.add("manifest.txt", manifest("dict", &cfg, "")?);
    out.write(&c.out)?;
    Ok(())
}
