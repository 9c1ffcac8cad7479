#![allow(dead_code)]

use tagnet_core::graph::{build_affinity, build_laplacian, median_bandwidth};
use tagnet_core::losses::{loss_value, LossHead, LossKind};
use tagnet_core::sparse::Dictionary;
use tagnet_core::tagnet::{forward, init_from_dictionary, TagNetParams};
use tagnet_core::trainer::{Heads, TrainConfig, Trainer};
use tagnet_core::{Matrix, Rng};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-8;

pub struct Instance {
    pub x: Matrix,
    pub l: Matrix,
    pub params: TagNetParams,
    pub heads: Heads,
    pub config: TrainConfig,
}

/// Random batch, its Laplacian, a dictionary-initialized network and random heads.
pub fn random_instance(
    m: usize,
    p: usize,
    b: usize,
    alpha: f64,
    kind: LossKind,
    aux: bool,
    seed: u64,
) -> Instance {
    let mut rng = Rng::new(seed);
    let x = rng.normal_matrix(m, b, 1.0);
    let delta = median_bandwidth(&x, 10_000, &mut rng).unwrap();
    let l = build_laplacian(&build_affinity(&x, delta).unwrap()).unwrap();
    let dict = Dictionary::normalized(rng.normal_matrix(m, p, 1.0)).unwrap();
    let mut params = init_from_dictionary(&dict, 0.05, alpha, 2).unwrap();
    // move off the symmetric init so every entry of S and W matters
    params.w += &rng.normal_matrix(p, m, 0.05);
    params.s += &rng.normal_matrix(p, p, 0.05);
    let head =
        |rng: &mut Rng, k: usize| LossHead::new(rng.normal_matrix(p, k, 1.0), kind, 0.01).unwrap();
    let overall = head(&mut rng, 3);
    let aux_heads = if aux {
        vec![Some(head(&mut rng, 4)), Some(head(&mut rng, 2))]
    } else {
        Vec::new()
    };
    let config = TrainConfig {
        aux_weights: if aux { vec![0.7, 1.3] } else { Vec::new() },
        ..TrainConfig::default()
    };
    Instance {
        x,
        l,
        params,
        heads: Heads {
            overall,
            aux: aux_heads,
        },
        config,
    }
}

/// Summed objective recomputed from scratch: overall loss plus weighted aux losses.
pub fn objective(
    params: &TagNetParams,
    heads: &Heads,
    cfg: &TrainConfig,
    x: &Matrix,
    l: &Matrix,
) -> f64 {
    let acts = forward(params, x, l).unwrap();
    let mut total = loss_value(acts.output(), &heads.overall).unwrap();
    for (k, h) in heads.aux.iter().enumerate() {
        if let Some(h) = h {
            total += cfg.aux_weight(k) * loss_value(&acts.post[k], h).unwrap();
        }
    }
    total
}

fn head_pattern(a: &Matrix, head: &LossHead, out: &mut Vec<i64>) {
    if head.kind != LossKind::Mml {
        return;
    }
    let s = a.t().dot(&head.weights);
    for row in s.rows() {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&i, &j| row[j].partial_cmp(&row[i]).unwrap().then(i.cmp(&j)));
        let (y, r) = (order[0], order[1]);
        out.push(y as i64);
        out.push(r as i64);
        out.push((1.0 + row[r] - row[y] > 0.0) as i64);
    }
}

/// Which piece of the piecewise-smooth objective a point lies on: shrink
/// active sets of every stage and the MML winner, runner-up and hinge state.
pub fn pattern(params: &TagNetParams, heads: &Heads, x: &Matrix, l: &Matrix) -> Vec<i64> {
    let acts = forward(params, x, l).unwrap();
    let theta = params.theta();
    let mut out = Vec::new();
    for u in &acts.pre {
        for ((r, _), v) in u.indexed_iter() {
            out.push((v.abs() > theta[r]) as i64);
        }
    }
    head_pattern(acts.output(), &heads.overall, &mut out);
    for (k, h) in heads.aux.iter().enumerate() {
        if let Some(h) = h {
            head_pattern(&acts.post[k], h, &mut out);
        }
    }
    out
}

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    /// Entries whose ±h probes straddle a kink, tie or hinge boundary.
    pub skipped: usize,
    pub worst_excess: f64,
    pub failures: Vec<String>,
}

impl FdReport {
    fn compare(&mut self, what: &str, analytic: f64, numeric: f64) {
        self.checked += 1;
        let err = (analytic - numeric).abs();
        let allowed = (FD_REL_TOL * analytic.abs().max(numeric.abs())).max(FD_ABS_FLOOR);
        self.worst_excess = self.worst_excess.max(err / allowed);
        if err > allowed {
            self.failures.push(format!(
                "{what}: analytic {analytic:e} vs numeric {numeric:e}"
            ));
        }
    }

    pub fn merge(&mut self, o: FdReport) {
        self.checked += o.checked;
        self.skipped += o.skipped;
        self.worst_excess = self.worst_excess.max(o.worst_excess);
        self.failures.extend(o.failures);
    }
}

enum Slot {
    W,
    S,
    LogTheta,
    Head(Option<usize>),
}

fn perturbed(
    inst: &Instance,
    slot: &Slot,
    idx: (usize, usize),
    delta: f64,
) -> (TagNetParams, Heads) {
    let mut p = inst.params.clone();
    let mut h = inst.heads.clone();
    match slot {
        Slot::W => p.w[idx] += delta,
        Slot::S => p.s[idx] += delta,
        Slot::LogTheta => {
            let mut lt = p.log_theta().clone();
            lt[idx.0] += delta;
            p.set_log_theta(lt);
        }
        Slot::Head(None) => h.overall.weights[idx] += delta,
        Slot::Head(Some(k)) => h.aux[*k].as_mut().unwrap().weights[idx] += delta,
    }
    (p, h)
}

/// Central finite differences of the whole objective against the trainer's
/// analytic gradients for W, S, log θ and every head.
pub fn check_gradients(inst: &Instance) -> FdReport {
    let trainer =
        Trainer::new(inst.params.clone(), inst.heads.clone(), inst.config.clone()).unwrap();
    let g = trainer.gradients(&inst.x, &inst.l).unwrap();
    let mut rep = FdReport::default();
    let mut slots: Vec<(String, Slot, Matrix)> = vec![
        ("W".into(), Slot::W, g.w.clone()),
        ("S".into(), Slot::S, g.s.clone()),
        (
            "log_theta".into(),
            Slot::LogTheta,
            g.log_theta
                .clone()
                .into_shape_with_order((inst.params.code_dim(), 1))
                .unwrap(),
        ),
        ("omega".into(), Slot::Head(None), g.overall.clone()),
    ];
    for (k, ga) in g.aux.iter().enumerate() {
        if let Some(ga) = ga {
            slots.push((format!("aux{k}"), Slot::Head(Some(k)), ga.clone()));
        }
    }
    for (name, slot, analytic) in &slots {
        for (idx, &a) in analytic.indexed_iter() {
            let (pp, hp) = perturbed(inst, slot, idx, FD_STEP);
            let (pm, hm) = perturbed(inst, slot, idx, -FD_STEP);
            if pattern(&pp, &hp, &inst.x, &inst.l) != pattern(&pm, &hm, &inst.x, &inst.l) {
                rep.skipped += 1;
                continue;
            }
            let fp = objective(&pp, &hp, &inst.config, &inst.x, &inst.l);
            let fm = objective(&pm, &hm, &inst.config, &inst.x, &inst.l);
            rep.compare(&format!("{name}{idx:?}"), a, (fp - fm) / (2.0 * FD_STEP));
        }
    }
    rep
}

/// Accuracy by trying every injective relabeling of predicted clusters.
pub fn brute_force_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let kp = pred.iter().max().map_or(0, |m| m + 1);
    let kt = truth.iter().max().map_or(0, |m| m + 1);
    let k = kp.max(kt);
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0usize;
    permute(&mut perm, 0, &mut |map| {
        let hits = pred
            .iter()
            .zip(truth)
            .filter(|(&p, &t)| map[p] == t)
            .count();
        best = best.max(hits);
    });
    best as f64 / pred.len() as f64
}

fn permute(v: &mut Vec<usize>, start: usize, f: &mut dyn FnMut(&[usize])) {
    if start == v.len() {
        f(v);
        return;
    }
    for i in start..v.len() {
        v.swap(start, i);
        permute(v, start + 1, f);
        v.swap(start, i);
    }
}

/// Nearest-centroid classification accuracy with centroids taken from the
/// true labels.
pub fn nearest_centroid_accuracy(x: &Matrix, labels: &[usize]) -> f64 {
    let k = labels.iter().max().unwrap() + 1;
    let mut c = Matrix::zeros((x.nrows(), k));
    let mut counts = vec![0.0f64; k];
    for (i, &l) in labels.iter().enumerate() {
        let mut col = c.column_mut(l);
        col += &x.column(i);
        counts[l] += 1.0;
    }
    for (j, &n) in counts.iter().enumerate() {
        let mut col = c.column_mut(j);
        col /= n.max(1.0_f64);
    }
    let hits = (0..x.ncols())
        .filter(|&i| {
            let d = |j: usize| (&x.column(i) - &c.column(j)).mapv(|v| v * v).sum();
            let best = (0..k)
                .min_by(|&a, &b| d(a).partial_cmp(&d(b)).unwrap())
                .unwrap();
            best == labels[i]
        })
        .count();
    hits as f64 / x.ncols() as f64
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Label pairs with NMI worked out by hand from their contingency tables.
pub fn nmi_fixtures() -> Vec<(Vec<usize>, Vec<usize>, f64)> {
    let h = |ps: &[f64]| {
        -ps.iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    };
    // pred [0,0,1,1,1,2], truth [0,0,0,1,1,1]: joint counts 2,1,2,1 over 6
    let term = |pij: f64, pi: f64, pj: f64| pij * (pij / (pi * pj)).ln();
    let mi = term(2.0 / 6.0, 2.0 / 6.0, 0.5)
        + term(1.0 / 6.0, 3.0 / 6.0, 0.5)
        + term(2.0 / 6.0, 3.0 / 6.0, 0.5)
        + term(1.0 / 6.0, 1.0 / 6.0, 0.5);
    let hp = h(&[2.0 / 6.0, 3.0 / 6.0, 1.0 / 6.0]);
    let ht = h(&[0.5, 0.5]);
    vec![
        (vec![0, 1, 2, 0, 1, 2], vec![2, 0, 1, 2, 0, 1], 1.0),
        (vec![0, 0, 0, 0], vec![0, 0, 1, 1], 0.0),
        (vec![0, 0, 1, 1], vec![0, 1, 0, 1], 0.0),
        (
            vec![0, 0, 1, 1, 1, 2],
            vec![0, 0, 0, 1, 1, 1],
            mi / (hp * ht).sqrt(),
        ),
        (vec![0, 1, 1, 1], vec![0, 0, 1, 1], {
            let mi = term(0.25, 0.25, 0.5) + term(0.25, 0.75, 0.5) + term(0.5, 0.75, 0.5);
            mi / (h(&[0.25, 0.75]) * h(&[0.5, 0.5])).sqrt()
        }),
    ]
}
