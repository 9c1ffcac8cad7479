mod common;

use common::brute_force_accuracy;
use nalgebra::DMatrix;
use tagnet_core::graph::{
    build_affinity, build_laplacian, induced_laplacian, median_bandwidth, restrict,
};
use tagnet_core::metrics::{clustering_accuracy, hungarian, nmi};
use tagnet_core::{Matrix, Rng};

#[test]
fn laplacian_quadratic_form_is_weighted_pair_distance() {
    let mut rng = Rng::new(3);
    let x = rng.normal_matrix(4, 7, 1.0);
    let p = build_affinity(&x, 1.3).unwrap();
    let l = build_laplacian(&p).unwrap();
    let a = rng.normal_matrix(5, 7, 1.0);
    let tr = (&a * &a.dot(&l)).sum();
    let mut want = 0.0;
    for i in 0..7 {
        for j in 0..7 {
            let d: f64 = (0..5).map(|r| (a[(r, i)] - a[(r, j)]).powi(2)).sum();
            want += 0.5 * p[(i, j)] * d;
        }
    }
    assert!((tr - want).abs() < 1e-9 * want.max(1.0), "{tr} vs {want}");
}

#[test]
fn laplacian_is_psd_with_zero_row_sums() {
    let mut rng = Rng::new(4);
    let x = rng.normal_matrix(6, 30, 1.0);
    let delta = median_bandwidth(&x, 10_000, &mut rng).unwrap();
    let l = build_laplacian(&build_affinity(&x, delta).unwrap()).unwrap();
    for row in l.rows() {
        assert!(row.sum().abs() < 1e-12);
    }
    let eig = DMatrix::from_fn(30, 30, |i, j| l[(i, j)]).symmetric_eigen();
    let min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    assert!(min > -1e-10, "smallest eigenvalue {min}");

    let idx = [3, 7, 11, 19, 25];
    for sub in [
        restrict(&l, &idx).unwrap(),
        induced_laplacian(&build_affinity(&x, delta).unwrap(), &idx).unwrap(),
    ] {
        let e = DMatrix::from_fn(5, 5, |i, j| sub[(i, j)]).symmetric_eigen();
        assert!(e.eigenvalues.iter().all(|v| *v > -1e-10));
    }
}

#[test]
fn median_bandwidth_matches_exhaustive_median() {
    let mut rng = Rng::new(5);
    let x = rng.normal_matrix(10, 100, 1.0);
    let mut all = Vec::new();
    for i in 0..100 {
        for j in (i + 1)..100 {
            all.push((&x.column(i) - &x.column(j)).mapv(|v| v * v).sum().sqrt());
        }
    }
    all.sort_by(f64::total_cmp);
    let exact = (all[all.len() / 2 - 1] + all[all.len() / 2]) / 2.0;
    let sampled = median_bandwidth(&x, 10_000, &mut rng).unwrap();
    assert!(
        (sampled - exact).abs() <= 0.1 * exact,
        "{sampled} vs {exact}"
    );
    let full = median_bandwidth(&x, 1_000_000, &mut rng).unwrap();
    assert!((full - exact).abs() < 1e-12);
}

#[test]
fn affinity_limits() {
    let mut rng = Rng::new(6);
    let x = Matrix::from_shape_fn((3, 8), |_| rng.uniform());
    let p = build_affinity(&x, 1e9).unwrap();
    assert!(p.iter().all(|v| (v - 1.0).abs() < 1e-6));
    let two = Matrix::from_shape_vec((1, 2), vec![0.0, 0.7]).unwrap();
    let q = build_affinity(&two, 0.7).unwrap();
    assert!((q[(0, 1)] - (-1.0f64).exp()).abs() < 1e-15);
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn hungarian_matches_exhaustive_search() {
    let mut rng = Rng::new(7);
    let perms = permutations(6);
    assert_eq!(perms.len(), 720);
    for _ in 0..50 {
        let cost = Matrix::from_shape_fn((6, 6), |_| rng.below(20) as f64);
        let best = perms
            .iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .map(|(r, &c)| cost[(r, c)])
                    .sum::<f64>()
            })
            .fold(f64::MAX, f64::min);
        let (assign, total) = hungarian(&cost);
        let check: f64 = assign.iter().enumerate().map(|(r, &c)| cost[(r, c)]).sum();
        assert_eq!(total, best);
        assert_eq!(check, best);
    }
}

#[test]
fn accuracy_matches_bijection_search_on_random_labels() {
    let mut rng = Rng::new(8);
    for _ in 0..2000 {
        let n = 1 + rng.below(12);
        let kp = 1 + rng.below(6);
        let kt = 1 + rng.below(6);
        let pred: Vec<usize> = (0..n).map(|_| rng.below(kp)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.below(kt)).collect();
        let got = clustering_accuracy(&pred, &truth).unwrap();
        assert!(
            (got - brute_force_accuracy(&pred, &truth)).abs() < 1e-15,
            "{pred:?} {truth:?}"
        );
    }
}

#[test]
fn nmi_hand_computed_fixtures() {
    for (pred, truth, want) in common::nmi_fixtures() {
        let got = nmi(&pred, &truth).unwrap();
        assert!(
            (got - want).abs() < 1e-10,
            "{pred:?} {truth:?}: {got} vs {want}"
        );
    }
}
