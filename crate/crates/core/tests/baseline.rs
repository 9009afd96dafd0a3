use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use selest::metrics::{compute_metrics, empirical_monotonicity, rs_estimate, RsBaseline};
use selest::oracle::{selectivity_bruteforce, selectivity_tree, CountTree};
use selest::workload::gen_synthetic;

#[test]
fn sampling_is_inexact_where_the_oracle_is_exact() {
    let ds = gen_synthetic(10_000, 8, 4, 21).unwrap();
    let tree = CountTree::build(&ds, 0).unwrap();
    let rs = RsBaseline::new(&ds, 0.01, 3).unwrap();
    assert_eq!(rs.sample_indices.len(), 100);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut truth, mut sampled, mut exact) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..100 {
        let x = ds.row(rng.random_range(0..ds.n())).to_vec();
        let t = rng.random_range(0.05..0.6);
        truth.push(selectivity_bruteforce(&ds, &x, t).unwrap() as f64);
        exact.push(selectivity_tree(&tree, &ds, &x, t).unwrap() as f64);
        sampled.push(rs_estimate(&rs, &ds, &x, t).unwrap());
    }
    assert!(compute_metrics(&truth, &sampled).unwrap().mse > 0.0);
    assert_eq!(compute_metrics(&truth, &exact).unwrap().mse, 0.0);
}

#[test]
fn sampling_baseline_is_consistent() {
    let ds = gen_synthetic(2_000, 4, 3, 1).unwrap();
    let rs = RsBaseline::new(&ds, 0.05, 0).unwrap();
    let queries: Vec<Vec<f64>> = (0..20).map(|i| ds.row(i * 7).to_vec()).collect();
    assert_eq!(empirical_monotonicity(&rs.bind(&ds, 2.0), &queries, 50, 4).unwrap(), 100.0);
}
