use selest::estimator::{train, Architecture, Hyper, SelNetModel, TrainConfig};
use selest::metrics::empirical_monotonicity;
use selest::nnet::ParamGroups;
use selest::oracle::{selectivity_bruteforce, DistanceKind, VectorDataset};
use selest::partition::PartitionLayout;
use selest::updates::{apply_update, check_drift, incremental_train, IncrementalConfig, UpdateOp};
use selest::workload::{build_workload, gen_synthetic, LabeledQuery, Provenance, Split, Workload, WorkloadConfig};

fn small_arch() -> Architecture {
    Architecture {
        z_dim: 4,
        h_dim: 4,
        ae_hidden: vec![8],
        tau_hidden: vec![8],
        m_hidden: vec![8],
    }
}

/// A model whose every control value is zero, so every estimate is zero.
fn zero_model(d: usize, n: usize, t_max: f64) -> SelNetModel {
    let hyper = Hyper {
        control_points: 4,
        t_max,
        ..Hyper::default()
    };
    let mut m = SelNetModel::new(d, &small_arch(), hyper, PartitionLayout::single(n), 3).unwrap();
    for (name, g) in m.groups_mut() {
        if name.starts_with("local") && name.ends_with("decoder.bias") {
            g.iter_mut().for_each(|b| *b = -1e6);
        }
    }
    m
}

/// Validation set made of one query object at several thresholds.
fn one_object_workload(ds: &VectorDataset, x: &[f64], ts: &[f64]) -> Workload {
    let entries: Vec<LabeledQuery> = ts
        .iter()
        .map(|&t| LabeledQuery {
            query: 0,
            x: x.to_vec(),
            t,
            y: selectivity_bruteforce(ds, x, t).unwrap() as f64,
            per_cluster_y: None,
        })
        .collect();
    Workload {
        provenance: Provenance {
            dataset_fingerprint: ds.fingerprint(),
            n: ds.n(),
            d: ds.d(),
            kind: ds.kind(),
            t_max: 2.0,
            k: None,
            config: WorkloadConfig::default(),
        },
        train: entries.clone(),
        val: entries.clone(),
        test: entries,
    }
}

#[test]
fn drift_of_five_stays_below_twenty() {
    let ds0 = gen_synthetic(400, 3, 2, 9).unwrap();
    let x = ds0.row(11).to_vec();
    let wl = one_object_workload(&ds0, &x, &[0.0, 0.1, 0.5, 1.5]);
    let model = zero_model(3, ds0.n(), 2.0);
    let mut ds = ds0.clone();
    // Five exact copies of the query object: every label grows by exactly 5,
    // and with all-zero estimates the MAE grows by the same amount.
    apply_update(&mut ds, None, &[UpdateOp::Insert { vectors: vec![x.clone(); 5] }]).unwrap();
    let expected_before = wl.val.iter().map(|q| q.y).sum::<f64>() / wl.val.len() as f64;
    let expected_after = wl
        .val
        .iter()
        .map(|q| selectivity_bruteforce(&ds, &q.x, q.t).unwrap() as f64)
        .sum::<f64>()
        / wl.val.len() as f64;
    assert!((expected_after - expected_before - 5.0).abs() < 1e-12);

    let r = check_drift(&model, &wl, &ds, 20.0).unwrap();
    assert!((r.mae_before - expected_before).abs() < 1e-9);
    assert!((r.mae_after_relabel - expected_after).abs() < 1e-9);
    assert!(!r.retrain);
    assert!(check_drift(&model, &wl, &ds, 4.9).unwrap().retrain);
    assert!(!check_drift(&model, &wl, &ds, 5.1).unwrap().retrain);
}

#[test]
fn converged_model_stops_within_patience_and_barely_moves() {
    let ds = gen_synthetic(500, 3, 2, 4).unwrap();
    let cfg = WorkloadConfig {
        queries: 30,
        targets: 6,
        seed: 2,
        ..WorkloadConfig::default()
    };
    let wl = build_workload(&ds, &cfg, None).unwrap();
    let hyper = Hyper {
        control_points: 6,
        t_max: wl.t_max(),
        learning_rate: 3e-3,
        batch_size: 32,
        ..Hyper::default()
    };
    let mut model = SelNetModel::new(3, &small_arch(), hyper, PartitionLayout::single(ds.n()), 5).unwrap();
    let tr = wl.training_set(Split::Train, &model.layout).unwrap();
    let va = wl.training_set(Split::Val, &model.layout).unwrap();
    let tc = TrainConfig {
        max_epochs: 400,
        patience: 30,
        pretrain_epochs: 0,
        log_every: 0,
        monitor: selest::estimator::Monitor::Mae,
        ..TrainConfig::default()
    };
    train(&mut model, &tr, &va, &tc).unwrap();
    let before = model.clone();
    let inc = IncrementalConfig::default();
    let log = incremental_train(&mut model, &wl, &inc).unwrap();
    let ran = log.epochs.len() - 1;
    assert!(log.stopped_early);
    assert!(ran <= log.best_epoch + inc.patience, "ran {ran}, best {}", log.best_epoch);

    let norm = |m: &SelNetModel| m.groups().iter().flat_map(|(_, g)| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    let diff: f64 = before
        .groups()
        .iter()
        .zip(model.groups())
        .flat_map(|((_, a), (_, b))| a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).collect::<Vec<_>>())
        .sum::<f64>()
        .sqrt();
    assert!(diff / norm(&before) < 0.05, "relative change {}", diff / norm(&before));

    let queries: Vec<Vec<f64>> = wl.val.iter().map(|q| q.x.clone()).collect();
    assert_eq!(empirical_monotonicity(&model, &queries, 60, 0).unwrap(), 100.0);
}

#[test]
fn cosine_dataset_supports_updates() {
    let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]];
    let mut ds = VectorDataset::from_rows(&rows, DistanceKind::Cosine).unwrap();
    apply_update(&mut ds, None, &[UpdateOp::Insert { vectors: vec![vec![0.8, 0.6]] }]).unwrap();
    assert_eq!(ds.n(), 4);
    assert_eq!(selectivity_bruteforce(&ds, &[1.0, 0.0], 0.25).unwrap(), 2);
}
