//! Database updates, the retraining rule and incremental training.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{train, Monitor, SelNetModel, TrainConfig, TrainLog};
use crate::metrics::compute_metrics;
use crate::oracle::{CountTree, VectorDataset};
use crate::partition::PartitionLayout;
use crate::workload::{LabeledQuery, Split, Workload};

/// Default retraining threshold on the validation MAE shift.
pub const DEFAULT_DELTA_U: f64 = 20.0;

/// Records per generated update operation.
pub const DEFAULT_BATCH: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum UpdateOp {
    Insert { vectors: Vec<Vec<f64>> },
    /// Row ids in the dataset as it stands when the operation is applied.
    Delete { ids: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateSummary {
    pub n_before: usize,
    pub n_after: usize,
    pub inserted: usize,
    pub deleted: usize,
    pub fingerprint: String,
}

/// Applies `ops` in order. Either every operation succeeds or neither the
/// dataset nor the layout changes. Inserted rows join the cluster with the
/// nearest ball center; deleted rows leave their cluster and later ids shift
/// down.
pub fn apply_update(ds: &mut VectorDataset, layout: Option<&mut PartitionLayout>, ops: &[UpdateOp]) -> Result<UpdateSummary> {
    let mut next = ds.clone();
    let mut next_layout = layout.as_deref().cloned();
    let n_before = ds.n();
    let (mut inserted, mut deleted) = (0, 0);
    for op in ops {
        match op {
            UpdateOp::Insert { vectors } => {
                for v in vectors {
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(Error::NonFinite("inserted vector".into()));
                    }
                    let id = next.n();
                    next.push_row(v)?;
                    if let Some(l) = next_layout.as_mut() {
                        l.insert_row(id, v);
                    }
                    inserted += 1;
                }
            }
            UpdateOp::Delete { ids } => {
                let mut keep = vec![true; next.n()];
                for &id in ids {
                    if id >= keep.len() || !keep[id] {
                        return Err(Error::NotFound(id));
                    }
                    keep[id] = false;
                }
                if let Some(l) = next_layout.as_mut() {
                    let mut new_id = 0;
                    let remap: Vec<Option<usize>> = keep
                        .iter()
                        .map(|&k| {
                            k.then(|| {
                                new_id += 1;
                                new_id - 1
                            })
                        })
                        .collect();
                    l.remap_rows(&remap);
                }
                next.retain_rows(&keep);
                deleted += ids.len();
            }
        }
    }
    *ds = next;
    if let (Some(l), Some(n)) = (layout, next_layout) {
        *l = n;
    }
    Ok(UpdateSummary {
        n_before,
        n_after: ds.n(),
        inserted,
        deleted,
        fingerprint: ds.fingerprint(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub mae_before: f64,
    pub mae_after_relabel: f64,
    pub delta_u: f64,
    pub retrain: bool,
}

/// Mean absolute error of `model` on `entries` with their stored labels.
pub fn split_mae(model: &SelNetModel, entries: &[LabeledQuery]) -> Result<f64> {
    let y: Vec<f64> = entries.iter().map(|e| e.y).collect();
    let est = entries
        .iter()
        .map(|e| model.estimate(&e.x, e.t))
        .collect::<Result<Vec<_>>>()?;
    Ok(compute_metrics(&y, &est)?.mae)
}

/// Validation MAE against the stored labels and against labels recounted on
/// `ds`; retraining is due when the two differ by more than `delta_u`.
pub fn check_drift(model: &SelNetModel, workload: &Workload, ds: &VectorDataset, delta_u: f64) -> Result<DriftReport> {
    if workload.val.is_empty() {
        return Err(Error::InvalidConfig("validation split is empty".into()));
    }
    if !(delta_u >= 0.0) {
        return Err(Error::InvalidConfig(format!("delta_u must be >= 0, got {delta_u}")));
    }
    let mae_before = split_mae(model, &workload.val)?;
    let tree = CountTree::build(ds, 0)?;
    let relabeled = workload
        .val
        .iter()
        .map(|e| {
            Ok(LabeledQuery {
                y: tree.count(&e.x, e.t)? as f64,
                ..e.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mae_after_relabel = split_mae(model, &relabeled)?;
    Ok(DriftReport {
        mae_before,
        mae_after_relabel,
        delta_u,
        retrain: (mae_after_relabel - mae_before).abs() > delta_u,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementalConfig {
    pub max_epochs: usize,
    /// Epochs without validation-MAE improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for IncrementalConfig {
    fn default() -> Self {
        IncrementalConfig {
            max_epochs: 200,
            patience: 3,
            seed: 0,
        }
    }
}

/// Continues training `model` from its current parameters on the (already
/// relabelled) training split, stopping on validation MAE. The returned
/// model is never worse on validation MAE than the starting one.
pub fn incremental_train(model: &mut SelNetModel, workload: &Workload, cfg: &IncrementalConfig) -> Result<TrainLog> {
    let layout = model.layout.clone();
    let tr = workload.training_set(Split::Train, &layout)?;
    let va = workload.training_set(Split::Val, &layout)?;
    let tc = TrainConfig {
        max_epochs: cfg.max_epochs,
        patience: cfg.patience,
        pretrain_epochs: 0,
        seed: cfg.seed,
        log_every: 0,
        monitor: Monitor::Mae,
    };
    train(model, &tr, &va, &tc)
}

/// Outcome of one operation of an update stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamStep {
    pub step: usize,
    pub summary: UpdateSummary,
    pub drift: DriftReport,
    pub retrained: bool,
    /// Validation MAE on the new labels after retraining.
    pub mae_after_retrain: Option<f64>,
    pub epochs: usize,
}

/// Applies one operation, checks drift and retrains when due. Stored labels
/// are only refreshed when the model is retrained, so drift accumulates
/// across skipped steps.
pub fn process_update(
    model: &mut SelNetModel,
    workload: &mut Workload,
    ds: &mut VectorDataset,
    op: &UpdateOp,
    delta_u: f64,
    cfg: &IncrementalConfig,
    step: usize,
) -> Result<StreamStep> {
    let summary = apply_update(ds, Some(&mut model.layout), std::slice::from_ref(op))?;
    let drift = check_drift(model, workload, ds, delta_u)?;
    let mut out = StreamStep {
        step,
        summary,
        drift,
        retrained: false,
        mae_after_retrain: None,
        epochs: 0,
    };
    if drift.retrain {
        let layout = model.layout.clone();
        workload.relabel(ds, Some(&layout).filter(|l| l.k() > 1))?;
        let log = incremental_train(model, workload, cfg)?;
        out.retrained = true;
        out.mae_after_retrain = Some(split_mae(model, &workload.val)?);
        out.epochs = log.epochs.len() - 1;
    }
    Ok(out)
}

/// Random stream: inserts are jittered copies of existing rows, deletes pick
/// random current rows. Operations alternate insert, delete, insert, ...
pub fn gen_update_stream(ds: &VectorDataset, steps: usize, batch: usize, jitter: f64, seed: u64) -> Result<Vec<UpdateOp>> {
    if ds.is_empty() || batch == 0 {
        return Err(Error::InvalidConfig("need a nonempty dataset and batch size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, jitter.max(f64::MIN_POSITIVE)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut n = ds.n();
    let mut ops = Vec::with_capacity(steps);
    for s in 0..steps {
        if s % 2 == 0 || n <= batch {
            let vectors = (0..batch)
                .map(|_| {
                    let src = rng.random_range(0..ds.n());
                    ds.row(src).iter().map(|v| v + noise.sample(&mut rng)).collect()
                })
                .collect();
            n += batch;
            ops.push(UpdateOp::Insert { vectors });
        } else {
            let mut ids = BTreeSet::new();
            while ids.len() < batch {
                ids.insert(rng.random_range(0..n));
            }
            n -= batch;
            ops.push(UpdateOp::Delete { ids: ids.into_iter().collect() });
        }
    }
    Ok(ops)
}

pub fn write_update_stream<W: Write>(ops: &[UpdateOp], mut w: W) -> Result<()> {
    for op in ops {
        serde_json::to_writer(&mut w, op)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_update_stream<R: BufRead>(r: R) -> Result<Vec<UpdateOp>> {
    let mut ops = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        ops.push(serde_json::from_str(&line).map_err(|e| Error::Malformed(format!("update line {}: {e}", i + 1)))?);
    }
    Ok(ops)
}
