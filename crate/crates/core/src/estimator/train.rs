use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{gate_matrix, loss_and_grads, Batch, LossWeights};
use super::model::{AutoEncoder, SelNetModel};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, MetricReport};
use crate::nnet::{AdamConfig, OptimizerState};
use crate::oracle::VectorDataset;
use crate::partition::PartitionLayout;

/// Labelled `(x, t, y)` examples with their gate bits.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub x: Array2<f64>,
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    /// Per-cluster labels, `(rows, K)`.
    pub cluster_y: Option<Array2<f64>>,
    pub gates: Array2<f64>,
}

impl TrainingSet {
    pub fn new(layout: &PartitionLayout, x: Array2<f64>, t: Vec<f64>, y: Vec<f64>, cluster_y: Option<Array2<f64>>) -> Result<Self> {
        if x.nrows() != t.len() || t.len() != y.len() {
            return Err(Error::Shape(format!("{} rows, {} thresholds, {} labels", x.nrows(), t.len(), y.len())));
        }
        if let Some(cy) = &cluster_y {
            if cy.dim() != (t.len(), layout.k()) {
                return Err(Error::Shape(format!("per-cluster labels {:?} for K={}", cy.dim(), layout.k())));
            }
        }
        let gates = gate_matrix(layout, x.view(), &t);
        Ok(TrainingSet {
            x,
            t,
            y,
            cluster_y,
            gates,
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Recomputes the gate bits, e.g. after the layout changed.
    pub fn refresh_gates(&mut self, layout: &PartitionLayout) {
        self.gates = gate_matrix(layout, self.x.view(), &self.t);
    }

    pub fn as_batch(&self) -> Batch<'_> {
        Batch {
            x: self.x.view(),
            t: &self.t,
            y: &self.y,
            gates: self.gates.view(),
            cluster_y: self.cluster_y.as_ref().map(|c| c.view()),
        }
    }

    fn select(&self, idx: &[usize]) -> TrainingSet {
        TrainingSet {
            x: self.x.select(Axis(0), idx),
            t: idx.iter().map(|&i| self.t[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            cluster_y: self.cluster_y.as_ref().map(|c| c.select(Axis(0), idx)),
            gates: self.gates.select(Axis(0), idx),
        }
    }

    /// Error metrics of `model` on this set.
    pub fn evaluate(&self, model: &SelNetModel) -> Result<MetricReport> {
        let est = model.estimate_batch(self.x.view(), &self.t)?;
        compute_metrics(&self.y, &est)
    }
}

/// Quantity watched for snapshotting and early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Monitor {
    Mse,
    Mae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// `T`: epochs during which the local models train on their own labels.
    pub pretrain_epochs: usize,
    pub seed: u64,
    /// Log every this many epochs (0 disables progress logging).
    pub log_every: usize,
    pub monitor: Monitor,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 1500,
            patience: 5,
            pretrain_epochs: 300,
            seed: 0,
            log_every: 10,
            monitor: Monitor::Mse,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::InvalidConfig("patience must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Validation before any update.
    Initial,
    /// Local models on per-cluster labels.
    Locals,
    /// Gated sum plus `β` times the local terms.
    Joint,
    /// Gated sum only.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    /// Mean total loss per example over the epoch.
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    pub val_mape: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub best_val_mae: f64,
    pub stopped_early: bool,
}

impl TrainLog {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain struct") + "\n")
            .collect()
    }
}

fn stage_for(epoch: usize, model: &SelNetModel, cfg: &TrainConfig) -> Stage {
    if model.k() > 1 && epoch <= cfg.pretrain_epochs {
        Stage::Locals
    } else if model.k() > 1 && model.hyper.beta_joint > 0.0 {
        Stage::Joint
    } else {
        Stage::Global
    }
}

/// Mini-batch Adam on the training split, keeping the parameters with the
/// best validation score. `model` is left holding that snapshot.
pub fn train(model: &mut SelNetModel, train: &TrainingSet, val: &TrainingSet, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidConfig("training and validation splits must be nonempty".into()));
    }
    let needs_local = model.k() > 1 && (cfg.pretrain_epochs > 0 || model.hyper.beta_joint > 0.0) && cfg.max_epochs > 0;
    if needs_local && train.cluster_y.is_none() {
        return Err(Error::InvalidConfig(
            "per-cluster labels are required for local pretraining or joint training".into(),
        ));
    }
    for set in [train, val] {
        if set.gates.ncols() != model.k() {
            return Err(Error::Shape(format!("gates for K={} but model has K={}", set.gates.ncols(), model.k())));
        }
    }

    let score = |m: &MetricReport| match cfg.monitor {
        Monitor::Mse => m.mse,
        Monitor::Mae => m.mae,
    };
    let mut log = TrainLog::default();
    let initial = val.evaluate(model)?;
    let mut best = score(&initial);
    let mut best_model = model.clone();
    log.best_val_mse = initial.mse;
    log.best_val_mae = initial.mae;
    log.epochs.push(EpochLog {
        epoch: 0,
        stage: Stage::Initial,
        train_loss: f64::NAN,
        val_mse: initial.mse,
        val_mae: initial.mae,
        val_mape: initial.mape,
        improved: false,
    });

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(AdamConfig::with_lr(model.hyper.learning_rate));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let stage = stage_for(epoch, model, cfg);
        let weights = match stage {
            Stage::Locals => LossWeights::locals_only(&model.hyper),
            Stage::Joint => LossWeights::joint(&model.hyper),
            _ => LossWeights::plain(&model.hyper),
        };
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(model.hyper.batch_size) {
            let part = train.select(chunk);
            let (loss, grads) = loss_and_grads(model, &part.as_batch(), &weights)?;
            opt.step(model, &grads)?;
            loss_sum += loss.total;
        }
        let m = val.evaluate(model)?;
        let improved = score(&m) < best;
        if improved {
            best = score(&m);
            best_model = model.clone();
            log.best_epoch = epoch;
            log.best_val_mse = m.mse;
            log.best_val_mae = m.mae;
        }
        let entry = EpochLog {
            epoch,
            stage,
            train_loss: loss_sum / train.len() as f64,
            val_mse: m.mse,
            val_mae: m.mae,
            val_mape: m.mape,
            improved,
        };
        if cfg.log_every > 0 && epoch % cfg.log_every == 0 {
            log::info!(
                "epoch {epoch} {stage:?} loss {:.4} val mse {:.3} mae {:.3}",
                entry.train_loss,
                m.mse,
                m.mae
            );
        }
        log.epochs.push(entry);
        // Patience only runs once the final objective is in use.
        if stage != Stage::Locals {
            stale = if improved { 0 } else { stale + 1 };
            if stale >= cfg.patience {
                log.stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    *model = best_model;
    Ok(log)
}

/// Reconstruction error before and after autoencoder pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_holdout_mse: f64,
    pub final_holdout_mse: f64,
    pub holdout_rows: usize,
}

/// Trains the autoencoder alone on the rows of `ds`, holding out 5% for
/// snapshot selection (all rows when the dataset is too small to split).
pub fn pretrain_autoencoder(
    ae: &mut AutoEncoder,
    ds: &VectorDataset,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<PretrainReport> {
    if ds.is_empty() {
        return Err(Error::InvalidConfig("cannot pretrain on an empty dataset".into()));
    }
    if ds.d() != ae.encoder.input_dim() {
        return Err(Error::Shape(format!("dataset dim {} vs autoencoder {}", ds.d(), ae.encoder.input_dim())));
    }
    let data = ArrayView2::from_shape((ds.n(), ds.d()), ds.flat()).map_err(|e| Error::Shape(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..ds.n()).collect();
    idx.shuffle(&mut rng);
    let holdout_rows = ds.n() / 20;
    let (hold, fit): (Vec<usize>, Vec<usize>) = if holdout_rows == 0 {
        (idx.clone(), idx)
    } else {
        (idx[..holdout_rows].to_vec(), idx[holdout_rows..].to_vec())
    };
    let holdout = data.select(Axis(0), &hold);
    let initial = ae.reconstruction_mse(holdout.view())?;
    let mut best = initial;
    let mut best_ae = ae.clone();
    let mut enc_opt = OptimizerState::new(AdamConfig::with_lr(learning_rate));
    let mut dec_opt = OptimizerState::new(AdamConfig::with_lr(learning_rate));
    let mut order = fit;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size.max(1)) {
            let x = data.select(Axis(0), chunk);
            let (_, enc_g, dec_g) = ae.mse_grads(x.view(), 1.0)?;
            enc_opt.step(&mut ae.encoder, &enc_g)?;
            dec_opt.step(&mut ae.decoder, &dec_g)?;
        }
        let mse = ae.reconstruction_mse(holdout.view())?;
        if mse < best {
            best = mse;
            best_ae = ae.clone();
        }
    }
    *ae = best_ae;
    Ok(PretrainReport {
        initial_holdout_mse: initial,
        final_holdout_mse: best,
        holdout_rows: hold.len(),
    })
}
