//! End-to-end fitting: partition the dataset, attach per-cluster labels,
//! build the model, pretrain the autoencoder and train.

use serde::{Deserialize, Serialize};

use super::train::{pretrain_autoencoder, train, PretrainReport, TrainConfig, TrainLog};
use super::{Architecture, Hyper, SelNetModel};
use crate::error::{Error, Result};
use crate::oracle::VectorDataset;
use crate::partition::{partition_metric, partition_random, LayoutKind, PartitionLayout};
use crate::workload::{Split, Workload};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSpec {
    pub arch: Architecture,
    /// `t_max` is taken from the workload when it is not positive.
    pub hyper: Hyper,
    pub k: usize,
    pub ratio: f64,
    pub layout_kind: LayoutKind,
    pub partition_seed: u64,
    pub model_seed: u64,
    pub ae_epochs: usize,
    pub train: TrainConfig,
}

impl Default for FitSpec {
    fn default() -> Self {
        FitSpec {
            arch: Architecture::default(),
            hyper: Hyper {
                t_max: 0.0,
                ..Hyper::default()
            },
            k: 3,
            ratio: crate::partition::DEFAULT_RATIO,
            layout_kind: LayoutKind::Metric,
            partition_seed: 0,
            model_seed: 0,
            ae_epochs: 20,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: SelNetModel,
    pub log: TrainLog,
    pub pretrain: Option<PretrainReport>,
    /// The workload with labels matching the model's layout.
    pub workload: Workload,
}

pub fn build_layout(ds: &VectorDataset, k: usize, ratio: f64, kind: LayoutKind, seed: u64) -> Result<PartitionLayout> {
    match (k, kind) {
        (0, _) => Err(Error::InvalidConfig("k must be at least 1".into())),
        (1, _) => Ok(PartitionLayout::single(ds.n())),
        (_, LayoutKind::Metric) => partition_metric(ds, k, ratio, seed),
        (_, LayoutKind::Random) => partition_random(ds.n(), k, seed),
    }
}

/// Fits a model to `workload`, which must have been labelled on `ds`.
pub fn fit_model(ds: &VectorDataset, workload: &Workload, spec: &FitSpec) -> Result<FitOutcome> {
    if workload.provenance.dataset_fingerprint != ds.fingerprint() {
        return Err(Error::Contract("workload was not labelled on this dataset".into()));
    }
    let mut hyper = spec.hyper.clone();
    if !(hyper.t_max > 0.0) {
        hyper.t_max = workload.t_max();
    }
    if let Some((_, q)) = workload.entries().find(|(_, q)| q.t > hyper.t_max) {
        return Err(Error::OutOfRange { t: q.t, t_max: hyper.t_max });
    }
    let layout = build_layout(ds, spec.k, spec.ratio, spec.layout_kind, spec.partition_seed)?;
    let mut workload = workload.clone();
    if layout.k() > 1 {
        workload.relabel(ds, Some(&layout))?;
    }
    let mut model = SelNetModel::new(ds.d(), &spec.arch, hyper, layout, spec.model_seed)?;
    let pretrain = if spec.ae_epochs > 0 {
        Some(pretrain_autoencoder(
            &mut model.ae,
            ds,
            spec.ae_epochs,
            model.hyper.batch_size,
            model.hyper.learning_rate,
            spec.model_seed,
        )?)
    } else {
        None
    };
    let tr = workload.training_set(Split::Train, &model.layout)?;
    let va = workload.training_set(Split::Val, &model.layout)?;
    let log = train(&mut model, &tr, &va, &spec.train)?;
    Ok(FitOutcome {
        model,
        log,
        pretrain,
        workload,
    })
}
