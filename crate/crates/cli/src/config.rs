//! Run configuration: built-in defaults, overlaid by a TOML file, overlaid by
//! command-line flags. Keys are unique across sections so each one maps to a
//! single flag.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use selest::estimator::{Architecture, FitSpec, Hyper, Monitor, TauInput, TrainConfig};
use selest::oracle::DistanceKind;
use selest::partition::LayoutKind;
use selest::toy::ToyConfig;
use selest::updates::IncrementalConfig;
use selest::workload::{Split, TMaxPolicy, WorkloadConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsSection,
    pub data: DataSection,
    pub workload: WorkloadSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub evaluate: EvaluateSection,
    pub update: UpdateSection,
    pub toy: ToySection,
}

/// Empty paths mean "not given".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub dataset: PathBuf,
    pub workload: PathBuf,
    pub model: PathBuf,
    /// Output directory; the working directory when empty, except that
    /// `estimate` then writes to standard output.
    pub out: PathBuf,
    /// Estimation input; standard input when empty.
    pub input: PathBuf,
    /// Update stream; generated when empty.
    pub stream: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            dataset: PathBuf::new(),
            workload: PathBuf::new(),
            model: PathBuf::new(),
            out: PathBuf::new(),
            input: PathBuf::new(),
            stream: PathBuf::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n: usize,
    pub d: usize,
    pub components: usize,
    pub data_seed: u64,
    pub kind: DistanceKind,
    /// Whitespace-separated text vectors to import instead of generating.
    pub import: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n: 20_000,
            d: 16,
            components: 8,
            data_seed: 0,
            kind: DistanceKind::Euclidean,
            import: PathBuf::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSection {
    pub queries: usize,
    pub targets: usize,
    pub target_min: f64,
    /// 0 means 1% of the dataset.
    pub target_max: f64,
    pub eval_thresholds: usize,
    pub noise_std: f64,
    pub t_max_factor: f64,
    /// Fixed workload `t_max`; 0 means observed maximum times `t_max_factor`.
    pub workload_t_max: f64,
    pub workload_seed: u64,
    pub verify: bool,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        let w = WorkloadConfig::default();
        WorkloadSection {
            queries: w.queries,
            targets: w.targets,
            target_min: w.target_min,
            target_max: 0.0,
            eval_thresholds: w.eval_thresholds,
            noise_std: w.noise_std,
            t_max_factor: 1.05,
            workload_t_max: 0.0,
            workload_seed: w.seed,
            verify: w.verify,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchPreset {
    Full,
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: ArchPreset,
    /// 0 keeps the preset's value.
    pub z_dim: usize,
    /// 0 keeps the preset's value.
    pub h_dim: usize,
    pub control_points: usize,
    pub k: usize,
    pub ratio: f64,
    pub partition: LayoutKind,
    pub partition_seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lambda_ae: f64,
    pub beta_joint: f64,
    pub tau_input: TauInput,
    /// 0 takes `t_max` from the workload.
    pub t_max: f64,
    pub model_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let h = Hyper::default();
        ModelSection {
            arch: ArchPreset::Full,
            z_dim: 0,
            h_dim: 0,
            control_points: h.control_points,
            k: 3,
            ratio: selest::partition::DEFAULT_RATIO,
            partition: LayoutKind::Metric,
            partition_seed: 0,
            learning_rate: h.learning_rate,
            batch_size: h.batch_size,
            lambda_ae: h.lambda_ae,
            beta_joint: h.beta_joint,
            tau_input: h.tau_input,
            t_max: 0.0,
            model_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub max_epochs: usize,
    pub patience: usize,
    pub pretrain_epochs: usize,
    pub ae_epochs: usize,
    pub monitor: Monitor,
    pub log_every: usize,
    pub train_seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            max_epochs: t.max_epochs,
            patience: t.patience,
            pretrain_epochs: t.pretrain_epochs,
            ae_epochs: FitSpec::default().ae_epochs,
            monitor: t.monitor,
            log_every: t.log_every,
            train_seed: t.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub split: Split,
    pub monotonicity_queries: usize,
    pub monotonicity_thresholds: usize,
    /// RS baseline sample fraction; the baseline needs `--dataset`.
    pub rs_fraction: f64,
    pub eval_seed: u64,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            split: Split::Test,
            monotonicity_queries: 200,
            monotonicity_thresholds: 100,
            rs_fraction: 0.01,
            eval_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpdateSection {
    pub delta_u: f64,
    pub steps: usize,
    pub update_batch: usize,
    /// Standard deviation of the noise added to copied rows on insert.
    pub jitter: f64,
    pub update_seed: u64,
    pub inc_max_epochs: usize,
    pub inc_patience: usize,
}

impl Default for UpdateSection {
    fn default() -> Self {
        let inc = IncrementalConfig::default();
        UpdateSection {
            delta_u: selest::updates::DEFAULT_DELTA_U,
            steps: 20,
            update_batch: selest::updates::DEFAULT_BATCH,
            jitter: 0.01,
            update_seed: 0,
            inc_max_epochs: inc.max_epochs,
            inc_patience: inc.patience,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    pub toy_samples: usize,
    pub toy_control_points: usize,
    pub toy_epochs: usize,
    pub toy_lr_tau: f64,
    pub toy_lr_values: f64,
    pub toy_seed: u64,
}

impl Default for ToySection {
    fn default() -> Self {
        let t = ToyConfig::default();
        ToySection {
            toy_samples: t.samples,
            toy_control_points: t.control_points,
            toy_epochs: t.epochs,
            toy_lr_tau: t.lr_tau,
            toy_lr_values: t.lr_values,
            toy_seed: t.seed,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: PathsSection::default(),
            data: DataSection::default(),
            workload: WorkloadSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            evaluate: EvaluateSection::default(),
            update: UpdateSection::default(),
            toy: ToySection::default(),
        }
    }
}

/// One optional flag per configuration key.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct Overrides {
    /// TOML configuration file.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workload: Option<PathBuf>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stream: Option<PathBuf>,

    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub components: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    /// euclidean or cosine.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub import: Option<PathBuf>,

    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub queries: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub targets: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_min: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_max: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_thresholds: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_std: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_max_factor: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workload_t_max: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workload_seed: Option<u64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verify: Option<bool>,

    /// full or desk.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arch: Option<String>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_dim: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_dim: Option<usize>,
    /// Interior control points (L).
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub control_points: Option<usize>,
    /// Number of clusters (K).
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// Partition ratio (r).
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    /// metric or random.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partition: Option<String>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partition_seed: Option<u64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// Autoencoder loss weight (λ).
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_ae: Option<f64>,
    /// Local loss weight during joint training (β).
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_joint: Option<f64>,
    /// query or constant.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_input: Option<String>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_max: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_seed: Option<u64>,

    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    /// Local-only epochs before joint training (T).
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_epochs: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ae_epochs: Option<usize>,
    /// mse or mae.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub monitor: Option<String>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_every: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_seed: Option<u64>,

    /// train, val or test.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub monotonicity_queries: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub monotonicity_thresholds: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rs_fraction: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_seed: Option<u64>,

    /// Retraining threshold on validation-MAE drift (δ_U).
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_u: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub update_batch: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jitter: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub update_seed: Option<u64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inc_max_epochs: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inc_patience: Option<usize>,

    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub toy_samples: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub toy_control_points: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub toy_epochs: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub toy_lr_tau: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub toy_lr_values: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub toy_seed: Option<u64>,
}

/// Problems with the configuration itself, reported as usage errors.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn section_of<'a>(defaults: &'a toml::Table, key: &str) -> Option<&'a str> {
    defaults
        .iter()
        .find(|(_, v)| v.as_table().is_some_and(|t| t.contains_key(key)))
        .map(|(s, _)| s.as_str())
}

/// Defaults, then `file` (if any), then the flags that were given.
pub fn resolve(file: Option<&str>, flags: &Overrides) -> Result<RunConfig> {
    let defaults = toml::Table::try_from(RunConfig::default()).context("serializing defaults")?;
    let mut merged = defaults.clone();
    if let Some(text) = file {
        let parsed: toml::Table = text.parse().map_err(|e| config_err(format!("config file: {e}")))?;
        for (section, body) in parsed {
            let Some(target) = merged.get_mut(&section).and_then(toml::Value::as_table_mut) else {
                return Err(config_err(format!("config file: unknown section [{section}]")));
            };
            let body = body
                .as_table()
                .ok_or_else(|| config_err(format!("config file: `{section}` must be a section")))?;
            for (k, v) in body {
                if !target.contains_key(k) {
                    return Err(config_err(format!("config file: unknown key `{k}` in [{section}]")));
                }
                target.insert(k.clone(), v.clone());
            }
        }
    }
    let flags = toml::Table::try_from(flags).context("serializing flags")?;
    for (k, v) in flags {
        let section = section_of(&defaults, &k).ok_or_else(|| anyhow!("flag --{k} has no configuration key"))?;
        merged[section].as_table_mut().expect("section table").insert(k, v);
    }
    let cfg: RunConfig = toml::Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| config_err(format!("configuration: {}", e.message())))?;
    cfg.check()?;
    Ok(cfg)
}

pub fn load(flags: &Overrides) -> Result<RunConfig> {
    let text = match &flags.config {
        Some(p) => Some(std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?),
        None => None,
    };
    resolve(text.as_deref(), flags)
}

pub fn is_set(p: &Path) -> bool {
    !p.as_os_str().is_empty()
}

impl RunConfig {
    /// Range checks that do not depend on the command.
    fn check(&self) -> Result<()> {
        let m = &self.model;
        if m.k == 0 || m.control_points == 0 || m.batch_size == 0 {
            return Err(config_err("k, control_points and batch_size must be positive"));
        }
        if !(m.ratio > 0.0 && m.ratio < 1.0) {
            return Err(config_err(format!("ratio must lie in (0, 1), got {}", m.ratio)));
        }
        if !(self.update.delta_u >= 0.0) {
            return Err(config_err("delta_u must be non-negative"));
        }
        if !(self.evaluate.rs_fraction > 0.0 && self.evaluate.rs_fraction <= 1.0) {
            return Err(config_err("rs_fraction must lie in (0, 1]"));
        }
        self.toml_text().map(|_| ())
    }

    pub fn toml_text(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing configuration")
    }

    pub fn architecture(&self) -> Architecture {
        let mut a = match self.model.arch {
            ArchPreset::Full => Architecture::default(),
            ArchPreset::Desk => Architecture::desk(),
        };
        if self.model.z_dim > 0 {
            a.z_dim = self.model.z_dim;
        }
        if self.model.h_dim > 0 {
            a.h_dim = self.model.h_dim;
        }
        a
    }

    pub fn workload_config(&self) -> WorkloadConfig {
        let w = &self.workload;
        WorkloadConfig {
            queries: w.queries,
            targets: w.targets,
            target_min: w.target_min,
            target_max: (w.target_max > 0.0).then_some(w.target_max),
            split: [0.8, 0.1, 0.1],
            eval_thresholds: w.eval_thresholds,
            noise_std: w.noise_std,
            t_max: if w.workload_t_max > 0.0 {
                TMaxPolicy::Fixed { value: w.workload_t_max }
            } else {
                TMaxPolicy::Observed { factor: w.t_max_factor }
            },
            seed: w.workload_seed,
            verify: w.verify,
        }
    }

    pub fn fit_spec(&self) -> FitSpec {
        let m = &self.model;
        let t = &self.train;
        FitSpec {
            arch: self.architecture(),
            hyper: Hyper {
                control_points: m.control_points,
                t_max: m.t_max,
                lambda_ae: m.lambda_ae,
                beta_joint: m.beta_joint,
                learning_rate: m.learning_rate,
                batch_size: m.batch_size,
                tau_input: m.tau_input,
                ..Hyper::default()
            },
            k: m.k,
            ratio: m.ratio,
            layout_kind: m.partition,
            partition_seed: m.partition_seed,
            model_seed: m.model_seed,
            ae_epochs: t.ae_epochs,
            train: TrainConfig {
                max_epochs: t.max_epochs,
                patience: t.patience,
                pretrain_epochs: t.pretrain_epochs,
                seed: t.train_seed,
                log_every: t.log_every,
                monitor: t.monitor,
            },
        }
    }

    pub fn incremental(&self) -> IncrementalConfig {
        IncrementalConfig {
            max_epochs: self.update.inc_max_epochs,
            patience: self.update.inc_patience,
            seed: self.train.train_seed,
        }
    }

    pub fn toy(&self) -> ToyConfig {
        let t = &self.toy;
        ToyConfig {
            samples: t.toy_samples,
            control_points: t.toy_control_points,
            epochs: t.toy_epochs,
            lr_tau: t.toy_lr_tau,
            lr_values: t.toy_lr_values,
            seed: t.toy_seed,
            ..ToyConfig::default()
        }
    }

    /// A required path; missing means a usage error.
    pub fn require(&self, p: &Path, flag: &str) -> Result<PathBuf> {
        if !is_set(p) {
            bail!(ConfigError(format!("--{flag} is required for this command")));
        }
        Ok(p.to_path_buf())
    }
}
