//! The selectivity estimator.
//!
//! For a query object `x` the shared autoencoder produces a latent code `z`.
//! Each local estimator reads `[x; z]` and emits a curve:
//!
//! - control points from normalized squared increments of a small network,
//!   scaled by `t_max` and prefix-summed, so `τ_0 = 0 < τ_1 < … < τ_L < t_max`
//!   and `τ_{L+1} = t_max + ε_pad`;
//! - control values from `L + 2` embeddings, each decoded by its own linear
//!   unit with relu and prefix-summed, so `p` never decreases.
//!
//! The global estimate sums the local curves whose cluster the query ball
//! can reach. Monotonicity in `t` holds for any parameter values.

mod fit;
mod loss;
pub(crate) mod model;
mod persist;
pub(crate) mod plf;
mod train;

pub use fit::{build_layout, fit_model, FitOutcome, FitSpec};
pub use loss::{gate_matrix, huber_log_loss, huber_log_loss_grad, loss_and_grads, total_loss, Batch, LossBreakdown, LossWeights};
pub use model::{AutoEncoder, LocalEstimator, LocalGrads, ModelGrads, SelNetModel, ThresholdEstimator};
pub use persist::{decode_model, encode_model, load_model, save_model, MODEL_FORMAT_VERSION, MODEL_MAGIC};
pub use plf::{norm_l2, plf_eval, prefix_sum, PlfParams};
pub use train::{pretrain_autoencoder, train, EpochLog, Monitor, PretrainReport, Stage, TrainConfig, TrainLog, TrainingSet};


use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Huber transition point on the log-ratio residual.
pub const HUBER_DELTA: f64 = 1.345;

/// What the control-point network reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauInput {
    /// `[x; z]`, the default.
    Query,
    /// A constant all-ones vector, making control points query-independent.
    Constant,
}

/// Scalar hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    /// `L`: number of interior control points.
    pub control_points: usize,
    pub t_max: f64,
    pub eps_norm: f64,
    pub eps_log: f64,
    pub delta_huber: f64,
    pub lambda_ae: f64,
    pub beta_joint: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub tau_input: TauInput,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            control_points: 50,
            t_max: 54.0,
            eps_norm: 1e-6,
            eps_log: 1.0,
            delta_huber: HUBER_DELTA,
            lambda_ae: 0.1,
            beta_joint: 0.1,
            learning_rate: 1e-4,
            batch_size: 512,
            tau_input: TauInput::Query,
        }
    }
}

impl Hyper {
    /// Padding past `t_max` for the last control point.
    pub fn eps_pad(&self) -> f64 {
        1e-6 * self.t_max
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.control_points == 0 {
            return bad("control_points must be positive".into());
        }
        if !(self.t_max.is_finite() && self.t_max > 0.0) {
            return bad(format!("t_max must be positive, got {}", self.t_max));
        }
        for (name, v) in [
            ("eps_norm", self.eps_norm),
            ("eps_log", self.eps_log),
            ("delta_huber", self.delta_huber),
            ("learning_rate", self.learning_rate),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("lambda_ae", self.lambda_ae), ("beta_joint", self.beta_joint)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }
}

/// Network widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub z_dim: usize,
    /// Width of each control-value embedding `h_i`.
    pub h_dim: usize,
    /// Encoder hidden widths; the decoder mirrors them.
    pub ae_hidden: Vec<usize>,
    pub tau_hidden: Vec<usize>,
    pub m_hidden: Vec<usize>,
}

impl Default for Architecture {
    /// Full-size widths: three-layer autoencoder, two-layer control-point
    /// network, four-layer embedding network.
    fn default() -> Self {
        Architecture {
            z_dim: 64,
            h_dim: 100,
            ae_hidden: vec![512, 512, 256],
            tau_hidden: vec![512, 256],
            m_hidden: vec![512, 512, 512, 256],
        }
    }
}

impl Architecture {
    /// Narrow widths for laptop-scale runs.
    pub fn desk() -> Self {
        Architecture {
            z_dim: 16,
            h_dim: 8,
            ae_hidden: vec![32, 32, 16],
            tau_hidden: vec![32, 32],
            m_hidden: vec![32, 32, 32, 32],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.z_dim == 0 || self.h_dim == 0 {
            return Err(Error::InvalidConfig("z_dim and h_dim must be positive".into()));
        }
        if [&self.ae_hidden, &self.tau_hidden, &self.m_hidden].iter().any(|v| v.contains(&0)) {
            return Err(Error::InvalidConfig("hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn encoder_sizes(&self, d: usize) -> Vec<usize> {
        let mut s = vec![d];
        s.extend(&self.ae_hidden);
        s.push(self.z_dim);
        s
    }

    pub fn decoder_sizes(&self, d: usize) -> Vec<usize> {
        let mut s = vec![self.z_dim];
        s.extend(self.ae_hidden.iter().rev());
        s.push(d);
        s
    }

    pub fn tau_sizes(&self, d: usize, control_points: usize) -> Vec<usize> {
        let mut s = vec![d + self.z_dim];
        s.extend(&self.tau_hidden);
        s.push(control_points + 1);
        s
    }

    pub fn m_sizes(&self, d: usize, control_points: usize) -> Vec<usize> {
        let mut s = vec![d + self.z_dim];
        s.extend(&self.m_hidden);
        s.push((control_points + 2) * self.h_dim);
        s
    }

    /// Closed-form weight count of the estimation path: encoder, plus per
    /// local model the control-point network, the embedding network and the
    /// `L + 2` linear decoders with their biases.
    pub fn estimation_complexity(&self, d: usize, control_points: usize, k: usize) -> usize {
        use crate::nnet::ffn_complexity;
        let slots = control_points + 2;
        ffn_complexity(&self.encoder_sizes(d))
            + k * (ffn_complexity(&self.tau_sizes(d, control_points))
                + ffn_complexity(&self.m_sizes(d, control_points))
                + slots * self.h_dim
                + slots)
    }
}
