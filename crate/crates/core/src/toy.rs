//! One-dimensional curve fit comparing learned control points with fixed,
//! equally spaced ones on `y = exp(t) / 10`, `t ∈ [0, 10]`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::plf::{eval_backward, eval_unchecked, norm_l2, norm_l2_backward, prefix_sum, suffix_sum};
use crate::nnet::{AdamConfig, OptimizerState, ParamGroups};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub samples: usize,
    /// Interior control points.
    pub control_points: usize,
    pub t_max: f64,
    pub epochs: usize,
    /// Adam step size for the control-point parameters.
    pub lr_tau: f64,
    /// Adam step size for the control-value parameters.
    pub lr_values: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            samples: 80,
            control_points: 8,
            t_max: 10.0,
            epochs: 4000,
            lr_tau: 0.01,
            lr_values: 1.0,
            seed: 7,
        }
    }
}

pub fn toy_target(t: f64) -> f64 {
    t.exp() / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyFit {
    pub tau: Vec<f64>,
    pub p: Vec<f64>,
    /// Mean squared error on the training samples.
    pub mse: f64,
}

impl ToyFit {
    pub fn eval(&self, t: f64) -> f64 {
        eval_unchecked(&self.tau, &self.p, t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub samples: Vec<(f64, f64)>,
    pub learned: ToyFit,
    pub fixed: ToyFit,
}

impl ToyReport {
    /// `t,truth,learned,fixed` on `points` evenly spaced thresholds.
    pub fn csv(&self, points: usize) -> String {
        let t_max = self.learned.tau[self.learned.tau.len() - 1].min(self.fixed.tau[self.fixed.tau.len() - 1]);
        let t_max = t_max / (1.0 + 1e-6);
        let mut out = String::from("t,truth,learned,fixed\n");
        for i in 0..points {
            let t = t_max * i as f64 / (points.max(2) - 1) as f64;
            let _ = writeln!(out, "{t},{},{},{}", toy_target(t), self.learned.eval(t), self.fixed.eval(t));
        }
        out
    }
}

struct Flat(Vec<f64>);

impl ParamGroups for Flat {
    fn groups(&self) -> Vec<(String, &[f64])> {
        vec![("values".into(), &self.0)]
    }

    fn groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![("values".into(), &mut self.0)]
    }
}

const EPS_NORM: f64 = 1e-6;

fn tau_of(raw: &[f64], t_max: f64) -> (Vec<f64>, Vec<f64>) {
    let w = norm_l2(raw, EPS_NORM);
    let l = raw.len() - 1;
    let mut tau = vec![0.0];
    for i in 0..l {
        tau.push(tau[i] + w[i] * t_max);
    }
    tau.push(t_max * (1.0 + 1e-6));
    (w, tau)
}

fn p_of(k_pre: &[f64]) -> Vec<f64> {
    prefix_sum(&k_pre.iter().map(|&v| v.max(0.0)).collect::<Vec<_>>())
}

fn mse(tau: &[f64], p: &[f64], samples: &[(f64, f64)]) -> f64 {
    samples.iter().map(|&(t, y)| (eval_unchecked(tau, p, t) - y).powi(2)).sum::<f64>() / samples.len() as f64
}

/// Full-batch Adam on the mean squared error. With `learn_tau` false the
/// control points stay equally spaced.
fn fit(samples: &[(f64, f64)], cfg: &ToyConfig, learn_tau: bool) -> Result<ToyFit> {
    let l = cfg.control_points;
    let mut raw = Flat(vec![1.0; l + 1]);
    let mut k_pre = Flat(vec![1.0; l + 2]);
    let mut tau_opt = OptimizerState::new(AdamConfig::with_lr(cfg.lr_tau));
    let mut val_opt = OptimizerState::new(AdamConfig::with_lr(cfg.lr_values));
    let n = samples.len() as f64;
    for _ in 0..cfg.epochs {
        let (w, tau) = tau_of(&raw.0, cfg.t_max);
        let p = p_of(&k_pre.0);
        let mut d_tau = vec![0.0; l + 2];
        let mut d_p = vec![0.0; l + 2];
        for &(t, y) in samples {
            let r = eval_unchecked(&tau, &p, t) - y;
            eval_backward(&tau, &p, t, 2.0 * r / n, &mut d_tau, &mut d_p);
        }
        let d_k: Vec<f64> = suffix_sum(&d_p)
            .into_iter()
            .zip(&k_pre.0)
            .map(|(g, &k)| if k > 0.0 { g } else { 0.0 })
            .collect();
        val_opt.step(&mut k_pre, &Flat(d_k))?;
        if learn_tau {
            let mut d_w = vec![0.0; l + 1];
            let mut acc = 0.0;
            for j in (0..l).rev() {
                acc += d_tau[j + 1];
                d_w[j] = acc * cfg.t_max;
            }
            let d_raw = Flat(norm_l2_backward(&raw.0, &w, EPS_NORM, &d_w));
            tau_opt.step(&mut raw, &d_raw)?;
        }
    }
    let (_, tau) = tau_of(&raw.0, cfg.t_max);
    let p = p_of(&k_pre.0);
    Ok(ToyFit {
        mse: mse(&tau, &p, samples),
        tau,
        p,
    })
}

/// Fits both variants on the same samples.
pub fn run_toy(cfg: &ToyConfig) -> Result<ToyReport> {
    if cfg.samples == 0 || cfg.control_points == 0 || !(cfg.t_max > 0.0) {
        return Err(Error::InvalidConfig("toy needs samples, control points and a positive range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples: Vec<(f64, f64)> = (0..cfg.samples)
        .map(|_| {
            let t = rng.random_range(0.0..=cfg.t_max);
            (t, toy_target(t))
        })
        .collect();
    Ok(ToyReport {
        learned: fit(&samples, cfg, true)?,
        fixed: fit(&samples, cfg, false)?,
        samples,
    })
}
