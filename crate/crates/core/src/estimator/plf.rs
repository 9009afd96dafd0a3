//! Piecewise-linear curve primitives and their derivatives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalized squares: `(r_j² + eps/m) / (Σ r_k² + eps)`.
///
/// Every component is strictly positive and the components sum to one.
pub fn norm_l2(raw: &[f64], eps: f64) -> Vec<f64> {
    let m = raw.len() as f64;
    let denom = raw.iter().map(|r| r * r).sum::<f64>() + eps;
    raw.iter().map(|r| (r * r + eps / m) / denom).collect()
}

/// Backpropagates `grad_out` (dLoss/d norm_l2 output) to the raw inputs.
///
/// `d w_j / d r_k = 2 r_k (δ_jk − w_j) / (S + eps)`.
pub fn norm_l2_backward(raw: &[f64], weights: &[f64], eps: f64, grad_out: &[f64]) -> Vec<f64> {
    let denom = raw.iter().map(|r| r * r).sum::<f64>() + eps;
    let mixed: f64 = grad_out.iter().zip(weights).map(|(g, w)| g * w).sum();
    raw.iter()
        .zip(grad_out)
        .map(|(r, g)| 2.0 * r * (g - mixed) / denom)
        .collect()
}

/// Running sum: `out[i] = Σ_{j ≤ i} v[j]`.
pub fn prefix_sum(v: &[f64]) -> Vec<f64> {
    v.iter()
        .scan(0.0, |acc, &x| {
            *acc += x;
            Some(*acc)
        })
        .collect()
}

/// Adjoint of [`prefix_sum`]: `out[j] = Σ_{i ≥ j} g[i]`.
pub fn suffix_sum(g: &[f64]) -> Vec<f64> {
    let mut out = g.to_vec();
    for j in (0..out.len().saturating_sub(1)).rev() {
        out[j] += out[j + 1];
    }
    out
}

/// Control points `τ_0..τ_{L+1}` and control values `p_0..p_{L+1}` of one
/// query's curve. `τ_{L+1}` sits just past `t_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlfParams {
    pub tau: Vec<f64>,
    pub p: Vec<f64>,
    pub t_max: f64,
}

/// Position of `t` on a curve: the segment `[τ_{seg-1}, τ_seg)` and the
/// fraction of the way through it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Segment {
    pub seg: usize,
    pub frac: f64,
}

pub(crate) fn locate(tau: &[f64], t: f64) -> Segment {
    // Number of control points <= t; τ_0 = 0 <= t, and t < τ_{L+1}.
    let seg = tau.partition_point(|&v| v <= t).clamp(1, tau.len() - 1);
    let (a, b) = (tau[seg - 1], tau[seg]);
    Segment {
        seg,
        frac: (t - a) / (b - a),
    }
}

impl PlfParams {
    pub fn check(&self) -> Result<()> {
        if self.tau.len() != self.p.len() || self.tau.len() < 2 {
            return Err(Error::Shape(format!(
                "curve has {} control points and {} values",
                self.tau.len(),
                self.p.len()
            )));
        }
        Ok(())
    }

    /// True when τ starts at 0 and strictly increases and p starts
    /// non-negative and never decreases.
    pub fn is_well_formed(&self) -> bool {
        self.tau.len() == self.p.len()
            && self.tau.first() == Some(&0.0)
            && self.tau.windows(2).all(|w| w[0] < w[1])
            && self.p.first().is_some_and(|&p0| p0 >= 0.0)
            && self.p.windows(2).all(|w| w[0] <= w[1])
    }
}

/// Evaluates the curve at `t ∈ [0, t_max]` by linear interpolation between
/// the two surrounding control points.
pub fn plf_eval(params: &PlfParams, t: f64) -> Result<f64> {
    params.check()?;
    if !(0.0..=params.t_max).contains(&t) {
        return Err(Error::OutOfRange { t, t_max: params.t_max });
    }
    Ok(eval_unchecked(&params.tau, &params.p, t))
}

#[inline]
pub(crate) fn eval_unchecked(tau: &[f64], p: &[f64], t: f64) -> f64 {
    let Segment { seg, frac } = locate(tau, t);
    let (lo, hi) = (p[seg - 1], p[seg]);
    // Clamp so rounding in `lo + frac * (hi - lo)` can never overshoot the
    // next control value, which would break monotonicity by one ulp.
    (lo + frac * (hi - lo)).clamp(lo.min(hi), hi.max(lo))
}

/// Gradients of the curve value at `t` with respect to τ and p.
///
/// Only the two endpoints of the active segment receive gradient.
pub(crate) fn eval_backward(tau: &[f64], p: &[f64], t: f64, upstream: f64, d_tau: &mut [f64], d_p: &mut [f64]) {
    let Segment { seg, frac } = locate(tau, t);
    let (a, b) = (tau[seg - 1], tau[seg]);
    let width = b - a;
    let rise = p[seg] - p[seg - 1];
    d_p[seg - 1] += upstream * (1.0 - frac);
    d_p[seg] += upstream * frac;
    // u = (t − a)/(b − a): du/da = (t − b)/(b − a)², du/db = −(t − a)/(b − a)².
    d_tau[seg - 1] += upstream * rise * (t - b) / (width * width);
    d_tau[seg] += upstream * rise * -(t - a) / (width * width);
}
