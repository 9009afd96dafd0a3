//! Error metrics, the empirical-monotonicity measure and the random-sampling
//! baseline.

use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::ThresholdEstimator;
use crate::oracle::{dist, VectorDataset};

/// MSE, MAE and MAPE over a set of `(y, ŷ)` pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    /// Mean of `|ŷ − y| / y` over pairs with `y > 0`.
    pub mape: f64,
    pub count: usize,
    /// Pairs left out of MAPE because `y = 0`.
    pub mape_excluded: usize,
}

pub fn compute_metrics(y: &[f64], y_hat: &[f64]) -> Result<MetricReport> {
    if y.is_empty() {
        return Err(Error::InvalidConfig("no pairs to score".into()));
    }
    if y.len() != y_hat.len() {
        return Err(Error::Shape(format!("{} labels but {} estimates", y.len(), y_hat.len())));
    }
    let n = y.len() as f64;
    let (mut se, mut ae, mut ape, mut kept) = (0.0, 0.0, 0.0, 0usize);
    for (&a, &b) in y.iter().zip(y_hat) {
        let diff = b - a;
        se += diff * diff;
        ae += diff.abs();
        if a > 0.0 {
            ape += (diff / a).abs();
            kept += 1;
        }
    }
    let excluded = y.len() - kept;
    if excluded > 0 {
        log::warn!("{excluded} zero labels excluded from MAPE");
    }
    Ok(MetricReport {
        mse: se / n,
        mae: ae / n,
        mape: if kept > 0 { ape / kept as f64 } else { 0.0 },
        count: y.len(),
        mape_excluded: excluded,
    })
}

/// Percentage of threshold pairs `t ≤ t'` with `est(t) ≤ est(t')`,
/// averaged over queries. Thresholds are drawn uniformly from `[0, t_max]`.
pub fn empirical_monotonicity<E, Q>(estimator: &E, queries: &[Q], thresholds_per_query: usize, seed: u64) -> Result<f64>
where
    E: ThresholdEstimator + ?Sized,
    Q: AsRef<[f64]>,
{
    if queries.is_empty() || thresholds_per_query < 2 {
        return Err(Error::InvalidConfig("need at least one query and two thresholds".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_max = estimator.t_max();
    let mut total = 0.0;
    for q in queries {
        let mut ts: Vec<f64> = (0..thresholds_per_query).map(|_| rng.random_range(0.0..=t_max)).collect();
        ts.sort_by(f64::total_cmp);
        let est = estimator.estimate_many(q.as_ref(), &ts)?;
        let (mut good, mut pairs) = (0usize, 0usize);
        for i in 0..ts.len() {
            for j in i + 1..ts.len() {
                pairs += 1;
                if est[i] <= est[j] {
                    good += 1;
                }
            }
        }
        total += good as f64 / pairs as f64;
    }
    Ok(100.0 * total / queries.len() as f64)
}

/// A fixed uniform sample of the dataset; the estimate is the sample count
/// scaled by the inverse sampling fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsBaseline {
    pub sample_indices: Vec<usize>,
    /// Sample size over dataset size.
    pub sample_fraction: f64,
    pub seed: u64,
}

impl RsBaseline {
    /// Samples `round(fraction · n)` rows (at least one) without replacement.
    pub fn new(ds: &VectorDataset, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!("sample fraction must be in (0, 1], got {fraction}")));
        }
        if ds.is_empty() {
            return Err(Error::InvalidConfig("cannot sample an empty dataset".into()));
        }
        let n = ds.n();
        let m = ((fraction * n as f64).round() as usize).clamp(1, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sample_indices = index::sample(&mut rng, n, m).into_vec();
        sample_indices.sort_unstable();
        Ok(RsBaseline {
            sample_indices,
            sample_fraction: m as f64 / n as f64,
            seed,
        })
    }

    /// Pairs the sample with the dataset it was drawn from.
    pub fn bind<'a>(&'a self, ds: &'a VectorDataset, t_max: f64) -> RsEstimator<'a> {
        RsEstimator { baseline: self, ds, t_max }
    }
}

pub fn rs_estimate(baseline: &RsBaseline, ds: &VectorDataset, x: &[f64], t: f64) -> Result<f64> {
    let mut hits = 0usize;
    for &i in &baseline.sample_indices {
        if i >= ds.n() {
            return Err(Error::NotFound(i));
        }
        if dist(x, ds.row(i), ds.kind())? <= t {
            hits += 1;
        }
    }
    Ok(hits as f64 / baseline.sample_fraction)
}

/// [`RsBaseline`] bound to its dataset.
#[derive(Debug, Clone, Copy)]
pub struct RsEstimator<'a> {
    baseline: &'a RsBaseline,
    ds: &'a VectorDataset,
    t_max: f64,
}

impl ThresholdEstimator for RsEstimator<'_> {
    fn t_max(&self) -> f64 {
        self.t_max
    }

    fn estimate_many(&self, x: &[f64], ts: &[f64]) -> Result<Vec<f64>> {
        let mut d = Vec::with_capacity(self.baseline.sample_indices.len());
        for &i in &self.baseline.sample_indices {
            d.push(dist(x, self.ds.row(i), self.ds.kind())?);
        }
        d.sort_by(f64::total_cmp);
        Ok(ts
            .iter()
            .map(|&t| d.partition_point(|&v| v <= t) as f64 / self.baseline.sample_fraction)
            .collect())
    }
}

/// Adapts a plain function `(x, t) -> estimate`.
pub struct FnEstimator<F> {
    pub f: F,
    pub t_max: f64,
}

impl<F: Fn(&[f64], f64) -> f64> ThresholdEstimator for FnEstimator<F> {
    fn t_max(&self) -> f64 {
        self.t_max
    }

    fn estimate_many(&self, x: &[f64], ts: &[f64]) -> Result<Vec<f64>> {
        Ok(ts.iter().map(|&t| (self.f)(x, t)).collect())
    }
}

/// Named metric rows rendered as an aligned text table.
pub fn render_table(rows: &[(String, MetricReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>14}  {:>12}  {:>10}  {:>7}", "model", "mse", "mae", "mape", "count");
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>14.4}  {:>12.4}  {:>10.4}  {:>7}",
            name, r.mse, r.mae, r.mape, r.count
        );
    }
    out
}
