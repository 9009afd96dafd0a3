use ndarray::{Array2, ArrayView2};

use super::model::{ModelGrads, SelNetModel};
use super::Hyper;
use crate::error::{Error, Result};
use crate::partition::PartitionLayout;

/// Huber loss on `r = ln(y + eps) − ln(ŷ + eps)`.
pub fn huber_log_loss(y: f64, y_hat: f64, delta: f64, eps_log: f64) -> Result<f64> {
    if !(y >= 0.0 && y_hat >= 0.0) {
        return Err(Error::Domain(format!("selectivities must be non-negative, got y={y}, y_hat={y_hat}")));
    }
    let r = (y + eps_log).ln() - (y_hat + eps_log).ln();
    Ok(huber(r, delta))
}

/// Derivative of [`huber_log_loss`] with respect to `y_hat`.
pub fn huber_log_loss_grad(y: f64, y_hat: f64, delta: f64, eps_log: f64) -> Result<f64> {
    if !(y >= 0.0 && y_hat >= 0.0) {
        return Err(Error::Domain(format!("selectivities must be non-negative, got y={y}, y_hat={y_hat}")));
    }
    let r = (y + eps_log).ln() - (y_hat + eps_log).ln();
    Ok(-r.clamp(-delta, delta) / (y_hat + eps_log))
}

#[inline]
fn huber(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - 0.5 * delta)
    }
}

/// Coefficients of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Estimation loss of the gated sum against the global label.
    pub global: f64,
    /// Summed estimation loss of each gated local curve against its
    /// per-cluster label.
    pub local: f64,
    /// Reconstruction loss.
    pub ae: f64,
}

impl LossWeights {
    /// `J = J_est + λ·J_AE`.
    pub fn plain(hyper: &Hyper) -> Self {
        LossWeights {
            global: 1.0,
            local: 0.0,
            ae: hyper.lambda_ae,
        }
    }

    /// `J_joint = J_est + β·Σ_c J_est(f̂_c) + λ·J_AE`.
    pub fn joint(hyper: &Hyper) -> Self {
        LossWeights {
            global: 1.0,
            local: hyper.beta_joint,
            ae: hyper.lambda_ae,
        }
    }

    /// Local models trained on their own labels only.
    pub fn locals_only(hyper: &Hyper) -> Self {
        LossWeights {
            global: 0.0,
            local: 1.0,
            ae: hyper.lambda_ae,
        }
    }
}

/// Training examples with precomputed gate bits.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub x: ArrayView2<'a, f64>,
    pub t: &'a [f64],
    pub y: &'a [f64],
    /// `(rows, K)` with entries 0 or 1.
    pub gates: ArrayView2<'a, f64>,
    /// `(rows, K)` per-cluster labels, needed when the local weight is positive.
    pub cluster_y: Option<ArrayView2<'a, f64>>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn check(&self, model: &SelNetModel, weights: &LossWeights) -> Result<()> {
        let n = self.t.len();
        if n == 0 {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        let k = model.k();
        if self.x.nrows() != n || self.y.len() != n || self.gates.dim() != (n, k) {
            return Err(Error::Shape(format!(
                "batch has {} rows, {} thresholds, {} labels and gates {:?} for K={k}",
                self.x.nrows(),
                n,
                self.y.len(),
                self.gates.dim()
            )));
        }
        if self.x.ncols() != model.input_dim() {
            return Err(Error::Shape(format!("batch dim {} vs model {}", self.x.ncols(), model.input_dim())));
        }
        if weights.local > 0.0 {
            match self.cluster_y {
                None => {
                    return Err(Error::InvalidConfig(
                        "per-cluster labels are required for the local loss term".into(),
                    ))
                }
                Some(cy) if cy.dim() != (n, k) => {
                    return Err(Error::Shape(format!("per-cluster labels {:?}, expected ({n}, {k})", cy.dim())))
                }
                _ => {}
            }
        }
        for &t in self.t {
            if !(0.0..=model.hyper.t_max).contains(&t) {
                return Err(Error::OutOfRange { t, t_max: model.hyper.t_max });
            }
        }
        Ok(())
    }
}

/// Gate bits of every row as a `(rows, K)` 0/1 matrix.
pub fn gate_matrix(layout: &PartitionLayout, x: ArrayView2<f64>, t: &[f64]) -> Array2<f64> {
    let mut g = Array2::zeros((t.len(), layout.k()));
    for (r, row) in x.rows().into_iter().enumerate() {
        let bits = layout.gate(row.as_slice().expect("row-major"), t[r]);
        for (c, open) in bits.into_iter().enumerate() {
            if open {
                g[[r, c]] = 1.0;
            }
        }
    }
    g
}

/// Value of each loss term on a batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    /// Summed over rows.
    pub global: f64,
    /// Summed over rows and clusters.
    pub local: f64,
    /// Mean squared reconstruction error.
    pub ae: f64,
}

/// Loss of `model` on `batch`.
pub fn total_loss(model: &SelNetModel, batch: &Batch<'_>, weights: &LossWeights) -> Result<LossBreakdown> {
    Ok(evaluate(model, batch, weights, false)?.0)
}

/// Loss and its gradient with respect to every parameter.
pub fn loss_and_grads(model: &SelNetModel, batch: &Batch<'_>, weights: &LossWeights) -> Result<(LossBreakdown, ModelGrads)> {
    let (loss, grads) = evaluate(model, batch, weights, true)?;
    Ok((loss, grads.expect("requested")))
}

fn evaluate(model: &SelNetModel, batch: &Batch<'_>, weights: &LossWeights, want_grads: bool) -> Result<(LossBreakdown, Option<ModelGrads>)> {
    batch.check(model, weights)?;
    let h = &model.hyper;
    let (delta, eps) = (h.delta_huber, h.eps_log);
    let rows = batch.len();
    let k = model.k();
    let (pass, z) = model.forward_pass(batch.x, batch.t)?;

    let mut out = LossBreakdown::default();
    let mut d_f = vec![vec![0.0; rows]; k];
    for r in 0..rows {
        let mut y_hat = 0.0;
        for c in 0..k {
            y_hat += batch.gates[[r, c]] * pass.locals[c].f[r];
        }
        if weights.global != 0.0 {
            out.global += huber_log_loss(batch.y[r], y_hat, delta, eps)?;
            let g = weights.global * huber_log_loss_grad(batch.y[r], y_hat, delta, eps)?;
            for c in 0..k {
                d_f[c][r] += g * batch.gates[[r, c]];
            }
        }
        if weights.local != 0.0 {
            let cy = batch.cluster_y.expect("checked");
            for c in 0..k {
                let gate = batch.gates[[r, c]];
                let f = gate * pass.locals[c].f[r];
                out.local += huber_log_loss(cy[[r, c]], f, delta, eps)?;
                d_f[c][r] += weights.local * gate * huber_log_loss_grad(cy[[r, c]], f, delta, eps)?;
            }
        }
    }

    let (xr, dec_tape) = model.ae.decoder.forward_batch(z.view())?;
    let diff = &xr - &batch.x;
    let count = diff.len() as f64;
    out.ae = diff.iter().map(|v| v * v).sum::<f64>() / count;
    out.total = weights.global * out.global + weights.local * out.local + weights.ae * out.ae;

    if !want_grads {
        return Ok((out, None));
    }
    let (locals, mut d_z) = model.backward_pass(&pass, batch.t, &d_f)?;
    let d_xr = diff.mapv(|v| weights.ae * 2.0 * v / count);
    let (decoder, d_z_ae) = model.ae.decoder.backward(&dec_tape, d_xr.view())?;
    d_z += &d_z_ae;
    let encoder = model.encoder_backward(&pass, d_z.view())?;
    Ok((out, Some(ModelGrads { encoder, decoder, locals })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{Architecture, SelNetModel, TauInput};
    use crate::nnet::{grad_check, ParamGroups};
    use crate::partition::partition_metric;
    use crate::oracle::{DistanceKind, VectorDataset};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const E: f64 = std::f64::consts::E;

    #[test]
    fn huber_examples() {
        assert_eq!(huber_log_loss(7.0, 7.0, 1.345, 1.0).unwrap(), 0.0);
        assert!((huber_log_loss(0.0, E - 1.0, 1.345, 1.0).unwrap() - 0.5).abs() < 1e-12);
        let lin = huber_log_loss(0.0, E * E - 1.0, 1.345, 1.0).unwrap();
        assert!((lin - 1.345 * (2.0 - 0.6725)).abs() < 1e-12);
        assert!((lin - 1.785_487_5).abs() < 1e-9);
        assert!(matches!(huber_log_loss(-1.0, 0.0, 1.345, 1.0), Err(Error::Domain(_))));
        assert!(matches!(huber_log_loss(0.0, -1e-9, 1.345, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn huber_is_continuous_at_the_boundary() {
        let delta = 1.345;
        let (lo, hi) = (delta - 1e-9, delta + 1e-9);
        assert!((huber(lo, delta) - huber(hi, delta)).abs() < 1e-8);
        assert!((huber(-lo, delta) - huber(-hi, delta)).abs() < 1e-8);
        let slope = |r: f64| (huber(r + 1e-7, delta) - huber(r - 1e-7, delta)) / 2e-7;
        assert!((slope(lo) - slope(hi)).abs() < 1e-6);
        assert!((slope(-lo) - slope(-hi)).abs() < 1e-6);
    }

    #[test]
    fn huber_grad_matches_finite_differences() {
        for (y, y_hat) in [(0.0, 0.3), (5.0, 2.0), (0.0, 40.0), (100.0, 0.5)] {
            let a = huber_log_loss_grad(y, y_hat, 1.345, 1.0).unwrap();
            let f = |v| huber_log_loss(y, v, 1.345, 1.0).unwrap();
            let n = (f(y_hat + 1e-6) - f(y_hat - 1e-6)) / 2e-6;
            assert!((a - n).abs() < 1e-6, "{y} {y_hat}: {a} vs {n}");
        }
    }

    fn tiny_setup(tau_input: TauInput, seed: u64) -> (SelNetModel, Array2<f64>, Vec<f64>, Vec<f64>, Array2<f64>, Array2<f64>) {
        let d = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..40).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ds = VectorDataset::from_rows(&rows, DistanceKind::Euclidean).unwrap();
        let layout = partition_metric(&ds, 2, 0.2, seed).unwrap();
        let arch = Architecture {
            z_dim: 8,
            h_dim: 8,
            ae_hidden: vec![8],
            tau_hidden: vec![8],
            m_hidden: vec![8],
        };
        let hyper = Hyper {
            control_points: 4,
            t_max: 3.0,
            tau_input,
            ..Hyper::default()
        };
        let model = SelNetModel::new(d, &arch, hyper, layout, seed).unwrap();
        let b = 6;
        let x = Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0..1.0));
        let t: Vec<f64> = (0..b).map(|_| rng.random_range(0.2..2.8)).collect();
        let y: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..30.0)).collect();
        let gates = gate_matrix(&model.layout, x.view(), &t);
        let cy = Array2::from_shape_fn((b, 2), |_| rng.random_range(0.0..15.0f64).floor());
        (model, x, t, y, gates, cy)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for tau_input in [TauInput::Query, TauInput::Constant] {
            let (model, x, t, y, gates, cy) = tiny_setup(tau_input, 11);
            let batch = Batch {
                x: x.view(),
                t: &t,
                y: &y,
                gates: gates.view(),
                cluster_y: Some(cy.view()),
            };
            let w = LossWeights {
                global: 1.0,
                local: 0.3,
                ae: 0.7,
            };
            let (_, grads) = loss_and_grads(&model, &batch, &w).unwrap();
            let report = grad_check(&model, |m: &SelNetModel| total_loss(m, &batch, &w).unwrap().total, &grads, 1e-4);
            assert!(report.pass, "{:?}", report.failing_groups());
            assert_eq!(report.groups.len(), model.groups().len());
        }
    }

    #[test]
    fn missing_cluster_labels_rejected() {
        let (model, x, t, y, gates, _) = tiny_setup(TauInput::Query, 3);
        let batch = Batch {
            x: x.view(),
            t: &t,
            y: &y,
            gates: gates.view(),
            cluster_y: None,
        };
        assert!(matches!(
            total_loss(&model, &batch, &LossWeights::joint(&model.hyper)),
            Err(Error::InvalidConfig(_))
        ));
        assert!(total_loss(&model, &batch, &LossWeights::plain(&model.hyper)).is_ok());
    }

    #[test]
    fn perfect_predictions_give_zero_loss() {
        let (model, x, t, _, gates, _) = tiny_setup(TauInput::Query, 5);
        let y = model.estimate_batch(x.view(), &t).unwrap();
        let batch = Batch {
            x: x.view(),
            t: &t,
            y: &y,
            gates: gates.view(),
            cluster_y: None,
        };
        let w = LossWeights {
            global: 1.0,
            local: 0.0,
            ae: 0.0,
        };
        assert!(total_loss(&model, &batch, &w).unwrap().total < 1e-20);
    }
}
