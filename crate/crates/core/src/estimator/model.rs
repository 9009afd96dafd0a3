use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::plf::{eval_backward, eval_unchecked, norm_l2, norm_l2_backward, prefix_sum, suffix_sum, PlfParams};
use super::{Architecture, Hyper, TauInput};
use crate::error::{Error, Result};
use crate::nnet::{DenseNet, NetGrads, ParamGroups, Tape};
use crate::partition::PartitionLayout;

/// Encoder/decoder pair producing the latent code `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoEncoder {
    pub encoder: DenseNet,
    pub decoder: DenseNet,
}

impl AutoEncoder {
    pub fn new<R: rand::Rng + ?Sized>(d: usize, arch: &Architecture, rng: &mut R) -> Result<Self> {
        Self::from_parts(
            DenseNet::init_with_rng(&arch.encoder_sizes(d), rng)?,
            DenseNet::init_with_rng(&arch.decoder_sizes(d), rng)?,
        )
    }

    pub fn from_parts(encoder: DenseNet, decoder: DenseNet) -> Result<Self> {
        if encoder.output_dim() != decoder.input_dim() || decoder.output_dim() != encoder.input_dim() {
            return Err(Error::Shape(format!(
                "autoencoder {} -> {} / {} -> {} does not round-trip",
                encoder.input_dim(),
                encoder.output_dim(),
                decoder.input_dim(),
                decoder.output_dim()
            )));
        }
        Ok(AutoEncoder { encoder, decoder })
    }

    pub fn z_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn encode_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.encoder.predict_batch(x)
    }

    /// Mean over rows and columns of the squared reconstruction error.
    pub fn reconstruction_mse(&self, x: ArrayView2<f64>) -> Result<f64> {
        let z = self.encoder.predict_batch(x)?;
        let xr = self.decoder.predict_batch(z.view())?;
        Ok((&xr - &x).mapv(|v| v * v).mean().unwrap_or(0.0))
    }

    /// Reconstruction MSE and its gradients (scaled by `weight`).
    pub(crate) fn mse_grads(&self, x: ArrayView2<f64>, weight: f64) -> Result<(f64, NetGrads, NetGrads)> {
        let (z, enc_tape) = self.encoder.forward_batch(x)?;
        let (xr, dec_tape) = self.decoder.forward_batch(z.view())?;
        let diff = &xr - &x;
        let count = diff.len() as f64;
        let mse = diff.mapv(|v| v * v).sum() / count;
        let d_xr = diff.mapv(|v| weight * 2.0 * v / count);
        let (dec_g, d_z) = self.decoder.backward(&dec_tape, d_xr.view())?;
        let (enc_g, _) = self.encoder.backward(&enc_tape, d_z.view())?;
        Ok((mse, enc_g, dec_g))
    }
}

/// One cluster's curve generator.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalEstimator {
    /// `[x; z]` (or a constant) to `L + 1` raw control-point increments.
    pub tau_net: DenseNet,
    /// `[x; z]` to `L + 2` stacked embeddings of width `h_dim`.
    pub m_net: DenseNet,
    /// Per-slot decoder weights, `(L + 2, h_dim)`.
    pub dec_w: Array2<f64>,
    pub dec_b: Array1<f64>,
}

impl LocalEstimator {
    pub fn new<R: rand::Rng + ?Sized>(d: usize, arch: &Architecture, control_points: usize, rng: &mut R) -> Result<Self> {
        let tau_net = DenseNet::init_with_rng(&arch.tau_sizes(d, control_points), rng)?;
        let m_net = DenseNet::init_with_rng(&arch.m_sizes(d, control_points), rng)?;
        let normal = Normal::new(0.0, (2.0 / arch.h_dim as f64).sqrt()).expect("positive std");
        let dec_w = Array2::from_shape_simple_fn((control_points + 2, arch.h_dim), || normal.sample(rng));
        let dec_b = Array1::zeros(control_points + 2);
        Self::from_parts(tau_net, m_net, dec_w, dec_b)
    }

    pub fn from_parts(tau_net: DenseNet, m_net: DenseNet, dec_w: Array2<f64>, dec_b: Array1<f64>) -> Result<Self> {
        let slots = dec_w.nrows();
        if slots < 2 || dec_b.len() != slots {
            return Err(Error::Shape(format!("decoder has {slots} slots and {} biases", dec_b.len())));
        }
        if tau_net.output_dim() + 1 != slots {
            return Err(Error::Shape(format!(
                "control-point network emits {} values, expected {}",
                tau_net.output_dim(),
                slots - 1
            )));
        }
        if m_net.output_dim() != slots * dec_w.ncols() {
            return Err(Error::Shape(format!(
                "embedding network emits {} values, expected {} x {}",
                m_net.output_dim(),
                slots,
                dec_w.ncols()
            )));
        }
        if tau_net.input_dim() != m_net.input_dim() {
            return Err(Error::Shape("control-point and embedding networks read different inputs".into()));
        }
        Ok(LocalEstimator {
            tau_net,
            m_net,
            dec_w,
            dec_b,
        })
    }

    /// `L`.
    pub fn control_point_count(&self) -> usize {
        self.dec_w.nrows() - 2
    }

    pub fn h_dim(&self) -> usize {
        self.dec_w.ncols()
    }

    pub fn weight_count(&self) -> usize {
        self.tau_net.weight_count() + self.m_net.weight_count() + self.dec_w.len() + self.dec_b.len()
    }

    /// Control points for one input of the control-point network.
    pub fn control_points(&self, tau_in: &[f64], hyper: &Hyper) -> Result<Vec<f64>> {
        let (raw, _) = self.tau_net.forward(tau_in)?;
        Ok(tau_from_raw(&raw, hyper).1)
    }

    /// Control values for one augmented query `[x; z]`.
    pub fn control_values(&self, x_aug: &[f64]) -> Result<Vec<f64>> {
        let (h, _) = self.m_net.forward(x_aug)?;
        let pre = self.slot_pre_activations(&h);
        Ok(prefix_sum(&pre.iter().map(|&v| relu(v)).collect::<Vec<_>>()))
    }

    fn slot_pre_activations(&self, h: &[f64]) -> Vec<f64> {
        let hd = self.h_dim();
        (0..self.dec_w.nrows())
            .map(|i| {
                let emb = &h[i * hd..(i + 1) * hd];
                let w = self.dec_w.row(i);
                self.dec_b[i] + w.iter().zip(emb).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    fn named_groups<'a>(&'a self, prefix: &str) -> Vec<(String, &'a [f64])> {
        let mut g = self.tau_net.named_groups(&format!("{prefix}tau."));
        g.extend(self.m_net.named_groups(&format!("{prefix}m.")));
        g.push((format!("{prefix}decoder.weight"), self.dec_w.as_slice().expect("standard layout")));
        g.push((format!("{prefix}decoder.bias"), self.dec_b.as_slice().expect("standard layout")));
        g
    }

    fn named_groups_mut<'a>(&'a mut self, prefix: &str) -> Vec<(String, &'a mut [f64])> {
        let mut g = self.tau_net.named_groups_mut(&format!("{prefix}tau."));
        g.extend(self.m_net.named_groups_mut(&format!("{prefix}m.")));
        g.push((format!("{prefix}decoder.weight"), self.dec_w.as_slice_mut().expect("standard layout")));
        g.push((format!("{prefix}decoder.bias"), self.dec_b.as_slice_mut().expect("standard layout")));
        g
    }
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Normalized weights and control points from raw increments.
pub(crate) fn tau_from_raw(raw: &[f64], hyper: &Hyper) -> (Vec<f64>, Vec<f64>) {
    let weights = norm_l2(raw, hyper.eps_norm);
    let l = raw.len() - 1;
    let mut tau = Vec::with_capacity(l + 2);
    tau.push(0.0);
    let mut acc = 0.0;
    for w in &weights[..l] {
        acc += w * hyper.t_max;
        tau.push(acc);
    }
    tau.push(hyper.t_max + hyper.eps_pad());
    (weights, tau)
}

/// Backpropagates dLoss/dτ to the raw control-point outputs.
fn tau_backward(raw: &[f64], weights: &[f64], d_tau: &[f64], hyper: &Hyper) -> Vec<f64> {
    let l = raw.len() - 1;
    // τ_i = t_max Σ_{j<i} w_j for i in 1..=L; the last weight only enters
    // through the normalization.
    let mut d_w = vec![0.0; l + 1];
    let mut acc = 0.0;
    for j in (0..l).rev() {
        acc += d_tau[j + 1];
        d_w[j] = acc * hyper.t_max;
    }
    norm_l2_backward(raw, weights, hyper.eps_norm, &d_w)
}

/// Gradients for one [`LocalEstimator`].
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGrads {
    pub tau_net: NetGrads,
    pub m_net: NetGrads,
    pub dec_w: Array2<f64>,
    pub dec_b: Array1<f64>,
}

/// Gradients for a whole [`SelNetModel`], in the model's group order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub encoder: NetGrads,
    pub decoder: NetGrads,
    pub locals: Vec<LocalGrads>,
}

impl ModelGrads {
    pub fn zeros_like(model: &SelNetModel) -> Self {
        ModelGrads {
            encoder: NetGrads::zeros_like(&model.ae.encoder),
            decoder: NetGrads::zeros_like(&model.ae.decoder),
            locals: model
                .locals
                .iter()
                .map(|l| LocalGrads {
                    tau_net: NetGrads::zeros_like(&l.tau_net),
                    m_net: NetGrads::zeros_like(&l.m_net),
                    dec_w: Array2::zeros(l.dec_w.raw_dim()),
                    dec_b: Array1::zeros(l.dec_b.raw_dim()),
                })
                .collect(),
        }
    }
}

impl ParamGroups for ModelGrads {
    fn groups(&self) -> Vec<(String, &[f64])> {
        let mut g = self.encoder.named_groups("encoder.");
        g.extend(self.decoder.named_groups("decoder."));
        for (c, l) in self.locals.iter().enumerate() {
            g.extend(l.tau_net.named_groups(&format!("local{c}.tau.")));
            g.extend(l.m_net.named_groups(&format!("local{c}.m.")));
            g.push((format!("local{c}.decoder.weight"), l.dec_w.as_slice().expect("standard layout")));
            g.push((format!("local{c}.decoder.bias"), l.dec_b.as_slice().expect("standard layout")));
        }
        g
    }

    fn groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut g = self.encoder.named_groups_mut("encoder.");
        g.extend(self.decoder.named_groups_mut("decoder."));
        for (c, l) in self.locals.iter_mut().enumerate() {
            g.extend(l.tau_net.named_groups_mut(&format!("local{c}.tau.")));
            g.extend(l.m_net.named_groups_mut(&format!("local{c}.m.")));
            g.push((format!("local{c}.decoder.weight"), l.dec_w.as_slice_mut().expect("standard layout")));
            g.push((format!("local{c}.decoder.bias"), l.dec_b.as_slice_mut().expect("standard layout")));
        }
        g
    }
}

/// Autoencoder, one local estimator per cluster, the cluster layout used
/// for gating, and the hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SelNetModel {
    pub ae: AutoEncoder,
    pub locals: Vec<LocalEstimator>,
    pub layout: PartitionLayout,
    pub hyper: Hyper,
}

impl ParamGroups for SelNetModel {
    fn groups(&self) -> Vec<(String, &[f64])> {
        let mut g = self.ae.encoder.named_groups("encoder.");
        g.extend(self.ae.decoder.named_groups("decoder."));
        for (c, l) in self.locals.iter().enumerate() {
            g.extend(l.named_groups(&format!("local{c}.")));
        }
        g
    }

    fn groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut g = self.ae.encoder.named_groups_mut("encoder.");
        g.extend(self.ae.decoder.named_groups_mut("decoder."));
        for (c, l) in self.locals.iter_mut().enumerate() {
            g.extend(l.named_groups_mut(&format!("local{c}.")));
        }
        g
    }
}

/// Anything that maps `(x, t)` to an estimated count on `[0, t_max]`.
pub trait ThresholdEstimator {
    fn t_max(&self) -> f64;

    /// Estimates for one query object at several thresholds.
    fn estimate_many(&self, x: &[f64], ts: &[f64]) -> Result<Vec<f64>>;
}

/// Cached forward values of one local estimator over a batch.
pub(crate) struct LocalPass {
    tau_tape: Tape,
    m_tape: Tape,
    raw: Array2<f64>,
    weights: Array2<f64>,
    tau: Array2<f64>,
    h: Array2<f64>,
    pre_k: Array2<f64>,
    p: Array2<f64>,
    /// Curve value at each row's threshold (ungated).
    pub f: Vec<f64>,
}

/// Cached forward values of the whole model over a batch.
pub(crate) struct ModelPass {
    enc_tape: Tape,
    pub locals: Vec<LocalPass>,
}

impl SelNetModel {
    /// Freshly initialised model. `layout` fixes the number of local models.
    pub fn new(d: usize, arch: &Architecture, hyper: Hyper, layout: PartitionLayout, seed: u64) -> Result<Self> {
        hyper.validate()?;
        arch.validate()?;
        if d == 0 {
            return Err(Error::InvalidConfig("input dimension must be positive".into()));
        }
        if layout.k() == 0 {
            return Err(Error::InvalidConfig("layout has no clusters".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ae = AutoEncoder::new(d, arch, &mut rng)?;
        let locals = (0..layout.k())
            .map(|_| LocalEstimator::new(d, arch, hyper.control_points, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(ae, locals, layout, hyper)
    }

    pub fn from_parts(ae: AutoEncoder, locals: Vec<LocalEstimator>, layout: PartitionLayout, hyper: Hyper) -> Result<Self> {
        hyper.validate()?;
        if locals.len() != layout.k() {
            return Err(Error::InvalidConfig(format!(
                "{} local estimators for {} clusters",
                locals.len(),
                layout.k()
            )));
        }
        let aug = ae.encoder.input_dim() + ae.z_dim();
        for (c, l) in locals.iter().enumerate() {
            if l.control_point_count() != hyper.control_points {
                return Err(Error::Shape(format!(
                    "local {c} has {} control points, hyperparameters say {}",
                    l.control_point_count(),
                    hyper.control_points
                )));
            }
            if l.m_net.input_dim() != aug {
                return Err(Error::Shape(format!("local {c} reads {} inputs, expected {aug}", l.m_net.input_dim())));
            }
        }
        Ok(SelNetModel {
            ae,
            locals,
            layout,
            hyper,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.ae.encoder.input_dim()
    }

    pub fn k(&self) -> usize {
        self.locals.len()
    }

    /// Widths recovered from the networks.
    pub fn architecture(&self) -> Architecture {
        let hidden = |net: &DenseNet| {
            let s = net.sizes();
            s[1..s.len() - 1].to_vec()
        };
        Architecture {
            z_dim: self.ae.z_dim(),
            h_dim: self.locals[0].h_dim(),
            ae_hidden: hidden(&self.ae.encoder),
            tau_hidden: hidden(&self.locals[0].tau_net),
            m_hidden: hidden(&self.locals[0].m_net),
        }
    }

    /// Weight count of the estimation path (encoder plus local models).
    pub fn estimation_weight_count(&self) -> usize {
        self.ae.encoder.weight_count() + self.locals.iter().map(LocalEstimator::weight_count).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|(_, g)| g.iter().all(|v| v.is_finite()))
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!("query has dim {}, model expects {}", x.len(), self.input_dim())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("query object".into()));
        }
        Ok(())
    }

    fn check_t(&self, t: f64) -> Result<()> {
        if !(0.0..=self.hyper.t_max).contains(&t) {
            return Err(Error::OutOfRange { t, t_max: self.hyper.t_max });
        }
        Ok(())
    }

    /// `[x; z]` and the control-point network input for a batch.
    fn augment(&self, x: ArrayView2<f64>, z: &Array2<f64>) -> (Array2<f64>, Option<Array2<f64>>) {
        let x_aug = concatenate(Axis(1), &[x, z.view()]).expect("matching row counts");
        let tau_in = match self.hyper.tau_input {
            TauInput::Query => None,
            TauInput::Constant => Some(Array2::ones(x_aug.raw_dim())),
        };
        (x_aug, tau_in)
    }

    /// Per-local control points and values for a batch, `(tau, p)` each
    /// shaped `(rows, L + 2)`.
    fn batch_curves(&self, x: ArrayView2<f64>) -> Result<Vec<(Array2<f64>, Array2<f64>)>> {
        let z = self.ae.encode_batch(x)?;
        let (x_aug, tau_in) = self.augment(x, &z);
        let tau_src = tau_in.as_ref().unwrap_or(&x_aug);
        self.locals
            .iter()
            .map(|local| {
                let raw = local.tau_net.predict_batch(tau_src.view())?;
                let h = local.m_net.predict_batch(x_aug.view())?;
                let rows = x.nrows();
                let slots = local.dec_w.nrows();
                let mut tau = Array2::zeros((rows, slots));
                let mut p = Array2::zeros((rows, slots));
                for r in 0..rows {
                    let (_, tr) = tau_from_raw(raw.row(r).as_slice().expect("row-major"), &self.hyper);
                    let pre = local.slot_pre_activations(h.row(r).as_slice().expect("row-major"));
                    let pr = prefix_sum(&pre.iter().map(|&v| relu(v)).collect::<Vec<_>>());
                    tau.row_mut(r).assign(&Array1::from(tr));
                    p.row_mut(r).assign(&Array1::from(pr));
                }
                Ok((tau, p))
            })
            .collect()
    }

    /// The curve of every local model for query object `x`.
    pub fn curves(&self, x: &[f64]) -> Result<Vec<PlfParams>> {
        self.check_x(x)?;
        let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self
            .batch_curves(view)?
            .into_iter()
            .map(|(tau, p)| PlfParams {
                tau: tau.row(0).to_vec(),
                p: p.row(0).to_vec(),
                t_max: self.hyper.t_max,
            })
            .collect())
    }

    /// Estimated number of rows within `t` of `x`.
    pub fn estimate(&self, x: &[f64], t: f64) -> Result<f64> {
        Ok(self.estimate_many(x, &[t])?[0])
    }

    /// One threshold per row of `xs`.
    pub fn estimate_batch(&self, xs: ArrayView2<f64>, ts: &[f64]) -> Result<Vec<f64>> {
        if xs.nrows() != ts.len() {
            return Err(Error::Shape(format!("{} queries but {} thresholds", xs.nrows(), ts.len())));
        }
        for row in xs.rows() {
            self.check_x(row.as_slice().expect("row-major"))?;
        }
        for &t in ts {
            self.check_t(t)?;
        }
        let curves = self.batch_curves(xs)?;
        Ok((0..xs.nrows())
            .map(|r| {
                let x = xs.row(r);
                let gate = self.layout.gate(x.as_slice().expect("row-major"), ts[r]);
                curves
                    .iter()
                    .zip(gate)
                    .filter(|(_, open)| *open)
                    .map(|((tau, p), _)| {
                        eval_unchecked(tau.row(r).as_slice().unwrap(), p.row(r).as_slice().unwrap(), ts[r])
                    })
                    .sum()
            })
            .collect())
    }

    pub(crate) fn forward_pass(&self, x: ArrayView2<f64>, ts: &[f64]) -> Result<(ModelPass, Array2<f64>)> {
        let (z, enc_tape) = self.ae.encoder.forward_batch(x)?;
        let (x_aug, tau_in) = self.augment(x, &z);
        let tau_src = tau_in.as_ref().unwrap_or(&x_aug);
        let locals = self
            .locals
            .par_iter()
            .map(|local| local_forward(local, tau_src.view(), x_aug.view(), ts, &self.hyper))
            .collect::<Result<Vec<_>>>()?;
        Ok((ModelPass { enc_tape, locals }, z))
    }

    /// Backward pass given dLoss/df for every local curve value (already
    /// multiplied by the gate). Returns gradients and dLoss/dz.
    pub(crate) fn backward_pass(&self, pass: &ModelPass, ts: &[f64], d_f: &[Vec<f64>]) -> Result<(Vec<LocalGrads>, Array2<f64>)> {
        let d = self.input_dim();
        let results = self
            .locals
            .par_iter()
            .zip(pass.locals.par_iter())
            .zip(d_f.par_iter())
            .map(|((local, lp), df)| local_backward(local, lp, ts, df, &self.hyper))
            .collect::<Result<Vec<_>>>()?;
        let rows = ts.len();
        let mut d_z = Array2::zeros((rows, self.ae.z_dim()));
        let mut grads = Vec::with_capacity(results.len());
        // Summed in local order so the result does not depend on scheduling.
        for (g, d_tau_in, d_aug) in results {
            d_z += &d_aug.slice(s![.., d..]);
            if self.hyper.tau_input == TauInput::Query {
                d_z += &d_tau_in.slice(s![.., d..]);
            }
            grads.push(g);
        }
        Ok((grads, d_z))
    }

    pub(crate) fn encoder_backward(&self, pass: &ModelPass, d_z: ArrayView2<f64>) -> Result<NetGrads> {
        Ok(self.ae.encoder.backward(&pass.enc_tape, d_z)?.0)
    }
}

fn local_forward(local: &LocalEstimator, tau_in: ArrayView2<f64>, x_aug: ArrayView2<f64>, ts: &[f64], hyper: &Hyper) -> Result<LocalPass> {
    let (raw, tau_tape) = local.tau_net.forward_batch(tau_in)?;
    let (h, m_tape) = local.m_net.forward_batch(x_aug)?;
    let rows = ts.len();
    let slots = local.dec_w.nrows();
    let mut weights = Array2::zeros((rows, slots - 1));
    let mut tau = Array2::zeros((rows, slots));
    let mut pre_k = Array2::zeros((rows, slots));
    let mut p = Array2::zeros((rows, slots));
    let mut f = Vec::with_capacity(rows);
    for r in 0..rows {
        let (w, tr) = tau_from_raw(raw.row(r).as_slice().expect("row-major"), hyper);
        let pre = local.slot_pre_activations(h.row(r).as_slice().expect("row-major"));
        let pr = prefix_sum(&pre.iter().map(|&v| relu(v)).collect::<Vec<_>>());
        f.push(eval_unchecked(&tr, &pr, ts[r]));
        weights.row_mut(r).assign(&Array1::from(w));
        tau.row_mut(r).assign(&Array1::from(tr));
        pre_k.row_mut(r).assign(&Array1::from(pre));
        p.row_mut(r).assign(&Array1::from(pr));
    }
    Ok(LocalPass {
        tau_tape,
        m_tape,
        raw,
        weights,
        tau,
        h,
        pre_k,
        p,
        f,
    })
}

/// Returns the local gradients, dLoss/d(tau input) and dLoss/d[x; z].
fn local_backward(local: &LocalEstimator, pass: &LocalPass, ts: &[f64], d_f: &[f64], hyper: &Hyper) -> Result<(LocalGrads, Array2<f64>, Array2<f64>)> {
    let rows = ts.len();
    let slots = local.dec_w.nrows();
    let hd = local.h_dim();
    let mut d_raw = Array2::zeros((rows, slots - 1));
    let mut d_h = Array2::zeros((rows, slots * hd));
    let mut dec_w = Array2::zeros(local.dec_w.raw_dim());
    let mut dec_b = Array1::zeros(slots);
    let mut d_tau = vec![0.0; slots];
    let mut d_p = vec![0.0; slots];
    for r in 0..rows {
        if d_f[r] == 0.0 {
            continue;
        }
        d_tau.iter_mut().for_each(|v| *v = 0.0);
        d_p.iter_mut().for_each(|v| *v = 0.0);
        let tau = pass.tau.row(r);
        let p = pass.p.row(r);
        eval_backward(tau.as_slice().unwrap(), p.as_slice().unwrap(), ts[r], d_f[r], &mut d_tau, &mut d_p);

        let raw = pass.raw.row(r);
        let w = pass.weights.row(r);
        let dr = tau_backward(raw.as_slice().unwrap(), w.as_slice().unwrap(), &d_tau, hyper);
        d_raw.row_mut(r).assign(&Array1::from(dr));

        let d_k = suffix_sum(&d_p);
        let h = pass.h.row(r);
        let mut dh_row = d_h.row_mut(r);
        for i in 0..slots {
            if pass.pre_k[[r, i]] <= 0.0 || d_k[i] == 0.0 {
                continue;
            }
            let g = d_k[i];
            dec_b[i] += g;
            for j in 0..hd {
                dec_w[[i, j]] += g * h[i * hd + j];
                dh_row[i * hd + j] = g * local.dec_w[[i, j]];
            }
        }
    }
    let (tau_grads, d_tau_in) = local.tau_net.backward(&pass.tau_tape, d_raw.view())?;
    let (m_grads, d_aug) = local.m_net.backward(&pass.m_tape, d_h.view())?;
    Ok((
        LocalGrads {
            tau_net: tau_grads,
            m_net: m_grads,
            dec_w,
            dec_b,
        },
        d_tau_in,
        d_aug,
    ))
}

impl ThresholdEstimator for SelNetModel {
    fn t_max(&self) -> f64 {
        self.hyper.t_max
    }

    fn estimate_many(&self, x: &[f64], ts: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        for &t in ts {
            self.check_t(t)?;
        }
        let curves = self.curves(x)?;
        Ok(ts
            .iter()
            .map(|&t| {
                let gate = self.layout.gate(x, t);
                curves
                    .iter()
                    .zip(gate)
                    .filter(|(_, open)| *open)
                    .map(|(c, _)| eval_unchecked(&c.tau, &c.p, t))
                    .sum()
            })
            .collect())
    }
}
