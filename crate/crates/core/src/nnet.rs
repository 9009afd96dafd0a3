//! Dense feed-forward networks with explicit forward and backward passes.
//!
//! A [`DenseNet`] is a chain of affine layers `z = W x + b` followed by an
//! element-wise activation. Weights are stored row-major with shape
//! `(out_dim, in_dim)`. Forward passes work on batches (one sample per row)
//! and return a [`Tape`] holding what the backward pass needs.
//!
//! All arithmetic is `f64`. Batch gradients are summed over rows in row
//! order, so results are bitwise reproducible for a given input order.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            // relu'(0) is taken as 0, so max keeps the kink on the zero side.
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// One affine layer plus activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// Shape `(out_dim, in_dim)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// A chain of dense layers.
///
/// Every instance carries an identity and a revision counter. Tapes remember
/// both, which lets [`DenseNet::backward`] reject a tape recorded on another
/// network or before a parameter update.
#[derive(Debug)]
pub struct DenseNet {
    layers: Vec<Dense>,
    id: u64,
    revision: u64,
}

impl Clone for DenseNet {
    fn clone(&self) -> Self {
        DenseNet {
            layers: self.layers.clone(),
            id: fresh_id(),
            revision: 0,
        }
    }
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Cached per-layer values from a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    net_id: u64,
    revision: u64,
    /// Input to each layer, `(batch, in_dim)`.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer, `(batch, out_dim)`.
    pre: Vec<Array2<f64>>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, |a| a.nrows())
    }

    /// Pre-activations per layer, for kink detection in gradient checks.
    pub fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre
    }

    /// Smallest |pre-activation| over relu layers (`f64::INFINITY` if none).
    pub fn relu_margin(&self, layers: &[Dense]) -> f64 {
        let mut margin = f64::INFINITY;
        for (pre, layer) in self.pre.iter().zip(layers) {
            if layer.activation == Activation::Relu {
                for &z in pre.iter() {
                    margin = margin.min(z.abs());
                }
            }
        }
        margin
    }
}

/// Gradients with the same shapes as a [`DenseNet`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl NetGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        NetGrads {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &NetGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
    }
}

/// Uniform access to named, flat parameter groups.
///
/// Groups must be reported in a stable order; optimizers and gradient
/// checkers pair parameters with gradients by position.
pub trait ParamGroups {
    fn groups(&self) -> Vec<(String, &[f64])>;
    fn groups_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn param_count(&self) -> usize {
        self.groups().iter().map(|(_, g)| g.len()).sum()
    }
}

fn layer_groups<'a>(prefix: &str, i: usize, w: &'a Array2<f64>, b: &'a Array1<f64>) -> [(String, &'a [f64]); 2] {
    [
        (
            format!("{prefix}layer{i}.weight"),
            w.as_slice().expect("standard layout"),
        ),
        (
            format!("{prefix}layer{i}.bias"),
            b.as_slice().expect("standard layout"),
        ),
    ]
}

fn layer_groups_mut<'a>(
    prefix: &str,
    i: usize,
    w: &'a mut Array2<f64>,
    b: &'a mut Array1<f64>,
) -> [(String, &'a mut [f64]); 2] {
    [
        (
            format!("{prefix}layer{i}.weight"),
            w.as_slice_mut().expect("standard layout"),
        ),
        (
            format!("{prefix}layer{i}.bias"),
            b.as_slice_mut().expect("standard layout"),
        ),
    ]
}

impl ParamGroups for DenseNet {
    fn groups(&self) -> Vec<(String, &[f64])> {
        self.named_groups("")
    }

    fn groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.named_groups_mut("")
    }
}

impl ParamGroups for NetGrads {
    fn groups(&self) -> Vec<(String, &[f64])> {
        self.named_groups("")
    }

    fn groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.named_groups_mut("")
    }
}

impl NetGrads {
    pub fn named_groups(&self, prefix: &str) -> Vec<(String, &[f64])> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| layer_groups(prefix, i, &l.weight, &l.bias))
            .collect()
    }

    pub fn named_groups_mut(&mut self, prefix: &str) -> Vec<(String, &mut [f64])> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| layer_groups_mut(prefix, i, &mut l.weight, &mut l.bias))
            .collect()
    }
}

/// `a · Wᵀ + b` in row-major layout.
fn affine(a: &Array2<f64>, layer: &Dense) -> Array2<f64> {
    let mut z = a.dot(&layer.weight.t()).as_standard_layout().into_owned();
    z += &layer.bias;
    z
}

impl DenseNet {
    /// He-initialised network: hidden layers use relu, the last layer is
    /// linear. Weights are `N(0, 2 / fan_in)`, biases zero.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(layer_sizes, &mut rng)
    }

    pub fn init_with_rng<R: rand::Rng + ?Sized>(layer_sizes: &[usize], rng: &mut R) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "a network needs at least 2 layer sizes, got {}",
                layer_sizes.len()
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "layer sizes must be positive: {layer_sizes:?}"
            )));
        }
        let n_layers = layer_sizes.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for (i, pair) in layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || normal.sample(rng));
            let activation = if i + 1 == n_layers {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(Dense {
                weight,
                bias: Array1::zeros(fan_out),
                activation,
            });
        }
        Self::from_layers(layers)
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("network has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::Shape(format!(
                    "layer {i}: bias length {} != output dim {}",
                    l.bias.len(),
                    l.out_dim()
                )));
            }
            if l.in_dim() == 0 || l.out_dim() == 0 {
                return Err(Error::Shape(format!("layer {i} has a zero dimension")));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(DenseNet {
            layers,
            id: fresh_id(),
            revision: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Mutable access to the layers. Invalidates outstanding tapes.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.revision += 1;
        &mut self.layers
    }

    /// Layer widths, input first.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(Dense::out_dim));
        sizes
    }

    /// Number of weight-matrix entries (biases excluded).
    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn named_groups(&self, prefix: &str) -> Vec<(String, &[f64])> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| layer_groups(prefix, i, &l.weight, &l.bias))
            .collect()
    }

    pub fn named_groups_mut(&mut self, prefix: &str) -> Vec<(String, &mut [f64])> {
        self.revision += 1;
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| layer_groups_mut(prefix, i, &mut l.weight, &mut l.bias))
            .collect()
    }

    fn check_input(&self, input: &ArrayView2<f64>) -> Result<()> {
        if input.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects input dim {}, got {}",
                self.input_dim(),
                input.ncols()
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        Ok(())
    }

    /// Batched forward pass without recording a tape.
    pub fn predict_batch(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&input)?;
        let mut a = input.to_owned();
        for layer in &self.layers {
            let mut z = affine(&a, layer);
            let act = layer.activation;
            z.mapv_inplace(|v| act.apply(v));
            a = z;
        }
        Ok(a)
    }

    /// Batched forward pass; rows are samples.
    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, Tape)> {
        self.check_input(&input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = input.to_owned();
        for layer in &self.layers {
            let z = affine(&a, layer);
            let act = layer.activation;
            let out = z.mapv(|v| act.apply(v));
            inputs.push(a);
            pre.push(z);
            a = out;
        }
        Ok((
            a,
            Tape {
                net_id: self.id,
                revision: self.revision,
                inputs,
                pre,
            },
        ))
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let view = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let (out, tape) = self.forward_batch(view)?;
        Ok((out.into_raw_vec_and_offset().0, tape))
    }

    /// Batched backward pass. `output_grad` holds dLoss/dOutput per row;
    /// parameter gradients are summed over rows.
    pub fn backward(&self, tape: &Tape, output_grad: ArrayView2<f64>) -> Result<(NetGrads, Array2<f64>)> {
        if tape.net_id != self.id || tape.revision != self.revision {
            return Err(Error::Contract(
                "tape was recorded on a different network or before a parameter update".into(),
            ));
        }
        if tape.pre.len() != self.layers.len() {
            return Err(Error::Contract("tape depth does not match network".into()));
        }
        if output_grad.ncols() != self.output_dim() || output_grad.nrows() != tape.batch_size() {
            return Err(Error::Shape(format!(
                "output gradient is {:?}, expected ({}, {})",
                output_grad.dim(),
                tape.batch_size(),
                self.output_dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = output_grad.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation != Activation::Identity {
                let act = layer.activation;
                delta.zip_mut_with(&tape.pre[i], |d, &z| *d *= act.derivative(z));
            }
            let weight = delta.t().dot(&tape.inputs[i]).as_standard_layout().into_owned();
            let bias = delta.sum_axis(Axis(0));
            grads.push(LayerGrads { weight, bias });
            delta = delta.dot(&layer.weight).as_standard_layout().into_owned();
        }
        grads.reverse();
        Ok((NetGrads { layers: grads }, delta))
    }

    /// Single-sample backward pass.
    pub fn backward_one(&self, tape: &Tape, output_grad: &[f64]) -> Result<(NetGrads, Vec<f64>)> {
        let view = ArrayView2::from_shape((1, output_grad.len()), output_grad)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let (g, input_grad) = self.backward(tape, view)?;
        Ok((g, input_grad.into_raw_vec_and_offset().0))
    }
}

/// Closed-form weight count of a fully connected chain with the given
/// widths: `|x|·|a_1| + Σ |a_i|·|a_{i+1}| + |a_n|·|y|`.
pub fn ffn_complexity(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1]).sum()
}

/// Adaptive moment optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment estimates for [`AdamConfig`]. Moments are allocated
/// on the first step and must keep the same shape afterwards.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update. Nothing is modified if a gradient
    /// is non-finite or shapes disagree.
    pub fn step<P, G>(&mut self, params: &mut P, grads: &G) -> Result<()>
    where
        P: ParamGroups + ?Sized,
        G: ParamGroups + ?Sized,
    {
        let grad_groups = grads.groups();
        {
            let param_groups = params.groups();
            if param_groups.len() != grad_groups.len() {
                return Err(Error::Shape(format!(
                    "{} parameter groups but {} gradient groups",
                    param_groups.len(),
                    grad_groups.len()
                )));
            }
            for ((pname, p), (_, g)) in param_groups.iter().zip(&grad_groups) {
                if p.len() != g.len() {
                    return Err(Error::Shape(format!(
                        "group {pname}: {} parameters but {} gradients",
                        p.len(),
                        g.len()
                    )));
                }
            }
            if !self.first.is_empty() {
                let same = self.first.len() == param_groups.len()
                    && self.first.iter().zip(&param_groups).all(|(m, (_, p))| m.len() == p.len());
                if !same {
                    return Err(Error::Shape("optimizer state does not match parameters".into()));
                }
            }
        }
        for (name, g) in &grad_groups {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        if self.first.is_empty() {
            self.first = grad_groups.iter().map(|(_, g)| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut param_groups = params.groups_mut();
        for (gi, ((_, p), (_, g))) in param_groups.iter_mut().zip(&grad_groups).enumerate() {
            let m = &mut self.first[gi];
            let v = &mut self.second[gi];
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One optimizer step on a single network.
pub fn optimizer_step(net: &mut DenseNet, grads: &NetGrads, state: &mut OptimizerState) -> Result<()> {
    state.step(net, grads)
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub groups: Vec<GroupError>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub max_rel_error: f64,
    pub entries: usize,
}

impl GradReport {
    pub fn failing_groups(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| g.max_rel_error > self.tolerance)
            .map(|g| g.name.as_str())
            .collect()
    }
}

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

/// Floor on the relative-error denominator so that gradients that are zero
/// up to rounding compare by absolute difference.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` against central finite differences of `loss`
/// evaluated around `model`, one parameter entry at a time.
pub fn grad_check<M, G, F>(model: &M, loss: F, analytic: &G, tol: f64) -> GradReport
where
    M: ParamGroups + Clone,
    G: ParamGroups + ?Sized,
    F: Fn(&M) -> f64,
{
    let analytic_groups = analytic.groups();
    let mut probe = model.clone();
    let shapes: Vec<(String, usize)> = model.groups().iter().map(|(n, g)| (n.clone(), g.len())).collect();
    let mut groups = Vec::with_capacity(shapes.len());
    for (gi, (name, len)) in shapes.iter().enumerate() {
        let mut worst = 0.0f64;
        let grads = analytic_groups.get(gi).map(|(_, g)| *g);
        for j in 0..*len {
            let original = probe.groups()[gi].1[j];
            probe.groups_mut()[gi].1[j] = original + FD_STEP;
            let plus = loss(&probe);
            probe.groups_mut()[gi].1[j] = original - FD_STEP;
            let minus = loss(&probe);
            probe.groups_mut()[gi].1[j] = original;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = match grads.and_then(|g| g.get(j)) {
                Some(&a) => relative_error(a, numeric),
                None => f64::INFINITY,
            };
            worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
        }
        groups.push(GroupError {
            name: name.clone(),
            max_rel_error: worst,
            entries: *len,
        });
    }
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    GradReport {
        pass: max_rel_error <= tol,
        groups,
        max_rel_error,
        tolerance: tol,
    }
}
