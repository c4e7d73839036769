//! Fully connected coordinate networks with sine, ReLU or tanh hidden units.
//!
//! A network with `hidden_layers = h` has `h + 1` affine layers: `h` hidden
//! layers of uniform width followed by the output layer. Sine layers compute
//! `sin(omega0 * (W x + b))` on the first layer and `sin(W x + b)` after it.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Sine on every hidden layer, affine output.
    SirenPure,
    /// As `SirenPure` with a ReLU after the output affine.
    SirenReluLast,
    MlpRelu,
    MlpTanh,
    /// Sine first layer, ReLU on the remaining hidden layers.
    HybridSirenFirst,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::SirenPure,
        Variant::SirenReluLast,
        Variant::MlpRelu,
        Variant::MlpTanh,
        Variant::HybridSirenFirst,
    ];

    pub fn code(self) -> u8 {
        match self {
            Variant::SirenPure => 0,
            Variant::SirenReluLast => 1,
            Variant::MlpRelu => 2,
            Variant::MlpTanh => 3,
            Variant::HybridSirenFirst => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::SirenPure => "siren",
            Variant::SirenReluLast => "siren-relu",
            Variant::MlpRelu => "mlp-relu",
            Variant::MlpTanh => "mlp-tanh",
            Variant::HybridSirenFirst => "mlp-siren",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == name)
    }

    fn hidden_activation(self, layer: usize, omega0: f64) -> Activation {
        match (self, layer) {
            (Variant::SirenPure | Variant::SirenReluLast, 0) => Activation::Sine(omega0),
            (Variant::SirenPure | Variant::SirenReluLast, _) => Activation::Sine(1.0),
            (Variant::HybridSirenFirst, 0) => Activation::Sine(omega0),
            (Variant::HybridSirenFirst | Variant::MlpRelu, _) => Activation::Relu,
            (Variant::MlpTanh, _) => Activation::Tanh,
        }
    }

    fn output_activation(self) -> Activation {
        match self {
            Variant::SirenReluLast => Activation::Relu,
            _ => Activation::Identity,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Activation {
    /// `sin(scale * z)`
    Sine(f64),
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sine(w) => (w * z).sin(),
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative with respect to the pre-activation `z`, given `a = apply(z)`.
    #[inline]
    pub(crate) fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Sine(w) => w * (w * z).cos(),
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub variant: Variant,
    pub omega0: f64,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0
            || self.out_dim == 0
            || self.hidden_layers == 0
            || self.hidden_units == 0
        {
            return Err(Error::Config(format!(
                "in_dim, out_dim, hidden_layers and hidden_units must be >= 1: {self:?}"
            )));
        }
        if !self.omega0.is_finite() || self.omega0 <= 0.0 {
            return Err(Error::Config(format!(
                "omega0 must be positive, got {}",
                self.omega0
            )));
        }
        Ok(())
    }

    /// `(fan_out, fan_in)` of every affine layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden_layers + 1);
        shapes.push((self.hidden_units, self.in_dim));
        for _ in 1..self.hidden_layers {
            shapes.push((self.hidden_units, self.hidden_units));
        }
        shapes.push((self.out_dim, self.hidden_units));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|&(out, inp)| out * inp + out)
            .sum()
    }

    pub(crate) fn activation(&self, layer: usize) -> Activation {
        if layer == self.hidden_layers {
            self.variant.output_activation()
        } else {
            self.variant.hidden_activation(layer, self.omega0)
        }
    }
}

/// Free-function form of [`NetworkSpec::param_count`].
pub fn param_count(spec: &NetworkSpec) -> usize {
    spec.param_count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// fan_out x fan_in
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<Layer>,
}

impl NetworkParams {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(out, inp)| Layer {
                weight: Array2::zeros((out, inp)),
                bias: Array1::zeros(out),
            })
            .collect();
        Self { layers }
    }

    pub fn scalar_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Scalars in storage order: per layer, W row-major then b.
    pub fn iter(&self) -> impl Iterator<Item = &f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn from_flat(spec: &NetworkSpec, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(spec);
        if flat.len() != p.scalar_count() {
            return Err(Error::Shape(format!(
                "{} scalars for a network of {} parameters",
                flat.len(),
                p.scalar_count()
            )));
        }
        p.iter_mut().zip(flat).for_each(|(d, &s)| *d = s);
        Ok(p)
    }

    pub fn matches(&self, spec: &NetworkSpec) -> bool {
        let shapes = spec.layer_shapes();
        self.layers.len() == shapes.len()
            && self
                .layers
                .iter()
                .zip(shapes)
                .all(|(l, (out, inp))| l.weight.dim() == (out, inp) && l.bias.len() == out)
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

/// Seeded initialization.
///
/// A sine first layer draws from U[-1/n, 1/n] (omega0 is applied in the
/// forward pass); every other layer draws from U[-sqrt(6/n), sqrt(6/n)] with
/// n = fan_in. Biases start at zero. Draws are taken layer by layer in
/// storage order from a ChaCha8 stream seeded with `seed`.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> NetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NetworkParams::zeros(spec);
    for (i, layer) in params.layers.iter_mut().enumerate() {
        let fan_in = layer.weight.ncols();
        let bound = match spec.activation(i) {
            Activation::Sine(_) if i == 0 => first_layer_bound(fan_in),
            _ => init_bound(fan_in),
        };
        layer
            .weight
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-bound..=bound));
    }
    params
}

/// sqrt(6 / fan_in)
pub fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// 1 / fan_in
pub fn first_layer_bound(fan_in: usize) -> f64 {
    1.0 / fan_in as f64
}

/// Intermediate values kept for backpropagation: per layer, the affine
/// pre-activation and the activation output.
pub(crate) struct ForwardCache {
    pub pre: Vec<Array2<f64>>,
    pub post: Vec<Array2<f64>>,
}

fn affine(input: &ArrayView2<f64>, layer: &Layer) -> Array2<f64> {
    let mut z = input.dot(&layer.weight.t());
    z += &layer.bias.view().insert_axis(Axis(0));
    z
}

fn check_inputs(
    spec: &NetworkSpec,
    params: &NetworkParams,
    inputs: &ArrayView2<f64>,
) -> Result<()> {
    if inputs.ncols() != spec.in_dim {
        return Err(Error::Shape(format!(
            "inputs have {} columns, network expects {}",
            inputs.ncols(),
            spec.in_dim
        )));
    }
    if !params.matches(spec) {
        return Err(Error::Shape(
            "parameters do not match the network spec".into(),
        ));
    }
    Ok(())
}

pub(crate) fn forward_cached(
    spec: &NetworkSpec,
    params: &NetworkParams,
    inputs: ArrayView2<f64>,
) -> Result<ForwardCache> {
    check_inputs(spec, params, &inputs)?;
    let n = params.layers.len();
    let mut pre = Vec::with_capacity(n);
    let mut post: Vec<Array2<f64>> = Vec::with_capacity(n);
    for (i, layer) in params.layers.iter().enumerate() {
        let z = match post.last() {
            Some(a) => affine(&a.view(), layer),
            None => affine(&inputs, layer),
        };
        let act = spec.activation(i);
        let a = if act == Activation::Identity {
            z.clone()
        } else {
            z.mapv(|v| act.apply(v))
        };
        pre.push(z);
        post.push(a);
    }
    Ok(ForwardCache { pre, post })
}

/// Evaluates the network on each input row.
pub fn forward(
    spec: &NetworkSpec,
    params: &NetworkParams,
    inputs: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    check_inputs(spec, params, &inputs)?;
    let mut a: Option<Array2<f64>> = None;
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = match &a {
            Some(prev) => affine(&prev.view(), layer),
            None => affine(&inputs, layer),
        };
        let act = spec.activation(i);
        if act != Activation::Identity {
            z.mapv_inplace(|v| act.apply(v));
        }
        a = Some(z);
    }
    Ok(a.expect("at least one layer"))
}

/// [`forward`] over row chunks on the rayon pool. Each output row depends
/// only on its input row, so the result matches the single-chunk evaluation.
pub fn forward_chunked(
    spec: &NetworkSpec,
    params: &NetworkParams,
    inputs: ArrayView2<f64>,
    chunk_rows: usize,
) -> Result<Array2<f64>> {
    let chunk_rows = chunk_rows.max(1);
    let parts = inputs
        .axis_chunks_iter(Axis(0), chunk_rows)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|chunk| forward(spec, params, chunk))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}
