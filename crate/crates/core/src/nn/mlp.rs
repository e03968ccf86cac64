//! Dense feed-forward networks with an explicit reverse-mode tape.
//!
//! A forward pass records every layer input and pre-activation in a [`Tape`];
//! [`Mlp::backward`] consumes the tape to produce exact gradients of
//! `<output, output_grad>` with respect to every parameter and to the input.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Activation;
use crate::error::{shape_err, Error, Result};

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }
}

/// Builds the layer chain `in -> hidden... -> out`.
pub fn chain(in_dim: usize, hidden: &[usize], hidden_act: Activation, out_dim: usize, out_act: Activation) -> Vec<LayerSpec> {
    let mut specs = Vec::with_capacity(hidden.len() + 1);
    let mut prev = in_dim;
    for &h in hidden {
        specs.push(LayerSpec::new(prev, h, hidden_act));
        prev = h;
    }
    specs.push(LayerSpec::new(prev, out_dim, out_act));
    specs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub spec: LayerSpec,
    /// Row-major, `out_dim x in_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(spec: LayerSpec) -> Self {
        Self {
            spec,
            weights: vec![0.0; spec.in_dim * spec.out_dim],
            bias: vec![0.0; spec.out_dim],
        }
    }

    fn affine(&self, x: &[f64], z: &mut [f64]) {
        let n = self.spec.in_dim;
        for ((zo, row), b) in z.iter_mut().zip(self.weights.chunks_exact(n)).zip(&self.bias) {
            let mut acc = *b;
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            *zo = acc;
        }
    }
}

/// The parameters of one network (actor, critic, encoder or coordinator).
#[derive(Debug, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
    #[serde(skip, default = "fresh_version")]
    version: u64,
}

impl Clone for Mlp {
    fn clone(&self) -> Self {
        // Identical parameters, so tapes stay valid across the copy.
        Self {
            layers: self.layers.clone(),
            version: self.version,
        }
    }
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    version: u64,
    /// `acts[0]` is the input, `acts[k + 1]` the output of layer `k`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("tape has at least the input")
    }

    pub fn input(&self) -> &[f64] {
        &self.acts[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradient with the exact shape of an [`Mlp`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrad>,
}

impl ParamGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn add_assign(&mut self, other: &ParamGrads) -> Result<()> {
        if !self.same_shape(other) {
            return shape_err("gradient accumulation over different shapes");
        }
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.iter_mut() {
            *g *= c;
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.iter().map(|g| g * g).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|&g| g == 0.0)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    fn same_shape(&self, other: &ParamGrads) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.len() == b.weights.len() && a.bias.len() == b.bias.len())
    }
}

/// Scales a group of gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut ParamGrads], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let c = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(c);
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct GradRecord {
    pub params: ParamGrads,
    pub input: Vec<f64>,
}

impl Mlp {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization for weights and biases.
    pub fn new<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(specs)?;
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.spec.in_dim as f64).sqrt();
            for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *w = rng.random_range(-bound..=bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(specs: &[LayerSpec]) -> Result<Self> {
        validate_specs(specs)?;
        Ok(Self {
            layers: specs.iter().copied().map(Dense::zeros).collect(),
            version: fresh_version(),
        })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        let specs: Vec<LayerSpec> = layers.iter().map(|l| l.spec).collect();
        validate_specs(&specs)?;
        for l in &layers {
            if l.weights.len() != l.spec.in_dim * l.spec.out_dim || l.bias.len() != l.spec.out_dim {
                return shape_err("layer parameters disagree with layer spec");
            }
            if !l.weights.iter().chain(&l.bias).all(|v| v.is_finite()) {
                return Err(Error::Numeric("non-finite parameter".into()));
            }
        }
        Ok(Self {
            layers,
            version: fresh_version(),
        })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Direct parameter access. Invalidates outstanding tapes.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.version = fresh_version();
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("validated non-empty").spec.out_dim
    }

    pub fn output_activation(&self) -> Activation {
        self.layers.last().expect("validated non-empty").spec.activation
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return shape_err(format!("expected {} parameters, got {}", self.num_params(), flat.len()));
        }
        let mut it = flat.iter();
        for l in self.layers_mut() {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        self.check_input(input)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        acts.push(input.to_vec());
        for layer in &self.layers {
            let x = acts.last().expect("non-empty");
            let mut z = vec![0.0; layer.spec.out_dim];
            layer.affine(x, &mut z);
            let mut y = vec![0.0; layer.spec.out_dim];
            layer.spec.activation.apply(&z, &mut y);
            pre.push(z);
            acts.push(y);
        }
        let out = acts.last().expect("non-empty").clone();
        Ok((
            out,
            Tape {
                version: self.version,
                acts,
                pre,
            },
        ))
    }

    /// Forward pass without recording a tape.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        for layer in &self.layers {
            let mut z = vec![0.0; layer.spec.out_dim];
            layer.affine(&x, &mut z);
            let mut y = vec![0.0; layer.spec.out_dim];
            layer.spec.activation.apply(&z, &mut y);
            x = y;
        }
        Ok(x)
    }

    pub fn backward(&self, tape: &Tape, output_grad: &[f64]) -> Result<GradRecord> {
        let mut params = ParamGrads::zeros_like(self);
        let input = self.backward_into(tape, output_grad, Some(&mut params))?;
        Ok(GradRecord { params, input })
    }

    /// Reverse pass that accumulates parameter gradients into `acc` (when given)
    /// and returns the gradient with respect to the input.
    pub fn backward_into(&self, tape: &Tape, output_grad: &[f64], mut acc: Option<&mut ParamGrads>) -> Result<Vec<f64>> {
        if tape.version != self.version || tape.pre.len() != self.layers.len() {
            return Err(Error::Contract("tape does not belong to the current parameters".into()));
        }
        if output_grad.len() != self.out_dim() {
            return shape_err(format!(
                "output gradient has {} entries, net emits {}",
                output_grad.len(),
                self.out_dim()
            ));
        }
        if let Some(a) = acc.as_deref() {
            if a.layers.len() != self.layers.len() {
                return shape_err("accumulator shape differs from net");
            }
        }
        let mut grad_y = output_grad.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let n_in = layer.spec.in_dim;
            let x = &tape.acts[k];
            let mut grad_z = vec![0.0; layer.spec.out_dim];
            layer
                .spec
                .activation
                .backprop(&tape.pre[k], &tape.acts[k + 1], &grad_y, &mut grad_z);
            if let Some(a) = acc.as_deref_mut() {
                let lg = &mut a.layers[k];
                for ((row, &gz), gb) in lg.weights.chunks_exact_mut(n_in).zip(&grad_z).zip(lg.bias.iter_mut()) {
                    *gb += gz;
                    if gz != 0.0 {
                        for (w, &xi) in row.iter_mut().zip(x) {
                            *w += gz * xi;
                        }
                    }
                }
            }
            let mut grad_x = vec![0.0; n_in];
            for (row, &gz) in layer.weights.chunks_exact(n_in).zip(&grad_z) {
                if gz != 0.0 {
                    for (gx, w) in grad_x.iter_mut().zip(row) {
                        *gx += w * gz;
                    }
                }
            }
            grad_y = grad_x;
        }
        Ok(grad_y)
    }

    /// `self <- (1 - tau) * self + tau * source`
    pub fn soft_update_from(&mut self, source: &Mlp, tau: f64) -> Result<()> {
        if self.specs() != source.specs() {
            return shape_err("soft update between differently shaped nets");
        }
        for (dst, src) in self.layers_mut().iter_mut().zip(&source.layers) {
            for (d, s) in dst.weights.iter_mut().zip(&src.weights) {
                *d += tau * (s - *d);
            }
            for (d, s) in dst.bias.iter_mut().zip(&src.bias) {
                *d += tau * (s - *d);
            }
        }
        Ok(())
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.in_dim() {
            return shape_err(format!("input has {} entries, net expects {}", input.len(), self.in_dim()));
        }
        if !input.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite network input".into()));
        }
        Ok(())
    }
}

fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Config("a network needs at least one layer".into()));
    }
    for (k, s) in specs.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(Error::Config(format!("layer {k} has a zero dimension")));
        }
        if s.activation == Activation::Softmax && k + 1 != specs.len() {
            return Err(Error::Config("softmax is only allowed on the final layer".into()));
        }
        if k > 0 && specs[k - 1].out_dim != s.in_dim {
            return shape_err(format!(
                "layer {} emits {} values but layer {k} expects {}",
                k - 1,
                specs[k - 1].out_dim,
                s.in_dim
            ));
        }
    }
    Ok(())
}
