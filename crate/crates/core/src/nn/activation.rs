use serde::{Deserialize, Serialize};

/// Elementwise (or, for softmax, vector-wise) output nonlinearity of a dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    /// ELU with alpha = 1.
    Elu,
    Sigmoid,
    Tanh,
    /// Normalized exponential over the whole layer output. Only valid on a final layer.
    Softmax,
}

impl Activation {
    pub fn apply(self, z: &[f64], y: &mut [f64]) {
        debug_assert_eq!(z.len(), y.len());
        match self {
            Activation::Identity => y.copy_from_slice(z),
            Activation::Relu => {
                for (o, &v) in y.iter_mut().zip(z) {
                    *o = if v > 0.0 { v } else { 0.0 };
                }
            }
            Activation::Elu => {
                for (o, &v) in y.iter_mut().zip(z) {
                    *o = if v > 0.0 { v } else { v.exp_m1() };
                }
            }
            Activation::Sigmoid => {
                for (o, &v) in y.iter_mut().zip(z) {
                    *o = sigmoid(v);
                }
            }
            Activation::Tanh => {
                for (o, &v) in y.iter_mut().zip(z) {
                    *o = v.tanh();
                }
            }
            Activation::Softmax => softmax_into(z, y),
        }
    }

    /// Maps a gradient w.r.t. the activation output onto the pre-activation.
    pub fn backprop(self, z: &[f64], y: &[f64], grad_y: &[f64], grad_z: &mut [f64]) {
        match self {
            Activation::Identity => grad_z.copy_from_slice(grad_y),
            Activation::Relu => {
                for ((gz, &gy), &v) in grad_z.iter_mut().zip(grad_y).zip(z) {
                    *gz = if v > 0.0 { gy } else { 0.0 };
                }
            }
            Activation::Elu => {
                for (((gz, &gy), &v), &out) in grad_z.iter_mut().zip(grad_y).zip(z).zip(y) {
                    *gz = if v > 0.0 { gy } else { gy * (out + 1.0) };
                }
            }
            Activation::Sigmoid => {
                for ((gz, &gy), &out) in grad_z.iter_mut().zip(grad_y).zip(y) {
                    *gz = gy * out * (1.0 - out);
                }
            }
            Activation::Tanh => {
                for ((gz, &gy), &out) in grad_z.iter_mut().zip(grad_y).zip(y) {
                    *gz = gy * (1.0 - out * out);
                }
            }
            Activation::Softmax => softmax_backprop(y, grad_y, grad_z),
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax.
pub fn softmax_into(z: &[f64], y: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in y.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in y.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; z.len()];
    softmax_into(z, &mut y);
    y
}

/// dz = y * (g - <g, y>)
pub fn softmax_backprop(y: &[f64], grad_y: &[f64], grad_z: &mut [f64]) {
    let dot: f64 = y.iter().zip(grad_y).map(|(a, b)| a * b).sum();
    for ((gz, &gy), &out) in grad_z.iter_mut().zip(grad_y).zip(y) {
        *gz = out * (gy - dot);
    }
}

/// Independent softmax over consecutive blocks of `block` logits.
pub fn softmax_blocks(z: &[f64], block: usize) -> Vec<f64> {
    let mut y = vec![0.0; z.len()];
    for (zc, yc) in z.chunks(block).zip(y.chunks_mut(block)) {
        softmax_into(zc, yc);
    }
    y
}

pub fn softmax_blocks_backprop(y: &[f64], grad_y: &[f64], block: usize) -> Vec<f64> {
    let mut gz = vec![0.0; y.len()];
    for ((yc, gc), zc) in y.chunks(block).zip(grad_y.chunks(block)).zip(gz.chunks_mut(block)) {
        softmax_backprop(yc, gc, zc);
    }
    gz
}
