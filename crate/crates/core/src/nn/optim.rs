use serde::{Deserialize, Serialize};

use super::{Mlp, ParamGrads};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    SgdAscent,
    SgdDescent,
    AdamAscent,
    AdamDescent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-net optimizer with persisted Adam moments.
#[derive(Debug, Clone)]
pub struct Optimizer {
    mode: UpdateMode,
    adam: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(mode: UpdateMode) -> Self {
        Self::with_adam(mode, AdamParams::default())
    }

    pub fn with_adam(mode: UpdateMode, adam: AdamParams) -> Self {
        Self {
            mode,
            adam,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn mode(&self) -> UpdateMode {
        self.mode
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one `lr`-scaled step of `grads` to `net`.
    pub fn step(&mut self, net: &mut Mlp, grads: &ParamGrads, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if grads.len() != net.num_params() || grads.layers.len() != net.layers().len() {
            return shape_err("gradient shape differs from parameters");
        }
        if grads.is_zero() && matches!(self.mode, UpdateMode::SgdAscent | UpdateMode::SgdDescent) {
            return Ok(());
        }
        match self.mode {
            UpdateMode::SgdAscent | UpdateMode::SgdDescent => {
                let sign = if self.mode == UpdateMode::SgdAscent { 1.0 } else { -1.0 };
                for (layer, g) in net.layers_mut().iter_mut().zip(&grads.layers) {
                    for (w, d) in layer.weights.iter_mut().zip(&g.weights) {
                        *w += sign * lr * d;
                    }
                    for (b, d) in layer.bias.iter_mut().zip(&g.bias) {
                        *b += sign * lr * d;
                    }
                }
            }
            UpdateMode::AdamAscent | UpdateMode::AdamDescent => {
                let sign = if self.mode == UpdateMode::AdamAscent { 1.0 } else { -1.0 };
                let n = net.num_params();
                if self.m.len() != n {
                    self.m = vec![0.0; n];
                    self.v = vec![0.0; n];
                    self.t = 0;
                }
                self.t += 1;
                let AdamParams { beta1, beta2, eps } = self.adam;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                let mut idx = 0;
                for (layer, g) in net.layers_mut().iter_mut().zip(&grads.layers) {
                    let params = layer.weights.iter_mut().chain(layer.bias.iter_mut());
                    let gs = g.weights.iter().chain(g.bias.iter());
                    for (p, &d) in params.zip(gs) {
                        let m = &mut self.m[idx];
                        let v = &mut self.v[idx];
                        *m = beta1 * *m + (1.0 - beta1) * d;
                        *v = beta2 * *v + (1.0 - beta2) * d * d;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *p += sign * lr * m_hat / (v_hat.sqrt() + eps);
                        idx += 1;
                    }
                }
            }
        }
        Ok(())
    }
}

/// One-shot update without persistent state (Adam modes start from fresh moments).
pub fn apply_update(net: &mut Mlp, grads: &ParamGrads, lr: f64, mode: UpdateMode) -> Result<()> {
    Optimizer::new(mode).step(net, grads, lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, LayerSpec};

    fn scalar_net(w: f64) -> Mlp {
        let mut net = Mlp::zeros(&[LayerSpec::new(1, 1, Activation::Identity)]).unwrap();
        net.set_params_flat(&[w, 0.0]).unwrap();
        net
    }

    fn grads(net: &Mlp, g: f64) -> ParamGrads {
        let mut pg = ParamGrads::zeros_like(net);
        pg.layers[0].weights[0] = g;
        pg
    }

    #[test]
    fn sgd_ascent_arithmetic() {
        let mut net = scalar_net(1.0);
        let g = grads(&net, 2.0);
        apply_update(&mut net, &g, 0.1, UpdateMode::SgdAscent).unwrap();
        assert!((net.params_flat()[0] - 1.2).abs() < 1e-15);
        apply_update(&mut net, &g, 0.1, UpdateMode::SgdDescent).unwrap();
        assert!((net.params_flat()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        for mode in [UpdateMode::SgdAscent, UpdateMode::SgdDescent, UpdateMode::AdamDescent] {
            let mut net = scalar_net(0.37);
            let g = grads(&net, 0.0);
            apply_update(&mut net, &g, 0.5, mode).unwrap();
            assert_eq!(net.params_flat(), vec![0.37, 0.0]);
        }
    }

    #[test]
    fn adam_matches_hand_stepped_trace() {
        // Constant gradient g = 0.5, lr = 0.1, default betas.
        let (b1, b2, eps, g, lr) = (0.9f64, 0.999f64, 1e-8, 0.5, 0.1);
        let mut expected = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        let mut trace = Vec::new();
        for t in 1..=3 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            expected -= lr * mh / (vh.sqrt() + eps);
            trace.push(expected);
        }
        // Bias-corrected Adam moves ~lr per step under a constant gradient.
        assert!((trace[0] - 0.9).abs() < 1e-6);

        let mut net = scalar_net(1.0);
        let mut opt = Optimizer::new(UpdateMode::AdamDescent);
        let pg = grads(&net, g);
        for want in trace {
            opt.step(&mut net, &pg, lr).unwrap();
            assert!((net.params_flat()[0] - want).abs() < 1e-14);
        }
        assert_eq!(opt.steps(), 3);
    }

    #[test]
    fn shape_mismatch_and_bad_rate_rejected() {
        let mut net = scalar_net(1.0);
        let other = Mlp::zeros(&[LayerSpec::new(2, 1, Activation::Identity)]).unwrap();
        let g = ParamGrads::zeros_like(&other);
        assert!(matches!(apply_update(&mut net, &g, 0.1, UpdateMode::SgdAscent), Err(Error::Shape(_))));
        let g = grads(&net, 1.0);
        assert!(matches!(apply_update(&mut net, &g, 0.0, UpdateMode::SgdAscent), Err(Error::Config(_))));
    }
}
