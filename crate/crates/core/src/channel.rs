//! Coordinator communication channel.
//!
//! Every agent compresses a local payload into an `m`-dimensional message with
//! its own encoder. The coordinator concatenates all `N` messages in agent
//! order and emits `N * g` values, sliced into one global signal per agent.
//! The whole path is differentiable so the protocol is learned end to end.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{chain, Activation, Mlp, ParamGrads, Tape};

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub agent_id: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalSignal {
    pub agent_id: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelDims {
    pub n_agents: usize,
    pub payload_dim: usize,
    pub message_dim: usize,
    pub signal_dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Channel {
    dims: ChannelDims,
    encoders: Vec<Mlp>,
    coordinator: Mlp,
    #[serde(skip)]
    calls: AtomicU64,
}

impl Clone for Channel {
    fn clone(&self) -> Self {
        Self {
            dims: self.dims,
            encoders: self.encoders.clone(),
            coordinator: self.coordinator.clone(),
            calls: AtomicU64::new(self.calls.load(Ordering::Relaxed)),
        }
    }
}

/// Everything needed to reverse one [`Channel::forward`] call.
#[derive(Debug, Clone)]
pub struct ChannelPass {
    pub messages: Vec<Message>,
    pub signals: Vec<GlobalSignal>,
    encoder_tapes: Vec<Tape>,
    coordinator_tape: Tape,
}

/// Parameter gradients for every channel network.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGrads {
    pub encoders: Vec<ParamGrads>,
    pub coordinator: ParamGrads,
}

impl ChannelGrads {
    pub fn zeros_like(channel: &Channel) -> Self {
        Self {
            encoders: channel.encoders.iter().map(ParamGrads::zeros_like).collect(),
            coordinator: ParamGrads::zeros_like(&channel.coordinator),
        }
    }

    pub fn add_assign(&mut self, other: &ChannelGrads) -> Result<()> {
        for (a, b) in self.encoders.iter_mut().zip(&other.encoders) {
            a.add_assign(b)?;
        }
        self.coordinator.add_assign(&other.coordinator)
    }

    pub fn scale(&mut self, c: f64) {
        self.encoders.iter_mut().for_each(|g| g.scale(c));
        self.coordinator.scale(c);
    }

    pub fn is_zero(&self) -> bool {
        self.encoders.iter().all(ParamGrads::is_zero) && self.coordinator.is_zero()
    }

    pub fn parts_mut(&mut self) -> Vec<&mut ParamGrads> {
        let mut v: Vec<&mut ParamGrads> = self.encoders.iter_mut().collect();
        v.push(&mut self.coordinator);
        v
    }
}

/// Runs `payload` through one encoder.
pub fn encode_local(encoder: &Mlp, agent_id: usize, payload: &[f64]) -> Result<(Message, Tape)> {
    let (values, tape) = encoder.forward(payload)?;
    Ok((Message { agent_id, values }, tape))
}

/// Maps all agents' messages onto per-agent global signals.
pub fn coordinate(coordinator: &Mlp, messages: &[Message], signal_dim: usize) -> Result<(Vec<GlobalSignal>, Tape)> {
    let n = messages.len();
    if n == 0 {
        return Err(Error::Protocol("no messages".into()));
    }
    for (i, m) in messages.iter().enumerate() {
        if m.agent_id != i {
            return Err(Error::Protocol(format!(
                "message slot {i} holds agent {}; expected one message per agent in order",
                m.agent_id
            )));
        }
    }
    let input: Vec<f64> = messages.iter().flat_map(|m| m.values.iter().copied()).collect();
    if input.len() != coordinator.in_dim() {
        return Err(Error::Protocol(format!(
            "coordinator expects {} message values, received {}",
            coordinator.in_dim(),
            input.len()
        )));
    }
    if coordinator.out_dim() != n * signal_dim {
        return shape_err("coordinator output is not N * signal_dim");
    }
    let (out, tape) = coordinator.forward(&input)?;
    let signals = out
        .chunks(signal_dim)
        .enumerate()
        .map(|(agent_id, c)| GlobalSignal {
            agent_id,
            values: c.to_vec(),
        })
        .collect();
    Ok((signals, tape))
}

impl Channel {
    pub fn new<R: Rng + ?Sized>(dims: ChannelDims, hidden: &[usize], hidden_act: Activation, rng: &mut R) -> Result<Self> {
        if dims.n_agents == 0 || dims.message_dim == 0 || dims.signal_dim == 0 || dims.payload_dim == 0 {
            return Err(Error::Config("channel dimensions must be positive".into()));
        }
        let enc_specs = chain(dims.payload_dim, hidden, hidden_act, dims.message_dim, Activation::Identity);
        let encoders = (0..dims.n_agents)
            .map(|_| Mlp::new(&enc_specs, rng))
            .collect::<Result<Vec<_>>>()?;
        let coord_specs = chain(
            dims.n_agents * dims.message_dim,
            hidden,
            hidden_act,
            dims.n_agents * dims.signal_dim,
            Activation::Identity,
        );
        let coordinator = Mlp::new(&coord_specs, rng)?;
        Ok(Self {
            dims,
            encoders,
            coordinator,
            calls: AtomicU64::new(0),
        })
    }

    pub fn from_parts(dims: ChannelDims, encoders: Vec<Mlp>, coordinator: Mlp) -> Result<Self> {
        if encoders.len() != dims.n_agents {
            return shape_err("one encoder per agent required");
        }
        for e in &encoders {
            if e.in_dim() != dims.payload_dim || e.out_dim() != dims.message_dim {
                return shape_err("encoder dims disagree with channel dims");
            }
        }
        if coordinator.in_dim() != dims.n_agents * dims.message_dim || coordinator.out_dim() != dims.n_agents * dims.signal_dim {
            return shape_err("coordinator dims disagree with channel dims");
        }
        Ok(Self {
            dims,
            encoders,
            coordinator,
            calls: AtomicU64::new(0),
        })
    }

    pub fn dims(&self) -> ChannelDims {
        self.dims
    }

    pub fn encoders(&self) -> &[Mlp] {
        &self.encoders
    }

    pub fn encoders_mut(&mut self) -> &mut [Mlp] {
        &mut self.encoders
    }

    pub fn coordinator(&self) -> &Mlp {
        &self.coordinator
    }

    pub fn coordinator_mut(&mut self) -> &mut Mlp {
        &mut self.coordinator
    }

    pub fn num_params(&self) -> usize {
        self.encoders.iter().map(Mlp::num_params).sum::<usize>() + self.coordinator.num_params()
    }

    /// Number of forward evaluations since construction.
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn forward(&self, payloads: &[&[f64]]) -> Result<ChannelPass> {
        if payloads.len() != self.dims.n_agents {
            return Err(Error::Protocol(format!(
                "channel built for {} agents received {} payloads",
                self.dims.n_agents,
                payloads.len()
            )));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut messages = Vec::with_capacity(payloads.len());
        let mut encoder_tapes = Vec::with_capacity(payloads.len());
        for (i, (enc, p)) in self.encoders.iter().zip(payloads).enumerate() {
            let (m, t) = encode_local(enc, i, p)?;
            messages.push(m);
            encoder_tapes.push(t);
        }
        let (signals, coordinator_tape) = coordinate(&self.coordinator, &messages, self.dims.signal_dim)?;
        Ok(ChannelPass {
            messages,
            signals,
            encoder_tapes,
            coordinator_tape,
        })
    }

    /// Exact reverse pass for `sum_i <signal_i, signal_grads_i> + <message_i, message_grads_i>`.
    ///
    /// `message_grads` carries gradients that reach a message directly rather
    /// than through the coordinator (a critic that also reads the local message).
    /// Returns parameter gradients (accumulated into `acc` when given) and the
    /// gradient with respect to every payload.
    pub fn backward(
        &self,
        pass: &ChannelPass,
        signal_grads: &[Vec<f64>],
        message_grads: Option<&[Vec<f64>]>,
        acc: Option<&mut ChannelGrads>,
    ) -> Result<Vec<Vec<f64>>> {
        let ChannelDims {
            n_agents,
            message_dim,
            signal_dim,
            ..
        } = self.dims;
        if signal_grads.len() != n_agents || signal_grads.iter().any(|g| g.len() != signal_dim) {
            return shape_err("signal gradients must be N vectors of signal_dim");
        }
        if let Some(mg) = message_grads {
            if mg.len() != n_agents || mg.iter().any(|g| g.len() != message_dim) {
                return shape_err("message gradients must be N vectors of message_dim");
            }
        }
        if pass.encoder_tapes.len() != n_agents {
            return Err(Error::Contract("pass was produced by a different channel".into()));
        }
        let flat: Vec<f64> = signal_grads.iter().flatten().copied().collect();
        let (mut coord_acc, mut enc_acc) = match acc {
            Some(a) => {
                let ChannelGrads { encoders, coordinator } = a;
                (Some(coordinator), Some(encoders))
            }
            None => (None, None),
        };
        let msg_grad = self
            .coordinator
            .backward_into(&pass.coordinator_tape, &flat, coord_acc.as_deref_mut())?;
        let mut payload_grads = Vec::with_capacity(n_agents);
        for i in 0..n_agents {
            let mut g = msg_grad[i * message_dim..(i + 1) * message_dim].to_vec();
            if let Some(mg) = message_grads {
                for (a, b) in g.iter_mut().zip(&mg[i]) {
                    *a += b;
                }
            }
            let slot = enc_acc.as_deref_mut().map(|e| &mut e[i]);
            payload_grads.push(self.encoders[i].backward_into(&pass.encoder_tapes[i], &g, slot)?);
        }
        Ok(payload_grads)
    }

    /// Reverse pass for a single agent's payload only (no parameter gradients).
    pub fn payload_grad(&self, pass: &ChannelPass, agent: usize, signal_grads: &[Vec<f64>], message_grad: Option<&[f64]>) -> Result<Vec<f64>> {
        let ChannelDims { message_dim, .. } = self.dims;
        let flat: Vec<f64> = signal_grads.iter().flatten().copied().collect();
        let msg_grad = self.coordinator.backward_into(&pass.coordinator_tape, &flat, None)?;
        let mut g = msg_grad[agent * message_dim..(agent + 1) * message_dim].to_vec();
        if let Some(mg) = message_grad {
            for (a, b) in g.iter_mut().zip(mg) {
                *a += b;
            }
        }
        self.encoders[agent].backward_into(&pass.encoder_tapes[agent], &g, None)
    }

    /// Exact gradients of `sum_i <signal_i, signal_grads_i>`.
    pub fn route_gradients(&self, pass: &ChannelPass, signal_grads: &[Vec<f64>]) -> Result<(ChannelGrads, Vec<Vec<f64>>)> {
        let mut acc = ChannelGrads::zeros_like(self);
        let payload = self.backward(pass, signal_grads, None, Some(&mut acc))?;
        Ok((acc, payload))
    }

    pub fn soft_update_from(&mut self, source: &Channel, tau: f64) -> Result<()> {
        for (d, s) in self.encoders.iter_mut().zip(&source.encoders) {
            d.soft_update_from(s, tau)?;
        }
        self.coordinator.soft_update_from(&source.coordinator, tau)
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.encoders.iter().flat_map(Mlp::params_flat).collect();
        v.extend(self.coordinator.params_flat());
        v
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return shape_err("channel parameter count mismatch");
        }
        let mut off = 0;
        for e in &mut self.encoders {
            let n = e.num_params();
            e.set_params_flat(&flat[off..off + n])?;
            off += n;
        }
        self.coordinator.set_params_flat(&flat[off..])
    }
}

impl ChannelGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.encoders.iter().flat_map(ParamGrads::to_flat).collect();
        v.extend(self.coordinator.to_flat());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(n: usize) -> ChannelDims {
        ChannelDims {
            n_agents: n,
            payload_dim: 4,
            message_dim: 2,
            signal_dim: 3,
        }
    }

    fn channel(n: usize, seed: u64) -> Channel {
        Channel::new(dims(n), &[6], Activation::Tanh, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn payloads(n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..4).map(|k| 0.3 * i as f64 - 0.2 * k as f64 + 0.1).collect())
            .collect()
    }

    fn refs(p: &[Vec<f64>]) -> Vec<&[f64]> {
        p.iter().map(|v| v.as_slice()).collect()
    }

    fn weights(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..3).map(|k| 1.0 + 0.3 * i as f64 - 0.4 * k as f64).collect()).collect()
    }

    fn objective(ch: &Channel, p: &[Vec<f64>], w: &[Vec<f64>]) -> f64 {
        let pass = ch.forward(&refs(p)).unwrap();
        pass.signals
            .iter()
            .zip(w)
            .map(|(s, wi)| s.values.iter().zip(wi).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    #[test]
    fn zero_encoder_emits_zero_message() {
        let enc = Mlp::zeros(&chain(4, &[3], Activation::Elu, 2, Activation::Identity)).unwrap();
        let (m, _) = encode_local(&enc, 0, &[5.0, -1.0, 2.0, 0.3]).unwrap();
        assert_eq!(m.values, vec![0.0, 0.0]);
    }

    #[test]
    fn encoding_equals_plain_forward() {
        let ch = channel(1, 3);
        let p = [0.4, 0.1, -0.6, 0.9];
        let (m, _) = encode_local(&ch.encoders()[0], 0, &p).unwrap();
        assert_eq!(m.values, ch.encoders()[0].predict(&p).unwrap());
        let (m2, _) = encode_local(&ch.encoders()[0], 0, &p).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn single_agent_signal_is_coordinator_of_message() {
        let ch = channel(1, 5);
        let p = payloads(1);
        let pass = ch.forward(&refs(&p)).unwrap();
        let direct = ch.coordinator().predict(&pass.messages[0].values).unwrap();
        assert_eq!(pass.signals[0].values, direct);
    }

    #[test]
    fn zero_coordinator_gives_zero_signals() {
        let mut ch = channel(2, 1);
        let n = ch.coordinator().num_params();
        ch.coordinator_mut().set_params_flat(&vec![0.0; n]).unwrap();
        let pass = ch.forward(&refs(&payloads(2))).unwrap();
        assert!(pass.signals.iter().all(|s| s.values.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn missing_or_misordered_messages_are_protocol_errors() {
        let ch = channel(3, 2);
        let p = payloads(2);
        assert!(matches!(ch.forward(&refs(&p)), Err(Error::Protocol(_))));
        let msgs = vec![
            Message { agent_id: 1, values: vec![0.0; 2] },
            Message { agent_id: 0, values: vec![0.0; 2] },
            Message { agent_id: 2, values: vec![0.0; 2] },
        ];
        assert!(matches!(coordinate(ch.coordinator(), &msgs, 3), Err(Error::Protocol(_))));
    }

    #[test]
    fn cross_agent_sensitivity_is_nonzero() {
        let ch = channel(3, 7);
        let p = payloads(3);
        let base = ch.forward(&refs(&p)).unwrap();
        let mut q = p.clone();
        q[2][1] += 1e-3;
        let moved = ch.forward(&refs(&q)).unwrap();
        let delta: f64 = base.signals[0]
            .values
            .iter()
            .zip(&moved.signals[0].values)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(delta > 1e-7);
    }

    #[test]
    fn zero_signal_grads_route_to_zero() {
        let ch = channel(2, 4);
        let p = payloads(2);
        let pass = ch.forward(&refs(&p)).unwrap();
        let (g, pg) = ch.route_gradients(&pass, &vec![vec![0.0; 3]; 2]).unwrap();
        assert!(g.is_zero());
        assert!(pg.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn single_agent_payload_grad_is_composition_of_backwards() {
        let ch = channel(1, 8);
        let p = payloads(1);
        let pass = ch.forward(&refs(&p)).unwrap();
        let sg = vec![vec![0.5, -1.0, 2.0]];
        let (_, pg) = ch.route_gradients(&pass, &sg).unwrap();

        let (msg, et) = ch.encoders()[0].forward(&p[0]).unwrap();
        let (_, ct) = ch.coordinator().forward(&msg).unwrap();
        let gm = ch.coordinator().backward(&ct, &sg[0]).unwrap().input;
        let gp = ch.encoders()[0].backward(&et, &gm).unwrap().input;
        assert_eq!(pg[0], gp);
    }

    #[test]
    fn every_parameter_and_payload_gradient_matches_finite_differences() {
        let ch = channel(3, 11);
        let p = payloads(3);
        let w = weights(3);
        let pass = ch.forward(&refs(&p)).unwrap();
        let (g, pg) = ch.route_gradients(&pass, &w).unwrap();
        let analytic = g.to_flat();
        let base = ch.params_flat();
        let eps = 1e-5;
        let mut probe = ch.clone();
        for i in 0..base.len() {
            let mut up = base.clone();
            up[i] += eps;
            probe.set_params_flat(&up).unwrap();
            let f_up = objective(&probe, &p, &w);
            up[i] -= 2.0 * eps;
            probe.set_params_flat(&up).unwrap();
            let f_dn = objective(&probe, &p, &w);
            let num = (f_up - f_dn) / (2.0 * eps);
            assert!((num - analytic[i]).abs() / num.abs().max(1.0) < 1e-4, "param {i}");
        }
        for j in 0..3 {
            for k in 0..4 {
                let mut up = p.clone();
                up[j][k] += eps;
                let mut dn = p.clone();
                dn[j][k] -= eps;
                let num = (objective(&ch, &up, &w) - objective(&ch, &dn, &w)) / (2.0 * eps);
                assert!((num - pg[j][k]).abs() / num.abs().max(1.0) < 1e-4);
            }
        }
    }

    #[test]
    fn per_pair_sensitivities_match_finite_differences() {
        // d(signal_i)/d(payload_j) for every (i, j) by selecting one signal at a time.
        let ch = channel(2, 21);
        let p = payloads(2);
        let pass = ch.forward(&refs(&p)).unwrap();
        for i in 0..2 {
            let mut w = vec![vec![0.0; 3]; 2];
            w[i] = vec![1.0, -0.5, 0.25];
            for j in 0..2 {
                let analytic = ch.payload_grad(&pass, j, &w, None).unwrap();
                for k in 0..4 {
                    let mut up = p.clone();
                    up[j][k] += 1e-5;
                    let mut dn = p.clone();
                    dn[j][k] -= 1e-5;
                    let num = (objective(&ch, &up, &w) - objective(&ch, &dn, &w)) / 2e-5;
                    assert!((num - analytic[k]).abs() / num.abs().max(1.0) < 1e-4);
                }
            }
        }
    }

    #[test]
    fn forward_counts_calls() {
        let ch = channel(2, 0);
        assert_eq!(ch.call_count(), 0);
        ch.forward(&refs(&payloads(2))).unwrap();
        assert_eq!(ch.call_count(), 1);
    }
}
