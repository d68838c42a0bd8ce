//! Layer-normalized LSTM controller and its control-signal heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{dropout, linear};
use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{contract, Result};
use crate::init::{fan_in_uniform, orthogonal};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub hidden: usize,
    /// Dropout retain probability on the emitted hidden state.
    pub keep_prob: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            keep_prob: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerParams<P> {
    pub init_h_w: P,
    pub init_h_b: P,
    pub init_c_w: P,
    pub init_c_b: P,
    /// `4·d_h × (c + d_h)`, gate blocks in order input, forget, output, candidate.
    pub lstm_w: P,
    pub ln_gain: P,
    pub ln_bias: P,
    pub key_w: P,
    pub key_b: P,
    pub strength_w: P,
    pub strength_b: P,
    pub residual_w: P,
    pub residual_b: P,
    pub gate_w: P,
    pub gate_b: P,
    pub decay_w: P,
    pub decay_b: P,
}

macro_rules! controller_fields {
    ($m:ident) => {
        $m!(init_h_w, init_h_b, init_c_w, init_c_b, lstm_w, ln_gain, ln_bias, key_w, key_b,
            strength_w, strength_b, residual_w, residual_b, gate_w, gate_b, decay_w, decay_b)
    };
}

impl<P> ControllerParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> ControllerParams<Q> {
        macro_rules! build {
            ($($field:ident),*) => { ControllerParams { $($field: f(&self.$field)),* } };
        }
        controller_fields!(build)
    }

    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(String, &'a P)) {
        macro_rules! visit {
            ($($field:ident),*) => {{ $(f(concat!("controller.", stringify!($field)).into(), &self.$field);)* }};
        }
        controller_fields!(visit)
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, &mut P)) {
        macro_rules! visit {
            ($($field:ident),*) => {{ $(f(concat!("controller.", stringify!($field)).into(), &mut self.$field);)* }};
        }
        controller_fields!(visit)
    }
}

impl ControllerParams<Tensor<f32>> {
    /// Orthogonal LSTM weights, forget-gate bias 1, other biases 0.
    pub fn init<R: Rng + ?Sized>(channels: usize, hidden: usize, rng: &mut R) -> Self {
        let inputs = channels + hidden;
        let mut lstm = Vec::with_capacity(4 * hidden * inputs);
        for _ in 0..4 {
            lstm.extend(orthogonal(hidden, inputs, rng).into_data());
        }
        let mut ln_bias = Tensor::zeros([4 * hidden]);
        ln_bias.data_mut()[hidden..2 * hidden].fill(1.0);
        Self {
            init_h_w: fan_in_uniform(hidden, channels, rng),
            init_h_b: Tensor::zeros([hidden]),
            init_c_w: fan_in_uniform(hidden, channels, rng),
            init_c_b: Tensor::zeros([hidden]),
            lstm_w: Tensor::new([4 * hidden, inputs], lstm).expect("lstm shape"),
            ln_gain: Tensor::full([4 * hidden], 1.0),
            ln_bias,
            key_w: fan_in_uniform(channels, hidden, rng),
            key_b: Tensor::zeros([channels]),
            strength_w: fan_in_uniform(1, hidden, rng),
            strength_b: Tensor::zeros([1]),
            residual_w: fan_in_uniform(channels, hidden, rng),
            residual_b: Tensor::zeros([channels]),
            gate_w: fan_in_uniform(3, hidden, rng),
            gate_b: Tensor::zeros([3]),
            decay_w: fan_in_uniform(1, hidden, rng),
            decay_b: Tensor::zeros([1]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerState<P> {
    pub h: P,
    pub c: P,
}

impl<P> ControllerState<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> ControllerState<Q> {
        ControllerState {
            h: f(&self.h),
            c: f(&self.c),
        }
    }
}

/// Per-step outputs of the controller heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSignals<P> {
    /// Read key `k_t` (length `c`).
    pub key: P,
    /// Read strength `β_t ≥ 1` (scalar).
    pub strength: P,
    /// Channel-wise residual gate `r_t ∈ (0, 1)^c`.
    pub residual: P,
    /// `[g^w, g^r, g^a]` on the 3-simplex.
    pub gates: P,
    /// Decay rate `d^r ∈ (0, 1)` (scalar).
    pub decay: P,
}

impl<P> ControlSignals<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> ControlSignals<Q> {
        ControlSignals {
            key: f(&self.key),
            strength: f(&self.strength),
            residual: f(&self.residual),
            gates: f(&self.gates),
            decay: f(&self.decay),
        }
    }
}

/// Initial `(h_0, c_0)` from the initial template: global average pool,
/// then two separate tanh fully-connected layers.
pub fn init_state<T: Real>(g: &Graph<T>, p: &ControllerParams<Var>, template: Var) -> Result<ControllerState<Var>> {
    let s = g.shape(template);
    if s.len() != 3 || s[0] != s[1] {
        return contract(format!("init_state: expected an n×n×c template, got {s:?}"));
    }
    let pooled = g.avg_pool(template, s[0], s[0])?;
    let v = g.reshape(pooled, &[s[2]])?;
    let h = linear(g, p.init_h_w, p.init_h_b, v)?;
    let c = linear(g, p.init_c_w, p.init_c_b, v)?;
    Ok(ControllerState {
        h: g.tanh(h),
        c: g.tanh(c),
    })
}

/// One LSTM step. Returns the new recurrent state and the hidden output
/// handed to the heads (dropout applied to the latter only when training).
pub fn step<T: Real, R: Rng + ?Sized>(
    g: &Graph<T>,
    p: &ControllerParams<Var>,
    cfg: &ControllerConfig,
    input: Var,
    state: &ControllerState<Var>,
    training: bool,
    rng: &mut R,
) -> Result<(ControllerState<Var>, Var)> {
    let d = g.shape(state.h)[0];
    let x = g.concat(&[input, state.h])?;
    let zero = g.constant(Tensor::zeros([4 * d]));
    let pre = linear(g, p.lstm_w, zero, x)?;
    let blocks = (0..4)
        .map(|i| g.slice(pre, i * d, d).and_then(|b| g.normalize(b)))
        .collect::<Result<Vec<_>>>()?;
    let normed = g.concat(&blocks)?;
    let normed = g.add(g.mul(normed, p.ln_gain)?, p.ln_bias)?;
    let gate = |i: usize| g.slice(normed, i * d, d);
    let i_gate = g.sigmoid(gate(0)?);
    let f_gate = g.sigmoid(gate(1)?);
    let o_gate = g.sigmoid(gate(2)?);
    let cand = g.tanh(gate(3)?);
    let c = g.add(g.mul(f_gate, state.c)?, g.mul(i_gate, cand)?)?;
    let h = g.mul(o_gate, g.tanh(c))?;
    let out = dropout(g, h, cfg.keep_prob, training, rng)?;
    Ok((ControllerState { h, c }, out))
}

pub fn emit_signals<T: Real>(g: &Graph<T>, p: &ControllerParams<Var>, h: Var) -> Result<ControlSignals<Var>> {
    let key = linear(g, p.key_w, p.key_b, h)?;
    let s = linear(g, p.strength_w, p.strength_b, h)?;
    let strength = g.reshape(g.offset(g.softplus(s), T::one()), &[])?;
    let residual = g.sigmoid(linear(g, p.residual_w, p.residual_b, h)?);
    let gates = g.softmax(linear(g, p.gate_w, p.gate_b, h)?)?;
    let dr = linear(g, p.decay_w, p.decay_b, h)?;
    let decay = g.reshape(g.sigmoid(dr), &[])?;
    Ok(ControlSignals {
        key,
        strength,
        residual,
        gates,
        decay,
    })
}
