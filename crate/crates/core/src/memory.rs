//! External template memory: content-addressed reading, gated residual
//! combination, and the three-case write with allocation and erase.
//!
//! Slots are stored stacked as an `N × n × n × c` tensor. The access vector
//! only feeds an argmin, so it is always carried as a constant.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{contract, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub slots: usize,
    /// Decay `λ` of the access vector.
    pub access_decay: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            slots: 8,
            access_decay: 0.99,
        }
    }
}

/// Memory contents plus addressing history. `P` is a plain tensor between
/// frames and a graph handle while a frame is being processed.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState<P> {
    /// `N × n × n × c` stacked templates.
    pub slots: P,
    /// Access vector `w^u` (length `N`).
    pub access: P,
    pub last_read: P,
    pub last_write: P,
    /// Next slot for FIFO writes.
    pub cursor: usize,
    /// Number of slots holding a FIFO-written template.
    pub filled: usize,
}

impl<P> MemoryState<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> MemoryState<Q> {
        MemoryState {
            slots: f(&self.slots),
            access: f(&self.access),
            last_read: f(&self.last_read),
            last_write: f(&self.last_write),
            cursor: self.cursor,
            filled: self.filled,
        }
    }
}

impl<T: Real> MemoryState<Tensor<T>> {
    /// Zeroed slots and access; uniform last read.
    pub fn zeros(slots: usize, side: usize, channels: usize) -> Self {
        Self {
            slots: Tensor::zeros([slots, side, side, channels]),
            access: Tensor::zeros([slots]),
            last_read: Tensor::full([slots], T::one() / T::from_usize(slots).unwrap()),
            last_write: Tensor::zeros([slots]),
            cursor: 0,
            filled: 0,
        }
    }

    pub fn num_slots(&self) -> usize {
        self.slots.shape()[0]
    }
}

fn slot_dims<T: Real>(g: &Graph<T>, slots: Var) -> Result<(usize, usize)> {
    let s = g.shape(slots);
    if s.len() != 4 || s[0] == 0 {
        return contract(format!("memory: expected N×n×n×c slots, got {s:?}"));
    }
    Ok((s[0], s[1] * s[2] * s[3]))
}

/// Memory keys: global average pool of each slot, as an `N × c` matrix.
pub fn slot_keys<T: Real>(g: &Graph<T>, slots: Var) -> Result<Var> {
    let s = g.shape(slots);
    slot_dims(g, slots)?;
    let (n_slots, area, c) = (s[0], s[1] * s[2], s[3]);
    let inv = T::one() / T::from_usize(area).unwrap();
    let pool = Tensor::from_fn([n_slots, n_slots * area], |i| {
        let (row, col) = (i / (n_slots * area), i % (n_slots * area));
        if col / area == row {
            inv
        } else {
            T::zero()
        }
    });
    let flat = g.reshape(slots, &[n_slots * area, c])?;
    g.matmul(g.constant(pool), flat)
}

/// Cosine similarity of `key` against each row of `keys`.
pub fn similarities<T: Real>(g: &Graph<T>, keys: Var, key: Var) -> Result<Var> {
    let n = g.shape(keys)[0];
    let sims = (0..n)
        .map(|j| g.select(keys, j).and_then(|row| g.cosine(key, row)))
        .collect::<Result<Vec<_>>>()?;
    let stacked = g.stack(&sims)?;
    g.reshape(stacked, &[n])
}

/// `w^r(j) = softmax_j(β · C(k, key_j))`.
pub fn read_weights<T: Real>(g: &Graph<T>, keys: Var, key: Var, strength: Var) -> Result<Var> {
    let sims = similarities(g, keys, key)?;
    let scaled = g.mul_scalar(sims, strength)?;
    g.softmax(scaled)
}

/// `Σ_j w(j) · M(j)`.
pub fn read<T: Real>(g: &Graph<T>, slots: Var, weights: Var) -> Result<Var> {
    let s = g.shape(slots);
    let (n, size) = slot_dims(g, slots)?;
    if g.shape(weights) != [n] {
        return contract(format!("read: {:?} weights for {n} slots", g.shape(weights)));
    }
    let flat = g.reshape(slots, &[n, size])?;
    let row = g.reshape(weights, &[1, n])?;
    let out = g.matmul(row, flat)?;
    g.reshape(out, &s[1..])
}

/// Index of the slot whose key is most similar to `key`; ties pick the lowest index.
pub fn hard_read_index<T: Real>(g: &Graph<T>, keys: Var, key: Var) -> Result<usize> {
    let sims = similarities(g, keys, key)?;
    Ok(g.value(sims).argmax())
}

/// Single most similar slot, with its one-hot read weight.
pub fn hard_read<T: Real>(g: &Graph<T>, slots: Var, keys: Var, key: Var) -> Result<(Var, Var)> {
    let j = hard_read_index(g, keys, key)?;
    let n = g.shape(slots)[0];
    let onehot = g.constant(one_hot(n, j));
    Ok((g.select(slots, j)?, onehot))
}

/// `T_0 + r ⊙ T_retr`, with `r` scaling channels.
pub fn combine<T: Real>(g: &Graph<T>, initial: Var, retrieved: Var, residual: Var) -> Result<Var> {
    let gated = g.mul_last(retrieved, residual)?;
    g.add(initial, gated)
}

pub fn one_hot<T: Real>(n: usize, j: usize) -> Tensor<T> {
    Tensor::from_fn([n], |i| if i == j { T::one() } else { T::zero() })
}

/// One-hot at the least-used slot (argmin of the access vector, lowest index on ties).
pub fn allocation_weight<T: Real>(access: &Tensor<T>) -> Tensor<T> {
    one_hot(access.len(), access.argmin())
}

/// `w^w = g^w·0 + g^r·w^r + g^a·w^a`.
pub fn write_weight<T: Real>(g: &Graph<T>, gates: Var, read_w: Var, alloc_w: Var) -> Result<Var> {
    if g.shape(gates) != [3] {
        return contract(format!("write_weight: gates shape {:?}", g.shape(gates)));
    }
    let gr = g.element(gates, 1)?;
    let ga = g.element(gates, 2)?;
    g.add(g.mul_scalar(read_w, gr)?, g.mul_scalar(alloc_w, ga)?)
}

/// `w^u = λ·w^u_prev + w^r + w^w`, as a constant.
pub fn update_access<T: Real>(
    g: &Graph<T>,
    prev: Var,
    read_w: Var,
    write_w: Var,
    decay: f64,
) -> Result<Var> {
    if !(decay > 0.0 && decay < 1.0) {
        return contract(format!("update_access: decay {decay} outside (0, 1)"));
    }
    let prev = g.value(prev);
    let (r, w) = (g.value(read_w), g.value(write_w));
    let lam = T::lit(decay);
    let out = prev.zip_map(&r, |p, r| lam * p + r)?.zip_map(&w, |a, w| a + w)?;
    Ok(g.constant(out))
}

/// Erase factor `e^w = d^r·g^r + g^a`.
pub fn erase_factor<T: Real>(g: &Graph<T>, gates: Var, decay: Var) -> Result<Var> {
    let gr = g.element(gates, 1)?;
    let ga = g.element(gates, 2)?;
    g.add(g.mul(decay, gr)?, ga)
}

/// `M'(j) = M(j)·(1 − w^w(j)·e^w) + w^w(j)·e^w·T_new`, evaluated as
/// `M(j) + w^w(j)·e^w·(T_new − M(j))`.
pub fn write<T: Real>(g: &Graph<T>, slots: Var, write_w: Var, gates: Var, decay: Var, new: Var) -> Result<Var> {
    let s = g.shape(slots);
    slot_dims(g, slots)?;
    if g.shape(new) != s[1..] {
        return contract(format!("write: template {:?} for slots {s:?}", g.shape(new)));
    }
    let erase = erase_factor(g, gates, decay)?;
    let coef = g.mul_scalar(write_w, erase)?;
    blend(g, slots, coef, new)
}

/// `M(j) + coef(j)·(T_new − M(j))` for every slot.
fn blend<T: Real>(g: &Graph<T>, slots: Var, coef: Var, new: Var) -> Result<Var> {
    let s = g.shape(slots);
    let (n, size) = slot_dims(g, slots)?;
    let tiled = g.stack(&vec![new; n])?;
    let diff = g.reshape(g.sub(tiled, slots)?, &[n, size])?;
    let scaled = g.transpose(g.mul_last(g.transpose(diff)?, coef)?)?;
    let delta = g.reshape(scaled, &s)?;
    g.add(slots, delta)
}

/// FIFO write: store `new` at the cursor, overwriting the oldest template.
pub fn queue_write<T: Real>(g: &Graph<T>, mem: &MemoryState<Var>, new: Var) -> Result<MemoryState<Var>> {
    let s = g.shape(mem.slots);
    let (n, _) = slot_dims(g, mem.slots)?;
    if g.shape(new) != s[1..] {
        return contract(format!("queue_write: template {:?} for slots {s:?}", g.shape(new)));
    }
    let w = g.constant(one_hot(n, mem.cursor));
    let mut out = mem.clone();
    out.slots = blend(g, mem.slots, w, new)?;
    out.last_write = w;
    out.cursor = (mem.cursor + 1) % n;
    out.filled = (mem.filled + 1).min(n);
    Ok(out)
}

/// FIFO read: mean of the occupied slots (zero template when empty).
pub fn queue_read<T: Real>(g: &Graph<T>, mem: &MemoryState<Var>) -> Result<(Var, Var)> {
    let (n, _) = slot_dims(g, mem.slots)?;
    let w = if mem.filled == 0 {
        Tensor::zeros([n])
    } else {
        let inv = T::one() / T::from_usize(mem.filled).unwrap();
        Tensor::from_fn([n], |i| if i < mem.filled { inv } else { T::zero() })
    };
    let w = g.constant(w);
    Ok((read(g, mem.slots, w)?, w))
}
