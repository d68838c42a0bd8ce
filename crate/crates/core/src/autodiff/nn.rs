//! Composite layers built from graph primitives.

use rand::Rng;

use crate::autodiff::graph::{Graph, Var};
use crate::autodiff::tensor::{Real, Tensor};
use crate::error::{contract, Result};

/// `w · x + b` for a matrix `w` (out × in) and vectors `x`, `b`.
pub fn linear<T: Real>(g: &Graph<T>, w: Var, b: Var, x: Var) -> Result<Var> {
    let y = matvec(g, w, x)?;
    g.add(y, b)
}

/// `w · x` for a matrix `w` and vector `x`, returned as a vector.
pub fn matvec<T: Real>(g: &Graph<T>, w: Var, x: Var) -> Result<Var> {
    let n = g.shape(x).iter().product::<usize>();
    let col = g.reshape(x, &[n, 1])?;
    let y = g.matmul(w, col)?;
    let out = g.shape(y)[0];
    g.reshape(y, &[out])
}

/// Layer normalization of a vector followed by elementwise gain and bias.
pub fn layer_norm<T: Real>(g: &Graph<T>, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = g.normalize(x)?;
    let scaled = g.mul(n, gain)?;
    g.add(scaled, bias)
}

/// Inverted dropout: during training each element survives with probability
/// `keep_prob` and survivors are scaled by `1 / keep_prob`. Identity otherwise.
pub fn dropout<T: Real, R: Rng + ?Sized>(
    g: &Graph<T>,
    x: Var,
    keep_prob: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return contract(format!("dropout: keep probability {keep_prob} outside (0, 1]"));
    }
    if !training || keep_prob == 1.0 {
        return Ok(x);
    }
    let shape = g.shape(x);
    let scale = T::lit(1.0 / keep_prob);
    let mask = Tensor::from_fn(shape, |_| {
        if rng.random::<f64>() < keep_prob {
            scale
        } else {
            T::zero()
        }
    });
    let mask = g.constant(mask);
    g.mul(x, mask)
}
