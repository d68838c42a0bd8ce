//! Finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::graph::{Graph, Var};
use crate::autodiff::nn::{layer_norm, linear};
use crate::autodiff::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Check at most this many coordinates per input, chosen at random.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

/// Relative disagreement between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

/// Compare reverse-mode gradients of the scalar built by `f` against
/// central differences, over every coordinate of every input.
pub fn grad_check<F>(inputs: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    Ok(grad_check_with(inputs, &GradCheckOptions::default(), f)?.max_rel_error)
}

pub fn grad_check_with<F>(inputs: &[Tensor<f64>], opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&g, &vars)?;
        Ok(g.value(out).item())
    };

    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let loss = f(&g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get(v)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < input.len() => sample(&mut rng, input.len(), k).into_vec(),
            _ => (0..input.len()).collect(),
        };
        for j in coords {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + opts.eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - opts.eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let err = relative_error(analytic[i].data()[j], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}

/// Random values bounded away from zero so relu kinks sit outside the
/// finite-difference stencil.
fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let mag = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            mag
        } else {
            -mag
        }
    })
}

type OpBuilder = fn(&Graph<f64>, &[Var]) -> Result<Var>;

/// Every differentiable primitive, each reduced to a scalar through a fixed
/// random projection so that all output coordinates matter.
pub fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, OpBuilder)> {
    let (m, k, p) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
    let n = rng.random_range(2..6);
    let (h, w, c) = (rng.random_range(3..6), rng.random_range(3..6), rng.random_range(1..3));
    let mut r = |s: &[usize]| rand_tensor(rng, s);
    vec![
        ("add", vec![r(&[n]), r(&[n]), r(&[n])], |g, v| project(g, g.add(v[0], v[1])?, v[2])),
        ("sub", vec![r(&[n]), r(&[n]), r(&[n])], |g, v| project(g, g.sub(v[0], v[1])?, v[2])),
        ("mul", vec![r(&[n]), r(&[n]), r(&[n])], |g, v| project(g, g.mul(v[0], v[1])?, v[2])),
        ("tanh", vec![r(&[n]), r(&[n])], |g, v| project(g, g.tanh(v[0]), v[1])),
        ("sigmoid", vec![r(&[n]), r(&[n])], |g, v| project(g, g.sigmoid(v[0]), v[1])),
        ("relu", vec![r(&[n]), r(&[n])], |g, v| project(g, g.relu(v[0]), v[1])),
        ("softplus", vec![r(&[n]), r(&[n])], |g, v| project(g, g.softplus(v[0]), v[1])),
        ("affine", vec![r(&[n]), r(&[n])], |g, v| project(g, g.affine(v[0], -1.7, 0.3), v[1])),
        ("mul_scalar", vec![r(&[n]), r(&[]), r(&[n])], |g, v| project(g, g.mul_scalar(v[0], v[1])?, v[2])),
        ("add_last", vec![r(&[h, c]), r(&[c]), r(&[h, c])], |g, v| project(g, g.add_last(v[0], v[1])?, v[2])),
        ("mul_last", vec![r(&[h, w, c]), r(&[c]), r(&[h, w, c])], |g, v| {
            project(g, g.mul_last(v[0], v[1])?, v[2])
        }),
        ("matmul", vec![r(&[m, k]), r(&[k, p]), r(&[m, p])], |g, v| project(g, g.matmul(v[0], v[1])?, v[2])),
        ("transpose", vec![r(&[m, k]), r(&[k, m])], |g, v| project(g, g.transpose(v[0])?, v[1])),
        ("softmax", vec![r(&[n]), r(&[n])], |g, v| project(g, g.softmax(v[0])?, v[1])),
        ("avg_pool", vec![r(&[h, w, c]), r(&[h - 1, w - 1, c])], |g, v| {
            project(g, g.avg_pool(v[0], 2, 1)?, v[1])
        }),
        ("max_pool", vec![r(&[4, 4, c]), r(&[2, 2, c])], |g, v| project(g, g.max_pool(v[0], 2, 2)?, v[1])),
        ("conv2d", vec![r(&[h, w, c]), r(&[2, 2, c, 3]), r(&[h - 1, w - 1, 3])], |g, v| {
            project(g, g.conv2d(v[0], v[1], 1)?, v[2])
        }),
        ("conv2d_stride2", vec![r(&[5, 5, c]), r(&[3, 3, c, 2]), r(&[2, 2, 2])], |g, v| {
            project(g, g.conv2d(v[0], v[1], 2)?, v[2])
        }),
        ("cosine", vec![r(&[n]), r(&[n])], |g, v| g.cosine(v[0], v[1])),
        ("normalize", vec![r(&[n]), r(&[n])], |g, v| project(g, g.normalize(v[0])?, v[1])),
        ("layer_norm", vec![r(&[n]), r(&[n]), r(&[n]), r(&[n])], |g, v| {
            project(g, layer_norm(g, v[0], v[1], v[2])?, v[3])
        }),
        ("concat", vec![r(&[n]), r(&[2]), r(&[n + 2])], |g, v| project(g, g.concat(&[v[0], v[1]])?, v[2])),
        ("stack", vec![r(&[n]), r(&[n]), r(&[2, n])], |g, v| project(g, g.stack(&[v[0], v[1]])?, v[2])),
        ("select", vec![r(&[3, n]), r(&[n])], |g, v| project(g, g.select(v[0], 1)?, v[1])),
        ("slice", vec![r(&[n + 2]), r(&[2])], |g, v| project(g, g.slice(v[0], 1, 2)?, v[1])),
        ("mean", vec![r(&[n])], |g, v| Ok(g.mean(g.mul(v[0], v[0])?))),
        ("linear", vec![r(&[m, k]), r(&[m]), r(&[k]), r(&[m])], |g, v| {
            project(g, linear(g, v[0], v[1], v[2])?, v[3])
        }),
    ]
}

fn project(g: &Graph<f64>, y: Var, weights: Var) -> Result<Var> {
    let w = g.reshape(weights, &g.shape(y))?;
    Ok(g.sum(g.mul(y, w)?))
}

/// Grad-check every primitive over `trials` random shapes; returns the
/// worst relative error seen for each op.
pub fn check_ops(trials: usize, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for _ in 0..trials {
        for (name, inputs, f) in op_cases(&mut rng) {
            let err = grad_check(&inputs, f)?;
            match worst.iter_mut().find(|(n, _)| *n == name) {
                Some(slot) => slot.1 = slot.1.max(err),
                None => worst.push((name, err)),
            }
        }
    }
    Ok(worst)
}
