//! Parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for a `rows × cols` matrix.
pub fn fan_in_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<f32> {
    let bound = 1.0 / (cols as f32).sqrt();
    Tensor::from_fn([rows, cols], |_| rng.random_range(-bound..bound))
}

/// Semi-orthogonal `rows × cols` matrix: orthonormal rows when
/// `rows <= cols`, orthonormal columns otherwise.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<f32> {
    let (k, len) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(k);
    while vecs.len() < k {
        let mut v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
        // Modified Gram-Schmidt, two passes for stability.
        for _ in 0..2 {
            for u in &vecs {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            vecs.push(v);
        }
    }
    Tensor::from_fn([rows, cols], |i| {
        let (r, c) = (i / cols, i % cols);
        if rows <= cols {
            vecs[r][c] as f32
        } else {
            vecs[c][r] as f32
        }
    })
}
