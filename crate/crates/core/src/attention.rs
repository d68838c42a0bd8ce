//! Soft attention over pooled search-feature patches.
//!
//! The search feature map is average-pooled with an `n × n` window at
//! stride 1, giving one `c`-vector per candidate template position. Each
//! vector is scored against the controller's previous hidden state,
//! `r_i = w_a · tanh(W_h h + W_f f_i + b)`, and the softmax of the scores
//! weights the vectors into the attended feature `a_t`.

use rand::Rng;

use crate::autodiff::nn::matvec;
use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{contract, Result};
use crate::init::fan_in_uniform;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<P> {
    /// `1 × d`
    pub w_a: P,
    /// `d × d_h`
    pub w_h: P,
    /// `d × c`
    pub w_f: P,
    /// `d`
    pub b: P,
}

impl<P> AttentionParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> AttentionParams<Q> {
        AttentionParams {
            w_a: f(&self.w_a),
            w_h: f(&self.w_h),
            w_f: f(&self.w_f),
            b: f(&self.b),
        }
    }

    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(String, &'a P)) {
        f("attention.w_a".into(), &self.w_a);
        f("attention.w_h".into(), &self.w_h);
        f("attention.w_f".into(), &self.w_f);
        f("attention.b".into(), &self.b);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, &mut P)) {
        f("attention.w_a".into(), &mut self.w_a);
        f("attention.w_h".into(), &mut self.w_h);
        f("attention.w_f".into(), &mut self.w_f);
        f("attention.b".into(), &mut self.b);
    }
}

impl AttentionParams<Tensor<f32>> {
    /// Attention width equals the controller hidden size.
    pub fn init<R: Rng + ?Sized>(channels: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w_a: fan_in_uniform(1, hidden, rng),
            w_h: fan_in_uniform(hidden, hidden, rng),
            w_f: fan_in_uniform(hidden, channels, rng),
            b: Tensor::zeros([hidden]),
        }
    }
}

/// `L` pooled patch vectors stacked as an `L × c` matrix.
#[derive(Clone, Copy, Debug)]
pub struct PatchGrid {
    pub vectors: Var,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn pool_patches<T: Real>(g: &Graph<T>, search_feat: Var, n: usize) -> Result<PatchGrid> {
    let pooled = g.avg_pool(search_feat, n, 1)?;
    let s = g.shape(pooled);
    let (rows, cols, channels) = (s[0], s[1], s[2]);
    let vectors = g.reshape(pooled, &[rows * cols, channels])?;
    Ok(PatchGrid {
        vectors,
        rows,
        cols,
        channels,
    })
}

/// Raw attention scores `r_i`, one per patch.
pub fn scores<T: Real>(g: &Graph<T>, grid: &PatchGrid, h_prev: Var, p: &AttentionParams<Var>) -> Result<Var> {
    let hp = matvec(g, p.w_h, h_prev)?;
    let hp = g.add(hp, p.b)?;
    let wf_t = g.transpose(p.w_f)?;
    let fp = g.matmul(grid.vectors, wf_t)?;
    let pre = g.add_last(fp, hp)?;
    let act = g.tanh(pre);
    let wa_t = g.transpose(p.w_a)?;
    let r = g.matmul(act, wa_t)?;
    g.reshape(r, &[grid.len()])
}

/// Softmax the scores and return `(a_t, alpha)`.
pub fn weigh<T: Real>(g: &Graph<T>, grid: &PatchGrid, scores: Var) -> Result<(Var, Var)> {
    if g.shape(scores) != [grid.len()] {
        return contract(format!("weigh: {} scores for {} patches", g.shape(scores)[0], grid.len()));
    }
    let alpha = g.softmax(scores)?;
    let row = g.reshape(alpha, &[1, grid.len()])?;
    let a = g.matmul(row, grid.vectors)?;
    Ok((g.reshape(a, &[grid.channels])?, alpha))
}

pub fn attend<T: Real>(g: &Graph<T>, grid: &PatchGrid, h_prev: Var, p: &AttentionParams<Var>) -> Result<(Var, Var)> {
    let r = scores(g, grid, h_prev, p)?;
    weigh(g, grid, r)
}

/// Plain average of the patch vectors (no attention).
pub fn attend_no_att<T: Real>(g: &Graph<T>, grid: &PatchGrid) -> Result<Var> {
    if grid.is_empty() {
        return contract("attend_no_att: empty patch grid");
    }
    let l = grid.len();
    let avg = g.constant(Tensor::full([1, l], T::one() / T::from_usize(l).unwrap()));
    let a = g.matmul(avg, grid.vectors)?;
    g.reshape(a, &[grid.channels])
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn bind(g: &Graph<f64>, p: &AttentionParams<Tensor<f32>>) -> AttentionParams<Var> {
        p.map(&mut |t| g.constant(t.cast()))
    }

    #[test]
    fn pool_patch_counts_and_means() {
        let g = Graph::<f64>::new();
        let f = g.constant(Tensor::full([7, 7, 3], 0.4));
        let grid = pool_patches(&g, f, 6).unwrap();
        assert_eq!(grid.len(), 4);
        let v = g.value(grid.vectors);
        assert!(v.data().iter().all(|&x| (x - 0.4).abs() < 1e-12));

        let mut m = Tensor::<f64>::zeros([7, 7, 2]);
        m.data_mut()[(3 * 7 + 0) * 2 + 1] = 9.0;
        let grid = pool_patches(&g, g.constant(m), 6).unwrap();
        let v = g.value(grid.vectors);
        // Cell (3, 0) lies only in windows with column offset 0.
        assert_eq!(v.at(&[0, 1]), 9.0 / 36.0);
        assert_eq!(v.at(&[1, 1]), 0.0);
        assert_eq!(v.at(&[2, 1]), 9.0 / 36.0);

        assert!(pool_patches(&g, f, 8).is_err());
    }

    #[test]
    fn identical_patches_give_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AttentionParams::init(3, 5, &mut rng);
        let g = Graph::<f64>::new();
        let pv = bind(&g, &p);
        let mut f = Tensor::<f64>::zeros([8, 8, 3]);
        for (i, v) in f.data_mut().iter_mut().enumerate() {
            *v = [0.2, -0.7, 1.1][i % 3];
        }
        let grid = pool_patches(&g, g.constant(f), 4).unwrap();
        let h = g.constant(Tensor::from_fn([5], |i| i as f64 * 0.1));
        let (a, alpha) = attend(&g, &grid, h, &pv).unwrap();
        for &w in g.value(alpha).data() {
            assert!((w - 1.0 / 25.0).abs() < 1e-12);
        }
        let a = g.value(a);
        assert!((a.data()[1] + 0.7).abs() < 1e-12);
    }

    #[test]
    fn zero_score_weights_reduce_to_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = AttentionParams::init(4, 6, &mut rng);
        p.w_a = Tensor::zeros([1, 6]);
        let g = Graph::<f64>::new();
        let pv = bind(&g, &p);
        let f = g.constant(Tensor::from_fn([9, 9, 4], |_| rng.random_range(-1.0..1.0)));
        let grid = pool_patches(&g, f, 6).unwrap();
        let h = g.constant(Tensor::from_fn([6], |_| rng.random_range(-1.0..1.0)));
        let (a, _) = attend(&g, &grid, h, &pv).unwrap();
        let avg = attend_no_att(&g, &grid).unwrap();
        assert!(g.value(a).max_abs_diff(&g.value(avg)) < 1e-12);
    }

    #[test]
    fn dominant_score_selects_patch() {
        let g = Graph::<f64>::new();
        let f = g.constant(Tensor::from_fn([3, 3, 2], |i| (i as f64 * 0.37).cos()));
        let grid = pool_patches(&g, f, 1).unwrap();
        let mut s = vec![0.0; 9];
        s[4] = 20.0;
        let (a, alpha) = weigh(&g, &grid, g.constant(Tensor::vector(s))).unwrap();
        assert!(g.value(alpha).data()[4] > 1.0 - 1e-7);
        let target = g.value(g.select(grid.vectors, 4).unwrap());
        assert!(g.value(a).max_abs_diff(&target) < 1e-6);
    }

    #[test]
    fn no_att_examples() {
        let g = Graph::<f64>::new();
        let one = g.constant(Tensor::from_fn([2, 2, 3], |i| i as f64));
        let grid = pool_patches(&g, one, 2).unwrap();
        let a = attend_no_att(&g, &grid).unwrap();
        assert_eq!(g.value(a), g.value(g.select(grid.vectors, 0).unwrap()));

        let opposite = Tensor::new([1, 2, 2], vec![1.0, -2.0, -1.0, 2.0]).unwrap();
        let grid = pool_patches(&g, g.constant(opposite), 1).unwrap();
        let a = attend_no_att(&g, &grid).unwrap();
        assert_eq!(g.value(a).data(), &[0.0, 0.0]);
    }
}
