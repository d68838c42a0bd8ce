//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, so the tape is topologically sorted by construction. Calling
//! [`Graph::backward`] on a scalar node sweeps the tape once in reverse.
//!
//! Nodes whose inputs are all constants store no backward rule, so a graph
//! built purely from constants (inference) keeps values only.

use std::cell::{Ref, RefCell};

use crate::autodiff::tensor::{Real, Tensor};
use crate::error::{contract, Result};

/// Guard on the product of norms in cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;
/// Variance floor used by layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Relu,
    Softplus,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    MulScalar(Var, Var),
    AddLast(Var, Var),
    MulLast(Var, Var),
    Unary(Var, Unary),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    AvgPool {
        x: Var,
        window: usize,
        stride: usize,
    },
    MaxPool {
        x: Var,
        picks: Vec<usize>,
    },
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
    },
    Cosine {
        x: Var,
        y: Var,
    },
    Normalize {
        x: Var,
        inv_std: T,
    },
    Sum(Var),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not
    /// contribute to the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn shape_err<T>(op: &str, a: &[usize], b: &[usize]) -> Result<T> {
    contract(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|v| nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Copy of `v`'s value as a new constant, cutting gradient flow.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value_ref(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn binary(&self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
        if x.shape() != y.shape() {
            return shape_err(name, x.shape(), y.shape());
        }
        x.zip_map(y, f)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// `scale * x + offset` with constant coefficients.
    pub fn affine(&self, x: Var, scale: T, offset: T) -> Var {
        let v = self.nodes.borrow()[x.0].value.map(|e| scale * e + offset);
        self.push(v, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&self, x: Var, k: T) -> Var {
        self.affine(x, k, T::zero())
    }

    pub fn offset(&self, x: Var, k: T) -> Var {
        self.affine(x, T::one(), k)
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    /// Multiply every element of `x` by the single-element tensor `s`.
    pub fn mul_scalar(&self, x: Var, s: Var) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let sv = &nodes[s.0].value;
            if sv.len() != 1 {
                return contract(format!("mul_scalar: factor has shape {:?}", sv.shape()));
            }
            let k = sv.item();
            nodes[x.0].value.map(|e| e * k)
        };
        Ok(self.push(v, Op::MulScalar(x, s), &[x, s]))
    }

    fn last_dim_check(&self, x: Var, v: Var, name: &str) -> Result<()> {
        let nodes = self.nodes.borrow();
        let (xs, vs) = (nodes[x.0].value.shape(), nodes[v.0].value.shape());
        if vs.len() != 1 || xs.last() != Some(&vs[0]) {
            return shape_err(name, xs, vs);
        }
        Ok(())
    }

    /// Broadcast-add a vector along the last axis of `x`.
    pub fn add_last(&self, x: Var, v: Var) -> Result<Var> {
        self.last_dim_check(x, v, "add_last")?;
        let out = {
            let nodes = self.nodes.borrow();
            let (xv, vv) = (&nodes[x.0].value, nodes[v.0].value.data());
            let c = vv.len();
            let mut out = xv.clone();
            for row in out.data_mut().chunks_mut(c) {
                for (o, &b) in row.iter_mut().zip(vv) {
                    *o += b;
                }
            }
            out
        };
        Ok(self.push(out, Op::AddLast(x, v), &[x, v]))
    }

    /// Broadcast-multiply a vector along the last axis of `x` (channel-wise scaling).
    pub fn mul_last(&self, x: Var, v: Var) -> Result<Var> {
        self.last_dim_check(x, v, "mul_last")?;
        let out = {
            let nodes = self.nodes.borrow();
            let (xv, vv) = (&nodes[x.0].value, nodes[v.0].value.data());
            let c = vv.len();
            let mut out = xv.clone();
            for row in out.data_mut().chunks_mut(c) {
                for (o, &b) in row.iter_mut().zip(vv) {
                    *o *= b;
                }
            }
            out
        };
        Ok(self.push(out, Op::MulLast(x, v), &[x, v]))
    }

    pub fn unary(&self, x: Var, kind: Unary) -> Var {
        let v = self.nodes.borrow()[x.0].value.map(|e| match kind {
            Unary::Tanh => e.tanh(),
            Unary::Sigmoid => sigmoid(e),
            Unary::Relu => e.max(T::zero()),
            Unary::Softplus => softplus(e),
        });
        self.push(v, Op::Unary(x, kind), &[x])
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn softplus(&self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (av.shape(), bv.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return shape_err("matmul", sa, sb);
            }
            let (m, k, p) = (sa[0], sa[1], sb[1]);
            let mut out = vec![T::zero(); m * p];
            matmul_into(av.data(), bv.data(), &mut out, m, k, p);
            Tensor::new([m, p], out)?
        };
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if xv.rank() != 2 {
                return contract(format!("transpose: expected a matrix, got {:?}", xv.shape()));
            }
            let (r, c) = (xv.shape()[0], xv.shape()[1]);
            transpose2(xv.data(), r, c, [c, r])
        };
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Numerically stable softmax over a 1-D tensor.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if xv.rank() != 1 || xv.is_empty() {
                return contract(format!("softmax: expected a nonempty vector, got {:?}", xv.shape()));
            }
            Tensor::vector(softmax_values(xv.data()))
        };
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// Average pooling over `window × window` blocks of an `h × w × c` map.
    pub fn avg_pool(&self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (h, w, c) = hwc(xv.shape(), "avg_pool")?;
            let (oh, ow) = pooled_dims(h, w, window, window, stride, "avg_pool")?;
            let inv = T::one() / T::from_usize(window * window).unwrap();
            let mut out = vec![T::zero(); oh * ow * c];
            let xd = xv.data();
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = &mut out[(oy * ow + ox) * c..][..c];
                    for ky in 0..window {
                        for kx in 0..window {
                            let base = ((oy * stride + ky) * w + ox * stride + kx) * c;
                            for (acc, &e) in o.iter_mut().zip(&xd[base..base + c]) {
                                *acc += e;
                            }
                        }
                    }
                    for acc in o.iter_mut() {
                        *acc *= inv;
                    }
                }
            }
            Tensor::new([oh, ow, c], out)?
        };
        Ok(self.push(out, Op::AvgPool { x, window, stride }, &[x]))
    }

    /// Max pooling over `window × window` blocks of an `h × w × c` map.
    pub fn max_pool(&self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (out, picks) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (h, w, c) = hwc(xv.shape(), "max_pool")?;
            let (oh, ow) = pooled_dims(h, w, window, window, stride, "max_pool")?;
            let xd = xv.data();
            let mut out = Vec::with_capacity(oh * ow * c);
            let mut picks = Vec::with_capacity(oh * ow * c);
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = ((oy * stride) * w + ox * stride) * c + ch;
                        for ky in 0..window {
                            for kx in 0..window {
                                let i = ((oy * stride + ky) * w + ox * stride + kx) * c + ch;
                                if xd[i] > xd[best] {
                                    best = i;
                                }
                            }
                        }
                        out.push(xd[best]);
                        picks.push(best);
                    }
                }
            }
            (Tensor::new([oh, ow, c], out)?, picks)
        };
        Ok(self.push(out, Op::MaxPool { x, picks }, &[x]))
    }

    /// Valid (unpadded) 2-D convolution of an `h × w × cin` map with
    /// `kh × kw × cin × cout` kernels.
    pub fn conv2d(&self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (xv, kv) = (&nodes[x.0].value, &nodes[k.0].value);
            let (h, w, ci) = hwc(xv.shape(), "conv2d")?;
            let ks = kv.shape();
            if ks.len() != 4 || ks[2] != ci {
                return shape_err("conv2d", xv.shape(), ks);
            }
            let (kh, kw, co) = (ks[0], ks[1], ks[3]);
            let (oh, ow) = pooled_dims(h, w, kh, kw, stride, "conv2d")?;
            let mut out = vec![T::zero(); oh * ow * co];
            let (xd, kd) = (xv.data(), kv.data());
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = &mut out[(oy * ow + ox) * co..][..co];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let xrow = &xd[((oy * stride + ky) * w + ox * stride + kx) * ci..][..ci];
                            let krow = &kd[(ky * kw + kx) * ci * co..][..ci * co];
                            for (&xe, kcol) in xrow.iter().zip(krow.chunks_exact(co)) {
                                for (acc, &ke) in o.iter_mut().zip(kcol) {
                                    *acc += xe * ke;
                                }
                            }
                        }
                    }
                }
            }
            Tensor::new([oh, ow, co], out)?
        };
        Ok(self.push(out, Op::Conv2d { x, k, stride }, &[x, k]))
    }

    /// Cosine similarity of two equal-length tensors; the denominator is
    /// floored at [`COSINE_EPS`] so a zero vector yields 0.
    pub fn cosine(&self, x: Var, y: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (xv, yv) = (&nodes[x.0].value, &nodes[y.0].value);
            if xv.len() != yv.len() {
                return shape_err("cosine", xv.shape(), yv.shape());
            }
            let (dot, nx, ny) = dot_norms(xv.data(), yv.data());
            let denom = (nx * ny).max(T::lit(COSINE_EPS));
            Tensor::scalar(dot / denom)
        };
        Ok(self.push(out, Op::Cosine { x, y }, &[x, y]))
    }

    /// Zero-mean, unit-variance normalization of a vector.
    pub fn normalize(&self, x: Var) -> Result<Var> {
        let (out, inv_std) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if xv.rank() != 1 || xv.len() < 2 {
                return contract(format!("normalize: need a vector of length >= 2, got {:?}", xv.shape()));
            }
            let n = T::from_usize(xv.len()).unwrap();
            let mean = xv.sum() / n;
            let var = xv.data().iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / n;
            let inv_std = T::one() / (var + T::lit(LAYER_NORM_EPS)).sqrt();
            (xv.map(|e| (e - mean) * inv_std), inv_std)
        };
        Ok(self.push(out, Op::Normalize { x, inv_std }, &[x]))
    }

    pub fn sum(&self, x: Var) -> Var {
        let v = Tensor::scalar(self.nodes.borrow()[x.0].value.sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.nodes.borrow()[x.0].value.len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    /// Flattened concatenation.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return contract("concat: no inputs");
        }
        let out = {
            let nodes = self.nodes.borrow();
            let data: Vec<T> = parts
                .iter()
                .flat_map(|p| nodes[p.0].value.data().iter().copied())
                .collect();
            Tensor::vector(data)
        };
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return contract("stack: no inputs");
        }
        let out = {
            let nodes = self.nodes.borrow();
            let inner = nodes[parts[0].0].value.shape().to_vec();
            let mut data = Vec::with_capacity(parts.len() * nodes[parts[0].0].value.len());
            for p in parts {
                let v = &nodes[p.0].value;
                if v.shape() != inner.as_slice() {
                    return shape_err("stack", &inner, v.shape());
                }
                data.extend_from_slice(v.data());
            }
            let mut shape = vec![parts.len()];
            shape.extend(inner);
            Tensor::new(shape, data)?
        };
        Ok(self.push(out, Op::Stack(parts.to_vec()), parts))
    }

    /// Contiguous range of the flattened data, returned as a vector.
    pub fn slice(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if start + len > xv.len() || len == 0 {
                return contract(format!(
                    "slice: range {start}..{} outside length {}",
                    start + len,
                    xv.len()
                ));
            }
            Tensor::vector(xv.data()[start..start + len].to_vec())
        };
        Ok(self.push(out, Op::Slice { x, start }, &[x]))
    }

    /// The `i`-th element of `x` as a scalar.
    pub fn element(&self, x: Var, i: usize) -> Result<Var> {
        let v = self.slice(x, i, 1)?;
        self.reshape(v, &[])
    }

    /// The `i`-th sub-tensor along the leading axis.
    pub fn select(&self, x: Var, i: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape.is_empty() || i >= shape[0] {
            return contract(format!("select: index {i} outside shape {shape:?}"));
        }
        let inner: usize = shape[1..].iter().product();
        let flat = self.slice(x, i * inner, inner)?;
        self.reshape(flat, &shape[1..])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                nodes[loss.0].value.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn backprop<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    let needs = |v: Var| nodes[v.0].requires_grad;
    // Accumulate into the gradient buffer of `v`, allocating it lazily.
    let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
        if !nodes[v.0].requires_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
        f(buf);
    };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(*a, &mut |d| add_into(d, g));
            acc(*b, &mut |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            acc(*a, &mut |d| add_into(d, g));
            acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc(*a, &mut |d| {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(bv) {
                    *d += g * y;
                }
            });
            acc(*b, &mut |d| {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(av) {
                    *d += g * x;
                }
            });
        }
        Op::Affine(x, k) => acc(*x, &mut |d| {
            for (d, &g) in d.iter_mut().zip(g) {
                *d += *k * g;
            }
        }),
        Op::MulScalar(x, s) => {
            let (xv, k) = (val(*x), val(*s)[0]);
            acc(*x, &mut |d| {
                for (d, &g) in d.iter_mut().zip(g) {
                    *d += k * g;
                }
            });
            acc(*s, &mut |d| d[0] += g.iter().zip(xv).map(|(&g, &x)| g * x).sum::<T>());
        }
        Op::AddLast(x, v) => {
            let c = val(*v).len();
            acc(*x, &mut |d| add_into(d, g));
            acc(*v, &mut |d| {
                for row in g.chunks(c) {
                    add_into(d, row);
                }
            });
        }
        Op::MulLast(x, v) => {
            let (xv, vv) = (val(*x), val(*v));
            let c = vv.len();
            acc(*x, &mut |d| {
                for (drow, grow) in d.chunks_mut(c).zip(g.chunks(c)) {
                    for ((d, &g), &s) in drow.iter_mut().zip(grow).zip(vv) {
                        *d += g * s;
                    }
                }
            });
            acc(*v, &mut |d| {
                for (grow, xrow) in g.chunks(c).zip(xv.chunks(c)) {
                    for ((d, &g), &x) in d.iter_mut().zip(grow).zip(xrow) {
                        *d += g * x;
                    }
                }
            });
        }
        Op::Unary(x, kind) => {
            let (xv, yv) = (val(*x), node.value.data());
            acc(*x, &mut |d| {
                for i in 0..d.len() {
                    let local = match kind {
                        Unary::Tanh => T::one() - yv[i] * yv[i],
                        Unary::Sigmoid => yv[i] * (T::one() - yv[i]),
                        Unary::Relu => {
                            if xv[i] > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Softplus => sigmoid(xv[i]),
                    };
                    d[i] += g[i] * local;
                }
            });
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (m, k, p) = (sa[0], sa[1], sb[1]);
            let (av, bv) = (val(*a), val(*b));
            if needs(*a) {
                // dA = G · Bᵀ
                let bt = transpose2(bv, k, p, [p, k]);
                acc(*a, &mut |d| matmul_into(g, bt.data(), d, m, p, k));
            }
            if needs(*b) {
                // dB = Aᵀ · G
                let at = transpose2(av, m, k, [k, m]);
                acc(*b, &mut |d| matmul_into(at.data(), g, d, k, m, p));
            }
        }
        Op::Transpose(x) => {
            let s = node.value.shape();
            let gt = transpose2(g, s[0], s[1], [s[1], s[0]]);
            acc(*x, &mut |d| add_into(d, gt.data()));
        }
        Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
        Op::Softmax(x) => {
            let y = node.value.data();
            let dot: T = g.iter().zip(y).map(|(&g, &y)| g * y).sum();
            acc(*x, &mut |d| {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                    *d += y * (g - dot);
                }
            });
        }
        Op::AvgPool { x, window, stride } => {
            let s = nodes[x.0].value.shape();
            let (w, c) = (s[1], s[2]);
            let os = node.value.shape();
            let (oh, ow) = (os[0], os[1]);
            let inv = T::one() / T::from_usize(window * window).unwrap();
            acc(*x, &mut |d| {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let grow = &g[(oy * ow + ox) * c..][..c];
                        for ky in 0..*window {
                            for kx in 0..*window {
                                let base = ((oy * stride + ky) * w + ox * stride + kx) * c;
                                for (d, &gv) in d[base..base + c].iter_mut().zip(grow) {
                                    *d += gv * inv;
                                }
                            }
                        }
                    }
                }
            });
        }
        Op::MaxPool { x, picks } => acc(*x, &mut |d| {
            for (&p, &gv) in picks.iter().zip(g) {
                d[p] += gv;
            }
        }),
        Op::Conv2d { x, k, stride } => {
            let xs = nodes[x.0].value.shape();
            let ks = nodes[k.0].value.shape();
            let (w, ci) = (xs[1], xs[2]);
            let (kh, kw, co) = (ks[0], ks[1], ks[3]);
            let os = node.value.shape();
            let (oh, ow) = (os[0], os[1]);
            let (xd, kd) = (val(*x), val(*k));
            let stride = *stride;
            acc(*x, &mut |dx| {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let grow = &g[(oy * ow + ox) * co..][..co];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let base = ((oy * stride + ky) * w + ox * stride + kx) * ci;
                                let krow = &kd[(ky * kw + kx) * ci * co..][..ci * co];
                                for (d, kcol) in dx[base..base + ci].iter_mut().zip(krow.chunks_exact(co)) {
                                    *d += dot(kcol, grow);
                                }
                            }
                        }
                    }
                }
            });
            acc(*k, &mut |dk| {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let grow = &g[(oy * ow + ox) * co..][..co];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let xrow = &xd[((oy * stride + ky) * w + ox * stride + kx) * ci..][..ci];
                                let drow = &mut dk[(ky * kw + kx) * ci * co..][..ci * co];
                                for (&xe, dcol) in xrow.iter().zip(drow.chunks_exact_mut(co)) {
                                    for (d, &gv) in dcol.iter_mut().zip(grow) {
                                        *d += xe * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }
        Op::Cosine { x, y } => {
            let (xv, yv) = (val(*x), val(*y));
            let (dotp, nx, ny) = dot_norms(xv, yv);
            let eps = T::lit(COSINE_EPS);
            let gs = g[0];
            let c = node.value.item();
            if nx * ny > eps {
                let inv = T::one() / (nx * ny);
                let (ix2, iy2) = (T::one() / (nx * nx), T::one() / (ny * ny));
                acc(*x, &mut |d| {
                    for ((d, &a), &b) in d.iter_mut().zip(xv).zip(yv) {
                        *d += gs * (b * inv - c * a * ix2);
                    }
                });
                acc(*y, &mut |d| {
                    for ((d, &a), &b) in d.iter_mut().zip(xv).zip(yv) {
                        *d += gs * (a * inv - c * b * iy2);
                    }
                });
            } else {
                let _ = dotp;
                let inv = T::one() / eps;
                acc(*x, &mut |d| {
                    for (d, &b) in d.iter_mut().zip(yv) {
                        *d += gs * b * inv;
                    }
                });
                acc(*y, &mut |d| {
                    for (d, &a) in d.iter_mut().zip(xv) {
                        *d += gs * a * inv;
                    }
                });
            }
        }
        Op::Normalize { x, inv_std } => {
            let y = node.value.data();
            let n = T::from_usize(y.len()).unwrap();
            let mean_g = g.iter().copied().sum::<T>() / n;
            let mean_gy = g.iter().zip(y).map(|(&g, &y)| g * y).sum::<T>() / n;
            acc(*x, &mut |d| {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                    *d += *inv_std * (g - mean_g - y * mean_gy);
                }
            });
        }
        Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
        Op::Concat(parts) | Op::Stack(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = nodes[p.0].value.len();
                acc(*p, &mut |d| add_into(d, &g[offset..offset + n]));
                offset += n;
            }
        }
        Op::Slice { x, start } => {
            let start = *start;
            acc(*x, &mut |d| add_into(&mut d[start..start + g.len()], g));
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax_values<T: Real>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn dot_norms<T: Real>(x: &[T], y: &[T]) -> (T, T, T) {
    let mut d = T::zero();
    let mut xx = T::zero();
    let mut yy = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        d += a * b;
        xx += a * a;
        yy += b * b;
    }
    (d, xx.sqrt(), yy.sqrt())
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `out += a[m×k] · b[k×p]`.
fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[kk * p..(kk + 1) * p]) {
                *o += av * bv;
            }
        }
    }
}

fn transpose2<T: Real>(x: &[T], r: usize, c: usize, shape: [usize; 2]) -> Tensor<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    Tensor::new(shape, out).expect("transpose shape")
}

fn hwc(shape: &[usize], op: &str) -> Result<(usize, usize, usize)> {
    match shape {
        &[h, w, c] => Ok((h, w, c)),
        _ => contract(format!("{op}: expected an h×w×c map, got {shape:?}")),
    }
}

fn pooled_dims(h: usize, w: usize, kh: usize, kw: usize, stride: usize, op: &str) -> Result<(usize, usize)> {
    if stride == 0 {
        return contract(format!("{op}: stride must be positive"));
    }
    if kh == 0 || kw == 0 || kh > h || kw > w {
        return contract(format!("{op}: window {kh}×{kw} does not fit a {h}×{w} map"));
    }
    Ok(((h - kh) / stride + 1, (w - kw) / stride + 1))
}
