//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and the operation that produced it. [`Graph::backward`] walks the tape in
//! reverse. Parameters are borrowed from a [`ParamStore`] and materialized at
//! most once per graph, so a module applied twice (the shared encoder on two
//! frames) accumulates both contributions into one gradient.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    Gelu(Var),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Concat(Vec<Var>),
    Narrow {
        x: Var,
        start: usize,
    },
    Resize(Var),
    Reshape(Var),
    Sum(Var),
    WeightedBce {
        x: Var,
        gt: Tensor,
        w: Tensor,
    },
    WeightedIou {
        x: Var,
        gt: Tensor,
        w: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    train_params: bool,
}

/// Smoothing constant of the weighted IoU term.
pub const IOU_SMOOTH: f64 = 1.0;

impl<'p> Graph<'p> {
    /// A graph whose parameters receive gradients.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            train_params: true,
        }
    }

    /// A graph whose parameters are treated as constants.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            train_params: false,
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let t = self.params.get(id).clone();
        let v = self.push(t, Op::Param, self.train_params);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x).map(|v| scale * v + shift);
        let ng = self.ng(x);
        self.push(t, Op::Affine { x, scale }, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(tensor::gelu);
        let ng = self.ng(x);
        self.push(t, Op::Gelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(tensor::sigmoid);
        let ng = self.ng(x);
        self.push(t, Op::Sigmoid(x), ng)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let t = tensor::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(t, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    /// `op(a) * op(b)` over the matrix views of `a` and `b`.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ar, ac) = self.value(a).dims2();
        let (br, bc) = self.value(b).dims2();
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        tensor::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            0.0,
            &mut out,
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[m, n], out), Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = tensor::softmax_rows(self.value(x));
        let ng = self.ng(x);
        self.push(t, Op::SoftmaxRows(x), ng)
    }

    /// Normalizes over the leading (channel) axis independently at every
    /// position, then applies a per-channel affine map.
    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (c, n) = xv.dims2();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), c);
        let mut out = vec![0.0; c * n];
        let xd = xv.data();
        for p in 0..n {
            let (mean, inv) = column_stats(xd, c, n, p, eps);
            for ch in 0..c {
                out[ch * n + p] = g[ch] * (xd[ch * n + p] - mean) * inv + b[ch];
            }
        }
        let t = Tensor::new(xv.shape(), out);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(t, Op::LayerNorm { x, gamma, beta, eps }, ng)
    }

    /// Concatenates `[C_i, H, W]` maps along channels.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_channels(&tensors);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(t, Op::Concat(parts.to_vec()), ng)
    }

    /// Channels `[start, start + len)` of a `[C, H, W]` map.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x).narrow_channels(start, len);
        let ng = self.ng(x);
        self.push(t, Op::Narrow { x, start }, ng)
    }

    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Var {
        let t = tensor::resize_bilinear(self.value(x), h, w);
        let ng = self.ng(x);
        self.push(t, Op::Resize(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(t, Op::Sum(x), ng)
    }

    /// Weighted binary cross-entropy on logits:
    /// `sum(w * bce(sigmoid(x), gt)) / sum(w)`, evaluated in log space.
    pub fn weighted_bce(&mut self, x: Var, gt: &Tensor, w: &Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), gt.len());
        assert_eq!(xv.len(), w.len());
        let mut num = 0.0;
        for ((&l, &g), &wi) in xv.data().iter().zip(gt.data()).zip(w.data()) {
            num += wi * (tensor::softplus(l) - l * g);
        }
        let t = Tensor::scalar(num / w.sum());
        let ng = self.ng(x);
        self.push(
            t,
            Op::WeightedBce {
                x,
                gt: gt.clone(),
                w: w.clone(),
            },
            ng,
        )
    }

    /// Weighted soft IoU loss on logits:
    /// `1 - (sum(w p g) + 1) / (sum(w (p + g - p g)) + 1)` with `p = sigmoid(x)`.
    pub fn weighted_iou(&mut self, x: Var, gt: &Tensor, w: &Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), gt.len());
        assert_eq!(xv.len(), w.len());
        let (inter, union) = iou_sums(xv.data(), gt.data(), w.data());
        let t = Tensor::scalar(1.0 - (inter + IOU_SMOOTH) / (union + IOU_SMOOTH));
        let ng = self.ng(x);
        self.push(
            t,
            Op::WeightedIou {
                x,
                gt: gt.clone(),
                w: w.clone(),
            },
            ng,
        )
    }

    /// Back-propagates from `root`, seeding it with ones.
    pub fn backward(&self, root: Var) -> Grads {
        let n = root.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(gy);
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, || gy.clone());
                    self.acc(&mut grads, *b, || gy.clone());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    self.acc(&mut grads, *a, || zip_map(&gy, vb, |g, y| g * y));
                    self.acc(&mut grads, *b, || zip_map(&gy, va, |g, x| g * x));
                }
                Op::Affine { x, scale } => {
                    self.acc(&mut grads, *x, || gy.map(|g| g * scale));
                }
                Op::Gelu(x) => {
                    let vx = self.value(*x);
                    self.acc(&mut grads, *x, || zip_map(&gy, vx, |g, v| g * tensor::gelu_grad(v)));
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    self.acc(&mut grads, *x, || zip_map(&gy, y, |g, s| g * s * (1.0 - s)));
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) =
                        tensor::conv2d_backward(self.value(*x), self.value(*w), *stride, *pad, &gy, self.ng(*x));
                    if let Some(dx) = dx {
                        self.acc(&mut grads, *x, || dx);
                    }
                    self.acc(&mut grads, *w, || dw);
                    if let Some(b) = b {
                        self.acc(&mut grads, *b, || db);
                    }
                }
                Op::MatMul { a, b, ta, tb } => {
                    self.matmul_backward(&mut grads, &gy, *a, *b, *ta, *tb);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let (r, c) = y.dims2();
                    self.acc(&mut grads, *x, || {
                        let mut dx = vec![0.0; r * c];
                        for row in 0..r {
                            let ys = &y.data()[row * c..(row + 1) * c];
                            let gs = &gy.data()[row * c..(row + 1) * c];
                            let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                dx[row * c + j] = ys[j] * (gs[j] - dot);
                            }
                        }
                        Tensor::new(y.shape(), dx)
                    });
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    self.layer_norm_backward(&mut grads, &gy, *x, *gamma, *beta, *eps);
                }
                Op::Concat(parts) => {
                    let (_, h, w) = gy.dims3();
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.value(p).dims3().0;
                        self.acc(&mut grads, p, || gy.narrow_channels(off, pc));
                        off += pc;
                    }
                    debug_assert_eq!(off * h * w, gy.len());
                }
                Op::Narrow { x, start } => {
                    let xs = self.value(*x).shape().to_vec();
                    self.acc(&mut grads, *x, || {
                        let mut dx = Tensor::zeros(&xs);
                        let plane: usize = xs[1..].iter().product();
                        dx.data_mut()[start * plane..start * plane + gy.len()].copy_from_slice(gy.data());
                        dx
                    });
                }
                Op::Resize(x) => {
                    let (_, h, w) = self.value(*x).dims3();
                    let xs = self.value(*x).shape().to_vec();
                    self.acc(&mut grads, *x, || {
                        tensor::resize_bilinear_backward(&gy, h, w).reshape(&xs)
                    });
                }
                Op::Reshape(x) => {
                    let xs = self.value(*x).shape().to_vec();
                    self.acc(&mut grads, *x, || gy.clone().reshape(&xs));
                }
                Op::Sum(x) => {
                    let g = gy.item();
                    let xs = self.value(*x).shape().to_vec();
                    self.acc(&mut grads, *x, || Tensor::full(&xs, g));
                }
                Op::WeightedBce { x, gt, w } => {
                    let g = gy.item();
                    let sw = w.sum();
                    let vx = self.value(*x);
                    self.acc(&mut grads, *x, || {
                        Tensor::from_fn(vx.shape(), |i| {
                            g * w.data()[i] * (tensor::sigmoid(vx.data()[i]) - gt.data()[i]) / sw
                        })
                    });
                }
                Op::WeightedIou { x, gt, w } => {
                    let g = gy.item();
                    let vx = self.value(*x);
                    let (inter, union) = iou_sums(vx.data(), gt.data(), w.data());
                    let a = inter + IOU_SMOOTH;
                    let b = union + IOU_SMOOTH;
                    self.acc(&mut grads, *x, || {
                        Tensor::from_fn(vx.shape(), |i| {
                            let p = tensor::sigmoid(vx.data()[i]);
                            let (gi, wi) = (gt.data()[i], w.data()[i]);
                            let da = wi * gi;
                            let db = wi * (1.0 - gi);
                            let dl_dp = -(da * b - a * db) / (b * b);
                            g * dl_dp * p * (1.0 - p)
                        })
                    });
                }
            }
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, make: impl FnOnce() -> Tensor) {
        if !self.ng(v) {
            return;
        }
        let g = make();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn matmul_backward(&self, grads: &mut [Option<Tensor>], gy: &Tensor, a: Var, b: Var, ta: bool, tb: bool) {
        let (va, vb) = (self.value(a), self.value(b));
        let (ar, ac) = va.dims2();
        let (br, bc) = vb.dims2();
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let n = if tb { br } else { bc };
        self.acc(grads, a, || {
            let mut d = vec![0.0; m * k];
            if ta {
                tensor::gemm(k, n, m, vb.data(), tb, gy.data(), true, 0.0, &mut d);
            } else {
                tensor::gemm(m, n, k, gy.data(), false, vb.data(), !tb, 0.0, &mut d);
            }
            Tensor::new(va.shape(), d)
        });
        self.acc(grads, b, || {
            let mut d = vec![0.0; k * n];
            if tb {
                tensor::gemm(n, m, k, gy.data(), true, va.data(), ta, 0.0, &mut d);
            } else {
                tensor::gemm(k, m, n, va.data(), !ta, gy.data(), false, 0.0, &mut d);
            }
            Tensor::new(vb.shape(), d)
        });
    }

    fn layer_norm_backward(&self, grads: &mut [Option<Tensor>], gy: &Tensor, x: Var, gamma: Var, beta: Var, eps: f64) {
        let xv = self.value(x);
        let (c, n) = xv.dims2();
        let xd = xv.data();
        let g = self.value(gamma).data();
        let gyd = gy.data();
        let mut dx = vec![0.0; c * n];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut xhat = vec![0.0; c];
        for p in 0..n {
            let (mean, inv) = column_stats(xd, c, n, p, eps);
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for ch in 0..c {
                xhat[ch] = (xd[ch * n + p] - mean) * inv;
                let dyv = gyd[ch * n + p];
                dgamma[ch] += dyv * xhat[ch];
                dbeta[ch] += dyv;
                let dxh = dyv * g[ch];
                m1 += dxh;
                m2 += dxh * xhat[ch];
            }
            m1 /= c as f64;
            m2 /= c as f64;
            for ch in 0..c {
                let dxh = gyd[ch * n + p] * g[ch];
                dx[ch * n + p] = inv * (dxh - m1 - xhat[ch] * m2);
            }
        }
        self.acc(grads, x, || Tensor::new(xv.shape(), dx));
        self.acc(grads, gamma, || Tensor::new(&[c], dgamma));
        self.acc(grads, beta, || Tensor::new(&[c], dbeta));
    }
}

fn column_stats(xd: &[f64], c: usize, n: usize, p: usize, eps: f64) -> (f64, f64) {
    let mean = (0..c).map(|ch| xd[ch * n + p]).sum::<f64>() / c as f64;
    let var = (0..c).map(|ch| (xd[ch * n + p] - mean).powi(2)).sum::<f64>() / c as f64;
    (mean, 1.0 / (var + eps).sqrt())
}

fn iou_sums(logits: &[f64], gt: &[f64], w: &[f64]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut union = 0.0;
    for ((&l, &g), &wi) in logits.iter().zip(gt).zip(w) {
        let p = tensor::sigmoid(l);
        inter += wi * p * g;
        union += wi * (p + g - p * g);
    }
    (inter, union)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// Gradients produced by [`Graph::backward`]; only leaves are retained.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for every parameter of `graph`'s store, zero where unused.
    pub fn param_grads(&self, graph: &Graph<'_>) -> Vec<Tensor> {
        graph
            .params
            .ids()
            .map(|id| match graph.param_nodes[id.0].and_then(|v| self.get(v)) {
                Some(g) => g.clone(),
                None => Tensor::zeros(graph.params.get(id).shape()),
            })
            .collect()
    }
}
