//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node whose inputs are earlier nodes, so the tape is
//! topologically ordered by construction and a single reverse sweep visits
//! each node once.

use rand::Rng;

use crate::error::{CdtError, Result};
use crate::ops::{self, bmm, plan_matmul};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale { x: Var, factor: T },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Dropout { x: Var, mask: Vec<T> },
    SplitHeads { x: Var, heads: usize },
    MergeHeads(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse { pred: Var, target: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation; also known as a Wengert list.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    spent: bool,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            spent: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node so the tape can record a new pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.spent = false;
    }

    /// Drops every node recorded after the first `len`, keeping earlier `Var`s
    /// valid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.spent = false;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let g = t.requires_grad();
        self.push(t, Op::Leaf, g)
    }

    pub fn param(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(true);
        self.leaf(t)
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient stored on a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_leaf(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(T::zero()))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two dims.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let plan = plan_matmul(self.shape(a), self.shape(b), trans_b)?;
        let mut out = Tensor::zeros(plan.out_shape());
        bmm(
            self.value(a).data(),
            plan.a_batched,
            false,
            self.value(b).data(),
            plan.b_batched,
            trans_b,
            out.data_mut(),
            true,
            plan.nbatch,
            plan.m,
            plan.k,
            plan.n,
            T::zero(),
        );
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, g))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CdtError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(op, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |p, q| p + q)?;
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |p, q| p - q)?;
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |p, q| p * q)?;
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), g))
    }

    /// Adds a vector to every row of `x`; `bias` length is `x`'s last dim.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().expect("rank >= 1");
        if self.value(bias).numel() != n {
            return Err(CdtError::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(&p, &q)| p + q))
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let g = self.ng(x) || self.ng(bias);
        Ok(self.push(out, Op::AddRow { x, bias }, g))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let g = self.ng(x);
        self.push(out, Op::Scale { x, factor }, g)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(x), axis)?;
        let g = self.ng(x);
        Ok(self.push(out, Op::Softmax { x, axis }, g))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let n = *self.shape(x).last().expect("rank >= 1");
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(CdtError::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (y, xhat, rstd) = ops::layer_norm_fwd(
            self.value(x).data(),
            n,
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
        );
        let out = Tensor::new(self.shape(x).to_vec(), y)?;
        let g = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            g,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        let g = self.ng(x);
        self.push(out, Op::Gelu(x), g)
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(CdtError::Config(format!("dropout p must be in [0,1), got {p}")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let g = self.ng(x);
        Ok(self.push(out, Op::Dropout { x, mask }, g))
    }

    /// `[L, H·dh] -> [H, L, dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || heads == 0 || s[1] % heads != 0 {
            return Err(CdtError::Config(format!(
                "cannot split shape {s:?} into {heads} heads"
            )));
        }
        let (l, d) = (s[0], s[1]);
        let dh = d / heads;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); l * d];
        for h in 0..heads {
            for i in 0..l {
                out[(h * l + i) * dh..(h * l + i + 1) * dh]
                    .copy_from_slice(&src[i * d + h * dh..i * d + (h + 1) * dh]);
            }
        }
        let out = Tensor::new(vec![heads, l, dh], out)?;
        let g = self.ng(x);
        Ok(self.push(out, Op::SplitHeads { x, heads }, g))
    }

    /// `[H, L, dh] -> [L, H·dh]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(CdtError::shape("merge_heads", &s, &[0, 0, 0]));
        }
        let (heads, l, dh) = (s[0], s[1], s[2]);
        let d = heads * dh;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); l * d];
        for h in 0..heads {
            for i in 0..l {
                out[i * d + h * dh..i * d + (h + 1) * dh]
                    .copy_from_slice(&src[(h * l + i) * dh..(h * l + i + 1) * dh]);
            }
        }
        let out = Tensor::new(vec![l, d], out)?;
        let g = self.ng(x);
        Ok(self.push(out, Op::MergeHeads(x), g))
    }

    /// Concatenation along the last dim.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(CdtError::shape("concat", &first, s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::new(shape, out)?;
        let g = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), g))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let g = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), g))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let g = self.ng(x);
        self.push(out, Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / T::lit(v.numel() as f64));
        let g = self.ng(x);
        self.push(out, Op::Mean(x), g)
    }

    /// Mean of squared differences over every element.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let (p, t) = (self.value(pred), self.value(target));
        let total: T = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let out = Tensor::scalar(total / T::lit(p.numel() as f64));
        let g = self.ng(pred) || self.ng(target);
        Ok(self.push(out, Op::Mse { pred, target }, g))
    }

    /// Populates `grad` on every differentiable leaf with d(loss)/d(leaf).
    ///
    /// The tape is spent afterwards; call [`Tape::reset`] to reuse it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.spent {
            return Err(CdtError::Contract("tape already consumed by backward".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(CdtError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let grads = self.vjp(loss, &[T::one()])?;
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (Op::Leaf, Some(g)) = (&node.op, g) {
                if node.value.requires_grad() {
                    node.value.set_grad(g);
                }
            }
        }
        self.spent = true;
        Ok(())
    }

    /// Vector-Jacobian product: gradients of `seed · output` for every leaf.
    ///
    /// Leaves the tape untouched, so several seeds can be pulled back through
    /// one recorded pass. Entries are `None` for leaves that do not need grad.
    pub fn vjp(&self, output: Var, seed: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        if seed.len() != self.value(output).numel() {
            return Err(CdtError::shape("vjp", self.shape(output), &[seed.len()]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed.to_vec());
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.pull_back(node, &g, &mut grads);
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(grads)
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.ng(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn pull_back(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let plan = plan_matmul(self.shape(*a), self.shape(*b), *trans_b)
                    .expect("validated in forward");
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (m, k, n) = (plan.m, plan.k, plan.n);
                self.acc(grads, *a, |ga| {
                    // dA = dC · op(B)ᵀ
                    bmm(g, true, false, bv, plan.b_batched, !*trans_b, ga, plan.a_batched,
                        plan.nbatch, m, n, k, T::one());
                });
                self.acc(grads, *b, |gb| {
                    if *trans_b {
                        // dB = dCᵀ · A, stored [n, k]
                        bmm(g, true, true, av, plan.a_batched, false, gb, plan.b_batched,
                            plan.nbatch, n, m, k, T::one());
                    } else {
                        // dB = Aᵀ · dC, stored [k, n]
                        bmm(av, plan.a_batched, true, g, true, false, gb, plan.b_batched,
                            plan.nbatch, k, m, n, T::one());
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(s, &d)| *s -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for ((s, &d), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *s += d * y;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((s, &d), &x) in gb.iter_mut().zip(g).zip(av) {
                        *s += d * x;
                    }
                });
            }
            Op::AddRow { x, bias } => {
                self.acc(grads, *x, |gx| add_into(gx, g));
                self.acc(grads, *bias, |gb| {
                    let n = gb.len();
                    for row in g.chunks_exact(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale { x, factor } => {
                self.acc(grads, *x, |gx| {
                    gx.iter_mut().zip(g).for_each(|(s, &d)| *s += d * *factor)
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = ops::axis_layout(node.value.shape(), *axis);
                self.acc(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let n = gv.len();
                self.acc(grads, *x, |gx| {
                    let inv_n = T::one() / T::lit(n as f64);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let row = r * n..(r + 1) * n;
                        let (dy, xh) = (&g[row.clone()], &xhat[row.clone()]);
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..n {
                            let d = dy[j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d *= inv_n;
                        mean_dx *= inv_n;
                        for j in 0..n {
                            let d = dy[j] * gv[j];
                            gx[r * n + j] += rs * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
                self.acc(grads, *gain, |gg| {
                    for (dy, xh) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            gg[j] += dy[j] * xh[j];
                        }
                    }
                });
                self.acc(grads, *bias, |gb| {
                    for dy in g.chunks_exact(n) {
                        add_into(gb, dy);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for ((s, &d), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *s += d * ops::gelu_grad_scalar(v);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.acc(grads, *x, |gx| {
                    for ((s, &d), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *s += d * m;
                    }
                });
            }
            Op::SplitHeads { x, heads } => {
                let s = self.shape(*x);
                let (l, d) = (s[0], s[1]);
                let dh = d / heads;
                self.acc(grads, *x, |gx| {
                    for h in 0..*heads {
                        for i in 0..l {
                            let src = &g[(h * l + i) * dh..(h * l + i + 1) * dh];
                            add_into(&mut gx[i * d + h * dh..i * d + (h + 1) * dh], src);
                        }
                    }
                });
            }
            Op::MergeHeads(x) => {
                let s = self.shape(*x);
                let (heads, l, dh) = (s[0], s[1], s[2]);
                let d = heads * dh;
                self.acc(grads, *x, |gx| {
                    for h in 0..heads {
                        for i in 0..l {
                            let src = &g[i * d + h * dh..i * d + (h + 1) * dh];
                            add_into(&mut gx[(h * l + i) * dh..(h * l + i + 1) * dh], src);
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let total = *node.value.shape().last().unwrap();
                let rows = node.value.numel() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    self.acc(grads, p, |gp| {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::Reshape(x) => self.acc(grads, *x, |gx| add_into(gx, g)),
            Op::Sum(x) => self.acc(grads, *x, |gx| gx.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(x) => {
                let n = T::lit(self.value(*x).numel() as f64);
                self.acc(grads, *x, |gx| gx.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                let c = T::lit(2.0) * g[0] / T::lit(p.len() as f64);
                self.acc(grads, *pred, |gp| {
                    for ((s, &a), &b) in gp.iter_mut().zip(p).zip(t) {
                        *s += c * (a - b);
                    }
                });
                self.acc(grads, *target, |gt| {
                    for ((s, &a), &b) in gt.iter_mut().zip(p).zip(t) {
                        *s -= c * (a - b);
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Central differences `(f(x + h·e_i) - f(x - h·e_i)) / 2h` for every element.
pub fn finite_difference_gradient<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    h: T,
) -> Tensor<T> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape().to_vec());
    let two_h = h + h;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / two_h;
    }
    out
}
