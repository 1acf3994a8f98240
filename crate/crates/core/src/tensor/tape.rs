//! Reverse-mode differentiation by operation recording.
//!
//! Every op appends one node holding its forward value. Node indices are a
//! topological order by construction, so `backward` is a single reverse
//! sweep that visits each node once.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{self, ConvGeom, Padding};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{invalid, shape_err, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Softmax,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Sqrt(Var),
    Reshape(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d(Var, Var, ConvGeom),
    Depthwise(Var, Var, ConvGeom),
    GlobalAvgPool(Var),
    MaxPool(Var, Vec<usize>),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Dropout(Var, Vec<T>),
    CrossEntropy {
        pred: Var,
        target: Var,
        clamped: Vec<bool>,
    },
    ChannelScale(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Prediction clamp used by [`Tape::cross_entropy`].
pub const PROB_CLAMP: f64 = 1e-7;

/// Recorded computation. Values are immutable once pushed.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], shape: &[usize], v: Var, delta: Vec<T>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts(shape.to_vec(), delta)),
    }
}

fn image_dims(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match *shape {
        [n, h, w, c] => Ok([n, h, w, c]),
        _ => Err(shape_err!("{what} expects [N, H, W, C], got {shape:?}")),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Input or constant. Gradients are still computed for leaves.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.sum() / T::lit(t.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < T::zero()) {
            return Err(invalid!("sqrt of negative value"));
        }
        let out = self.value(a).map(|x| x.sqrt());
        Ok(self.push(out, Op::Sqrt(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// `[N, K] x [K, M] -> [N, M]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (&[n, k], &[k2, m]) = (self.shape(a), self.shape(b)) else {
            return Err(shape_err!(
                "matmul expects rank-2 operands, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        };
        if k != k2 {
            return Err(shape_err!("matmul inner dims {k} vs {k2}"));
        }
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), n, k, m);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b)))
    }

    /// Adds `b[C]` along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).last().expect("rank >= 1");
        if self.shape(b) != [c] {
            return Err(shape_err!(
                "bias {:?} does not match last axis {c}",
                self.shape(b)
            ));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    /// Fully connected layer `g(x W + b)`; `x` is `[N, in]` or `[in]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
        let vector = self.shape(x).len() == 1;
        let x2 = if vector {
            let n = self.shape(x)[0];
            self.reshape(x, vec![1, n])?
        } else {
            x
        };
        let z = self.matmul(x2, w)?;
        let z = self.add_bias(z, b)?;
        let y = self.activate(z, act);
        if vector {
            let m = self.shape(y)[1];
            self.reshape(y, vec![m])
        } else {
            Ok(y)
        }
    }

    fn conv_geom(
        &self,
        x: Var,
        kernel_hw: usize,
        c_out: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<ConvGeom> {
        let [n, h, w, c_in] = image_dims(self.shape(x), "conv")?;
        if kernel_hw.is_multiple_of(2) {
            return Err(invalid!("kernel size {kernel_hw} must be odd"));
        }
        let (out_h, out_w, pad_top, pad_left) =
            conv::conv_output_geometry(h, w, kernel_hw, stride, padding)?;
        Ok(ConvGeom {
            n,
            h,
            w,
            c_in,
            c_out,
            k: kernel_hw,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    /// 2-D cross-correlation; `kernel` is `[k, k, C_in, C_out]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let &[k, k2, ci, co] = self.shape(kernel) else {
            return Err(shape_err!("conv kernel must be [k, k, C_in, C_out]"));
        };
        if k != k2 {
            return Err(shape_err!("conv kernel must be square, got {k}x{k2}"));
        }
        let g = self.conv_geom(x, k, co, stride, padding)?;
        if g.c_in != ci {
            return Err(shape_err!("conv input has {} channels, kernel expects {ci}", g.c_in));
        }
        let out = conv::conv2d_forward(self.value(x).data(), self.value(kernel).data(), &g);
        let y = self.push(Tensor::from_parts(g.out_shape(), out), Op::Conv2d(x, kernel, g));
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Per-channel spatial convolution; `kernel` is `[k, k, C]`.
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let &[k, k2, c] = self.shape(kernel) else {
            return Err(shape_err!("depthwise kernel must be [k, k, C]"));
        };
        if k != k2 {
            return Err(shape_err!("depthwise kernel must be square, got {k}x{k2}"));
        }
        let g = self.conv_geom(x, k, c, stride, padding)?;
        if g.c_in != c {
            return Err(shape_err!("depthwise input has {} channels, kernel has {c}", g.c_in));
        }
        let out = conv::depthwise_forward(self.value(x).data(), self.value(kernel).data(), &g);
        let y = self.push(Tensor::from_parts(g.out_shape(), out), Op::Depthwise(x, kernel, g));
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// 1x1 convolution, i.e. the same dense map applied at every pixel.
    pub fn pointwise_conv(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        if !matches!(self.shape(kernel), [1, 1, _, _]) {
            return Err(shape_err!(
                "pointwise kernel must be [1, 1, C_in, C_out], got {:?}",
                self.shape(kernel)
            ));
        }
        self.conv2d(x, kernel, bias, 1, Padding::Same)
    }

    /// `[N, H, W, C] -> [N, C]`, mean over the spatial axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, h, w, c] = image_dims(self.shape(x), "global_avg_pool")?;
        let hw = h * w;
        let inv = T::one() / T::lit(hw as f64);
        let data = self.value(x).data();
        let mut out = vec![T::zero(); n * c];
        for b in 0..n {
            let dst = &mut out[b * c..(b + 1) * c];
            for px in data[b * hw * c..(b + 1) * hw * c].chunks(c) {
                for (d, &v) in dst.iter_mut().zip(px) {
                    *d += v;
                }
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        Ok(self.push(Tensor::from_parts(vec![n, c], out), Op::GlobalAvgPool(x)))
    }

    pub fn max_pool(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let dims = image_dims(self.shape(x), "max_pool")?;
        let (shape, out, argmax) =
            conv::max_pool_forward(self.value(x).data(), dims, window, stride)?;
        Ok(self.push(Tensor::from_parts(shape, out), Op::MaxPool(x, argmax)))
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = *t.shape().last().expect("rank >= 1");
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / total);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(out, Op::Softmax(x))
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Var {
        match act {
            Activation::Identity => x,
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Softmax => self.softmax(x),
        }
    }

    /// Inverted dropout. Identity when not training or `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid!("dropout rate {rate} not in [0, 1)"));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(out, Op::Dropout(x, mask)))
    }

    /// Batch-mean categorical cross-entropy `-sum y log p`, with `p` clamped
    /// to `[1e-7, 1 - 1e-7]`. Both operands are `[N, K]` (or `[K]`).
    pub fn cross_entropy(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "cross_entropy")?;
        let p = self.value(pred);
        let y = self.value(target);
        let k = *p.shape().last().expect("rank >= 1");
        let n = p.len() / k;
        let (lo, hi) = (T::lit(PROB_CLAMP), T::lit(1.0 - PROB_CLAMP));
        let mut clamped = Vec::with_capacity(p.len());
        let mut total = T::zero();
        for (&pv, &yv) in p.data().iter().zip(y.data()) {
            let c = pv.max(lo).min(hi);
            clamped.push(c != pv);
            total += -(yv * c.ln());
        }
        let loss = total / T::lit(n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                pred,
                target,
                clamped,
            },
        ))
    }

    /// Channel-wise rescale: `x[n, h, w, c] * s[n, c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let [n, h, w, c] = image_dims(self.shape(x), "channel_scale")?;
        if self.shape(s) != [n, c] {
            return Err(shape_err!(
                "channel scale {:?} does not match [{n}, {c}]",
                self.shape(s)
            ));
        }
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (b, img) in out.chunks_mut(h * w * c).enumerate() {
            let scale = &sv[b * c..(b + 1) * c];
            for px in img.chunks_mut(c) {
                for (v, &m) in px.iter_mut().zip(scale) {
                    *v *= m;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, h, w, c], out), Op::ChannelScale(x, s)))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(invalid!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradient of every `Param` node into the store; a parameter
    /// used several times accumulates additively.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, grads.grads[i].as_ref()) {
                store.get_mut(*id).grad.add_assign(g);
            }
        }
    }

    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        self.accumulate_param_grads(&grads, store);
        Ok(grads)
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let shape_of = |v: Var| self.nodes[v.0].value.shape();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                accumulate(grads, shape_of(*a), *a, gd.to_vec());
                accumulate(grads, shape_of(*b), *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, shape_of(*a), *a, gd.to_vec());
                accumulate(grads, shape_of(*b), *b, gd.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let da = gd.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect();
                let db = gd.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect();
                accumulate(grads, shape_of(*a), *a, da);
                accumulate(grads, shape_of(*b), *b, db);
            }
            Op::Scale(a, c) => {
                accumulate(grads, shape_of(*a), *a, gd.iter().map(|&x| x * *c).collect());
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                accumulate(grads, shape_of(*a), *a, gd.to_vec());
            }
            Op::Sum(a) => {
                accumulate(grads, shape_of(*a), *a, vec![gd[0]; val(*a).len()]);
            }
            Op::Mean(a) => {
                let len = val(*a).len();
                accumulate(grads, shape_of(*a), *a, vec![gd[0] / T::lit(len as f64); len]);
            }
            Op::Square(a) => {
                let two = T::lit(2.0);
                let da = gd.iter().zip(val(*a)).map(|(&x, &v)| two * v * x).collect();
                accumulate(grads, shape_of(*a), *a, da);
            }
            Op::Sqrt(a) => {
                let half = T::lit(0.5);
                let y = node.value.data();
                let da = gd.iter().zip(y).map(|(&x, &r)| x * half / r).collect();
                accumulate(grads, shape_of(*a), *a, da);
            }
            Op::MatMul(a, b) => {
                let (&[n, k], &[_, m]) = (shape_of(*a), shape_of(*b)) else {
                    unreachable!()
                };
                let da = matmul_nt(gd, val(*b), n, m, k);
                let db = matmul_tn(val(*a), gd, n, k, m);
                accumulate(grads, shape_of(*a), *a, da);
                accumulate(grads, shape_of(*b), *b, db);
            }
            Op::AddBias(x, b) => {
                let c = shape_of(*b)[0];
                let mut db = vec![T::zero(); c];
                for row in gd.chunks(c) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(grads, shape_of(*x), *x, gd.to_vec());
                accumulate(grads, shape_of(*b), *b, db);
            }
            Op::Conv2d(x, k, geom) => {
                let (dx, dk) = conv::conv2d_backward(val(*x), val(*k), gd, geom);
                accumulate(grads, shape_of(*x), *x, dx);
                accumulate(grads, shape_of(*k), *k, dk);
            }
            Op::Depthwise(x, k, geom) => {
                let (dx, dk) = conv::depthwise_backward(val(*x), val(*k), gd, geom);
                accumulate(grads, shape_of(*x), *x, dx);
                accumulate(grads, shape_of(*k), *k, dk);
            }
            Op::GlobalAvgPool(x) => {
                let [_, h, w, c] = image_dims(shape_of(*x), "").expect("checked in forward");
                let inv = T::one() / T::lit((h * w) as f64);
                let mut dx = Vec::with_capacity(val(*x).len());
                for row in gd.chunks(c) {
                    for _ in 0..h * w {
                        dx.extend(row.iter().map(|&v| v * inv));
                    }
                }
                accumulate(grads, shape_of(*x), *x, dx);
            }
            Op::MaxPool(x, argmax) => {
                let mut dx = vec![T::zero(); val(*x).len()];
                for (&src, &v) in argmax.iter().zip(gd) {
                    dx[src] += v;
                }
                accumulate(grads, shape_of(*x), *x, dx);
            }
            Op::Relu(x) => {
                let dx = gd
                    .iter()
                    .zip(val(*x))
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, shape_of(*x), *x, dx);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx = gd
                    .iter()
                    .zip(y)
                    .map(|(&gv, &s)| gv * s * (T::one() - s))
                    .collect();
                accumulate(grads, shape_of(*x), *x, dx);
            }
            Op::Softmax(x) => {
                let c = *node.value.shape().last().expect("rank >= 1");
                let y = node.value.data();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(c).zip(gd.chunks(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                }
                accumulate(grads, shape_of(*x), *x, dx);
            }
            Op::Dropout(x, mask) => {
                let dx = gd.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                accumulate(grads, shape_of(*x), *x, dx);
            }
            Op::CrossEntropy {
                pred,
                target,
                clamped,
            } => {
                let k = *shape_of(*pred).last().expect("rank >= 1");
                let n = val(*pred).len() / k;
                let scale = gd[0] / T::lit(n as f64);
                let (lo, hi) = (T::lit(PROB_CLAMP), T::lit(1.0 - PROB_CLAMP));
                let p = val(*pred);
                let y = val(*target);
                let mut dp = Vec::with_capacity(p.len());
                let mut dy = Vec::with_capacity(p.len());
                for ((&pv, &yv), &cl) in p.iter().zip(y).zip(clamped) {
                    let c = pv.max(lo).min(hi);
                    dp.push(if cl { T::zero() } else { -(yv / c) * scale });
                    dy.push(-c.ln() * scale);
                }
                accumulate(grads, shape_of(*pred), *pred, dp);
                accumulate(grads, shape_of(*target), *target, dy);
            }
            Op::ChannelScale(x, s) => {
                let [n, h, w, c] = image_dims(shape_of(*x), "").expect("checked in forward");
                let xv = val(*x);
                let sv = val(*s);
                let mut dx = Vec::with_capacity(xv.len());
                let mut ds = vec![T::zero(); n * c];
                for b in 0..n {
                    let scale = &sv[b * c..(b + 1) * c];
                    let dsb = &mut ds[b * c..(b + 1) * c];
                    let off = b * h * w * c;
                    for (gp, xp) in gd[off..off + h * w * c]
                        .chunks(c)
                        .zip(xv[off..off + h * w * c].chunks(c))
                    {
                        for ch in 0..c {
                            dx.push(gp[ch] * scale[ch]);
                            dsb[ch] += gp[ch] * xp[ch];
                        }
                    }
                }
                accumulate(grads, shape_of(*x), *x, dx);
                accumulate(grads, shape_of(*s), *s, ds);
            }
        }
    }

    /// Hash of every piecewise branch taken on this tape: ReLU input signs,
    /// max-pool winners and cross-entropy clamps. Two evaluations with the
    /// same fingerprint lie on the same smooth piece.
    pub fn kink_fingerprint(&self) -> u64 {
        let mut h = FnvHasher::default();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.value(*x).data() {
                        h.write_u8((v > T::zero()) as u8);
                    }
                }
                Op::MaxPool(_, argmax) => {
                    for &i in argmax {
                        h.write_usize(i);
                    }
                }
                Op::CrossEntropy { clamped, .. } => {
                    for &c in clamped {
                        h.write_u8(c as u8);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `A[n,k] * B[k,m]`.
fn matmul_nn<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let dst = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            for (d, &bv) in dst.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *d += av * bv;
            }
        }
    }
    out
}

/// `G[n,m] * B[k,m]^T -> [n,k]`.
fn matmul_nt<T: Real>(g: &[T], b: &[T], n: usize, m: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * k];
    for i in 0..n {
        let gr = &g[i * m..(i + 1) * m];
        for p in 0..k {
            out[i * k + p] = gr.iter().zip(&b[p * m..(p + 1) * m]).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// `A[n,k]^T * G[n,m] -> [k,m]`.
fn matmul_tn<T: Real>(a: &[T], g: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * m];
    for i in 0..n {
        let gr = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            for (d, &gv) in out[p * m..(p + 1) * m].iter_mut().zip(gr) {
                *d += av * gv;
            }
        }
    }
    out
}
