use std::sync::Arc;

use crate::error::{shape_err, Error, Result};

use super::kernels::{self, ConvGeom, Padding};
use super::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation implemented outside the engine.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (or `None` when the input does not
    /// receive one), given the upstream gradient of the output.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

/// Train/infer switch shared by batch norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-channel batch statistics produced by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

struct ConvState<T> {
    geom: ConvGeom,
    mask: Option<Arc<Tensor<T>>>,
    taps: Vec<(usize, usize)>,
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Elu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        state: Box<ConvState<T>>,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    BatchNormInfer {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only computation graph with reverse-mode differentiation.
///
/// Nodes are created in topological order, so backward is a single reverse
/// sweep over the node list.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf: receives a gradient on backward.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(shape_err(op, "rank", sa.len(), sb.len()));
        }
        for (&x, &y) in sa.iter().zip(sb) {
            if x != y {
                return Err(shape_err(op, "elementwise operand", x, y));
            }
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds a `[C]` vector along the trailing dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        let bl = self.value(bias).len();
        if bl != c {
            return Err(shape_err("add_bias", "channels", c, bl));
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for px in value.data_mut().chunks_exact_mut(c) {
            for (v, &bv) in px.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { v.exp_m1() },
            Op::Elu(x),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Concatenates along the trailing dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 {
                return Err(shape_err("concat", "rank", lead.len() + 1, s.len()));
            }
            for (&a, &b) in lead.iter().zip(s) {
                if a != b {
                    return Err(shape_err("concat", "leading dimension", a, b));
                }
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(&shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Takes channels `start..start + len` of the trailing dimension.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().unwrap();
        if start + len > c || len == 0 {
            return Err(shape_err("slice_channels", "channels", c, start + len));
        }
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks_exact(c)
            .flat_map(|px| px[start..start + len].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(&shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Slice(x, start, len), rg))
    }

    /// 2-D cross-correlation of `[B,H,W,Cin]` with `[kh,kw,Cin,Cout]` filters.
    ///
    /// When `mask` is given the effective filter is `weight * mask`; the mask
    /// is a constant and kernel taps that are fully masked are skipped.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
        mask: Option<Arc<Tensor<T>>>,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("conv2d", "input rank", 4, xs.len()));
        }
        if ws.len() != 4 {
            return Err(shape_err("conv2d", "weight rank", 4, ws.len()));
        }
        if ws[2] != xs[3] {
            return Err(shape_err("conv2d", "input channels", ws[2], xs[3]));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if let Some(b) = bias {
            if self.value(b).len() != ws[3] {
                return Err(shape_err("conv2d", "bias length", ws[3], self.value(b).len()));
            }
        }
        if let Some(m) = &mask {
            if m.shape() != ws.as_slice() {
                let i = m.shape().iter().zip(&ws).position(|(a, b)| a != b).unwrap_or(0);
                return Err(shape_err("conv2d", "mask dimension", ws[i], m.shape()[i]));
            }
        }
        let (kh, kw) = (ws[0], ws[1]);
        let ho = kernels::conv_out_len(xs[1], kh, stride, padding)
            .ok_or_else(|| shape_err("conv2d", "height (smaller than kernel)", kh, xs[1]))?;
        let wo = kernels::conv_out_len(xs[2], kw, stride, padding)
            .ok_or_else(|| shape_err("conv2d", "width (smaller than kernel)", kw, xs[2]))?;
        let (pad_top, pad_left) = match padding {
            Padding::Same => (
                kernels::same_pad(xs[1], ho, kh, stride),
                kernels::same_pad(xs[2], wo, kw, stride),
            ),
            Padding::Valid => (0, 0),
        };
        let geom = ConvGeom {
            batch: xs[0],
            h: xs[1],
            w: xs[2],
            cin: xs[3],
            kh,
            kw,
            cout: ws[3],
            stride,
            ho,
            wo,
            pad_top,
            pad_left,
        };
        let taps = kernels::active_taps(kh, kw, geom.cin * geom.cout, mask.as_deref().map(|m| m.data()));
        let eff = self.effective_weight(weight, mask.as_deref());
        let mut out = vec![T::zero(); geom.batch * ho * wo * geom.cout];
        kernels::conv_forward(
            &geom,
            self.value(input).data(),
            eff.as_deref().unwrap_or(self.value(weight).data()),
            bias.map(|b| self.value(b).data()),
            &taps,
            &mut out,
        );
        let value = Tensor::new(&[geom.batch, ho, wo, geom.cout], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                state: Box::new(ConvState { geom, mask, taps }),
            },
            rg,
        ))
    }

    fn effective_weight(&self, weight: Var, mask: Option<&Tensor<T>>) -> Option<Vec<T>> {
        mask.map(|m| {
            self.value(weight)
                .data()
                .iter()
                .zip(m.data())
                .map(|(&w, &k)| w * k)
                .collect()
        })
    }

    /// Transposed convolution with `[kh,kw,Cin,Cout]` filters whose output
    /// shape inverts the matching [`Graph::conv2d`].
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("conv_transpose2d", "input rank", 4, xs.len()));
        }
        if ws.len() != 4 {
            return Err(shape_err("conv_transpose2d", "weight rank", 4, ws.len()));
        }
        if ws[2] != xs[3] {
            return Err(shape_err("conv_transpose2d", "input channels", ws[2], xs[3]));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv_transpose2d stride must be positive".into()));
        }
        if let Some(b) = bias {
            if self.value(b).len() != ws[3] {
                return Err(shape_err("conv_transpose2d", "bias length", ws[3], self.value(b).len()));
            }
        }
        let (kh, kw) = (ws[0], ws[1]);
        let h = kernels::conv_transpose_out_len(xs[1], kh, stride, padding);
        let w = kernels::conv_transpose_out_len(xs[2], kw, stride, padding);
        let (pad_top, pad_left) = match padding {
            Padding::Same => (
                kernels::same_pad(h, xs[1], kh, stride),
                kernels::same_pad(w, xs[2], kw, stride),
            ),
            Padding::Valid => (0, 0),
        };
        let geom = ConvGeom {
            batch: xs[0],
            h,
            w,
            cin: xs[3],
            kh,
            kw,
            cout: ws[3],
            stride,
            ho: xs[1],
            wo: xs[2],
            pad_top,
            pad_left,
        };
        let mut out = vec![T::zero(); geom.batch * h * w * geom.cout];
        kernels::conv_transpose_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &mut out,
        );
        let value = Tensor::new(&[geom.batch, h, w, geom.cout], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Affine map of `[B, Din]` rows by `[Din, Dout]` weights.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 {
            return Err(shape_err("dense", "input rank", 2, xs.len()));
        }
        if ws.len() != 2 {
            return Err(shape_err("dense", "weight rank", 2, ws.len()));
        }
        if xs[1] != ws[0] {
            return Err(shape_err("dense", "inner dimension", ws[0], xs[1]));
        }
        if let Some(b) = bias {
            if self.value(b).len() != ws[1] {
                return Err(shape_err("dense", "bias length", ws[1], self.value(b).len()));
            }
        }
        let mut out = vec![T::zero(); xs[0] * ws[1]];
        kernels::dense_forward(
            xs[0],
            xs[1],
            ws[1],
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &mut out,
        );
        let value = Tensor::new(&[xs[0], ws[1]], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Dense { input, weight, bias }, rg))
    }

    /// Batch normalisation over every axis except the trailing channel axis.
    ///
    /// In train mode the batch moments are returned so the caller can update
    /// its running estimates; in infer mode `running` supplies them.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        running: &BatchMoments<T>,
        eps: T,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        let xs = self.shape(input).to_vec();
        let c = *xs.last().unwrap();
        for (name, v) in [("gamma length", gamma), ("beta length", beta)] {
            if self.value(v).len() != c {
                return Err(shape_err("batch_norm", name, c, self.value(v).len()));
            }
        }
        let x = self.value(input).data();
        let rows = x.len() / c;
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let rg = self.rg(&[input, gamma, beta]);
        match mode {
            Mode::Train => {
                if xs[0] < 2 {
                    return Err(Error::BatchTooSmall(xs[0]));
                }
                let n = T::from_f64(rows as f64);
                let mut mean = vec![T::zero(); c];
                for px in x.chunks_exact(c) {
                    for (m, &v) in mean.iter_mut().zip(px) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                let mut var = vec![T::zero(); c];
                for px in x.chunks_exact(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(px).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n);
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let mut xhat = vec![T::zero(); x.len()];
                let mut out = vec![T::zero(); x.len()];
                for (r, px) in x.chunks_exact(c).enumerate() {
                    for j in 0..c {
                        let h = (px[j] - mean[j]) * inv_std[j];
                        xhat[r * c + j] = h;
                        out[r * c + j] = g[j] * h + b[j];
                    }
                }
                let value = Tensor::new(&xs, out)?;
                let xhat = Tensor::new(&xs, xhat)?;
                let moments = BatchMoments { mean, var };
                let v = self.push(
                    value,
                    Op::BatchNormTrain {
                        input,
                        gamma,
                        beta,
                        xhat,
                        inv_std,
                    },
                    rg,
                );
                Ok((v, Some(moments)))
            }
            Mode::Infer => {
                if running.mean.len() != c || running.var.len() != c {
                    return Err(shape_err("batch_norm", "running moments", c, running.mean.len()));
                }
                let inv_std: Vec<T> = running.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let mut out = vec![T::zero(); x.len()];
                for (r, px) in x.chunks_exact(c).enumerate() {
                    for j in 0..c {
                        out[r * c + j] = g[j] * (px[j] - running.mean[j]) * inv_std[j] + b[j];
                    }
                }
                let value = Tensor::new(&xs, out)?;
                let v = self.push(
                    value,
                    Op::BatchNormInfer {
                        input,
                        gamma,
                        beta,
                        mean: running.mean.clone(),
                        inv_std,
                    },
                    rg,
                );
                Ok((v, None))
            }
        }
    }

    /// Registers an externally computed value together with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let shape = self.nodes[v.0].value.shape().to_vec();
        let slot = self.grads[v.0].get_or_insert_with(|| Tensor::zeros(&shape));
        f(slot.data_mut());
    }

    /// Reverse-mode sweep from a scalar root. Gradients of every ancestor
    /// that requires one are available through [`Graph::grad`] afterwards;
    /// a node reached along several paths receives the sum.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rs = self.value(root).shape().to_vec();
        if self.value(root).len() != 1 {
            return Err(Error::NonScalarRoot(rs));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor::ones(&rs));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor<T>) {
        // The op is temporarily moved out so parent values can be borrowed
        // while gradients are accumulated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |u, y| u * y);
                let gb = g.zip_map(self.value(*a), |u, x| u * x);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::AddBias(x, bias) => {
                self.accumulate(*x, g.clone());
                let c = g.last_dim();
                self.accumulate_with(*bias, |gb| {
                    for px in g.data().chunks_exact(c) {
                        for (s, &v) in gb.iter_mut().zip(px) {
                            *s += v;
                        }
                    }
                });
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(*x, g.map(|v| v * s));
            }
            Op::AddScalar(x) => self.accumulate(*x, g.clone()),
            Op::Elu(x) => {
                let out = &self.nodes[i].value;
                let gx = g.zip_map(out, |u, y| if y > T::zero() { u } else { u * (y + T::one()) });
                self.accumulate(*x, gx);
            }
            Op::Sigmoid(x) => {
                let out = &self.nodes[i].value;
                let gx = g.zip_map(out, |u, y| u * y * (T::one() - y));
                self.accumulate(*x, gx);
            }
            Op::Tanh(x) => {
                let out = &self.nodes[i].value;
                let gx = g.zip_map(out, |u, y| u * (T::one() - y * y));
                self.accumulate(*x, gx);
            }
            Op::Exp(x) => {
                let out = &self.nodes[i].value;
                let gx = g.zip_map(out, |u, y| u * y);
                self.accumulate(*x, gx);
            }
            Op::Square(x) => {
                let two = T::from_f64(2.0);
                let gx = g.zip_map(self.value(*x), |u, v| u * two * v);
                self.accumulate(*x, gx);
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let gx = g.zip_map(self.value(*x), |u, v| if v < lo || v > hi { T::zero() } else { u });
                self.accumulate(*x, gx);
            }
            Op::Sum(x) => {
                let u = g.item();
                let gx = Tensor::full(self.value(*x).shape(), u);
                self.accumulate(*x, gx);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                let gx = g.clone().reshape(&shape).expect("reshape grad");
                self.accumulate(*x, gx);
            }
            Op::Concat(parts) => {
                let total = g.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.nodes[p.0].requires_grad {
                        let data: Vec<T> = g
                            .data()
                            .chunks_exact(total)
                            .flat_map(|px| px[offset..offset + w].iter().copied())
                            .collect();
                        let gp = Tensor::new(self.value(p).shape(), data).expect("concat grad");
                        self.accumulate(p, gp);
                    }
                    offset += w;
                }
            }
            Op::Slice(x, start, len) => {
                let (start, len) = (*start, *len);
                let c = self.value(*x).last_dim();
                self.accumulate_with(*x, |gx| {
                    for (dst, src) in gx.chunks_exact_mut(c).zip(g.data().chunks_exact(len)) {
                        for (d, &s) in dst[start..start + len].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                state,
            } => {
                let (input, weight) = (*input, *weight);
                let need_in = self.nodes[input.0].requires_grad;
                let need_w = self.nodes[weight.0].requires_grad;
                let eff = self.effective_weight(weight, state.mask.as_deref());
                let wdata = eff.unwrap_or_else(|| self.value(weight).data().to_vec());
                let mut gi = need_in.then(|| vec![T::zero(); self.value(input).len()]);
                let mut gw = need_w.then(|| vec![T::zero(); wdata.len()]);
                kernels::conv_backward(
                    &state.geom,
                    self.value(input).data(),
                    &wdata,
                    &state.taps,
                    g.data(),
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                );
                if let Some(gi) = gi {
                    let t = Tensor::new(self.value(input).shape(), gi).expect("conv grad");
                    self.accumulate(input, t);
                }
                if let Some(mut gw) = gw {
                    if let Some(m) = &state.mask {
                        for (v, &k) in gw.iter_mut().zip(m.data()) {
                            *v *= k;
                        }
                    }
                    let t = Tensor::new(self.value(weight).shape(), gw).expect("conv grad");
                    self.accumulate(weight, t);
                }
                if let Some(b) = *bias {
                    self.bias_grad(b, g);
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (input, weight) = (*input, *weight);
                let need_in = self.nodes[input.0].requires_grad;
                let need_w = self.nodes[weight.0].requires_grad;
                let mut gi = need_in.then(|| vec![T::zero(); self.value(input).len()]);
                let mut gw = need_w.then(|| vec![T::zero(); self.value(weight).len()]);
                kernels::conv_transpose_backward(
                    geom,
                    self.value(input).data(),
                    self.value(weight).data(),
                    g.data(),
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                );
                if let Some(gi) = gi {
                    let t = Tensor::new(self.value(input).shape(), gi).expect("deconv grad");
                    self.accumulate(input, t);
                }
                if let Some(gw) = gw {
                    let t = Tensor::new(self.value(weight).shape(), gw).expect("deconv grad");
                    self.accumulate(weight, t);
                }
                if let Some(b) = *bias {
                    self.bias_grad(b, g);
                }
            }
            Op::Dense { input, weight, bias } => {
                let (input, weight) = (*input, *weight);
                let xs = self.value(input).shape().to_vec();
                let dout = self.value(weight).shape()[1];
                let need_in = self.nodes[input.0].requires_grad;
                let need_w = self.nodes[weight.0].requires_grad;
                let mut gi = need_in.then(|| vec![T::zero(); self.value(input).len()]);
                let mut gw = need_w.then(|| vec![T::zero(); self.value(weight).len()]);
                kernels::dense_backward(
                    xs[0],
                    xs[1],
                    dout,
                    self.value(input).data(),
                    self.value(weight).data(),
                    g.data(),
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                );
                if let Some(gi) = gi {
                    self.accumulate(input, Tensor::new(&xs, gi).expect("dense grad"));
                }
                if let Some(gw) = gw {
                    let t = Tensor::new(self.value(weight).shape(), gw).expect("dense grad");
                    self.accumulate(weight, t);
                }
                if let Some(b) = *bias {
                    self.bias_grad(b, g);
                }
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = g.last_dim();
                let rows = g.len() / c;
                let n = T::from_f64(rows as f64);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (gp, hp) in g.data().chunks_exact(c).zip(xhat.data().chunks_exact(c)) {
                    for j in 0..c {
                        sum_g[j] += gp[j];
                        sum_gx[j] += gp[j] * hp[j];
                    }
                }
                let gam = self.value(*gamma).data().to_vec();
                if self.nodes[input.0].requires_grad {
                    let mut gx = vec![T::zero(); g.len()];
                    for (r, (gp, hp)) in g.data().chunks_exact(c).zip(xhat.data().chunks_exact(c)).enumerate() {
                        for j in 0..c {
                            gx[r * c + j] = gam[j] * inv_std[j] / n * (n * gp[j] - sum_g[j] - hp[j] * sum_gx[j]);
                        }
                    }
                    let t = Tensor::new(g.shape(), gx).expect("bn grad");
                    self.accumulate(*input, t);
                }
                self.accumulate_with(*gamma, |gg| {
                    for (s, &v) in gg.iter_mut().zip(&sum_gx) {
                        *s += v;
                    }
                });
                self.accumulate_with(*beta, |gb| {
                    for (s, &v) in gb.iter_mut().zip(&sum_g) {
                        *s += v;
                    }
                });
            }
            Op::BatchNormInfer {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let c = g.last_dim();
                let gam = self.value(*gamma).data().to_vec();
                if self.nodes[input.0].requires_grad {
                    let mut gx = g.clone();
                    for px in gx.data_mut().chunks_exact_mut(c) {
                        for j in 0..c {
                            px[j] *= gam[j] * inv_std[j];
                        }
                    }
                    self.accumulate(*input, gx);
                }
                let x = self.value(*input).data().to_vec();
                self.accumulate_with(*gamma, |gg| {
                    for (gp, xp) in g.data().chunks_exact(c).zip(x.chunks_exact(c)) {
                        for j in 0..c {
                            gg[j] += gp[j] * (xp[j] - mean[j]) * inv_std[j];
                        }
                    }
                });
                self.bias_grad(*beta, g);
            }
            Op::Custom { inputs, op: custom } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = custom.backward(&ins, &self.nodes[i].value, g);
                for (v, gv) in inputs.iter().zip(grads) {
                    if let Some(gv) = gv {
                        self.accumulate(*v, gv);
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }

    fn bias_grad(&mut self, b: Var, g: &Tensor<T>) {
        let c = g.last_dim();
        self.accumulate_with(b, |gb| {
            for px in g.data().chunks_exact(c) {
                for (s, &v) in gb.iter_mut().zip(px) {
                    *s += v;
                }
            }
        });
    }
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
