//! Named parameters, layer building blocks and the Adam optimiser.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::{Rng, RngCore};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ndgrad::init::{conv_fans, xavier_uniform};
use crate::ndgrad::{BatchMoments, Graph, Mode, Padding, Real, Tensor, Var};

/// Flat, name-addressed collection of weight tensors. Batch-norm running
/// moments live here too, under `<layer>/running_mean` and
/// `<layer>/running_var`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Total number of scalar entries under `prefix`.
    pub fn count_under(&self, prefix: &str) -> usize {
        self.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian payloads of every tensor
    /// whose name starts with `prefix`.
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(T::to_le_bytes_vec(t.data()));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copies every tensor under `from` to the same suffix under `to`.
    pub fn copy_prefix(&mut self, from: &str, to: &str) {
        let copies: Vec<(String, Tensor<T>)> = self
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(from).map(|rest| (format!("{to}{rest}"), t.clone())))
            .collect();
        for (n, t) in copies {
            self.insert(n, t);
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }
}

fn is_running_stat(name: &str) -> bool {
    name.ends_with("/running_mean") || name.ends_with("/running_var")
}

/// Which bound parameters receive gradients.
#[derive(Clone, Debug)]
pub enum Trainable {
    All,
    Nothing,
    Prefixes(Vec<String>),
}

impl Trainable {
    fn allows(&self, name: &str) -> bool {
        if is_running_stat(name) {
            return false;
        }
        match self {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::Prefixes(p) => p.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// One forward pass: a graph plus lazily bound parameters.
pub struct Ctx<'a, T: Real> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    bound: HashMap<String, Var>,
    trainable: Trainable,
    rng: Option<&'a mut dyn RngCore>,
    moments: Vec<(String, BatchMoments<T>)>,
    trace: Vec<(String, Vec<usize>)>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: Trainable) -> Self {
        Ctx {
            g: Graph::new(),
            store,
            bound: HashMap::new(),
            trainable,
            rng: None,
            moments: Vec::new(),
            trace: Vec::new(),
        }
    }

    /// Supplies the random stream used by dropout.
    pub fn with_rng(mut self, rng: &'a mut dyn RngCore) -> Self {
        self.rng = Some(rng);
        self
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Graph node of the named parameter (bound on first use).
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = if self.trainable.allows(name) {
            self.g.param(t)
        } else {
            self.g.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.g.constant(t)
    }

    /// Records the output shape of a named layer.
    pub fn record(&mut self, name: &str, v: Var) {
        self.trace.push((name.to_string(), self.g.shape(v).to_vec()));
    }

    pub fn trace(&self) -> &[(String, Vec<usize>)] {
        &self.trace
    }

    /// Batch moments collected by train-mode batch norms.
    pub fn take_moments(&mut self) -> Vec<(String, BatchMoments<T>)> {
        std::mem::take(&mut self.moments)
    }

    /// Gradients of trainable parameters after `g.backward`.
    pub fn grads(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .bound
            .iter()
            .filter(|(n, _)| self.trainable.allows(n))
            .filter_map(|(n, &v)| self.g.grad(v).map(|g| (n.clone(), g.clone())))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Inverted dropout; identity in inference mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode) -> Result<Var> {
        if mode == Mode::Infer || rate <= 0.0 {
            return Ok(x);
        }
        let rng = self
            .rng
            .as_deref_mut()
            .ok_or_else(|| Error::InvalidArgument("train-mode dropout needs an rng".into()))?;
        let keep = 1.0 - rate;
        let scale = T::from_f64(1.0 / keep);
        let mask = Tensor::from_fn(self.g.shape(x), |_| if rng.random::<f64>() < keep { scale } else { T::zero() });
        let m = self.g.constant(mask);
        self.g.mul(x, m)
    }
}

/// 2-D convolution with optional constant mask.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub name: String,
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub padding: Padding,
    pub mask: Option<Arc<Tensor<T>>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(name: impl Into<String>, kh: usize, kw: usize, cin: usize, cout: usize) -> Self {
        Conv2d {
            name: name.into(),
            kh,
            kw,
            cin,
            cout,
            stride: 1,
            padding: Padding::Same,
            mask: None,
        }
    }

    pub fn strided(mut self, stride: usize, padding: Padding) -> Self {
        self.stride = stride;
        self.padding = padding;
        self
    }

    pub fn masked(mut self, mask: Arc<Tensor<T>>) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.kh, self.kw, self.cin, self.cout]
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let shape = self.weight_shape();
        let (fi, fo) = conv_fans(&shape);
        store.insert(format!("{}/w", self.name), xavier_uniform(&shape, fi, fo, rng));
        store.insert(format!("{}/b", self.name), Tensor::zeros(&[self.cout]));
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.p(&format!("{}/w", self.name))?;
        let b = ctx.p(&format!("{}/b", self.name))?;
        let y = ctx.g.conv2d(x, w, Some(b), self.stride, self.padding, self.mask.clone())?;
        ctx.record(&self.name, y);
        Ok(y)
    }
}

/// Transposed convolution.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub name: String,
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvTranspose2d {
    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let shape = [self.k, self.k, self.cin, self.cout];
        let (fi, fo) = conv_fans(&shape);
        store.insert(format!("{}/w", self.name), xavier_uniform(&shape, fi, fo, rng));
        store.insert(format!("{}/b", self.name), Tensor::zeros(&[self.cout]));
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.p(&format!("{}/w", self.name))?;
        let b = ctx.p(&format!("{}/b", self.name))?;
        let y = ctx.g.conv_transpose2d(x, w, Some(b), self.stride, self.padding)?;
        ctx.record(&self.name, y);
        Ok(y)
    }
}

/// Fully connected layer over `[B, Din]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Dense {
    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        store.insert(format!("{}/w", self.name), xavier_uniform(&[self.din, self.dout], self.din, self.dout, rng));
        store.insert(format!("{}/b", self.name), Tensor::zeros(&[self.dout]));
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.p(&format!("{}/w", self.name))?;
        let b = ctx.p(&format!("{}/b", self.name))?;
        let y = ctx.g.dense(x, w, Some(b))?;
        ctx.record(&self.name, y);
        Ok(y)
    }
}

/// Batch normalisation over the trailing channel axis.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

pub const BN_EPS: f64 = 1e-5;

impl BatchNorm {
    pub fn init<T: Real>(&self, store: &mut ParamStore<T>) {
        let c = [self.channels];
        store.insert(format!("{}/gamma", self.name), Tensor::ones(&c));
        store.insert(format!("{}/beta", self.name), Tensor::zeros(&c));
        store.insert(format!("{}/running_mean", self.name), Tensor::zeros(&c));
        store.insert(format!("{}/running_var", self.name), Tensor::ones(&c));
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = ctx.p(&format!("{}/gamma", self.name))?;
        let beta = ctx.p(&format!("{}/beta", self.name))?;
        let running = BatchMoments {
            mean: ctx.store.get(&format!("{}/running_mean", self.name))?.data().to_vec(),
            var: ctx.store.get(&format!("{}/running_var", self.name))?.data().to_vec(),
        };
        let (y, moments) = ctx.g.batch_norm(x, gamma, beta, mode, &running, T::from_f64(BN_EPS))?;
        if let Some(m) = moments {
            ctx.moments.push((self.name.clone(), m));
        }
        Ok(y)
    }
}

/// Folds batch moments into running estimates:
/// `running = momentum * running + (1 - momentum) * batch`.
pub fn update_running<T: Real>(store: &mut ParamStore<T>, moments: &[(String, BatchMoments<T>)], momentum: f64) -> Result<()> {
    let m = T::from_f64(momentum);
    let om = T::one() - m;
    for (name, bm) in moments {
        for (suffix, batch) in [("running_mean", &bm.mean), ("running_var", &bm.var)] {
            let t = store.get_mut(&format!("{name}/{suffix}"))?;
            for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                *r = m * *r + om * b;
            }
        }
    }
    Ok(())
}

/// Scales gradients in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [(String, Tensor<T>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: HashMap<String, Vec<T>>,
    v: HashMap<String, Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[(String, Tensor<T>)]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let alpha = T::from_f64(self.lr * c2.sqrt() / c1);
        let eps = T::from_f64(self.eps * c2.sqrt());
        for (name, g) in grads {
            let w = store.get_mut(name)?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            for (((wi, &gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + ob1 * gi;
                *vi = b2 * *vi + ob2 * gi * gi;
                *wi -= alpha * *mi / (vi.sqrt() + eps);
            }
        }
        Ok(())
    }
}
