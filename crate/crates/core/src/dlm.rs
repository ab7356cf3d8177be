//! Discretised logistic mixture over 8-bit pixel intensities.
//!
//! Intensities `0..=255` map to the value grid `v = 2 * i / 255 - 1` in
//! `[-1, 1]`; each bin has half-width `1/255` and the two edge bins extend
//! to infinity. For colour images the mixture shares its component choice
//! across channels and couples them linearly: the green mean is shifted by
//! `c0 * r`, the blue mean by `c1 * r + c2 * g`, using the (quantised)
//! values of the earlier channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ndgrad::{sigmoid, CustomOp, Graph, Real, Tensor, Var};

/// Lower bound applied to network-produced log-scales.
pub const LOG_SCALE_MIN: f64 = -7.0;

const HALF_BIN: f64 = 1.0 / 255.0;

/// Channel count and number of mixture components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureLayout {
    pub channels: usize,
    pub components: usize,
}

impl MixtureLayout {
    pub fn new(channels: usize, components: usize) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "mixture supports 1 or 3 channels, got {channels}"
            )));
        }
        if components == 0 {
            return Err(Error::InvalidArgument("mixture needs at least one component".into()));
        }
        Ok(MixtureLayout { channels, components })
    }

    pub fn coupling_count(&self) -> usize {
        self.channels * (self.channels - 1) / 2
    }

    /// Length of one pixel's raw parameter vector:
    /// `[logits K | means C*K | log-scales C*K | coupling C(C-1)/2*K]`.
    pub fn param_count(&self) -> usize {
        self.components * (1 + 2 * self.channels + self.coupling_count())
    }

    fn means_at(&self) -> usize {
        self.components
    }

    fn scales_at(&self) -> usize {
        self.components * (1 + self.channels)
    }

    fn coeffs_at(&self) -> usize {
        self.components * (1 + 2 * self.channels)
    }
}

/// Integer intensities of one pixel.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelValue(Vec<u8>);

impl PixelValue {
    pub fn new(intensities: &[i64]) -> Result<Self> {
        let mut out = Vec::with_capacity(intensities.len());
        for &v in intensities {
            if !(0..=255).contains(&v) {
                return Err(Error::InvalidArgument(format!("intensity {v} outside [0, 255]")));
            }
            out.push(v as u8);
        }
        Ok(PixelValue(out))
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        PixelValue(bytes.to_vec())
    }

    pub fn intensities(&self) -> &[u8] {
        &self.0
    }

    pub fn normalized(&self) -> Vec<f64> {
        self.0.iter().map(|&i| to_value(i)).collect()
    }
}

/// Grid value of an intensity.
#[inline]
pub fn to_value(intensity: u8) -> f64 {
    2.0 * intensity as f64 / 255.0 - 1.0
}

/// Nearest intensity bin of a continuous value (edge bins are open).
#[inline]
pub fn quantize(value: f64) -> u8 {
    ((value + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Mixture parameters of a single pixel, already in their constrained form
/// (coupling coefficients are the actual multipliers).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub layout: MixtureLayout,
    /// Unnormalised component log-weights, length K.
    pub logits: Vec<f64>,
    /// Means per channel then component (`c * K + i`).
    pub means: Vec<f64>,
    pub log_scales: Vec<f64>,
    /// Coupling coefficients `(g|r), (b|r), (b|g)`, each length K.
    pub coeffs: Vec<f64>,
}

impl MixtureParams {
    pub fn new(layout: MixtureLayout, logits: Vec<f64>, means: Vec<f64>, log_scales: Vec<f64>, coeffs: Vec<f64>) -> Result<Self> {
        let k = layout.components;
        let c = layout.channels;
        for (name, len, want) in [
            ("logits", logits.len(), k),
            ("means", means.len(), c * k),
            ("log-scales", log_scales.len(), c * k),
            ("coupling coefficients", coeffs.len(), layout.coupling_count() * k),
        ] {
            if len != want {
                return Err(shape_err("mixture params", name, want, len));
            }
        }
        Ok(MixtureParams {
            layout,
            logits,
            means,
            log_scales,
            coeffs,
        })
    }

    /// Single grayscale component.
    pub fn single(mean: f64, log_scale: f64) -> Self {
        MixtureParams {
            layout: MixtureLayout {
                channels: 1,
                components: 1,
            },
            logits: vec![0.0],
            means: vec![mean],
            log_scales: vec![log_scale],
            coeffs: vec![],
        }
    }

    /// Normalised log-weights.
    pub fn log_weights(&self) -> Vec<f64> {
        let lse = log_sum_exp(&self.logits);
        self.logits.iter().map(|l| l - lse).collect()
    }

    /// Builds parameters from a raw network output vector, applying the
    /// log-scale floor and `tanh` to the coupling coefficients.
    pub fn from_raw<T: Real>(layout: MixtureLayout, raw: &[T]) -> Self {
        let k = layout.components;
        let c = layout.channels;
        let f = |s: &[T]| s.iter().map(|v| v.as_f64()).collect::<Vec<_>>();
        MixtureParams {
            layout,
            logits: f(&raw[..k]),
            means: f(&raw[layout.means_at()..layout.means_at() + c * k]),
            log_scales: raw[layout.scales_at()..layout.scales_at() + c * k]
                .iter()
                .map(|v| v.as_f64().max(LOG_SCALE_MIN))
                .collect(),
            coeffs: raw[layout.coeffs_at()..layout.param_count()]
                .iter()
                .map(|v| v.as_f64().tanh())
                .collect(),
        }
    }

    fn check_value(&self, value: &PixelValue) -> Result<()> {
        if value.0.len() != self.layout.channels {
            return Err(shape_err("dlm", "pixel channels", self.layout.channels, value.0.len()));
        }
        Ok(())
    }
}

/// Gradient of a pixel log-probability with respect to the constrained
/// parameters of [`MixtureParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureGrad {
    pub logits: Vec<f64>,
    pub means: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub coeffs: Vec<f64>,
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[inline]
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Log-mass of one channel's bin under one logistic component, with its
/// partial derivatives with respect to the (effective) mean and log-scale.
#[inline]
fn bin_log_mass<T: Real>(x: T, intensity: u8, mean: T, log_scale: T) -> (T, T, T) {
    let half = T::from_f64(HALF_BIN);
    let inv_s = (-log_scale).exp();
    let centered = x - mean;
    let plus = inv_s * (centered + half);
    let minus = inv_s * (centered - half);
    let (l, d_plus, d_minus) = if intensity == 0 {
        // log sigma(plus)
        (-softplus(-plus), sigmoid(-plus), T::zero())
    } else if intensity == 255 {
        // log (1 - sigma(minus))
        (-softplus(minus), T::zero(), -sigmoid(minus))
    } else {
        // log(sigma(plus) - sigma(minus))
        //   = log(1 - e^{minus - plus}) - softplus(-plus) - softplus(minus)
        let gap = plus - minus;
        let em = gap.exp_m1();
        let l = (-(-gap).exp_m1()).ln() - softplus(-plus) - softplus(minus);
        let inv = T::one() / em;
        (l, inv + sigmoid(-plus), -inv - sigmoid(minus))
    };
    let d_mean = -inv_s * (d_plus + d_minus);
    let d_log_scale = -(plus * d_plus + minus * d_minus);
    (l, d_mean, d_log_scale)
}

/// Shared scratch for [`mixture_log_prob`].
pub(crate) struct Scratch<T> {
    comp: Vec<T>,
    d_mean: Vec<T>,
    d_ls: Vec<T>,
    log_w: Vec<T>,
}

impl<T: Real> Scratch<T> {
    pub(crate) fn new(layout: MixtureLayout) -> Self {
        let n = layout.channels * layout.components;
        Scratch {
            comp: vec![T::zero(); layout.components],
            d_mean: vec![T::zero(); n],
            d_ls: vec![T::zero(); n],
            log_w: vec![T::zero(); layout.components],
        }
    }
}

/// Gradient sinks for [`mixture_log_prob`], laid out like [`MixtureParams`].
pub(crate) struct GradOut<'a, T> {
    pub logits: &'a mut [T],
    pub means: &'a mut [T],
    pub log_scales: &'a mut [T],
    pub coeffs: &'a mut [T],
}

/// Log-probability of `x` (intensities) under constrained mixture params.
#[allow(clippy::too_many_arguments)]
pub(crate) fn mixture_log_prob<T: Real>(
    layout: MixtureLayout,
    logits: &[T],
    means: &[T],
    log_scales: &[T],
    coeffs: &[T],
    x: &[u8],
    scratch: &mut Scratch<T>,
    grad: Option<GradOut<'_, T>>,
) -> T {
    let k = layout.components;
    let c = layout.channels;
    let xv: [T; 3] = std::array::from_fn(|ch| if ch < c { T::from_f64(to_value(x[ch])) } else { T::zero() });

    let lmax = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = lmax + logits.iter().map(|&l| (l - lmax).exp()).sum::<T>().ln();
    for i in 0..k {
        scratch.log_w[i] = logits[i] - lse;
        let mut lp = scratch.log_w[i];
        for ch in 0..c {
            let mut m = means[ch * k + i];
            if ch == 1 {
                m += coeffs[i] * xv[0];
            } else if ch == 2 {
                m += coeffs[k + i] * xv[0] + coeffs[2 * k + i] * xv[1];
            }
            let (l, dm, ds) = bin_log_mass(xv[ch], x[ch], m, log_scales[ch * k + i]);
            lp += l;
            scratch.d_mean[ch * k + i] = dm;
            scratch.d_ls[ch * k + i] = ds;
        }
        scratch.comp[i] = lp;
    }
    let cmax = scratch.comp.iter().copied().fold(T::neg_infinity(), T::max);
    let total = cmax + scratch.comp.iter().map(|&v| (v - cmax).exp()).sum::<T>().ln();

    if let Some(g) = grad {
        for i in 0..k {
            let r = (scratch.comp[i] - total).exp();
            g.logits[i] += r - scratch.log_w[i].exp();
            for ch in 0..c {
                g.means[ch * k + i] += r * scratch.d_mean[ch * k + i];
                g.log_scales[ch * k + i] += r * scratch.d_ls[ch * k + i];
            }
            if c == 3 {
                g.coeffs[i] += r * scratch.d_mean[k + i] * xv[0];
                g.coeffs[k + i] += r * scratch.d_mean[2 * k + i] * xv[0];
                g.coeffs[2 * k + i] += r * scratch.d_mean[2 * k + i] * xv[1];
            }
        }
    }
    total
}

/// `log p(value | params)`.
pub fn dlm_log_prob(params: &MixtureParams, value: &PixelValue) -> Result<f64> {
    params.check_value(value)?;
    let mut scratch = Scratch::new(params.layout);
    Ok(mixture_log_prob(
        params.layout,
        &params.logits,
        &params.means,
        &params.log_scales,
        &params.coeffs,
        &value.0,
        &mut scratch,
        None,
    ))
}

/// `log p(value | params)` together with its gradient.
pub fn dlm_log_prob_grad(params: &MixtureParams, value: &PixelValue) -> Result<(f64, MixtureGrad)> {
    params.check_value(value)?;
    let mut scratch = Scratch::new(params.layout);
    let mut grad = MixtureGrad {
        logits: vec![0.0; params.logits.len()],
        means: vec![0.0; params.means.len()],
        log_scales: vec![0.0; params.log_scales.len()],
        coeffs: vec![0.0; params.coeffs.len()],
    };
    let lp = mixture_log_prob(
        params.layout,
        &params.logits,
        &params.means,
        &params.log_scales,
        &params.coeffs,
        &value.0,
        &mut scratch,
        Some(GradOut {
            logits: &mut grad.logits,
            means: &mut grad.means,
            log_scales: &mut grad.log_scales,
            coeffs: &mut grad.coeffs,
        }),
    );
    Ok((lp, grad))
}

/// Full record of one draw, including the value before quantisation.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub component: usize,
    /// Effective (coupling-shifted) mean per channel.
    pub effective_means: Vec<f64>,
    pub scales: Vec<f64>,
    /// Continuous values before clamping and quantisation.
    pub continuous: Vec<f64>,
    pub value: PixelValue,
}

fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Draws a pixel. The component is chosen from the mixture weights; each
/// channel is sampled by inverse CDF (restricted to `[mu - s, mu + s]` when
/// `truncated`), where `mu` includes the coupling shift from earlier
/// channels. Exactly `1 + channels` uniforms are consumed.
pub fn dlm_draw<R: Rng + ?Sized>(params: &MixtureParams, rng: &mut R, truncated: bool) -> Draw {
    let k = params.layout.components;
    let c = params.layout.channels;
    let weights: Vec<f64> = params.log_weights().iter().map(|l| l.exp()).collect();
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut component = k - 1;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            component = i;
            break;
        }
    }
    let i = component;
    let mut effective_means = Vec::with_capacity(c);
    let mut scales = Vec::with_capacity(c);
    let mut continuous = Vec::with_capacity(c);
    let mut out = Vec::with_capacity(c);
    let lo = sigmoid(-1.0f64);
    let hi = sigmoid(1.0f64);
    for ch in 0..c {
        let mut m = params.means[ch * k + i];
        if ch == 1 {
            m += params.coeffs[i] * to_value(out[0]);
        } else if ch == 2 {
            m += params.coeffs[k + i] * to_value(out[0]) + params.coeffs[2 * k + i] * to_value(out[1]);
        }
        let s = params.log_scales[ch * k + i].exp();
        let u = open_unit(rng);
        let v = if truncated {
            let p = lo + u * (hi - lo);
            (m + s * (p.ln() - (-p).ln_1p())).clamp(m - s, m + s)
        } else {
            m + s * (u.ln() - (-u).ln_1p())
        };
        effective_means.push(m);
        scales.push(s);
        continuous.push(v);
        out.push(quantize(v));
    }
    Draw {
        component,
        effective_means,
        scales,
        continuous,
        value: PixelValue(out),
    }
}

pub fn dlm_sample<R: Rng + ?Sized>(params: &MixtureParams, rng: &mut R) -> PixelValue {
    dlm_draw(params, rng, false).value
}

pub fn dlm_sample_truncated<R: Rng + ?Sized>(params: &MixtureParams, rng: &mut R) -> PixelValue {
    dlm_draw(params, rng, true).value
}

/// Per-pixel log-probabilities of `targets` (`[B,H,W,C]` intensities) under
/// raw network outputs `raw` (`[B,H,W,P]`).
pub fn pixel_log_probs<T: Real>(layout: MixtureLayout, raw: &Tensor<T>, targets: &[u8]) -> Result<Vec<f64>> {
    let p = layout.param_count();
    let c = layout.channels;
    if raw.last_dim() != p {
        return Err(shape_err("pixel_log_probs", "parameter channels", p, raw.last_dim()));
    }
    let pixels = raw.len() / p;
    if targets.len() != pixels * c {
        return Err(shape_err("pixel_log_probs", "target length", pixels * c, targets.len()));
    }
    let mut scratch = Scratch::new(layout);
    let mut buf = RawBuf::new(layout);
    Ok(raw
        .data()
        .chunks_exact(p)
        .zip(targets.chunks_exact(c))
        .map(|(r, x)| {
            buf.load(r);
            let lp = mixture_log_prob(layout, &buf.logits, &buf.means, &buf.log_scales, &buf.coeffs, x, &mut scratch, None);
            lp.as_f64()
        })
        .collect())
}

/// Raw-to-constrained conversion buffer for one pixel.
struct RawBuf<T> {
    layout: MixtureLayout,
    logits: Vec<T>,
    means: Vec<T>,
    log_scales: Vec<T>,
    coeffs: Vec<T>,
}

impl<T: Real> RawBuf<T> {
    fn new(layout: MixtureLayout) -> Self {
        let k = layout.components;
        let c = layout.channels;
        RawBuf {
            layout,
            logits: vec![T::zero(); k],
            means: vec![T::zero(); c * k],
            log_scales: vec![T::zero(); c * k],
            coeffs: vec![T::zero(); layout.coupling_count() * k],
        }
    }

    fn load(&mut self, raw: &[T]) {
        let l = self.layout;
        let floor = T::from_f64(LOG_SCALE_MIN);
        self.logits.copy_from_slice(&raw[..l.components]);
        self.means.copy_from_slice(&raw[l.means_at()..l.scales_at()]);
        for (d, &s) in self.log_scales.iter_mut().zip(&raw[l.scales_at()..l.coeffs_at()]) {
            *d = s.max(floor);
        }
        for (d, &s) in self.coeffs.iter_mut().zip(&raw[l.coeffs_at()..l.param_count()]) {
            *d = s.tanh();
        }
    }
}

struct DlmNllOp<T> {
    grad: Tensor<T>,
}

impl<T: Real> CustomOp<T> for DlmNllOp<T> {
    fn name(&self) -> &'static str {
        "dlm_nll"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let u = grad.item();
        vec![Some(self.grad.map(|v| v * u))]
    }
}

/// Summary returned alongside the loss node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NllStats {
    /// Number of pixels that contributed.
    pub pixels: usize,
    /// Sum of their negative log-probabilities (nats), over the whole batch.
    pub total_nll: f64,
}

/// Negative log-likelihood of `targets` under raw mixture outputs `raw`
/// (`[B,H,W,P]`), summed over pixels with nonzero `weights` (`B*H*W`) and
/// averaged over the batch.
pub fn dlm_nll<T: Real>(
    g: &mut Graph<T>,
    layout: MixtureLayout,
    raw: Var,
    targets: &[u8],
    weights: &[bool],
) -> Result<(Var, NllStats)> {
    let shape = g.shape(raw).to_vec();
    let p = layout.param_count();
    let c = layout.channels;
    if shape.len() != 4 || shape[3] != p {
        return Err(shape_err("dlm_nll", "parameter channels", p, *shape.last().unwrap_or(&0)));
    }
    let batch = shape[0];
    let pixels = shape[0] * shape[1] * shape[2];
    if targets.len() != pixels * c {
        return Err(shape_err("dlm_nll", "target length", pixels * c, targets.len()));
    }
    if weights.len() != pixels {
        return Err(shape_err("dlm_nll", "weight length", pixels, weights.len()));
    }
    let need_grad = g.requires_grad(raw);
    let k = layout.components;
    let values = g.value(raw).data();
    let mut grad = if need_grad { vec![T::zero(); values.len()] } else { Vec::new() };
    let mut scratch = Scratch::new(layout);
    let mut buf = RawBuf::new(layout);
    let mut gl = vec![T::zero(); k];
    let mut gm = vec![T::zero(); c * k];
    let mut gs = vec![T::zero(); c * k];
    let mut gc = vec![T::zero(); layout.coupling_count() * k];
    let scale = -T::one() / T::from_f64(batch as f64);
    let floor = T::from_f64(LOG_SCALE_MIN);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for px in 0..pixels {
        if !weights[px] {
            continue;
        }
        let r = &values[px * p..(px + 1) * p];
        buf.load(r);
        let x = &targets[px * c..(px + 1) * c];
        let lp = if need_grad {
            for v in [&mut gl, &mut gm, &mut gs, &mut gc] {
                v.iter_mut().for_each(|e| *e = T::zero());
            }
            let lp = mixture_log_prob(
                layout,
                &buf.logits,
                &buf.means,
                &buf.log_scales,
                &buf.coeffs,
                x,
                &mut scratch,
                Some(GradOut {
                    logits: &mut gl,
                    means: &mut gm,
                    log_scales: &mut gs,
                    coeffs: &mut gc,
                }),
            );
            let dst = &mut grad[px * p..(px + 1) * p];
            for i in 0..k {
                dst[i] = scale * gl[i];
            }
            for j in 0..c * k {
                dst[layout.means_at() + j] = scale * gm[j];
                let raw_s = r[layout.scales_at() + j];
                dst[layout.scales_at() + j] = if raw_s < floor { T::zero() } else { scale * gs[j] };
            }
            for j in 0..gc.len() {
                let t = buf.coeffs[j];
                dst[layout.coeffs_at() + j] = scale * gc[j] * (T::one() - t * t);
            }
            lp
        } else {
            mixture_log_prob(layout, &buf.logits, &buf.means, &buf.log_scales, &buf.coeffs, x, &mut scratch, None)
        };
        total -= lp.as_f64();
        count += 1;
    }
    let value = Tensor::scalar(T::from_f64(total / batch as f64));
    let grad = if need_grad {
        Tensor::new(&shape, grad)?
    } else {
        Tensor::zeros(&[1])
    };
    let v = g.custom(&[raw], value, Box::new(DlmNllOp { grad }));
    Ok((
        v,
        NllStats {
            pixels: count,
            total_nll: total,
        },
    ))
}
