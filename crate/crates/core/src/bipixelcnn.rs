//! Gated PixelCNN stacks: the forward (raster-order) stack that emits
//! mixture parameters, and the reverse stack that summarises the context
//! below and to the right of each pixel.
//!
//! Each stack keeps a vertical stream (rows strictly above) and a horizontal
//! stream (current row, to the left) so the receptive field has no blind
//! spot. Every gated residual block can add 1x1-convolved semantic features
//! `Y^z` and reverse features `Y^r` to both streams before the gate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dlm::{dlm_draw, dlm_log_prob, MixtureLayout, MixtureParams, PixelValue};
use crate::error::{shape_err, Error, Result};
use crate::maskedconv::{build_stack_mask, Direction, MaskType, StackKind};
use crate::ndgrad::{Mode, Real, Tensor, Var};
use crate::nn::{Conv2d, Ctx, ParamStore, Trainable};
use crate::vaecore::{ContextMask, Image};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelCnnConfig {
    pub channels: usize,
    pub filters: usize,
    pub blocks: usize,
    pub components: usize,
    /// Kernel `(rows, cols)` of the first (type A) layer.
    pub first_kernel: (usize, usize),
    pub dropout: f64,
    /// Blocks in the reverse stack.
    pub reverse_blocks: usize,
    /// Channels of `Y^r`.
    pub reverse_channels: usize,
}

impl PixelCnnConfig {
    pub fn faithful() -> Self {
        PixelCnnConfig {
            channels: 3,
            filters: 100,
            blocks: 5,
            components: 10,
            first_kernel: (3, 5),
            dropout: 0.5,
            reverse_blocks: 5,
            reverse_channels: 100,
        }
    }

    pub fn desk() -> Self {
        PixelCnnConfig {
            channels: 3,
            filters: 24,
            blocks: 5,
            components: 5,
            first_kernel: (3, 5),
            dropout: 0.5,
            reverse_blocks: 5,
            reverse_channels: 24,
        }
    }

    pub fn layout(&self) -> MixtureLayout {
        MixtureLayout {
            channels: self.channels,
            components: self.components,
        }
    }

    /// Rows above a pixel that can influence its output (the band height
    /// needed for incremental sampling).
    pub fn rows_above(&self) -> usize {
        self.first_kernel.0 / 2 + self.blocks
    }

    pub fn validate(&self) -> Result<()> {
        if self.first_kernel.0 % 2 == 0 || self.first_kernel.1 % 2 == 0 {
            return Err(Error::InvalidArgument("first-layer kernel must be odd".into()));
        }
        if self.filters == 0 || self.blocks == 0 {
            return Err(Error::InvalidArgument("pixelcnn needs filters and blocks".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        MixtureLayout::new(self.channels, self.components).map(|_| ())
    }
}

#[derive(Clone, Debug)]
struct Block<T> {
    v: Conv2d<T>,
    h: Conv2d<T>,
    vh: Conv2d<T>,
    vz: Option<Conv2d<T>>,
    hz: Option<Conv2d<T>>,
    vr: Option<Conv2d<T>>,
    hr: Option<Conv2d<T>>,
}

/// Which conditioning features a stack consumes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Injection {
    pub semantic: Option<usize>,
    pub reverse: Option<usize>,
}

/// A vertical + horizontal gated stack with a 1x1 output head.
#[derive(Clone, Debug)]
pub struct GatedStack<T> {
    pub prefix: String,
    pub direction: Direction,
    pub in_channels: usize,
    pub out_channels: usize,
    pub injection: Injection,
    filters: usize,
    dropout: f64,
    in_v: Conv2d<T>,
    in_h: Conv2d<T>,
    in_vh: Conv2d<T>,
    blocks: Vec<Block<T>>,
    head: Conv2d<T>,
}

impl<T: Real> GatedStack<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        prefix: &str,
        direction: Direction,
        cfg: &PixelCnnConfig,
        blocks: usize,
        in_channels: usize,
        out_channels: usize,
        injection: Injection,
    ) -> Result<Self> {
        cfg.validate()?;
        let f = cfg.filters;
        let (kh, kw) = cfg.first_kernel;
        let mask = |kh, kw, cin, cout, t, s| build_stack_mask(kh, kw, cin, cout, t, s, direction).map(|m| m.to_shared_tensor());
        let conv = |name: String, kh, kw, cin, cout| Conv2d::new(name, kh, kw, cin, cout);
        let in_v = conv(format!("{prefix}/in_v"), kh, kw, in_channels, f).masked(mask(kh, kw, in_channels, f, MaskType::A, StackKind::Vertical)?);
        let in_h = conv(format!("{prefix}/in_h"), kh, kw, in_channels, f).masked(mask(kh, kw, in_channels, f, MaskType::A, StackKind::Horizontal)?);
        let in_vh = conv(format!("{prefix}/in_vh"), 1, 1, f, f);
        let vmask = mask(3, 3, f, 2 * f, MaskType::B, StackKind::Vertical)?;
        let hmask = mask(3, 3, f, 2 * f, MaskType::B, StackKind::Horizontal)?;
        let blocks = (0..blocks)
            .map(|l| {
                let p = format!("{prefix}/block{l}");
                let inj = |tag: &str, c: Option<usize>| c.map(|c| conv(format!("{p}/{tag}"), 1, 1, c, 2 * f));
                Block {
                    v: conv(format!("{p}/v"), 3, 3, f, 2 * f).masked(vmask.clone()),
                    h: conv(format!("{p}/h"), 3, 3, f, 2 * f).masked(hmask.clone()),
                    vh: conv(format!("{p}/vh"), 1, 1, f, 2 * f),
                    vz: inj("v_z", injection.semantic),
                    hz: inj("h_z", injection.semantic),
                    vr: inj("v_r", injection.reverse),
                    hr: inj("h_r", injection.reverse),
                }
            })
            .collect();
        Ok(GatedStack {
            prefix: prefix.to_string(),
            direction,
            in_channels,
            out_channels,
            injection,
            filters: f,
            dropout: cfg.dropout,
            in_v,
            in_h,
            in_vh,
            blocks,
            head: conv(format!("{prefix}/head"), 1, 1, f, out_channels),
        })
    }

    fn convs(&self) -> impl Iterator<Item = &Conv2d<T>> {
        [&self.in_v, &self.in_h, &self.in_vh, &self.head].into_iter().chain(self.blocks.iter().flat_map(|b| {
            [Some(&b.v), Some(&b.h), Some(&b.vh), b.vz.as_ref(), b.hz.as_ref(), b.vr.as_ref(), b.hr.as_ref()]
                .into_iter()
                .flatten()
        }))
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for c in self.convs() {
            c.init(store, rng);
        }
    }

    /// Initialises only the injection filters whose tag (`v_z`, `h_z`,
    /// `v_r`, `h_r`) is listed.
    pub fn init_injections<R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, tags: &[&str], rng: &mut R) {
        for b in &self.blocks {
            for c in [&b.vz, &b.hz, &b.vr, &b.hr].into_iter().flatten() {
                if tags.iter().any(|t| c.name.ends_with(&format!("/{t}"))) {
                    c.init(store, rng);
                }
            }
        }
    }

    fn gate(&self, ctx: &mut Ctx<'_, T>, pre: Var, mode: Mode) -> Result<Var> {
        let f = self.filters;
        let a = ctx.g.slice_channels(pre, 0, f)?;
        let b = ctx.g.slice_channels(pre, f, f)?;
        let a = ctx.g.tanh(a);
        let b = ctx.g.sigmoid(b);
        let y = ctx.g.mul(a, b)?;
        ctx.dropout(y, self.dropout, mode)
    }

    fn inject(ctx: &mut Ctx<'_, T>, pre: Var, conv: &Option<Conv2d<T>>, feat: Option<Var>) -> Result<Var> {
        match (conv, feat) {
            (Some(c), Some(f)) => {
                let y = c.forward(ctx, f)?;
                ctx.g.add(pre, y)
            }
            _ => Ok(pre),
        }
    }

    /// Runs the stack on `[B, H, W, in_channels]` inputs. `yz` / `yr` must be
    /// given exactly when the stack was built with the matching injection.
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var, yz: Option<Var>, yr: Option<Var>, mode: Mode) -> Result<Var> {
        let s = ctx.g.shape(x).to_vec();
        if s.len() != 4 || s[3] != self.in_channels {
            return Err(shape_err("pixelcnn", "input channels", self.in_channels, *s.last().unwrap_or(&0)));
        }
        for (name, want, got) in [("semantic features", self.injection.semantic, yz), ("reverse features", self.injection.reverse, yr)] {
            match (want, got) {
                (Some(c), Some(v)) => {
                    let fs = ctx.g.shape(v);
                    if fs[..3] != s[..3] || fs[3] != c {
                        return Err(shape_err("pixelcnn", "conditioning channels", c, fs[3]));
                    }
                }
                (None, None) => {}
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "{}: {name} supplied/required mismatch",
                        self.prefix
                    )))
                }
            }
        }
        let mut v = self.in_v.forward(ctx, x)?;
        let h0 = self.in_h.forward(ctx, x)?;
        let vh = self.in_vh.forward(ctx, v)?;
        let mut h = ctx.g.add(h0, vh)?;
        for b in &self.blocks {
            let ev = ctx.g.elu(v);
            let mut pre = b.v.forward(ctx, ev)?;
            pre = Self::inject(ctx, pre, &b.vz, yz)?;
            pre = Self::inject(ctx, pre, &b.vr, yr)?;
            let gv = self.gate(ctx, pre, mode)?;
            v = ctx.g.add(v, gv)?;

            let eh = ctx.g.elu(h);
            let mut pre = b.h.forward(ctx, eh)?;
            let ev = ctx.g.elu(v);
            let from_v = b.vh.forward(ctx, ev)?;
            pre = ctx.g.add(pre, from_v)?;
            pre = Self::inject(ctx, pre, &b.hz, yz)?;
            pre = Self::inject(ctx, pre, &b.hr, yr)?;
            let gh = self.gate(ctx, pre, mode)?;
            h = ctx.g.add(h, gh)?;
        }
        let eh = ctx.g.elu(h);
        self.head.forward(ctx, eh)
    }
}

/// Reverse-stack input: masked context values followed by the mask channel.
pub fn reverse_input<T: Real>(images: &Tensor<T>, masks: &Tensor<T>) -> Result<Tensor<T>> {
    let s = images.shape();
    let c = s[3];
    if masks.shape() != [s[0], s[1], s[2], 1] {
        return Err(shape_err("reverse_input", "mask side", s[1], masks.shape().get(1).copied().unwrap_or(0)));
    }
    let mut out = Vec::with_capacity(images.len() / c * (c + 1));
    for (px, &m) in images.data().chunks_exact(c).zip(masks.data()) {
        out.extend(px.iter().map(|&v| v * m));
        out.push(m);
    }
    Tensor::new(&[s[0], s[1], s[2], c + 1], out)
}

/// Rows `lo..=hi` of a `[1, H, W, C]` tensor.
pub fn slice_rows<T: Real>(t: &Tensor<T>, lo: usize, hi: usize) -> Tensor<T> {
    let s = t.shape();
    let row = s[2] * s[3];
    Tensor::new(&[1, hi - lo + 1, s[2], s[3]], t.data()[lo * row..(hi + 1) * row].to_vec()).expect("row slice")
}

/// How the sampler recomputes the forward stack at each target pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Recompute {
    /// Whole image every step (reference implementation).
    Full,
    /// Only the rows that can influence the current row.
    Banded,
}

/// Inputs of the sequential sampler for one image.
pub struct SamplerInputs<'a, T> {
    pub stack: &'a GatedStack<T>,
    pub store: &'a ParamStore<T>,
    pub layout: MixtureLayout,
    pub rows_above: usize,
    /// `[1, M, M, Cz]` semantic features.
    pub yz: Option<&'a Tensor<T>>,
    /// `[1, M, M, Cr]` reverse features.
    pub yr: Option<&'a Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub image: Image,
    /// Log-probability of each sampled pixel (target pixels in raster
    /// order) under the distribution it was drawn from.
    pub log_probs: Vec<f64>,
}

/// Mixture parameters at every pixel for a single image.
pub fn forward_params<T: Real>(inp: &SamplerInputs<'_, T>, image: &Image) -> Result<Tensor<T>> {
    let x = Tensor::new(&[1, image.size, image.size, image.channels], image.values::<T>().collect())?;
    run_rows(inp, &x, image.size, 0, image.size - 1)
}

fn run_rows<T: Real>(inp: &SamplerInputs<'_, T>, x: &Tensor<T>, size: usize, lo: usize, hi: usize) -> Result<Tensor<T>> {
    let full = lo == 0 && hi + 1 == size;
    let mut ctx = Ctx::new(inp.store, Trainable::Nothing);
    let xv = ctx.input(if full { x.clone() } else { slice_rows(x, lo, hi) });
    let yz = inp.yz.map(|t| if full { t.clone() } else { slice_rows(t, lo, hi) }).map(|t| ctx.input(t));
    let yr = inp.yr.map(|t| if full { t.clone() } else { slice_rows(t, lo, hi) }).map(|t| ctx.input(t));
    let out = inp.stack.forward(&mut ctx, xv, yz, yr, Mode::Infer)?;
    Ok(ctx.g.value(out).clone())
}

/// Fills the target pixels of `image` in raster order, drawing each from
/// the forward stack's mixture given everything sampled so far. Context
/// pixels are never modified.
pub fn sample_target<T: Real, R: Rng + ?Sized>(
    inp: &SamplerInputs<'_, T>,
    image: &Image,
    mask: &ContextMask,
    rng: &mut R,
    truncated: bool,
    recompute: Recompute,
) -> Result<Completion> {
    if mask.size != image.size {
        return Err(shape_err("sample_target", "mask side", image.size, mask.size));
    }
    if image.channels != inp.layout.channels {
        return Err(shape_err("sample_target", "image channels", inp.layout.channels, image.channels));
    }
    let (m, c) = (image.size, image.channels);
    let p = inp.layout.param_count();
    let mut out = image.clone();
    let mut x = Tensor::new(&[1, m, m, c], image.values::<T>().collect())?;
    let mut log_probs = Vec::new();
    for (i, j) in mask.target_pixels() {
        let (lo, params) = match recompute {
            Recompute::Full => (0, run_rows(inp, &x, m, 0, m - 1)?),
            Recompute::Banded => {
                let lo = i.saturating_sub(inp.rows_above);
                (lo, run_rows(inp, &x, m, lo, i)?)
            }
        };
        let o = ((i - lo) * m + j) * p;
        let mp = MixtureParams::from_raw(inp.layout, &params.data()[o..o + p]);
        let draw = dlm_draw(&mp, rng, truncated);
        log_probs.push(dlm_log_prob(&mp, &draw.value)?);
        out.set_pixel(i, j, draw.value.intensities());
        let xo = (i * m + j) * c;
        for (k, &v) in draw.value.intensities().iter().enumerate() {
            x.data_mut()[xo + k] = T::from_f64(crate::dlm::to_value(v));
        }
    }
    Ok(Completion { image: out, log_probs })
}

/// Log-probabilities of the target pixels of `image` (raster order) under a
/// single full forward pass.
pub fn target_log_probs<T: Real>(inp: &SamplerInputs<'_, T>, image: &Image, mask: &ContextMask) -> Result<Vec<f64>> {
    let params = forward_params(inp, image)?;
    let p = inp.layout.param_count();
    let m = image.size;
    mask.target_pixels()
        .into_iter()
        .map(|(i, j)| {
            let o = (i * m + j) * p;
            let mp = MixtureParams::from_raw(inp.layout, &params.data()[o..o + p]);
            dlm_log_prob(&mp, &PixelValue::from_bytes(image.pixel(i, j)))
        })
        .collect()
}
