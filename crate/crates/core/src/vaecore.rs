//! Context encoder and deconvolutional semantic decoder.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ndgrad::{conv_out_len, conv_transpose_out_len, Mode, Padding, Real, Tensor, Var};
use crate::nn::{BatchNorm, Conv2d, ConvTranspose2d, Ctx, Dense, ParamStore};

pub const LOG_VAR_MIN: f64 = -30.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Model size preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Faithful,
    Desk,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Faithful => "faithful",
            Preset::Desk => "desk",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "faithful" => Ok(Preset::Faithful),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::InvalidArgument(format!("unknown preset {s:?}"))),
        }
    }
}

/// One convolution (or transposed convolution) followed by BN and ELU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub channels: usize,
}

const fn spec(kernel: usize, stride: usize, padding: Padding, channels: usize) -> ConvSpec {
    ConvSpec {
        kernel,
        stride,
        padding,
        channels,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub image_size: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub encoder: Vec<ConvSpec>,
    pub decoder_fc: usize,
    pub decoder: Vec<ConvSpec>,
}

impl VaeConfig {
    pub fn faithful() -> Self {
        use Padding::*;
        VaeConfig {
            image_size: 32,
            channels: 3,
            latent_dim: 32,
            encoder: vec![
                spec(1, 1, Same, 32),
                spec(4, 2, Same, 64),
                spec(4, 2, Same, 128),
                spec(4, 2, Same, 256),
                spec(4, 1, Valid, 512),
            ],
            decoder_fc: 512,
            decoder: vec![
                spec(4, 1, Valid, 256),
                spec(4, 2, Same, 128),
                spec(4, 2, Same, 64),
                spec(4, 2, Same, 32),
            ],
        }
    }

    /// Quarter widths, 16x16 images, one stride-2 stage fewer on each side.
    pub fn desk() -> Self {
        use Padding::*;
        VaeConfig {
            image_size: 16,
            channels: 3,
            latent_dim: 8,
            encoder: vec![
                spec(1, 1, Same, 8),
                spec(4, 2, Same, 16),
                spec(4, 2, Same, 32),
                spec(4, 1, Valid, 128),
            ],
            decoder_fc: 128,
            decoder: vec![spec(4, 1, Valid, 64), spec(4, 2, Same, 32), spec(4, 2, Same, 8)],
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Faithful => Self::faithful(),
            Preset::Desk => Self::desk(),
        }
    }

    pub fn input_channels(&self) -> usize {
        self.channels + 1
    }

    /// Channels of the semantic feature maps `Y^z`.
    pub fn feature_channels(&self) -> usize {
        self.decoder.last().map_or(self.decoder_fc, |s| s.channels)
    }

    /// Spatial side after each encoder layer.
    pub fn encoder_sides(&self) -> Result<Vec<usize>> {
        let mut side = self.image_size;
        let mut out = Vec::new();
        for (i, s) in self.encoder.iter().enumerate() {
            side = conv_out_len(side, s.kernel, s.stride, s.padding)
                .ok_or_else(|| Error::InvalidArgument(format!("encoder layer {i} does not fit a {side}x{side} input")))?;
            out.push(side);
        }
        Ok(out)
    }

    /// Spatial side after each decoder layer (starting from 1x1).
    pub fn decoder_sides(&self) -> Vec<usize> {
        let mut side = 1;
        self.decoder
            .iter()
            .map(|s| {
                side = conv_transpose_out_len(side, s.kernel, s.stride, s.padding);
                side
            })
            .collect()
    }
}

/// Image with 8-bit intensities, `size x size x channels`, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub size: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(size: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != size * size * channels {
            return Err(shape_err("image", "pixel data length", size * size * channels, data.len()));
        }
        Ok(Image { size, channels, data })
    }

    pub fn filled(size: usize, channels: usize, value: u8) -> Self {
        Image {
            size,
            channels,
            data: vec![value; size * size * channels],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[u8] {
        let o = (y * self.size + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, v: &[u8]) {
        let o = (y * self.size + x) * self.channels;
        self.data[o..o + self.channels].copy_from_slice(v);
    }

    /// Values in `[-1, 1]`.
    pub fn values<T: Real>(&self) -> impl Iterator<Item = T> + '_ {
        self.data.iter().map(|&i| T::from_f64(crate::dlm::to_value(i)))
    }
}

/// Binary context mask, `true` marks an observed (context) pixel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextMask {
    pub size: usize,
    pub data: Vec<bool>,
}

impl ContextMask {
    pub fn all_context(size: usize) -> Self {
        ContextMask {
            size,
            data: vec![true; size * size],
        }
    }

    pub fn all_target(size: usize) -> Self {
        ContextMask {
            size,
            data: vec![false; size * size],
        }
    }

    /// Context everywhere except the `w x h` rectangle at column `x`, row `y`.
    pub fn with_target_rect(size: usize, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || x + w > size || y + h > size {
            return Err(Error::InvalidArgument(format!(
                "target rectangle {w}x{h} at ({x},{y}) does not fit a {size}x{size} image"
            )));
        }
        let mut m = Self::all_context(size);
        for r in y..y + h {
            for c in x..x + w {
                m.data[r * size + c] = false;
            }
        }
        Ok(m)
    }

    pub fn is_context(&self, y: usize, x: usize) -> bool {
        self.data[y * self.size + x]
    }

    pub fn target_count(&self) -> usize {
        self.data.iter().filter(|&&c| !c).count()
    }

    /// Target pixel coordinates in raster order.
    pub fn target_pixels(&self) -> Vec<(usize, usize)> {
        (0..self.size * self.size)
            .filter(|&i| !self.data[i])
            .map(|i| (i / self.size, i % self.size))
            .collect()
    }
}

/// Diagonal Gaussian posterior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentDist {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl LatentDist {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }

    /// `z = mean + exp(log_var / 2) * eps`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_var)
            .map(|(m, lv)| {
                let e: f64 = StandardNormal.sample(rng);
                m + (lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX) / 2.0).exp() * e
            })
            .collect()
    }
}

fn check_batch(images: &[&Image], masks: &[&ContextMask], size: usize, channels: usize) -> Result<()> {
    if images.len() != masks.len() {
        return Err(shape_err("prepare_context_input", "mask count", images.len(), masks.len()));
    }
    for (img, m) in images.iter().zip(masks) {
        if img.size != size {
            return Err(shape_err("prepare_context_input", "image side", size, img.size));
        }
        if img.channels != channels {
            return Err(shape_err("prepare_context_input", "image channels", channels, img.channels));
        }
        if m.size != size {
            return Err(shape_err("prepare_context_input", "mask side", size, m.size));
        }
    }
    Ok(())
}

/// Encoder input: context pixels carry their values, target pixels uniform
/// noise on `[-1, 1]`, and the mask (1 = context) is appended as a channel.
pub fn prepare_context_input<T: Real, R: Rng + ?Sized>(
    images: &[&Image],
    masks: &[&ContextMask],
    rng: &mut R,
) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (size, c) = (first.size, first.channels);
    check_batch(images, masks, size, c)?;
    let mut out = Vec::with_capacity(images.len() * size * size * (c + 1));
    for (img, m) in images.iter().zip(masks) {
        for (p, &ctx) in m.data.iter().enumerate() {
            for ch in 0..c {
                out.push(if ctx {
                    T::from_f64(crate::dlm::to_value(img.data[p * c + ch]))
                } else {
                    T::from_f64(rng.random_range(-1.0..=1.0))
                });
            }
            out.push(if ctx { T::one() } else { T::zero() });
        }
    }
    Tensor::new(&[images.len(), size, size, c + 1], out)
}

/// Images as a `[B, M, M, C]` value tensor.
pub fn image_batch<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (size, c) = (first.size, first.channels);
    let mut out = Vec::with_capacity(images.len() * size * size * c);
    for img in images {
        if img.size != size || img.channels != c {
            return Err(shape_err("image_batch", "image side", size, img.size));
        }
        out.extend(img.values::<T>());
    }
    Tensor::new(&[images.len(), size, size, c], out)
}

/// Masks as a `[B, M, M, 1]` tensor of ones (context) and zeros.
pub fn mask_batch<T: Real>(masks: &[&ContextMask]) -> Result<Tensor<T>> {
    let size = masks.first().map_or(1, |m| m.size);
    let data = masks
        .iter()
        .flat_map(|m| m.data.iter().map(|&c| if c { T::one() } else { T::zero() }))
        .collect();
    Tensor::new(&[masks.len(), size, size, 1], data)
}

/// Encoder and deconvolutional decoder of the PixelVAE.
#[derive(Clone, Debug)]
pub struct Vae<T> {
    pub cfg: VaeConfig,
    enc: Vec<(Conv2d<T>, BatchNorm)>,
    flat: usize,
    fc_mean: Dense,
    bn_mean: BatchNorm,
    fc_log_var: Dense,
    bn_log_var: BatchNorm,
    dec_fc: Dense,
    dec_bn: BatchNorm,
    dec: Vec<(ConvTranspose2d, BatchNorm)>,
}

impl<T: Real> Vae<T> {
    pub fn new(cfg: VaeConfig) -> Result<Self> {
        let sides = cfg.encoder_sides()?;
        let last_side = *sides.last().unwrap_or(&cfg.image_size);
        let last_c = cfg.encoder.last().map_or(cfg.input_channels(), |s| s.channels);
        let dec_sides = cfg.decoder_sides();
        if dec_sides.last().copied().unwrap_or(1) != cfg.image_size {
            return Err(Error::InvalidArgument(format!(
                "decoder produces {:?} sides, final must equal image size {}",
                dec_sides, cfg.image_size
            )));
        }
        let mut cin = cfg.input_channels();
        let enc = cfg
            .encoder
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let name = format!("vae/enc/conv{i}");
                let conv = Conv2d::new(&name, s.kernel, s.kernel, cin, s.channels).strided(s.stride, s.padding);
                cin = s.channels;
                (conv, BatchNorm { name: format!("{name}/bn"), channels: s.channels })
            })
            .collect();
        let flat = last_side * last_side * last_c;
        let d = cfg.latent_dim;
        let mut cin = cfg.decoder_fc;
        let dec = cfg
            .decoder
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let name = format!("vae/dec/deconv{i}");
                let l = ConvTranspose2d {
                    name: name.clone(),
                    k: s.kernel,
                    cin,
                    cout: s.channels,
                    stride: s.stride,
                    padding: s.padding,
                };
                cin = s.channels;
                (l, BatchNorm { name: format!("{name}/bn"), channels: s.channels })
            })
            .collect();
        Ok(Vae {
            fc_mean: Dense { name: "vae/enc/fc_mean".into(), din: flat, dout: d },
            bn_mean: BatchNorm { name: "vae/enc/fc_mean/bn".into(), channels: d },
            fc_log_var: Dense { name: "vae/enc/fc_log_var".into(), din: flat, dout: d },
            bn_log_var: BatchNorm { name: "vae/enc/fc_log_var/bn".into(), channels: d },
            dec_fc: Dense { name: "vae/dec/fc".into(), din: d, dout: cfg.decoder_fc },
            dec_bn: BatchNorm { name: "vae/dec/fc/bn".into(), channels: cfg.decoder_fc },
            enc,
            flat,
            dec,
            cfg,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for (c, bn) in &self.enc {
            c.init(store, rng);
            bn.init(store);
        }
        for (fc, bn) in [(&self.fc_mean, &self.bn_mean), (&self.fc_log_var, &self.bn_log_var), (&self.dec_fc, &self.dec_bn)] {
            fc.init(store, rng);
            bn.init(store);
        }
        for (d, bn) in &self.dec {
            d.init(store, rng);
            bn.init(store);
        }
    }

    /// Maps a prepared `[B, M, M, C+1]` input to posterior mean and
    /// (clamped) log-variance, each `[B, D]`.
    pub fn encode(&self, ctx: &mut Ctx<'_, T>, input: Var, mode: Mode) -> Result<(Var, Var)> {
        let s = ctx.g.shape(input).to_vec();
        let m = self.cfg.image_size;
        if s.len() != 4 || s[1] != m || s[2] != m {
            return Err(shape_err("encode", "input side", m, s.get(1).copied().unwrap_or(0)));
        }
        if s[3] != self.cfg.input_channels() {
            return Err(shape_err("encode", "input channels", self.cfg.input_channels(), s[3]));
        }
        let mut h = input;
        for (conv, bn) in &self.enc {
            h = conv.forward(ctx, h)?;
            h = bn.forward(ctx, h, mode)?;
            h = ctx.g.elu(h);
        }
        let flat = ctx.g.reshape(h, &[s[0], self.flat])?;
        let mean = self.fc_mean.forward(ctx, flat)?;
        let mean = self.bn_mean.forward(ctx, mean, mode)?;
        let lv = self.fc_log_var.forward(ctx, flat)?;
        let lv = self.bn_log_var.forward(ctx, lv, mode)?;
        let lv = ctx.g.clamp(lv, T::from_f64(LOG_VAR_MIN), T::from_f64(LOG_VAR_MAX));
        Ok((mean, lv))
    }

    /// Reparameterised draw `mean + exp(log_var / 2) * eps`.
    pub fn sample_latent<R: Rng + ?Sized>(&self, ctx: &mut Ctx<'_, T>, mean: Var, log_var: Var, rng: &mut R) -> Result<Var> {
        let eps = Tensor::from_fn(ctx.g.shape(mean), |_| T::from_f64(StandardNormal.sample(rng)));
        let eps = ctx.g.constant(eps);
        let half = ctx.g.scale(log_var, T::from_f64(0.5));
        let std = ctx.g.exp(half);
        let noise = ctx.g.mul(std, eps)?;
        ctx.g.add(mean, noise)
    }

    /// Maps `[B, D]` latents to `[B, M, M, Cz]` feature maps.
    pub fn decode(&self, ctx: &mut Ctx<'_, T>, z: Var, mode: Mode) -> Result<Var> {
        let s = ctx.g.shape(z).to_vec();
        if s.len() != 2 || s[1] != self.cfg.latent_dim {
            return Err(shape_err("decode", "latent dimension", self.cfg.latent_dim, *s.last().unwrap_or(&0)));
        }
        let h = self.dec_fc.forward(ctx, z)?;
        let h = self.dec_bn.forward(ctx, h, mode)?;
        let h = ctx.g.elu(h);
        let mut h = ctx.g.reshape(h, &[s[0], 1, 1, self.cfg.decoder_fc])?;
        for (d, bn) in &self.dec {
            h = d.forward(ctx, h)?;
            h = bn.forward(ctx, h, mode)?;
            h = ctx.g.elu(h);
        }
        Ok(h)
    }
}
