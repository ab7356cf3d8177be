//! Latent inference, controllable inpainting, and latent traversals over a
//! loaded model.
//!
//! Every request is seeded. Streams of one `ChaCha8Rng` seed keep the parts
//! independent: stream 0 fills target pixels for the encoder, stream 1 draws
//! latents, and stream `2 + k` samples completion `k`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::Model;
use crate::ndgrad::Real;
use crate::vaecore::{ContextMask, Image, LatentDist};

/// Default slider and traversal interval.
pub const LATENT_RANGE: (f64, f64) = (-6.0, 6.0);
pub const MAX_COUNT: usize = 64;

const ENCODE_STREAM: u64 = 0;
const LATENT_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// How non-overridden latents are filled in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentSource {
    /// A posterior draw per completion.
    #[default]
    Sample,
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InpaintRequest {
    pub image: Image,
    pub mask: ContextMask,
    /// Latent index to user value.
    pub overrides: BTreeMap<usize, f64>,
    pub seed: u64,
    pub count: usize,
    pub truncated: bool,
    pub latent: LatentSource,
}

impl InpaintRequest {
    pub fn new(image: Image, mask: ContextMask, seed: u64) -> Self {
        InpaintRequest { image, mask, overrides: BTreeMap::new(), seed, count: 1, truncated: true, latent: LatentSource::Sample }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InpaintResult {
    pub images: Vec<Image>,
    /// The full latent code behind each image.
    pub latents: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraversalMode {
    /// Bidirectional completion of the target region.
    #[default]
    Inpaint,
    /// Full-image sample from the stage-1 stack.
    Reconstruct,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraversalRequest {
    pub image: Image,
    pub mask: ContextMask,
    pub index: usize,
    pub values: Vec<f64>,
    pub seed: u64,
    pub mode: TraversalMode,
    pub truncated: bool,
}

/// `n` evenly spaced values over `[lo, hi]`.
pub fn evenly_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![(lo + hi) / 2.0],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

fn check_inputs<T: Real>(model: &Model<T>, image: &Image, mask: &ContextMask) -> Result<()> {
    let m = model.image_size();
    if image.size != m {
        return Err(shape_err("request", "image side", m, image.size));
    }
    if image.channels != model.channels() {
        return Err(shape_err("request", "image channels", model.channels(), image.channels));
    }
    if mask.size != m {
        return Err(shape_err("request", "mask side", m, mask.size));
    }
    Ok(())
}

fn check_override<T: Real>(model: &Model<T>, index: usize, value: f64) -> Result<()> {
    let dim = model.latent_dim();
    if index >= dim {
        return Err(Error::OverrideIndex { index, dim });
    }
    if !value.is_finite() {
        return Err(Error::InvalidArgument(format!("override {index} is {value}")));
    }
    Ok(())
}

/// Posterior over latents; the noise fill uses the request seed.
pub fn infer_latents<T: Real>(model: &Model<T>, image: &Image, mask: &ContextMask, seed: u64) -> Result<LatentDist> {
    check_inputs(model, image, mask)?;
    model.encode_dist(image, mask, &mut rng(seed, ENCODE_STREAM))
}

pub fn inpaint<T: Real>(model: &Model<T>, req: &InpaintRequest) -> Result<InpaintResult> {
    if req.count == 0 || req.count > MAX_COUNT {
        return Err(Error::InvalidArgument(format!("count {} outside 1..={MAX_COUNT}", req.count)));
    }
    for (&i, &v) in &req.overrides {
        check_override(model, i, v)?;
    }
    let q = infer_latents(model, &req.image, &req.mask, req.seed)?;
    let mut latent_rng = rng(req.seed, LATENT_STREAM);
    let mut out = InpaintResult { images: Vec::with_capacity(req.count), latents: Vec::with_capacity(req.count) };
    for k in 0..req.count {
        let mut z = match req.latent {
            LatentSource::Sample => q.sample(&mut latent_rng),
            LatentSource::Mean => q.mean.clone(),
        };
        for (&i, &v) in &req.overrides {
            z[i] = v;
        }
        let c = model.complete(&req.image, &req.mask, &z, &mut rng(req.seed, SAMPLE_STREAM + k as u64), req.truncated)?;
        out.images.push(c.image);
        out.latents.push(z);
    }
    Ok(out)
}

/// One image per value of latent `index`, every other latent at its
/// posterior mean and the same sampling stream for every cell.
pub fn latent_traversal<T: Real>(model: &Model<T>, req: &TraversalRequest) -> Result<Vec<Image>> {
    if req.values.is_empty() || req.values.len() > MAX_COUNT {
        return Err(Error::InvalidArgument(format!("{} values outside 1..={MAX_COUNT}", req.values.len())));
    }
    for &v in &req.values {
        check_override(model, req.index, v)?;
    }
    let q = infer_latents(model, &req.image, &req.mask, req.seed)?;
    req.values
        .iter()
        .map(|&v| {
            let mut z = q.mean.clone();
            z[req.index] = v;
            let mut r = rng(req.seed, SAMPLE_STREAM);
            let c = match req.mode {
                TraversalMode::Inpaint => model.complete(&req.image, &req.mask, &z, &mut r, req.truncated)?,
                TraversalMode::Reconstruct => model.reconstruct(&req.image, &z, &mut r, req.truncated)?,
            };
            Ok(c.image)
        })
        .collect()
}
