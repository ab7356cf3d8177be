//! The assembled PixelVAE + bidirectional PixelCNN and its per-stage views.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bipixelcnn::{
    reverse_input, sample_target, target_log_probs, Completion, GatedStack, Injection, PixelCnnConfig, Recompute,
    SamplerInputs,
};
use crate::dlm::{dlm_nll, NllStats};
use crate::error::{shape_err, Error, Result};
use crate::maskedconv::Direction;
use crate::ndgrad::{Mode, Real, Tensor, Var};
use crate::nn::{Ctx, ParamStore, Trainable};
use crate::regobjectives::{stage1_regularizer, RegularizerConfig};
use crate::vaecore::{image_batch, mask_batch, prepare_context_input, ContextMask, Image, LatentDist, Preset, Vae, VaeConfig};

pub const STAGE1_PREFIX: &str = "vae/pixelcnn";
pub const FORWARD_PREFIX: &str = "bi/fwd";
pub const REVERSE_PREFIX: &str = "bi/rev";

/// Which training objective produced (or will produce) a set of weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    /// Whole-image reconstruction with the forward stack conditioned on `Y^z`.
    #[serde(rename = "1")]
    One,
    /// Target-only NLL of the bidirectional stack, encoder/decoder frozen.
    #[serde(rename = "2")]
    Two,
    /// Target-only NLL plus regulariser, everything trainable.
    #[serde(rename = "onestage")]
    OneStage,
    /// Stage 2 without the reverse stream.
    #[serde(rename = "forward-only")]
    ForwardOnly,
}

impl Stage {
    pub fn has_reverse(self) -> bool {
        matches!(self, Stage::Two | Stage::OneStage)
    }

    /// Stages whose loss covers only target pixels.
    pub fn target_only(self) -> bool {
        self != Stage::One
    }

    pub fn uses_regularizer(self) -> bool {
        matches!(self, Stage::One | Stage::OneStage)
    }

    pub fn needs_stage1(self) -> bool {
        matches!(self, Stage::Two | Stage::ForwardOnly)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::One => "1",
            Stage::Two => "2",
            Stage::OneStage => "onestage",
            Stage::ForwardOnly => "forward-only",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Stage::One),
            "2" => Ok(Stage::Two),
            "onestage" => Ok(Stage::OneStage),
            "forward-only" => Ok(Stage::ForwardOnly),
            _ => Err(Error::InvalidArgument(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: Preset,
    pub vae: VaeConfig,
    pub pixelcnn: PixelCnnConfig,
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        let vae = VaeConfig::preset(p);
        let mut pixelcnn = match p {
            Preset::Faithful => PixelCnnConfig::faithful(),
            Preset::Desk => PixelCnnConfig::desk(),
        };
        pixelcnn.channels = vae.channels;
        ModelConfig { preset: p, vae, pixelcnn }
    }

    pub fn validate(&self) -> Result<()> {
        self.pixelcnn.validate()?;
        if self.pixelcnn.channels != self.vae.channels {
            return Err(shape_err("model config", "image channels", self.vae.channels, self.pixelcnn.channels));
        }
        Ok(())
    }
}

/// Which pixels enter the likelihood.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NllScope {
    AllPixels,
    TargetOnly,
}

/// Loss node plus its bookkeeping for one batch.
pub struct LossParts {
    pub loss: Var,
    pub nll: NllStats,
    /// Regulariser value (already scaled by its coefficient), 0 if unused.
    pub regularizer: f64,
    pub batch: usize,
}

/// Network modules plus the weights of one model.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub cfg: ModelConfig,
    pub stage: Stage,
    pub store: ParamStore<T>,
    vae: Vae<T>,
    stage1: GatedStack<T>,
    fwd: GatedStack<T>,
    rev: GatedStack<T>,
}

impl<T: Real> Model<T> {
    /// Builds the modules without allocating weights.
    pub fn new(cfg: ModelConfig, stage: Stage) -> Result<Self> {
        cfg.validate()?;
        let pc = &cfg.pixelcnn;
        let c = cfg.vae.channels;
        let cz = cfg.vae.feature_channels();
        let p = pc.layout().param_count();
        let vae = Vae::new(cfg.vae.clone())?;
        let stage1 = GatedStack::new(STAGE1_PREFIX, Direction::Forward, pc, pc.blocks, c, p, Injection { semantic: Some(cz), reverse: None })?;
        let fwd_inj = Injection {
            semantic: Some(cz),
            reverse: stage.has_reverse().then_some(pc.reverse_channels),
        };
        let fwd = GatedStack::new(FORWARD_PREFIX, Direction::Forward, pc, pc.blocks, c, p, fwd_inj)?;
        let rev_inj = Injection { semantic: None, reverse: None };
        let rev = GatedStack::new(REVERSE_PREFIX, Direction::Reverse, pc, pc.reverse_blocks, c + 1, pc.reverse_channels, rev_inj)?;
        Ok(Model { cfg, stage, store: ParamStore::new(), vae, stage1, fwd, rev })
    }

    /// Fresh weights for every module the stage trains from scratch.
    pub fn init<R: Rng + ?Sized>(cfg: ModelConfig, stage: Stage, rng: &mut R) -> Result<Self> {
        if stage.needs_stage1() {
            return Err(Error::MissingStage1(format!("stage {stage} starts from stage-1 weights")));
        }
        let mut m = Self::new(cfg, stage)?;
        m.vae.init(&mut m.store, rng);
        match stage {
            Stage::One => m.stage1.init(&mut m.store, rng),
            _ => {
                m.fwd.init(&mut m.store, rng);
                m.rev.init(&mut m.store, rng);
            }
        }
        Ok(m)
    }

    /// Stage-2 (or forward-only) starting point: encoder/decoder and the
    /// stage-1 stack are kept, the forward filters are copied from the
    /// stage-1 stack, and the reverse stream is fresh. With
    /// `reinit_semantic` the copied `V_l` filters are re-drawn as well.
    pub fn from_stage1<R: Rng + ?Sized>(stage1: &Model<T>, stage: Stage, reinit_semantic: bool, rng: &mut R) -> Result<Self> {
        if stage1.stage != Stage::One {
            return Err(Error::MissingStage1(format!("expected a stage-1 model, got stage {}", stage1.stage)));
        }
        if !stage.needs_stage1() {
            return Err(Error::InvalidArgument(format!("stage {stage} does not start from stage 1")));
        }
        let mut m = Self::new(stage1.cfg.clone(), stage)?;
        m.store = stage1.store.clone();
        m.store.copy_prefix(&format!("{STAGE1_PREFIX}/"), &format!("{FORWARD_PREFIX}/"));
        if reinit_semantic {
            m.fwd.init_injections(&mut m.store, &["v_z", "h_z"], rng);
        }
        if stage.has_reverse() {
            m.fwd.init_injections(&mut m.store, &["v_r", "h_r"], rng);
            m.rev.init(&mut m.store, rng);
        }
        Ok(m)
    }

    /// Rebuilds a model around loaded weights, checking every tensor the
    /// stage needs is present with the right shape.
    pub fn from_store(cfg: ModelConfig, stage: Stage, store: ParamStore<T>) -> Result<Self> {
        let mut m = Self::new(cfg, stage)?;
        let mut expected = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        m.vae.init(&mut expected, &mut rng);
        if stage == Stage::One || stage.needs_stage1() {
            m.stage1.init(&mut expected, &mut rng);
        }
        if stage != Stage::One {
            m.fwd.init(&mut expected, &mut rng);
        }
        if stage.has_reverse() {
            m.rev.init(&mut expected, &mut rng);
        }
        for (name, t) in expected.iter() {
            let got = store.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::TensorShape {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: got.shape().to_vec(),
                });
            }
        }
        m.store = store;
        Ok(m)
    }

    pub fn vae(&self) -> &Vae<T> {
        &self.vae
    }

    pub fn image_size(&self) -> usize {
        self.cfg.vae.image_size
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.vae.latent_dim
    }

    pub fn channels(&self) -> usize {
        self.cfg.vae.channels
    }

    /// Parameters updated by this stage's optimiser.
    pub fn trainable(&self) -> Trainable {
        match self.stage {
            Stage::One | Stage::OneStage => Trainable::All,
            Stage::Two | Stage::ForwardOnly => Trainable::Prefixes(vec![format!("{FORWARD_PREFIX}/"), format!("{REVERSE_PREFIX}/")]),
        }
    }

    /// Prefix of tensors that must stay bitwise fixed while this stage trains.
    pub fn frozen_prefixes(&self) -> Vec<&'static str> {
        match self.stage {
            Stage::Two | Stage::ForwardOnly => vec!["vae/enc/", "vae/dec/", "vae/pixelcnn/"],
            _ => Vec::new(),
        }
    }

    /// Same weights at another precision.
    pub fn cast<U: Real>(&self) -> Result<Model<U>> {
        let mut m = Model::new(self.cfg.clone(), self.stage)?;
        m.store = self.store.cast();
        Ok(m)
    }

    /// The stack that emits mixture parameters for this stage.
    pub fn completion_stack(&self) -> &GatedStack<T> {
        match self.stage {
            Stage::One => &self.stage1,
            _ => &self.fwd,
        }
    }

    pub fn reverse_stack(&self) -> Option<&GatedStack<T>> {
        self.stage.has_reverse().then_some(&self.rev)
    }

    pub fn has_stage1_stack(&self) -> bool {
        self.store.contains(&format!("{STAGE1_PREFIX}/head/w"))
    }

    fn vae_mode(&self, train: bool) -> Mode {
        if train && matches!(self.stage, Stage::One | Stage::OneStage) {
            Mode::Train
        } else {
            Mode::Infer
        }
    }

    /// Training/evaluation loss of one batch. `rng` drives the noise fill
    /// and latent draws; dropout uses the rng held by `ctx`.
    pub fn loss(
        &self,
        ctx: &mut Ctx<'_, T>,
        images: &[&Image],
        masks: &[&ContextMask],
        regularizer: Option<&RegularizerConfig>,
        rng: &mut dyn RngCore,
        train: bool,
    ) -> Result<LossParts> {
        let b = images.len();
        let input = prepare_context_input::<T, _>(images, masks, rng)?;
        let vmode = self.vae_mode(train);
        let pmode = if train { Mode::Train } else { Mode::Infer };
        let input = ctx.input(input);
        let (mean, lv) = self.vae.encode(ctx, input, vmode)?;
        let z = self.vae.sample_latent(ctx, mean, lv, rng)?;
        let yz = self.vae.decode(ctx, z, vmode)?;
        let xt = image_batch::<T>(images)?;
        let yr = if self.stage.has_reverse() {
            let ri = ctx.input(reverse_input(&xt, &mask_batch::<T>(masks)?)?);
            Some(self.rev.forward(ctx, ri, None, None, pmode)?)
        } else {
            None
        };
        let x = ctx.input(xt);
        let raw = self.completion_stack().forward(ctx, x, Some(yz), yr, pmode)?;
        let scope = if self.stage.target_only() { NllScope::TargetOnly } else { NllScope::AllPixels };
        let weights = pixel_weights(masks, scope);
        let targets: Vec<u8> = images.iter().flat_map(|i| i.data.iter().copied()).collect();
        let (nll, stats) = dlm_nll(&mut ctx.g, self.cfg.pixelcnn.layout(), raw, &targets, &weights)?;
        let (loss, reg) = match regularizer.filter(|_| self.stage.uses_regularizer()) {
            Some(rc) => {
                let r = stage1_regularizer(rc, &mut ctx.g, mean, lv, z, rng)?;
                let rv = ctx.g.value(r).item().as_f64();
                (ctx.g.add(nll, r)?, rv)
            }
            None => (nll, 0.0),
        };
        Ok(LossParts { loss, nll: stats, regularizer: reg, batch: b })
    }

    /// Posterior over latents for one image and mask (infer mode).
    pub fn encode_dist<R: Rng + ?Sized>(&self, image: &Image, mask: &ContextMask, rng: &mut R) -> Result<LatentDist> {
        Ok(self.encode_batch(&[image], &[mask], rng)?.remove(0))
    }

    pub fn encode_batch<R: Rng + ?Sized>(&self, images: &[&Image], masks: &[&ContextMask], rng: &mut R) -> Result<Vec<LatentDist>> {
        self.check_image(images.first().copied().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?)?;
        let input = prepare_context_input::<T, _>(images, masks, rng)?;
        let mut ctx = Ctx::new(&self.store, Trainable::Nothing);
        let x = ctx.input(input);
        let (mean, lv) = self.vae.encode(&mut ctx, x, Mode::Infer)?;
        let d = self.latent_dim();
        let (mv, lvv) = (ctx.g.value(mean).to_f64_vec(), ctx.g.value(lv).to_f64_vec());
        Ok((0..images.len())
            .map(|i| LatentDist {
                mean: mv[i * d..(i + 1) * d].to_vec(),
                log_var: lvv[i * d..(i + 1) * d].to_vec(),
            })
            .collect())
    }

    /// `Y^z` for one latent code, `[1, M, M, Cz]`.
    pub fn decode_features(&self, z: &[f64]) -> Result<Tensor<T>> {
        let d = self.latent_dim();
        if z.len() != d {
            return Err(shape_err("decode_features", "latent dimension", d, z.len()));
        }
        let mut ctx = Ctx::new(&self.store, Trainable::Nothing);
        let zv = ctx.input(Tensor::from_f64(&[1, d], z)?);
        let y = self.vae.decode(&mut ctx, zv, Mode::Infer)?;
        Ok(ctx.g.value(y).clone())
    }

    /// `Y^r` for one image and mask, `[1, M, M, Cr]`; `None` without a
    /// reverse stream.
    pub fn reverse_features(&self, image: &Image, mask: &ContextMask) -> Result<Option<Tensor<T>>> {
        if !self.stage.has_reverse() {
            return Ok(None);
        }
        let xt = image_batch::<T>(&[image])?;
        let mut ctx = Ctx::new(&self.store, Trainable::Nothing);
        let ri = ctx.input(reverse_input(&xt, &mask_batch::<T>(&[mask])?)?);
        let y = self.rev.forward(&mut ctx, ri, None, None, Mode::Infer)?;
        Ok(Some(ctx.g.value(y).clone()))
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.size != self.image_size() {
            return Err(shape_err("model", "image side", self.image_size(), image.size));
        }
        if image.channels != self.channels() {
            return Err(shape_err("model", "image channels", self.channels(), image.channels));
        }
        Ok(())
    }

    /// Samples the target region of `image` given latent code `z`.
    pub fn complete<R: Rng + ?Sized>(&self, image: &Image, mask: &ContextMask, z: &[f64], rng: &mut R, truncated: bool) -> Result<Completion> {
        self.check_image(image)?;
        let yz = self.decode_features(z)?;
        let yr = self.reverse_features(image, mask)?;
        let stack = self.completion_stack();
        let inp = self.sampler_inputs(stack, &yz, yr.as_ref());
        sample_target(&inp, image, mask, rng, truncated, Recompute::Banded)
    }

    /// Full-image sample from the stage-1 stack (no reverse stream), the
    /// reconstruction view used for latent traversals.
    pub fn reconstruct<R: Rng + ?Sized>(&self, image: &Image, z: &[f64], rng: &mut R, truncated: bool) -> Result<Completion> {
        self.check_image(image)?;
        if !self.has_stage1_stack() {
            return Err(Error::MissingTensor(format!("{STAGE1_PREFIX} (stage-1 stack not in this checkpoint)")));
        }
        let yz = self.decode_features(z)?;
        let inp = self.sampler_inputs(&self.stage1, &yz, None);
        sample_target(&inp, image, &ContextMask::all_target(image.size), rng, truncated, Recompute::Banded)
    }

    fn sampler_inputs<'a>(&'a self, stack: &'a GatedStack<T>, yz: &'a Tensor<T>, yr: Option<&'a Tensor<T>>) -> SamplerInputs<'a, T> {
        SamplerInputs {
            stack,
            store: &self.store,
            layout: self.cfg.pixelcnn.layout(),
            rows_above: self.cfg.pixelcnn.rows_above(),
            yz: Some(yz),
            yr,
        }
    }

    /// Log-probabilities of the target pixels of `image` (raster order)
    /// under latent code `z`.
    pub fn target_log_probs(&self, image: &Image, mask: &ContextMask, z: &[f64]) -> Result<Vec<f64>> {
        let yz = self.decode_features(z)?;
        let yr = self.reverse_features(image, mask)?;
        let inp = self.sampler_inputs(self.completion_stack(), &yz, yr.as_ref());
        target_log_probs(&inp, image, mask)
    }

    /// NLL of a batch in infer mode with the latent fixed at the posterior
    /// mean; `scope` picks the pixels that count.
    pub fn evaluate_nll<R: Rng + ?Sized>(&self, images: &[&Image], masks: &[&ContextMask], scope: NllScope, rng: &mut R) -> Result<NllStats> {
        let input = prepare_context_input::<T, _>(images, masks, rng)?;
        let mut ctx = Ctx::new(&self.store, Trainable::Nothing);
        let x0 = ctx.input(input);
        let (mean, _) = self.vae.encode(&mut ctx, x0, Mode::Infer)?;
        let yz = self.vae.decode(&mut ctx, mean, Mode::Infer)?;
        let xt = image_batch::<T>(images)?;
        let yr = if self.stage.has_reverse() {
            let ri = ctx.input(reverse_input(&xt, &mask_batch::<T>(masks)?)?);
            Some(self.rev.forward(&mut ctx, ri, None, None, Mode::Infer)?)
        } else {
            None
        };
        let x = ctx.input(xt);
        let raw = self.completion_stack().forward(&mut ctx, x, Some(yz), yr, Mode::Infer)?;
        let targets: Vec<u8> = images.iter().flat_map(|i| i.data.iter().copied()).collect();
        let (_, stats) = dlm_nll(&mut ctx.g, self.cfg.pixelcnn.layout(), raw, &targets, &pixel_weights(masks, scope))?;
        Ok(stats)
    }
}

/// Per-pixel inclusion flags for [`dlm_nll`].
pub fn pixel_weights(masks: &[&ContextMask], scope: NllScope) -> Vec<bool> {
    masks
        .iter()
        .flat_map(|m| m.data.iter().map(move |&c| scope == NllScope::AllPixels || !c))
        .collect()
}

#[cfg(test)]
mod tests;
