//! Reports behind the `diagnose` subcommands: causality, receptive field,
//! and the MI/TC/PD split of the aggregate posterior.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bipixelcnn::{reverse_input, GatedStack, Injection, PixelCnnConfig};
use crate::error::{Error, Result};
use crate::maskedconv::{measure_receptive_field, verify_causality, Direction, ProbeNetwork, RasterOrder, Violation};
use crate::model::Model;
use crate::ndgrad::{Mode, Real, Tensor};
use crate::nn::{Ctx, ParamStore, Trainable};
use crate::regobjectives::{decompose_kl, KlDecomposition};
use crate::vaecore::{ContextMask, Image};

/// One stack as a probe-able image map with fixed conditioning features.
pub struct StackProbe<'a> {
    pub stack: &'a GatedStack<f64>,
    pub store: &'a ParamStore<f64>,
    pub size: usize,
    pub yz: Option<Tensor<f64>>,
    pub yr: Option<Tensor<f64>>,
}

impl ProbeNetwork for StackProbe<'_> {
    fn input_shape(&self) -> [usize; 3] {
        [self.size, self.size, self.stack.in_channels]
    }

    fn evaluate(&self, input: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut ctx = Ctx::new(self.store, Trainable::Nothing);
        let s = input.shape();
        let x = ctx.input(input.clone().reshape(&[1, s[0], s[1], s[2]])?);
        let yz = self.yz.clone().map(|t| ctx.input(t));
        let yr = self.yr.clone().map(|t| ctx.input(t));
        let y = self.stack.forward(&mut ctx, x, yz, yr, Mode::Infer)?;
        let out = ctx.g.value(y).clone();
        let oc = out.last_dim();
        out.reshape(&[s[0], s[1], oc])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackCausality {
    pub stack: String,
    pub order: String,
    pub channels: usize,
    pub evaluations: usize,
    pub violations: Vec<Violation>,
}

/// A target pixel whose mixture parameters moved when a target at or after
/// it was perturbed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinedViolation {
    pub target: (usize, usize),
    pub perturbed: (usize, usize),
    pub channel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinedCausality {
    pub channels: usize,
    pub targets: usize,
    pub evaluations: usize,
    pub violations: Vec<CombinedViolation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalityDiagnostics {
    pub size: usize,
    pub stacks: Vec<StackCausality>,
    pub combined: Vec<CombinedCausality>,
}

impl CausalityDiagnostics {
    pub fn violation_count(&self) -> usize {
        self.stacks.iter().map(|s| s.violations.len()).sum::<usize>() + self.combined.iter().map(|c| c.violations.len()).sum::<usize>()
    }

    pub fn is_causal(&self) -> bool {
        self.violation_count() == 0
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Random biases so that no path is hidden behind an all-zero init.
pub fn randomize_biases(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.names().filter(|n| n.ends_with("/b")).cloned().collect();
    for n in names {
        for v in store.get_mut(&n).expect("listed name").data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
}

/// Forward/reverse pair with random weights over `channels` colour channels.
pub fn random_pair(cfg: &PixelCnnConfig, semantic: usize, seed: u64) -> Result<(GatedStack<f64>, GatedStack<f64>, ParamStore<f64>)> {
    let c = cfg.channels;
    let inj = Injection { semantic: Some(semantic), reverse: Some(cfg.reverse_channels) };
    let fwd = GatedStack::new("probe/fwd", Direction::Forward, cfg, cfg.blocks, c, cfg.layout().param_count(), inj)?;
    let rev = GatedStack::new("probe/rev", Direction::Reverse, cfg, cfg.reverse_blocks, c + 1, cfg.reverse_channels, Injection::default())?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fwd.init(&mut store, &mut rng);
    rev.init(&mut store, &mut rng);
    randomize_biases(&mut store, seed ^ 0xb1a5);
    Ok((fwd, rev, store))
}

/// Mixture parameters of the bidirectional model for every pixel of `img`.
fn combined_params(
    fwd: &GatedStack<f64>,
    rev: &GatedStack<f64>,
    store: &ParamStore<f64>,
    yz: &Tensor<f64>,
    img: &Tensor<f64>,
    mask: &Tensor<f64>,
) -> Result<Tensor<f64>> {
    let mut ctx = Ctx::new(store, Trainable::Nothing);
    let ri = ctx.input(reverse_input(img, mask)?);
    let yr = rev.forward(&mut ctx, ri, None, None, Mode::Infer)?;
    let x = ctx.input(img.clone());
    let z = ctx.input(yz.clone());
    let y = fwd.forward(&mut ctx, x, Some(z), Some(yr), Mode::Infer)?;
    Ok(ctx.g.value(y).clone())
}

/// Perturbs every channel of every target pixel and checks that no target
/// at or before it in raster order reacts.
fn combined_causality(
    fwd: &GatedStack<f64>,
    rev: &GatedStack<f64>,
    store: &ParamStore<f64>,
    size: usize,
    semantic: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CombinedCausality> {
    let c = fwd.in_channels;
    let q = size / 4;
    let cm = ContextMask::with_target_rect(size, q, q, size - 2 * q, size - 2 * q)?;
    let mask = Tensor::from_fn(&[1, size, size, 1], |k| if cm.data[k] { 1.0 } else { 0.0 });
    let img = uniform(rng, &[1, size, size, c]);
    let yz = uniform(rng, &[1, size, size, semantic]);
    let base = combined_params(fwd, rev, store, &yz, &img, &mask)?;
    let p = fwd.out_channels;
    let at = |t: &Tensor<f64>, (i, j): (usize, usize)| t.data()[(i * size + j) * p..(i * size + j + 1) * p].to_vec();
    let targets = cm.target_pixels();
    let mut violations = Vec::new();
    let mut evaluations = 1;
    for (k, &later) in targets.iter().enumerate() {
        for ch in 0..c {
            let mut im = img.clone();
            im.data_mut()[(later.0 * size + later.1) * c + ch] += 1.0;
            let out = combined_params(fwd, rev, store, &yz, &im, &mask)?;
            evaluations += 1;
            for &t in &targets[..=k] {
                if at(&out, t) != at(&base, t) {
                    violations.push(CombinedViolation { target: t, perturbed: later, channel: ch });
                }
            }
        }
    }
    Ok(CombinedCausality { channels: c, targets: targets.len(), evaluations, violations })
}

fn check_pair(
    fwd: &GatedStack<f64>,
    rev: &GatedStack<f64>,
    store: &ParamStore<f64>,
    size: usize,
    semantic: usize,
    seed: u64,
    out: &mut CausalityDiagnostics,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = StackProbe {
        stack: fwd,
        store,
        size,
        yz: Some(uniform(&mut rng, &[1, size, size, semantic])),
        yr: fwd.injection.reverse.map(|r| uniform(&mut rng, &[1, size, size, r])),
    };
    let c = fwd.in_channels;
    let r = verify_causality(&probe, RasterOrder::forward(), 1, seed)?;
    out.stacks.push(StackCausality { stack: fwd.prefix.clone(), order: "forward".into(), channels: c, evaluations: r.evaluations, violations: r.violations });
    let probe = StackProbe { stack: rev, store, size, yz: None, yr: None };
    let r = verify_causality(&probe, RasterOrder::reverse(), 1, seed)?;
    out.stacks.push(StackCausality { stack: rev.prefix.clone(), order: "reverse".into(), channels: c, evaluations: r.evaluations, violations: r.violations });
    out.combined.push(combined_causality(fwd, rev, store, size, semantic, &mut rng)?);
    Ok(())
}

/// Random-weight models over each entry of `channels` at `size x size`.
pub fn causality_suite(cfg: &PixelCnnConfig, size: usize, channels: &[usize], seed: u64) -> Result<CausalityDiagnostics> {
    let mut out = CausalityDiagnostics { size, stacks: Vec::new(), combined: Vec::new() };
    for (k, &c) in channels.iter().enumerate() {
        let cfg = PixelCnnConfig { channels: c, ..cfg.clone() };
        let (fwd, rev, store) = random_pair(&cfg, 2, seed.wrapping_add(k as u64))?;
        check_pair(&fwd, &rev, &store, size, 2, seed.wrapping_add(100 + k as u64), &mut out)?;
    }
    Ok(out)
}

/// The same checks on a trained bidirectional model's own weights.
pub fn model_causality(model: &Model<f64>, seed: u64) -> Result<CausalityDiagnostics> {
    let rev = model
        .reverse_stack()
        .ok_or_else(|| Error::InvalidArgument(format!("stage {} has no reverse stack", model.stage)))?;
    let size = model.image_size();
    let mut out = CausalityDiagnostics { size, stacks: Vec::new(), combined: Vec::new() };
    check_pair(model.completion_stack(), rev, &model.store, size, model.cfg.vae.feature_channels(), seed, &mut out)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReceptiveFieldReport {
    pub size: usize,
    pub probe: (usize, usize),
    pub bounding_box: (usize, usize),
    pub expected_box: (usize, usize),
    pub extent_above: usize,
    pub positions: usize,
    /// Earlier positions inside the expected box that do not reach the probe.
    pub blind_spots: Vec<(usize, usize)>,
}

impl ReceptiveFieldReport {
    pub fn matches_expected(&self) -> bool {
        self.bounding_box == self.expected_box && self.blind_spots.is_empty()
    }
}

/// Measures the forward stack's field at the centre of a `size x size` input.
pub fn receptive_field(cfg: &PixelCnnConfig, size: usize, seed: u64) -> Result<ReceptiveFieldReport> {
    let plain = PixelCnnConfig { channels: 1, ..cfg.clone() };
    let stack = GatedStack::new("probe/fwd", Direction::Forward, &plain, plain.blocks, 1, plain.layout().param_count(), Injection::default())?;
    let mut store = ParamStore::new();
    stack.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
    randomize_biases(&mut store, seed ^ 0xb1a5);
    let probe = StackProbe { stack: &stack, store: &store, size, yz: None, yr: None };
    let centre = (size / 2, size / 2);
    let rf = measure_receptive_field(&probe, centre, seed)?;
    let above = cfg.rows_above();
    let half_w = cfg.first_kernel.1 / 2 + cfg.blocks;
    let mut blind_spots = Vec::new();
    for y in centre.0.saturating_sub(above)..=centre.0 {
        for x in centre.1.saturating_sub(half_w)..=(centre.1 + half_w).min(size - 1) {
            if (y, x) < centre && !rf.positions.contains(&(y, x)) {
                blind_spots.push((y, x));
            }
        }
    }
    Ok(ReceptiveFieldReport {
        size,
        probe: centre,
        bounding_box: rf.bounding_box(),
        expected_box: (above + 1, 2 * half_w + 1),
        extent_above: rf.extent_above(),
        positions: rf.positions.len(),
        blind_spots,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecomposeReport {
    pub dataset_size: usize,
    pub batches: Vec<KlDecomposition>,
    pub mi: f64,
    pub tc: f64,
    pub pd: f64,
    pub plugin_kl: f64,
    /// Largest `|MI + TC + PD - plugin KL|` over the batches.
    pub max_identity_error: f64,
}

/// Posterior draws for consecutive batches of `images` (masked by `masks`)
/// split into MI, TC and PD.
pub fn decompose<T: Real>(model: &Model<T>, images: &[Image], masks: &[ContextMask], batch: usize, seed: u64) -> Result<DecomposeReport> {
    if images.len() != masks.len() || batch < 2 || images.len() < batch {
        return Err(Error::InvalidArgument(format!(
            "{} images, {} masks, batch {batch}: need matching counts and at least one batch of 2 or more",
            images.len(),
            masks.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = Vec::new();
    for (ic, mc) in images.chunks_exact(batch).zip(masks.chunks_exact(batch)) {
        let ir: Vec<&Image> = ic.iter().collect();
        let mr: Vec<&ContextMask> = mc.iter().collect();
        let dists = model.encode_batch(&ir, &mr, &mut rng)?;
        let zs: Vec<Vec<f64>> = dists.iter().map(|q| q.sample(&mut rng)).collect();
        batches.push(decompose_kl(&zs, &dists, images.len())?);
    }
    let n = batches.len() as f64;
    let mean = |f: fn(&KlDecomposition) -> f64| batches.iter().map(f).sum::<f64>() / n;
    Ok(DecomposeReport {
        dataset_size: images.len(),
        mi: mean(|b| b.mi),
        tc: mean(|b| b.tc),
        pd: mean(|b| b.pd),
        plugin_kl: mean(|b| b.plugin_kl),
        max_identity_error: batches.iter().map(|b| (b.total() - b.plugin_kl).abs()).fold(0.0, f64::max),
        batches,
    })
}
