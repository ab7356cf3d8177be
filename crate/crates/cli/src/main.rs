//! `csi`: dataset export, two-stage training, diagnostics, inpainting,
//! latent traversals and the HTTP server.
//!
//! Reports go to stdout as JSON; progress logs go to stderr.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use csi_core::checkpoint::Checkpoint;
use csi_core::dataset::{decode_mask_png, load_png, save_png, Dataset};
use csi_core::diagnostics;
use csi_core::model::{Model, ModelConfig, Stage};
use csi_core::service::{self, InpaintRequest, LatentSource, TraversalMode, TraversalRequest, LATENT_RANGE};
use csi_core::trainer::{initial_model, train, TrainConfig};
use csi_core::vaecore::{ContextMask, Image, Preset};

#[derive(Parser)]
#[command(name = "csi", version, about = "Controllable semantic inpainting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic factor dataset to PNGs plus factors.csv.
    Dataset(DatasetArgs),
    /// Train one stage and write a checkpoint.
    Train(TrainArgs),
    #[command(subcommand)]
    Diagnose(Diagnose),
    /// Complete the black region of a mask.
    Inpaint(InpaintArgs),
    /// Vary one latent over a list of values.
    Traverse(TraverseArgs),
    /// Serve the HTTP JSON API.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Faithful,
    Desk,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Faithful => Preset::Faithful,
            PresetArg::Desk => Preset::Desk,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Onestage,
    ForwardOnly,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::One => Stage::One,
            StageArg::Two => Stage::Two,
            StageArg::Onestage => Stage::OneStage,
            StageArg::ForwardOnly => Stage::ForwardOnly,
        }
    }
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    count: usize,
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    stage: StageArg,
    #[arg(long, default_value = "desk")]
    preset: PresetArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory written by `csi dataset`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Stage-1 checkpoint; required for stages 2 and forward-only.
    #[arg(long)]
    stage1: Option<PathBuf>,
    /// Tail of the dataset left out of training.
    #[arg(long, default_value_t = 0.1)]
    held_out: f64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_batches: Option<usize>,
    /// Weight of the MMD (or KL) regulariser.
    #[arg(long)]
    regularizer_coefficient: Option<f64>,
    /// PixelCNN filters (fresh models only).
    #[arg(long)]
    filters: Option<usize>,
    /// PixelCNN dropout (fresh models only).
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Subcommand)]
enum Diagnose {
    /// Perturbation causality of the forward, reverse and combined stacks.
    Causality {
        /// Check this bidirectional checkpoint instead of random weights.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "desk")]
        preset: PresetArg,
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Empirical receptive field of the forward stack.
    ReceptiveField {
        #[arg(long, default_value = "desk")]
        preset: PresetArg,
        #[arg(long)]
        blocks: Option<usize>,
        #[arg(long, default_value_t = 20)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// MI / TC / PD split of the aggregate posterior on all-context inputs.
    Decompose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 50)]
        batch: usize,
        /// Use at most this many images.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LatentArg {
    Sample,
    Mean,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Inpaint,
    Reconstruct,
}

#[derive(Args)]
struct InputArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Grayscale PNG: white is context, black is target.
    #[arg(long)]
    mask: PathBuf,
    /// Output directory for PNGs.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample from the full logistic instead of truncated components.
    #[arg(long)]
    untruncated: bool,
}

#[derive(Args)]
struct InpaintArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Latent override `INDEX=VALUE`; repeatable.
    #[arg(long = "override", value_parser = parse_override)]
    overrides: Vec<(usize, f64)>,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value = "sample")]
    latent: LatentArg,
}

#[derive(Args)]
struct TraverseArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    index: usize,
    /// Comma-separated values; defaults to `--steps` values over [-6, 6].
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    values: Option<Vec<f64>>,
    #[arg(long, default_value_t = 7)]
    steps: usize,
    #[arg(long, default_value = "inpaint")]
    mode: ModeArg,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Concurrent sampling jobs.
    #[arg(long, default_value_t = 2)]
    workers: usize,
}

fn parse_override(s: &str) -> Result<(usize, f64), String> {
    let (i, v) = s.split_once('=').ok_or_else(|| format!("expected INDEX=VALUE, got {s:?}"))?;
    let i = i.trim().parse().map_err(|e| format!("index {i:?}: {e}"))?;
    let v = v.trim().parse().map_err(|e| format!("value {v:?}: {e}"))?;
    Ok((i, v))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ckpt.model()?)
}

fn dataset(args: DatasetArgs) -> Result<()> {
    let data = Dataset::generate(args.seed, args.count, args.size)?;
    data.export(&args.out)?;
    let (train, held_out) = data.split();
    print_json(&serde_json::json!({
        "out": args.out,
        "count": data.len(),
        "size": data.size,
        "train": train.len(),
        "held_out": held_out.len(),
    }))
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let preset = Preset::from(args.preset);
    let stage = Stage::from(args.stage);
    let mut cfg = TrainConfig::preset(preset, stage);
    cfg.seed = args.seed;
    cfg.epochs = args.epochs.unwrap_or(cfg.epochs);
    cfg.learning_rate = args.learning_rate.unwrap_or(cfg.learning_rate);
    cfg.batch_size = args.batch_size.unwrap_or(cfg.batch_size);
    cfg.max_batches_per_epoch = args.max_batches;
    cfg.regularizer.coefficient = args.regularizer_coefficient.unwrap_or(cfg.regularizer.coefficient);

    let stage1 = match &args.stage1 {
        Some(p) => {
            let ckpt = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            if ckpt.manifest.stage != Stage::One {
                bail!("{} holds a stage {} model, not stage 1", p.display(), ckpt.manifest.stage);
            }
            if ckpt.manifest.preset != preset {
                bail!("{} was trained with preset {}, not {preset}", p.display(), ckpt.manifest.preset);
            }
            Some(ckpt.model()?)
        }
        None => None,
    };
    if stage.needs_stage1() && stage1.is_none() {
        bail!("stage {stage} needs --stage1 CKPT");
    }
    let mut model_cfg = match &stage1 {
        Some(m) => m.cfg.clone(),
        None => ModelConfig::preset(preset),
    };
    if stage1.is_some() && (args.filters.is_some() || args.dropout.is_some()) {
        bail!("--filters and --dropout come from the stage-1 checkpoint");
    }
    if let Some(f) = args.filters {
        model_cfg.pixelcnn.filters = f;
    }
    if let Some(d) = args.dropout {
        model_cfg.pixelcnn.dropout = d;
    }
    model_cfg.validate()?;

    let data = Dataset::load(&args.data)?;
    if data.size != model_cfg.vae.image_size {
        bail!("dataset images are {0}x{0} but preset {preset} expects {1}x{1}", data.size, model_cfg.vae.image_size);
    }
    let images = &data.images[..data.held_out_start(args.held_out)];
    tracing::info!(%stage, %preset, images = images.len(), epochs = cfg.epochs, "training");

    let model = initial_model(model_cfg, &cfg, stage1.as_ref())?;
    let (model, history) = train(model, &cfg, images, |_| {})?;
    let ckpt = Checkpoint::from_model(&model, Some(cfg), history.clone());
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    ckpt.save(&args.out)?;
    print_json(&serde_json::json!({ "out": args.out, "stage": stage, "history": history }))
}

fn diagnose(cmd: Diagnose) -> Result<()> {
    match cmd {
        Diagnose::Causality { checkpoint, preset, size, seed } => {
            let report = match checkpoint {
                Some(p) => diagnostics::model_causality(&load_model(&p)?.cast()?, seed)?,
                None => diagnostics::causality_suite(&ModelConfig::preset(preset.into()).pixelcnn, size, &[1, 3], seed)?,
            };
            print_json(&serde_json::json!({
                "causal": report.is_causal(),
                "violation_count": report.violation_count(),
                "report": report,
            }))
        }
        Diagnose::ReceptiveField { preset, blocks, size, seed } => {
            let mut cfg = ModelConfig::preset(preset.into()).pixelcnn;
            cfg.blocks = blocks.unwrap_or(cfg.blocks);
            let report = diagnostics::receptive_field(&cfg, size, seed)?;
            print_json(&serde_json::json!({
                "blocks": cfg.blocks,
                "matches_expected": report.matches_expected(),
                "report": report,
            }))
        }
        Diagnose::Decompose { checkpoint, data, batch, limit, seed } => {
            let model = load_model(&checkpoint)?;
            let data = Dataset::load(&data)?;
            let n = limit.unwrap_or(data.len()).min(data.len());
            let masks = vec![ContextMask::all_context(data.size); n];
            print_json(&diagnostics::decompose(&model, &data.images[..n], &masks, batch, seed)?)
        }
    }
}

struct Inputs {
    model: Model<f32>,
    image: Image,
    mask: ContextMask,
}

fn load_inputs(args: &InputArgs) -> Result<Inputs> {
    let model = load_model(&args.checkpoint)?;
    let image = load_png(&args.image, model.channels()).with_context(|| format!("reading {}", args.image.display()))?;
    let mask = decode_mask_png(&fs::read(&args.mask)?).with_context(|| format!("reading {}", args.mask.display()))?;
    fs::create_dir_all(&args.out)?;
    Ok(Inputs { model, image, mask })
}

fn write_images(dir: &Path, stem: &str, images: &[Image]) -> Result<Vec<PathBuf>> {
    images
        .iter()
        .enumerate()
        .map(|(k, img)| {
            let p = dir.join(format!("{stem}_{k:02}.png"));
            save_png(img, &p)?;
            Ok(p)
        })
        .collect()
}

/// Cells side by side in one PNG.
fn save_strip(images: &[Image], path: &Path) -> Result<()> {
    let (m, c) = (images[0].size, images[0].channels);
    let w = m * images.len();
    let mut buf = vec![0u8; w * m * c];
    for (k, img) in images.iter().enumerate() {
        for y in 0..m {
            let dst = (y * w + k * m) * c;
            buf[dst..dst + m * c].copy_from_slice(&img.data[y * m * c..(y + 1) * m * c]);
        }
    }
    let color = if c == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
    image::save_buffer(path, &buf, w as u32, m as u32, color)?;
    Ok(())
}

fn inpaint_cmd(args: InpaintArgs) -> Result<()> {
    let Inputs { model, image, mask } = load_inputs(&args.input)?;
    let req = InpaintRequest {
        image,
        mask,
        overrides: args.overrides.into_iter().collect::<BTreeMap<_, _>>(),
        seed: args.input.seed,
        count: args.count,
        truncated: !args.input.untruncated,
        latent: match args.latent {
            LatentArg::Sample => LatentSource::Sample,
            LatentArg::Mean => LatentSource::Mean,
        },
    };
    let out = service::inpaint(&model, &req)?;
    let files = write_images(&args.input.out, "completion", &out.images)?;
    print_json(&serde_json::json!({ "files": files, "latents": out.latents }))
}

fn traverse_cmd(args: TraverseArgs) -> Result<()> {
    let Inputs { model, image, mask } = load_inputs(&args.input)?;
    let values = args.values.unwrap_or_else(|| service::evenly_spaced(LATENT_RANGE.0, LATENT_RANGE.1, args.steps));
    let req = TraversalRequest {
        image,
        mask,
        index: args.index,
        values: values.clone(),
        seed: args.input.seed,
        mode: match args.mode {
            ModeArg::Inpaint => TraversalMode::Inpaint,
            ModeArg::Reconstruct => TraversalMode::Reconstruct,
        },
        truncated: !args.input.untruncated,
    };
    let cells = service::latent_traversal(&model, &req)?;
    let files = write_images(&args.input.out, "cell", &cells)?;
    let grid = args.input.out.join("grid.png");
    save_strip(&cells, &grid)?;
    print_json(&serde_json::json!({ "values": values, "files": files, "grid": grid }))
}

fn serve_cmd(args: ServeArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let state = csi_server::AppState::new(model, args.workers);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port)).await?;
        csi_server::serve(listener, state).await
    })?;
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_target(false).init();
    match Cli::parse().command {
        Command::Dataset(a) => dataset(a),
        Command::Train(a) => train_cmd(a),
        Command::Diagnose(d) => diagnose(d),
        Command::Inpaint(a) => inpaint_cmd(a),
        Command::Traverse(a) => traverse_cmd(a),
        Command::Serve(a) => serve_cmd(a),
    }
}
