//! Synthetic factor-labelled shapes and rectangle mask sampling.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vaecore::{ContextMask, Image};

/// Uniform rectangle target regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSampler {
    pub size: usize,
    pub min_width: usize,
    pub max_width: usize,
    pub min_height: usize,
    pub max_height: usize,
}

impl MaskSampler {
    /// Rectangles between a quarter and three quarters of the side.
    pub fn default_for(size: usize) -> Self {
        let lo = (size / 4).max(1);
        let hi = (3 * size / 4).max(lo);
        MaskSampler { size, min_width: lo, max_width: hi, min_height: lo, max_height: hi }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |lo: usize, hi: usize| lo >= 1 && lo <= hi && hi <= self.size;
        if !ok(self.min_width, self.max_width) || !ok(self.min_height, self.max_height) {
            return Err(Error::InvalidArgument(format!("invalid mask sampler {self:?}")));
        }
        Ok(())
    }

    /// Width, height, then column and row of the top-left corner, each
    /// uniform given the previous draws.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ContextMask {
        let w = rng.random_range(self.min_width..=self.max_width);
        let h = rng.random_range(self.min_height..=self.max_height);
        let x = rng.random_range(0..=self.size - w);
        let y = rng.random_range(0..=self.size - h);
        ContextMask::with_target_rect(self.size, x, y, w, h).expect("rectangle fits by construction")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];
}

/// Generative factors of one image. Positions and size are fractions of
/// the image side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Factors {
    pub shape: ShapeKind,
    pub x: f64,
    pub y: f64,
    pub size: f64,
    pub hue: f64,
    pub background: f64,
}

pub const POSITION_RANGE: (f64, f64) = (0.3, 0.7);
pub const SIZE_RANGE: (f64, f64) = (0.2, 0.4);
/// Hue stops short of wrapping back to red so it orders linearly.
pub const HUE_RANGE: (f64, f64) = (0.0, 0.8);
pub const BACKGROUND_RANGE: (f64, f64) = (0.0, 0.5);
const SATURATION: f64 = 0.9;
const VALUE: f64 = 0.95;
const SUPERSAMPLE: usize = 4;

impl Factors {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut u = |(lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
        let (x, y, size, hue, background) = (u(POSITION_RANGE), u(POSITION_RANGE), u(SIZE_RANGE), u(HUE_RANGE), u(BACKGROUND_RANGE));
        let shape = ShapeKind::ALL[rng.random_range(0..3)];
        Factors { shape, x, y, size, hue, background }
    }
}

/// HSV in `[0,1]^3` to RGB in `[0,1]^3`.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// RGB in `[0,1]^3` to (hue, saturation, value).
pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    if d == 0.0 {
        return (0.0, s, max);
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    (h / 6.0, s, max)
}

fn inside(f: &Factors, px: f64, py: f64) -> bool {
    let (dx, dy) = (px - f.x, py - f.y);
    let r = f.size / 2.0;
    match f.shape {
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
        ShapeKind::Triangle => {
            // Apex up, base at +r.
            dy <= r && dy >= -r && dx.abs() <= (dy + r) / 2.0
        }
    }
}

/// Renders the shape with `SUPERSAMPLE^2` coverage anti-aliasing.
pub fn render(f: &Factors, size: usize) -> Image {
    let fg = hsv_to_rgb(f.hue, SATURATION, VALUE);
    let bg = f.background;
    let n = SUPERSAMPLE;
    let mut data = Vec::with_capacity(size * size * 3);
    for row in 0..size {
        for col in 0..size {
            let mut hits = 0;
            for sy in 0..n {
                for sx in 0..n {
                    let px = (col as f64 + (sx as f64 + 0.5) / n as f64) / size as f64;
                    let py = (row as f64 + (sy as f64 + 0.5) / n as f64) / size as f64;
                    hits += inside(f, px, py) as usize;
                }
            }
            let a = hits as f64 / (n * n) as f64;
            for &c in &fg {
                data.push(((a * c + (1.0 - a) * bg) * 255.0).round() as u8);
            }
        }
    }
    Image { size, channels: 3, data }
}

/// Hue of the most common saturated colour among the selected pixels:
/// histogram argmax over `bins` hue bins, refined to the mean hue inside
/// the winning bin. `None` if no pixel is saturated enough.
pub fn dominant_hue(image: &Image, select: impl Fn(usize, usize) -> bool, bins: usize) -> Option<f64> {
    let mut hist = vec![(0usize, 0.0f64); bins];
    for y in 0..image.size {
        for x in 0..image.size {
            if image.channels != 3 || !select(y, x) {
                continue;
            }
            let p = image.pixel(y, x);
            let (h, s, v) = rgb_to_hsv([p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0]);
            if s < 0.35 || v < 0.25 {
                continue;
            }
            let b = ((h * bins as f64) as usize).min(bins - 1);
            hist[b].0 += 1;
            hist[b].1 += h;
        }
    }
    let (count, sum) = hist.into_iter().max_by_key(|e| e.0)?;
    (count > 0).then(|| sum / count as f64)
}

/// Rendered images with their factors.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub size: usize,
    pub images: Vec<Image>,
    pub factors: Vec<Factors>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FactorRow {
    file: String,
    shape: ShapeKind,
    x: f64,
    y: f64,
    size: f64,
    hue: f64,
    background: f64,
}

pub const FACTORS_FILE: &str = "factors.csv";

impl Dataset {
    pub fn generate(seed: u64, count: usize, size: usize) -> Result<Self> {
        if count == 0 || size == 0 {
            return Err(Error::InvalidArgument("dataset needs at least one image of positive size".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let factors: Vec<Factors> = (0..count).map(|_| Factors::sample(&mut rng)).collect();
        let images = factors.iter().map(|f| render(f, size)).collect();
        Ok(Dataset { size, images, factors })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Index of the first held-out image: the last `fraction` of the data.
    pub fn held_out_start(&self, fraction: f64) -> usize {
        let n = self.len();
        n - ((n as f64 * fraction).round() as usize).min(n)
    }

    /// `(train, held_out)` index ranges for a 10% held-out tail.
    pub fn split(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let s = self.held_out_start(0.1);
        (0..s, s..self.len())
    }

    fn file_name(i: usize) -> String {
        format!("{i:05}.png")
    }

    /// Writes one PNG per image plus `factors.csv`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(FACTORS_FILE))?;
        for (i, (img, f)) in self.images.iter().zip(&self.factors).enumerate() {
            let file = Self::file_name(i);
            save_png(img, &dir.join(&file))?;
            w.serialize(FactorRow { file, shape: f.shape, x: f.x, y: f.y, size: f.size, hue: f.hue, background: f.background })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(dir.join(FACTORS_FILE))?;
        let mut images = Vec::new();
        let mut factors = Vec::new();
        for row in r.deserialize() {
            let row: FactorRow = row?;
            images.push(load_png(&dir.join(&row.file), 3)?);
            factors.push(Factors { shape: row.shape, x: row.x, y: row.y, size: row.size, hue: row.hue, background: row.background });
        }
        let size = images.first().map(|i: &Image| i.size).ok_or_else(|| Error::InvalidArgument(format!("no images in {}", dir.display())))?;
        if let Some(bad) = images.iter().find(|i| i.size != size) {
            return Err(crate::error::shape_err("dataset", "image side", size, bad.size));
        }
        Ok(Dataset { size, images, factors })
    }
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let color = if img.channels == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
    let enc = image::codecs::png::PngEncoder::new(&mut out);
    image::ImageEncoder::write_image(enc, &img.data, img.size as u32, img.size as u32, color)?;
    Ok(out)
}

pub fn decode_png(bytes: &[u8], channels: usize) -> Result<Image> {
    let dynimg = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    if w != h {
        return Err(crate::error::shape_err("png", "height", w, h));
    }
    let data = match channels {
        1 => dynimg.into_luma8().into_raw(),
        3 => dynimg.into_rgb8().into_raw(),
        c => return Err(Error::InvalidArgument(format!("unsupported channel count {c}"))),
    };
    Image::new(w, channels, data)
}

/// Mask PNG: white (>= 128) is context, black is target.
pub fn decode_mask_png(bytes: &[u8]) -> Result<ContextMask> {
    let img = decode_png(bytes, 1)?;
    Ok(ContextMask { size: img.size, data: img.data.iter().map(|&v| v >= 128).collect() })
}

pub fn encode_mask_png(mask: &ContextMask) -> Result<Vec<u8>> {
    encode_png(&Image { size: mask.size, channels: 1, data: mask.data.iter().map(|&c| if c { 255 } else { 0 }).collect() })
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    fs::write(path, encode_png(img)?)?;
    Ok(())
}

pub fn load_png(path: &Path, channels: usize) -> Result<Image> {
    decode_png(&fs::read(path)?, channels)
}
