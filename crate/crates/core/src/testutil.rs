use rand::Rng;

use crate::model::ModelConfig;
use crate::vaecore::{Image, Preset};

/// Desk VAE with a very small PixelCNN, for fast tests.
pub fn tiny_config() -> ModelConfig {
    let mut cfg = ModelConfig::preset(Preset::Desk);
    cfg.pixelcnn.filters = 4;
    cfg.pixelcnn.blocks = 2;
    cfg.pixelcnn.components = 2;
    cfg.pixelcnn.reverse_blocks = 2;
    cfg.pixelcnn.reverse_channels = 3;
    cfg
}

pub fn random_image<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Image {
    Image::new(size, 3, (0..size * size * 3).map(|_| rng.random()).collect()).unwrap()
}
