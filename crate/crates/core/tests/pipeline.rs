use rand::rngs::StdRng;
use rand::SeedableRng;

use csi_core::checkpoint::Checkpoint;
use csi_core::dataset::Dataset;
use csi_core::model::{Model, ModelConfig, Stage};
use csi_core::service::{inpaint, InpaintRequest};
use csi_core::trainer::{train, TrainConfig};
use csi_core::vaecore::{ContextMask, Preset};

fn small(stage: Stage) -> TrainConfig {
    TrainConfig { epochs: 1, batch_size: 4, max_batches_per_epoch: Some(2), ..TrainConfig::preset(Preset::Desk, stage) }
}

#[test]
fn two_stage_training_checkpoint_and_inpaint() {
    let data = Dataset::generate(9, 12, 16).unwrap();
    let mut cfg = ModelConfig::preset(Preset::Desk);
    cfg.pixelcnn.filters = 4;
    cfg.pixelcnn.blocks = 2;
    cfg.pixelcnn.reverse_blocks = 2;
    cfg.pixelcnn.reverse_channels = 4;
    let mut rng = StdRng::seed_from_u64(0);

    let s1 = Model::<f32>::init(cfg, Stage::One, &mut rng).unwrap();
    let (s1, hist) = train(s1, &small(Stage::One), &data.images, |_| {}).unwrap();
    assert_eq!(hist.len(), 1);
    assert!(hist[0].nll.is_finite());

    let s2 = Model::from_stage1(&s1, Stage::Two, true, &mut rng).unwrap();
    let frozen: Vec<String> = s2.frozen_prefixes().iter().map(|p| s2.store.digest(p)).collect();
    let (s2, _) = train(s2, &small(Stage::Two), &data.images, |_| {}).unwrap();
    let after: Vec<String> = s2.frozen_prefixes().iter().map(|p| s2.store.digest(p)).collect();
    assert_eq!(frozen, after);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s2.ckpt");
    Checkpoint::from_model(&s2, Some(small(Stage::Two)), Vec::new()).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap().model().unwrap();

    let mask = ContextMask::with_target_rect(16, 4, 4, 8, 8).unwrap();
    let mut req = InpaintRequest::new(data.images[0].clone(), mask.clone(), 5);
    req.count = 2;
    req.overrides.insert(3, 2.0);
    let a = inpaint(&s2, &req).unwrap();
    let b = inpaint(&loaded, &req).unwrap();
    assert_eq!(a, b);
    for (img, z) in a.images.iter().zip(&a.latents) {
        assert_eq!(z[3], 2.0);
        for y in 0..16 {
            for x in 0..16 {
                if mask.is_context(y, x) {
                    let i = (y * 16 + x) * 3;
                    assert_eq!(img.data[i..i + 3], data.images[0].data[i..i + 3]);
                }
            }
        }
    }
}
