
use super::*;
use crate::dataset::Dataset;
use crate::testutil::tiny_config;

fn small_cfg(stage: Stage) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs: 2,
        seed: 3,
        learning_rate: 1e-3,
        max_batches_per_epoch: Some(3),
        ..TrainConfig::preset(Preset::Desk, stage)
    }
}

fn data() -> Vec<Image> {
    Dataset::generate(1, 16, 16).unwrap().images
}

fn stage1_model() -> Model<f32> {
    initial_model(tiny_config(), &small_cfg(Stage::One), None).unwrap()
}

#[test]
fn presets_follow_documented_defaults() {
    let f = TrainConfig::preset(Preset::Faithful, Stage::One);
    assert_eq!((f.batch_size, f.learning_rate, f.regularizer.coefficient), (64, 1e-4, 2e6));
    let d = TrainConfig::preset(Preset::Desk, Stage::One);
    assert_eq!((d.batch_size, d.regularizer.coefficient, d.clip_norm), (32, 1e5, 5.0));
    assert!(TrainConfig { batch_size: 1, ..d.clone() }.validate().is_err());
    assert!(TrainConfig { learning_rate: 0.0, ..d }.validate().is_err());
}

#[test]
fn zero_epochs_returns_initialisation() {
    let m = stage1_model();
    let before = m.store.digest("");
    let (m, hist) = train(m, &TrainConfig { epochs: 0, ..small_cfg(Stage::One) }, &data(), |_| {}).unwrap();
    assert!(hist.is_empty());
    assert_eq!(m.store.digest(""), before);
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let (m, h) = train(stage1_model(), &small_cfg(Stage::One), &data(), |_| {}).unwrap();
        (m.store.digest(""), h.iter().map(|r| (r.nll, r.regularizer, r.grad_norm)).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn stage1_scores_every_pixel_and_updates_all_parts() {
    let m = stage1_model();
    let (enc, pcnn) = (m.store.digest("vae/enc/"), m.store.digest("vae/pixelcnn/"));
    let mut seen = Vec::new();
    let (m, hist) = train(m, &small_cfg(Stage::One), &data(), |r| seen.push(r.epoch)).unwrap();
    assert_eq!(seen, vec![1, 2]);
    assert_eq!(hist[0].pixels, 3 * 4 * 256);
    assert!(hist[0].regularizer > 0.0);
    assert_ne!(m.store.digest("vae/enc/"), enc);
    assert_ne!(m.store.digest("vae/pixelcnn/"), pcnn);
}

#[test]
fn stage2_freezes_encoder_decoder_and_stage1_stack() {
    let (s1, _) = train(stage1_model(), &small_cfg(Stage::One), &data(), |_| {}).unwrap();
    for stage in [Stage::Two, Stage::ForwardOnly] {
        let cfg = small_cfg(stage);
        let m = initial_model(tiny_config(), &cfg, Some(&s1)).unwrap();
        let before: Vec<String> = ["vae/enc/", "vae/dec/", "vae/pixelcnn/", "bi/"].iter().map(|p| m.store.digest(p)).collect();
        let (m, hist) = train(m, &cfg, &data(), |_| {}).unwrap();
        assert_eq!(m.store.digest("vae/enc/"), before[0]);
        assert_eq!(m.store.digest("vae/dec/"), before[1]);
        assert_eq!(m.store.digest("vae/pixelcnn/"), before[2]);
        assert_ne!(m.store.digest("bi/"), before[3]);
        assert_eq!(hist[0].regularizer, 0.0);
        assert!(hist[0].pixels < 3 * 4 * 256);
    }
}

#[test]
fn stage2_without_stage1_is_an_error() {
    let err = initial_model::<f32>(tiny_config(), &small_cfg(Stage::Two), None).unwrap_err();
    assert!(matches!(err, Error::MissingStage1(_)));
}

#[test]
fn mismatched_stage_and_tiny_dataset_are_rejected() {
    let m = stage1_model();
    assert!(train(m.clone(), &small_cfg(Stage::OneStage), &data(), |_| {}).is_err());
    assert!(train(m, &small_cfg(Stage::One), &data()[..3], |_| {}).is_err());
}

#[test]
fn non_finite_loss_aborts_with_diagnostic() {
    let mut m = stage1_model();
    m.store.get_mut("vae/pixelcnn/head/b").unwrap().data_mut()[0] = f32::NAN;
    match train(m, &small_cfg(Stage::One), &data(), |_| {}) {
        Err(Error::Diverged { epoch, step, detail }) => {
            assert_eq!((epoch, step), (1, 0));
            assert!(detail.contains("nll"), "{detail}");
        }
        other => panic!("expected divergence, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn onestage_trains_everything() {
    let cfg = small_cfg(Stage::OneStage);
    let m = initial_model::<f32>(tiny_config(), &cfg, None).unwrap();
    let enc = m.store.digest("vae/enc/");
    let (m, hist) = train(m, &cfg, &data(), |_| {}).unwrap();
    assert_eq!(m.stage, Stage::OneStage);
    assert_ne!(m.store.digest("vae/enc/"), enc);
    assert!(hist.iter().all(|r| r.nll.is_finite() && r.regularizer > 0.0));
}

#[test]
fn stage1_nll_drops_on_a_small_run() {
    let imgs = Dataset::generate(2, 64, 16).unwrap().images;
    let cfg = TrainConfig { epochs: 6, max_batches_per_epoch: None, batch_size: 8, learning_rate: 3e-3, ..small_cfg(Stage::One) };
    let (_, hist) = train(stage1_model(), &cfg, &imgs, |_| {}).unwrap();
    assert!(hist.last().unwrap().nll < 0.9 * hist[0].nll, "{:?}", hist.iter().map(|r| r.nll).collect::<Vec<_>>());
}

#[test]
fn evaluation_masks_and_mean_nll_are_reproducible() {
    let m = stage1_model();
    let imgs = data();
    let masks = evaluation_masks(&MaskSampler::default_for(16), imgs.len(), 9);
    assert_eq!(masks, evaluation_masks(&MaskSampler::default_for(16), imgs.len(), 9));
    let a = mean_nll(&m, &imgs, &masks, NllScope::TargetOnly, 5, 1).unwrap();
    let b = mean_nll(&m, &imgs, &masks, NllScope::TargetOnly, 5, 1).unwrap();
    assert_eq!(a, b);
    let all = mean_nll(&m, &imgs, &masks, NllScope::AllPixels, 5, 1).unwrap();
    assert!(a > 0.0 && all > 0.0);
}
