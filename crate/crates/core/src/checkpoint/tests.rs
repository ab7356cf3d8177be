use super::*;
use crate::dataset::Dataset;
use crate::model::NllScope;
use crate::testutil::tiny_config;
use crate::trainer::{evaluation_masks, initial_model, mean_nll, train};
use crate::dataset::MaskSampler;

fn trained() -> (Model<f32>, TrainConfig, Vec<EpochRecord>) {
    let cfg = TrainConfig { batch_size: 4, epochs: 1, max_batches_per_epoch: Some(2), ..TrainConfig::preset(Preset::Desk, Stage::One) };
    let m = initial_model(tiny_config(), &cfg, None).unwrap();
    let imgs = Dataset::generate(0, 8, 16).unwrap().images;
    let (m, h) = train(m, &cfg, &imgs, |_| {}).unwrap();
    (m, cfg, h)
}

#[test]
fn save_load_round_trip_is_bit_exact() {
    let (m, cfg, h) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::from_model(&m, Some(cfg.clone()), h.clone()).save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.manifest.stage, Stage::One);
    assert_eq!(ck.manifest.train.as_ref(), Some(&cfg));
    assert_eq!(ck.manifest.history, h);
    let back = ck.model().unwrap();
    assert_eq!(back.store.digest(""), m.store.digest(""));
    let imgs = Dataset::generate(5, 4, 16).unwrap().images;
    let masks = evaluation_masks(&MaskSampler::default_for(16), 4, 1);
    let a = mean_nll(&m, &imgs, &masks, NllScope::AllPixels, 4, 0).unwrap();
    let b = mean_nll(&back, &imgs, &masks, NllScope::AllPixels, 4, 0).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert!(!dir.path().join("m.tmp").exists());
}

#[test]
fn manifest_lists_every_tensor_with_offsets() {
    let (m, _, _) = trained();
    let bytes = Checkpoint::from_model(&m, None, vec![]).to_bytes().unwrap();
    assert_eq!(&bytes[..8], b"CSICKPT\0");
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let man: Manifest = serde_json::from_slice(&bytes[16..16 + mlen]).unwrap();
    assert_eq!(man.tensors.len(), m.store.len());
    let mut off = 0;
    for t in &man.tensors {
        assert_eq!(t.offset, off);
        assert_eq!(t.len as usize, t.shape.iter().product::<usize>() * 4);
        off += t.len;
    }
    assert_eq!(bytes.len() - 16 - mlen, off as usize);
}

#[test]
fn truncated_or_tampered_files_are_corrupt() {
    let (m, _, _) = trained();
    let bytes = Checkpoint::from_model(&m, None, vec![]).to_bytes().unwrap();
    let p = Path::new("x.ckpt");
    for cut in [0, 10, 40, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut], p), Err(Error::CorruptCheckpoint { .. })), "cut {cut}");
    }
    let mut flipped = bytes.clone();
    *flipped.last_mut().unwrap() ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&flipped, p), Err(Error::CorruptCheckpoint { .. })));
}

#[test]
fn version_mismatch_is_reported() {
    let (m, _, _) = trained();
    let bytes = Checkpoint::from_model(&m, None, vec![]).to_bytes().unwrap();
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut man: serde_json::Value = serde_json::from_slice(&bytes[16..16 + mlen]).unwrap();
    man["version"] = serde_json::json!(CHECKPOINT_VERSION + 1);
    let json = serde_json::to_vec(&man).unwrap();
    let mut out = b"CSICKPT\0".to_vec();
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&bytes[16 + mlen..]);
    match Checkpoint::from_bytes(&out, Path::new("v.ckpt")) {
        Err(Error::VersionMismatch { found, expected }) => assert_eq!((found, expected), (CHECKPOINT_VERSION + 1, CHECKPOINT_VERSION)),
        other => panic!("{:?}", other.map(|_| ())),
    }
}

#[test]
fn wrong_preset_names_first_mismatched_tensor() {
    let (m, _, _) = trained();
    let ck = Checkpoint::from_model(&m, None, vec![]);
    let faithful = ModelConfig::preset(Preset::Faithful);
    match ck.model_for(&faithful) {
        Err(Error::TensorShape { name, expected, found }) => {
            // Sorted order: the first decoder deconv bias is the first tensor
            // whose shape differs (256 vs 64 channels).
            assert_eq!(name, "vae/dec/deconv0/b");
            assert_eq!((expected, found), (vec![256], vec![64]));
        }
        other => panic!("{:?}", other.map(|_| ())),
    }
}
