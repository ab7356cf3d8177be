use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dlm::dlm_log_prob;
use crate::testutil::tiny_config;

fn random_image(rng: &mut ChaCha8Rng) -> Image {
    crate::testutil::random_image(rng, 16)
}

fn stage2(seed: u64, stage: Stage) -> Model<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s1 = Model::<f64>::init(tiny_config(), Stage::One, &mut rng).unwrap();
    Model::from_stage1(&s1, stage, true, &mut rng).unwrap()
}

#[test]
fn stage_names_round_trip() {
    for s in [Stage::One, Stage::Two, Stage::OneStage, Stage::ForwardOnly] {
        assert_eq!(s.to_string().parse::<Stage>().unwrap(), s);
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<Stage>(&j).unwrap(), s);
    }
    assert!("3".parse::<Stage>().is_err());
}

#[test]
fn stage2_requires_stage1_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(Model::<f64>::init(tiny_config(), Stage::Two, &mut rng), Err(Error::MissingStage1(_))));
    let one = Model::<f64>::init(tiny_config(), Stage::OneStage, &mut rng).unwrap();
    assert!(matches!(Model::from_stage1(&one, Stage::Two, true, &mut rng), Err(Error::MissingStage1(_))));
}

#[test]
fn stage2_copies_forward_filters_and_refreshes_injections() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s1 = Model::<f64>::init(tiny_config(), Stage::One, &mut rng).unwrap();
    for reinit in [false, true] {
        let m = Model::from_stage1(&s1, Stage::Two, reinit, &mut rng).unwrap();
        let st = &m.store;
        assert_eq!(st.get("bi/fwd/block1/h/w").unwrap(), st.get("vae/pixelcnn/block1/h/w").unwrap());
        assert_eq!(st.get("bi/fwd/head/w").unwrap(), st.get("vae/pixelcnn/head/w").unwrap());
        let same_v = st.get("bi/fwd/block0/v_z/w").unwrap() == st.get("vae/pixelcnn/block0/v_z/w").unwrap();
        assert_eq!(same_v, !reinit);
        assert!(st.contains("bi/fwd/block0/v_r/w"));
        assert!(st.count_under("bi/rev/") > 0);
        assert_eq!(st.digest("vae/enc/"), s1.store.digest("vae/enc/"));
    }
    let fo = Model::from_stage1(&s1, Stage::ForwardOnly, true, &mut rng).unwrap();
    assert!(!fo.store.contains("bi/fwd/block0/v_r/w"));
    assert_eq!(fo.store.count_under("bi/rev/"), 0);
}

#[test]
fn stage_controls_trainable_set_and_frozen_prefixes() {
    let m = stage2(2, Stage::Two);
    assert!(matches!(m.trainable(), Trainable::Prefixes(_)));
    assert!(m.frozen_prefixes().contains(&"vae/enc/"));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let one = Model::<f64>::init(tiny_config(), Stage::One, &mut rng).unwrap();
    assert!(one.frozen_prefixes().is_empty());
}

#[test]
fn loss_scope_counts_all_pixels_in_stage1_and_targets_in_stage2() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let imgs = [random_image(&mut rng), random_image(&mut rng)];
    let masks = [ContextMask::with_target_rect(16, 2, 3, 5, 4).unwrap(), ContextMask::with_target_rect(16, 0, 0, 1, 1).unwrap()];
    let ir: Vec<&Image> = imgs.iter().collect();
    let mr: Vec<&ContextMask> = masks.iter().collect();
    let s1 = Model::<f64>::init(tiny_config(), Stage::One, &mut rng).unwrap();
    let reg = RegularizerConfig::mmd(10.0);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(40);
    let mut ctx = Ctx::new(&s1.store, s1.trainable()).with_rng(&mut drop_rng);
    let parts = s1.loss(&mut ctx, &ir, &mr, Some(&reg), &mut rng, true).unwrap();
    assert_eq!(parts.nll.pixels, 2 * 256);
    assert!(parts.regularizer > 0.0);
    let s2 = Model::from_stage1(&s1, Stage::Two, true, &mut rng).unwrap();
    let mut ctx = Ctx::new(&s2.store, s2.trainable());
    let parts = s2.loss(&mut ctx, &ir, &mr, Some(&reg), &mut rng, false).unwrap();
    assert_eq!(parts.nll.pixels, 20 + 1);
    assert_eq!(parts.regularizer, 0.0);
}

#[test]
fn empty_target_gives_zero_stage2_loss() {
    let m = stage2(5, Stage::Two);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = random_image(&mut rng);
    let mask = ContextMask::all_context(16);
    let mut ctx = Ctx::new(&m.store, Trainable::Nothing);
    let parts = m.loss(&mut ctx, &[&img], &[&mask], None, &mut rng, false).unwrap();
    assert_eq!(parts.nll.pixels, 0);
    assert_eq!(ctx.g.value(parts.loss).item(), 0.0);
}

#[test]
fn single_target_nll_equals_direct_log_prob() {
    let m = stage2(7, Stage::Two);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = random_image(&mut rng);
    let mask = ContextMask::with_target_rect(16, 9, 4, 1, 1).unwrap();
    let nll = m.evaluate_nll(&[&img], &[&mask], NllScope::TargetOnly, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let q = m.encode_dist(&img, &mask, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let lp = m.target_log_probs(&img, &mask, &q.mean).unwrap();
    assert_eq!(lp.len(), 1);
    assert!((nll.total_nll + lp[0]).abs() < 1e-9, "{} vs {}", nll.total_nll, lp[0]);
    // Direct mixture evaluation at the pixel.
    let yz = m.decode_features(&q.mean).unwrap();
    let yr = m.reverse_features(&img, &mask).unwrap().unwrap();
    let mut ctx = Ctx::new(&m.store, Trainable::Nothing);
    let x = ctx.input(image_batch::<f64>(&[&img]).unwrap());
    let (z, r) = (ctx.input(yz), ctx.input(yr));
    let raw = m.fwd.forward(&mut ctx, x, Some(z), Some(r), Mode::Infer).unwrap();
    let p = m.cfg.pixelcnn.layout().param_count();
    let o = (4 * 16 + 9) * p;
    let mp = crate::dlm::MixtureParams::from_raw(m.cfg.pixelcnn.layout(), &ctx.g.value(raw).data()[o..o + p]);
    let direct = dlm_log_prob(&mp, &crate::dlm::PixelValue::from_bytes(img.pixel(4, 9))).unwrap();
    assert!((direct - lp[0]).abs() < 1e-12);
}

#[test]
fn target_scope_weights_exactly_the_target_pixels() {
    let mask = ContextMask::with_target_rect(4, 1, 1, 2, 2).unwrap();
    let w = pixel_weights(&[&mask], NllScope::TargetOnly);
    assert_eq!(w.iter().filter(|&&b| b).count(), 4);
    assert!(w.iter().zip(&mask.data).all(|(&w, &c)| w != c));
    assert!(pixel_weights(&[&mask], NllScope::AllPixels).iter().all(|&b| b));
}

#[test]
fn completion_preserves_context_and_reconstruction_fills_everything() {
    let m = stage2(10, Stage::Two);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let img = random_image(&mut rng);
    let mask = ContextMask::with_target_rect(16, 5, 6, 4, 3).unwrap();
    let z = vec![0.0; m.latent_dim()];
    let c = m.complete(&img, &mask, &z, &mut rng, true).unwrap();
    for (k, &ctxp) in mask.data.iter().enumerate() {
        if ctxp {
            assert_eq!(&c.image.data[k * 3..k * 3 + 3], &img.data[k * 3..k * 3 + 3]);
        }
    }
    let empty = m.complete(&img, &ContextMask::all_context(16), &z, &mut rng, true).unwrap();
    assert_eq!(empty.image, img);
    let r = m.reconstruct(&img, &z, &mut rng, true).unwrap();
    assert_eq!(r.log_probs.len(), 256);
    let one = Model::<f64>::init(tiny_config(), Stage::OneStage, &mut rng).unwrap();
    assert!(matches!(one.reconstruct(&img, &z, &mut rng, true), Err(Error::MissingTensor(_))));
}

#[test]
fn from_store_reports_first_mismatched_tensor() {
    let m = stage2(12, Stage::Two);
    let mut cfg = tiny_config();
    cfg.pixelcnn.filters = 5;
    let err = Model::from_store(cfg, Stage::Two, m.store.clone()).unwrap_err();
    match err {
        Error::TensorShape { name, .. } => assert_eq!(name, "bi/fwd/block0/h/b"),
        e => panic!("unexpected {e}"),
    }
    assert!(Model::from_store(tiny_config(), Stage::Two, m.store.clone()).is_ok());
    let mut missing = m.store.clone();
    missing.remove("bi/rev/head/w");
    assert!(matches!(Model::from_store(tiny_config(), Stage::Two, missing), Err(Error::MissingTensor(_))));
}

#[test]
fn encode_is_deterministic_for_a_seed_and_sized_by_latent_dim() {
    let m = stage2(13, Stage::Two);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let img = random_image(&mut rng);
    let mask = ContextMask::with_target_rect(16, 0, 8, 16, 8).unwrap();
    let a = m.encode_dist(&img, &mask, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = m.encode_dist(&img, &mask, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.dim(), 8);
    let full = m.encode_dist(&img, &ContextMask::all_context(16), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_ne!(a.mean, full.mean);
    assert!(m.encode_dist(&Image::filled(8, 3, 0), &ContextMask::all_context(8), &mut rng).is_err());
}
