use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use statrs::distribution::{Continuous, Normal};

use super::*;

fn dist(mean: Vec<f64>, log_var: Vec<f64>) -> LatentDist {
    LatentDist { mean, log_var }
}

fn gaussian_draws(n: usize, d: usize, shift: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(&[n, d], |_| {
        let e: f64 = StandardNormal.sample(rng);
        shift + e
    })
}

#[test]
fn kl_closed_form_cases() {
    assert_eq!(gaussian_kl(&dist(vec![0.0; 4], vec![0.0; 4])), 0.0);
    let mu = vec![1.0, -2.0, 0.5];
    let want = mu.iter().map(|m| m * m).sum::<f64>() / 2.0;
    assert!((gaussian_kl(&dist(mu, vec![0.0; 3])) - want).abs() < 1e-12);
}

#[test]
fn kl_matches_monte_carlo() {
    let q = dist(vec![0.7, -0.3], vec![-0.5, 0.4]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 1_000_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let z = q.sample(&mut rng);
        let mut lq = 0.0;
        let mut lp = 0.0;
        for j in 0..2 {
            let s = (q.log_var[j] / 2.0).exp();
            lq += Normal::new(q.mean[j], s).unwrap().ln_pdf(z[j]);
            lp += -0.5 * (LN_2PI + z[j] * z[j]);
        }
        acc += lq - lp;
    }
    let mc = acc / n as f64;
    let exact = gaussian_kl(&q);
    assert!((mc - exact).abs() < 0.01 * exact, "{mc} vs {exact}");
}

#[test]
fn kl_graph_agrees_and_is_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dists: Vec<LatentDist> = (0..4)
        .map(|_| dist((0..3).map(|_| rng.random_range(-2.0..2.0)).collect(), (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()))
        .collect();
    let mut g = Graph::<f64>::new();
    let m = g.constant(Tensor::new(&[4, 3], dists.iter().flat_map(|d| d.mean.clone()).collect()).unwrap());
    let lv = g.constant(Tensor::new(&[4, 3], dists.iter().flat_map(|d| d.log_var.clone()).collect()).unwrap());
    let k = gaussian_kl_graph(&mut g, m, lv).unwrap();
    let want = dists.iter().map(gaussian_kl).sum::<f64>() / 4.0;
    assert!((g.value(k).item() - want).abs() < 1e-12);
    assert!(dists.iter().all(|d| gaussian_kl(d) >= 0.0));
}

#[test]
fn mmd_of_identical_sets_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = gaussian_draws(64, 4, 0.0, &mut rng);
    let v = mmd_rbf(&z, &z, &default_bandwidths(4)).unwrap();
    assert!(v.abs() < 1e-12);
}

#[test]
fn mmd_requires_two_samples() {
    let a = Tensor::zeros(&[1, 3]);
    let b = Tensor::zeros(&[5, 3]);
    assert!(mmd_rbf(&a, &b, &[9.0]).is_err());
    assert!(mmd_rbf(&b, &a, &[9.0]).is_err());
}

#[test]
fn mmd_symmetric_and_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = gaussian_draws(20, 3, 0.0, &mut rng);
    let b = gaussian_draws(30, 3, 0.5, &mut rng);
    let bw = [2.0, 9.0];
    let ab = mmd_rbf(&a, &b, &bw).unwrap();
    let ba = mmd_rbf(&b, &a, &bw).unwrap();
    assert!((ab - ba).abs() < 1e-12);
    let mut rows: Vec<Vec<f64>> = a.data().chunks(3).map(|c| c.to_vec()).collect();
    rows.reverse();
    rows.swap(0, 7);
    let a2 = Tensor::new(&[20, 3], rows.concat()).unwrap();
    assert!((mmd_rbf(&a2, &b, &bw).unwrap() - ab).abs() < 1e-12);
}

#[test]
fn mmd_null_and_shifted_distributions() {
    let d = 8;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let p = gaussian_draws(512, d, 0.0, &mut rng);
        let q = gaussian_draws(512, d, 0.0, &mut rng);
        let shifted = gaussian_draws(512, d, 3.0, &mut rng);
        let null = mmd_rbf(&q, &p, &default_bandwidths(d)).unwrap();
        assert!(null.abs() < 0.02, "seed {seed}: {null}");
        assert!(mmd_rbf(&shifted, &p, &default_bandwidths(d)).unwrap() > 0.0);
    }
}

#[test]
fn mmd_graph_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = gaussian_draws(6, 3, 0.3, &mut rng);
    let p = gaussian_draws(5, 3, 0.0, &mut rng);
    let err = crate::ndgrad::finite_diff_check(|g, x| mmd_graph(g, x, &p, &[1.5, 9.0]), &q, 1e-6).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn regularizer_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut g = Graph::<f64>::new();
    let mean = g.constant(Tensor::zeros(&[8, 4]));
    let lv = g.constant(Tensor::zeros(&[8, 4]));
    let z = g.constant(gaussian_draws(8, 4, 0.0, &mut rng));
    let kl = stage1_regularizer(&RegularizerConfig::kl(1.0), &mut g, mean, lv, z, &mut rng).unwrap();
    assert_eq!(g.value(kl).item(), 0.0);
    let zero = stage1_regularizer(&RegularizerConfig::mmd(0.0), &mut g, mean, lv, z, &mut rng).unwrap();
    assert_eq!(g.value(zero).item(), 0.0);
    let mut tc = RegularizerConfig::kl(1.0);
    tc.kind = RegularizerKind::InfoBetaTcVae;
    assert!(matches!(
        stage1_regularizer(&tc, &mut g, mean, lv, z, &mut rng),
        Err(Error::DiagnosticOnly(_))
    ));
    assert!(RegularizerConfig::mmd(-1.0).validate().is_err());
}

#[test]
fn mmd_regularizer_small_when_aggregate_matches_prior() {
    // baseline scale: the shifted-Gaussian MMD, N(3*1, I) vs N(0, I)
    let d = 8;
    let n = 256;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let baseline = mmd_rbf(&gaussian_draws(n, d, 3.0, &mut rng), &gaussian_draws(n, d, 0.0, &mut rng), &default_bandwidths(d)).unwrap();
    let coef = 1e5;
    for _ in 0..10 {
        let mut g = Graph::<f64>::new();
        let zq = gaussian_draws(n, d, 0.0, &mut rng);
        let mean = g.constant(zq.clone());
        let lv = g.constant(Tensor::zeros(&[n, d]));
        let z = g.constant(zq);
        let r = stage1_regularizer(&RegularizerConfig::mmd(coef), &mut g, mean, lv, z, &mut rng).unwrap();
        let v = g.value(r).item();
        assert!(v < 0.05 * coef * baseline, "{v} vs {}", 0.05 * coef * baseline);
    }
}

/// 4 data points with 1-D Gaussian posteriors.
fn toy() -> (Vec<LatentDist>, Vec<Vec<f64>>) {
    let dists = vec![
        dist(vec![-1.5], vec![-1.0]),
        dist(vec![0.2], vec![-0.3]),
        dist(vec![0.9], vec![0.5]),
        dist(vec![2.0], vec![-2.0]),
    ];
    let zs = vec![vec![-1.2], vec![0.0], vec![1.4], vec![2.1]];
    (dists, zs)
}

fn pdf(z: f64, q: &LatentDist) -> f64 {
    let v = q.log_var[0].exp();
    (-(z - q.mean[0]).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
}

#[test]
fn estimator_equals_enumeration_when_batch_is_dataset() {
    let (dists, zs) = toy();
    let est = minibatch_marginal_log_density(&zs, &dists, 4).unwrap();
    let exact = zs
        .iter()
        .map(|z| (dists.iter().map(|q| pdf(z[0], q)).sum::<f64>() / 4.0).ln())
        .sum::<f64>()
        / 4.0;
    assert!(((est - exact) / exact).abs() < 1e-10, "{est} vs {exact}");
}

#[test]
fn estimator_subset_matches_direct_formula() {
    // batch of the first two points drawn from a dataset of four
    let (dists, zs) = toy();
    let (n, mb) = (4.0, 2.0);
    let direct = (0..2)
        .map(|m| {
            let own = pdf(zs[m][0], &dists[m]);
            let other = pdf(zs[m][0], &dists[1 - m]);
            ((own + (n - 1.0) / (mb - 1.0) * other) / n).ln()
        })
        .sum::<f64>()
        / 2.0;
    let est = minibatch_marginal_log_density(&zs[..2], &dists[..2], 4).unwrap();
    assert!((est - direct).abs() < 1e-12);
}

#[test]
fn estimator_collapses_to_prior_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = 3;
    let dists = vec![dist(vec![0.0; d], vec![0.0; d]); 16];
    let zs: Vec<Vec<f64>> = (0..16).map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    let est = minibatch_marginal_log_density(&zs, &dists, 1000).unwrap();
    let want = zs.iter().map(|z| z.iter().map(|v| -0.5 * (LN_2PI + v * v)).sum::<f64>()).sum::<f64>() / 16.0;
    assert!((est - want).abs() < 1e-10);
}

#[test]
fn estimator_errors() {
    let (dists, zs) = toy();
    assert!(minibatch_marginal_log_density(&zs[..1], &dists[..1], 4).is_err());
    assert!(minibatch_marginal_log_density(&zs, &dists, 3).is_err());
}

#[test]
fn decomposition_telescopes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let d = 4;
        let dists: Vec<LatentDist> = (0..32)
            .map(|_| dist((0..d).map(|_| rng.random_range(-2.0..2.0)).collect(), (0..d).map(|_| rng.random_range(-3.0..0.5)).collect()))
            .collect();
        let zs: Vec<Vec<f64>> = dists.iter().map(|q| q.sample(&mut rng)).collect();
        let k = decompose_kl(&zs, &dists, 5000).unwrap();
        assert!((k.total() - k.plugin_kl).abs() < 1e-10 * k.plugin_kl.abs().max(1.0), "{k:?}");
    }
}

#[test]
fn collapsed_posterior_has_no_mutual_information() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let q = dist(vec![0.3, -0.2], vec![-0.4, 0.1]);
    let dists = vec![q.clone(); 256];
    let zs: Vec<Vec<f64>> = (0..256).map(|_| q.sample(&mut rng)).collect();
    let k = decompose_kl(&zs, &dists, 10_000).unwrap();
    assert!(k.mi.abs() < 0.05, "{k:?}");
}

#[test]
fn factorised_aggregate_has_no_total_correlation() {
    // 16 x 16 grid of data points: dimension 0 depends only on the row
    // factor, dimension 1 only on the column factor.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let levels: Vec<f64> = (0..16).map(|i| -2.0 + i as f64 * 0.27).collect();
    let mut dists = Vec::new();
    for a in 0..16 {
        for b in 0..16 {
            dists.push(dist(vec![levels[a], levels[15 - b] * 0.8], vec![-2.0, -1.5]));
        }
    }
    let zs: Vec<Vec<f64>> = dists.iter().map(|q| q.sample(&mut rng)).collect();
    let k = decompose_kl(&zs, &dists, 256).unwrap();
    assert!(k.tc.abs() < 0.05, "{k:?}");
    assert!(k.mi > 0.5);
}
