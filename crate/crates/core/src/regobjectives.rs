//! Latent regularisers (Gaussian KL, RBF-kernel MMD) and the MI / TC / PD
//! decomposition of the averaged KL term.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dlm::log_sum_exp;
use crate::error::{shape_err, Error, Result};
use crate::ndgrad::{CustomOp, Graph, Real, Tensor, Var};
use crate::vaecore::LatentDist;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegularizerKind {
    VaeKl,
    InfoVaeMmd,
    /// Only available through [`decompose_kl`]; never a training objective.
    InfoBetaTcVae,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub kind: RegularizerKind,
    pub coefficient: f64,
    pub beta: f64,
    /// Kernel denominators `h` in `exp(-|x - y|^2 / h)`; empty means the
    /// default `D^2`.
    #[serde(default)]
    pub bandwidths: Vec<f64>,
}

impl RegularizerConfig {
    pub fn mmd(coefficient: f64) -> Self {
        RegularizerConfig {
            kind: RegularizerKind::InfoVaeMmd,
            coefficient,
            beta: 1.0,
            bandwidths: Vec::new(),
        }
    }

    pub fn kl(coefficient: f64) -> Self {
        RegularizerConfig {
            kind: RegularizerKind::VaeKl,
            coefficient,
            beta: 1.0,
            bandwidths: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.coefficient >= 0.0) {
            return Err(Error::InvalidArgument(format!("regulariser coefficient {} must be >= 0", self.coefficient)));
        }
        if self.bandwidths.iter().any(|&h| !(h > 0.0)) {
            return Err(Error::InvalidArgument("kernel bandwidths must be positive".into()));
        }
        Ok(())
    }

    fn kernel_bandwidths(&self, dim: usize) -> Vec<f64> {
        if self.bandwidths.is_empty() {
            default_bandwidths(dim)
        } else {
            self.bandwidths.clone()
        }
    }
}

/// The InfoVAE tutorial kernel `exp(-mean_d (x_d - y_d)^2 / D)`, i.e. a
/// single denominator `D^2` on the squared distance.
pub fn default_bandwidths(dim: usize) -> Vec<f64> {
    vec![(dim * dim) as f64]
}

/// `KL(N(mean, exp(log_var)) || N(0, I))`.
pub fn gaussian_kl(q: &LatentDist) -> f64 {
    q.mean
        .iter()
        .zip(&q.log_var)
        .map(|(m, lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv))
        .sum()
}

/// Batch-mean Gaussian KL of `[B, D]` mean / log-variance nodes.
pub fn gaussian_kl_graph<T: Real>(g: &mut Graph<T>, mean: Var, log_var: Var) -> Result<Var> {
    let b = g.shape(mean)[0];
    let e = g.exp(log_var);
    let m2 = g.square(mean);
    let s = g.add(e, m2)?;
    let s = g.sub(s, log_var)?;
    let s = g.add_scalar(s, -T::one());
    let total = g.sum(s);
    Ok(g.scale(total, T::from_f64(0.5 / b as f64)))
}

fn check_samples(zq: &Tensor<f64>, zp: &Tensor<f64>) -> Result<(usize, usize, usize)> {
    if zq.rank() != 2 || zp.rank() != 2 {
        return Err(Error::InvalidArgument("mmd samples must be [n, D] matrices".into()));
    }
    let (n, d) = (zq.shape()[0], zq.shape()[1]);
    let m = zp.shape()[0];
    if zp.shape()[1] != d {
        return Err(shape_err("mmd_rbf", "latent dimension", d, zp.shape()[1]));
    }
    if n < 2 || m < 2 {
        return Err(Error::InvalidArgument(format!("mmd needs at least 2 samples per set, got {n} and {m}")));
    }
    Ok((n, m, d))
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
fn kernel(d2: f64, bandwidths: &[f64]) -> f64 {
    bandwidths.iter().map(|h| (-d2 / h).exp()).sum()
}

fn mean_kernel(a: &Tensor<f64>, b: &Tensor<f64>, d: usize, bw: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in a.data().chunks_exact(d) {
        for y in b.data().chunks_exact(d) {
            s += kernel(sq_dist(x, y), bw);
        }
    }
    s / (a.shape()[0] * b.shape()[0]) as f64
}

/// V-statistic estimate (diagonal terms included) of the squared MMD
/// between `zq` (`[n, D]`) and `zp` (`[m, D]`) with a sum of RBF kernels.
pub fn mmd_rbf(zq: &Tensor<f64>, zp: &Tensor<f64>, bandwidths: &[f64]) -> Result<f64> {
    let (_, _, d) = check_samples(zq, zp)?;
    Ok(mean_kernel(zq, zq, d, bandwidths) + mean_kernel(zp, zp, d, bandwidths) - 2.0 * mean_kernel(zq, zp, d, bandwidths))
}

struct MmdOp<T> {
    grad: Tensor<T>,
}

impl<T: Real> CustomOp<T> for MmdOp<T> {
    fn name(&self) -> &'static str {
        "mmd_rbf"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let u = grad.item();
        vec![Some(self.grad.map(|v| v * u))]
    }
}

/// [`mmd_rbf`] as a graph node differentiable with respect to `zq`.
pub fn mmd_graph<T: Real>(g: &mut Graph<T>, zq: Var, zp: &Tensor<f64>, bandwidths: &[f64]) -> Result<Var> {
    let q = g.value(zq).cast::<f64>();
    let (n, m, d) = check_samples(&q, zp)?;
    let value = mmd_rbf(&q, zp, bandwidths)?;
    let mut grad = vec![0.0f64; n * d];
    let qd = q.data();
    let pd = zp.data();
    // d k(x, y) / dx = -2 (x - y) sum_h exp(-|x-y|^2 / h) / h
    let acc = |gi: &mut [f64], x: &[f64], y: &[f64], w: f64| {
        let d2 = sq_dist(x, y);
        let c: f64 = bandwidths.iter().map(|h| (-d2 / h).exp() / h).sum::<f64>() * -2.0 * w;
        for k in 0..d {
            gi[k] += c * (x[k] - y[k]);
        }
    };
    let wqq = 2.0 / (n * n) as f64;
    let wqp = -2.0 / (n * m) as f64;
    for i in 0..n {
        let x = &qd[i * d..(i + 1) * d];
        let mut gi = vec![0.0; d];
        for j in 0..n {
            acc(&mut gi, x, &qd[j * d..(j + 1) * d], wqq);
        }
        for j in 0..m {
            acc(&mut gi, x, &pd[j * d..(j + 1) * d], wqp);
        }
        grad[i * d..(i + 1) * d].copy_from_slice(&gi);
    }
    let grad = Tensor::new(&[n, d], grad.into_iter().map(T::from_f64).collect())?;
    Ok(g.custom(&[zq], Tensor::scalar(T::from_f64(value)), Box::new(MmdOp { grad })))
}

/// `n x D` standard-normal draws.
pub fn prior_samples<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Tensor<f64> {
    Tensor::from_fn(&[n, d], |_| StandardNormal.sample(rng))
}

/// Stage-1 regulariser for a batch of posterior means / log-variances and
/// their reparameterised draws `z`.
pub fn stage1_regularizer<T: Real, R: Rng + ?Sized>(
    cfg: &RegularizerConfig,
    g: &mut Graph<T>,
    mean: Var,
    log_var: Var,
    z: Var,
    rng: &mut R,
) -> Result<Var> {
    cfg.validate()?;
    let c = T::from_f64(cfg.coefficient);
    match cfg.kind {
        RegularizerKind::VaeKl => {
            let kl = gaussian_kl_graph(g, mean, log_var)?;
            Ok(g.scale(kl, c))
        }
        RegularizerKind::InfoVaeMmd => {
            let s = g.shape(z).to_vec();
            let prior = prior_samples(s[0], s[1], rng);
            let mmd = mmd_graph(g, z, &prior, &cfg.kernel_bandwidths(s[1]))?;
            Ok(g.scale(mmd, c))
        }
        RegularizerKind::InfoBetaTcVae => Err(Error::DiagnosticOnly("Info-beta-TCVAE")),
    }
}

/// `log N(z; mean, exp(log_var))` summed over the selected dimensions.
fn log_normal(z: &[f64], q: &LatentDist, dims: &[usize]) -> f64 {
    dims.iter()
        .map(|&j| {
            let lv = q.log_var[j];
            let d = z[j] - q.mean[j];
            -0.5 * (LN_2PI + lv + d * d / lv.exp())
        })
        .sum()
}

fn check_batch(zs: &[Vec<f64>], dists: &[LatentDist], n_data: usize) -> Result<usize> {
    let mb = zs.len();
    if mb < 2 {
        return Err(Error::InvalidArgument(format!("marginal estimator needs a batch of at least 2, got {mb}")));
    }
    if dists.len() != mb {
        return Err(shape_err("minibatch estimator", "posterior count", mb, dists.len()));
    }
    if n_data < mb {
        return Err(Error::InvalidArgument(format!("dataset size {n_data} smaller than batch {mb}")));
    }
    let d = dists[0].dim();
    for (z, q) in zs.iter().zip(dists) {
        if z.len() != d || q.dim() != d {
            return Err(shape_err("minibatch estimator", "latent dimension", d, z.len()));
        }
    }
    Ok(d)
}

/// Mini-batch importance-sampling estimate of `E_q(z)[log q(z)]` restricted
/// to the latent coordinates `dims`:
/// `1/Mb sum_m log[ 1/N ( q(z_m|x_m) + (N-1)/(Mb-1) sum_{m' != m} q(z_m|x_m') ) ]`.
pub fn minibatch_marginal_log_density_dims(zs: &[Vec<f64>], dists: &[LatentDist], n_data: usize, dims: &[usize]) -> Result<f64> {
    check_batch(zs, dists, n_data)?;
    let mb = zs.len();
    let ln_n = (n_data as f64).ln();
    let ln_w = ((n_data - 1) as f64).ln() - ((mb - 1) as f64).ln();
    let mut total = 0.0;
    let mut terms = Vec::with_capacity(mb);
    for (m, z) in zs.iter().enumerate() {
        terms.clear();
        for (k, q) in dists.iter().enumerate() {
            let l = log_normal(z, q, dims);
            terms.push(if k == m { l } else { l + ln_w });
        }
        total += log_sum_exp(&terms) - ln_n;
    }
    Ok(total / mb as f64)
}

/// [`minibatch_marginal_log_density_dims`] over all coordinates.
pub fn minibatch_marginal_log_density(zs: &[Vec<f64>], dists: &[LatentDist], n_data: usize) -> Result<f64> {
    let d = check_batch(zs, dists, n_data)?;
    let dims: Vec<usize> = (0..d).collect();
    minibatch_marginal_log_density_dims(zs, dists, n_data, &dims)
}

/// MI / TC / PD split of `E[log q(z|x) - log p(z)]` for one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlDecomposition {
    pub mi: f64,
    pub tc: f64,
    pub pd: f64,
    /// Plug-in `mean_m [log q(z_m|x_m) - log p(z_m)]` from the same draws.
    pub plugin_kl: f64,
    pub batch_size: usize,
    pub dataset_size: usize,
}

impl KlDecomposition {
    pub fn total(&self) -> f64 {
        self.mi + self.tc + self.pd
    }
}

pub fn decompose_kl(zs: &[Vec<f64>], dists: &[LatentDist], n_data: usize) -> Result<KlDecomposition> {
    let d = check_batch(zs, dists, n_data)?;
    let mb = zs.len() as f64;
    let all: Vec<usize> = (0..d).collect();
    let cond = zs.iter().zip(dists).map(|(z, q)| log_normal(z, q, &all)).sum::<f64>() / mb;
    let log_prior_dim = |j: usize| zs.iter().map(|z| -0.5 * (LN_2PI + z[j] * z[j])).sum::<f64>() / mb;
    let joint = minibatch_marginal_log_density_dims(zs, dists, n_data, &all)?;
    let mut per_dim = 0.0;
    let mut pd = 0.0;
    for j in 0..d {
        let mj = minibatch_marginal_log_density_dims(zs, dists, n_data, &[j])?;
        per_dim += mj;
        pd += mj - log_prior_dim(j);
    }
    let prior: f64 = (0..d).map(log_prior_dim).sum();
    Ok(KlDecomposition {
        mi: cond - joint,
        tc: joint - per_dim,
        pd,
        plugin_kl: cond - prior,
        batch_size: zs.len(),
        dataset_size: n_data,
    })
}

#[cfg(test)]
mod tests;
