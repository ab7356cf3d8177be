use rand::Rng;

use super::{Real, Tensor};

/// Glorot/Xavier uniform initialisation, `U(-l, l)` with
/// `l = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-limit..limit)))
}

/// Fans of a `[kh, kw, cin, cout]` filter (dense fan, masks ignored).
pub fn conv_fans(shape: &[usize]) -> (usize, usize) {
    let receptive = shape[0] * shape[1];
    (receptive * shape[2], receptive * shape[3])
}
