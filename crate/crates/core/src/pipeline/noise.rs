use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Diffusion timestep to Gaussian noise weight.
pub const NOISE_SCHEDULE: [(u32, f64); 7] = [
    (0, 0.0292),
    (1, 0.0413),
    (3, 0.0585),
    (5, 0.0710),
    (10, 0.0970),
    (25, 0.1500),
    (50, 0.2200),
];

pub fn noise_weight(timestep: u32) -> Result<f64> {
    NOISE_SCHEDULE
        .iter()
        .find(|&&(t, _)| t == timestep)
        .map(|&(_, w)| w)
        .ok_or(Error::UnknownTimestep(timestep))
}

fn standard_normal(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `(1 − w)·features + w·ε` with `ε ~ N(0, 1)` per element and `w` taken from
/// the schedule. `None` returns `features` untouched and draws nothing.
pub fn inject_noise(features: &Tensor, timestep: Option<u32>, rng: &mut impl Rng) -> Result<Tensor> {
    let Some(t) = timestep else {
        return Ok(features.clone());
    };
    let w = noise_weight(t)?;
    let eps = Tensor::new(features.shape(), standard_normal(features.numel(), rng))?;
    features.scale(1.0 - w).add(&eps.scale(w))
}

/// Same mixing with a learnable weight, clamped to `[0, 1]`.
pub fn inject_noise_learnable(features: &Tensor, weight: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    let w = weight.maximum(&Tensor::scalar(0.0))?.minimum(&Tensor::scalar(1.0))?;
    let eps = Tensor::new(features.shape(), standard_normal(features.numel(), rng))?;
    features.add(&eps.sub(features)?.scale_by(&w)?)
}
