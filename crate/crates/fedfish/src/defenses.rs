//! Client-side gradient obfuscation applied before secure-aggregation
//! encoding: additive Gaussian noise (differential-privacy style) and
//! magnitude-threshold gradient compression.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::GradientSet;

/// Which obfuscation, if any, a client applies to its gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseConfig {
    None,
    /// Add independent N(0, sigma^2) noise to every element. `sigma` is an
    /// absolute standard deviation, not relative to gradient scale.
    GaussianNoise { sigma: f64 },
    /// Zero out the `theta` fraction of elements with smallest magnitude,
    /// ranked globally across the flattened gradient set.
    Compression { theta: f64 },
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            DefenseConfig::None => Ok(()),
            DefenseConfig::GaussianNoise { sigma } => {
                if !sigma.is_finite() || *sigma < 0.0 {
                    Err(Error::Config(format!(
                        "noise sigma must be finite and non-negative, got {sigma}"
                    )))
                } else {
                    Ok(())
                }
            }
            DefenseConfig::Compression { theta } => {
                if !theta.is_finite() || !(0.0..1.0).contains(theta) {
                    Err(Error::Config(format!(
                        "compression fraction must lie in [0, 1), got {theta}"
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Apply the configured defense. `rng` is only consumed by the noise
/// defense; compression is deterministic.
pub fn apply<R: Rng>(grads: &GradientSet, cfg: &DefenseConfig, rng: &mut R) -> Result<GradientSet> {
    cfg.validate()?;
    match cfg {
        DefenseConfig::None => Ok(grads.clone()),
        DefenseConfig::GaussianNoise { sigma } => apply_gaussian(grads, *sigma, rng),
        DefenseConfig::Compression { theta } => apply_compression(grads, *theta),
    }
}

/// Add independent N(0, sigma^2) noise to every gradient element.
/// `sigma = 0` returns a bit-identical copy.
pub fn apply_gaussian<R: Rng>(grads: &GradientSet, sigma: f64, rng: &mut R) -> Result<GradientSet> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::Domain(format!(
            "noise sigma must be finite and non-negative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(grads.clone());
    }
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::Domain(format!("invalid noise distribution: {e}")))?;
    let mut flat = grads.flatten();
    for v in &mut flat {
        *v += normal.sample(rng);
    }
    GradientSet::from_flat(grads, &flat)
}

/// Zero the `theta` fraction of elements with smallest |value|, ranked over
/// the whole flattened set; exactly floor(theta * len) elements are zeroed,
/// with magnitude ties broken by flat index (earlier index drops first).
/// Surviving elements keep their exact bit pattern.
pub fn apply_compression(grads: &GradientSet, theta: f64) -> Result<GradientSet> {
    if !theta.is_finite() || !(0.0..1.0).contains(&theta) {
        return Err(Error::Domain(format!(
            "compression fraction must lie in [0, 1), got {theta}"
        )));
    }
    if theta == 0.0 {
        return Ok(grads.clone());
    }
    let mut flat = grads.flatten();
    let drop = (theta * flat.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..flat.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        flat[a]
            .abs()
            .partial_cmp(&flat[b].abs())
            .expect("gradient magnitudes are finite")
            .then(a.cmp(&b))
    });
    for &i in &order[..drop] {
        flat[i] = 0.0;
    }
    GradientSet::from_flat(grads, &flat)
}
