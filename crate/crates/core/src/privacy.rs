//! Local differential privacy for uploaded user embeddings: L1-norm clipping
//! followed by coordinate-wise Laplace noise with scale `2δ/ε`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacyConfig {
    /// L1 clipping threshold.
    pub delta: f64,
    /// Privacy budget. `inf` disables the noise.
    pub epsilon: f64,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        PrivacyConfig {
            delta: 1.0,
            epsilon: 4.0,
        }
    }
}

impl PrivacyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!(
                "privacy.delta must be positive, got {}",
                self.delta
            )));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "privacy.epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Laplace scale `b = 2δ/ε`.
    pub fn noise_scale(&self) -> f64 {
        2.0 * self.delta / self.epsilon
    }
}

/// A protected user embedding as it arrives at the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedEmbedding {
    pub client: usize,
    pub vector: Vec<f64>,
}

/// Rescales `v` so that its L1 norm is at most `delta`. Vectors already inside
/// the ball are returned unchanged.
pub fn l1_clip(v: &[f64], delta: f64) -> Vec<f64> {
    let norm: f64 = v.iter().map(|x| x.abs()).sum();
    if norm <= delta {
        return v.to_vec();
    }
    let mut scale = delta / norm;
    loop {
        let out: Vec<f64> = v.iter().map(|x| x * scale).collect();
        // Rounding can leave the sum one ulp above delta; shrink until it is not.
        if out.iter().map(|x| x.abs()).sum::<f64>() <= delta {
            return out;
        }
        scale *= 1.0 - f64::EPSILON;
    }
}

/// One Laplace(0, b) draw by inverse CDF.
pub fn laplace_sample(rng: &mut Rng, scale: f64) -> f64 {
    // u uniform on (-0.5, 0.5); the open lower end keeps ln(1 - 2|u|) finite.
    let mut u: f64 = rng.random::<f64>() - 0.5;
    while u == -0.5 {
        u = rng.random::<f64>() - 0.5;
    }
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Adds independent Laplace noise to every coordinate of an already-clipped vector.
pub fn laplace_perturb(
    client: usize,
    v: &[f64],
    cfg: &PrivacyConfig,
    rng: &mut Rng,
) -> Result<PerturbedEmbedding> {
    let scale = cfg.noise_scale();
    let vector: Vec<f64> = if scale == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x + laplace_sample(rng, scale)).collect()
    };
    if vector.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("perturbed embedding"));
    }
    Ok(PerturbedEmbedding { client, vector })
}

/// Clip then perturb.
pub fn protect(
    client: usize,
    v: &[f64],
    cfg: &PrivacyConfig,
    rng: &mut Rng,
) -> Result<PerturbedEmbedding> {
    laplace_perturb(client, &l1_clip(v, cfg.delta), cfg, rng)
}
