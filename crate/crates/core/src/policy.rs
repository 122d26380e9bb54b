//! Isotropic Gaussian location policy over normalized boxes.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Mean box and shared per-coordinate standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyOutput {
    pub mu: [f64; 4],
    pub sigma: f64,
}

impl PolicyOutput {
    pub fn new(mu: [f64; 4], sigma: f64) -> Self {
        PolicyOutput { mu, sigma }
    }

    fn check_sigma(&self) -> Result<()> {
        if self.sigma > 0.0 && self.sigma.is_finite() {
            Ok(())
        } else {
            Err(Error::config(
                "sigma",
                format!("policy standard deviation must be > 0, got {}", self.sigma),
            ))
        }
    }
}

/// Draws `l ~ N(mu, sigma^2 I)`. No clamping.
pub fn sample_location<R: Rng + ?Sized>(out: &PolicyOutput, rng: &mut R) -> Result<BBox> {
    out.check_sigma()?;
    let mut l = [0.0; 4];
    for (li, mi) in l.iter_mut().zip(out.mu) {
        let z: f64 = StandardNormal.sample(rng);
        *li = mi + out.sigma * z;
    }
    Ok(BBox::from_array(l))
}

/// Log-density of `l` under the policy, summed over the four coordinates.
pub fn log_prob(l: &BBox, out: &PolicyOutput) -> Result<f64> {
    out.check_sigma()?;
    let s2 = out.sigma * out.sigma;
    let norm = -(2.0 * std::f64::consts::PI).sqrt().ln() - out.sigma.ln();
    Ok(l
        .to_array()
        .iter()
        .zip(out.mu)
        .map(|(li, mi)| norm - (li - mi) * (li - mi) / (2.0 * s2))
        .sum())
}

/// Score function `d ln pi / d mu = (l - mu) / sigma^2`.
pub fn log_prob_grad(l: &BBox, out: &PolicyOutput) -> Result<[f64; 4]> {
    out.check_sigma()?;
    let s2 = out.sigma * out.sigma;
    let la = l.to_array();
    Ok(std::array::from_fn(|k| (la[k] - out.mu[k]) / s2))
}

/// Maximum a posteriori location: the mean itself.
pub fn map_estimate(out: &PolicyOutput) -> BBox {
    BBox::from_array(out.mu)
}
