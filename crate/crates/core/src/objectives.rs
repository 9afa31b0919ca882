//! The class-conditional bottleneck training loss: a Monte-Carlo
//! cross-entropy term plus `β′` times the closed-form KL from each encoder
//! output to its class surrogate, averaged over the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::{kl_to_surrogate, ClassSurrogate, DiagGaussian};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub kl_term: f64,
    pub beta_prime: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(cross_entropy: f64, kl_term: f64, beta_prime: f64) -> Self {
        Self {
            cross_entropy,
            kl_term,
            beta_prime,
            total: cross_entropy + beta_prime * kl_term,
        }
    }
}

/// Maps the IB trade-off `β ∈ [0,1)` to the CIB weight `β′ = β/(1−β)`.
pub fn beta_to_beta_prime(beta: f64) -> Result<f64> {
    if beta == 1.0 {
        return Err(Error::InvalidArgument(
            "beta = 1 maps to an infinite beta_prime: the objective would focus only on \
             (class-conditional) compression"
                .into(),
        ));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!(
            "beta must lie in [0, 1), got {beta}"
        )));
    }
    Ok(beta / (1.0 - beta))
}

/// Inverse of [`beta_to_beta_prime`]: `β = β′/(1+β′)`.
pub fn beta_prime_to_beta(beta_prime: f64) -> Result<f64> {
    if !(beta_prime >= 0.0 && beta_prime.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "beta_prime must be finite and non-negative, got {beta_prime}"
        )));
    }
    Ok(beta_prime / (1.0 + beta_prime))
}

/// Batch average of `−(1/S) Σ_s log q(ŷ = y_i | t⁽ˢ⁾)`.
///
/// `log_probs[i]` holds the `S` true-class log-probabilities of sample `i`.
/// A zero probability on the true class is reported as
/// [`Error::NonFiniteLoss`] for that sample.
pub fn cross_entropy_term(log_probs: &[Vec<f64>]) -> Result<f64> {
    if log_probs.is_empty() {
        return Err(Error::InvalidArgument(
            "cross-entropy of an empty batch".into(),
        ));
    }
    let mut total = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        if lp.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "sample {i} has no Monte-Carlo draws"
            )));
        }
        let ce = -lp.iter().sum::<f64>() / lp.len() as f64;
        if !ce.is_finite() {
            return Err(Error::NonFiniteLoss {
                sample_index: i,
                cross_entropy: ce,
                kl_term: f64::NAN,
            });
        }
        total += ce;
    }
    Ok(total / log_probs.len() as f64)
}

/// Value-level CIB loss.
///
/// `noise[i]` holds the `S` standard-normal draws for sample `i`;
/// `decoder` maps a latent point to class log-probabilities.
pub fn cib_loss<D>(
    encoded: &[DiagGaussian],
    labels: &[usize],
    decoder: D,
    surrogate: &ClassSurrogate,
    beta_prime: f64,
    noise: &[Vec<Vec<f64>>],
) -> Result<LossBreakdown>
where
    D: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if beta_prime.is_nan() || beta_prime < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "beta_prime must be >= 0, got {beta_prime}"
        )));
    }
    if encoded.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if labels.len() != encoded.len() {
        return Err(Error::dims("batch labels", encoded.len(), labels.len()));
    }
    if noise.len() != encoded.len() {
        return Err(Error::dims("batch noise draws", encoded.len(), noise.len()));
    }

    let n = encoded.len() as f64;
    let (mut ce_sum, mut kl_sum) = (0.0, 0.0);
    for (i, ((g, &y), draws)) in encoded.iter().zip(labels).zip(noise).enumerate() {
        if draws.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "sample {i} has no Monte-Carlo draws"
            )));
        }
        let kl = kl_to_surrogate(g, surrogate, y)?;
        let mut lp = 0.0;
        for eps in draws {
            let t = g.sample_reparam(eps)?;
            let log_probs = decoder(&t)?;
            if y >= log_probs.len() {
                return Err(Error::UnknownClass {
                    label: y,
                    classes: log_probs.len(),
                });
            }
            lp += log_probs[y];
        }
        let ce = -lp / draws.len() as f64;
        if !ce.is_finite() || !kl.is_finite() {
            return Err(Error::NonFiniteLoss {
                sample_index: i,
                cross_entropy: ce,
                kl_term: kl,
            });
        }
        ce_sum += ce;
        kl_sum += kl;
    }
    Ok(LossBreakdown::new(ce_sum / n, kl_sum / n, beta_prime))
}
