//! Per-respondent latent update with the decoder held fixed.

use crate::adam::AdamState;
use crate::decoder::{DecoderWeights, ForwardCache};
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::task::TrialRecord;
use crate::vi::{participant_objective, standard_normal_vec, LatentGrad, LatentGaussian};

/// Settings for [`fit_latent`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentFit {
    pub lambda: f64,
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Minimizes `-Σ log p(y | Θ(x)) + λ KL(q ‖ N(0, I))` over `(m, log_s)` by
/// Adam, one reparameterized draw per iteration, starting from `init`.
/// Trials may be empty, in which case only the KL term acts.
pub fn fit_latent(
    weights: &DecoderWeights,
    trials: &[TrialRecord],
    init: &LatentGaussian,
    fit: LatentFit,
) -> Result<LatentGaussian> {
    let d = init.dim();
    if d != weights.latent_dim() {
        return Err(Error::Contract(format!("latent dim {d} vs decoder {}", weights.latent_dim())));
    }
    let mut q = init.clone();
    let mut flat: Vec<f64> = q.mean.iter().chain(&q.log_s).copied().collect();
    let mut adam = AdamState::new(2 * d, fit.lr);
    let mut grad = LatentGrad { mean: vec![0.0; d], log_s: vec![0.0; d] };
    let mut flat_grad = vec![0.0; 2 * d];
    let mut cache = ForwardCache::default();
    let mut r = rng::rng_from(fit.seed, &[stream::UPDATE]);
    for _ in 0..fit.iterations {
        let eps = standard_normal_vec(d, &mut r);
        participant_objective(weights, &q, trials, &eps, fit.lambda, None, &mut grad, &mut cache);
        flat_grad[..d].copy_from_slice(&grad.mean);
        flat_grad[d..].copy_from_slice(&grad.log_s);
        adam.step(&mut flat, &flat_grad)?;
        q.mean.copy_from_slice(&flat[..d]);
        q.log_s.copy_from_slice(&flat[d..]);
    }
    if !q.is_finite() {
        return Err(Error::Numeric("latent update diverged".into()));
    }
    Ok(q)
}
