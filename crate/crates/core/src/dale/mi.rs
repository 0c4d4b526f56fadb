//! Monte Carlo mutual information between a candidate item's outcome and the
//! latent position, `I = H[y] − E_q[H[y | x]]`.
//!
//! Binary outcomes use the exact entropy of the Bernoulli mixture, so only
//! the latent draws are random. Timing outcomes work on `ln y` (mutual
//! information is invariant to that bijection and the Jacobian terms would
//! only add noise): the conditional term is the closed-form Gaussian entropy
//! and the marginal term is estimated from samples of the mixture, with each
//! sample's own-component log density as a control variate.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderWeights, ForwardCache};
use crate::error::{Error, Result};
use crate::likelihoods::{binary_entropy, FamilyParams, ThetaVector};
use crate::vi::LatentGaussian;

use super::CandidateItem;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Decodes `k` latent draws from `q`.
pub fn decode_draws<R: Rng + ?Sized>(
    weights: &DecoderWeights,
    q: &LatentGaussian,
    k: usize,
    rng: &mut R,
) -> Vec<ThetaVector> {
    let mut cache = ForwardCache::default();
    (0..k)
        .map(|_| {
            let x = q.reparam_sample(rng);
            weights.decode_unchecked(&x, &mut cache)
        })
        .collect()
}

/// Mutual information for one candidate given decoded latent draws.
///
/// `outcome_samples` is the total outcome budget `M`; timing candidates draw
/// `max(1, M / K)` outcomes per component.
pub fn mi_from_thetas<R: Rng + ?Sized>(
    thetas: &[ThetaVector],
    cand: &CandidateItem,
    outcome_samples: usize,
    rng: &mut R,
) -> Result<MiEstimate> {
    if thetas.is_empty() {
        return Err(Error::Contract("no latent draws".into()));
    }
    let spec = cand.task_id.spec();
    let params: Vec<FamilyParams> = thetas.iter().map(|t| FamilyParams::from_theta(spec, t)).collect();
    let est = if spec.family.is_binary() {
        binary_mi(&params, cand)
    } else {
        timing_mi(&params, outcome_samples, rng)
    };
    if !(est.value.is_finite() && est.std_error.is_finite()) {
        return Err(Error::Numeric(format!("non-finite mutual information for {}", cand.label())));
    }
    Ok(est)
}

fn binary_mi(params: &[FamilyParams], cand: &CandidateItem) -> MiEstimate {
    let k = params.len() as f64;
    let ps: Vec<f64> = params.iter().map(|p| p.success_probability(cand.stimulus).unwrap_or(0.5)).collect();
    let p_bar = ps.iter().sum::<f64>() / k;
    let hs: Vec<f64> = ps.iter().map(|&p| binary_entropy(p)).collect();
    let cond = hs.iter().sum::<f64>() / k;
    let value = (binary_entropy(p_bar) - cond).max(0.0);
    // Delta-method standard error.
    let slope = if p_bar > 0.0 && p_bar < 1.0 { ((1.0 - p_bar) / p_bar).ln() } else { 0.0 };
    let terms: Vec<f64> = ps.iter().zip(&hs).map(|(p, h)| slope * p - h).collect();
    MiEstimate { value, std_error: std_error(&terms) }
}

fn timing_mi<R: Rng + ?Sized>(params: &[FamilyParams], outcome_samples: usize, rng: &mut R) -> MiEstimate {
    let comps: Vec<(f64, f64)> = params
        .iter()
        .map(|p| match *p {
            FamilyParams::LogNormal { mu, sigma } => (mu, sigma),
            _ => (0.0, 1.0),
        })
        .collect();
    let k = comps.len();
    let per = (outcome_samples / k).max(1);
    // Per-component constants: ln σ + ½ ln 2π and 1 / (2σ²).
    let norm: Vec<f64> = comps.iter().map(|&(_, s)| s.ln() + HALF_LN_2PI).collect();
    let prec: Vec<f64> = comps.iter().map(|&(_, s)| 0.5 / (s * s)).collect();
    let ln_k = (k as f64).ln();
    let mut terms = Vec::with_capacity(k * per);
    let mut logs = vec![0.0; k];
    for (j, &(mu, sigma)) in comps.iter().enumerate() {
        for _ in 0..per {
            let z: f64 = StandardNormal.sample(rng);
            let ly = mu + sigma * z;
            let mut max = f64::NEG_INFINITY;
            for l in 0..k {
                let u = ly - comps[l].0;
                let v = -norm[l] - prec[l] * u * u;
                logs[l] = v;
                max = max.max(v);
            }
            let sum: f64 = logs.iter().map(|v| (v - max).exp()).sum();
            let neg_log_marginal = -(max + sum.ln() - ln_k);
            // Control variate: ln p(y | θ_j) + H_j has mean zero under component j,
            // and cancels most of the sampling noise in −ln p̄(y).
            let own_entropy = 0.5 + HALF_LN_2PI + sigma.ln();
            terms.push(neg_log_marginal + logs[j] + own_entropy);
        }
    }
    let cond = comps.iter().map(|&(_, s)| 0.5 + HALF_LN_2PI + s.ln()).sum::<f64>() / k as f64;
    let marginal = terms.iter().sum::<f64>() / terms.len() as f64;
    MiEstimate { value: marginal - cond, std_error: std_error(&terms) }
}

fn std_error(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::Dims;
    use crate::likelihoods::inverse_link;
    use crate::rng;
    use crate::task::{Stimulus, TaskId};

    fn theta_with(p_cancel: f64, mu_stroop: f64) -> ThetaVector {
        ThetaVector([mu_stroop, 0.3, 6.6, 0.35, -5.0, 1.0, -4.5, 1.2, p_cancel, 0.7, 0.9, 0.6])
    }

    #[test]
    fn collapsed_posterior_has_no_information() {
        let mut w = DecoderWeights::init(Dims::default(), 3);
        w.b3_mut().copy_from_slice(&inverse_link(&theta_with(0.6, 6.5)).unwrap());
        let q = LatentGaussian::point(vec![0.2, -0.4, 0.9]);
        let mut r = rng::rng(2);
        let thetas = decode_draws(&w, &q, 1000, &mut r);
        for task in TaskId::ALL {
            for &stimulus in &task.spec().stimulus_space {
                let cand = CandidateItem { task_id: task, stimulus };
                let est = mi_from_thetas(&thetas, &cand, 500, &mut r).unwrap();
                assert!(est.value.abs() <= 3.0 * est.std_error + 1e-9, "{task}: {est:?}");
            }
        }
    }

    #[test]
    fn binary_mi_bounded_by_ln2() {
        let mut r = rng::rng(4);
        let thetas: Vec<ThetaVector> =
            (0..500).map(|i| theta_with(if i % 2 == 0 { 1e-9 } else { 1.0 - 1e-9 }, 6.5)).collect();
        let cand = CandidateItem { task_id: TaskId::Cancellation, stimulus: Stimulus::Unit };
        let est = mi_from_thetas(&thetas, &cand, 500, &mut r).unwrap();
        assert!(est.value <= std::f64::consts::LN_2 + 1e-12);
        assert!(est.value > 0.69);
    }

    #[test]
    fn timing_mi_matches_gaussian_closed_form() {
        // μ ~ N(6.5, τ²) with fixed σ: ln y is Gaussian with variance τ² + σ²,
        // so I = ½ ln(1 + τ²/σ²).
        let (tau, sigma) = (0.25, 0.3);
        let mut r = rng::rng(5);
        let thetas: Vec<ThetaVector> = (0..1000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                let mut t = theta_with(0.5, 6.5 + tau * z);
                t.0[1] = sigma;
                t
            })
            .collect();
        let cand = CandidateItem { task_id: TaskId::Stroop, stimulus: Stimulus::Unit };
        let est = mi_from_thetas(&thetas, &cand, 100_000, &mut r).unwrap();
        let exact = 0.5 * (1.0 + tau * tau / (sigma * sigma)).ln();
        // The finite set of 1000 μ draws is itself random; allow for it.
        assert!((est.value - exact).abs() < 0.03, "{est:?} vs {exact}");
    }
}
