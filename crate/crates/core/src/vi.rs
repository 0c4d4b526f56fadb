//! Variational training of the decoder and per-participant latent Gaussians.
//!
//! The training loss for participant `i` with one reparameterized draw
//! `x = m + s ⊙ ε` is `-Σ_t log p(y_it | link(decoder(x))) + λ KL(q_i ‖ N(0, I))`,
//! summed over participants. `Θ` is a deterministic function of `x`, so the
//! inner expectation over `Θ` is just evaluation at the decoded point.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::decoder::{DecoderWeights, Dims, ForwardCache};
use crate::error::{contract, Error, Result};
use crate::imle;
use crate::likelihoods::{inverse_link, link_jacobian, link_unchecked, log_prob_grad_theta};
use crate::rng::{self, stream};
use crate::task::{TrialRecord, THETA_DIM};

/// Floor on the posterior scale used when sampling.
pub const MIN_LATENT_SCALE: f64 = 1e-6;

/// Diagonal Gaussian `q(x) = N(m, diag(exp(2 log_s)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGaussian {
    #[serde(rename = "m")]
    pub mean: Vec<f64>,
    pub log_s: Vec<f64>,
}

impl LatentGaussian {
    /// The standard-normal prior.
    pub fn prior(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], log_s: vec![0.0; dim] }
    }

    pub fn point(mean: Vec<f64>) -> Self {
        let dim = mean.len();
        Self { mean, log_s: vec![MIN_LATENT_SCALE.ln(); dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn scale(&self, j: usize) -> f64 {
        self.log_s[j].max(MIN_LATENT_SCALE.ln()).exp()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(&self.log_s).all(|v| v.is_finite())
    }

    /// `KL(q ‖ N(0, I)) = ½ Σ (m² + s² − 1 − 2 ln s)`.
    pub fn kl_standard_normal(&self) -> f64 {
        0.5 * self
            .mean
            .iter()
            .zip(&self.log_s)
            .map(|(&m, &ls)| m * m + (2.0 * ls).exp() - 1.0 - 2.0 * ls)
            .sum::<f64>()
    }

    /// `m + s ⊙ ε` for a given noise vector.
    pub fn transform(&self, eps: &[f64]) -> Vec<f64> {
        (0..self.dim()).map(|j| self.mean[j] + self.scale(j) * eps[j]).collect()
    }

    pub fn reparam_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let eps = standard_normal_vec(self.dim(), rng);
        self.transform(&eps)
    }
}

pub fn kl_standard_normal(q: &LatentGaussian) -> f64 {
    q.kl_standard_normal()
}

pub fn reparam_sample<R: Rng + ?Sized>(q: &LatentGaussian, rng: &mut R) -> Vec<f64> {
    q.reparam_sample(rng)
}

pub(crate) fn standard_normal_vec<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantData {
    pub id: String,
    pub trials: Vec<TrialRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PopulationData {
    pub participants: Vec<ParticipantData>,
}

impl PopulationData {
    pub fn validate(&self) -> Result<()> {
        for p in &self.participants {
            if p.trials.is_empty() {
                return Err(contract(format!("participant {} has no trials", p.id)));
            }
            for t in &p.trials {
                t.validate()?;
            }
        }
        Ok(())
    }

    pub fn n_trials(&self) -> usize {
        self.participants.iter().map(|p| p.trials.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// KL weight λ.
    pub lambda: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Latent draws per participant per ELBO evaluation.
    pub mc_samples: usize,
    pub seed: u64,
    /// Participants per step; `None` is full batch.
    pub batch_size: Option<usize>,
    pub dims: Dims,
    /// Start the output bias at the pooled per-task MLE instead of zero.
    pub pooled_output_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            iterations: 8000,
            learning_rate: 0.001,
            mc_samples: 1,
            seed: 0,
            batch_size: None,
            dims: Dims::default(),
            pooled_output_bias: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || self.iterations == 0 || self.mc_samples == 0 || !(self.learning_rate > 0.0) {
            return Err(contract(format!("invalid train config {self:?}")));
        }
        if self.batch_size == Some(0) {
            return Err(contract("batch size must be positive"));
        }
        Ok(())
    }
}

/// Gradient of one participant's loss term.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrad {
    pub mean: Vec<f64>,
    pub log_s: Vec<f64>,
}

/// One participant's loss components at a single draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Term {
    pub log_lik: f64,
    pub kl: f64,
}

/// Evaluates `-log_lik + λ KL` at `x = m + s ⊙ eps` and its gradients.
/// Weight gradients are accumulated into `grad_w` when given.
pub(crate) fn participant_objective(
    weights: &DecoderWeights,
    q: &LatentGaussian,
    trials: &[TrialRecord],
    eps: &[f64],
    lambda: f64,
    grad_w: Option<&mut [f64]>,
    grad_q: &mut LatentGrad,
    cache: &mut ForwardCache,
) -> Term {
    let dim = q.dim();
    let x = q.transform(eps);
    weights.forward_cached(&x, cache);
    let theta = link_unchecked(&cache.out);
    let mut g_theta = [0.0; THETA_DIM];
    let mut log_lik = 0.0;
    for trial in trials {
        log_lik += log_prob_grad_theta(trial.task_id.spec(), &theta, trial, &mut g_theta);
    }
    let jac = link_jacobian(&cache.out);
    // d(-log_lik)/d raw
    let mut g_raw = [0.0; THETA_DIM];
    for i in 0..THETA_DIM {
        g_raw[i] = -g_theta[i] * jac[i];
    }
    let mut g_x = vec![0.0; dim];
    weights.backward_into(&x, cache, &g_raw, grad_w, &mut g_x);
    let floor = MIN_LATENT_SCALE.ln();
    for j in 0..dim {
        let s = q.scale(j);
        grad_q.mean[j] = g_x[j] + lambda * q.mean[j];
        let ds = if q.log_s[j] > floor { g_x[j] * s * eps[j] } else { 0.0 };
        grad_q.log_s[j] = ds + lambda * ((2.0 * q.log_s[j]).exp() - 1.0);
    }
    Term { log_lik, kl: q.kl_standard_normal() }
}

/// Loss and full gradient for fixed noise, one draw per participant.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_weights: DecoderWeights,
    pub grad_latents: Vec<LatentGrad>,
}

/// Population loss `-Σ log p + λ Σ KL` at `x_i = m_i + s_i ⊙ eps[i]`.
pub fn loss_and_grad(
    weights: &DecoderWeights,
    latents: &[LatentGaussian],
    data: &PopulationData,
    eps: &[Vec<f64>],
    lambda: f64,
) -> Result<LossGrad> {
    if latents.len() != data.participants.len() || eps.len() != latents.len() {
        return Err(contract("latents, noise and participants must align"));
    }
    let mut grad_w = DecoderWeights::zeros(weights.dims());
    let mut grads = Vec::with_capacity(latents.len());
    let mut loss = 0.0;
    let mut cache = ForwardCache::default();
    for ((q, p), e) in latents.iter().zip(&data.participants).zip(eps) {
        let mut g = LatentGrad { mean: vec![0.0; q.dim()], log_s: vec![0.0; q.dim()] };
        let term = participant_objective(weights, q, &p.trials, e, lambda, Some(grad_w.params_mut()), &mut g, &mut cache);
        loss += -term.log_lik + lambda * term.kl;
        grads.push(g);
    }
    Ok(LossGrad { loss, grad_weights: grad_w, grad_latents: grads })
}

/// Monte Carlo ELBO with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// `Σ_i E_q[Σ_t log p(y_it | Θ(x_i))] − Σ_i KL(q_i ‖ p)` with `mc_samples` draws each.
pub fn elbo(
    weights: &DecoderWeights,
    latents: &[LatentGaussian],
    data: &PopulationData,
    mc_samples: usize,
    seed: u64,
) -> Result<ElboEstimate> {
    if latents.len() != data.participants.len() {
        return Err(contract(format!(
            "{} latents for {} participants",
            latents.len(),
            data.participants.len()
        )));
    }
    if mc_samples == 0 {
        return Err(contract("mc_samples must be at least 1"));
    }
    let per: Vec<(f64, f64, f64)> = latents
        .par_iter()
        .zip(&data.participants)
        .enumerate()
        .map(|(i, (q, p))| {
            let mut r = rng::rng_from(seed, &[stream::ELBO, i as u64]);
            let mut cache = ForwardCache::default();
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            for _ in 0..mc_samples {
                let x = q.reparam_sample(&mut r);
                let theta = weights.decode_unchecked(&x, &mut cache);
                let ll: f64 = p
                    .trials
                    .iter()
                    .map(|t| crate::likelihoods::log_prob_unchecked(theta.params(t.task_id), t))
                    .sum();
                sum += ll;
                sum_sq += ll * ll;
            }
            let n = mc_samples as f64;
            let mean = sum / n;
            let var = if mc_samples > 1 { (sum_sq - n * mean * mean).max(0.0) / (n - 1.0) } else { 0.0 };
            (mean, var / n, q.kl_standard_normal())
        })
        .collect();
    let value: f64 = per.iter().map(|(m, _, kl)| m - kl).sum();
    let var: f64 = per.iter().map(|(_, v, _)| v).sum();
    if !value.is_finite() {
        return Err(Error::Numeric("ELBO is not finite".into()));
    }
    Ok(ElboEstimate { value, std_error: var.sqrt() })
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub weights: DecoderWeights,
    pub latents: Vec<LatentGaussian>,
    pub loss_trace: Vec<f64>,
}

/// Jointly fits decoder weights and latent Gaussians by Adam.
pub fn train(data: &PopulationData, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    if data.participants.is_empty() {
        return Err(contract("training data is empty"));
    }
    data.validate()?;
    let mut weights = DecoderWeights::init(cfg.dims, cfg.seed);
    if cfg.pooled_output_bias {
        let pooled = imle::pooled_theta(data);
        weights.b3_mut().copy_from_slice(&inverse_link(&pooled)?);
    }
    let n = data.participants.len();
    let d = cfg.dims.latent;
    let mut latents = vec![LatentGaussian::prior(d); n];
    let mut adam_w = AdamState::new(weights.params().len(), cfg.learning_rate);
    let mut adam_q = AdamState::new(n * 2 * d, cfg.learning_rate);
    let mut q_flat = vec![0.0; n * 2 * d];
    let mut loss_trace = Vec::with_capacity(cfg.iterations);
    let batch = cfg.batch_size.unwrap_or(n).min(n);

    for iteration in 0..cfg.iterations {
        let mut noise_rng = rng::rng_from(cfg.seed, &[stream::TRAIN_NOISE, iteration as u64]);
        let eps: Vec<Vec<f64>> = (0..n).map(|_| standard_normal_vec(d, &mut noise_rng)).collect();
        let members: Vec<usize> = if batch == n {
            (0..n).collect()
        } else {
            (0..batch).map(|k| (iteration * batch + k) % n).collect()
        };
        let weights_ref = &weights;
        let results: Vec<(usize, f64, Vec<f64>, LatentGrad)> = members
            .par_iter()
            .map(|&i| {
                let q = &latents[i];
                let mut gw = vec![0.0; weights_ref.params().len()];
                let mut gq = LatentGrad { mean: vec![0.0; d], log_s: vec![0.0; d] };
                let mut cache = ForwardCache::default();
                let term = participant_objective(
                    weights_ref,
                    q,
                    &data.participants[i].trials,
                    &eps[i],
                    cfg.lambda,
                    Some(&mut gw),
                    &mut gq,
                    &mut cache,
                );
                (i, -term.log_lik + cfg.lambda * term.kl, gw, gq)
            })
            .collect();

        let scale = n as f64 / batch as f64;
        let mut loss = 0.0;
        let mut grad_w = vec![0.0; weights.params().len()];
        let mut grad_q = vec![0.0; n * 2 * d];
        for (i, l, gw, gq) in &results {
            loss += l * scale;
            for (a, b) in grad_w.iter_mut().zip(gw) {
                *a += b * scale;
            }
            grad_q[i * 2 * d..i * 2 * d + d].copy_from_slice(&gq.mean);
            grad_q[i * 2 * d + d..(i + 1) * 2 * d].copy_from_slice(&gq.log_s);
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration, loss });
        }
        loss_trace.push(loss);

        adam_w.step(weights.params_mut(), &grad_w)?;
        for (i, q) in latents.iter().enumerate() {
            q_flat[i * 2 * d..i * 2 * d + d].copy_from_slice(&q.mean);
            q_flat[i * 2 * d + d..(i + 1) * 2 * d].copy_from_slice(&q.log_s);
        }
        adam_q.step(&mut q_flat, &grad_q)?;
        for (i, q) in latents.iter_mut().enumerate() {
            q.mean.copy_from_slice(&q_flat[i * 2 * d..i * 2 * d + d]);
            q.log_s.copy_from_slice(&q_flat[i * 2 * d + d..(i + 1) * 2 * d]);
        }
        if !weights.is_finite() {
            return Err(Error::Diverged { iteration, loss: f64::NAN });
        }
    }
    Ok(TrainResult { weights, latents, loss_trace })
}
