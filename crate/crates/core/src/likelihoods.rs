//! Outcome families, the link between raw decoder outputs and constrained
//! parameters, log-densities and samplers.
//!
//! Span recall uses the logistic in `(k + θ_ψ) / σ_ψ` exactly as written,
//! so success probability *increases* with span length `k` for `σ_ψ > 0`.
//! Fitted thresholds come out negative and `-θ_ψ` is the 50% span length.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, domain, Result};
use crate::task::{Family, Outcome, Stimulus, TaskId, TaskRegistry, TaskSpec, TrialRecord, THETA_DIM};

/// Probability clamp applied inside `log_prob` and fitting.
pub const PROB_CLAMP: f64 = 1e-7;
/// `link` keeps probabilities strictly inside (0, 1) with this margin.
pub const LINK_PROB_MARGIN: f64 = 1e-12;
/// Smallest scale `link` will produce.
pub const MIN_SCALE: f64 = 1e-12;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    /// Identity link (μ_τ, θ_ψ).
    Real,
    /// Softplus link (σ_τ, σ_ψ).
    Positive,
    /// Logistic link (p).
    Probability,
}

/// Link kind of every slot, derived from the registry.
pub fn slot_kinds() -> &'static [SlotKind; THETA_DIM] {
    static KINDS: std::sync::OnceLock<[SlotKind; THETA_DIM]> = std::sync::OnceLock::new();
    KINDS.get_or_init(|| {
        let mut kinds = [SlotKind::Real; THETA_DIM];
        for spec in &TaskRegistry::standard().tasks {
            match spec.family {
                Family::LogNormalTiming | Family::PsychometricSpan => {
                    kinds[spec.theta_slots[0]] = SlotKind::Real;
                    kinds[spec.theta_slots[1]] = SlotKind::Positive;
                }
                Family::BernoulliAccuracy => kinds[spec.theta_slots[0]] = SlotKind::Probability,
            }
        }
        kinds
    })
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln logistic(x)` without cancellation.
pub fn log_logistic(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn inverse_softplus(y: f64) -> f64 {
    if y > 35.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Binary entropy in nats.
pub fn binary_entropy(p: f64) -> f64 {
    let mut h = 0.0;
    if p > 0.0 {
        h -= p * p.ln();
    }
    if p < 1.0 {
        h -= (1.0 - p) * (-p).ln_1p();
    }
    h
}

/// The 12 constrained parameters of one participant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaVector(pub [f64; THETA_DIM]);

impl ThetaVector {
    pub fn validate(&self) -> Result<()> {
        for (i, (&v, kind)) in self.0.iter().zip(slot_kinds()).enumerate() {
            let ok = match kind {
                SlotKind::Real => v.is_finite(),
                SlotKind::Positive => v.is_finite() && v > 0.0,
                SlotKind::Probability => v > 0.0 && v < 1.0,
            };
            if !ok {
                return Err(domain(format!("theta[{i}] = {v} violates {kind:?} constraint")));
            }
        }
        Ok(())
    }

    pub fn params(&self, task: TaskId) -> FamilyParams {
        FamilyParams::from_theta(task.spec(), self)
    }
}

/// Maps 12 unconstrained reals to a valid [`ThetaVector`].
pub fn link(raw: &[f64; THETA_DIM]) -> Result<ThetaVector> {
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(domain(format!("raw[{i}] is not finite")));
    }
    Ok(link_unchecked(raw))
}

pub(crate) fn link_unchecked(raw: &[f64; THETA_DIM]) -> ThetaVector {
    let mut theta = [0.0; THETA_DIM];
    for ((t, &r), kind) in theta.iter_mut().zip(raw).zip(slot_kinds()) {
        *t = match kind {
            SlotKind::Real => r,
            SlotKind::Positive => softplus(r).max(MIN_SCALE),
            SlotKind::Probability => logistic(r).clamp(LINK_PROB_MARGIN, 1.0 - LINK_PROB_MARGIN),
        };
    }
    ThetaVector(theta)
}

/// Diagonal of d`link`/d`raw`. Zero where a clamp is active.
pub fn link_jacobian(raw: &[f64; THETA_DIM]) -> [f64; THETA_DIM] {
    let mut jac = [0.0; THETA_DIM];
    for ((j, &r), kind) in jac.iter_mut().zip(raw).zip(slot_kinds()) {
        *j = match kind {
            SlotKind::Real => 1.0,
            SlotKind::Positive => {
                if softplus(r) > MIN_SCALE {
                    logistic(r)
                } else {
                    0.0
                }
            }
            SlotKind::Probability => {
                let p = logistic(r);
                if p > LINK_PROB_MARGIN && p < 1.0 - LINK_PROB_MARGIN {
                    p * (1.0 - p)
                } else {
                    0.0
                }
            }
        };
    }
    jac
}

pub fn inverse_link(theta: &ThetaVector) -> Result<[f64; THETA_DIM]> {
    theta.validate()?;
    let mut raw = [0.0; THETA_DIM];
    for ((r, &t), kind) in raw.iter_mut().zip(&theta.0).zip(slot_kinds()) {
        *r = match kind {
            SlotKind::Real => t,
            SlotKind::Positive => inverse_softplus(t),
            SlotKind::Probability => logit(t),
        };
    }
    Ok(raw)
}

/// Parameters of one task's outcome distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FamilyParams {
    LogNormal { mu: f64, sigma: f64 },
    Psychometric { threshold: f64, spread: f64 },
    Bernoulli { p: f64 },
}

impl FamilyParams {
    pub fn from_theta(spec: &TaskSpec, theta: &ThetaVector) -> Self {
        let s = &spec.theta_slots;
        match spec.family {
            Family::LogNormalTiming => FamilyParams::LogNormal { mu: theta.0[s[0]], sigma: theta.0[s[1]] },
            Family::PsychometricSpan => {
                FamilyParams::Psychometric { threshold: theta.0[s[0]], spread: theta.0[s[1]] }
            }
            Family::BernoulliAccuracy => FamilyParams::Bernoulli { p: theta.0[s[0]] },
        }
    }

    pub fn family(&self) -> Family {
        match self {
            FamilyParams::LogNormal { .. } => Family::LogNormalTiming,
            FamilyParams::Psychometric { .. } => Family::PsychometricSpan,
            FamilyParams::Bernoulli { .. } => Family::BernoulliAccuracy,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            FamilyParams::LogNormal { mu, sigma } => mu.is_finite() && sigma.is_finite() && sigma > 0.0,
            FamilyParams::Psychometric { threshold, spread } => {
                threshold.is_finite() && spread.is_finite() && spread > 0.0
            }
            FamilyParams::Bernoulli { p } => p > 0.0 && p < 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(domain(format!("invalid parameters {self:?}")))
        }
    }

    /// Success probability for binary families; `None` for timing.
    pub fn success_probability(&self, stimulus: Stimulus) -> Option<f64> {
        match *self {
            FamilyParams::LogNormal { .. } => None,
            FamilyParams::Psychometric { threshold, spread } => {
                let k = stimulus.span_length()? as f64;
                Some(logistic((k + threshold) / spread))
            }
            FamilyParams::Bernoulli { p } => Some(p),
        }
    }
}

/// Log-normal log-density of `y` (ms) with log-scale mean `mu` and sd `sigma`.
pub fn lognormal_log_pdf(y: f64, mu: f64, sigma: f64) -> f64 {
    let ly = y.ln();
    let u = (ly - mu) / sigma;
    -ly - sigma.ln() - HALF_LN_2PI - 0.5 * u * u
}

/// Differential entropy of a log-normal, `μ + ½ ln(2πe σ²)`.
pub fn lognormal_entropy(mu: f64, sigma: f64) -> f64 {
    mu + 0.5 * (2.0 * PI * std::f64::consts::E * sigma * sigma).ln()
}

/// `log p(y | θ)` for one trial.
pub fn log_prob(spec: &TaskSpec, params: FamilyParams, trial: &TrialRecord) -> Result<f64> {
    if params.family() != spec.family || trial.task_id != spec.task_id {
        return Err(contract(format!("parameters/trial do not belong to {}", spec.task_id)));
    }
    trial.validate()?;
    params.validate()?;
    Ok(log_prob_unchecked(params, trial))
}

pub(crate) fn log_prob_unchecked(params: FamilyParams, trial: &TrialRecord) -> f64 {
    match (params, trial.outcome) {
        (FamilyParams::LogNormal { mu, sigma }, Outcome::ReactionTime(y)) => lognormal_log_pdf(y, mu, sigma),
        (FamilyParams::Psychometric { threshold, spread }, Outcome::Binary(correct)) => {
            let k = trial.stimulus.span_length().unwrap_or(0) as f64;
            let z = (k + threshold) / spread;
            if correct {
                log_logistic(z)
            } else {
                log_logistic(-z)
            }
        }
        (FamilyParams::Bernoulli { p }, Outcome::Binary(correct)) => {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if correct {
                p.ln()
            } else {
                (-p).ln_1p()
            }
        }
        _ => f64::NAN,
    }
}

/// Adds `d log p / d θ` for one (pre-validated) trial into `grad_theta` and
/// returns `log p`.
pub(crate) fn log_prob_grad_theta(
    spec: &TaskSpec,
    theta: &ThetaVector,
    trial: &TrialRecord,
    grad_theta: &mut [f64; THETA_DIM],
) -> f64 {
    let s = &spec.theta_slots;
    match (spec.family, trial.outcome) {
        (Family::LogNormalTiming, Outcome::ReactionTime(y)) => {
            let (mu, sigma) = (theta.0[s[0]], theta.0[s[1]]);
            let ly = y.ln();
            let u = ly - mu;
            let inv_var = 1.0 / (sigma * sigma);
            grad_theta[s[0]] += u * inv_var;
            grad_theta[s[1]] += -1.0 / sigma + u * u * inv_var / sigma;
            -ly - sigma.ln() - HALF_LN_2PI - 0.5 * u * u * inv_var
        }
        (Family::PsychometricSpan, Outcome::Binary(correct)) => {
            let (threshold, spread) = (theta.0[s[0]], theta.0[s[1]]);
            let k = trial.stimulus.span_length().unwrap_or(0) as f64;
            let z = (k + threshold) / spread;
            let (lp, dz) = if correct {
                (log_logistic(z), logistic(-z))
            } else {
                (log_logistic(-z), -logistic(z))
            };
            grad_theta[s[0]] += dz / spread;
            grad_theta[s[1]] += -dz * z / spread;
            lp
        }
        (Family::BernoulliAccuracy, Outcome::Binary(correct)) => {
            let p = theta.0[s[0]];
            let inside = p > PROB_CLAMP && p < 1.0 - PROB_CLAMP;
            let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if correct {
                if inside {
                    grad_theta[s[0]] += 1.0 / pc;
                }
                pc.ln()
            } else {
                if inside {
                    grad_theta[s[0]] -= 1.0 / (1.0 - pc);
                }
                (-pc).ln_1p()
            }
        }
        _ => f64::NAN,
    }
}

/// Draws one outcome.
pub fn sample<R: Rng + ?Sized>(
    spec: &TaskSpec,
    params: FamilyParams,
    stimulus: Stimulus,
    rng: &mut R,
) -> Result<Outcome> {
    spec.check_stimulus(stimulus)?;
    if params.family() != spec.family {
        return Err(contract(format!("parameters do not belong to {}", spec.task_id)));
    }
    params.validate()?;
    Ok(sample_unchecked(params, stimulus, rng))
}

pub(crate) fn sample_unchecked<R: Rng + ?Sized>(params: FamilyParams, stimulus: Stimulus, rng: &mut R) -> Outcome {
    match params {
        FamilyParams::LogNormal { mu, sigma } => {
            let z: f64 = StandardNormal.sample(rng);
            Outcome::ReactionTime((mu + sigma * z).exp())
        }
        _ => {
            let p = params.success_probability(stimulus).unwrap_or(0.5);
            Outcome::Binary(rng.random::<f64>() < p)
        }
    }
}
