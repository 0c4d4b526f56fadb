//! Independent per-task maximum-likelihood estimation, the conventional
//! baseline: each task's parameters are fitted from that task's trials alone.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::error::{Error, Result};
use crate::likelihoods::{log_logistic, FamilyParams, ThetaVector, PROB_CLAMP};
use crate::task::{Family, Outcome, TaskId, TrialRecord, THETA_DIM};
use crate::vi::PopulationData;

/// Floor for a fitted log-normal σ.
pub const MIN_LOGNORMAL_SIGMA: f64 = 1e-3;
pub const SPREAD_BOUNDS: (f64, f64) = (0.05, 20.0);
pub const THRESHOLD_BOUNDS: (f64, f64) = (-20.0, 20.0);

/// Placeholder values for parameters with no usable data.
pub const DEFAULT_THETA: ThetaVector =
    ThetaVector([6.5, 0.3, 6.5, 0.3, -5.0, 1.0, -5.0, 1.0, 0.5, 0.5, 0.5, 0.5]);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalFit {
    pub mu: f64,
    pub sigma: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsychometricFit {
    pub threshold: f64,
    pub spread: f64,
    pub log_lik: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BernoulliFit {
    pub p: f64,
    pub degenerate: bool,
}

/// Closed-form MLE: mean and population (1/n) sd of the log samples.
pub fn fit_lognormal(samples: &[f64]) -> Result<LogNormalFit> {
    if samples.len() < 2 {
        return Err(Error::Fit(format!("log-normal fit needs at least 2 samples, got {}", samples.len())));
    }
    if let Some(bad) = samples.iter().find(|&&y| !(y > 0.0 && y.is_finite())) {
        return Err(Error::Fit(format!("non-positive sample {bad}")));
    }
    let n = samples.len() as f64;
    let mu = samples.iter().map(|y| y.ln()).sum::<f64>() / n;
    let var = samples.iter().map(|y| (y.ln() - mu).powi(2)).sum::<f64>() / n;
    let sigma = var.sqrt();
    if sigma < MIN_LOGNORMAL_SIGMA {
        Ok(LogNormalFit { mu, sigma: MIN_LOGNORMAL_SIGMA, degenerate: true })
    } else {
        Ok(LogNormalFit { mu, sigma, degenerate: false })
    }
}

/// Bernoulli log-likelihood of `logistic((k + threshold) / spread)` over
/// aggregated `(k, successes, failures)` counts.
pub fn psychometric_log_lik(counts: &[(f64, f64, f64)], threshold: f64, spread: f64) -> f64 {
    counts
        .iter()
        .map(|&(k, s, f)| {
            let z = (k + threshold) / spread;
            s * log_logistic(z) + f * log_logistic(-z)
        })
        .sum()
}

fn aggregate(trials: &[(u32, bool)]) -> Vec<(f64, f64, f64)> {
    let mut by_k: BTreeMap<u32, (f64, f64)> = BTreeMap::new();
    for &(k, ok) in trials {
        let e = by_k.entry(k).or_default();
        if ok {
            e.0 += 1.0;
        } else {
            e.1 += 1.0;
        }
    }
    by_k.into_iter().map(|(k, (s, f))| (k as f64, s, f)).collect()
}

/// Bounded MLE of the span psychometric function by projected Adam on
/// `(threshold, ln spread)`.
pub fn fit_psychometric(trials: &[(u32, bool)]) -> Result<PsychometricFit> {
    let counts = aggregate(trials);
    if counts.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "psychometric fit needs at least 2 distinct span lengths, got {}",
            counts.len()
        )));
    }
    if let Some(fit) = separated_fit(&counts) {
        return Ok(fit);
    }
    let n: f64 = counts.iter().map(|c| c.1 + c.2).sum();
    let mean_k = counts.iter().map(|c| c.0 * (c.1 + c.2)).sum::<f64>() / n;
    let (lo_s, hi_s) = (SPREAD_BOUNDS.0.ln(), SPREAD_BOUNDS.1.ln());
    let mut params = [-mean_k, 0.0];
    let schedule = [(0.05, 3000), (0.005, 2000)];
    for (lr, steps) in schedule {
        let mut adam = AdamState::new(2, lr);
        for _ in 0..steps {
            let (threshold, spread) = (params[0], params[1].exp());
            let (mut g_t, mut g_ls) = (0.0, 0.0);
            for &(k, s, f) in &counts {
                let z = (k + threshold) / spread;
                // d/dz of s·ln σ(z) + f·ln σ(−z)
                let dz = s * crate::likelihoods::logistic(-z) - f * crate::likelihoods::logistic(z);
                g_t += dz / spread;
                g_ls += -dz * z;
            }
            adam.step(&mut params, &[-g_t / n, -g_ls / n])?;
            params[0] = params[0].clamp(THRESHOLD_BOUNDS.0, THRESHOLD_BOUNDS.1);
            params[1] = params[1].clamp(lo_s, hi_s);
        }
    }
    let (threshold, spread) = (params[0], params[1].exp());
    let tol = 1e-3;
    let degenerate = (params[1] - lo_s).abs() < tol
        || (params[1] - hi_s).abs() < tol
        || (threshold - THRESHOLD_BOUNDS.0).abs() < tol
        || (threshold - THRESHOLD_BOUNDS.1).abs() < tol;
    Ok(PsychometricFit { threshold, spread, log_lik: psychometric_log_lik(&counts, threshold, spread), degenerate })
}

/// Perfectly separated data has no interior maximum and the gradient
/// vanishes before the bounds are reached, so the bounded optimum is placed
/// directly: spread at its lower bound, threshold at the bound for one-sided
/// data, otherwise the best threshold between the separating span lengths.
fn separated_fit(counts: &[(f64, f64, f64)]) -> Option<PsychometricFit> {
    let max_fail = counts.iter().filter(|c| c.2 > 0.0).map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    let min_succ = counts.iter().filter(|c| c.1 > 0.0).map(|c| c.0).fold(f64::INFINITY, f64::min);
    if max_fail >= min_succ {
        return None;
    }
    let spread = SPREAD_BOUNDS.0;
    let threshold = if max_fail == f64::NEG_INFINITY {
        THRESHOLD_BOUNDS.1
    } else if min_succ == f64::INFINITY {
        THRESHOLD_BOUNDS.0
    } else {
        // Golden-section search; the log-likelihood is concave in the threshold.
        let (mut a, mut b) = (-min_succ, -max_fail);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if psychometric_log_lik(counts, c, spread) >= psychometric_log_lik(counts, d, spread) {
                b = d;
            } else {
                a = c;
            }
        }
        (a + b) / 2.0
    };
    Some(PsychometricFit { threshold, spread, log_lik: psychometric_log_lik(counts, threshold, spread), degenerate: true })
}

pub fn fit_bernoulli(outcomes: &[bool]) -> Result<BernoulliFit> {
    if outcomes.is_empty() {
        return Err(Error::Fit("Bernoulli fit needs at least one trial".into()));
    }
    let p = outcomes.iter().filter(|&&b| b).count() as f64 / outcomes.len() as f64;
    let clamped = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    Ok(BernoulliFit { p: clamped, degenerate: clamped != p })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskFit {
    pub params: FamilyParams,
    pub n_trials: usize,
    pub degenerate: bool,
}

/// Per-task fits for one participant. Tasks without enough data are absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImleFit {
    pub tasks: BTreeMap<TaskId, TaskFit>,
}

impl ImleFit {
    /// Assembles a full parameter vector, filling unfitted slots from
    /// `defaults`. The mask marks slots that were actually estimated.
    pub fn theta(&self, defaults: &ThetaVector) -> (ThetaVector, [bool; THETA_DIM]) {
        let mut theta = *defaults;
        let mut fitted = [false; THETA_DIM];
        for (task, fit) in &self.tasks {
            let slots = &task.spec().theta_slots;
            let values: Vec<f64> = match fit.params {
                FamilyParams::LogNormal { mu, sigma } => vec![mu, sigma],
                FamilyParams::Psychometric { threshold, spread } => vec![threshold, spread],
                FamilyParams::Bernoulli { p } => vec![p],
            };
            for (&slot, v) in slots.iter().zip(values) {
                theta.0[slot] = v;
                fitted[slot] = true;
            }
        }
        (theta, fitted)
    }
}

/// Fits every task that has usable data.
pub fn fit_participant(trials: &[TrialRecord]) -> ImleFit {
    let mut by_task: BTreeMap<TaskId, Vec<&TrialRecord>> = BTreeMap::new();
    for t in trials {
        by_task.entry(t.task_id).or_default().push(t);
    }
    let mut fit = ImleFit::default();
    for (task, ts) in by_task {
        if let Some(tf) = fit_task(task, &ts) {
            fit.tasks.insert(task, tf);
        }
    }
    fit
}

pub(crate) fn fit_task(task: TaskId, trials: &[&TrialRecord]) -> Option<TaskFit> {
    let n_trials = trials.len();
    match task.spec().family {
        Family::LogNormalTiming => {
            let ys: Vec<f64> = trials
                .iter()
                .filter_map(|t| match t.outcome {
                    Outcome::ReactionTime(y) => Some(y),
                    _ => None,
                })
                .collect();
            let f = fit_lognormal(&ys).ok()?;
            Some(TaskFit { params: FamilyParams::LogNormal { mu: f.mu, sigma: f.sigma }, n_trials, degenerate: f.degenerate })
        }
        Family::PsychometricSpan => {
            let kc: Vec<(u32, bool)> = trials
                .iter()
                .filter_map(|t| match (t.stimulus.span_length(), t.outcome) {
                    (Some(k), Outcome::Binary(b)) => Some((k, b)),
                    _ => None,
                })
                .collect();
            let f = fit_psychometric(&kc).ok()?;
            Some(TaskFit {
                params: FamilyParams::Psychometric { threshold: f.threshold, spread: f.spread },
                n_trials,
                degenerate: f.degenerate,
            })
        }
        Family::BernoulliAccuracy => {
            let bs: Vec<bool> = trials
                .iter()
                .filter_map(|t| match t.outcome {
                    Outcome::Binary(b) => Some(b),
                    _ => None,
                })
                .collect();
            let f = fit_bernoulli(&bs).ok()?;
            Some(TaskFit { params: FamilyParams::Bernoulli { p: f.p }, n_trials, degenerate: f.degenerate })
        }
    }
}

/// Per-task MLE over all participants pooled together, with defaults for
/// tasks that cannot be fitted.
pub fn pooled_theta(data: &PopulationData) -> ThetaVector {
    let all: Vec<TrialRecord> = data.participants.iter().flat_map(|p| p.trials.iter().copied()).collect();
    let (mut theta, _) = fit_participant(&all).theta(&DEFAULT_THETA);
    // Keep the starting point away from the probability clamps.
    for (i, v) in theta.0.iter_mut().enumerate() {
        if matches!(crate::likelihoods::slot_kinds()[i], crate::likelihoods::SlotKind::Probability) {
            *v = v.clamp(1e-3, 1.0 - 1e-3);
        }
    }
    theta
}
