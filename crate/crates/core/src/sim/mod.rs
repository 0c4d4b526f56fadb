//! Synthetic participants, protocol simulation and evaluation metrics.

mod metrics;
mod population;
mod protocol;

pub use metrics::{
    cohort_rmse, convergence_report, icc_2_1, pearson, sign_test, test_retest, ConvergenceReport, OutputRanges,
    SlotCorrelation, PRIMARY_SLOTS,
};
pub use population::{
    constructed_generator, default_generator, draw_participants, generate_population, simulate_items,
    SyntheticParticipant, SyntheticResponder, Truth, GENERATOR_CENTER, GENERATOR_RAW_SPREAD,
};
pub use protocol::{ProtocolConfig, ProtocolKind, TbCounts};

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dale::{run_session, MiConfig, Responder, SelectionPolicy, SessionConfig, SessionLogRecord, SessionResult, PRIMER_LEN};
use crate::decoder::DecoderWeights;
use crate::error::{contract, Result};
use crate::imle::{fit_participant, fit_task, ImleFit, TaskFit, DEFAULT_THETA};
use crate::likelihoods::ThetaVector;
use crate::rng::derive_seed;
use crate::task::{TaskId, TrialRecord, THETA_DIM};
use crate::vi::ParticipantData;

/// IMLE on a participant's battery data.
pub fn run_tb_imle(data: &ParticipantData) -> ImleFit {
    fit_participant(&data.trials)
}

/// DALE session against `responder`; a failure mid-session is returned as
/// its underlying error.
pub fn run_ml_dlvm<R: Responder + ?Sized>(
    responder: &mut R,
    weights: &DecoderWeights,
    cfg: &SessionConfig,
) -> Result<SessionResult> {
    run_session(responder, weights, cfg).map_err(|a| a.source)
}

/// Estimate path of IMLE over every prefix of `trials`. Only the task of
/// the newest trial is refitted at each step; unfitted slots hold `defaults`.
pub fn tb_estimate_path(trials: &[TrialRecord], defaults: &ThetaVector) -> Vec<(ThetaVector, [bool; THETA_DIM])> {
    let mut by_task: BTreeMap<TaskId, Vec<&TrialRecord>> = BTreeMap::new();
    let mut fits: BTreeMap<TaskId, TaskFit> = BTreeMap::new();
    let mut out = Vec::with_capacity(trials.len());
    for t in trials {
        let ts = by_task.entry(t.task_id).or_default();
        ts.push(t);
        match fit_task(t.task_id, ts) {
            Some(f) => fits.insert(t.task_id, f),
            None => fits.remove(&t.task_id),
        };
        out.push(ImleFit { tasks: fits.clone() }.theta(defaults));
    }
    out
}

/// Estimate path of a DALE session: the decoded posterior mean after each
/// logged item.
pub fn ml_estimate_path(log: &[SessionLogRecord], weights: &DecoderWeights) -> Result<Vec<ThetaVector>> {
    log.iter().map(|r| weights.decode(&r.q_mean)).collect()
}

/// Outcome of one simulated protocol run for one participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRun {
    pub participant_id: String,
    pub kind: ProtocolKind,
    pub trials: Vec<TrialRecord>,
    pub theta: ThetaVector,
    /// Slots estimated from data rather than defaults.
    pub fitted: [bool; THETA_DIM],
    /// Estimate after each item; ML and Random paths start at the primer end.
    pub path: Vec<ThetaVector>,
    pub path_start: usize,
    pub log: Vec<SessionLogRecord>,
}

/// Settings shared by the simulated protocol runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub protocol: ProtocolConfig,
    pub mi: MiConfig,
    pub final_update_iterations: Option<usize>,
    /// When set, battery runs stop after this many items.
    pub tb_truncate: Option<usize>,
    /// Divide scores by the task's least divisible unit in the ML protocol.
    pub per_item_scores: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { protocol: ProtocolConfig::default(), mi: MiConfig::default(), final_update_iterations: None, tb_truncate: None, per_item_scores: false }
    }
}

impl SimConfig {
    fn session_config(&self, policy: SelectionPolicy, seed: u64) -> SessionConfig {
        SessionConfig {
            mi: MiConfig { seed, ..self.mi },
            budget: self.protocol.budget,
            policy,
            final_update_iterations: self.final_update_iterations,
            use_primer: true,
        }
    }
}

/// Runs the configured protocol for one participant. `run` labels the
/// responder stream so repeated runs give independent answers.
pub fn run_protocol(
    participant: &SyntheticParticipant,
    generator: &DecoderWeights,
    model: Option<&DecoderWeights>,
    cfg: &SimConfig,
    run: u64,
) -> Result<ProtocolRun> {
    cfg.protocol.validate()?;
    let mut responder = participant.responder(generator, run)?;
    let kind = cfg.protocol.kind;
    match kind {
        ProtocolKind::Tb => {
            let mut items = cfg.protocol.tb.items();
            if let Some(n) = cfg.tb_truncate {
                items.truncate(n);
            }
            let trials = items
                .iter()
                .enumerate()
                .map(|(i, item)| Ok(TrialRecord::new(item.task_id, item.stimulus, responder.respond(item)?, i as u64)))
                .collect::<Result<Vec<_>>>()?;
            let steps = tb_estimate_path(&trials, &DEFAULT_THETA);
            let (theta, fitted) = *steps.last().ok_or_else(|| contract("empty battery"))?;
            Ok(ProtocolRun {
                participant_id: participant.id.clone(),
                kind,
                trials,
                theta,
                fitted,
                path: steps.into_iter().map(|(t, _)| t).collect(),
                path_start: 1,
                log: Vec::new(),
            })
        }
        ProtocolKind::Ml | ProtocolKind::Random => {
            let model = model.ok_or_else(|| contract("ML and random protocols need a trained model"))?;
            let policy = match kind {
                ProtocolKind::Ml if cfg.per_item_scores => SelectionPolicy::MutualInformationPerItem,
                ProtocolKind::Ml => SelectionPolicy::MutualInformation,
                _ => SelectionPolicy::Random,
            };
            let seed = derive_seed(cfg.protocol.seed, &[participant.seed, run]);
            let res = run_ml_dlvm(&mut responder, model, &cfg.session_config(policy, seed))?;
            let path = ml_estimate_path(&res.log[PRIMER_LEN - 1..], model)?;
            Ok(ProtocolRun {
                participant_id: participant.id.clone(),
                kind,
                trials: res.state.collected.clone(),
                theta: res.theta,
                fitted: [true; THETA_DIM],
                path,
                path_start: PRIMER_LEN,
                log: res.log,
            })
        }
    }
}

/// Runs one protocol for every participant in parallel, in participant order.
pub fn run_cohort(
    participants: &[SyntheticParticipant],
    generator: &DecoderWeights,
    model: Option<&DecoderWeights>,
    cfg: &SimConfig,
    run: u64,
) -> Result<Vec<ProtocolRun>> {
    participants.par_iter().map(|p| run_protocol(p, generator, model, cfg, run)).collect()
}

/// Cohort-level summary of a set of protocol runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub kind: ProtocolKind,
    pub n_participants: usize,
    pub items_per_participant: usize,
    /// Summed normalized error to truth per participant.
    pub error_to_truth: Vec<f64>,
    pub rmse_to_truth: f64,
    pub convergence: ConvergenceReport,
    /// Paired correlations with a second run, when one was given.
    pub retest: Option<Vec<SlotCorrelation>>,
}

/// Scores runs against ground truth and builds convergence curves.
pub fn evaluate_runs(
    runs: &[ProtocolRun],
    truth: &[ThetaVector],
    retest: Option<&[ProtocolRun]>,
    ranges: &OutputRanges,
) -> Result<MetricsReport> {
    let first = runs.first().ok_or_else(|| contract("no runs to evaluate"))?;
    if runs.len() != truth.len() {
        return Err(contract(format!("{} runs vs {} truths", runs.len(), truth.len())));
    }
    let estimates: Vec<ThetaVector> = runs.iter().map(|r| r.theta).collect();
    let paths: Vec<Vec<ThetaVector>> = runs.iter().map(|r| r.path.clone()).collect();
    let retest = match retest {
        Some(b) => Some(test_retest(&estimates, &b.iter().map(|r| r.theta).collect::<Vec<_>>())?),
        None => None,
    };
    Ok(MetricsReport {
        kind: first.kind,
        n_participants: runs.len(),
        items_per_participant: first.trials.len(),
        error_to_truth: estimates.iter().zip(truth).map(|(e, t)| ranges.summed_error(e, t)).collect(),
        rmse_to_truth: cohort_rmse(&estimates, truth, ranges)?,
        convergence: convergence_report(&paths, first.path_start, ranges)?,
        retest,
    })
}
