use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mi::{decode_draws, mi_from_thetas, MiEstimate};
use super::update::{fit_latent, LatentFit};
use super::{candidate_space, CandidateItem, MiConfig, Responder, PRIMER, PRIMER_LEN};
use crate::decoder::DecoderWeights;
use crate::error::{contract, Error, Result};
use crate::likelihoods::ThetaVector;
use crate::rng::{self, derive_seed, stream};
use crate::task::{Outcome, TaskId, TrialRecord};
use crate::vi::LatentGaussian;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Primer,
    Active,
    Done,
}

/// How free choices are made once the primer is over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    MutualInformation,
    /// Mutual information divided by the task's least divisible unit, so a
    /// six-trial block must be worth six single items.
    MutualInformationPerItem,
    /// Uniform over the candidate space; the ablation control.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub mi: MiConfig,
    pub budget: usize,
    pub policy: SelectionPolicy,
    /// Extra latent update run once the budget is exhausted.
    pub final_update_iterations: Option<usize>,
    pub use_primer: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            mi: MiConfig::default(),
            budget: 100,
            policy: SelectionPolicy::MutualInformation,
            final_update_iterations: None,
            use_primer: true,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        self.mi.validate()?;
        let min = if self.use_primer { PRIMER_LEN } else { 1 };
        if self.budget < min {
            return Err(contract(format!("budget {} is below the minimum of {min}", self.budget)));
        }
        Ok(())
    }
}

/// Everything that evolves during one respondent's session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub collected: Vec<TrialRecord>,
    pub q: LatentGaussian,
    /// Forced continuation trials left, indexed by `TaskId::index`.
    pub ldu_remaining: [u32; 8],
    pub items_delivered: usize,
    pub phase: Phase,
    pub seed: u64,
    pub budget: usize,
    pub use_primer: bool,
    /// Most recent free choice; forced continuations repeat it.
    pub last_choice: Option<CandidateItem>,
}

impl SessionState {
    pub fn new(latent_dim: usize, cfg: &SessionConfig) -> Self {
        let mut state = Self {
            collected: Vec::new(),
            q: LatentGaussian::prior(latent_dim),
            ldu_remaining: [0; 8],
            items_delivered: 0,
            phase: Phase::Primer,
            seed: cfg.mi.seed,
            budget: cfg.budget,
            use_primer: cfg.use_primer,
            last_choice: None,
        };
        state.refresh_phase();
        state
    }

    fn refresh_phase(&mut self) {
        self.phase = if self.items_delivered >= self.budget {
            Phase::Done
        } else if self.use_primer && self.items_delivered < PRIMER_LEN {
            Phase::Primer
        } else {
            Phase::Active
        };
    }

    /// Appends an observation for `item`.
    pub fn record(&mut self, item: CandidateItem, outcome: Outcome) -> Result<()> {
        if self.phase == Phase::Done {
            return Err(contract("session is done"));
        }
        let trial = TrialRecord::new(item.task_id, item.stimulus, outcome, self.items_delivered as u64);
        trial.validate()?;
        self.collected.push(trial);
        self.items_delivered += 1;
        self.refresh_phase();
        Ok(())
    }
}

/// The chosen item plus the scores behind the choice (empty when forced).
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub item: CandidateItem,
    pub scores: Vec<(CandidateItem, MiEstimate)>,
    pub forced: bool,
}

fn mi_draws(state: &SessionState, weights: &DecoderWeights, cfg: &MiConfig) -> Vec<ThetaVector> {
    let mut r = rng::rng_from(state.seed, &[stream::MI, state.items_delivered as u64]);
    decode_draws(weights, &state.q, cfg.latent_samples, &mut r)
}

fn candidate_rng(state: &SessionState, index: usize) -> rng::Rng {
    rng::rng_from(state.seed, &[stream::MI, state.items_delivered as u64, index as u64 + 1])
}

/// Scores every candidate against the same set of latent draws.
pub fn score_candidates(
    state: &SessionState,
    weights: &DecoderWeights,
    cfg: &MiConfig,
) -> Result<Vec<(CandidateItem, MiEstimate)>> {
    let thetas = mi_draws(state, weights, cfg);
    candidate_space()
        .into_par_iter()
        .enumerate()
        .map(|(i, cand)| {
            let est = mi_from_thetas(&thetas, &cand, cfg.outcome_samples, &mut candidate_rng(state, i))?;
            Ok((cand, est))
        })
        .collect()
}

/// Mutual information of one candidate under the current posterior.
pub fn mutual_information(
    state: &SessionState,
    weights: &DecoderWeights,
    cand: &CandidateItem,
    cfg: &MiConfig,
) -> Result<MiEstimate> {
    cand.validate()?;
    let index = candidate_space().iter().position(|c| c == cand).unwrap_or(usize::MAX - 1);
    let thetas = mi_draws(state, weights, cfg);
    mi_from_thetas(&thetas, cand, cfg.outcome_samples, &mut candidate_rng(state, index))
}

/// Chooses the next item: primer order, then forced LDU continuation, then
/// the policy's free choice.
pub fn select_next(state: &mut SessionState, weights: &DecoderWeights, cfg: &SessionConfig) -> Result<Selection> {
    match state.phase {
        Phase::Done => return Err(contract("cannot select an item: session is done")),
        Phase::Primer => {
            return Ok(Selection { item: PRIMER[state.items_delivered], scores: Vec::new(), forced: true });
        }
        Phase::Active => {}
    }
    if let Some(task) = TaskId::ALL.into_iter().find(|t| state.ldu_remaining[t.index()] > 0) {
        state.ldu_remaining[task.index()] -= 1;
        let item = match state.last_choice {
            Some(c) if c.task_id == task => c,
            _ => CandidateItem::new(task, task.spec().stimulus_space[0]),
        };
        return Ok(Selection { item, scores: Vec::new(), forced: true });
    }
    let (item, scores) = match cfg.policy {
        SelectionPolicy::MutualInformation | SelectionPolicy::MutualInformationPerItem => {
            let scores = score_candidates(state, weights, &cfg.mi)?;
            let per_item = cfg.policy == SelectionPolicy::MutualInformationPerItem;
            let key = |(c, e): &(CandidateItem, MiEstimate)| {
                if per_item {
                    e.value / c.task_id.spec().ldu as f64
                } else {
                    e.value
                }
            };
            let mut best = 0;
            for (i, s) in scores.iter().enumerate() {
                // Strict comparison keeps the earliest candidate on ties.
                if key(s) > key(&scores[best]) {
                    best = i;
                }
            }
            (scores[best].0, scores)
        }
        SelectionPolicy::Random => {
            let space = candidate_space();
            let mut r = rng::rng_from(state.seed, &[stream::RANDOM_POLICY, state.items_delivered as u64]);
            (space[r.random_range(0..space.len())], Vec::new())
        }
    };
    state.ldu_remaining[item.task_id.index()] = item.task_id.spec().ldu - 1;
    state.last_choice = Some(item);
    Ok(Selection { item, scores, forced: false })
}

fn update_with(state: &SessionState, weights: &DecoderWeights, cfg: &MiConfig, iterations: usize, tag: u64) -> Result<LatentGaussian> {
    if state.collected.is_empty() {
        return Err(contract("latent update needs at least one observation"));
    }
    let seed = derive_seed(state.seed, &[stream::UPDATE, state.items_delivered as u64, tag]);
    fit_latent(
        weights,
        &state.collected,
        &state.q,
        LatentFit { lambda: cfg.lambda, iterations, lr: cfg.update_lr, seed },
    )
}

/// Refits the respondent's posterior on everything collected so far,
/// warm-started from the current posterior.
pub fn update_latent(state: &SessionState, weights: &DecoderWeights, cfg: &MiConfig) -> Result<LatentGaussian> {
    update_with(state, weights, cfg, cfg.update_iterations, 0)
}

/// One line of the JSON-lines session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLogRecord {
    pub index: usize,
    pub phase: Phase,
    pub task_id: TaskId,
    pub stimulus: crate::task::Stimulus,
    pub outcome: Outcome,
    /// Best score per task at the time this item was chosen.
    pub mi_scores: BTreeMap<String, f64>,
    pub q_mean: Vec<f64>,
    pub q_log_s: Vec<f64>,
    pub wall_ms: f64,
}

impl SessionLogRecord {
    pub fn item(&self) -> CandidateItem {
        CandidateItem::new(self.task_id, self.stimulus)
    }
}

fn per_task_scores(scores: &[(CandidateItem, MiEstimate)]) -> BTreeMap<String, f64> {
    let mut out: BTreeMap<String, f64> = BTreeMap::new();
    for (c, e) in scores {
        let v = out.entry(c.task_id.to_string()).or_insert(f64::NEG_INFINITY);
        *v = v.max(e.value);
    }
    out
}

/// A live session: state plus the pending item and the log so far.
#[derive(Debug, Clone)]
pub struct Session {
    state: SessionState,
    cfg: SessionConfig,
    weights: Arc<DecoderWeights>,
    pending: Option<Selection>,
    log: Vec<SessionLogRecord>,
}

impl Session {
    pub fn start(weights: Arc<DecoderWeights>, cfg: SessionConfig) -> Result<Self> {
        cfg.validate()?;
        let mut state = SessionState::new(weights.latent_dim(), &cfg);
        let first = select_next(&mut state, &weights, &cfg)?;
        Ok(Self { state, cfg, weights, pending: Some(first), log: Vec::new() })
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn log(&self) -> &[SessionLogRecord] {
        &self.log
    }

    pub fn pending(&self) -> Option<CandidateItem> {
        self.pending.as_ref().map(|s| s.item)
    }

    pub fn pending_scores(&self) -> BTreeMap<String, f64> {
        self.pending.as_ref().map(|s| per_task_scores(&s.scores)).unwrap_or_default()
    }

    pub fn is_done(&self) -> bool {
        self.state.phase == Phase::Done
    }

    pub fn items_remaining(&self) -> usize {
        self.state.budget.saturating_sub(self.state.items_delivered)
    }

    /// Current parameter estimate `link(decoder(m))`.
    pub fn estimate(&self) -> ThetaVector {
        self.weights.decode(&self.state.q.mean).expect("posterior mean is finite")
    }

    /// Records the answer to the pending item, updates the posterior and
    /// picks the next item.
    pub fn submit(&mut self, outcome: Outcome) -> Result<&SessionLogRecord> {
        let selection = self.pending.clone().ok_or_else(|| contract("no pending item: session is done"))?;
        let started = Instant::now();
        let phase = self.state.phase;
        let mut next_state = self.state.clone();
        next_state.record(selection.item, outcome)?;
        next_state.q = update_with(&next_state, &self.weights, &self.cfg.mi, self.cfg.mi.update_iterations, 0)?;
        if next_state.phase == Phase::Done {
            if let Some(iters) = self.cfg.final_update_iterations {
                next_state.q = update_with(&next_state, &self.weights, &self.cfg.mi, iters, 1)?;
            }
        }
        let next = if next_state.phase == Phase::Done {
            None
        } else {
            Some(select_next(&mut next_state, &self.weights, &self.cfg)?)
        };
        // Commit only once every fallible step has succeeded.
        self.state = next_state;
        self.pending = next;
        self.log.push(SessionLogRecord {
            index: self.state.items_delivered - 1,
            phase,
            task_id: selection.item.task_id,
            stimulus: selection.item.stimulus,
            outcome,
            mi_scores: per_task_scores(&selection.scores),
            q_mean: self.state.q.mean.clone(),
            q_log_s: self.state.q.log_s.clone(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        Ok(self.log.last().expect("just pushed"))
    }

    /// Rebuilds a session by re-submitting logged answers. Every logged item
    /// must equal the item the session itself would deliver.
    pub fn replay<'a>(
        weights: Arc<DecoderWeights>,
        cfg: SessionConfig,
        records: impl IntoIterator<Item = &'a SessionLogRecord>,
    ) -> Result<Self> {
        let mut session = Self::start(weights, cfg)?;
        for rec in records {
            match session.pending() {
                Some(item) if item == rec.item() => {}
                other => {
                    return Err(contract(format!(
                        "log item {} at index {} does not match expected {:?}",
                        rec.item(),
                        rec.index,
                        other.map(|c| c.label())
                    )))
                }
            }
            session.submit(rec.outcome)?;
        }
        Ok(session)
    }
}

#[derive(Debug, Clone)]
pub struct SessionResult {
    pub log: Vec<SessionLogRecord>,
    pub theta: ThetaVector,
    pub q: LatentGaussian,
    pub state: SessionState,
}

/// A session that stopped early; the log up to the failure is kept.
#[derive(Debug, thiserror::Error)]
#[error("session aborted after {} items: {source}", partial_log.len())]
pub struct SessionAbort {
    pub partial_log: Vec<SessionLogRecord>,
    #[source]
    pub source: Error,
}

/// Runs primer plus active selection against `responder` until the budget is spent.
pub fn run_session<R: Responder + ?Sized>(
    responder: &mut R,
    weights: &DecoderWeights,
    cfg: &SessionConfig,
) -> std::result::Result<SessionResult, SessionAbort> {
    let mut session = Session::start(Arc::new(weights.clone()), *cfg)
        .map_err(|source| SessionAbort { partial_log: Vec::new(), source })?;
    while let Some(item) = session.pending() {
        let step = responder.respond(&item).and_then(|outcome| session.submit(outcome).map(|_| ()));
        if let Err(source) = step {
            return Err(SessionAbort { partial_log: session.log.clone(), source });
        }
    }
    Ok(SessionResult {
        theta: session.estimate(),
        q: session.state.q.clone(),
        log: session.log,
        state: session.state,
    })
}
