//! Adaptive item selection: mutual-information scoring of candidate items,
//! selection under least-divisible-unit constraints, and per-respondent
//! latent updates.

mod mi;
mod session;
mod update;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::task::{Outcome, Stimulus, TaskId, TaskRegistry};

pub use mi::{decode_draws, mi_from_thetas, MiEstimate};
pub use session::{
    mutual_information, run_session, score_candidates, select_next, update_latent, Phase, Selection,
    SelectionPolicy, Session, SessionAbort, SessionConfig, SessionLogRecord, SessionResult, SessionState,
};
pub use update::{fit_latent, LatentFit};

/// A deliverable item: a task and, for span tasks, a span length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CandidateItem {
    pub task_id: TaskId,
    pub stimulus: Stimulus,
}

impl CandidateItem {
    pub const fn new(task_id: TaskId, stimulus: Stimulus) -> Self {
        Self { task_id, stimulus }
    }

    pub fn label(&self) -> String {
        match self.stimulus {
            Stimulus::Unit => self.task_id.to_string(),
            Stimulus::Span(k) => format!("{}:{k}", self.task_id),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task_id.spec().check_stimulus(self.stimulus)
    }
}

impl fmt::Display for CandidateItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Every eligible `(task, stimulus)` pair in registry order, stimuli ascending.
pub fn candidate_space() -> Vec<CandidateItem> {
    TaskRegistry::standard()
        .tasks
        .iter()
        .filter(|t| t.active_eligible)
        .flat_map(|t| t.stimulus_space.iter().map(move |&s| CandidateItem::new(t.task_id, s)))
        .collect()
}

pub const PRIMER_LEN: usize = 26;

/// The fixed warm-up sequence delivered before active selection.
pub const PRIMER: [CandidateItem; PRIMER_LEN] = {
    use Stimulus::{Span, Unit};
    use TaskId::*;
    const fn c(t: TaskId, s: Stimulus) -> CandidateItem {
        CandidateItem::new(t, s)
    }
    [
        c(SimpleSpan, Span(4)),
        c(SimpleSpan, Span(5)),
        c(SimpleSpan, Span(6)),
        c(SimpleSpan, Span(7)),
        c(ComplexSpan, Span(4)),
        c(ComplexSpan, Span(4)),
        c(ComplexSpan, Span(5)),
        c(ComplexSpan, Span(5)),
        c(Countermanding, Unit),
        c(Countermanding, Unit),
        c(Countermanding, Unit),
        c(Countermanding, Unit),
        c(Stroop, Unit),
        c(Stroop, Unit),
        c(Stroop, Unit),
        c(Stroop, Unit),
        c(Stroop, Unit),
        c(Stroop, Unit),
        c(Pasat, Unit),
        c(Pasat, Unit),
        c(Pasat, Unit),
        c(Pasat, Unit),
        c(Pasat, Unit),
        c(Pasat, Unit),
        c(Cancellation, Unit),
        c(Cancellation, Unit),
    ]
};

/// Mutual-information and latent-update settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiConfig {
    /// Latent draws `K`.
    pub latent_samples: usize,
    /// Outcome draws `M`.
    pub outcome_samples: usize,
    /// KL weight in the latent update.
    pub lambda: f64,
    pub update_iterations: usize,
    pub update_lr: f64,
    pub seed: u64,
}

impl Default for MiConfig {
    fn default() -> Self {
        Self { latent_samples: 1000, outcome_samples: 500, lambda: 0.1, update_iterations: 4000, update_lr: 0.001, seed: 0 }
    }
}

impl MiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_samples == 0 || self.outcome_samples == 0 {
            return Err(crate::error::contract("K and M must be at least 1"));
        }
        if !(self.lambda >= 0.0) || !(self.update_lr > 0.0) {
            return Err(crate::error::contract("invalid update settings"));
        }
        Ok(())
    }
}

/// Something that answers items: a simulated participant or a live client.
pub trait Responder {
    fn respond(&mut self, item: &CandidateItem) -> Result<Outcome>;
}

impl<F> Responder for F
where
    F: FnMut(&CandidateItem) -> Result<Outcome>,
{
    fn respond(&mut self, item: &CandidateItem) -> Result<Outcome> {
        self(item)
    }
}
