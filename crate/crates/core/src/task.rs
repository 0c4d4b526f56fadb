//! Task definitions and the fixed 12-slot parameter layout.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Number of constrained parameters across the whole battery.
pub const THETA_DIM: usize = 12;

/// Span lengths offered for the two span tasks.
pub const SPAN_LENGTHS: std::ops::RangeInclusive<u32> = 3..=8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Stroop,
    Countermanding,
    SimpleSpan,
    ComplexSpan,
    Cancellation,
    Pasat,
    RunningSpan2,
    RunningSpan3,
}

impl TaskId {
    /// Registry order. Ties in item selection break by this order.
    pub const ALL: [TaskId; 8] = [
        TaskId::Stroop,
        TaskId::Countermanding,
        TaskId::SimpleSpan,
        TaskId::ComplexSpan,
        TaskId::Cancellation,
        TaskId::Pasat,
        TaskId::RunningSpan2,
        TaskId::RunningSpan3,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::Stroop => "stroop",
            TaskId::Countermanding => "countermanding",
            TaskId::SimpleSpan => "simple_span",
            TaskId::ComplexSpan => "complex_span",
            TaskId::Cancellation => "cancellation",
            TaskId::Pasat => "pasat",
            TaskId::RunningSpan2 => "running_span2",
            TaskId::RunningSpan3 => "running_span3",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn spec(self) -> &'static TaskSpec {
        &TaskRegistry::standard().tasks[self.index()]
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown task id `{s}`")))
    }
}

/// Outcome distribution family of a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Log-normal reaction times in milliseconds; slots (μ_τ, σ_τ).
    LogNormalTiming,
    /// Binary recall success, logistic in span length; slots (θ_ψ, σ_ψ).
    PsychometricSpan,
    /// Binary success with a single probability; slot (p).
    BernoulliAccuracy,
}

impl Family {
    pub fn n_slots(self) -> usize {
        match self {
            Family::LogNormalTiming | Family::PsychometricSpan => 2,
            Family::BernoulliAccuracy => 1,
        }
    }

    pub fn is_binary(self) -> bool {
        !matches!(self, Family::LogNormalTiming)
    }
}

/// What is presented on a trial: a span length, or the task's single unit item.
/// Serialized as `"unit"` or the span length as an integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stimulus {
    Unit,
    Span(u32),
}

impl Stimulus {
    pub fn span_length(self) -> Option<u32> {
        match self {
            Stimulus::Span(k) => Some(k),
            Stimulus::Unit => None,
        }
    }
}

impl fmt::Display for Stimulus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stimulus::Unit => f.write_str("unit"),
            Stimulus::Span(k) => write!(f, "{k}"),
        }
    }
}

impl Serialize for Stimulus {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Stimulus::Unit => s.serialize_str("unit"),
            Stimulus::Span(k) => s.serialize_u32(*k),
        }
    }
}

impl<'de> Deserialize<'de> for Stimulus {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = Stimulus;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("\"unit\" or a span length")
            }

            fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<Stimulus, E> {
                u32::try_from(v).map(Stimulus::Span).map_err(E::custom)
            }

            fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<Stimulus, E> {
                u32::try_from(v).map(Stimulus::Span).map_err(E::custom)
            }

            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<Stimulus, E> {
                v.parse().map_err(E::custom)
            }
        }
        d.deserialize_any(V)
    }
}

impl FromStr for Stimulus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("unit") {
            return Ok(Stimulus::Unit);
        }
        s.parse::<u32>()
            .map(Stimulus::Span)
            .map_err(|_| Error::Parse(format!("bad stimulus `{s}`")))
    }
}

/// A single observed outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Outcome {
    /// Reaction time in milliseconds.
    ReactionTime(f64),
    /// Correct (`true`) or incorrect.
    Binary(bool),
}

impl Outcome {
    pub fn matches(self, family: Family) -> bool {
        matches!(
            (self, family),
            (Outcome::ReactionTime(_), Family::LogNormalTiming)
                | (Outcome::Binary(_), Family::PsychometricSpan | Family::BernoulliAccuracy)
        )
    }

    /// Parses a table cell, using the family to disambiguate `1` (1 ms vs correct).
    pub fn parse_for(family: Family, s: &str) -> Result<Self> {
        let s = s.trim();
        match family {
            Family::LogNormalTiming => s
                .parse::<f64>()
                .map(Outcome::ReactionTime)
                .map_err(|_| Error::Parse(format!("bad reaction time `{s}`"))),
            _ => match s.to_ascii_lowercase().as_str() {
                "1" | "true" | "correct" => Ok(Outcome::Binary(true)),
                "0" | "false" | "incorrect" => Ok(Outcome::Binary(false)),
                _ => Err(Error::Parse(format!("bad binary outcome `{s}`"))),
            },
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::ReactionTime(rt) => write!(f, "{rt}"),
            Outcome::Binary(b) => f.write_str(if *b { "1" } else { "0" }),
        }
    }
}

/// One observation of one task for one participant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub task_id: TaskId,
    pub stimulus: Stimulus,
    pub outcome: Outcome,
    #[serde(default)]
    pub sequence_index: u64,
}

impl TrialRecord {
    pub fn new(task_id: TaskId, stimulus: Stimulus, outcome: Outcome, sequence_index: u64) -> Self {
        Self { task_id, stimulus, outcome, sequence_index }
    }

    /// Checks outcome type, reaction-time sign and stimulus admissibility.
    pub fn validate(&self) -> Result<()> {
        let spec = self.task_id.spec();
        if !self.outcome.matches(spec.family) {
            return Err(contract(format!(
                "outcome {:?} does not match family {:?} of {}",
                self.outcome, spec.family, self.task_id
            )));
        }
        if let Outcome::ReactionTime(rt) = self.outcome {
            if !(rt.is_finite() && rt > 0.0) {
                return Err(Error::Domain(format!("reaction time must be positive, got {rt}")));
            }
        }
        spec.check_stimulus(self.stimulus)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub family: Family,
    pub theta_slots: Vec<usize>,
    pub stimulus_space: Vec<Stimulus>,
    /// Minimum consecutive trials once the task is chosen.
    pub ldu: u32,
    /// Whether the active phase may choose this task.
    pub active_eligible: bool,
}

impl TaskSpec {
    pub fn check_stimulus(&self, stimulus: Stimulus) -> Result<()> {
        if self.stimulus_space.contains(&stimulus) {
            Ok(())
        } else {
            Err(Error::Domain(format!("stimulus {stimulus} not admissible for {}", self.task_id)))
        }
    }
}

/// The eight modeled tasks. Serialized as the shared task document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRegistry {
    pub tasks: Vec<TaskSpec>,
}

impl TaskRegistry {
    pub fn standard() -> &'static TaskRegistry {
        static REGISTRY: OnceLock<TaskRegistry> = OnceLock::new();
        REGISTRY.get_or_init(|| {
            let registry = TaskRegistry::build_standard();
            registry.validate().expect("standard registry is a partition of the 12 slots");
            registry
        })
    }

    fn build_standard() -> TaskRegistry {
        let spans: Vec<Stimulus> = SPAN_LENGTHS.map(Stimulus::Span).collect();
        let unit = vec![Stimulus::Unit];
        let spec = |task_id, family, slots: &[usize], stimuli: &Vec<Stimulus>, ldu, eligible| TaskSpec {
            task_id,
            family,
            theta_slots: slots.to_vec(),
            stimulus_space: stimuli.clone(),
            ldu,
            active_eligible: eligible,
        };
        use Family::*;
        TaskRegistry {
            tasks: vec![
                spec(TaskId::Stroop, LogNormalTiming, &[0, 1], &unit, 6, true),
                spec(TaskId::Countermanding, LogNormalTiming, &[2, 3], &unit, 4, true),
                spec(TaskId::SimpleSpan, PsychometricSpan, &[4, 5], &spans, 1, true),
                spec(TaskId::ComplexSpan, PsychometricSpan, &[6, 7], &spans, 1, true),
                spec(TaskId::Cancellation, BernoulliAccuracy, &[8], &unit, 1, true),
                spec(TaskId::Pasat, BernoulliAccuracy, &[9], &unit, 6, true),
                // Trained on, but never delivered in the adaptive protocol.
                spec(TaskId::RunningSpan2, BernoulliAccuracy, &[10], &unit, 1, false),
                spec(TaskId::RunningSpan3, BernoulliAccuracy, &[11], &unit, 1, false),
            ],
        }
    }

    /// Slots must partition `0..THETA_DIM` with family-sized groups, in `TaskId` order.
    pub fn validate(&self) -> Result<()> {
        if self.tasks.len() != TaskId::ALL.len() {
            return Err(contract(format!("registry has {} tasks, expected 8", self.tasks.len())));
        }
        let mut seen = [false; THETA_DIM];
        for (spec, id) in self.tasks.iter().zip(TaskId::ALL) {
            if spec.task_id != id {
                return Err(contract(format!("registry order: found {} where {} expected", spec.task_id, id)));
            }
            if spec.theta_slots.len() != spec.family.n_slots() {
                return Err(contract(format!("{} has {} slots", id, spec.theta_slots.len())));
            }
            if spec.ldu == 0 || spec.stimulus_space.is_empty() {
                return Err(contract(format!("{id}: ldu and stimulus space must be non-empty")));
            }
            for &slot in &spec.theta_slots {
                if slot >= THETA_DIM || seen[slot] {
                    return Err(contract(format!("slot {slot} of {id} out of range or shared")));
                }
                seen[slot] = true;
            }
        }
        if seen.iter().all(|&s| s) {
            Ok(())
        } else {
            Err(contract("theta slots do not cover 0..12"))
        }
    }

    pub fn get(&self, task: TaskId) -> &TaskSpec {
        &self.tasks[task.index()]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let registry: TaskRegistry = serde_json::from_str(s)?;
        registry.validate()?;
        Ok(registry)
    }
}
