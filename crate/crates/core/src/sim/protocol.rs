use serde::{Deserialize, Serialize};

use crate::dale::{CandidateItem, PRIMER_LEN};
use crate::error::{contract, Result};
use crate::task::{Stimulus, TaskId, SPAN_LENGTHS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    /// Conventional battery, one task block after another.
    Tb,
    /// Primer followed by mutual-information selection.
    Ml,
    /// Primer followed by uniformly random selection.
    Random,
}

/// Trial counts of the block battery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TbCounts {
    /// Trials per span length 3..=8 for each span task.
    pub span_trials_per_length: u32,
    pub countermanding: u32,
    pub stroop: u32,
    pub pasat: u32,
    /// Cancellation is timed in the original battery; rows stand in for time.
    pub cancellation_rows: u32,
    pub running_span2: u32,
    pub running_span3: u32,
}

impl Default for TbCounts {
    fn default() -> Self {
        Self {
            span_trials_per_length: 2,
            countermanding: 72,
            stroop: 60,
            pasat: 20,
            cancellation_rows: 104,
            running_span2: 0,
            running_span3: 0,
        }
    }
}

impl TbCounts {
    /// The model-building battery, which also carried both running-span levels.
    pub fn training() -> Self {
        Self { running_span2: 6, running_span3: 6, ..Self::default() }
    }

    pub fn total(&self) -> usize {
        self.items().len()
    }

    /// Items in block order: simple span, complex span, countermanding,
    /// Stroop, PASAT, cancellation, then running span if present.
    pub fn items(&self) -> Vec<CandidateItem> {
        let mut items = Vec::new();
        for task in [TaskId::SimpleSpan, TaskId::ComplexSpan] {
            for k in SPAN_LENGTHS {
                for _ in 0..self.span_trials_per_length {
                    items.push(CandidateItem::new(task, Stimulus::Span(k)));
                }
            }
        }
        let blocks = [
            (TaskId::Countermanding, self.countermanding),
            (TaskId::Stroop, self.stroop),
            (TaskId::Pasat, self.pasat),
            (TaskId::Cancellation, self.cancellation_rows),
            (TaskId::RunningSpan2, self.running_span2),
            (TaskId::RunningSpan3, self.running_span3),
        ];
        for (task, n) in blocks {
            items.extend((0..n).map(|_| CandidateItem::new(task, Stimulus::Unit)));
        }
        items
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub kind: ProtocolKind,
    pub tb: TbCounts,
    pub budget: usize,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self { kind: ProtocolKind::Ml, tb: TbCounts::default(), budget: 100, seed: 0 }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let tb = &self.tb;
        if self.kind == ProtocolKind::Tb
            && [tb.span_trials_per_length, tb.countermanding, tb.stroop, tb.pasat, tb.cancellation_rows].contains(&0)
        {
            return Err(contract("battery trial counts must be positive"));
        }
        if self.kind != ProtocolKind::Tb && self.budget < PRIMER_LEN {
            return Err(contract(format!("budget {} is shorter than the primer", self.budget)));
        }
        Ok(())
    }
}
