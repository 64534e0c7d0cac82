//! Forward/backward traversal accounting.
//!
//! One *pass* is one traversal of the model over the current batch: a batched
//! forward over every example counts once, as does the single backward sweep.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepPasses {
    pub forwards: u64,
    pub backwards: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PassCounter {
    forwards: u64,
    backwards: u64,
    step_start: Option<StepPasses>,
    steps: Vec<StepPasses>,
}

impl PassCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_forward(&mut self) {
        self.forwards += 1;
    }

    pub fn record_backward(&mut self) {
        self.backwards += 1;
    }

    pub fn forwards(&self) -> u64 {
        self.forwards
    }

    pub fn backwards(&self) -> u64 {
        self.backwards
    }

    pub fn totals(&self) -> StepPasses {
        StepPasses {
            forwards: self.forwards,
            backwards: self.backwards,
        }
    }

    /// Marks the start of an optimization step.
    pub fn begin_step(&mut self) {
        self.step_start = Some(self.totals());
    }

    /// Closes the current step and snapshots the passes it used.
    pub fn end_step(&mut self) -> StepPasses {
        let start = self.step_start.take().unwrap_or_default();
        let delta = StepPasses {
            forwards: self.forwards - start.forwards,
            backwards: self.backwards - start.backwards,
        };
        self.steps.push(delta);
        delta
    }

    /// Per-step snapshots, in order.
    pub fn steps(&self) -> &[StepPasses] {
        &self.steps
    }
}
