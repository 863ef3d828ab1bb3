//! Collected trajectories, their per-step attraction traces, and the FIFO
//! replay buffer that serves fixed-length training windows.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::TrajectoryWindow;

use super::HarnessError;

/// One row of the per-step collection trace: everything needed to replay the
/// attraction update that happened at this step.
#[derive(Debug, Clone)]
pub struct TraceRow {
    /// 0-based step index within the episode.
    pub step: usize,
    /// Executed (clipped) action.
    pub action: Vec<f64>,
    /// Raw environment reward.
    pub reward_raw: f64,
    /// Centered and clipped reward actually fed to the attraction update.
    pub reward_normalized: f64,
    /// Routed code of the executed action.
    pub code: usize,
    /// Attraction value of that code immediately after the update.
    pub attraction_after: f64,
}

/// One completed episode with relabeled return-to-go values and the
/// attraction trace recorded while it was collected.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    /// Discounted suffix sums of `rewards` (relabeled after the episode).
    pub rtg: Vec<f64>,
    pub codes: Vec<usize>,
    pub trace: Vec<TraceRow>,
    /// Seed of the environment this episode ran in.
    pub env_seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Undiscounted episode return.
    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let n = self.len();
        if n == 0 {
            return Err(HarnessError::Config("empty trajectory".into()));
        }
        if self.states.len() != n
            || self.actions.len() != n
            || self.rtg.len() != n
            || self.codes.len() != n
            || self.trace.len() != n
        {
            return Err(HarnessError::Config(
                "trajectory field lengths disagree".into(),
            ));
        }
        Ok(())
    }
}

/// Renders a trajectory's trace as CSV (one row per step, actions flattened
/// into `a0..a{d-1}` columns).
pub fn render_trace_csv(traj: &Trajectory) -> String {
    let dim = traj.actions.first().map_or(0, |a| a.len());
    let mut out = String::new();
    out.push_str("step");
    for d in 0..dim {
        out.push_str(&format!(",a{d}"));
    }
    out.push_str(",reward_raw,reward_normalized,code,attraction_after\n");
    for row in &traj.trace {
        out.push_str(&row.step.to_string());
        for a in &row.action {
            out.push_str(&format!(",{a}"));
        }
        out.push_str(&format!(
            ",{},{},{},{}\n",
            row.reward_raw, row.reward_normalized, row.code, row.attraction_after
        ));
    }
    out
}

/// Bounded trajectory store with FIFO eviction.
#[derive(Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Trajectory>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self, HarnessError> {
        if capacity == 0 {
            return Err(HarnessError::Config(
                "replay capacity must be >= 1".into(),
            ));
        }
        Ok(Self {
            capacity,
            items: VecDeque::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stores a trajectory, evicting the oldest when full.
    pub fn push(&mut self, traj: Trajectory) -> Result<(), HarnessError> {
        traj.validate()?;
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(traj);
        Ok(())
    }

    /// Samples one training window of `k` steps: a uniformly chosen
    /// trajectory, a uniformly chosen end step, and the contiguous slice of
    /// up to `k` steps ending there, left-padded when the prefix is shorter.
    pub fn sample_window(
        &self,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<TrajectoryWindow, HarnessError> {
        if self.items.is_empty() {
            return Err(HarnessError::EmptyBuffer);
        }
        if k == 0 {
            return Err(HarnessError::Config("window length must be >= 1".into()));
        }
        let traj = &self.items[rng.gen_range(0..self.items.len())];
        let end = rng.gen_range(0..traj.len()); // inclusive end step
        let start = (end + 1).saturating_sub(k);
        let real = end + 1 - start;
        let pad = k - real;

        let dim_s = traj.states[0].len();
        let dim_a = traj.actions[0].len();
        let mut window = TrajectoryWindow {
            rtg: vec![0.0; k],
            states: vec![vec![0.0; dim_s]; k],
            actions: vec![vec![0.0; dim_a]; k],
            codes: vec![0; k],
            rewards: vec![0.0; k],
            pad_steps: pad,
        };
        for i in 0..real {
            let src = start + i;
            let dst = pad + i;
            window.rtg[dst] = traj.rtg[src];
            window.states[dst] = traj.states[src].clone();
            window.actions[dst] = traj.actions[src].clone();
            window.codes[dst] = traj.codes[src];
            window.rewards[dst] = traj.rewards[src];
        }
        Ok(window)
    }

    /// Samples a full batch of windows.
    pub fn sample_batch(
        &self,
        batch_size: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<TrajectoryWindow>, HarnessError> {
        (0..batch_size).map(|_| self.sample_window(k, rng)).collect()
    }
}
