//! Deterministic point-mass navigation environment.
//!
//! The agent starts at the origin and must reach a seeded random goal in
//! `[-goal_span, goal_span]^d`. Actions are clipped to `[-1, 1]^d` and move
//! the position by `step_size * action` (drift-free: a zero action leaves
//! the position unchanged). The per-step reward is the negative Euclidean
//! distance to the goal after the move, so returns are dense, finite, and
//! nonpositive. An episode ends when the distance falls within
//! `goal_radius` or the horizon is exhausted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::HarnessError;

/// Environment shape and dynamics constants.
#[derive(Debug, Clone)]
pub struct EnvConfig {
    /// Action dimension (== state dimension).
    pub dim: usize,
    /// Maximum episode length.
    pub horizon: usize,
    /// Distance moved per unit action component.
    pub step_size: f64,
    /// Distance at which the goal counts as reached.
    pub goal_radius: f64,
    /// Goals are sampled uniformly from `[-goal_span, goal_span]^d`.
    pub goal_span: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dim: 3,
            horizon: 30,
            step_size: 0.1,
            goal_radius: 0.05,
            goal_span: 0.8,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.dim == 0 {
            return Err(HarnessError::Config("env dim must be >= 1".into()));
        }
        if self.horizon == 0 {
            return Err(HarnessError::Config("env horizon must be >= 1".into()));
        }
        for (name, v) in [
            ("step_size", self.step_size),
            ("goal_radius", self.goal_radius),
            ("goal_span", self.goal_span),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(HarnessError::Config(format!(
                    "env {name} must be finite and > 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// What one environment step produced.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Observation after the move (`goal - position`).
    pub state: Vec<f64>,
    /// Negative distance to the goal after the move.
    pub reward: f64,
    /// Whether the episode just ended.
    pub done: bool,
}

/// Point-mass environment instance. All randomness is consumed at
/// construction (the goal draw); stepping is a pure function of the action
/// sequence, so a fixed seed and fixed actions replay identically.
#[derive(Debug, Clone)]
pub struct ToyEnv {
    cfg: EnvConfig,
    pos: Vec<f64>,
    goal: Vec<f64>,
    steps_taken: usize,
    done: bool,
}

impl ToyEnv {
    pub fn new(cfg: EnvConfig, seed: u64) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let goal = (0..cfg.dim)
            .map(|_| rng.gen_range(-cfg.goal_span..=cfg.goal_span))
            .collect();
        Ok(Self {
            pos: vec![0.0; cfg.dim],
            goal,
            cfg,
            steps_taken: 0,
            done: false,
        })
    }

    /// Builds an env whose goal is placed explicitly (tests).
    pub fn with_goal(cfg: EnvConfig, goal: Vec<f64>) -> Result<Self, HarnessError> {
        cfg.validate()?;
        if goal.len() != cfg.dim {
            return Err(HarnessError::Config(format!(
                "goal has {} dims, env wants {}",
                goal.len(),
                cfg.dim
            )));
        }
        Ok(Self {
            pos: vec![0.0; cfg.dim],
            goal,
            cfg,
            steps_taken: 0,
            done: false,
        })
    }

    /// Observation: the vector from the current position to the goal.
    pub fn state(&self) -> Vec<f64> {
        self.goal
            .iter()
            .zip(&self.pos)
            .map(|(g, p)| g - p)
            .collect()
    }

    /// Euclidean distance to the goal.
    pub fn distance(&self) -> f64 {
        self.state().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn done(&self) -> bool {
        self.done
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    /// Applies a (clipped) action. Erroring on a finished episode keeps
    /// collection loops honest about episode boundaries.
    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome, HarnessError> {
        if self.done {
            return Err(HarnessError::StepAfterDone);
        }
        if action.len() != self.cfg.dim {
            return Err(HarnessError::Config(format!(
                "action has {} dims, env wants {}",
                action.len(),
                self.cfg.dim
            )));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(HarnessError::Config("non-finite action".into()));
        }
        for (p, a) in self.pos.iter_mut().zip(action) {
            *p += self.cfg.step_size * a.clamp(-1.0, 1.0);
        }
        self.steps_taken += 1;
        let dist = self.distance();
        // written as a subtraction from +0.0 so a zero distance yields +0.0,
        // never -0.0 (keeps CSV output sign-stable).
        let reward = 0.0 - dist;
        self.done = dist <= self.cfg.goal_radius || self.steps_taken >= self.cfg.horizon;
        Ok(StepOutcome {
            state: self.state(),
            reward,
            done: self.done,
        })
    }
}
