//! Per-action-code attraction memory.
//!
//! Each of `M` discrete action codes carries a scalar *attraction* that is
//! exponentially decayed every environment step and reinforced on the single
//! code the executed action routed to:
//!
//! ```text
//! A[l] <- (1 - phi) * A[l] + delta * r_tilde * [l == j]
//! ```
//!
//! where `r_tilde` is the centered, clipped reward. Three consequences of
//! this recursion are exposed as executable oracles and used by the
//! verification suites:
//!
//! - [`closed_form`]: `A[l](t) = (1-phi)^t A[l](0)
//!   + delta * sum_tau (1-phi)^(t-tau) r_tilde(tau) [j(tau) == l]`,
//! - [`attraction_bound`]: `|A[l](t)| <= delta * R / phi` whenever
//!   `|A[l](0)|` starts within the bound,
//! - [`steady_state_mean`]: `delta * p * mu / phi` for i.i.d. reinforcement
//!   with hit probability `p` and mean clipped reward `mu`.
//!
//! [`canonical_ewa_step`] implements the richer normalized update (decayed
//! experience weight `N(t)`, foregone payoffs weighted by `delta`) that the
//! simplified recursion above is obtained from by dropping the normalizer
//! and foregone payoffs. It is diagnostic only: nothing in the training loop
//! calls it.

use thiserror::Error;

/// Errors from attraction-memory operations.
#[derive(Debug, Error)]
pub enum EwaError {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("code {code} out of range for {len} codes")]
    CodeOutOfRange { code: usize, len: usize },
    #[error("non-finite reward")]
    NonFiniteReward,
    #[error("incomplete history: {0}")]
    IncompleteHistory(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
}

/// Parameters of the simplified attraction update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EwaParams {
    /// Decay rate in (0, 1): the fraction of attraction forgotten per step.
    pub phi: f64,
    /// Reinforcement weight in (0, 1]: scale applied to the clipped reward.
    pub delta: f64,
    /// Reward clip radius R > 0: normalized rewards lie in [-R, R].
    pub clip_radius: f64,
}

impl Default for EwaParams {
    fn default() -> Self {
        Self { phi: 0.05, delta: 0.8, clip_radius: 1.0 }
    }
}

impl EwaParams {
    pub fn validate(&self) -> Result<(), EwaError> {
        if !(self.phi > 0.0 && self.phi < 1.0) {
            return Err(EwaError::InvalidParams(format!(
                "phi must lie in (0, 1), got {}",
                self.phi
            )));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(EwaError::InvalidParams(format!(
                "delta must lie in (0, 1], got {}",
                self.delta
            )));
        }
        if !(self.clip_radius > 0.0 && self.clip_radius.is_finite()) {
            return Err(EwaError::InvalidParams(format!(
                "clip_radius must be positive and finite, got {}",
                self.clip_radius
            )));
        }
        Ok(())
    }
}

/// The attraction vector over `M` action codes, updated in place.
///
/// Cost per update is one O(M) scale plus one O(1) indexed add; the struct
/// counts both so the harness can assert the per-step cost.
#[derive(Debug, Clone)]
pub struct AttractionTable {
    values: Vec<f64>,
    params: EwaParams,
    steps: u64,
    scale_ops: u64,
    add_ops: u64,
}

impl AttractionTable {
    /// All-zero attractions over `m` codes.
    pub fn new(m: usize, params: EwaParams) -> Result<Self, EwaError> {
        Self::with_values(vec![0.0; m], params)
    }

    /// Start from explicit attraction values.
    pub fn with_values(values: Vec<f64>, params: EwaParams) -> Result<Self, EwaError> {
        params.validate()?;
        if values.is_empty() {
            return Err(EwaError::InvalidParams("need at least one code".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EwaError::InvalidParams("non-finite initial attraction".into()));
        }
        Ok(Self { values, params, steps: 0, scale_ops: 0, add_ops: 0 })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, code: usize) -> Result<f64, EwaError> {
        self.values
            .get(code)
            .copied()
            .ok_or(EwaError::CodeOutOfRange { code, len: self.values.len() })
    }

    pub fn params(&self) -> EwaParams {
        self.params
    }

    /// Number of `decay_reinforce` updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.steps
    }

    /// (multiplications spent on decay, indexed adds spent on reinforcement).
    pub fn op_counts(&self) -> (u64, u64) {
        (self.scale_ops, self.add_ops)
    }

    /// One update: decay every code by `(1 - phi)`, then add
    /// `delta * r_tilde` to the routed code. Decay happens first, so the
    /// fresh reinforcement is not decayed on the step it arrives.
    pub fn decay_reinforce(&mut self, code: usize, r_tilde: f64) -> Result<(), EwaError> {
        if code >= self.values.len() {
            return Err(EwaError::CodeOutOfRange { code, len: self.values.len() });
        }
        if !r_tilde.is_finite() {
            return Err(EwaError::NonFiniteReward);
        }
        debug_assert!(
            r_tilde.abs() <= self.params.clip_radius,
            "reward outside clip radius; normalize rewards first"
        );
        let keep = 1.0 - self.params.phi;
        for v in &mut self.values {
            *v *= keep;
        }
        self.values[code] += self.params.delta * r_tilde;
        self.steps += 1;
        self.scale_ops += self.values.len() as u64;
        self.add_ops += 1;
        Ok(())
    }
}

/// Centers raw rewards by a running mean, then clips to the radius.
///
/// The mean used for centering is the mean of rewards seen *before* the
/// current one; the raw value is folded into the mean afterwards. Statistics
/// are global across episodes, not reset per episode.
#[derive(Debug, Clone)]
pub struct RewardNormalizer {
    mean: f64,
    count: u64,
    clip_radius: f64,
}

impl RewardNormalizer {
    pub fn new(clip_radius: f64) -> Result<Self, EwaError> {
        if !(clip_radius > 0.0 && clip_radius.is_finite()) {
            return Err(EwaError::InvalidParams(format!(
                "clip_radius must be positive and finite, got {clip_radius}"
            )));
        }
        Ok(Self { mean: 0.0, count: 0, clip_radius })
    }

    pub fn running_mean(&self) -> f64 {
        self.mean
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// `clip(raw - running_mean, [-R, R])`, then update the running mean
    /// with `raw`.
    pub fn normalize(&mut self, raw: f64) -> Result<f64, EwaError> {
        if !raw.is_finite() {
            return Err(EwaError::NonFiniteReward);
        }
        let centered = (raw - self.mean).clamp(-self.clip_radius, self.clip_radius);
        self.count += 1;
        self.mean += (raw - self.mean) / self.count as f64;
        Ok(centered)
    }
}

/// One reinforcement event: at timestep `t` (1-based), code `code` received
/// clipped reward `r_tilde`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EwaEvent {
    pub t: u64,
    pub code: usize,
    pub r_tilde: f64,
}

/// Closed form of the attraction of `code` after `t` steps, starting from
/// `a0`, given the full event history for timesteps `1..=t`.
///
/// Computed as the explicit geometric sum (one `powi` per matching event)
/// rather than by iterating the recursion, so it serves as an independent
/// oracle for [`AttractionTable::decay_reinforce`].
pub fn closed_form(
    events: &[EwaEvent],
    params: &EwaParams,
    code: usize,
    t: u64,
    a0: f64,
) -> Result<f64, EwaError> {
    params.validate()?;
    if events.len() as u64 != t {
        return Err(EwaError::IncompleteHistory(format!(
            "expected {} events covering timesteps 1..={}, got {}",
            t,
            t,
            events.len()
        )));
    }
    for (i, ev) in events.iter().enumerate() {
        if ev.t != i as u64 + 1 {
            return Err(EwaError::IncompleteHistory(format!(
                "event {} has timestep {}, expected {}",
                i,
                ev.t,
                i + 1
            )));
        }
        if !ev.r_tilde.is_finite() {
            return Err(EwaError::NonFiniteReward);
        }
    }
    let keep = 1.0 - params.phi;
    let mut a = a0 * keep.powi(t as i32);
    for ev in events {
        if ev.code == code {
            a += params.delta * ev.r_tilde * keep.powi((t - ev.t) as i32);
        }
    }
    Ok(a)
}

/// Uniform bound on |attraction|: `delta * R / phi`. Holds for all t whenever
/// the initial attraction starts within the bound and rewards stay clipped.
pub fn attraction_bound(params: &EwaParams) -> Result<f64, EwaError> {
    params.validate()?;
    Ok(params.delta * params.clip_radius / params.phi)
}

/// Steady-state mean attraction under i.i.d. reinforcement: the code is hit
/// with probability `p` per step and receives mean clipped reward `mu` when
/// hit, giving `lim E[A] = delta * p * mu / phi`.
pub fn steady_state_mean(params: &EwaParams, p: f64, mu: f64) -> Result<f64, EwaError> {
    params.validate()?;
    if !(0.0..=1.0).contains(&p) {
        return Err(EwaError::InvalidParams(format!("p must lie in [0, 1], got {p}")));
    }
    if !mu.is_finite() {
        return Err(EwaError::InvalidParams(format!("mu must be finite, got {mu}")));
    }
    Ok(params.delta * p * mu / params.phi)
}

/// One step of the canonical normalized attraction update (diagnostic only).
///
/// ```text
/// N(t)    = (1 - rho) * N(t-1) + 1
/// A_j(t)  = [ (1 - phi) * N(t-1) * A_j(t-1)
///             + (delta + (1 - delta) * [j == chosen]) * payoff_j ] / N(t)
/// ```
///
/// `payoffs[j]` is the payoff action `j` would have received this step
/// (realized for `chosen`, foregone for the rest). With `delta = 1` every
/// action receives full payoff weight regardless of `chosen`.
#[allow(clippy::too_many_arguments)]
pub fn canonical_ewa_step(
    attractions: &[f64],
    n_prev: f64,
    phi: f64,
    rho: f64,
    delta: f64,
    payoffs: &[f64],
    chosen: usize,
) -> Result<(Vec<f64>, f64), EwaError> {
    if !(0.0..1.0).contains(&phi) || !(0.0..1.0).contains(&rho) {
        return Err(EwaError::InvalidParams(format!(
            "phi and rho must lie in [0, 1), got phi={phi}, rho={rho}"
        )));
    }
    if !(0.0..=1.0).contains(&delta) {
        return Err(EwaError::InvalidParams(format!("delta must lie in [0, 1], got {delta}")));
    }
    if !(n_prev.is_finite() && n_prev >= 0.0) {
        return Err(EwaError::InvalidParams(format!(
            "experience weight must be non-negative and finite, got {n_prev}"
        )));
    }
    if attractions.len() != payoffs.len() {
        return Err(EwaError::LengthMismatch(format!(
            "{} attractions vs {} payoffs",
            attractions.len(),
            payoffs.len()
        )));
    }
    if chosen >= attractions.len() {
        return Err(EwaError::CodeOutOfRange { code: chosen, len: attractions.len() });
    }
    if payoffs.iter().any(|p| !p.is_finite()) {
        return Err(EwaError::NonFiniteReward);
    }
    let n_new = (1.0 - rho) * n_prev + 1.0;
    let mut out = Vec::with_capacity(attractions.len());
    for (j, (&a, &pi)) in attractions.iter().zip(payoffs).enumerate() {
        let weight = if j == chosen { delta + (1.0 - delta) } else { delta };
        out.push(((1.0 - phi) * n_prev * a + weight * pi) / n_new);
    }
    Ok((out, n_new))
}
