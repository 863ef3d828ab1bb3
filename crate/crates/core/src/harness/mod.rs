//! Online decision loop: collection with attraction updates, replay
//! training, deterministic evaluation, and metrics emission.
//!
//! One run is a sequence of iterations. Each iteration collects one episode
//! with the stochastic policy (updating the attraction memory at every env
//! step), pushes it into replay, takes a fixed number of gradient steps on
//! sampled context windows, and periodically evaluates the deterministic
//! policy on a fixed battery of seeded goals. Every random stream is derived
//! from the master seed with a salt, so runs are reproducible byte-for-byte.

pub mod config;
pub mod env;
pub mod metrics;
pub mod replay;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::attention::BiasConfig;
use crate::backbone::{
    forward, return_to_go, train_step, BackboneError, OptimState, PolicyParams, TrajectoryWindow,
};
use crate::ewa::{AttractionTable, EwaError, RewardNormalizer};
use crate::vq::{build_table_cached, choose_bins, CacheOutcome, Codebook, GridTable, VqError};

pub use config::RunConfig;
pub use env::{EnvConfig, StepOutcome, ToyEnv};
pub use metrics::{shifted_geometric_mean, shifted_geometric_std, MetricsRow, MetricsSeries};
pub use replay::{render_trace_csv, ReplayBuffer, TraceRow, Trajectory};

/// Errors from configuration, the environment, replay, and the loop itself.
#[derive(Debug, Error)]
pub enum HarnessError {
    /// A configuration value or shape is invalid.
    #[error("config error: {0}")]
    Config(String),
    /// `step` was called on a finished episode.
    #[error("episode already finished")]
    StepAfterDone,
    /// A window was requested from an empty replay buffer.
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error(transparent)]
    Ewa(#[from] EwaError),
    #[error(transparent)]
    Vq(#[from] VqError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Fixed environment tag used in routing-table cache keys.
pub const ENV_TAG: &str = "point-goal";

/// Stream salts; every independent random stream of a run mixes one of
/// these (plus an index) into the master seed.
pub mod salts {
    /// Parameter initialization.
    pub const INIT: u64 = 1;
    /// Goal draws of collection episodes (indexed by iteration).
    pub const COLLECT_ENV: u64 = 2;
    /// Action sampling during collection.
    pub const POLICY: u64 = 3;
    /// Replay window sampling.
    pub const BATCH: u64 = 4;
    /// Goal draws of evaluation episodes (indexed by episode, *not* by
    /// iteration, so every evaluation sweep sees the same goal battery).
    pub const EVAL_ENV: u64 = 5;
}

/// Derives an independent stream seed from the master seed, a stream salt,
/// and an index. SplitMix64-style finalizer: distinct `(salt, index)` pairs
/// give well-separated streams even for adjacent master seeds.
pub fn stream_seed(master: u64, salt: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Whether a run applies the attraction bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasMode {
    /// Apply the bias when the build carries the bias path *and*
    /// `beta_bias > 0`; otherwise run unbiased.
    Auto,
    /// Run unbiased regardless of build features or config (the control
    /// arm for comparisons and timing).
    ForceOff,
}

#[cfg(feature = "attraction-bias")]
fn auto_bias(cfg: &RunConfig) -> Option<BiasConfig> {
    cfg.bias_config()
}

/// Without the `attraction-bias` feature the auto mode compiles to exactly
/// the [`BiasMode::ForceOff`] path: no bias config is ever constructed.
#[cfg(not(feature = "attraction-bias"))]
fn auto_bias(_cfg: &RunConfig) -> Option<BiasConfig> {
    None
}

/// Resolves a bias mode against the config and build features.
pub fn resolve_bias(cfg: &RunConfig, mode: BiasMode) -> Option<BiasConfig> {
    match mode {
        BiasMode::Auto => auto_bias(cfg),
        BiasMode::ForceOff => None,
    }
}

/// Builds the conditioning window for the next action: the most recent
/// `k - 1` completed steps (left-padded when fewer exist) followed by the
/// current `(return-to-go, state, placeholder-action)` slot. The placeholder
/// action token sits *after* the state position the prediction is read from,
/// so the causal mask keeps it invisible to that prediction.
#[allow(clippy::too_many_arguments)]
fn conditioning_window(
    k: usize,
    dim_s: usize,
    dim_a: usize,
    g_hist: &[f64],
    states: &[Vec<f64>],
    actions: &[Vec<f64>],
    codes: &[usize],
    rewards: &[f64],
    g_now: f64,
    state_now: &[f64],
) -> TrajectoryWindow {
    let h = states.len();
    let m = h.min(k - 1);
    let pad = k - m - 1;
    let mut window = TrajectoryWindow {
        rtg: vec![0.0; k],
        states: vec![vec![0.0; dim_s]; k],
        actions: vec![vec![0.0; dim_a]; k],
        codes: vec![0; k],
        rewards: vec![0.0; k],
        pad_steps: pad,
    };
    for i in 0..m {
        let src = h - m + i;
        let dst = pad + i;
        window.rtg[dst] = g_hist[src];
        window.states[dst] = states[src].clone();
        window.actions[dst] = actions[src].clone();
        window.codes[dst] = codes[src];
        window.rewards[dst] = rewards[src];
    }
    window.rtg[k - 1] = g_now;
    window.states[k - 1] = state_now.to_vec();
    window
}

/// Runs one stochastic-policy episode, updating the attraction memory at
/// every step, and returns the completed trajectory with relabeled
/// return-to-go values and the per-step attraction trace.
///
/// Per step: condition on the recent context and the running return-to-go
/// target, sample `a ~ N(mu, sigma^2)` per dimension, clip to `[-1, 1]`,
/// step the environment, route the clipped action to its code, normalize
/// the reward, and apply one decay-and-reinforce update. The target
/// decrements by the observed raw reward after each step.
#[allow(clippy::too_many_arguments)]
pub fn collect_trajectory(
    params: &PolicyParams,
    table: &mut AttractionTable,
    normalizer: &mut RewardNormalizer,
    grid: &GridTable,
    cfg: &RunConfig,
    env_seed: u64,
    policy_rng: &mut ChaCha8Rng,
    bias_cfg: Option<&BiasConfig>,
) -> Result<Trajectory, HarnessError> {
    let k = cfg.context_steps;
    let dim = cfg.action_dim;
    let mut env = ToyEnv::new(cfg.env_config(), env_seed)?;

    let mut states: Vec<Vec<f64>> = Vec::new();
    let mut actions: Vec<Vec<f64>> = Vec::new();
    let mut rewards: Vec<f64> = Vec::new();
    let mut codes: Vec<usize> = Vec::new();
    let mut g_hist: Vec<f64> = Vec::new();
    let mut trace: Vec<TraceRow> = Vec::new();
    let mut g = cfg.online_rtg;

    while !env.done() {
        let state = env.state();
        let window = conditioning_window(
            k, dim, dim, &g_hist, &states, &actions, &codes, &rewards, g, &state,
        );
        let fwd = forward(params, &[window], bias_cfg.map(|bc| (&*table, bc)))?;
        let mu = &fwd.mu[0][k - 1];
        let ls = &fwd.log_sigma[0][k - 1];
        let mut action: Vec<f64> = (0..dim)
            .map(|i| {
                let z: f64 = policy_rng.sample(StandardNormal);
                mu[i] + ls[i].exp() * z
            })
            .collect();
        for a in &mut action {
            *a = a.clamp(-1.0, 1.0);
        }

        let out = env.step(&action)?;
        let code = grid.route(&action)?;
        let r_tilde = normalizer.normalize(out.reward)?;
        table.decay_reinforce(code, r_tilde)?;

        trace.push(TraceRow {
            step: states.len(),
            action: action.clone(),
            reward_raw: out.reward,
            reward_normalized: r_tilde,
            code,
            attraction_after: table.get(code)?,
        });
        states.push(state);
        actions.push(action);
        rewards.push(out.reward);
        codes.push(code);
        g_hist.push(g);
        g -= out.reward;
    }

    let rtg = return_to_go(&rewards, cfg.gamma);
    let traj = Trajectory {
        states,
        actions,
        rewards,
        rtg,
        codes,
        trace,
        env_seed,
    };
    traj.validate()?;
    Ok(traj)
}

/// Evaluates the deterministic policy (`a = clip(mu, -1, 1)`) on the fixed
/// battery of `eval_episodes` seeded goals. The attraction table is read-only
/// here: evaluation never updates the memory or the reward statistics.
/// Returns the episode returns and lengths.
pub fn evaluate(
    params: &PolicyParams,
    table: &AttractionTable,
    grid: &GridTable,
    cfg: &RunConfig,
    bias_cfg: Option<&BiasConfig>,
) -> Result<(Vec<f64>, Vec<usize>), HarnessError> {
    let k = cfg.context_steps;
    let dim = cfg.action_dim;
    let mut returns = Vec::with_capacity(cfg.eval_episodes);
    let mut lengths = Vec::with_capacity(cfg.eval_episodes);

    for ep in 0..cfg.eval_episodes {
        let seed = stream_seed(cfg.seed, salts::EVAL_ENV, ep as u64);
        let mut env = ToyEnv::new(cfg.env_config(), seed)?;
        let mut states: Vec<Vec<f64>> = Vec::new();
        let mut actions: Vec<Vec<f64>> = Vec::new();
        let mut rewards: Vec<f64> = Vec::new();
        let mut codes: Vec<usize> = Vec::new();
        let mut g_hist: Vec<f64> = Vec::new();
        let mut g = cfg.eval_rtg;

        while !env.done() {
            let state = env.state();
            let window = conditioning_window(
                k, dim, dim, &g_hist, &states, &actions, &codes, &rewards, g, &state,
            );
            let fwd = forward(params, &[window], bias_cfg.map(|bc| (table, bc)))?;
            let action: Vec<f64> = fwd.mu[0][k - 1].iter().map(|m| m.clamp(-1.0, 1.0)).collect();
            let out = env.step(&action)?;
            let code = grid.route(&action)?;
            states.push(state);
            actions.push(action);
            rewards.push(out.reward);
            codes.push(code);
            g_hist.push(g);
            g -= out.reward;
        }
        returns.push(rewards.iter().sum());
        lengths.push(env.steps_taken());
    }
    Ok((returns, lengths))
}

/// Everything a finished run hands back for inspection.
#[derive(Debug)]
pub struct RunOutcome {
    /// All evaluation rows, in order.
    pub series: MetricsSeries,
    /// Final attraction memory (op counters included).
    pub table: AttractionTable,
    /// Final policy parameters.
    pub params: PolicyParams,
    /// Total environment steps consumed by collection.
    pub env_steps: u64,
    /// Number of episodes collected.
    pub episodes: usize,
    /// How the routing table was obtained (cache hit/miss/disabled).
    pub cache: CacheOutcome,
    /// Where `metrics.csv` was written.
    pub metrics_path: PathBuf,
}

/// Runs the full online loop described by `cfg` and writes `metrics.csv`
/// under the configured output directory.
///
/// Structure: an evaluation row at step 0, then per iteration one collected
/// episode followed by `updates_per_iteration` gradient steps; after every
/// `eval_every`-th iteration another evaluation row is recorded, whose
/// `aug_traj/*` columns average the episodes collected since the previous
/// row. The `step` column counts cumulative environment steps.
pub fn online_loop(cfg: &RunConfig, mode: BiasMode) -> Result<RunOutcome, HarnessError> {
    cfg.validate()?;
    let bias = resolve_bias(cfg, mode);
    let bias_ref = bias.as_ref();

    let (bins, m) = choose_bins(cfg.action_dim, cfg.codes, cfg.bins_request())?;
    let codebook = Codebook::build(cfg.action_dim, m, bins)?;
    let explicit_dir = (!cfg.cache_dir.is_empty()).then(|| PathBuf::from(&cfg.cache_dir));
    let cache_dir = crate::vq::resolve_cache_dir(explicit_dir.as_deref());
    let (grid, cache) = build_table_cached(&codebook, ENV_TAG, cache_dir.as_deref())?;

    let mut table = AttractionTable::new(m, cfg.ewa_params())?;
    let mut normalizer = RewardNormalizer::new(cfg.reward_clip)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, salts::INIT, 0));
    let mut params = PolicyParams::init(cfg.backbone_config(), cfg.beta_entropy, &mut init_rng)?;
    let mut opt = OptimState::new(cfg.optim_config(), params.n_params())?;
    let mut replay = ReplayBuffer::new(cfg.replay_capacity)?;
    let mut policy_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, salts::POLICY, 0));
    let mut batch_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, salts::BATCH, 0));

    let mut series = MetricsSeries::new();
    let (returns, lengths) = evaluate(&params, &table, &grid, cfg, bias_ref)?;
    series.push(MetricsRow::from_eval(0, cfg.seed, &returns, &lengths, None));

    let mut env_steps: u64 = 0;
    let mut episodes = 0usize;
    let mut aug_returns: Vec<f64> = Vec::new();
    let mut aug_lengths: Vec<f64> = Vec::new();

    for iter in 0..cfg.online_iterations {
        let traj = collect_trajectory(
            &params,
            &mut table,
            &mut normalizer,
            &grid,
            cfg,
            stream_seed(cfg.seed, salts::COLLECT_ENV, iter as u64),
            &mut policy_rng,
            bias_ref,
        )?;
        env_steps += traj.len() as u64;
        episodes += 1;
        aug_returns.push(traj.total_return());
        aug_lengths.push(traj.len() as f64);
        replay.push(traj)?;

        for _ in 0..cfg.updates_per_iteration {
            let batch = replay.sample_batch(cfg.batch_size, cfg.context_steps, &mut batch_rng)?;
            train_step(&mut params, &batch, bias_ref.map(|bc| (&table, bc)), &mut opt)?;
        }

        if (iter + 1) % cfg.eval_every == 0 {
            let (returns, lengths) = evaluate(&params, &table, &grid, cfg, bias_ref)?;
            let aug = Some((mean(&aug_returns), mean(&aug_lengths)));
            series.push(MetricsRow::from_eval(env_steps, cfg.seed, &returns, &lengths, aug));
            aug_returns.clear();
            aug_lengths.clear();
        }
    }

    let metrics_path = series.emit(Path::new(&cfg.output_dir))?;
    Ok(RunOutcome {
        series,
        table,
        params,
        env_steps,
        episodes,
        cache,
        metrics_path,
    })
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}
