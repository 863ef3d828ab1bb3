//! Small causal transformer over (return-to-go, state, action) token
//! triplets with a diagonal Gaussian action head.
//!
//! The network is deliberately minimal — linear token embeddings, a stack of
//! attention + MLP blocks with residual connections (no layer norm), and a
//! tanh-squashed mean / clamped log-σ head — because every gradient in this
//! crate is hand-derived reverse mode and validated against central finite
//! differences ([`grad_check`]). Parameters live in one flat `Vec<f64>` with
//! named ranges so the optimizer, the checkpoint format, and the gradient
//! checker all see the same storage.
//!
//! Action predictions for step `t` are read at the *state* token position of
//! step `t`, so with the causal mask they depend only on tokens up to and
//! including that state — never on the action being predicted.

mod checkpoint;
mod net;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use net::{backward, forward, ForwardPass};
pub use train::{
    entropy_term, gaussian_entropy, gaussian_nll, grad_check, lagrangian, loss_and_grad,
    nll_loss, train_step, OptimConfig, OptimState, StepDiagnostics,
};

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attention::{AttentionError, TokenLayout};

/// Errors from configuration, shape checking, forward/backward passes, and
/// checkpoint I/O.
#[derive(Debug, Error)]
pub enum BackboneError {
    /// A configuration value is outside its valid range.
    #[error("invalid backbone config: {0}")]
    InvalidConfig(String),
    /// An input's dimensions disagree with the configuration.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    /// The batch is empty where at least one window is required.
    #[error("empty batch")]
    EmptyBatch,
    /// An activation became non-finite inside the given block (0-based).
    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },
    /// A loss gradient became non-finite; parameters were left unchanged.
    #[error("non-finite gradient; parameters unchanged")]
    NonFiniteGradient,
    /// A Gaussian was queried with a non-positive or non-finite scale.
    #[error("invalid gaussian scale: {0}")]
    InvalidScale(String),
    /// Error bubbled up from bias construction or masked softmax.
    #[error(transparent)]
    Attention(#[from] AttentionError),
    /// Checkpoint file I/O failed.
    #[error("checkpoint i/o: {0}")]
    CheckpointIo(#[from] std::io::Error),
    /// Checkpoint bytes do not describe a loadable snapshot.
    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
}

/// Pointwise nonlinearity of the MLP blocks.
///
/// `Tanh` is the default: it is smooth, which keeps central finite
/// differences honest at `h = 1e-5`. `Relu` is available for structure
/// parity experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `x` and the stored
    /// post-activation `y = apply(x)`.
    pub(crate) fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Network shape and head behavior.
#[derive(Debug, Clone)]
pub struct BackboneConfig {
    /// State (observation) dimension.
    pub state_dim: usize,
    /// Action dimension.
    pub action_dim: usize,
    /// Token embedding width; must be divisible by `n_heads`.
    pub embed_dim: usize,
    /// Number of attention + MLP blocks. Zero is allowed and yields a pure
    /// embedding → head network (useful for exact-gradient baselines).
    pub n_layers: usize,
    /// Attention heads per block.
    pub n_heads: usize,
    /// Hidden width of each block's two-layer MLP.
    pub mlp_hidden: usize,
    /// Context length in steps; a window spans `3 * context_steps` tokens.
    pub context_steps: usize,
    /// Learned additive positional embeddings (off by default; the causal
    /// structure already distinguishes positions at toy scale).
    pub use_positional: bool,
    /// MLP nonlinearity.
    pub activation: Activation,
    /// Whether the attraction bias is added in every block (`true`) or only
    /// the first (`false`).
    pub bias_every_layer: bool,
    /// Standard deviation of the Gaussian weight init.
    pub init_std: f64,
    /// Lower clamp for the head's log-σ output.
    pub logsig_min: f64,
    /// Upper clamp for the head's log-σ output.
    pub logsig_max: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            state_dim: 2,
            action_dim: 2,
            embed_dim: 8,
            n_layers: 1,
            n_heads: 2,
            mlp_hidden: 16,
            context_steps: 4,
            use_positional: false,
            activation: Activation::Tanh,
            bias_every_layer: true,
            init_std: 0.02,
            logsig_min: -5.0,
            logsig_max: 2.0,
        }
    }
}

impl BackboneConfig {
    /// Checks internal consistency.
    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.state_dim == 0 || self.action_dim == 0 {
            return Err(BackboneError::InvalidConfig(
                "state_dim and action_dim must be >= 1".into(),
            ));
        }
        if self.embed_dim == 0 || self.n_heads == 0 || self.mlp_hidden == 0 {
            return Err(BackboneError::InvalidConfig(
                "embed_dim, n_heads, and mlp_hidden must be >= 1".into(),
            ));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(BackboneError::InvalidConfig(format!(
                "embed_dim {} must be divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.context_steps == 0 {
            return Err(BackboneError::InvalidConfig(
                "context_steps must be >= 1".into(),
            ));
        }
        if !self.init_std.is_finite() || self.init_std <= 0.0 {
            return Err(BackboneError::InvalidConfig(format!(
                "init_std must be finite and > 0, got {}",
                self.init_std
            )));
        }
        if !(self.logsig_min.is_finite() && self.logsig_max.is_finite())
            || self.logsig_min >= self.logsig_max
        {
            return Err(BackboneError::InvalidConfig(format!(
                "log-sigma clamp [{}, {}] must be a finite nonempty interval",
                self.logsig_min, self.logsig_max
            )));
        }
        Ok(())
    }

    /// Sequence length in tokens.
    pub fn seq_len(&self) -> usize {
        3 * self.context_steps
    }

    /// Per-head key/query width.
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }
}

/// Flat-storage ranges of one transformer block.
#[derive(Debug, Clone)]
pub(crate) struct LayerRanges {
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

/// Named ranges into the flat parameter vector.
///
/// All matrices are row-major `out_dim × in_dim`, applied as `y = W x + b`.
#[derive(Debug, Clone)]
pub(crate) struct ParamRanges {
    pub w_g: Range<usize>,
    pub b_g: Range<usize>,
    pub w_s: Range<usize>,
    pub b_s: Range<usize>,
    pub w_a: Range<usize>,
    pub b_a: Range<usize>,
    pub pos: Range<usize>,
    pub layers: Vec<LayerRanges>,
    pub w_mu: Range<usize>,
    pub b_mu: Range<usize>,
    pub w_sig: Range<usize>,
    pub b_sig: Range<usize>,
    pub total: usize,
}

impl ParamRanges {
    fn build(cfg: &BackboneConfig) -> Self {
        let e = cfg.embed_dim;
        let f = cfg.mlp_hidden;
        let mut cursor = 0usize;
        let mut take = |len: usize| {
            let r = cursor..cursor + len;
            cursor += len;
            r
        };
        let w_g = take(e);
        let b_g = take(e);
        let w_s = take(e * cfg.state_dim);
        let b_s = take(e);
        let w_a = take(e * cfg.action_dim);
        let b_a = take(e);
        let pos = if cfg.use_positional {
            take(cfg.seq_len() * e)
        } else {
            take(0)
        };
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerRanges {
                wq: take(e * e),
                wk: take(e * e),
                wv: take(e * e),
                wo: take(e * e),
                w1: take(f * e),
                b1: take(f),
                w2: take(e * f),
                b2: take(e),
            });
        }
        let w_mu = take(cfg.action_dim * e);
        let b_mu = take(cfg.action_dim);
        let w_sig = take(cfg.action_dim * e);
        let b_sig = take(cfg.action_dim);
        Self {
            w_g,
            b_g,
            w_s,
            b_s,
            w_a,
            b_a,
            pos,
            layers,
            w_mu,
            b_mu,
            w_sig,
            b_sig,
            total: cursor,
        }
    }
}

/// Policy parameters: the flat weight vector plus the entropy-constraint
/// state (`lambda`, `beta_entropy`) that the dual ascent updates.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    cfg: BackboneConfig,
    pub(crate) ranges: ParamRanges,
    pub(crate) theta: Vec<f64>,
    /// Dual variable of the entropy constraint; always >= 0.
    pub lambda: f64,
    /// Entropy floor the dual update enforces.
    pub beta_entropy: f64,
}

impl PolicyParams {
    /// Random initialization: weights ~ N(0, init_std²); biases zero except
    /// the log-σ head bias, which starts at -0.5 so initial actions are
    /// neither deterministic nor saturated.
    pub fn init(cfg: BackboneConfig, beta_entropy: f64, rng: &mut ChaCha8Rng) -> Result<Self, BackboneError> {
        cfg.validate()?;
        if !beta_entropy.is_finite() {
            return Err(BackboneError::InvalidConfig(format!(
                "beta_entropy must be finite, got {beta_entropy}"
            )));
        }
        let ranges = ParamRanges::build(&cfg);
        let mut theta = vec![0.0; ranges.total];
        let normal =
            rand_distr::Normal::new(0.0, cfg.init_std).expect("validated init_std is positive");
        let weight_ranges: Vec<Range<usize>> = {
            let mut v = vec![
                ranges.w_g.clone(),
                ranges.w_s.clone(),
                ranges.w_a.clone(),
                ranges.pos.clone(),
            ];
            for l in &ranges.layers {
                v.extend([
                    l.wq.clone(),
                    l.wk.clone(),
                    l.wv.clone(),
                    l.wo.clone(),
                    l.w1.clone(),
                    l.w2.clone(),
                ]);
            }
            v.extend([ranges.w_mu.clone(), ranges.w_sig.clone()]);
            v
        };
        for r in weight_ranges {
            for w in &mut theta[r] {
                *w = rng.sample(normal);
            }
        }
        for b in &mut theta[ranges.b_sig.clone()] {
            *b = -0.5;
        }
        Ok(Self {
            cfg,
            ranges,
            theta,
            lambda: 0.0,
            beta_entropy,
        })
    }

    /// Network shape.
    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Flat parameter vector.
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Mutable flat parameter vector (same layout as [`Self::theta`]).
    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    /// Number of scalar parameters.
    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub(crate) fn slice(&self, r: &Range<usize>) -> &[f64] {
        &self.theta[r.clone()]
    }
}

/// One replayable context window: `context_steps` steps of (return-to-go,
/// state, action, routed code, reward), left-padded with zeroed slots when
/// the episode prefix is shorter than the window.
#[derive(Debug, Clone)]
pub struct TrajectoryWindow {
    /// Return-to-go per step.
    pub rtg: Vec<f64>,
    /// State vectors, one per step.
    pub states: Vec<Vec<f64>>,
    /// Executed (clipped) actions, one per step.
    pub actions: Vec<Vec<f64>>,
    /// Routed code per step; entries in the padded prefix are ignored.
    pub codes: Vec<usize>,
    /// Raw rewards per step (kept for the return-to-go invariant and traces).
    pub rewards: Vec<f64>,
    /// Number of leading padding steps.
    pub pad_steps: usize,
}

impl TrajectoryWindow {
    /// Number of steps (padded + real).
    pub fn len(&self) -> usize {
        self.rtg.len()
    }

    /// True when the window has zero steps (never valid for training).
    pub fn is_empty(&self) -> bool {
        self.rtg.is_empty()
    }

    /// Number of non-padding steps.
    pub fn real_steps(&self) -> usize {
        self.len() - self.pad_steps
    }

    /// Checks the window against a network shape.
    pub fn validate(&self, cfg: &BackboneConfig) -> Result<(), BackboneError> {
        let k = self.len();
        if k != cfg.context_steps {
            return Err(BackboneError::DimensionMismatch(format!(
                "window has {k} steps, config wants {}",
                cfg.context_steps
            )));
        }
        if self.states.len() != k
            || self.actions.len() != k
            || self.codes.len() != k
            || self.rewards.len() != k
        {
            return Err(BackboneError::DimensionMismatch(
                "window field lengths disagree".into(),
            ));
        }
        if self.pad_steps >= k {
            return Err(BackboneError::DimensionMismatch(format!(
                "window needs at least one real step (pad_steps {} of {k})",
                self.pad_steps
            )));
        }
        for s in &self.states {
            if s.len() != cfg.state_dim {
                return Err(BackboneError::DimensionMismatch(format!(
                    "state has {} dims, config wants {}",
                    s.len(),
                    cfg.state_dim
                )));
            }
        }
        for a in &self.actions {
            if a.len() != cfg.action_dim {
                return Err(BackboneError::DimensionMismatch(format!(
                    "action has {} dims, config wants {}",
                    a.len(),
                    cfg.action_dim
                )));
            }
        }
        Ok(())
    }

    /// Token layout for this window (pads first, then real triplets).
    pub fn layout(&self) -> Result<TokenLayout, BackboneError> {
        Ok(TokenLayout::interleaved_with_pad(
            self.pad_steps,
            &self.codes[self.pad_steps..],
        )?)
    }
}

/// Suffix-discounted reward sums: `out[t] = sum_{k >= t} gamma^{k-t} r[k]`.
///
/// An empty input yields an empty output. `gamma` must lie in `(0, 1]`.
pub fn return_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    assert!(
        gamma > 0.0 && gamma <= 1.0,
        "return_to_go wants gamma in (0, 1], got {gamma}"
    );
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[i] = acc;
    }
    out
}

/// Embeds a window into its `3K × embed_dim` token sequence and reports the
/// matching layout. Padded slots embed zero inputs; the attention mask hides
/// their columns from every real row, so their values never reach real
/// predictions.
pub fn tokenize(
    params: &PolicyParams,
    window: &TrajectoryWindow,
) -> Result<(Vec<f64>, TokenLayout), BackboneError> {
    window.validate(params.config())?;
    let layout = window.layout()?;
    Ok((net::embed(params, window), layout))
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use rand::SeedableRng;

    /// Deterministic params for the default toy shape.
    pub fn toy_params(seed: u64) -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PolicyParams::init(BackboneConfig::default(), 1.0, &mut rng).unwrap()
    }

    /// A fully observed random window matching `cfg`.
    pub fn random_window(cfg: &BackboneConfig, seed: u64) -> TrajectoryWindow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = cfg.context_steps;
        let rewards: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        TrajectoryWindow {
            rtg: return_to_go(&rewards, 1.0),
            states: (0..k)
                .map(|_| (0..cfg.state_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
            actions: (0..k)
                .map(|_| (0..cfg.action_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
            codes: (0..k).map(|_| rng.gen_range(0..9)).collect(),
            rewards,
            pad_steps: 0,
        }
    }

    /// Same as [`random_window`] but with a padded prefix.
    pub fn padded_window(cfg: &BackboneConfig, pad: usize, seed: u64) -> TrajectoryWindow {
        let mut w = random_window(cfg, seed);
        w.pad_steps = pad;
        for t in 0..pad {
            w.rtg[t] = 0.0;
            w.rewards[t] = 0.0;
            w.states[t] = vec![0.0; cfg.state_dim];
            w.actions[t] = vec![0.0; cfg.action_dim];
            w.codes[t] = 0;
        }
        w
    }
}
