//! Flat, validated run configuration.
//!
//! Every knob of a run lives in one flat key/value document (TOML syntax).
//! Unknown keys are rejected, every field has a documented default, and any
//! field can be overridden from the command line with `key=value` pairs.
//! The configuration hash fingerprints the fully resolved document so runs
//! and checkpoints can be matched up later.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::BiasConfig;
use crate::backbone::{Activation, BackboneConfig, OptimConfig};
use crate::ewa::EwaParams;
use crate::hashutil::fnv1a64;

use super::env::EnvConfig;
use super::HarnessError;

/// Everything a run needs, flat and serializable.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; all stream seeds are derived from it.
    pub seed: u64,

    // attraction memory
    /// Attraction decay per update.
    pub phi: f64,
    /// Reinforcement weight on the routed code.
    pub delta: f64,
    /// Normalized rewards are clipped to `[-reward_clip, reward_clip]`.
    pub reward_clip: f64,

    // attention bias
    /// Bias scale; 0 disables the bias path entirely.
    pub beta_bias: f64,
    /// Per-entry bias clip radius.
    pub eps_clip: f64,

    // codebook
    /// Requested codebook size M.
    pub codes: usize,
    /// Grid resolution per dimension; 0 picks it adaptively from `codes`.
    pub bins: u32,

    // dimensions and context
    /// Action dimension (the toy env's state has the same dimension).
    pub action_dim: usize,
    /// Context length K in steps.
    pub context_steps: usize,
    /// Return-to-go discount.
    pub gamma: f64,

    // backbone
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    /// MLP nonlinearity: "tanh" or "relu".
    pub activation: String,
    /// Learned positional embeddings on/off.
    pub use_positional: bool,
    /// Add the bias in every block (true) or only the first (false).
    pub bias_every_layer: bool,

    // optimization
    pub batch_size: usize,
    pub updates_per_iteration: usize,
    pub online_iterations: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    /// Ascent rate of the entropy constraint's dual variable.
    pub dual_lr: f64,
    /// Entropy floor.
    pub beta_entropy: f64,

    // evaluation
    pub eval_episodes: usize,
    /// Evaluate after every this-many online iterations.
    pub eval_every: usize,
    /// Return-to-go target used while collecting.
    pub online_rtg: f64,
    /// Return-to-go target used while evaluating (defaults keep the
    /// 2:1 online:eval magnitude ratio, scaled to the toy env's negative
    /// returns — less negative means more optimistic).
    pub eval_rtg: f64,

    // environment
    pub env_horizon: usize,
    pub env_step_size: f64,
    pub env_goal_radius: f64,
    pub env_goal_span: f64,

    // replay
    /// Replay capacity in trajectories.
    pub replay_capacity: usize,

    // paths
    /// Codebook cache directory; empty string means "use the
    /// ATTRACT_CACHE_DIR environment variable, else no cache".
    pub cache_dir: String,
    /// Where metrics and traces are written.
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            phi: 0.05,
            delta: 0.8,
            reward_clip: 1.0,
            beta_bias: 0.05,
            eps_clip: 0.1,
            codes: 27,
            bins: 3,
            action_dim: 3,
            context_steps: 4,
            gamma: 1.0,
            embed_dim: 8,
            n_layers: 1,
            n_heads: 2,
            mlp_hidden: 16,
            activation: "tanh".into(),
            use_positional: false,
            bias_every_layer: true,
            batch_size: 16,
            updates_per_iteration: 30,
            online_iterations: 10,
            lr: 1e-3,
            warmup_steps: 10,
            dual_lr: 1e-2,
            beta_entropy: 1.0,
            eval_episodes: 10,
            eval_every: 2,
            online_rtg: -2.0,
            eval_rtg: -1.0,
            env_horizon: 30,
            env_step_size: 0.1,
            env_goal_radius: 0.05,
            env_goal_span: 0.8,
            replay_capacity: 64,
            cache_dir: String::new(),
            output_dir: "out".into(),
        }
    }
}

impl RunConfig {
    /// Parses a flat TOML document; missing keys take defaults, unknown keys
    /// are errors.
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a config file.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Serializes the fully resolved config (field order is fixed, so the
    /// output is byte-stable).
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat struct of primitives always serializes")
    }

    /// FNV-1a hash of the resolved config document.
    pub fn config_hash(&self) -> u64 {
        fnv1a64(self.to_toml_string().as_bytes())
    }

    /// Applies one `key=value` override. The key must be an existing field;
    /// the value is parsed with TOML literal rules, falling back to a bare
    /// string (so `activation=relu` works without quotes).
    pub fn set_override(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let mut table = toml::Table::try_from(&*self)
            .map_err(|e| HarnessError::Config(format!("config reserialize: {e}")))?;
        if !table.contains_key(key) {
            return Err(HarnessError::Config(format!(
                "unknown config key '{key}'"
            )));
        }
        let parsed: toml::Value = match format!("v = {value}").parse::<toml::Table>() {
            Ok(t) => t["v"].clone(),
            Err(_) => toml::Value::String(value.to_string()),
        };
        table.insert(key.to_string(), parsed);
        *self = table
            .try_into()
            .map_err(|e| HarnessError::Config(format!("override '{key}={value}': {e}")))?;
        Ok(())
    }

    /// Cross-field validation; also exercises every derived sub-config.
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.ewa_params()
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if !self.beta_bias.is_finite() || self.beta_bias < 0.0 {
            return Err(HarnessError::Config(format!(
                "beta_bias must be finite and >= 0 (0 disables the bias), got {}",
                self.beta_bias
            )));
        }
        if self.beta_bias > 0.0 {
            // constructing the bias config validates eps_clip.
            BiasConfig::new(self.beta_bias, self.eps_clip)
                .map_err(|e| HarnessError::Config(e.to_string()))?;
        } else if !self.eps_clip.is_finite() || self.eps_clip <= 0.0 {
            return Err(HarnessError::Config(format!(
                "eps_clip must be finite and > 0, got {}",
                self.eps_clip
            )));
        }
        if self.codes == 0 {
            return Err(HarnessError::Config("codes must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(HarnessError::Config(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        self.backbone_config()
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.optim_config()
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.env_config().validate()?;
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("updates_per_iteration", self.updates_per_iteration),
            ("eval_episodes", self.eval_episodes),
            ("eval_every", self.eval_every),
            ("replay_capacity", self.replay_capacity),
        ] {
            if v == 0 {
                return Err(HarnessError::Config(format!("{name} must be >= 1")));
            }
        }
        for (name, v) in [
            ("online_rtg", self.online_rtg),
            ("eval_rtg", self.eval_rtg),
            ("beta_entropy", self.beta_entropy),
        ] {
            if !v.is_finite() {
                return Err(HarnessError::Config(format!(
                    "{name} must be finite, got {v}"
                )));
            }
        }
        if self.output_dir.is_empty() {
            return Err(HarnessError::Config("output_dir must not be empty".into()));
        }
        Ok(())
    }

    pub fn ewa_params(&self) -> EwaParams {
        EwaParams {
            phi: self.phi,
            delta: self.delta,
            clip_radius: self.reward_clip,
        }
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            dim: self.action_dim,
            horizon: self.env_horizon,
            step_size: self.env_step_size,
            goal_radius: self.env_goal_radius,
            goal_span: self.env_goal_span,
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            state_dim: self.action_dim,
            action_dim: self.action_dim,
            embed_dim: self.embed_dim,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            mlp_hidden: self.mlp_hidden,
            context_steps: self.context_steps,
            use_positional: self.use_positional,
            activation: if self.activation == "relu" {
                Activation::Relu
            } else {
                Activation::Tanh
            },
            bias_every_layer: self.bias_every_layer,
            ..BackboneConfig::default()
        }
    }

    pub fn optim_config(&self) -> OptimConfig {
        OptimConfig {
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            dual_lr: self.dual_lr,
            ..OptimConfig::default()
        }
    }

    /// Bias settings, or `None` when `beta_bias` is zero.
    pub fn bias_config(&self) -> Option<BiasConfig> {
        if self.beta_bias > 0.0 {
            Some(BiasConfig {
                beta_bias: self.beta_bias,
                eps_clip: self.eps_clip,
                per_head_scale: None,
            })
        } else {
            None
        }
    }

    /// Requested grid resolution as the routing builder wants it.
    pub fn bins_request(&self) -> Option<u32> {
        if self.bins == 0 {
            None
        } else {
            Some(self.bins)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.config_hash(), back.config_hash());
    }

    #[test]
    fn activation_string_must_be_known() {
        let mut cfg = RunConfig::default();
        cfg.activation = "relu".into();
        assert_eq!(cfg.backbone_config().activation, Activation::Relu);
        cfg.activation = "tanh".into();
        assert_eq!(cfg.backbone_config().activation, Activation::Tanh);
    }

    #[test]
    fn partial_documents_fill_defaults_and_unknown_keys_fail() {
        let cfg = RunConfig::from_toml_str("seed = 7\nbeta_bias = 0.0\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.beta_bias, 0.0);
        assert_eq!(cfg.phi, 0.05);
        assert!(RunConfig::from_toml_str("sneaky_knob = 1\n").is_err());
        assert!(RunConfig::from_toml_str("phi = \"high\"\n").is_err());
    }

    #[test]
    fn overrides_change_single_fields_with_type_checking() {
        let mut cfg = RunConfig::default();
        cfg.set_override("online_iterations", "3").unwrap();
        assert_eq!(cfg.online_iterations, 3);
        cfg.set_override("beta_bias", "0.0").unwrap();
        assert_eq!(cfg.beta_bias, 0.0);
        cfg.set_override("activation", "relu").unwrap();
        assert_eq!(cfg.activation, "relu");
        cfg.set_override("output_dir", "\"elsewhere\"").unwrap();
        assert_eq!(cfg.output_dir, "elsewhere");
        assert!(cfg.set_override("not_a_key", "1").is_err());
        assert!(cfg.set_override("seed", "not_a_number").is_err());
    }

    #[test]
    fn validation_rejects_out_of_range_values() {
        for (key, value) in [
            ("phi", "0.0"),
            ("phi", "1.5"),
            ("delta", "0.0"),
            ("beta_bias", "-0.1"),
            ("eps_clip", "0.0"),
            ("gamma", "0.0"),
            ("gamma", "1.1"),
            ("codes", "0"),
            ("batch_size", "0"),
            ("eval_every", "0"),
            ("embed_dim", "9"),
            ("env_horizon", "0"),
            ("replay_capacity", "0"),
            ("online_rtg", "inf"),
        ] {
            let mut cfg = RunConfig::default();
            cfg.set_override(key, value).unwrap();
            assert!(cfg.validate().is_err(), "{key}={value} should fail");
        }
        // beta_bias = 0 is the documented off switch, not an error.
        let mut cfg = RunConfig::default();
        cfg.set_override("beta_bias", "0.0").unwrap();
        cfg.validate().unwrap();
        assert!(cfg.bias_config().is_none());
    }

    #[test]
    fn hash_tracks_content_not_identity() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.config_hash(), b.config_hash());
        b.set_override("seed", "1").unwrap();
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn derived_configs_carry_the_right_fields() {
        let cfg = RunConfig::default();
        let ewa = cfg.ewa_params();
        assert_eq!((ewa.phi, ewa.delta, ewa.clip_radius), (0.05, 0.8, 1.0));
        let env = cfg.env_config();
        assert_eq!(env.dim, 3);
        let bb = cfg.backbone_config();
        assert_eq!(bb.state_dim, 3);
        assert_eq!(bb.context_steps, 4);
        let bias = cfg.bias_config().unwrap();
        assert_eq!(bias.beta_bias, 0.05);
        assert_eq!(bias.eps_clip, 0.1);
        assert_eq!(cfg.bins_request(), Some(3));
        let mut adaptive = cfg;
        adaptive.bins = 0;
        assert_eq!(adaptive.bins_request(), None);
    }
}
