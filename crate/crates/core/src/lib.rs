//! Attraction-weighted action memory for an online decision-transformer toy loop.
//!
//! The crate is organized around five pieces:
//!
//! - [`ewa`] — per-action-code attraction values: an exponentially decayed,
//!   reward-reinforced memory over a discrete set of action codes, with the
//!   closed form, the uniform bound, and the steady-state mean exposed as
//!   executable oracles.
//! - [`vq`] — a uniform grid codebook over `[-1, 1]^d` and a precomputed
//!   cell → nearest-code routing table with an exact brute-force fallback and
//!   an on-disk cache.
//! - [`attention`] — attraction-derived, clipped additive biases on attention
//!   logits restricted to action-token columns, a numerically stable masked
//!   softmax, and the total-variation drift oracle for clipped biases.
//! - [`backbone`] — a small causal transformer over (return-to-go, state,
//!   action) token triplets with a diagonal Gaussian head, hand-derived
//!   reverse-mode gradients, an entropy-constrained objective, and a
//!   finite-difference gradient checker.
//! - [`harness`] — a deterministic point-mass environment, replay buffer,
//!   run configuration, metrics emission, and the online loop that ties
//!   collection, attraction updates, training, and evaluation together.
//!
//! [`verify`] packages the theory-oracle suites (closed form, bound, steady
//! state, softmax drift, routing equivalence, gradient check) so the CLI and
//! the acceptance tests share one set of tolerances.

mod hashutil;

pub mod attention;
pub mod backbone;
pub mod ewa;
pub mod harness;
pub mod verify;
pub mod vq;

pub use attention::{BiasConfig, TokenKind, TokenLayout};
pub use backbone::{BackboneConfig, PolicyParams, TrajectoryWindow};
pub use ewa::{AttractionTable, EwaParams, RewardNormalizer};
pub use harness::{BiasMode, RunConfig};
pub use vq::{Codebook, GridTable};
