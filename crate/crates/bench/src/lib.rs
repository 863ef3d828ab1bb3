//! Shared fixtures for the kernel benchmarks: deterministic parameters,
//! windows, and routing tables at the default toy scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use attract::backbone::{BackboneConfig, OptimConfig, OptimState};
use attract::vq::{Codebook, GridTable};
use attract::{AttractionTable, EwaParams, PolicyParams, TrajectoryWindow};

/// Default 27-code routing table over `[-1, 1]^3`.
pub fn routing_table() -> GridTable {
    let codebook = Codebook::build(3, 27, 3).expect("3^3 grid is valid");
    GridTable::build(&codebook).expect("full grid builds")
}

/// Attraction memory with pseudo-random but bounded values.
pub fn warm_table(m: usize, seed: u64) -> AttractionTable {
    let params = EwaParams::default();
    let mut table = AttractionTable::new(m, params).expect("defaults are valid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..256 {
        let code = rng.gen_range(0..m);
        let r = rng.gen_range(-1.0..=1.0);
        table.decay_reinforce(code, r).expect("bounded rewards");
    }
    table
}

/// Policy at the default toy shape, deterministic in `seed`.
pub fn toy_policy(seed: u64) -> PolicyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PolicyParams::init(BackboneConfig::default(), 1.0, &mut rng).expect("default shape is valid")
}

/// A full (unpadded) random context window matching `cfg`.
pub fn toy_window(cfg: &BackboneConfig, seed: u64) -> TrajectoryWindow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.context_steps;
    TrajectoryWindow {
        rtg: (0..k).map(|_| rng.gen_range(-3.0..0.0)).collect(),
        states: (0..k)
            .map(|_| (0..cfg.state_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect(),
        actions: (0..k)
            .map(|_| (0..cfg.action_dim).map(|_| rng.gen_range(-0.95..0.95)).collect())
            .collect(),
        codes: (0..k).map(|_| rng.gen_range(0..27)).collect(),
        rewards: (0..k).map(|_| rng.gen_range(-1.0..0.0)).collect(),
        pad_steps: 0,
    }
}

/// Optimizer state sized for `params`.
pub fn toy_optimizer(params: &PolicyParams) -> OptimState {
    OptimState::new(OptimConfig::default(), params.n_params()).expect("defaults are valid")
}
