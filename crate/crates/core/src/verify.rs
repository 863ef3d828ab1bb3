//! Executable verification suites for the crate's mathematical claims.
//!
//! Each suite checks one claim at full scale with frozen seeds and a stated
//! tolerance, and returns a [`CheckReport`] instead of panicking, so the CLI
//! `check` command and the acceptance tests share the exact same oracles.
//! All tolerances live in [`tolerances`]; nothing else in the crate hardcodes
//! its own.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{drift_bound, softmax, tv_distance, worst_case_drift};
use crate::backbone::{grad_check, BackboneConfig, PolicyParams, TrajectoryWindow};
use crate::ewa::{
    attraction_bound, closed_form, steady_state_mean, AttractionTable, EwaEvent, EwaParams,
};
use crate::vq::{brute_force_nearest, Codebook, GridTable};

/// Every numeric tolerance and time budget used by the verification suites.
pub mod tolerances {
    use std::time::Duration;

    /// Max per-code deviation between the sequential attraction recursion
    /// and the closed-form geometric sum.
    pub const CLOSED_FORM_ABS: f64 = 1e-10;
    /// Wall-clock budget for the closed-form sweep.
    pub const CLOSED_FORM_BUDGET: Duration = Duration::from_secs(5);
    /// Relative tolerance on the simulated long-run mean attraction.
    pub const STEADY_STATE_REL: f64 = 0.02;
    /// Wall-clock budget for the steady-state simulation.
    pub const STEADY_STATE_BUDGET: Duration = Duration::from_secs(10);
    /// Additive slack on the total-variation drift bound (accumulated
    /// round-off of the softmax and TV computations).
    pub const DRIFT_SLACK: f64 = 1e-12;
    /// Max deviation of the constructed worst-case drift from the bound.
    pub const WORST_CASE_ABS: f64 = 1e-9;
    /// Max relative error between analytic and finite-difference gradients.
    pub const GRAD_REL: f64 = 1e-4;
}

/// Outcome of one verification suite.
#[derive(Debug, Clone)]
pub struct CheckReport {
    /// Stable suite name (used by the CLI and the acceptance tests).
    pub name: &'static str,
    pub passed: bool,
    /// Human-readable summary: observed extremes vs. the tolerance.
    pub detail: String,
    pub elapsed: Duration,
}

impl CheckReport {
    fn finish(name: &'static str, passed: bool, detail: String, start: Instant) -> Self {
        Self { name, passed, detail, elapsed: start.elapsed() }
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}: {} [{} ms]",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.elapsed.as_millis()
        )
    }
}

/// The attraction recursion must match its closed-form geometric sum to
/// [`tolerances::CLOSED_FORM_ABS`] on every code, across `histories` random
/// event streams of `steps` steps each, within the stated time budget.
pub fn check_closed_form(histories: usize, steps: u64, codes: usize, seed: u64) -> CheckReport {
    let start = Instant::now();
    let params = EwaParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;

    for _ in 0..histories {
        let mut table = match AttractionTable::new(codes, params) {
            Ok(t) => t,
            Err(e) => return CheckReport::finish("attraction_closed_form", false, e.to_string(), start),
        };
        let mut events = Vec::with_capacity(steps as usize);
        for t in 1..=steps {
            let code = rng.gen_range(0..codes);
            let r_tilde = rng.gen_range(-params.clip_radius..=params.clip_radius);
            if let Err(e) = table.decay_reinforce(code, r_tilde) {
                return CheckReport::finish("attraction_closed_form", false, e.to_string(), start);
            }
            events.push(EwaEvent { t, code, r_tilde });
        }
        for code in 0..codes {
            let expected = match closed_form(&events, &params, code, steps, 0.0) {
                Ok(v) => v,
                Err(e) => {
                    return CheckReport::finish("attraction_closed_form", false, e.to_string(), start)
                }
            };
            let got = table.values()[code];
            worst = worst.max((got - expected).abs());
        }
    }

    let within_budget = start.elapsed() <= tolerances::CLOSED_FORM_BUDGET;
    let passed = worst <= tolerances::CLOSED_FORM_ABS && within_budget;
    CheckReport::finish(
        "attraction_closed_form",
        passed,
        format!(
            "max |recursion - closed form| = {worst:.3e} over {histories} histories x {steps} steps \
             (tol {:.0e}{})",
            tolerances::CLOSED_FORM_ABS,
            if within_budget { "" } else { "; TIME BUDGET EXCEEDED" },
        ),
        start,
    )
}

/// The attraction magnitude must never exceed `delta * R / phi` (16 with the
/// default parameters), neither under an adversarial constant-reinforcement
/// stream nor under random streams, checked after every single update.
pub fn check_attraction_bound(steps: u64, seed: u64) -> CheckReport {
    let start = Instant::now();
    let params = EwaParams::default();
    let bound = match attraction_bound(&params) {
        Ok(b) => b,
        Err(e) => return CheckReport::finish("attraction_bound", false, e.to_string(), start),
    };
    let codes = 27;
    let mut max_abs: f64 = 0.0;

    // worst case: the same code reinforced with the max clipped reward forever
    let mut table = AttractionTable::new(codes, params).expect("default params are valid");
    for _ in 0..steps {
        table.decay_reinforce(0, params.clip_radius).expect("valid update");
        max_abs = max_abs.max(table.values()[0].abs());
    }
    // random streams, both reward signs
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = AttractionTable::new(codes, params).expect("default params are valid");
    for _ in 0..steps {
        let code = rng.gen_range(0..codes);
        let r = rng.gen_range(-params.clip_radius..=params.clip_radius);
        table.decay_reinforce(code, r).expect("valid update");
        max_abs = max_abs.max(table.values()[code].abs());
    }

    let passed = max_abs <= bound;
    CheckReport::finish(
        "attraction_bound",
        passed,
        format!("max |attraction| = {max_abs:.12} over {steps}-step streams, bound {bound}"),
        start,
    )
}

/// Under i.i.d. reinforcement (the code hit with probability `p = 0.5`,
/// clipped reward `mu = 0.4` per hit), the long-run average attraction must
/// land within [`tolerances::STEADY_STATE_REL`] of `delta * p * mu / phi =
/// 3.2`, within the stated time budget.
pub fn check_steady_state(steps: u64, seed: u64) -> CheckReport {
    let start = Instant::now();
    let params = EwaParams::default();
    let (p, mu) = (0.5, 0.4);
    let expected = match steady_state_mean(&params, p, mu) {
        Ok(v) => v,
        Err(e) => return CheckReport::finish("attraction_steady_state", false, e.to_string(), start),
    };

    let codes = 27;
    let mut table = AttractionTable::new(codes, params).expect("default params are valid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // discard the mixing transient (time constant 1/phi = 20 steps)
    let warmup = (steps / 10).max(1);
    let mut sum = 0.0;
    let mut n = 0u64;
    for t in 0..steps {
        let hit = rng.gen_bool(p);
        // a miss reinforces some other code so the target code only decays
        let (code, r) = if hit { (0, mu) } else { (1 + rng.gen_range(0..codes - 1), 0.0) };
        table.decay_reinforce(code, r).expect("valid update");
        if t >= warmup {
            sum += table.values()[0];
            n += 1;
        }
    }
    let average = sum / n as f64;
    let rel = (average - expected).abs() / expected.abs();

    let within_budget = start.elapsed() <= tolerances::STEADY_STATE_BUDGET;
    let passed = rel <= tolerances::STEADY_STATE_REL && within_budget;
    CheckReport::finish(
        "attraction_steady_state",
        passed,
        format!(
            "long-run mean = {average:.4} vs expected {expected} (rel err {rel:.4}, tol {}{})",
            tolerances::STEADY_STATE_REL,
            if within_budget { "" } else { "; TIME BUDGET EXCEEDED" },
        ),
        start,
    )
}

/// Softmax drift under clipped biases: for each clip radius, over random
/// logit/bias pairs (bias bounded by the radius, half the pairs touching the
/// boundary), `TV(softmax(z), softmax(z + b))` must stay within
/// `tanh(radius)` plus [`tolerances::DRIFT_SLACK`], and the constructed
/// worst case must achieve the bound to [`tolerances::WORST_CASE_ABS`].
pub fn check_softmax_drift(pairs_per_eps: usize, seed: u64) -> CheckReport {
    let start = Instant::now();
    let eps_grid = [0.01, 0.05, 0.1, 0.5];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_violation = f64::NEG_INFINITY;
    let mut worst_gap = 0.0f64;

    for &eps in &eps_grid {
        let bound = drift_bound(eps);
        for pair in 0..pairs_per_eps {
            let n = rng.gen_range(2..=64);
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let mut bias: Vec<f64> = (0..n).map(|_| rng.gen_range(-eps..=eps)).collect();
            if pair % 2 == 0 {
                // push the largest entry onto the boundary so the sup side
                // of the constraint is exercised, not just the interior
                let max_abs = bias.iter().fold(0.0f64, |m, b| m.max(b.abs()));
                if max_abs > 0.0 {
                    for b in &mut bias {
                        *b *= eps / max_abs;
                    }
                }
            }
            let p = softmax(&logits);
            let shifted: Vec<f64> = logits.iter().zip(&bias).map(|(z, b)| z + b).collect();
            let q = softmax(&shifted);
            let tv = match tv_distance(&p, &q) {
                Ok(v) => v,
                Err(e) => return CheckReport::finish("softmax_drift", false, e.to_string(), start),
            };
            worst_violation = worst_violation.max(tv - bound);
        }
        for n in [2usize, 3, 64] {
            match worst_case_drift(eps, n) {
                Ok(w) => worst_gap = worst_gap.max((w.achieved_tv - bound).abs()),
                Err(e) => return CheckReport::finish("softmax_drift", false, e.to_string(), start),
            }
        }
    }

    let passed =
        worst_violation <= tolerances::DRIFT_SLACK && worst_gap <= tolerances::WORST_CASE_ABS;
    CheckReport::finish(
        "softmax_drift",
        passed,
        format!(
            "max (TV - tanh(eps)) = {worst_violation:.3e} over {pairs_per_eps} pairs per radius \
             (slack {:.0e}); worst-case gap = {worst_gap:.3e} (tol {:.0e})",
            tolerances::DRIFT_SLACK,
            tolerances::WORST_CASE_ABS,
        ),
        start,
    )
}

/// Grid routing must agree exactly with brute-force nearest-code search: on
/// every cell center of the full 3x3x3 book (where the table is the identity),
/// and on `random_probes` random actions including component-boundary cases.
pub fn check_routing(random_probes: usize, seed: u64) -> CheckReport {
    let start = Instant::now();
    let (d, b, m) = (3usize, 3u32, 27usize);
    let codebook = match Codebook::build(d, m, b) {
        Ok(c) => c,
        Err(e) => return CheckReport::finish("routing_equivalence", false, e.to_string(), start),
    };
    let table = match GridTable::build(&codebook) {
        Ok(t) => t,
        Err(e) => return CheckReport::finish("routing_equivalence", false, e.to_string(), start),
    };

    let mut mismatches = 0usize;
    // the full book covers every cell, so the table must be the identity
    for (cell, &entry) in table.entries().iter().enumerate() {
        if entry as usize != cell {
            mismatches += 1;
        }
    }
    // each code's own coordinates must route back to it
    for i in 0..m {
        match table.route(codebook.code(i)) {
            Ok(r) if r == i => {}
            _ => mismatches += 1,
        }
    }
    // random probes, exact agreement with brute force
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for probe in 0..random_probes {
        let a: Vec<f64> = (0..d)
            .map(|_| {
                if probe % 7 == 0 {
                    // exercise cell-boundary and range-extreme components
                    *[-1.0, -0.5, 0.0, 0.5, 1.0].get(rng.gen_range(0..5)).unwrap()
                } else {
                    rng.gen_range(-1.0..=1.0)
                }
            })
            .collect();
        let routed = table.route(&a);
        let brute = brute_force_nearest(&codebook, &a);
        match (routed, brute) {
            (Ok(r), Ok(bf)) if r == bf => {}
            _ => mismatches += 1,
        }
    }

    let passed = mismatches == 0 && table.fallback_count() == 0;
    CheckReport::finish(
        "routing_equivalence",
        passed,
        format!(
            "{mismatches} mismatches over {m} centers + identity table + {random_probes} probes \
             ({} brute-force fallbacks)",
            table.fallback_count()
        ),
        start,
    )
}

fn grad_window(cfg: &BackboneConfig, pad: usize, rng: &mut ChaCha8Rng) -> TrajectoryWindow {
    let k = cfg.context_steps;
    let mut w = TrajectoryWindow {
        rtg: vec![0.0; k],
        states: vec![vec![0.0; cfg.state_dim]; k],
        actions: vec![vec![0.0; cfg.action_dim]; k],
        codes: vec![0; k],
        rewards: vec![0.0; k],
        pad_steps: pad,
    };
    for t in pad..k {
        w.rtg[t] = rng.gen_range(-3.0..0.0);
        w.states[t] = (0..cfg.state_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        w.actions[t] = (0..cfg.action_dim).map(|_| rng.gen_range(-0.95..0.95)).collect();
        w.codes[t] = rng.gen_range(0..8);
        w.rewards[t] = rng.gen_range(-1.0..0.0);
    }
    w
}

/// The hand-derived reverse-mode gradient of the entropy-constrained
/// objective must match central finite differences to
/// [`tolerances::GRAD_REL`] on the default toy network, across `seeds`
/// random parameter draws and batches (padded windows included).
pub fn check_gradients(seeds: &[u64]) -> CheckReport {
    let start = Instant::now();
    let cfg = BackboneConfig::default();
    let mut worst: f64 = 0.0;

    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = match PolicyParams::init(cfg.clone(), 1.0, &mut rng) {
            Ok(p) => p,
            Err(e) => return CheckReport::finish("gradient_check", false, e.to_string(), start),
        };
        params.lambda = 0.3; // exercise the dual term of the objective
        let batch = vec![
            grad_window(&cfg, 0, &mut rng),
            grad_window(&cfg, 2, &mut rng),
            grad_window(&cfg, 0, &mut rng),
        ];
        match grad_check(&params, &batch, None) {
            Ok(rel) => worst = worst.max(rel),
            Err(e) => return CheckReport::finish("gradient_check", false, e.to_string(), start),
        }
    }

    let passed = worst <= tolerances::GRAD_REL;
    CheckReport::finish(
        "gradient_check",
        passed,
        format!(
            "max relative error = {worst:.3e} over {} seeds (tol {:.0e})",
            seeds.len(),
            tolerances::GRAD_REL
        ),
        start,
    )
}

/// Runs every suite at its full stated scale with frozen seeds.
pub fn run_all() -> Vec<CheckReport> {
    vec![
        check_closed_form(100, 10_000, 27, 0xC0DE),
        check_attraction_bound(100_000, 0xB0BB),
        check_steady_state(100_000, 0x57EA),
        check_softmax_drift(10_000, 0xD217),
        check_routing(10_000, 0x8071),
        check_gradients(&[0, 1, 2, 3, 4]),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_suite_passes_at_reduced_scale() {
        let r = check_closed_form(10, 1_000, 9, 7);
        assert!(r.passed, "{r}");
    }

    #[test]
    fn bound_suite_passes_at_reduced_scale() {
        let r = check_attraction_bound(10_000, 7);
        assert!(r.passed, "{r}");
    }

    #[test]
    fn steady_state_suite_passes_at_full_scale() {
        // full scale: the statistical tolerance needs the long horizon
        let r = check_steady_state(100_000, 0x57EA);
        assert!(r.passed, "{r}");
    }

    #[test]
    fn drift_suite_passes_at_reduced_scale() {
        let r = check_softmax_drift(300, 7);
        assert!(r.passed, "{r}");
    }

    #[test]
    fn routing_suite_passes_at_reduced_scale() {
        let r = check_routing(1_000, 7);
        assert!(r.passed, "{r}");
    }

    #[test]
    fn gradient_suite_passes_with_two_seeds() {
        let r = check_gradients(&[5, 6]);
        assert!(r.passed, "{r}");
    }

    #[test]
    fn reports_render_with_status_name_and_timing() {
        let r = check_routing(10, 7);
        let line = r.to_string();
        assert!(line.starts_with("[PASS] routing_equivalence:"), "{line}");
        assert!(line.contains("ms]"), "{line}");
    }
}
