//! Objectives (action NLL, entropy constraint, Lagrangian), the optimizer,
//! and the finite-difference gradient checker.

use crate::attention::BiasConfig;
use crate::ewa::AttractionTable;

use super::net::{backward, forward, ForwardPass};
use super::{BackboneError, PolicyParams, TrajectoryWindow};

const LN_2PI: f64 = 1.8378770664093453;

/// Central-difference step for [`grad_check`].
const FD_STEP: f64 = 1e-5;
/// Relative-error denominator floor; keeps tiny-gradient comparisons from
/// amplifying finite-difference noise.
const FD_DENOM_FLOOR: f64 = 1e-3;
/// Largest network [`grad_check`] accepts (finite differences run two full
/// forwards per parameter).
const GRAD_CHECK_MAX_PARAMS: usize = 5_000;

/// Negative log-density of `action` under a diagonal Gaussian given as mean
/// and log standard deviation per dimension (summed over dimensions).
pub fn gaussian_nll(action: &[f64], mu: &[f64], log_sigma: &[f64]) -> Result<f64, BackboneError> {
    if action.len() != mu.len() || mu.len() != log_sigma.len() {
        return Err(BackboneError::DimensionMismatch(format!(
            "gaussian_nll lengths disagree: action {}, mu {}, log_sigma {}",
            action.len(),
            mu.len(),
            log_sigma.len()
        )));
    }
    let mut nll = 0.5 * action.len() as f64 * LN_2PI;
    for ((a, m), ls) in action.iter().zip(mu).zip(log_sigma) {
        if !ls.is_finite() {
            return Err(BackboneError::InvalidScale(format!(
                "log_sigma {ls} gives a degenerate (zero or non-finite) variance"
            )));
        }
        let z = (a - m) / ls.exp();
        nll += ls + 0.5 * z * z;
    }
    Ok(nll)
}

/// Closed-form entropy of a diagonal Gaussian with the given per-dimension
/// log standard deviations: `sum_k (0.5 + 0.5 ln(2 pi) + ls_k)`.
pub fn gaussian_entropy(log_sigma: &[f64]) -> f64 {
    log_sigma
        .iter()
        .map(|ls| 0.5 + 0.5 * LN_2PI + ls)
        .sum()
}

/// Mean closed-form policy entropy over non-padded steps.
pub fn entropy_term(fwd: &ForwardPass) -> f64 {
    let n = fwd.real_step_count();
    if n == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for (b, steps) in fwd.log_sigma.iter().enumerate() {
        for (t, ls) in steps.iter().enumerate() {
            if fwd.real[b][t] {
                sum += gaussian_entropy(ls);
            }
        }
    }
    sum / n as f64
}

/// Entropy-constrained objective: `J + lambda * (beta_entropy - H)`.
pub fn lagrangian(j: f64, h: f64, lambda: f64, beta_entropy: f64) -> f64 {
    debug_assert!(lambda >= 0.0, "dual variable must be nonnegative");
    j + lambda * (beta_entropy - h)
}

/// Mean action NLL over non-padded steps of the batch.
pub fn nll_loss(
    params: &PolicyParams,
    batch: &[TrajectoryWindow],
    bias: Option<(&AttractionTable, &BiasConfig)>,
) -> Result<f64, BackboneError> {
    let fwd = forward(params, batch, bias)?;
    nll_of(&fwd, batch)
}

fn nll_of(fwd: &ForwardPass, batch: &[TrajectoryWindow]) -> Result<f64, BackboneError> {
    let n = fwd.real_step_count();
    if n == 0 {
        return Err(BackboneError::EmptyBatch);
    }
    let mut sum = 0.0;
    for (b, window) in batch.iter().enumerate() {
        for t in 0..window.len() {
            if fwd.real[b][t] {
                sum += gaussian_nll(&window.actions[t], &fwd.mu[b][t], &fwd.log_sigma[b][t])?;
            }
        }
    }
    Ok(sum / n as f64)
}

/// Objective value, its components, and the full parameter gradient.
pub struct LossBundle {
    /// Lagrangian value `J + lambda * (beta_entropy - H)`.
    pub l: f64,
    /// Mean action NLL over real steps.
    pub j: f64,
    /// Mean closed-form entropy over real steps.
    pub h: f64,
    /// `d l / d theta`, same length as the flat parameter vector.
    pub grad: Vec<f64>,
}

/// Forward + loss + the hand-derived backward pass in one call.
pub fn loss_and_grad(
    params: &PolicyParams,
    batch: &[TrajectoryWindow],
    bias: Option<(&AttractionTable, &BiasConfig)>,
) -> Result<LossBundle, BackboneError> {
    let fwd = forward(params, batch, bias)?;
    let j = nll_of(&fwd, batch)?;
    let h = entropy_term(&fwd);
    let l = lagrangian(j, h, params.lambda, params.beta_entropy);
    let n = fwd.real_step_count() as f64;

    // d L / d mu and d L / d log_sigma per step; zero on padded steps.
    let mut d_mu = Vec::with_capacity(batch.len());
    let mut d_ls = Vec::with_capacity(batch.len());
    for (b, window) in batch.iter().enumerate() {
        let k = window.len();
        let da = params.config().action_dim;
        let mut dm = vec![vec![0.0; da]; k];
        let mut dl = vec![vec![0.0; da]; k];
        for t in 0..k {
            if !fwd.real[b][t] {
                continue;
            }
            for a in 0..da {
                let ls = fwd.log_sigma[b][t][a];
                let z = (window.actions[t][a] - fwd.mu[b][t][a]) / ls.exp();
                // J-part: d nll / d mu = -z / sigma, d nll / d ls = 1 - z^2.
                dm[t][a] = -z / ls.exp() / n;
                dl[t][a] = (1.0 - z * z) / n;
                // entropy part: d H / d ls = 1 / n, weighted by -lambda.
                dl[t][a] -= params.lambda / n;
            }
        }
        d_mu.push(dm);
        d_ls.push(dl);
    }
    let grad = backward(params, batch, &fwd, &d_mu, &d_ls);
    Ok(LossBundle { l, j, h, grad })
}

/// Scalar objective only (used by the finite-difference checker).
fn loss_value(
    params: &PolicyParams,
    batch: &[TrajectoryWindow],
    bias: Option<(&AttractionTable, &BiasConfig)>,
) -> Result<f64, BackboneError> {
    let fwd = forward(params, batch, bias)?;
    let j = nll_of(&fwd, batch)?;
    let h = entropy_term(&fwd);
    Ok(lagrangian(j, h, params.lambda, params.beta_entropy))
}

/// Gradient-descent settings. `warmup_steps > 0` scales the learning rate
/// linearly from `lr / warmup_steps` up to `lr`; with `use_moments` the
/// update is Adam, otherwise plain SGD.
#[derive(Debug, Clone)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub use_moments: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Ascent rate of the dual variable.
    pub dual_lr: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup_steps: 10,
            use_moments: true,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            dual_lr: 1e-2,
        }
    }
}

impl OptimConfig {
    /// Checks ranges; learning rates of exactly zero are allowed (they make
    /// the step a no-op, which tests rely on).
    pub fn validate(&self) -> Result<(), BackboneError> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(BackboneError::InvalidConfig(format!(
                "lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if !self.dual_lr.is_finite() || self.dual_lr < 0.0 {
            return Err(BackboneError::InvalidConfig(format!(
                "dual_lr must be finite and >= 0, got {}",
                self.dual_lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !b.is_finite() || !(0.0..1.0).contains(&b) {
                return Err(BackboneError::InvalidConfig(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if !self.eps.is_finite() || self.eps <= 0.0 {
            return Err(BackboneError::InvalidConfig(format!(
                "eps must be finite and > 0, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// Mutable optimizer state: step counter plus Adam moments when enabled.
#[derive(Debug, Clone)]
pub struct OptimState {
    cfg: OptimConfig,
    /// Completed update count.
    pub step: u64,
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
}

impl OptimState {
    pub fn new(cfg: OptimConfig, n_params: usize) -> Result<Self, BackboneError> {
        cfg.validate()?;
        let n = if cfg.use_moments { n_params } else { 0 };
        Ok(Self {
            cfg,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    /// Learning rate used at the current step (linear warmup, then flat).
    pub fn lr_now(&self) -> f64 {
        if self.cfg.warmup_steps == 0 {
            return self.cfg.lr;
        }
        let ramp = (self.step + 1) as f64 / self.cfg.warmup_steps as f64;
        self.cfg.lr * ramp.min(1.0)
    }

    pub(crate) fn rebuild(cfg: OptimConfig, step: u64, m: Vec<f64>, v: Vec<f64>) -> Self {
        Self { cfg, step, m, v }
    }
}

/// What one training step saw and did.
#[derive(Debug, Clone)]
pub struct StepDiagnostics {
    /// Mean action NLL.
    pub j: f64,
    /// Mean policy entropy.
    pub h: f64,
    /// Objective value before the update.
    pub lagrangian: f64,
    /// Dual variable after its ascent step.
    pub lambda: f64,
    /// L2 norm of the parameter gradient.
    pub grad_norm: f64,
    /// Learning rate actually applied.
    pub lr_used: f64,
}

/// One descent step on the parameters followed by one projected ascent step
/// on the dual variable: `lambda <- max(0, lambda + dual_lr * (beta - H))`.
///
/// If any gradient entry is non-finite the call errors and neither the
/// parameters, the dual variable, nor the optimizer state change.
pub fn train_step(
    params: &mut PolicyParams,
    batch: &[TrajectoryWindow],
    bias: Option<(&AttractionTable, &BiasConfig)>,
    opt: &mut OptimState,
) -> Result<StepDiagnostics, BackboneError> {
    let bundle = loss_and_grad(params, batch, bias)?;
    if bundle.grad.iter().any(|g| !g.is_finite()) {
        return Err(BackboneError::NonFiniteGradient);
    }
    let lr = opt.lr_now();
    let grad_norm = bundle.grad.iter().map(|g| g * g).sum::<f64>().sqrt();

    if opt.cfg.use_moments {
        let t = (opt.step + 1) as i32;
        let (b1, b2) = (opt.cfg.beta1, opt.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (i, g) in bundle.grad.iter().enumerate() {
            opt.m[i] = b1 * opt.m[i] + (1.0 - b1) * g;
            opt.v[i] = b2 * opt.v[i] + (1.0 - b2) * g * g;
            let m_hat = opt.m[i] / bc1;
            let v_hat = opt.v[i] / bc2;
            params.theta[i] -= lr * m_hat / (v_hat.sqrt() + opt.cfg.eps);
        }
    } else {
        for (p, g) in params.theta.iter_mut().zip(&bundle.grad) {
            *p -= lr * g;
        }
    }

    params.lambda =
        (params.lambda + opt.cfg.dual_lr * (params.beta_entropy - bundle.h)).max(0.0);
    opt.step += 1;

    Ok(StepDiagnostics {
        j: bundle.j,
        h: bundle.h,
        lagrangian: bundle.l,
        lambda: params.lambda,
        grad_norm,
        lr_used: lr,
    })
}

/// Compares the analytic gradient of the objective against central finite
/// differences (`h = 1e-5`) for every parameter and returns the maximum
/// relative error `|a - f| / max(|a| + |f|, 1e-3)`.
///
/// An empty batch has a zero loss surface and returns 0. Networks above
/// 5000 parameters are rejected (the sweep would be quadratic-cost noise,
/// not a unit check).
pub fn grad_check(
    params: &PolicyParams,
    batch: &[TrajectoryWindow],
    bias: Option<(&AttractionTable, &BiasConfig)>,
) -> Result<f64, BackboneError> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    if params.n_params() > GRAD_CHECK_MAX_PARAMS {
        return Err(BackboneError::InvalidConfig(format!(
            "grad_check wants <= {GRAD_CHECK_MAX_PARAMS} parameters, got {}",
            params.n_params()
        )));
    }
    let analytic = loss_and_grad(params, batch, bias)?.grad;
    let mut work = params.clone();
    let mut max_rel = 0.0f64;
    for i in 0..work.n_params() {
        let orig = work.theta[i];
        work.theta[i] = orig + FD_STEP;
        let up = loss_value(&work, batch, bias)?;
        work.theta[i] = orig - FD_STEP;
        let down = loss_value(&work, batch, bias)?;
        work.theta[i] = orig;
        let fd = (up - down) / (2.0 * FD_STEP);
        let denom = (analytic[i].abs() + fd.abs()).max(FD_DENOM_FLOOR);
        max_rel = max_rel.max((analytic[i] - fd).abs() / denom);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::*;
    use crate::attention::BiasConfig;
    use crate::ewa::{AttractionTable, EwaParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN_2PI: f64 = super::LN_2PI;

    fn toy_batch(cfg: &BackboneConfig, seed: u64) -> Vec<TrajectoryWindow> {
        vec![random_window(cfg, seed), padded_window(cfg, 1, seed + 1)]
    }

    #[test]
    fn nll_at_perfect_mean_and_unit_sigma_is_half_log_2pi() {
        let nll = gaussian_nll(&[0.3], &[0.3], &[0.0]).unwrap();
        assert!((nll - 0.5 * LN_2PI).abs() < 1e-15);
        // doubling sigma at a perfect mean adds ln 2 per dimension.
        let doubled = gaussian_nll(&[0.3], &[0.3], &[2.0f64.ln()]).unwrap();
        assert!((doubled - nll - 2.0f64.ln()).abs() < 1e-15);
        let two_dim = gaussian_nll(&[0.1, -0.2], &[0.1, -0.2], &[0.0, 0.0]).unwrap();
        assert!((two_dim - LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn nll_rejects_degenerate_scales_and_bad_lengths() {
        assert!(matches!(
            gaussian_nll(&[0.0], &[0.0], &[f64::NEG_INFINITY]),
            Err(BackboneError::InvalidScale(_))
        ));
        assert!(matches!(
            gaussian_nll(&[0.0, 1.0], &[0.0], &[0.0]),
            Err(BackboneError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn entropy_frozen_values_and_scaling_law() {
        let h1 = gaussian_entropy(&[0.0]);
        assert!((h1 - 1.4189385332046727).abs() < 1e-12);
        // sigma -> c * sigma adds ln c per dimension.
        let c = 3.7f64;
        let scaled = gaussian_entropy(&[c.ln()]);
        assert!((scaled - h1 - c.ln()).abs() < 1e-12);
        // additive across dimensions.
        let h2 = gaussian_entropy(&[0.2, -0.4]);
        assert!((h2 - gaussian_entropy(&[0.2]) - gaussian_entropy(&[-0.4])).abs() < 1e-12);
    }

    #[test]
    fn entropy_matches_monte_carlo_within_one_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mu: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ls: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.8..0.5)).collect();
        let closed = gaussian_entropy(&ls);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let mut logp = 0.0;
            for k in 0..2 {
                let sigma = ls[k].exp();
                let x = mu[k]
                    + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal);
                let z = (x - mu[k]) / sigma;
                logp -= ls[k] + 0.5 * z * z + 0.5 * LN_2PI;
            }
            acc -= logp;
        }
        let mc = acc / n as f64;
        assert!(
            (mc - closed).abs() / closed.abs() < 0.01,
            "mc {mc} vs closed {closed}"
        );
    }

    #[test]
    fn lagrangian_frozen_values() {
        assert_eq!(lagrangian(1.0, 1.5, 0.5, 2.0), 1.25);
        assert_eq!(lagrangian(3.0, 9.9, 0.0, 2.0), 3.0);
        // active constraint boundary: H == beta makes lambda irrelevant.
        assert_eq!(lagrangian(3.0, 2.0, 7.0, 2.0), 3.0);
    }

    #[test]
    fn padded_steps_contribute_nothing_to_the_losses() {
        let params = toy_params(50);
        let cfg = params.config().clone();
        let padded = padded_window(&cfg, 2, 51);
        let fwd = forward(&params, &[padded.clone()], None).unwrap();
        assert_eq!(fwd.real_step_count(), 2);
        // hand-build the expected mean from real steps only.
        let mut expect = 0.0;
        for t in 2..cfg.context_steps {
            expect +=
                gaussian_nll(&padded.actions[t], &fwd.mu[0][t], &fwd.log_sigma[0][t]).unwrap();
        }
        expect /= 2.0;
        let got = nll_loss(&params, &[padded], None).unwrap();
        assert!((got - expect).abs() < 1e-14);
    }

    #[test]
    fn empty_batch_errors_in_losses_and_returns_zero_in_grad_check() {
        let params = toy_params(0);
        assert!(matches!(
            nll_loss(&params, &[], None),
            Err(BackboneError::EmptyBatch)
        ));
        assert_eq!(grad_check(&params, &[], None).unwrap(), 0.0);
    }

    #[test]
    fn grad_check_linear_head_network_is_nearly_exact() {
        let mut cfg = BackboneConfig::default();
        cfg.n_layers = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let mut params = PolicyParams::init(cfg.clone(), 1.0, &mut rng).unwrap();
        params.lambda = 0.3;
        let batch = toy_batch(&cfg, 61);
        let rel = grad_check(&params, &batch, None).unwrap();
        assert!(rel <= 1e-7, "linear-head grad check rel err {rel}");
    }

    #[test]
    fn grad_check_default_toy_network_across_seeds() {
        for seed in 0..5 {
            let mut params = toy_params(seed);
            params.lambda = 0.1 + seed as f64 * 0.05;
            let batch = toy_batch(params.config(), 100 + seed);
            let rel = grad_check(&params, &batch, None).unwrap();
            assert!(rel <= 1e-4, "seed {seed}: rel err {rel}");
        }
    }

    #[test]
    fn grad_check_with_active_bias_and_positional_and_relu() {
        let table = AttractionTable::with_values(
            vec![2.0, -1.0, 0.5, 4.0, -3.0, 1.0, 0.0, 8.0, -0.25],
            EwaParams::default(),
        )
        .unwrap();
        let bcfg = BiasConfig::default();
        let mut cfg = BackboneConfig::default();
        cfg.use_positional = true;
        cfg.n_layers = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let mut params = PolicyParams::init(cfg.clone(), 1.0, &mut rng).unwrap();
        params.lambda = 0.2;
        let batch = toy_batch(&cfg, 71);
        let rel = grad_check(&params, &batch, Some((&table, &bcfg))).unwrap();
        assert!(rel <= 1e-4, "biased grad check rel err {rel}");

        // relu path (kinks are measure-zero under random init, and the
        // checker's denominator floor absorbs boundary noise).
        let mut cfg = BackboneConfig::default();
        cfg.activation = Activation::Relu;
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let params = PolicyParams::init(cfg.clone(), 1.0, &mut rng).unwrap();
        let batch = toy_batch(&cfg, 73);
        let rel = grad_check(&params, &batch, None).unwrap();
        assert!(rel <= 1e-4, "relu grad check rel err {rel}");
    }

    #[test]
    fn grad_check_rejects_oversized_networks() {
        let mut cfg = BackboneConfig::default();
        cfg.embed_dim = 64;
        cfg.n_heads = 4;
        cfg.mlp_hidden = 128;
        cfg.n_layers = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let params = PolicyParams::init(cfg.clone(), 1.0, &mut rng).unwrap();
        assert!(params.n_params() > 5_000);
        let batch = vec![random_window(&cfg, 81)];
        assert!(matches!(
            grad_check(&params, &batch, None),
            Err(BackboneError::InvalidConfig(_))
        ));
    }

    #[test]
    fn zero_learning_rates_leave_everything_bit_unchanged() {
        let mut params = toy_params(90);
        params.lambda = 0.4;
        let theta_before: Vec<u64> = params.theta().iter().map(|v| v.to_bits()).collect();
        let lambda_before = params.lambda;
        let mut opt = OptimState::new(
            OptimConfig {
                lr: 0.0,
                dual_lr: 0.0,
                ..OptimConfig::default()
            },
            params.n_params(),
        )
        .unwrap();
        let batch = toy_batch(params.config(), 91);
        for _ in 0..3 {
            train_step(&mut params, &batch, None, &mut opt).unwrap();
        }
        let theta_after: Vec<u64> = params.theta().iter().map(|v| v.to_bits()).collect();
        assert_eq!(theta_before, theta_after);
        assert_eq!(params.lambda, lambda_before);
        assert_eq!(opt.step, 3);
    }

    #[test]
    fn sgd_update_matches_the_formula() {
        let mut params = toy_params(92);
        let batch = toy_batch(params.config(), 93);
        let expected = {
            let bundle = loss_and_grad(&params, &batch, None).unwrap();
            let lr = 1e-3 / 10.0; // first warmup step
            params
                .theta()
                .iter()
                .zip(&bundle.grad)
                .map(|(p, g)| p - lr * g)
                .collect::<Vec<f64>>()
        };
        let mut opt = OptimState::new(
            OptimConfig {
                use_moments: false,
                ..OptimConfig::default()
            },
            params.n_params(),
        )
        .unwrap();
        let diag = train_step(&mut params, &batch, None, &mut opt).unwrap();
        assert_eq!(diag.lr_used, 1e-4);
        assert_eq!(params.theta(), expected.as_slice());
    }

    #[test]
    fn warmup_ramps_linearly_then_flattens() {
        let mut params = toy_params(94);
        let batch = toy_batch(params.config(), 95);
        let mut opt = OptimState::new(OptimConfig::default(), params.n_params()).unwrap();
        let mut rates = Vec::new();
        for _ in 0..12 {
            rates.push(train_step(&mut params, &batch, None, &mut opt).unwrap().lr_used);
        }
        for (t, lr) in rates.iter().enumerate() {
            let expect = 1e-3 * (((t + 1) as f64) / 10.0).min(1.0);
            assert!((lr - expect).abs() < 1e-18, "step {t}: {lr} vs {expect}");
        }
    }

    #[test]
    fn dual_variable_decays_to_zero_when_entropy_exceeds_the_floor() {
        let mut params = toy_params(96);
        params.beta_entropy = -10.0; // H is ~1.8 at init, far above the floor
        params.lambda = 0.5;
        let batch = toy_batch(params.config(), 97);
        let mut opt = OptimState::new(OptimConfig::default(), params.n_params()).unwrap();
        let mut last = params.lambda;
        for _ in 0..100 {
            let d = train_step(&mut params, &batch, None, &mut opt).unwrap();
            assert!(d.lambda >= 0.0);
            assert!(d.lambda <= last);
            last = d.lambda;
        }
        assert_eq!(last, 0.0);
    }

    #[test]
    fn dual_variable_rises_while_entropy_is_below_the_floor() {
        let mut params = toy_params(98);
        // unreachable floor: per-dim entropy caps at 0.5 + 0.5 ln(2 pi) + 2.
        params.beta_entropy = 10.0;
        let batch = toy_batch(params.config(), 99);
        let mut opt = OptimState::new(OptimConfig::default(), params.n_params()).unwrap();
        let mut last = params.lambda;
        for _ in 0..100 {
            let d = train_step(&mut params, &batch, None, &mut opt).unwrap();
            assert!(d.lambda > last, "lambda must strictly increase");
            last = d.lambda;
        }
    }

    #[test]
    fn failed_step_leaves_parameters_untouched() {
        let mut params = toy_params(100);
        let r = params.ranges.layers[0].wq.clone();
        params.theta_mut()[r][0] = f64::NAN;
        let theta_before: Vec<u64> = params.theta().iter().map(|v| v.to_bits()).collect();
        let lambda_before = params.lambda;
        let batch = toy_batch(params.config(), 101);
        let mut opt = OptimState::new(OptimConfig::default(), params.n_params()).unwrap();
        let err = train_step(&mut params, &batch, None, &mut opt).unwrap_err();
        assert!(matches!(err, BackboneError::NonFiniteActivation { .. }));
        let theta_after: Vec<u64> = params.theta().iter().map(|v| v.to_bits()).collect();
        assert_eq!(theta_before, theta_after);
        assert_eq!(params.lambda, lambda_before);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn training_reduces_the_objective_on_a_fixed_batch() {
        let mut params = toy_params(102);
        params.beta_entropy = 0.5;
        let batch = toy_batch(params.config(), 103);
        let mut opt = OptimState::new(
            OptimConfig {
                lr: 3e-3,
                ..OptimConfig::default()
            },
            params.n_params(),
        )
        .unwrap();
        let first = train_step(&mut params, &batch, None, &mut opt).unwrap().j;
        let mut last = first;
        for _ in 0..80 {
            last = train_step(&mut params, &batch, None, &mut opt).unwrap().j;
        }
        assert!(
            last < first,
            "NLL should fall on a fixed batch: first {first}, last {last}"
        );
    }

    #[test]
    fn bias_off_loss_matches_unbiased_loss_bit_for_bit() {
        let params = toy_params(104);
        let batch = toy_batch(params.config(), 105);
        let zero = AttractionTable::new(9, EwaParams::default()).unwrap();
        let with_zero_bias =
            nll_loss(&params, &batch, Some((&zero, &BiasConfig::default()))).unwrap();
        let without = nll_loss(&params, &batch, None).unwrap();
        assert_eq!(with_zero_bias.to_bits(), without.to_bits());
    }
}
