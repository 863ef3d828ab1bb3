//! Attraction-derived attention bias, masked softmax, and distribution-drift
//! oracles.
//!
//! The bias path turns a per-code attraction table into an additive
//! pre-softmax tensor: every action-token column receives a constant value
//! `clamp(beta * attraction[code], -eps, +eps)` down all of its rows, and all
//! other columns stay exactly zero. Because the clamp is applied at
//! construction time, `max |bias| <= eps` holds by construction, which is the
//! premise of the total-variation drift bound implemented here
//! ([`drift_bound`], [`worst_case_drift`]).
//!
//! The softmax kernel is shared between the scalar helper [`softmax`] and the
//! tensor-level [`masked_softmax`]; both subtract the row maximum before
//! exponentiating so the drift oracles can be checked at 1e-12 tolerances.

use thiserror::Error;

use crate::ewa::AttractionTable;

/// Max allowed deviation of a probability vector's sum from 1 before
/// [`tv_distance`] rejects it as non-normalized.
pub const NORM_TOL: f64 = 1e-9;

/// Errors from bias construction, masking, softmax, and drift oracles.
#[derive(Debug, Error)]
pub enum AttentionError {
    /// A configuration value is outside its valid range.
    #[error("invalid attention config: {0}")]
    InvalidConfig(String),
    /// Two tensors (or a tensor and a mask) disagree on shape.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// A softmax row has no unmasked entries.
    #[error("degenerate attention row: batch {batch}, head {head}, row {row} has no unmasked entries")]
    DegenerateRow {
        batch: usize,
        head: usize,
        row: usize,
    },
    /// The token layout references a code the attraction table does not hold.
    #[error("layout/table mismatch: {0}")]
    LayoutMismatch(String),
    /// An input that must be a probability vector is not normalized.
    #[error("not a probability vector: {0}")]
    NotNormalized(String),
    /// A non-finite value was found where a finite one is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

/// What a sequence column holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    /// Return-to-go token.
    Return,
    /// State (observation) token.
    State,
    /// Action token; carries a routed code index.
    Action,
    /// Left-padding token occupying an unused step slot.
    Pad,
}

/// Column-level description of a tokenized trajectory window.
///
/// Columns follow the interleaving `(return, state, action)` per step, so a
/// window of `k` steps spans `3k` columns and the action columns sit at
/// indices `2, 5, 8, ...`. Padded steps keep their three column slots but are
/// marked [`TokenKind::Pad`] and carry no code.
#[derive(Debug, Clone)]
pub struct TokenLayout {
    kinds: Vec<TokenKind>,
    timesteps: Vec<usize>,
    codes: Vec<Option<usize>>,
}

impl TokenLayout {
    /// Layout for a fully observed window: one `(return, state, action)`
    /// triplet per step, with `codes[t]` the routed code of step `t`'s action.
    pub fn interleaved(codes: &[usize]) -> Result<Self, AttentionError> {
        Self::interleaved_with_pad(0, codes)
    }

    /// Layout whose first `pad_steps` steps are padding triplets, followed by
    /// one real triplet per entry of `codes`.
    pub fn interleaved_with_pad(
        pad_steps: usize,
        codes: &[usize],
    ) -> Result<Self, AttentionError> {
        let k = pad_steps + codes.len();
        if k == 0 {
            return Err(AttentionError::InvalidConfig(
                "token layout must cover at least one step".into(),
            ));
        }
        let s = 3 * k;
        let mut kinds = Vec::with_capacity(s);
        let mut timesteps = Vec::with_capacity(s);
        let mut col_codes = Vec::with_capacity(s);
        for t in 0..k {
            let padded = t < pad_steps;
            let step_kinds = if padded {
                [TokenKind::Pad, TokenKind::Pad, TokenKind::Pad]
            } else {
                [TokenKind::Return, TokenKind::State, TokenKind::Action]
            };
            for (slot, kind) in step_kinds.into_iter().enumerate() {
                kinds.push(kind);
                timesteps.push(t);
                if kind == TokenKind::Action && slot == 2 {
                    col_codes.push(Some(codes[t - pad_steps]));
                } else {
                    col_codes.push(None);
                }
            }
        }
        Ok(Self {
            kinds,
            timesteps,
            codes: col_codes,
        })
    }

    /// Total number of columns (`3 * steps`).
    pub fn seq_len(&self) -> usize {
        self.kinds.len()
    }

    /// Kind of column `i`.
    pub fn kind(&self, i: usize) -> TokenKind {
        self.kinds[i]
    }

    /// Window-relative step of column `i`.
    pub fn timestep(&self, i: usize) -> usize {
        self.timesteps[i]
    }

    /// All action columns as `(column, step, code)`.
    pub fn action_columns(&self) -> Vec<(usize, usize, usize)> {
        self.codes
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.map(|code| (i, self.timesteps[i], code)))
            .collect()
    }

    /// Per-column pad flags (`true` = padding).
    pub fn pad_mask(&self) -> Vec<bool> {
        self.kinds.iter().map(|k| *k == TokenKind::Pad).collect()
    }
}

/// Scale and clipping for the attraction bias.
#[derive(Debug, Clone)]
pub struct BiasConfig {
    /// Multiplier applied to each attraction before clipping. Must be > 0.
    pub beta_bias: f64,
    /// Per-entry clip radius: every bias entry lands in `[-eps, +eps]`.
    pub eps_clip: f64,
    /// Optional per-head multipliers (applied before the clip). `None` means
    /// the same scalar bias is broadcast across heads.
    pub per_head_scale: Option<Vec<f64>>,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self {
            beta_bias: 0.05,
            eps_clip: 0.1,
            per_head_scale: None,
        }
    }
}

impl BiasConfig {
    /// Scalar-mode config; both values must be finite and strictly positive.
    pub fn new(beta_bias: f64, eps_clip: f64) -> Result<Self, AttentionError> {
        let cfg = Self {
            beta_bias,
            eps_clip,
            per_head_scale: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Adds per-head multipliers; each must be finite and strictly positive.
    pub fn with_per_head_scale(mut self, scale: Vec<f64>) -> Result<Self, AttentionError> {
        if scale.is_empty() {
            return Err(AttentionError::InvalidConfig(
                "per-head scale must not be empty".into(),
            ));
        }
        if let Some(bad) = scale.iter().find(|v| !v.is_finite() || **v <= 0.0) {
            return Err(AttentionError::InvalidConfig(format!(
                "per-head scale entries must be finite and > 0, got {bad}"
            )));
        }
        self.per_head_scale = Some(scale);
        self.validate()?;
        Ok(self)
    }

    /// Checks the scalar fields.
    pub fn validate(&self) -> Result<(), AttentionError> {
        if !self.beta_bias.is_finite() || self.beta_bias <= 0.0 {
            return Err(AttentionError::InvalidConfig(format!(
                "beta_bias must be finite and > 0, got {}",
                self.beta_bias
            )));
        }
        if !self.eps_clip.is_finite() || self.eps_clip <= 0.0 {
            return Err(AttentionError::InvalidConfig(format!(
                "eps_clip must be finite and > 0, got {}",
                self.eps_clip
            )));
        }
        Ok(())
    }
}

/// Dense `(batch, heads, seq, seq)` tensor of f64 scores.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnTensor {
    batch: usize,
    heads: usize,
    seq: usize,
    data: Vec<f64>,
}

impl AttnTensor {
    /// All-zero tensor of the given shape.
    pub fn zeros(batch: usize, heads: usize, seq: usize) -> Self {
        Self {
            batch,
            heads,
            seq,
            data: vec![0.0; batch * heads * seq * seq],
        }
    }

    /// Builds a tensor by evaluating `f(batch, head, row, col)` everywhere.
    pub fn from_fn(
        batch: usize,
        heads: usize,
        seq: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let mut t = Self::zeros(batch, heads, seq);
        for n in 0..batch {
            for h in 0..heads {
                for r in 0..seq {
                    for c in 0..seq {
                        let v = f(n, h, r, c);
                        t.set(n, h, r, c, v);
                    }
                }
            }
        }
        t
    }

    /// `(batch, heads, seq)` dimensions; the last two axes are both `seq`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.heads, self.seq)
    }

    fn idx(&self, n: usize, h: usize, r: usize, c: usize) -> usize {
        ((n * self.heads + h) * self.seq + r) * self.seq + c
    }

    /// Entry at `(batch n, head h, row r, col c)`.
    pub fn get(&self, n: usize, h: usize, r: usize, c: usize) -> f64 {
        self.data[self.idx(n, h, r, c)]
    }

    /// Overwrites the entry at `(n, h, r, c)`.
    pub fn set(&mut self, n: usize, h: usize, r: usize, c: usize, v: f64) {
        let i = self.idx(n, h, r, c);
        self.data[i] = v;
    }

    /// Flat row-major view of the data.
    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Per-row visibility mask over a square score matrix.
///
/// Stored densely so arbitrary patterns (including deliberately degenerate
/// rows, which [`masked_softmax`] rejects) can be expressed in tests.
#[derive(Debug, Clone)]
pub struct AttnMask {
    seq: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    /// Causal mask: row `r` sees columns `c <= r`.
    pub fn causal(seq: usize) -> Self {
        Self::from_fn(seq, |r, c| c <= r)
    }

    /// Causal mask that additionally hides padding columns from every other
    /// row. Each row keeps itself visible (`c == r`) so padded rows still
    /// have one unmasked entry instead of becoming degenerate; downstream
    /// consumers ignore the outputs at padded positions.
    pub fn causal_with_pad(pad: &[bool]) -> Self {
        let p = pad.to_vec();
        Self::from_fn(pad.len(), move |r, c| c <= r && (!p[c] || c == r))
    }

    /// No masking at all: every row sees every column.
    pub fn unmasked(seq: usize) -> Self {
        Self::from_fn(seq, |_, _| true)
    }

    /// Arbitrary pattern from a predicate over `(row, col)`.
    pub fn from_fn(seq: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = vec![false; seq * seq];
        for r in 0..seq {
            for c in 0..seq {
                allowed[r * seq + c] = f(r, c);
            }
        }
        Self { seq, allowed }
    }

    /// Number of rows (== columns).
    pub fn seq_len(&self) -> usize {
        self.seq
    }

    /// Whether row `r` may attend to column `c`.
    pub fn allows(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.seq + c]
    }
}

/// Per-column bias values in scalar mode (no per-head scale): action columns
/// get `clamp(beta * attraction[code], -eps, +eps)`, everything else 0.
pub fn column_bias(
    table: &AttractionTable,
    layout: &TokenLayout,
    cfg: &BiasConfig,
) -> Result<Vec<f64>, AttentionError> {
    cfg.validate()?;
    let mut cols = vec![0.0; layout.seq_len()];
    for (col, _t, code) in layout.action_columns() {
        if code >= table.len() {
            return Err(AttentionError::LayoutMismatch(format!(
                "action column {col} routes to code {code}, but the attraction table has {} entries",
                table.len()
            )));
        }
        let raw = cfg.beta_bias * table.values()[code];
        cols[col] = raw.clamp(-cfg.eps_clip, cfg.eps_clip);
    }
    Ok(cols)
}

/// Full bias tensor of shape `(batch, heads, seq, seq)`.
///
/// Every action column is constant down its rows; non-action columns are
/// exactly zero; batches are identical. Without `per_head_scale` all heads are
/// identical too; with it, head `h` uses `clamp(scale[h] * beta * a, -eps,
/// +eps)` (the clip still caps every entry).
pub fn build_bias(
    table: &AttractionTable,
    layout: &TokenLayout,
    cfg: &BiasConfig,
    batch: usize,
    heads: usize,
) -> Result<AttnTensor, AttentionError> {
    cfg.validate()?;
    if batch == 0 || heads == 0 {
        return Err(AttentionError::InvalidConfig(format!(
            "batch and heads must be >= 1, got batch={batch} heads={heads}"
        )));
    }
    if let Some(scale) = &cfg.per_head_scale {
        if scale.len() != heads {
            return Err(AttentionError::ShapeMismatch(format!(
                "per-head scale has {} entries but the tensor has {heads} heads",
                scale.len()
            )));
        }
    }
    let base = column_bias(table, layout, cfg)?;
    let s = layout.seq_len();
    let mut out = AttnTensor::zeros(batch, heads, s);
    for (col, _t, code) in layout.action_columns() {
        for h in 0..heads {
            let v = match &cfg.per_head_scale {
                Some(scale) => {
                    let raw = scale[h] * cfg.beta_bias * table.values()[code];
                    raw.clamp(-cfg.eps_clip, cfg.eps_clip)
                }
                None => base[col],
            };
            for n in 0..batch {
                for r in 0..s {
                    out.set(n, h, r, col, v);
                }
            }
        }
    }
    Ok(out)
}

/// Elementwise `scores + bias`. Shapes must match exactly.
///
/// Entries whose bias is zero are copied bit-for-bit (not summed), so columns
/// the bias does not touch come out bit-identical to the input.
pub fn apply_bias(scores: &AttnTensor, bias: &AttnTensor) -> Result<AttnTensor, AttentionError> {
    if scores.shape() != bias.shape() {
        return Err(AttentionError::ShapeMismatch(format!(
            "scores shape {:?} != bias shape {:?}",
            scores.shape(),
            bias.shape()
        )));
    }
    let mut out = scores.clone();
    for (o, b) in out.data.iter_mut().zip(bias.data.iter()) {
        if *b != 0.0 {
            *o += *b;
        }
    }
    Ok(out)
}

/// Numerically stable softmax of a nonempty slice (row-max subtraction).
pub fn softmax(z: &[f64]) -> Vec<f64> {
    assert!(!z.is_empty(), "softmax of an empty slice");
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-wise softmax over unmasked entries; masked entries come out exactly 0.
///
/// Errors if the mask length disagrees with the tensor, if any unmasked entry
/// is non-finite, or if some row has no unmasked entry at all.
pub fn masked_softmax(
    scores: &AttnTensor,
    mask: &AttnMask,
) -> Result<AttnTensor, AttentionError> {
    let (batch, heads, seq) = scores.shape();
    if mask.seq_len() != seq {
        return Err(AttentionError::ShapeMismatch(format!(
            "mask covers {} columns but scores have {seq}",
            mask.seq_len()
        )));
    }
    let mut out = AttnTensor::zeros(batch, heads, seq);
    for n in 0..batch {
        for h in 0..heads {
            for r in 0..seq {
                let mut max = f64::NEG_INFINITY;
                let mut any = false;
                for c in 0..seq {
                    if mask.allows(r, c) {
                        let v = scores.get(n, h, r, c);
                        if !v.is_finite() {
                            return Err(AttentionError::NonFinite(format!(
                                "score at batch {n}, head {h}, row {r}, col {c} is {v}"
                            )));
                        }
                        any = true;
                        if v > max {
                            max = v;
                        }
                    }
                }
                if !any {
                    return Err(AttentionError::DegenerateRow {
                        batch: n,
                        head: h,
                        row: r,
                    });
                }
                let mut sum = 0.0;
                for c in 0..seq {
                    if mask.allows(r, c) {
                        let e = (scores.get(n, h, r, c) - max).exp();
                        out.set(n, h, r, c, e);
                        sum += e;
                    }
                }
                for c in 0..seq {
                    if mask.allows(r, c) {
                        let e = out.get(n, h, r, c);
                        out.set(n, h, r, c, e / sum);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Total-variation distance `0.5 * sum |p_i - q_i|` between two probability
/// vectors of equal length. Rejects entries that are negative or non-finite
/// and vectors whose sums deviate from 1 by more than [`NORM_TOL`].
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64, AttentionError> {
    if p.len() != q.len() {
        return Err(AttentionError::ShapeMismatch(format!(
            "p has {} entries, q has {}",
            p.len(),
            q.len()
        )));
    }
    for (name, v) in [("p", p), ("q", q)] {
        if let Some(bad) = v.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(AttentionError::NotNormalized(format!(
                "{name} contains invalid probability {bad}"
            )));
        }
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > NORM_TOL {
            return Err(AttentionError::NotNormalized(format!(
                "{name} sums to {sum}, expected 1 within {NORM_TOL}"
            )));
        }
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Upper bound on the softmax drift caused by a bias with `max |b| <= eps`:
/// `tanh(eps)`. Intended for `eps >= 0`.
pub fn drift_bound(eps: f64) -> f64 {
    debug_assert!(eps >= 0.0, "drift_bound wants eps >= 0, got {eps}");
    eps.tanh()
}

/// A distribution pair (with connecting logits and bias) that meets the
/// `tanh(eps)` drift bound exactly.
#[derive(Debug, Clone)]
pub struct DriftWitness {
    /// Pre-softmax scores; `softmax(logits) == p`.
    pub logits: Vec<f64>,
    /// Additive bias; `softmax(logits + bias) == q`. Entries are `+2*eps` on
    /// the boosted atom and `-2*eps` elsewhere.
    pub bias: Vec<f64>,
    /// Base distribution.
    pub p: Vec<f64>,
    /// Shifted distribution.
    pub q: Vec<f64>,
    /// Measured `tv_distance(p, q)`.
    pub achieved_tv: f64,
}

/// Builds the extremal pair for the likelihood-ratio constraint
/// `q_i / p_i ∈ [e^{-2 eps}, e^{2 eps}]` that any bias with `max |b| <= eps`
/// implies: a two-point mixture placing mass `s = (1 - a) / (b - a)` on one
/// boosted atom (ratio `b = e^{2 eps}`) and spreading the rest over `n - 1`
/// suppressed atoms (ratio `a = e^{-2 eps}`). Its TV distance is exactly
/// `(b - 1) / (b + 1) = tanh(eps)`.
///
/// Note the bias that connects `p` to `q` through a softmax has entries
/// `±2*eps`: the ratio-level bound `tanh(eps)` is tight for the ratio
/// constraint, while over biases restricted to `max |b| <= eps` the
/// attainable supremum is the smaller `tanh(eps / 2)`.
pub fn worst_case_drift(eps: f64, n: usize) -> Result<DriftWitness, AttentionError> {
    if n < 2 {
        return Err(AttentionError::InvalidConfig(format!(
            "need at least 2 outcomes, got {n}"
        )));
    }
    if !eps.is_finite() || eps < 0.0 {
        return Err(AttentionError::InvalidConfig(format!(
            "eps must be finite and >= 0, got {eps}"
        )));
    }
    if eps == 0.0 {
        let p = vec![1.0 / n as f64; n];
        return Ok(DriftWitness {
            logits: vec![0.0; n],
            bias: vec![0.0; n],
            p: p.clone(),
            q: p,
            achieved_tv: 0.0,
        });
    }
    let a = (-2.0 * eps).exp();
    let b = (2.0 * eps).exp();
    let s = (1.0 - a) / (b - a);
    let rest = (1.0 - s) / (n - 1) as f64;
    let mut p = vec![rest; n];
    p[0] = s;
    let mut q: Vec<f64> = p.iter().map(|v| v * a).collect();
    q[0] = s * b;
    let logits: Vec<f64> = p.iter().map(|v| v.ln()).collect();
    let mut bias = vec![-2.0 * eps; n];
    bias[0] = 2.0 * eps;
    let achieved_tv = tv_distance(&p, &q)?;
    Ok(DriftWitness {
        logits,
        bias,
        p,
        q,
        achieved_tv,
    })
}
