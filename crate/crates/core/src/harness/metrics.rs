//! Run metrics: shifted geometric aggregation and a byte-stable CSV emitter.
//!
//! Returns in the toy environment are negative (cost-to-go), so a plain
//! geometric mean is undefined. All `*_gm` columns therefore use a *shifted*
//! geometric mean: shift the sample so its minimum lands at 1, aggregate in
//! log space, and shift back. The same shift feeds the geometric standard
//! deviation (reported as the multiplicative spread factor, >= 1).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::HarnessError;

/// Shifted geometric mean: with `m = min(xs)` and `s_i = x_i - m + 1`,
/// returns `exp(mean(ln s_i)) + m - 1`. Exact on all-equal samples.
/// Empty input yields NaN.
pub fn shifted_geometric_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let m = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    if !m.is_finite() {
        return f64::NAN;
    }
    let mean_ln = xs.iter().map(|&x| (x - m + 1.0).ln()).sum::<f64>() / xs.len() as f64;
    mean_ln.exp() + m - 1.0
}

/// Multiplicative spread of the shifted sample: `exp(std(ln s_i))` with the
/// population standard deviation. All-equal samples give exactly 1.
/// Empty input yields NaN.
pub fn shifted_geometric_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let m = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    if !m.is_finite() {
        return f64::NAN;
    }
    let logs: Vec<f64> = xs.iter().map(|&x| (x - m + 1.0).ln()).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    let var = logs.iter().map(|&l| (l - mean) * (l - mean)).sum::<f64>() / logs.len() as f64;
    var.sqrt().exp()
}

/// One evaluation row. `aug_*` fields are NaN on rows without fresh
/// collection data (e.g. the pre-training row).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// Cumulative environment steps consumed when the row was recorded.
    pub step: u64,
    pub seed: u64,
    pub return_mean_gm: f64,
    pub return_std_gm: f64,
    pub return_vs_samples: f64,
    pub length_mean_gm: f64,
    pub length_std_gm: f64,
    pub aug_return: f64,
    pub aug_length: f64,
}

impl MetricsRow {
    /// Aggregates one evaluation sweep. `aug` carries the mean return and
    /// mean length of trajectories collected since the previous row.
    pub fn from_eval(
        step: u64,
        seed: u64,
        returns: &[f64],
        lengths: &[usize],
        aug: Option<(f64, f64)>,
    ) -> Self {
        let lens: Vec<f64> = lengths.iter().map(|&l| l as f64).collect();
        let return_mean_gm = shifted_geometric_mean(returns);
        Self {
            step,
            seed,
            return_mean_gm,
            return_std_gm: shifted_geometric_std(returns),
            // same aggregate keyed against cumulative env steps; kept as its
            // own column so downstream sample-efficiency plots need no joins.
            return_vs_samples: return_mean_gm,
            length_mean_gm: shifted_geometric_mean(&lens),
            length_std_gm: shifted_geometric_std(&lens),
            aug_return: aug.map_or(f64::NAN, |(r, _)| r),
            aug_length: aug.map_or(f64::NAN, |(_, l)| l),
        }
    }
}

/// Ordered collection of rows with a stable CSV rendering.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsSeries {
    rows: Vec<MetricsRow>,
}

impl MetricsSeries {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    /// Renders the CSV. Floats use Rust's shortest round-trip formatting, so
    /// identical runs render byte-identical files.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(
            "# gm columns use a shifted geometric mean: samples are shifted so their\n\
             # minimum is 1, aggregated in log space, and shifted back; std columns are\n\
             # the multiplicative spread exp(std(ln shifted)).\n\
             # aug_traj columns are NaN on rows recorded before any collection.\n",
        );
        out.push_str(
            "step,seed,evaluation/return_mean_gm,evaluation/return_std_gm,\
             evaluation/return_vs_samples,evaluation/length_mean_gm,\
             evaluation/length_std_gm,aug_traj/return,aug_traj/length\n",
        );
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.step,
                r.seed,
                r.return_mean_gm,
                r.return_std_gm,
                r.return_vs_samples,
                r.length_mean_gm,
                r.length_std_gm,
                r.aug_return,
                r.aug_length
            )
            .expect("writing to String cannot fail");
        }
        out
    }

    /// Writes `metrics.csv` under `dir`, creating the directory if needed.
    pub fn emit(&self, dir: &Path) -> Result<PathBuf, HarnessError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("metrics.csv");
        std::fs::write(&path, self.render())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_equal_samples_are_exact() {
        // Negative all-equal values must come back exactly, not approximately:
        // ln(1) = 0 and exp(0) = 1 are both exact.
        for v in [-3.25, -1.0, 0.0, 2.5] {
            let xs = [v; 7];
            assert_eq!(shifted_geometric_mean(&xs), v);
            assert_eq!(shifted_geometric_std(&xs), 1.0);
        }
    }

    #[test]
    fn shifted_mean_lies_between_min_and_max() {
        let xs = [-4.0, -2.0, -1.0, -0.5];
        let gm = shifted_geometric_mean(&xs);
        assert!(gm > -4.0 && gm < -0.5, "gm = {gm}");
        // log-space aggregation sits at or below the arithmetic mean of the
        // shifted sample (AM-GM), so after unshifting: gm <= mean(xs).
        let am = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!(gm <= am + 1e-12);
        assert!(shifted_geometric_std(&xs) > 1.0);
    }

    #[test]
    fn positive_samples_match_plain_geometric_mean_after_shift() {
        // For xs = [1, 4] the shift is 0 by construction (min maps to 1), so
        // the value is the plain geometric mean of [1, 4] = 2.
        let xs = [1.0, 4.0];
        assert!((shifted_geometric_mean(&xs) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_input_is_nan() {
        assert!(shifted_geometric_mean(&[]).is_nan());
        assert!(shifted_geometric_std(&[]).is_nan());
    }

    #[test]
    fn single_sample_row_is_the_sample() {
        assert_eq!(shifted_geometric_mean(&[-2.75]), -2.75);
        assert_eq!(shifted_geometric_std(&[-2.75]), 1.0);
    }

    #[test]
    fn row_from_eval_fills_all_columns() {
        let row = MetricsRow::from_eval(120, 9, &[-1.0, -2.0], &[10, 20], Some((-1.5, 15.0)));
        assert_eq!(row.step, 120);
        assert_eq!(row.seed, 9);
        assert_eq!(row.return_vs_samples, row.return_mean_gm);
        assert_eq!(row.aug_return, -1.5);
        assert_eq!(row.aug_length, 15.0);
        let initial = MetricsRow::from_eval(0, 9, &[-1.0], &[30], None);
        assert!(initial.aug_return.is_nan());
        assert!(initial.aug_length.is_nan());
    }

    #[test]
    fn render_is_byte_stable_and_carries_the_exact_column_names() {
        let mut s = MetricsSeries::new();
        s.push(MetricsRow::from_eval(0, 3, &[-2.0, -2.0], &[30, 30], None));
        s.push(MetricsRow::from_eval(
            60,
            3,
            &[-1.0, -1.5],
            &[12, 18],
            Some((-1.75, 30.0)),
        ));
        let a = s.render();
        let b = s.clone().render();
        assert_eq!(a, b);
        let header = a.lines().find(|l| !l.starts_with('#')).unwrap();
        assert_eq!(
            header,
            "step,seed,evaluation/return_mean_gm,evaluation/return_std_gm,\
             evaluation/return_vs_samples,evaluation/length_mean_gm,\
             evaluation/length_std_gm,aug_traj/return,aug_traj/length"
        );
        let first = a.lines().nth(5).unwrap();
        assert!(first.starts_with("0,3,-2,"), "row was: {first}");
        assert!(first.ends_with(",NaN,NaN"));
        assert_eq!(a.lines().count(), 7, "4 comments + header + 2 rows");
    }

    #[test]
    fn emit_writes_the_file_where_promised() {
        let dir = std::env::temp_dir().join(format!("attract-metrics-{}", std::process::id()));
        let mut s = MetricsSeries::new();
        s.push(MetricsRow::from_eval(0, 1, &[-1.0], &[5], None));
        let path = s.emit(&dir).unwrap();
        assert_eq!(path, dir.join("metrics.csv"));
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, s.render());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
