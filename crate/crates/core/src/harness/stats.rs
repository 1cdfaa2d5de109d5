//! Cross-seed aggregation and the plotting/trend math that consumes it.

use std::fmt::Write as _;

use super::{fmt_f64, RunArtifact};

/// Signed log compression for plotting returns that span orders of
/// magnitude in both directions: sign(x) * log10(1 + |x|). Applied only when
/// a plot is emitted; stored data stays linear.
pub fn symlog(x: f64) -> f64 {
    x.signum() * (1.0 + x.abs()).log10()
}

/// One aggregated episode across seeds: mean and standard error (sample
/// standard deviation over sqrt(n)) of the two headline metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub episode: u32,
    pub n: usize,
    pub return_mean: f64,
    pub return_se: f64,
    pub mistake_rate_mean: f64,
    pub mistake_rate_se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    /// True when only one artifact was aggregated; SE columns are then 0 and
    /// say nothing about spread.
    pub degenerate_sample: bool,
}

pub const SUMMARY_CSV_HEADER: &str =
    "episode,n,return_mean,return_se,mistake_rate_mean,mistake_rate_se";

impl Summary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SUMMARY_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.episode,
                r.n,
                fmt_f64(r.return_mean),
                fmt_f64(r.return_se),
                fmt_f64(r.mistake_rate_mean),
                fmt_f64(r.mistake_rate_se),
            );
        }
        out
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AggregateError {
    #[error("no artifacts to aggregate")]
    Empty,
    #[error("artifacts disagree on config (seed {0} vs seed {1})")]
    ConfigMismatch(u64, u64),
    #[error("artifacts disagree on episode count ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("two artifacts carry the same run seed {0}")]
    DuplicateSeed(u64),
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Combines per-seed artifacts of one experiment. Artifacts are sorted by
/// seed first, so the result is independent of argument order.
pub fn aggregate(artifacts: &[&RunArtifact]) -> Result<Summary, AggregateError> {
    if artifacts.is_empty() {
        return Err(AggregateError::Empty);
    }
    let mut by_seed: Vec<&RunArtifact> = artifacts.to_vec();
    by_seed.sort_by_key(|a| a.run_seed);
    for pair in by_seed.windows(2) {
        if pair[0].run_seed == pair[1].run_seed {
            return Err(AggregateError::DuplicateSeed(pair[0].run_seed));
        }
    }
    let first = by_seed[0];
    for a in &by_seed[1..] {
        if !first.config.matches_modulo_seeds(&a.config) {
            return Err(AggregateError::ConfigMismatch(first.run_seed, a.run_seed));
        }
        if a.rows.len() != first.rows.len() {
            return Err(AggregateError::LengthMismatch(
                first.rows.len(),
                a.rows.len(),
            ));
        }
    }
    let n = by_seed.len();
    let mut rows = Vec::with_capacity(first.rows.len());
    for e in 0..first.rows.len() {
        let returns: Vec<f64> = by_seed.iter().map(|a| a.rows[e].mean_return).collect();
        let rates: Vec<f64> = by_seed.iter().map(|a| a.rows[e].mistake_rate).collect();
        let (rm, rs) = mean_and_se(&returns);
        let (mm, ms) = mean_and_se(&rates);
        rows.push(SummaryRow {
            episode: first.rows[e].episode,
            n,
            return_mean: rm,
            return_se: rs,
            mistake_rate_mean: mm,
            mistake_rate_se: ms,
        });
    }
    Ok(Summary {
        rows,
        degenerate_sample: n == 1,
    })
}

/// 95% one-sided normal quantile, the bar for "significantly increasing".
pub const MK_Z_95: f64 = 1.6448536269514722;

/// Mann-Kendall trend statistic, normalized. Positive z favors an upward
/// trend. Tie groups get the standard variance correction; a series with no
/// untied pair returns 0.
pub fn mann_kendall_z(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mut s = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            s += match xs[j].partial_cmp(&xs[i]).expect("finite metric values") {
                std::cmp::Ordering::Greater => 1,
                std::cmp::Ordering::Less => -1,
                std::cmp::Ordering::Equal => 0,
            };
        }
    }
    let nf = n as f64;
    let mut var = nf * (nf - 1.0) * (2.0 * nf + 5.0) / 18.0;
    let mut sorted: Vec<f64> = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        if t > 1.0 {
            var -= t * (t - 1.0) * (2.0 * t + 5.0) / 18.0;
        }
        i = j;
    }
    if var <= 0.0 {
        return 0.0;
    }
    let sd = var.sqrt();
    // Continuity correction.
    if s > 0 {
        (s as f64 - 1.0) / sd
    } else if s < 0 {
        (s as f64 + 1.0) / sd
    } else {
        0.0
    }
}

/// True when the series shows no significant upward trend at 95%.
pub fn trend_non_increasing(xs: &[f64]) -> bool {
    mann_kendall_z(xs) <= MK_Z_95
}

/// Splits a run into `parts` contiguous windows and reports the mistake
/// rate of each window (mistakes / steps within the window, not cumulative).
pub fn windowed_mistake_rates(artifact: &RunArtifact, parts: usize) -> Vec<f64> {
    assert!(parts > 0);
    let rows = &artifact.rows;
    if rows.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(parts);
    let len = rows.len();
    for p in 0..parts {
        let lo = len * p / parts;
        let hi = len * (p + 1) / parts;
        let mistakes: u64 = rows[lo..hi].iter().map(|r| r.mistake_count).sum();
        let steps: u64 = rows[lo..hi].iter().map(|r| r.step_count).sum();
        out.push(if steps == 0 {
            0.0
        } else {
            mistakes as f64 / steps as f64
        });
    }
    out
}

/// Mean return over the last quarter of a run's episodes.
pub fn final_quartile_return(artifact: &RunArtifact) -> f64 {
    let rows = &artifact.rows;
    assert!(!rows.is_empty(), "final quartile of an empty run");
    let lo = rows.len() * 3 / 4;
    let tail = &rows[lo..];
    tail.iter().map(|r| r.mean_return).sum::<f64>() / tail.len() as f64
}
