use std::cmp::Ordering;

use crate::profiler::FlatProfile;

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileDiffRow {
    pub name: String,
    pub calls_a: Option<u64>,
    pub calls_b: Option<u64>,
    pub mean_a_ns: Option<f64>,
    pub mean_b_ns: Option<f64>,
    /// mean_a / mean_b; `None` for one-sided rows.
    pub mean_ratio: Option<f64>,
    pub flagged: bool,
}

impl ProfileDiffRow {
    pub fn one_sided(&self) -> bool {
        self.mean_ratio.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("threshold must be greater than 1, got {0}")]
pub struct ThresholdError(pub f64);

/// Compares per-name means of two profiles. Rows are ordered by decreasing
/// |ln ratio|, ties by name; names present on one side only come last.
/// Means below 1 ns are treated as 1 ns so the ratio stays finite.
pub fn diff_profiles(a: &FlatProfile, b: &FlatProfile, threshold: f64) -> Result<Vec<ProfileDiffRow>, ThresholdError> {
    if !threshold.is_finite() || threshold <= 1.0 {
        return Err(ThresholdError(threshold));
    }
    let mut names: Vec<&String> = a.keys().chain(b.keys()).collect();
    names.sort();
    names.dedup();
    let mut rows: Vec<ProfileDiffRow> = names
        .into_iter()
        .map(|name| {
            let ea = a.get(name);
            let eb = b.get(name);
            let mean_a = ea.map(|e| e.mean_ns());
            let mean_b = eb.map(|e| e.mean_ns());
            let ratio = match (mean_a, mean_b) {
                (Some(x), Some(y)) => Some(x.max(1.0) / y.max(1.0)),
                _ => None,
            };
            ProfileDiffRow {
                name: name.clone(),
                calls_a: ea.map(|e| e.calls),
                calls_b: eb.map(|e| e.calls),
                mean_a_ns: mean_a,
                mean_b_ns: mean_b,
                mean_ratio: ratio,
                flagged: ratio.is_some_and(|r| r > threshold || r < 1.0 / threshold),
            }
        })
        .collect();
    rows.sort_by(|x, y| match (x.mean_ratio, y.mean_ratio) {
        (Some(rx), Some(ry)) => ry.ln().abs().total_cmp(&rx.ln().abs()).then_with(|| x.name.cmp(&y.name)),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => x.name.cmp(&y.name),
    });
    Ok(rows)
}
