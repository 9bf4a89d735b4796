//! Expanding-window correlation over monthly publication cohorts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{pearson, predict_all};
use crate::corpus::DocumentRecord;
use crate::error::{Error, Result};
use crate::model::RegressionLM;
use crate::month::YearMonth;
use crate::targets::TargetStats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoldoutPoint {
    pub month: YearMonth,
    /// Pearson r over every document from the first holdout month through `month`.
    pub cumulative_r: f64,
    pub n: usize,
}

/// One point per calendar month from the first to the last document month.
/// Months whose cumulative window has fewer than two documents, or a
/// constant vector, are skipped with a warning.
pub fn rolling_pearson(months: &[YearMonth], pred: &[f64], truth: &[f64]) -> Result<Vec<HoldoutPoint>> {
    if months.len() != pred.len() || pred.len() != truth.len() {
        return Err(Error::Shape("months, predictions and targets differ in length".into()));
    }
    if months.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("holdout documents must be sorted by publication date"));
    }
    let (Some(&first), Some(&last)) = (months.first(), months.last()) else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    let mut end = 0;
    let mut month = first;
    loop {
        while end < months.len() && months[end] <= month {
            end += 1;
        }
        if end < 2 {
            log::warn!("holdout month {month}: {end} document(s) so far, correlation skipped");
        } else {
            match pearson(&pred[..end], &truth[..end]) {
                Ok(r) => out.push(HoldoutPoint { month, cumulative_r: r, n: end }),
                Err(e) => log::warn!("holdout month {month}: {e}, skipped"),
            }
        }
        if month == last {
            break;
        }
        month = month.succ();
    }
    Ok(out)
}

/// Predicts the (date-sorted) holdout documents and returns the rolling series.
pub fn temporal_holdout(
    model: &RegressionLM,
    holdout_docs: &[DocumentRecord],
    stats: &TargetStats,
) -> Result<Vec<HoldoutPoint>> {
    if holdout_docs.is_empty() {
        return Err(Error::invalid("holdout set is empty"));
    }
    let months: Vec<YearMonth> = holdout_docs.iter().map(|d| d.publication_date).collect();
    let truth = stats.targets(holdout_docs)?;
    let pred = predict_all(model, holdout_docs)?;
    rolling_pearson(&months, &pred, &truth)
}

pub fn holdout_csv(points: &[HoldoutPoint]) -> String {
    let mut s = String::from("month,cumulative_r\n");
    for p in points {
        writeln!(s, "{},{}", p.month, p.cumulative_r).expect("write to string");
    }
    s
}

pub fn write_holdout_csv(path: &Path, points: &[HoldoutPoint]) -> Result<()> {
    fs::write(path, holdout_csv(points)).map_err(|e| Error::io(path, e))
}

/// Reads `month,cumulative_r` rows back (the `n` column is not stored and is
/// returned as 0).
pub fn read_holdout_csv(path: &Path) -> Result<Vec<HoldoutPoint>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "month,cumulative_r")) => {}
        _ => return Err(Error::Parse { line: 1, message: "expected header month,cumulative_r".into() }),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = |m: String| Error::Parse { line: i + 1, message: m };
            let (m, r) = l.split_once(',').ok_or_else(|| bad("expected two columns".into()))?;
            Ok(HoldoutPoint {
                month: m.parse().map_err(|e: Error| bad(e.to_string()))?,
                cumulative_r: r.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                n: 0,
            })
        })
        .collect()
}
