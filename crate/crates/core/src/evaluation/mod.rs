//! Metrics and evaluation protocols: split evaluation, the temporal-holdout
//! rolling correlation and field ablations.

mod holdout;
mod metrics;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::DocumentRecord;
use crate::error::{Error, Result};
use crate::model::RegressionLM;
use crate::targets::TargetStats;

pub use holdout::{holdout_csv, read_holdout_csv, rolling_pearson, temporal_holdout, write_holdout_csv, HoldoutPoint};
pub use metrics::*;

/// Standardized predictions for every document, in input order.
pub fn predict_all(model: &RegressionLM, docs: &[DocumentRecord]) -> Result<Vec<f64>> {
    docs.par_iter().map(|d| model.predict_document(d)).collect()
}

/// Predicts every document and scores it against its standardized target.
pub fn evaluate(model: &RegressionLM, docs: &[DocumentRecord], stats: &TargetStats) -> Result<MetricReport> {
    if docs.is_empty() {
        return Err(Error::invalid("evaluation selection is empty"));
    }
    let truth = stats.targets(docs)?;
    let pred = predict_all(model, docs)?;
    MetricReport::compute(&pred, &truth)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Title,
    Abstract,
}

impl std::str::FromStr for Field {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "title" => Ok(Self::Title),
            "abstract" => Ok(Self::Abstract),
            _ => Err(Error::invalid(format!("unknown ablation field {s:?} (expected title or abstract)"))),
        }
    }
}

/// Copies of `docs` with `drop` emptied; nothing else changes.
pub fn ablate(docs: &[DocumentRecord], drop: Field) -> Vec<DocumentRecord> {
    docs.iter()
        .cloned()
        .map(|mut d| {
            match drop {
                Field::Title => d.title.clear(),
                Field::Abstract => d.abstract_text.clear(),
            }
            d
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::render_markdown;
    use crate::corpus::tests::doc;

    #[test]
    fn ablation_removes_exactly_one_field() {
        let docs = vec![doc("a", "Some Title", "Some abstract.", "2010-01")];
        let no_title = ablate(&docs, Field::Title);
        let md = render_markdown(&no_title[0]);
        assert!(!md.lines().any(|l| l.starts_with("# ")));
        assert!(md.contains("## Abstract"));
        assert_eq!(no_title[0].abstract_text, docs[0].abstract_text);
        assert_eq!(no_title[0].sections, docs[0].sections);

        let no_abs = ablate(&docs, Field::Abstract);
        let md = render_markdown(&no_abs[0]);
        assert!(!md.contains("## Abstract"));
        assert!(md.starts_with("# Some Title"));
        assert_eq!(ablate(&no_abs, Field::Abstract), no_abs);
        assert_eq!(ablate(&no_title, Field::Title), no_title);
    }

    #[test]
    fn field_parsing() {
        assert_eq!("title".parse::<Field>().unwrap(), Field::Title);
        assert!("body".parse::<Field>().is_err());
    }
}
