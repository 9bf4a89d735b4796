//! Document records, ingestion, filtering and splitting.

mod render;
mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::month::YearMonth;

pub use render::{render, render_markdown, Block, Layout, Region, Rendered};
pub use synth::{synthesize, Marker, SignalRegion, SignalSpec, SyntheticCorpus};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub heading: String,
    pub body: String,
}

/// One manuscript: structured text plus publication date and citation count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub sections: Vec<Section>,
    pub captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub journal: Option<String>,
    pub publication_date: YearMonth,
    pub total_citations: u64,
}

impl DocumentRecord {
    pub fn has_body(&self) -> bool {
        self.sections.iter().any(|s| !s.body.trim().is_empty())
    }

    /// Checks the record-level invariants against a corpus cutoff.
    pub fn validate(&self, cutoff: YearMonth) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::invalid("document id is empty"));
        }
        let earliest = YearMonth::new(2000, 1)?;
        if self.publication_date < earliest || self.publication_date > cutoff {
            return Err(Error::invalid(format!(
                "document `{}` published {} outside [{earliest}, {cutoff}]",
                self.id, self.publication_date
            )));
        }
        Ok(())
    }
}

/// Reads a JSON Lines corpus. Blank lines are ignored.
pub fn ingest(path: impl AsRef<Path>) -> Result<Vec<DocumentRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}

pub fn parse_jsonl(text: &str) -> Result<Vec<DocumentRecord>> {
    let mut seen = HashSet::new();
    let mut docs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: DocumentRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if doc.id.is_empty() {
            return Err(Error::Parse {
                line: idx + 1,
                message: "empty `id`".into(),
            });
        }
        if !seen.insert(doc.id.clone()) {
            return Err(Error::DuplicateId(doc.id));
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn to_jsonl(docs: &[DocumentRecord]) -> Result<String> {
    let mut out = String::new();
    for doc in docs {
        out.push_str(&serde_json::to_string(doc)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, docs: &[DocumentRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_jsonl(docs)?).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterPolicy {
    pub min_chars: usize,
    pub max_chars: usize,
    pub require_abstract: bool,
    pub require_body: bool,
    /// Minimum fraction of ASCII characters in the rendered text; a cheap
    /// stand-in for language identification. `None` disables the check.
    pub min_ascii_ratio: Option<f64>,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            min_chars: 200,
            max_chars: 200_000,
            require_abstract: true,
            require_body: true,
            min_ascii_ratio: Some(0.9),
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.min_chars == 0 || self.min_chars >= self.max_chars {
            return Err(Error::invalid(format!(
                "filter policy needs 0 < min_chars < max_chars, got {} and {}",
                self.min_chars, self.max_chars
            )));
        }
        if let Some(r) = self.min_ascii_ratio {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::invalid(format!("min_ascii_ratio {r} not in [0, 1]")));
            }
        }
        Ok(())
    }

    /// First failing criterion, completeness before length before language.
    pub fn check(&self, doc: &DocumentRecord) -> Option<RejectReason> {
        if self.require_abstract && doc.abstract_text.trim().is_empty() {
            return Some(RejectReason::MissingAbstract);
        }
        if self.require_body && !doc.has_body() {
            return Some(RejectReason::MissingBody);
        }
        let text = render_markdown(doc);
        let chars = text.chars().count();
        if chars < self.min_chars {
            return Some(RejectReason::TooShort);
        }
        if chars > self.max_chars {
            return Some(RejectReason::TooLong);
        }
        if let Some(min_ratio) = self.min_ascii_ratio {
            if chars > 0 {
                let ascii = text.chars().filter(char::is_ascii).count();
                if (ascii as f64) / (chars as f64) < min_ratio {
                    return Some(RejectReason::NonEnglish);
                }
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TooShort,
    TooLong,
    MissingAbstract,
    MissingBody,
    NonEnglish,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub id: String,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default)]
pub struct FilterOutcome {
    pub kept: Vec<DocumentRecord>,
    pub rejected: Vec<Rejection>,
}

pub fn filter_corpus(docs: Vec<DocumentRecord>, policy: &FilterPolicy) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for doc in docs {
        match policy.check(&doc) {
            None => out.kept.push(doc),
            Some(reason) => out.rejected.push(Rejection { id: doc.id, reason }),
        }
    }
    out
}

/// Case-folded title with whitespace runs collapsed.
pub fn dedup_key(title: &str) -> String {
    title
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Keeps the first document per normalized title, preserving input order.
pub fn dedup(docs: Vec<DocumentRecord>) -> Vec<DocumentRecord> {
    let mut seen = HashSet::new();
    docs.into_iter()
        .filter(|d| seen.insert(dedup_key(&d.title)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Train,
    Test,
}

impl Subset {
    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Test => "test",
        }
    }
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Subset::Train),
            "test" => Ok(Subset::Test),
            _ => Err(Error::invalid(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub ratio: f64,
    pub assignment: BTreeMap<String, Subset>,
}

impl SplitAssignment {
    pub fn subset_of(&self, id: &str) -> Option<Subset> {
        self.assignment.get(id).copied()
    }

    pub fn count(&self, subset: Subset) -> usize {
        self.assignment.values().filter(|&&s| s == subset).count()
    }

    /// Splits `docs` into (train, test) preserving order; unknown ids are dropped.
    pub fn partition(&self, docs: &[DocumentRecord]) -> (Vec<DocumentRecord>, Vec<DocumentRecord>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for doc in docs {
            match self.subset_of(&doc.id) {
                Some(Subset::Train) => train.push(doc.clone()),
                Some(Subset::Test) => test.push(doc.clone()),
                None => {}
            }
        }
        (train, test)
    }

    pub fn select(&self, docs: &[DocumentRecord], subset: Subset) -> Vec<DocumentRecord> {
        docs.iter()
            .filter(|d| self.subset_of(&d.id) == Some(subset))
            .cloned()
            .collect()
    }
}

/// Seeded train/test assignment. Depends only on the set of ids, the ratio
/// and the seed, not on input order.
pub fn split(docs: &[DocumentRecord], ratio: f64, seed: u64) -> Result<SplitAssignment> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio {ratio} not in (0, 1)")));
    }
    if docs.len() < 2 {
        return Err(Error::invalid(format!(
            "split needs at least 2 documents, got {}",
            docs.len()
        )));
    }
    let mut ids: Vec<&str> = docs.iter().map(|d| d.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::DuplicateId(w[0].to_string()));
    }
    let n = ids.len();
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let assignment = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let subset = if i < n_train { Subset::Train } else { Subset::Test };
            (id.to_string(), subset)
        })
        .collect();
    Ok(SplitAssignment {
        seed,
        ratio,
        assignment,
    })
}

/// Documents strictly before `cutoff` train; the rest form the holdout,
/// sorted by publication date.
pub fn temporal_split(
    docs: &[DocumentRecord],
    cutoff: YearMonth,
) -> (Vec<DocumentRecord>, Vec<DocumentRecord>) {
    let (train, mut holdout): (Vec<_>, Vec<_>) = docs
        .iter()
        .cloned()
        .partition(|d| d.publication_date < cutoff);
    holdout.sort_by_key(|d| d.publication_date);
    (train, holdout)
}
