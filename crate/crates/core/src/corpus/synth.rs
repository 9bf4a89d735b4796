//! Synthetic corpora with a planted, analytically known signal.
//!
//! Each document carries marker words in one region. Its log citation rate is
//! `base + scale * sum_k w_k (c_k - E[c])` plus Gaussian noise, where `c_k` is
//! the count of marker `k`. Every word (filler or marker) has the same length,
//! so the rendered length of a document does not depend on its target.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DocumentRecord, Section};
use crate::error::{Error, Result};
use crate::month::YearMonth;
use crate::targets;

const FILLERS: &[&str] = &[
    "alpha", "basic", "cable", "delta", "early", "fresh", "grand", "human", "ideal", "joint",
    "known", "light", "major", "north", "often", "prime",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalRegion {
    Title,
    Abstract,
    Body,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    pub word: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignalSpec {
    pub region: SignalRegion,
    pub markers: Vec<Marker>,
    /// Each marker count is uniform on `0..=max_count`.
    pub max_count: u32,
    pub signal_std: f64,
    pub noise_std: f64,
    pub base_log_rate: f64,
    pub title_words: usize,
    pub abstract_words: usize,
    pub body_words: usize,
    pub date_start: YearMonth,
    pub date_end: YearMonth,
    pub cutoff: YearMonth,
    pub delta: f64,
}

impl Default for SignalSpec {
    fn default() -> Self {
        Self {
            region: SignalRegion::Abstract,
            markers: vec![
                Marker { word: "QUARK".into(), weight: 1.0 },
                Marker { word: "ZEBRA".into(), weight: 0.6 },
                Marker { word: "VIXEN".into(), weight: -0.8 },
            ],
            max_count: 3,
            signal_std: 1.0,
            noise_std: 0.3,
            base_log_rate: 2.0,
            title_words: 3,
            abstract_words: 10,
            body_words: 20,
            date_start: YearMonth::new(2000, 1).unwrap(),
            date_end: YearMonth::new(2022, 12).unwrap(),
            cutoff: YearMonth::new(2024, 12).unwrap(),
            delta: targets::DEFAULT_DELTA,
        }
    }
}

impl SignalSpec {
    fn region_words(&self) -> usize {
        match self.region {
            SignalRegion::Title => self.title_words,
            SignalRegion::Abstract => self.abstract_words,
            SignalRegion::Body => self.body_words,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.markers.is_empty() {
            return Err(Error::invalid("signal spec has no markers"));
        }
        let needed = self.markers.len() * self.max_count as usize;
        if needed > self.region_words() {
            return Err(Error::invalid(format!(
                "signal region holds {} words but up to {needed} markers may be planted",
                self.region_words()
            )));
        }
        if self.max_count == 0 || self.markers.iter().all(|m| m.weight == 0.0) {
            return Err(Error::invalid("signal spec plants no variance"));
        }
        if !(self.signal_std > 0.0) || !(self.noise_std >= 0.0) || !(self.delta > 0.0) {
            return Err(Error::invalid("signal_std, delta must be > 0 and noise_std >= 0"));
        }
        if self.date_start > self.date_end || self.date_end > self.cutoff {
            return Err(Error::invalid("need date_start <= date_end <= cutoff"));
        }
        Ok(())
    }

    /// Multiplier on the raw weighted counts giving exactly `signal_std`.
    pub fn weight_scale(&self) -> f64 {
        let m = self.max_count as f64;
        let count_var = ((m + 1.0).powi(2) - 1.0) / 12.0;
        let raw: f64 = self.markers.iter().map(|mk| mk.weight * mk.weight).sum::<f64>() * count_var;
        self.signal_std / raw.sqrt()
    }

    /// Pearson correlation of the ideal predictor with the noisy target.
    pub fn analytic_ceiling(&self) -> f64 {
        self.signal_std / (self.signal_std.powi(2) + self.noise_std.powi(2)).sqrt()
    }
}

/// Generated documents together with their latent target decomposition.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub spec: SignalSpec,
    pub docs: Vec<DocumentRecord>,
    /// Per-document marker counts, in `spec.markers` order.
    pub marker_counts: Vec<Vec<u32>>,
    pub signal: Vec<f64>,
    pub noise: Vec<f64>,
}

impl SyntheticCorpus {
    /// Intended log rate per document (signal plus noise, before rounding
    /// citations to an integer).
    pub fn log_rates(&self) -> Vec<f64> {
        self.signal.iter().zip(&self.noise).map(|(s, n)| s + n).collect()
    }

    /// `sd(signal) / sqrt(sd(signal)^2 + sd(noise)^2)` on the realized draws.
    pub fn empirical_ceiling(&self) -> f64 {
        let vs = population_variance(&self.signal);
        let vn = population_variance(&self.noise);
        (vs / (vs + vn)).sqrt()
    }
}

fn population_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

fn words(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    (0..n)
        .map(|_| FILLERS.choose(rng).expect("non-empty filler list").to_string())
        .collect()
}

pub fn synthesize(n_docs: usize, spec: &SignalSpec, seed: u64) -> Result<SyntheticCorpus> {
    if n_docs == 0 {
        return Err(Error::invalid("synthesize needs n_docs >= 1"));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise_dist = Normal::new(0.0, spec.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let scale = spec.weight_scale();
    let mean_count = spec.max_count as f64 / 2.0;
    let first = spec.date_start.ordinal();
    let last = spec.date_end.ordinal();

    let mut out = SyntheticCorpus {
        spec: spec.clone(),
        docs: Vec::with_capacity(n_docs),
        marker_counts: Vec::with_capacity(n_docs),
        signal: Vec::with_capacity(n_docs),
        noise: Vec::with_capacity(n_docs),
    };

    for i in 0..n_docs {
        let counts: Vec<u32> = spec
            .markers
            .iter()
            .map(|_| rng.random_range(0..=spec.max_count))
            .collect();
        let mut title = words(&mut rng, spec.title_words);
        let mut abstract_words = words(&mut rng, spec.abstract_words);
        let mut body = words(&mut rng, spec.body_words);

        let target = match spec.region {
            SignalRegion::Title => &mut title,
            SignalRegion::Abstract => &mut abstract_words,
            SignalRegion::Body => &mut body,
        };
        let mut slots: Vec<usize> = (0..target.len()).collect();
        slots.shuffle(&mut rng);
        let mut slots = slots.into_iter();
        for (marker, &c) in spec.markers.iter().zip(&counts) {
            for _ in 0..c {
                let slot = slots.next().expect("validated slot budget");
                target[slot] = marker.word.clone();
            }
        }

        let signal = spec.base_log_rate
            + scale
                * spec
                    .markers
                    .iter()
                    .zip(&counts)
                    .map(|(m, &c)| m.weight * (c as f64 - mean_count))
                    .sum::<f64>();
        let noise = noise_dist.sample(&mut rng);
        let date = YearMonth::from_ordinal(rng.random_range(first..=last));
        let months = targets::months_elapsed(date, spec.cutoff)?;
        let rate = ((signal + noise).exp() - spec.delta).max(0.0);
        let total_citations = (rate * months as f64).round() as u64;

        out.docs.push(DocumentRecord {
            id: format!("syn-{i:06}"),
            title: format!("Study {i:05} {}", title.join(" ")),
            abstract_text: abstract_words.join(" "),
            sections: vec![Section {
                heading: "Methods".into(),
                body: body.join(" "),
            }],
            captions: vec![],
            journal: None,
            publication_date: date,
            total_citations,
        });
        out.marker_counts.push(counts);
        out.signal.push(signal);
        out.noise.push(noise);
    }
    Ok(out)
}
