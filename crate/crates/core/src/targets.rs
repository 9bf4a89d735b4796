//! Citation counts to standardized log monthly-rate targets.
//!
//! `target = (ln(citations / months + delta) - mu) / sigma`, with `mu` and
//! `sigma` fitted on the training split only.

use serde::{Deserialize, Serialize};

use crate::corpus::DocumentRecord;
use crate::error::{Error, Result};
use crate::month::YearMonth;

/// One citation spread over the 2000-01 to 2024-12 horizon (299 months).
pub const DEFAULT_DELTA: f64 = 1.0 / 299.0;

pub fn months_elapsed(pub_date: YearMonth, cutoff: YearMonth) -> Result<u32> {
    if pub_date > cutoff {
        return Err(Error::invalid(format!(
            "publication date {pub_date} is after the cutoff {cutoff}"
        )));
    }
    Ok((cutoff.ordinal() - pub_date.ordinal()).max(1) as u32)
}

pub fn monthly_rate(citations: u64, months: u32) -> Result<f64> {
    if months < 1 {
        return Err(Error::invalid("monthly rate needs at least one month"));
    }
    Ok(citations as f64 / months as f64)
}

pub fn log_rate(rate: f64, delta: f64) -> f64 {
    debug_assert!(rate >= 0.0 && delta > 0.0);
    (rate + delta).ln()
}

/// Unstandardized log rate for one document.
pub fn document_log_rate(doc: &DocumentRecord, delta: f64, cutoff: YearMonth) -> Result<f64> {
    let months = months_elapsed(doc.publication_date, cutoff)?;
    Ok(log_rate(monthly_rate(doc.total_citations, months)?, delta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetStats {
    pub mu: f64,
    pub sigma: f64,
    pub delta: f64,
    pub cutoff: YearMonth,
}

pub fn fit_stats(train_log_rates: &[f64], delta: f64, cutoff: YearMonth) -> Result<TargetStats> {
    if train_log_rates.len() < 2 {
        return Err(Error::invalid("fit_stats needs at least two values"));
    }
    if !(delta > 0.0) {
        return Err(Error::invalid(format!("delta must be positive, got {delta}")));
    }
    let n = train_log_rates.len() as f64;
    let mu = train_log_rates.iter().sum::<f64>() / n;
    let var = train_log_rates.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let sigma = var.sqrt();
    if !(sigma > 0.0) || train_log_rates.iter().all(|&v| v == train_log_rates[0]) {
        return Err(Error::DegenerateSigma);
    }
    Ok(TargetStats {
        mu,
        sigma,
        delta,
        cutoff,
    })
}

impl TargetStats {
    /// Fits on the log rates of `train_docs`.
    pub fn fit_documents(train_docs: &[DocumentRecord], delta: f64, cutoff: YearMonth) -> Result<Self> {
        let rates = train_docs
            .iter()
            .map(|d| document_log_rate(d, delta, cutoff))
            .collect::<Result<Vec<_>>>()?;
        fit_stats(&rates, delta, cutoff)
    }

    pub fn standardize(&self, value: f64) -> f64 {
        (value - self.mu) / self.sigma
    }

    pub fn destandardize(&self, z: f64) -> f64 {
        z * self.sigma + self.mu
    }

    pub fn target(&self, doc: &DocumentRecord) -> Result<f64> {
        Ok(self.standardize(document_log_rate(doc, self.delta, self.cutoff)?))
    }

    pub fn targets(&self, docs: &[DocumentRecord]) -> Result<Vec<f64>> {
        docs.iter().map(|d| self.target(d)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn ym(s: &str) -> YearMonth {
        s.parse().unwrap()
    }

    #[test]
    fn months() {
        assert_eq!(months_elapsed(ym("2024-12"), ym("2024-12")).unwrap(), 1);
        assert_eq!(months_elapsed(ym("2022-12"), ym("2024-12")).unwrap(), 24);
        // 12 * 24 + 11
        assert_eq!(months_elapsed(ym("2000-01"), ym("2024-12")).unwrap(), 299);
        assert!(months_elapsed(ym("2025-01"), ym("2024-12")).is_err());
    }

    #[test]
    fn rates() {
        assert_eq!(monthly_rate(24, 24).unwrap(), 1.0);
        assert_eq!(monthly_rate(0, 36).unwrap(), 0.0);
        assert_eq!(monthly_rate(7, 3).unwrap(), 7.0 / 3.0);
        assert!(monthly_rate(1, 0).is_err());
    }

    #[test]
    fn log_rate_values() {
        let delta = 0.25;
        assert_eq!(log_rate(1.0 - delta, delta), 0.0);
        assert_eq!(log_rate(0.0, 1.0), 0.0);
        assert!(log_rate(0.0, DEFAULT_DELTA).is_finite());
    }

    #[test]
    fn fit_stats_basic() {
        let s = fit_stats(&[-1.0, 1.0], 0.1, ym("2024-12")).unwrap();
        assert_eq!((s.mu, s.sigma), (0.0, 1.0));
        assert!(matches!(fit_stats(&[5.0, 5.0, 5.0], 0.1, ym("2024-12")), Err(Error::DegenerateSigma)));
        assert!(fit_stats(&[1.0], 0.1, ym("2024-12")).is_err());
    }

    #[test]
    fn fit_stats_recovers_gaussian_parameters() {
        let (mu, sigma, n) = (1.7, 0.8, 10_000usize);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dist = Normal::new(mu, sigma).unwrap();
        let xs: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        let s = fit_stats(&xs, 0.1, ym("2024-12")).unwrap();
        let se_mu = sigma / (n as f64).sqrt();
        let se_sigma = sigma / (2.0 * n as f64).sqrt();
        assert!((s.mu - mu).abs() < 3.0 * se_mu, "{}", s.mu);
        assert!((s.sigma - sigma).abs() < 3.0 * se_sigma, "{}", s.sigma);
    }

    #[test]
    fn standardize_points() {
        let s = TargetStats { mu: 2.0, sigma: 0.5, delta: 0.1, cutoff: ym("2024-12") };
        assert_eq!(s.standardize(2.0), 0.0);
        assert_eq!(s.standardize(2.5), 1.0);
    }

    #[test]
    fn stats_json_shape() {
        let s = TargetStats { mu: 0.5, sigma: 2.0, delta: 0.25, cutoff: ym("2024-12") };
        let v: serde_json::Value = serde_json::to_value(s).unwrap();
        assert_eq!(v, serde_json::json!({"mu": 0.5, "sigma": 2.0, "delta": 0.25, "cutoff": "2024-12"}));
    }

    proptest! {
        #[test]
        fn round_trip(v in -1e3f64..1e3, mu in -10f64..10.0, sigma in 0.01f64..10.0) {
            let s = TargetStats { mu, sigma, delta: 0.1, cutoff: ym("2024-12") };
            let back = s.destandardize(s.standardize(v));
            prop_assert!((back - v).abs() <= 1e-12 * v.abs().max(1.0));
        }

        #[test]
        fn monotone_in_citations(a in 0u64..10_000, b in 0u64..10_000, year in 2000i32..2024, month in 1u32..=12) {
            prop_assume!(a < b);
            let date = YearMonth::new(year, month).unwrap();
            let cutoff = ym("2024-12");
            let m = months_elapsed(date, cutoff).unwrap();
            let ra = log_rate(monthly_rate(a, m).unwrap(), DEFAULT_DELTA);
            let rb = log_rate(monthly_rate(b, m).unwrap(), DEFAULT_DELTA);
            prop_assert!(ra < rb);
        }

        #[test]
        fn standardized_train_targets_are_unit(xs in proptest::collection::vec(-5f64..5.0, 2..200)) {
            prop_assume!(xs.iter().any(|&x| (x - xs[0]).abs() > 1e-3));
            let s = fit_stats(&xs, 0.1, ym("2024-12")).unwrap();
            let z: Vec<f64> = xs.iter().map(|&x| s.standardize(x)).collect();
            let n = z.len() as f64;
            let mean = z.iter().sum::<f64>() / n;
            let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
    }
}
