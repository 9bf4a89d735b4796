//! Pearson, Spearman, R², MAE and MSE.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pair(pred: &[f64], truth: &[f64], min_n: usize) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            pred.len(),
            truth.len()
        )));
    }
    if pred.len() < min_n {
        return Err(Error::invalid(format!("need at least {min_n} samples, got {}", pred.len())));
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample covariance over the product of sample standard deviations.
pub fn pearson(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth, 2)?;
    let (mp, mt) = (mean(pred), mean(truth));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(truth) {
        let (dp, dt) = (p - mp, t - mt);
        sxy += dp * dt;
        sxx += dp * dp;
        syy += dt * dt;
    }
    if sxx == 0.0 {
        return Err(Error::UndefinedCorrelation("constant predictions"));
    }
    if syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant targets"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the positions they occupy.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && xs[order[j]] == xs[order[i]] {
            j += 1;
        }
        // Positions i..j (0-based) hold equal values.
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

pub fn spearman(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth, 2)?;
    pearson(&average_ranks(pred), &average_ranks(truth))
}

pub fn r_squared(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth, 2)?;
    let mt = mean(truth);
    let ss_tot: f64 = truth.iter().map(|t| (t - mt).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedCorrelation("constant targets"));
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (t - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth, 1)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth, 1)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub r: f64,
    pub rho: f64,
    pub r2: f64,
    pub mae: f64,
    pub mse: f64,
    pub n: usize,
}

/// Names used for the metric column of grid files.
pub const METRIC_NAMES: [&str; 5] = ["r", "rho", "r2", "mse", "mae"];

impl MetricReport {
    pub fn compute(pred: &[f64], truth: &[f64]) -> Result<Self> {
        Ok(Self {
            r: pearson(pred, truth)?,
            rho: spearman(pred, truth)?,
            r2: r_squared(pred, truth)?,
            mae: mae(pred, truth)?,
            mse: mse(pred, truth)?,
            n: pred.len(),
        })
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        match metric {
            "r" => Some(self.r),
            "rho" => Some(self.rho),
            "r2" => Some(self.r2),
            "mse" => Some(self.mse),
            "mae" => Some(self.mae),
            _ => None,
        }
    }

    /// Three-decimal row in the `r | rho | R2 | MSE | MAE` column order.
    pub fn table_row(&self) -> String {
        format!(
            "{:.3} | {:.3} | {:.3} | {:.3} | {:.3}",
            self.r, self.rho, self.r2, self.mse, self.mae
        )
    }
}
