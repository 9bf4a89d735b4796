//! Bounded tanh scaling law `f(p, d) = tanh(b0 + b1 log2 p + b2 log2 d)`,
//! its least-squares fit, and model-size by data-volume grids.
//!
//! `p` is model size in billions of parameters and `d` the percentage of the
//! corpus used for training (1 to 100, not a fraction).

mod grid;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::corpus::Subset;
use crate::error::{Error, Result};

pub use grid::{compare_checkpoints, run_grid, subsample, CellDelta, GridComparison, GridRecipe};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub params_b: f64,
    pub data_pct: f64,
    pub split: Subset,
    pub metric: String,
    pub value: f64,
}

impl GridPoint {
    fn validate(&self) -> Result<()> {
        if !(self.params_b > 0.0 && self.params_b.is_finite()) || !(self.data_pct > 0.0 && self.data_pct.is_finite()) {
            return Err(Error::invalid(format!(
                "grid point needs p > 0 and d > 0, got p = {}, d = {}",
                self.params_b, self.data_pct
            )));
        }
        if !self.value.is_finite() {
            return Err(Error::invalid(format!("grid value {} is not finite", self.value)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub metric: String,
    pub beta0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub residual_mae: f64,
}

impl ScalingFit {
    pub fn from_betas(metric: &str, beta: [f64; 3]) -> Self {
        Self {
            metric: metric.into(),
            beta0: beta[0],
            beta1: beta[1],
            beta2: beta[2],
            residual_mae: 0.0,
        }
    }

    pub fn betas(&self) -> [f64; 3] {
        [self.beta0, self.beta1, self.beta2]
    }
}

fn features(p: f64, d: f64) -> Vector3<f64> {
    Vector3::new(1.0, p.log2(), d.log2())
}

pub fn predict_scaling(fit: &ScalingFit, p: f64, d: f64) -> Result<f64> {
    if !(p > 0.0) || !(d > 0.0) {
        return Err(Error::invalid(format!("scaling law needs p > 0 and d > 0, got p = {p}, d = {d}")));
    }
    Ok(Vector3::from(fit.betas()).dot(&features(p, d)).tanh())
}

const MAX_ITERS: usize = 500;
const STEP_TOL: f64 = 1e-10;

fn sum_sq(beta: &Vector3<f64>, x: &[Vector3<f64>], v: &[f64]) -> f64 {
    x.iter().zip(v).map(|(xi, vi)| (beta.dot(xi).tanh() - vi).powi(2)).sum()
}

/// Damped Gauss-Newton (Levenberg-Marquardt) on the squared residuals, with
/// the analytic Jacobian `sech^2(u) [1, log2 p, log2 d]`.
pub fn fit_scaling(points: &[GridPoint]) -> Result<ScalingFit> {
    if points.len() < 4 {
        return Err(Error::invalid(format!("scaling fit needs at least 4 points, got {}", points.len())));
    }
    let metric = &points[0].metric;
    if points.iter().any(|pt| &pt.metric != metric || pt.split != points[0].split) {
        return Err(Error::invalid("scaling fit expects points of a single metric and split"));
    }
    for pt in points {
        pt.validate()?;
    }
    let distinct = |f: fn(&GridPoint) -> f64| {
        let mut xs: Vec<f64> = points.iter().map(f).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        xs.len()
    };
    if distinct(|pt| pt.params_b) < 2 || distinct(|pt| pt.data_pct) < 2 {
        return Err(Error::invalid("degenerate design: need at least two distinct p and two distinct d"));
    }

    // Canonical order so the result does not depend on input order.
    let mut sorted: Vec<&GridPoint> = points.iter().collect();
    sorted.sort_by(|a, b| {
        (a.params_b, a.data_pct, a.value)
            .partial_cmp(&(b.params_b, b.data_pct, b.value))
            .expect("finite")
    });
    let x: Vec<Vector3<f64>> = sorted.iter().map(|pt| features(pt.params_b, pt.data_pct)).collect();
    let v: Vec<f64> = sorted.iter().map(|pt| pt.value).collect();

    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let mut beta = Vector3::new(mean.clamp(-0.999, 0.999).atanh(), 0.0, 0.0);
    let mut cost = sum_sq(&beta, &x, &v);
    let mut lambda = 1e-3;
    for _ in 0..MAX_ITERS {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (xi, vi) in x.iter().zip(&v) {
            let y = beta.dot(xi).tanh();
            let j = xi * (1.0 - y * y);
            jtj += j * j.transpose();
            jtr += j * (y - vi);
        }
        let converged = loop {
            let mut damped = jtj;
            for k in 0..3 {
                damped[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-jtr))) else {
                lambda *= 10.0;
                if lambda > 1e12 {
                    break true;
                }
                continue;
            };
            let candidate = beta + step;
            let c_cost = sum_sq(&candidate, &x, &v);
            if c_cost <= cost {
                beta = candidate;
                cost = c_cost;
                lambda = (lambda / 10.0).max(1e-12);
                break step.norm() < STEP_TOL;
            }
            lambda *= 10.0;
            if lambda > 1e12 {
                // No descent direction left at machine precision.
                break true;
            }
        };
        if converged {
            break;
        }
    }
    let residual_mae = x.iter().zip(&v).map(|(xi, vi)| (beta.dot(xi).tanh() - vi).abs()).sum::<f64>() / v.len() as f64;
    Ok(ScalingFit {
        metric: metric.clone(),
        beta0: beta[0],
        beta1: beta[1],
        beta2: beta[2],
        residual_mae,
    })
}

/// Points of one split and metric.
pub fn select_points(points: &[GridPoint], split: Subset, metric: &str) -> Vec<GridPoint> {
    points.iter().filter(|pt| pt.split == split && pt.metric == metric).cloned().collect()
}

const GRID_HEADER: &str = "params_b,data_pct,split,metric,value";

pub fn parse_grid_csv(text: &str) -> Result<Vec<GridPoint>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == GRID_HEADER => {}
        _ => return Err(Error::Parse { line: 1, message: format!("expected header {GRID_HEADER}") }),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = |m: String| Error::Parse { line: i + 1, message: m };
            let cols: Vec<&str> = l.split(',').map(str::trim).collect();
            let [p, d, split, metric, value] = cols[..] else {
                return Err(bad(format!("expected 5 columns, got {}", cols.len())));
            };
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
            let pt = GridPoint {
                params_b: num(p)?,
                data_pct: num(d)?,
                split: split.parse().map_err(|e: Error| bad(e.to_string()))?,
                metric: metric.to_string(),
                value: num(value)?,
            };
            pt.validate().map_err(|e| bad(e.to_string()))?;
            Ok(pt)
        })
        .collect()
}

pub fn grid_csv(points: &[GridPoint]) -> String {
    let mut s = format!("{GRID_HEADER}\n");
    for pt in points {
        writeln!(s, "{},{},{},{},{}", pt.params_b, pt.data_pct, pt.split.as_str(), pt.metric, pt.value)
            .expect("write to string");
    }
    s
}

pub fn read_grid_csv(path: &Path) -> Result<Vec<GridPoint>> {
    parse_grid_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_grid_csv(path: &Path, points: &[GridPoint]) -> Result<()> {
    fs::write(path, grid_csv(points)).map_err(|e| Error::io(path, e))
}

/// The published five-model by five-fraction grid (both splits, all five
/// metrics, 250 values).
pub fn reference_grid() -> Vec<GridPoint> {
    parse_grid_csv(include_str!("../../data/table7.csv")).expect("bundled grid parses")
}

/// Published fitted coefficients for the correlation metrics.
pub fn reference_fit(metric: &str) -> Option<ScalingFit> {
    match metric {
        "r" => Some(ScalingFit::from_betas("r", [0.6771, 0.0689, 0.0767])),
        "rho" => Some(ScalingFit::from_betas("rho", [0.6260, 0.0698, 0.0724])),
        _ => None,
    }
}

#[cfg(test)]
mod tests;
