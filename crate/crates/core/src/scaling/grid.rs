//! Training grids over model configurations and data fractions.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::GridPoint;
use crate::corpus::{DocumentRecord, Subset};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, MetricReport, METRIC_NAMES};
use crate::model::{ModelConfig, RegressionLM};
use crate::month::YearMonth;
use crate::targets::TargetStats;
use crate::training::{pretrain_lm, train_two_phase, PhaseConfig, TwoPhaseRecipe};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRecipe {
    pub training: TwoPhaseRecipe,
    /// Language-model pretraining on the full train split before any cell
    /// is trained. `None` keeps the random initialization.
    #[serde(default)]
    pub pretrain: Option<PhaseConfig>,
    pub subsample_seed: u64,
    pub delta: f64,
    pub cutoff: YearMonth,
    /// Concurrent cells; 0 uses the global thread pool.
    #[serde(default)]
    pub workers: usize,
}

/// Deterministic subsample of `round(fraction * n)` documents. Smaller
/// fractions are prefixes of the same permutation, so subsets are nested.
pub fn subsample(docs: &[DocumentRecord], fraction: f64, seed: u64) -> Result<Vec<DocumentRecord>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("data fraction {fraction} not in (0, 1]")));
    }
    let k = (fraction * docs.len() as f64).round() as usize;
    if k < 2 {
        return Err(Error::invalid(format!(
            "fraction {fraction} of {} documents leaves {k}; need at least 2",
            docs.len()
        )));
    }
    let mut idx: Vec<usize> = (0..docs.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut keep = idx[..k].to_vec();
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| docs[i].clone()).collect())
}

fn report_points(report: &MetricReport, params_b: f64, data_pct: f64, split: Subset) -> Vec<GridPoint> {
    METRIC_NAMES
        .iter()
        .map(|&m| GridPoint {
            params_b,
            data_pct,
            split,
            metric: m.into(),
            value: report.get(m).expect("known metric"),
        })
        .collect()
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Trains and evaluates every (config, fraction) cell. Each cell yields five
/// metrics on its training subsample and five on the full test split, in
/// config-major, fraction-minor order regardless of completion order.
pub fn run_grid(
    train_docs: &[DocumentRecord],
    test_docs: &[DocumentRecord],
    configs: &[ModelConfig],
    fractions: &[f64],
    recipe: &GridRecipe,
) -> Result<Vec<GridPoint>> {
    if configs.is_empty() || fractions.is_empty() {
        return Err(Error::invalid("grid needs at least one model config and one data fraction"));
    }
    let subsets: Vec<Vec<DocumentRecord>> = fractions
        .iter()
        .map(|&f| subsample(train_docs, f, recipe.subsample_seed))
        .collect::<Result<_>>()?;

    with_pool(recipe.workers, || -> Result<Vec<GridPoint>> {
        let bases: Vec<RegressionLM> = configs
            .par_iter()
            .map(|c| {
                let mut model = RegressionLM::new(c.clone())?;
                if let Some(pre) = &recipe.pretrain {
                    pretrain_lm(&mut model, train_docs, pre)?;
                }
                Ok(model)
            })
            .collect::<Result<_>>()?;

        let cells: Vec<(usize, usize)> = (0..configs.len())
            .flat_map(|c| (0..fractions.len()).map(move |f| (c, f)))
            .collect();
        let per_cell: Vec<Vec<GridPoint>> = cells
            .par_iter()
            .map(|&(c, f)| {
                let train = &subsets[f];
                let stats = TargetStats::fit_documents(train, recipe.delta, recipe.cutoff)?;
                let mut model = bases[c].clone();
                train_two_phase(&mut model, train, &stats, &recipe.training)?;
                let params_b = model.config.param_count() as f64 / 1e9;
                let data_pct = fractions[f] * 100.0;
                log::info!("grid cell p = {params_b:e}, d = {data_pct}% trained");
                let mut pts = report_points(&evaluate(&model, train, &stats)?, params_b, data_pct, Subset::Train);
                pts.extend(report_points(&evaluate(&model, test_docs, &stats)?, params_b, data_pct, Subset::Test));
                Ok(pts)
            })
            .collect::<Result<_>>()?;
        Ok(per_cell.into_iter().flatten().collect())
    })?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDelta {
    pub params_b: f64,
    pub data_pct: f64,
    pub split: Subset,
    pub metric: String,
    /// `value_a - value_b`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridComparison {
    pub deltas: Vec<CellDelta>,
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
}

type CellKey = (u64, u64, Subset, String);

fn key(pt: &GridPoint) -> CellKey {
    (pt.params_b.to_bits(), pt.data_pct.to_bits(), pt.split, pt.metric.clone())
}

/// Per-cell differences over the cells both grids share, in `grid_a` order.
pub fn compare_checkpoints(grid_a: &[GridPoint], grid_b: &[GridPoint]) -> Result<GridComparison> {
    let b: BTreeMap<CellKey, f64> = grid_b.iter().map(|pt| (key(pt), pt.value)).collect();
    let deltas: Vec<CellDelta> = grid_a
        .iter()
        .filter_map(|pt| {
            b.get(&key(pt)).map(|vb| CellDelta {
                params_b: pt.params_b,
                data_pct: pt.data_pct,
                split: pt.split,
                metric: pt.metric.clone(),
                delta: pt.value - vb,
            })
        })
        .collect();
    if deltas.is_empty() {
        return Err(Error::invalid("grids share no (p, d, split, metric) cells"));
    }
    let count = |f: fn(f64) -> bool| deltas.iter().filter(|d| f(d.delta)).count();
    Ok(GridComparison {
        positive: count(|d| d > 0.0),
        negative: count(|d| d < 0.0),
        zero: count(|d| d == 0.0),
        deltas,
    })
}
