//! Low-rank adapters on attention projections.
//!
//! An adapted projection computes `x W + s * (drop(x) A^T) B^T` with
//! `A: rank x d_in`, `B: d_out x rank` and `s = alpha / rank`. `B` starts at
//! zero, so attaching adapters leaves the model function unchanged.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::RegressionLM;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    pub fn name(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Key => "k",
            Projection::Value => "v",
            Projection::Output => "o",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<Projection>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            dropout: 0.05,
            targets: vec![Projection::Query, Projection::Value],
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank < 1 {
            return Err(Error::invalid("LoRA rank must be >= 1"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::invalid("LoRA alpha must be > 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("LoRA dropout must lie in [0, 1)"));
        }
        if self.targets.is_empty() {
            return Err(Error::invalid("LoRA needs at least one target projection"));
        }
        Ok(())
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

/// Adapters attached to one transformer layer, in target order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerAdapters {
    pub slots: Vec<(Projection, Adapter)>,
}

impl LayerAdapters {
    pub fn get(&self, p: Projection) -> Option<&Adapter> {
        self.slots.iter().find(|(q, _)| *q == p).map(|(_, a)| a)
    }

    pub fn get_mut(&mut self, p: Projection) -> Option<&mut Adapter> {
        self.slots.iter_mut().find(|(q, _)| *q == p).map(|(_, a)| a)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Projection, &Adapter)> {
        self.slots.iter().map(|(p, a)| (*p, a))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (Projection, &mut Adapter)> {
        self.slots.iter_mut().map(|(p, a)| (*p, a))
    }
}

impl RegressionLM {
    /// Attaches adapters: `A` Gaussian with std `1/sqrt(d_in)`, `B` zero.
    pub fn apply_lora(&mut self, config: &LoraConfig, seed: u64) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::Adapters("already attached"));
        }
        config.validate()?;
        let mut targets: Vec<Projection> = Vec::new();
        for p in &config.targets {
            if !targets.contains(p) {
                targets.push(*p);
            }
        }
        let d = self.config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        let adapters = (0..self.config.n_layers)
            .map(|_| LayerAdapters {
                slots: targets
                    .iter()
                    .map(|&p| {
                        let a = Array2::from_shape_simple_fn((config.rank, d), || dist.sample(&mut rng));
                        let b = Array2::zeros((d, config.rank));
                        (p, Adapter { a, b })
                    })
                    .collect(),
            })
            .collect();
        self.params.adapters = Some(adapters);
        self.lora = Some(LoraConfig { targets, ..config.clone() });
        Ok(())
    }

    /// Folds `s * (B A)^T` into each adapted weight and removes the adapters.
    pub fn merge_lora(&mut self) -> Result<()> {
        let config = self.lora.take().ok_or(Error::Adapters("not attached"))?;
        let adapters = self.params.adapters.take().ok_or(Error::Adapters("not attached"))?;
        let s = config.scaling();
        for (layer, la) in self.params.layers.iter_mut().zip(adapters) {
            for (p, ad) in la.slots {
                let delta = ad.a.t().dot(&ad.b.t());
                layer.projection_mut(p).scaled_add(s, &delta);
            }
        }
        Ok(())
    }
}
