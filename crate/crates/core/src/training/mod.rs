//! Two-phase regression training, toy LM pretraining, checkpoints and run
//! manifests.

mod checkpoint;
mod manifest;

use std::f64::consts::PI;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{render_markdown, DocumentRecord};
use crate::error::{Error, Result};
use crate::model::{FreezeMask, LoraConfig, Mode, ParamKind, Params, RegressionLM};
use crate::targets::TargetStats;
use crate::textcodec::{encode, TokenSequence};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use manifest::{corpus_hash, corpus_hash_file, RunManifest, Timing};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// AdamW with a cosine schedule and gradient accumulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_accum_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl PhaseConfig {
    /// Head-only training defaults.
    pub fn phase1() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            grad_accum_steps: 4,
            batch_size: 2,
            epochs: 1,
            seed: 0,
        }
    }

    /// Adapter fine-tuning defaults.
    pub fn phase2() -> Self {
        Self {
            grad_accum_steps: 16,
            batch_size: 1,
            epochs: 3,
            ..Self::phase1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted so a run can be made a no-op.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.grad_accum_steps == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("grad_accum_steps, batch_size and epochs must be >= 1"));
        }
        Ok(())
    }

    fn micro_batches(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    /// Optimizer updates performed over `n` examples, counting the final
    /// partial accumulation window.
    pub fn total_updates(&self, n: usize) -> usize {
        (self.micro_batches(n) * self.epochs).div_ceil(self.grad_accum_steps)
    }
}

/// `base_lr * 0.5 * (1 + cos(pi * step / total_steps))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    let total = total_steps.max(1) as f64;
    let frac = (step as f64 / total).min(1.0);
    base_lr * 0.5 * (1.0 + (PI * frac).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moment {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Optimizer state: one moment pair per trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub global_step: u64,
    pub seed: u64,
    pub moments: Vec<Moment>,
}

impl TrainState {
    pub fn new(model: &RegressionLM, freeze: &FreezeMask, seed: u64) -> Self {
        let moments = model
            .params
            .tensors()
            .into_iter()
            .filter(|t| freeze.trains(t.kind.group()))
            .map(|t| Moment {
                name: t.name,
                m: vec![0.0; t.data.len()],
                v: vec![0.0; t.data.len()],
            })
            .collect();
        Self { global_step: 0, seed, moments }
    }

    /// One AdamW update with decoupled decay on the tensors that own moments.
    /// With a `frame`, the head is stepped in standardized-feature
    /// coordinates and the resulting change mapped back to raw coordinates.
    fn apply(&mut self, params: &mut Params, grads: &Params, lr: f64, weight_decay: f64, frame: Option<&HeadFrame>) {
        self.global_step += 1;
        let t = self.global_step as i32;
        let step = AdamStep {
            lr,
            weight_decay,
            c1: 1.0 - ADAM_BETA1.powi(t),
            c2: 1.0 - ADAM_BETA2.powi(t),
        };
        if let Some(frame) = frame {
            self.apply_head_in_frame(params, grads, &step, frame);
        }
        let mut slots = self.moments.iter_mut().peekable();
        for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
            let Some(slot) = slots.next_if(|s| s.name == p.name) else {
                continue;
            };
            if frame.is_some() && matches!(p.kind, ParamKind::HeadWeight | ParamKind::HeadBias) {
                continue;
            }
            let delta = step.delta(p.data, g.data, slot, p.kind.decays());
            p.data.iter_mut().zip(delta).for_each(|(w, d)| *w += d);
        }
        debug_assert!(slots.next().is_none(), "moment without matching tensor");
    }

    fn apply_head_in_frame(&mut self, params: &mut Params, grads: &Params, step: &AdamStep, frame: &HeadFrame) {
        let w_std = &params.head_w * &frame.sd;
        let b_std = params.head_b[0] + params.head_w.dot(&frame.mean);
        let gb = grads.head_b[0];
        let gw_std = (&grads.head_w - &(&frame.mean * gb)) / &frame.sd;
        let mut slots = self.moments.iter_mut();
        let sw = slots.find(|s| s.name == "head_w").expect("head weight is trainable");
        let dw_std = step.delta(w_std.as_slice().expect("contiguous"), gw_std.as_slice().expect("contiguous"), sw, true);
        let sb = self.moments.iter_mut().find(|s| s.name == "head_b").expect("head bias is trainable");
        let db_std = step.delta(&[b_std], &[gb], sb, false)[0];
        let dw = Array1::from(dw_std) / &frame.sd;
        params.head_b[0] += db_std - dw.dot(&frame.mean);
        params.head_w += &dw;
    }
}

struct AdamStep {
    lr: f64,
    weight_decay: f64,
    c1: f64,
    c2: f64,
}

impl AdamStep {
    /// Updates the moments and returns the parameter change, decay included.
    fn delta(&self, w: &[f64], g: &[f64], slot: &mut Moment, decays: bool) -> Vec<f64> {
        let decay = if decays { self.lr * self.weight_decay } else { 0.0 };
        w.iter()
            .zip(g)
            .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
            .map(|((&wi, &gi), (m, v))| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * gi;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * gi * gi;
                -decay * wi - self.lr * (*m / self.c1) / ((*v / self.c2).sqrt() + ADAM_EPS)
            })
            .collect()
    }
}

/// Per-feature mean and spread of the head inputs, used to precondition head
/// updates. Zero-spread features get unit scale.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadFrame {
    pub mean: Array1<f64>,
    pub sd: Array1<f64>,
}

impl HeadFrame {
    pub fn fit(features: &[Array1<f64>]) -> Result<Self> {
        let Some(first) = features.first() else {
            return Err(Error::invalid("no features to standardize"));
        };
        let n = features.len() as f64;
        let mean = features.iter().fold(Array1::zeros(first.len()), |acc, h| acc + h) / n;
        let sd = features
            .iter()
            .fold(Array1::<f64>::zeros(mean.len()), |acc, h| acc + (h - &mean).mapv(|v| v * v))
            .mapv(|v| {
                let s = (v / n).sqrt();
                if s > 0.0 { s } else { 1.0 }
            });
        Ok(Self { mean, sd })
    }
}

/// Shuffled example order for one epoch; a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Dropout stream for one micro-batch, independent of the shuffling stream.
fn dropout_rng(seed: u64, micro_step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD5A6_1266_F0C9_392C);
    rng.set_stream(micro_step);
    rng
}

/// Shared loop. `micro` adds the mean gradient of a micro-batch into the
/// accumulator and returns its mean loss.
fn run_loop<F>(
    model: &mut RegressionLM,
    n: usize,
    cfg: &PhaseConfig,
    state: &mut TrainState,
    frame: Option<&HeadFrame>,
    mut micro: F,
) -> Vec<f64>
where
    F: FnMut(&RegressionLM, &[usize], &mut ChaCha8Rng, &mut Params) -> f64,
{
    let total = cfg.total_updates(n);
    let mut acc = model.params.zeros_like();
    let mut pending = 0usize;
    let mut update = 0usize;
    let mut trace = Vec::with_capacity(cfg.micro_batches(n) * cfg.epochs);
    let mut flush = |model: &mut RegressionLM, acc: &mut Params, pending: &mut usize, update: &mut usize| {
        acc.scale(1.0 / *pending as f64);
        let lr = cosine_lr(*update, total, cfg.learning_rate);
        state.apply(&mut model.params, acc, lr, cfg.weight_decay, frame);
        for t in acc.tensors_mut() {
            t.data.fill(0.0);
        }
        *pending = 0;
        *update += 1;
    };
    for epoch in 0..cfg.epochs {
        let order = epoch_order(n, cfg.seed, epoch);
        for batch in order.chunks(cfg.batch_size) {
            let mut rng = dropout_rng(cfg.seed, trace.len() as u64);
            trace.push(micro(model, batch, &mut rng, &mut acc));
            pending += 1;
            if pending == cfg.grad_accum_steps {
                flush(model, &mut acc, &mut pending, &mut update);
            }
        }
    }
    if pending > 0 {
        flush(model, &mut acc, &mut pending, &mut update);
    }
    debug_assert_eq!(update, total);
    trace
}

/// Loss trace (one entry per micro-batch) and final optimizer state.
#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub loss_trace: Vec<f64>,
    pub state: TrainState,
}

fn encode_docs(model: &RegressionLM, docs: &[DocumentRecord]) -> Vec<TokenSequence> {
    docs.iter().map(|d| model.encode_document(d)).collect()
}

fn check_training_set(docs: &[DocumentRecord]) -> Result<()> {
    if docs.is_empty() {
        Err(Error::invalid("empty training set"))
    } else {
        Ok(())
    }
}

/// Trains the head alone on standardized targets. The base is frozen and
/// deterministic here, so final hidden features are extracted once.
pub fn train_phase1(
    model: &mut RegressionLM,
    train_docs: &[DocumentRecord],
    stats: &TargetStats,
    cfg: &PhaseConfig,
) -> Result<PhaseOutcome> {
    cfg.validate()?;
    check_training_set(train_docs)?;
    let targets = stats.targets(train_docs)?;
    let features = head_features(model, train_docs)?;
    train_head(model, &features, &targets, cfg)
}

/// Final hidden vector at the last non-pad position of each document.
pub fn head_features(model: &RegressionLM, docs: &[DocumentRecord]) -> Result<Vec<Array1<f64>>> {
    encode_docs(model, docs)
        .into_iter()
        .map(|seq| {
            let h = model.forward_hidden(&seq.ids, &seq.mask())?;
            Ok(h.row(seq.attention_len - 1).to_owned())
        })
        .collect()
}

/// Head-only AdamW on precomputed final hidden vectors. Updates are taken in
/// standardized-feature coordinates (see [`HeadFrame`]); frozen random bases
/// produce features whose spread is tiny next to their mean, which stalls
/// AdamW in raw coordinates.
pub fn train_head(
    model: &mut RegressionLM,
    features: &[Array1<f64>],
    targets: &[f64],
    cfg: &PhaseConfig,
) -> Result<PhaseOutcome> {
    cfg.validate()?;
    if features.is_empty() || features.len() != targets.len() {
        return Err(Error::invalid("head training needs matching, non-empty features and targets"));
    }
    let frame = HeadFrame::fit(features)?;
    let mut state = TrainState::new(model, &FreezeMask::HEAD_ONLY, cfg.seed);
    let loss_trace = run_loop(model, features.len(), cfg, &mut state, Some(&frame), |m, batch, _, acc| {
        let inv = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for &i in batch {
            let err = features[i].dot(&m.params.head_w) + m.head_bias() - targets[i];
            loss += err * err;
            acc.head_w.scaled_add(2.0 * err * inv, &features[i]);
            acc.head_b[0] += 2.0 * err * inv;
        }
        loss * inv
    });
    Ok(PhaseOutcome { loss_trace, state })
}

/// Attaches adapters and trains them jointly with the head.
pub fn train_phase2(
    model: &mut RegressionLM,
    train_docs: &[DocumentRecord],
    stats: &TargetStats,
    cfg: &PhaseConfig,
    lora: &LoraConfig,
    lora_seed: u64,
) -> Result<PhaseOutcome> {
    cfg.validate()?;
    check_training_set(train_docs)?;
    let targets = stats.targets(train_docs)?;
    let frame = HeadFrame::fit(&head_features(model, train_docs)?)?;
    model.apply_lora(lora, lora_seed)?;
    let seqs = encode_docs(model, train_docs);
    let masks: Vec<Vec<bool>> = seqs.iter().map(TokenSequence::mask).collect();
    let freeze = FreezeMask::ADAPTERS_AND_HEAD;
    let mut state = TrainState::new(model, &freeze, cfg.seed);
    let loss_trace = run_loop(model, seqs.len(), cfg, &mut state, Some(&frame), |m, batch, rng, acc| {
        let inv = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for &i in batch {
            let (l, _, g) = m.regression_loss_and_grad(&seqs[i].ids, &masks[i], targets[i], &freeze, Mode::Train(rng));
            loss += l;
            acc.add_scaled(&g, inv);
        }
        loss * inv
    });
    Ok(PhaseOutcome { loss_trace, state })
}

/// Next-token cross-entropy training of the base (embeddings and blocks)
/// over rendered documents. Returns the per-micro-batch loss trace.
pub fn pretrain_lm(model: &mut RegressionLM, docs: &[DocumentRecord], cfg: &PhaseConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if model.params.adapters.is_some() {
        return Err(Error::Adapters("language-model pretraining expects a model without adapters"));
    }
    if docs.is_empty() {
        return Ok(Vec::new());
    }
    let seqs: Vec<Vec<u16>> = docs
        .iter()
        .map(|d| encode(&render_markdown(d), model.config.max_seq_len).ids)
        .collect();
    let freeze = FreezeMask::BASE;
    let mut state = TrainState::new(model, &freeze, cfg.seed);
    Ok(run_loop(model, seqs.len(), cfg, &mut state, None, |m, batch, _, acc| {
        let inv = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for &i in batch {
            let (l, g) = m.lm_loss_and_grad(&seqs[i], &freeze);
            loss += l;
            acc.add_scaled(&g, inv);
        }
        loss * inv
    }))
}

/// Settings for a full head-then-adapters run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPhaseRecipe {
    pub phase1: PhaseConfig,
    pub phase2: PhaseConfig,
    pub lora: LoraConfig,
    #[serde(default)]
    pub lora_seed: u64,
    /// Runs phase 2 only when set.
    #[serde(default = "default_true")]
    pub fine_tune: bool,
}

fn default_true() -> bool {
    true
}

impl Default for TwoPhaseRecipe {
    fn default() -> Self {
        Self {
            phase1: PhaseConfig::phase1(),
            phase2: PhaseConfig::phase2(),
            lora: LoraConfig::default(),
            lora_seed: 0,
            fine_tune: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TwoPhaseOutcome {
    pub phase1: PhaseOutcome,
    pub phase2: Option<PhaseOutcome>,
}

pub fn train_two_phase(
    model: &mut RegressionLM,
    train_docs: &[DocumentRecord],
    stats: &TargetStats,
    recipe: &TwoPhaseRecipe,
) -> Result<TwoPhaseOutcome> {
    let phase1 = train_phase1(model, train_docs, stats, &recipe.phase1)?;
    log::info!("phase 1 done: final loss {:?}", phase1.loss_trace.last());
    let phase2 = if recipe.fine_tune {
        let out = train_phase2(model, train_docs, stats, &recipe.phase2, &recipe.lora, recipe.lora_seed)?;
        log::info!("phase 2 done: final loss {:?}", out.loss_trace.last());
        Some(out)
    } else {
        None
    };
    Ok(TwoPhaseOutcome { phase1, phase2 })
}
