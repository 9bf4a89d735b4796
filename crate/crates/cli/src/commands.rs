use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use forecite::corpus::{self, DocumentRecord, FilterPolicy, SignalSpec, Subset};
use forecite::evaluation::{self, Field};
use forecite::model::RegressionLM;
use forecite::saliency;
use forecite::scaling::{self, GridRecipe};
use forecite::targets::TargetStats;
use forecite::training::{
    self, corpus_hash_file, load_checkpoint, save_checkpoint, RunManifest, Timing, TrainState,
};
use forecite::YearMonth;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{CheckpointArgs, Failure};

type Result<T> = std::result::Result<T, Failure>;

const WORKERS_ENV: &str = "FORECITE_WORKERS";

struct Clock {
    started: SystemTime,
    t0: Instant,
}

impl Clock {
    fn start() -> Self {
        Self { started: SystemTime::now(), t0: Instant::now() }
    }

    fn timing(&self) -> Timing {
        Timing {
            started_unix_secs: self.started.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            wall_clock_secs: self.t0.elapsed().as_secs_f64(),
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config types serialize")
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))
}

/// `corpus.jsonl` -> `corpus.manifest.json`, next to the file.
fn sibling_manifest(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

fn finish(mut manifest: RunManifest, path: &Path, clock: &Clock) -> Result<()> {
    manifest.timing = clock.timing();
    manifest.write(path)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn parse_month(s: &str) -> Result<YearMonth> {
    s.parse().map_err(|e: forecite::Error| Failure::validation(e.to_string()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::validation(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::validation(format!("{what} {}: {e}", path.display())))
}

pub fn ingest(input: &Path, out: &Path, policy: Option<&Path>, cutoff: Option<&str>) -> Result<()> {
    let clock = Clock::start();
    if !input.is_file() {
        return Err(Failure::validation(format!("input corpus not found: {}", input.display())));
    }
    let policy: FilterPolicy = match policy {
        Some(p) => read_json(p, "filter policy")?,
        None => FilterPolicy::default(),
    };
    policy.validate()?;
    let cutoff = cutoff.map(parse_month).transpose()?;
    let docs = corpus::ingest(input)?;
    if let Some(c) = cutoff {
        for d in &docs {
            d.validate(c)?;
        }
    }
    let n_in = docs.len();
    let outcome = corpus::filter_corpus(docs, &policy);
    let kept = corpus::dedup(outcome.kept);
    log::info!("{n_in} read, {} rejected, {} kept after dedup", outcome.rejected.len(), kept.len());
    corpus::write_jsonl(out, &kept)?;
    let rejected_path = out.with_extension("rejected.csv");
    let mut csv = String::from("id,reason\n");
    for r in &outcome.rejected {
        csv.push_str(&format!("{},{}\n", r.id, to_json(&r.reason).as_str().unwrap_or("")));
    }
    write_file(&rejected_path, csv)?;

    let mut m = RunManifest::new("ingest", serde_json::json!({ "input": input, "policy": policy, "cutoff": cutoff }));
    m.corpus_hash = Some(corpus_hash_file(input)?);
    m.outputs = vec![out.display().to_string(), rejected_path.display().to_string()];
    finish(m, &sibling_manifest(out), &clock)
}

pub fn synth(n: usize, seed: u64, out: &Path, spec: Option<&Path>) -> Result<()> {
    let clock = Clock::start();
    let spec: SignalSpec = match spec {
        Some(p) => read_json(p, "signal spec")?,
        None => SignalSpec::default(),
    };
    let c = corpus::synthesize(n, &spec, seed)?;
    corpus::write_jsonl(out, &c.docs)?;
    log::info!("{n} documents, analytic ceiling r = {:.4}", spec.analytic_ceiling());
    let mut m = RunManifest::new("synth", serde_json::json!({ "n": n, "seed": seed, "spec": spec }));
    m.corpus_hash = Some(corpus_hash_file(out)?);
    m.metrics.insert("analytic_ceiling".into(), serde_json::json!(spec.analytic_ceiling()));
    m.metrics.insert("empirical_ceiling".into(), serde_json::json!(c.empirical_ceiling()));
    m.outputs = vec![out.display().to_string()];
    finish(m, &sibling_manifest(out), &clock)
}

/// The corpus as the config sees it: filtered, then divided into a
/// pre-holdout pool (split into train/test) and a date-sorted holdout.
struct Data {
    train: Vec<DocumentRecord>,
    test: Vec<DocumentRecord>,
    holdout: Vec<DocumentRecord>,
    hash: String,
}

fn load_data(cfg: &RunConfig) -> Result<Data> {
    let mut docs = corpus::ingest(&cfg.corpus)?;
    for d in &docs {
        d.validate(cfg.cutoff)?;
    }
    if let Some(p) = &cfg.filter {
        docs = corpus::dedup(corpus::filter_corpus(docs, p).kept);
    }
    let (pool, holdout) = match cfg.holdout_from {
        Some(h) => corpus::temporal_split(&docs, h),
        None => (docs, Vec::new()),
    };
    let assignment = corpus::split(&pool, cfg.split.ratio, cfg.split.seed)?;
    let (train, test) = assignment.partition(&pool);
    log::info!("{} train, {} test, {} holdout documents", train.len(), test.len(), holdout.len());
    Ok(Data { train, test, holdout, hash: corpus_hash_file(&cfg.corpus)? })
}

struct Trained {
    model: RegressionLM,
    stats: TargetStats,
    state: TrainState,
    manifest: RunManifest,
}

/// Pretraining (optional), phase 1 and phase 2, with metrics after each phase.
fn train_on(cfg: &RunConfig, command: &str, data: &Data) -> Result<Trained> {
    let stats = TargetStats::fit_documents(&data.train, cfg.delta, cfg.cutoff)?;
    let mut model = RegressionLM::new(cfg.model.clone())?;
    let mut m = RunManifest::new(command, to_json(cfg));
    m.corpus_hash = Some(data.hash.clone());
    if let Some(pre) = &cfg.pretrain {
        let trace = training::pretrain_lm(&mut model, &data.train, pre)?;
        m.add_trace("pretrain", &trace);
    }
    let p1 = training::train_phase1(&mut model, &data.train, &stats, &cfg.phase1)?;
    m.add_trace("phase1", &p1.loss_trace);
    m.add_metrics("phase1_train", &evaluation::evaluate(&model, &data.train, &stats)?);
    m.add_metrics("phase1_test", &evaluation::evaluate(&model, &data.test, &stats)?);
    let mut state = p1.state;
    if cfg.fine_tune {
        let p2 = training::train_phase2(&mut model, &data.train, &stats, &cfg.phase2, &cfg.lora, cfg.lora_seed)?;
        m.add_trace("phase2", &p2.loss_trace);
        m.add_metrics("phase2_train", &evaluation::evaluate(&model, &data.train, &stats)?);
        m.add_metrics("phase2_test", &evaluation::evaluate(&model, &data.test, &stats)?);
        state = p2.state;
    }
    Ok(Trained { model, stats, state, manifest: m })
}

pub fn train(config: &Path) -> Result<()> {
    let clock = Clock::start();
    let cfg = RunConfig::load(config)?;
    let data = load_data(&cfg)?;
    let t = train_on(&cfg, "train", &data)?;
    ensure_dir(&cfg.output_dir)?;
    let ckpt = cfg.output_dir.join("model.ckpt");
    save_checkpoint(&ckpt, &t.model, Some(&t.state), Some(&t.stats))?;
    let mut m = t.manifest;
    m.outputs.push(ckpt.display().to_string());
    finish(m, &cfg.output_dir.join("train.manifest.json"), &clock)
}

fn open_checkpoint(args: &CheckpointArgs, cfg: &RunConfig) -> Result<(RegressionLM, TargetStats, PathBuf)> {
    let path = args.checkpoint.clone().unwrap_or_else(|| cfg.output_dir.join("model.ckpt"));
    if !path.is_file() {
        return Err(Failure::validation(format!("checkpoint not found: {}", path.display())));
    }
    let ck = load_checkpoint(&path)?;
    let stats = ck
        .stats
        .ok_or_else(|| Failure::validation(format!("{} carries no target statistics", path.display())))?;
    Ok((ck.model, stats, path))
}

pub fn evaluate(args: &CheckpointArgs) -> Result<()> {
    let clock = Clock::start();
    let cfg = RunConfig::load(&args.run.config)?;
    let (model, stats, path) = open_checkpoint(args, &cfg)?;
    let data = load_data(&cfg)?;
    let train = evaluation::evaluate(&model, &data.train, &stats)?;
    let test = evaluation::evaluate(&model, &data.test, &stats)?;
    println!("split | r | rho | r2 | mse | mae");
    println!("train | {}", train.table_row());
    println!("test | {}", test.table_row());

    ensure_dir(&cfg.output_dir)?;
    let out = cfg.output_dir.join("metrics.json");
    write_file(&out, serde_json::to_string_pretty(&serde_json::json!({ "train": train, "test": test }))? + "\n")?;
    let mut m = RunManifest::new("evaluate", serde_json::json!({ "run": cfg, "checkpoint": path }));
    m.corpus_hash = Some(data.hash);
    m.add_metrics("train", &train);
    m.add_metrics("test", &test);
    m.outputs.push(out.display().to_string());
    finish(m, &cfg.output_dir.join("evaluate.manifest.json"), &clock)
}

pub fn holdout(args: &CheckpointArgs) -> Result<()> {
    let clock = Clock::start();
    let cfg = RunConfig::load(&args.run.config)?;
    if cfg.holdout_from.is_none() {
        return Err(Failure::validation("config sets no holdout_from month"));
    }
    let (model, stats, path) = open_checkpoint(args, &cfg)?;
    let data = load_data(&cfg)?;
    let points = evaluation::temporal_holdout(&model, &data.holdout, &stats)?;
    ensure_dir(&cfg.output_dir)?;
    let out = cfg.output_dir.join("holdout.csv");
    evaluation::write_holdout_csv(&out, &points)?;
    if let Some(last) = points.last() {
        println!("{} holdout documents through {}: cumulative r = {:.4}", last.n, last.month, last.cumulative_r);
    }
    let mut m = RunManifest::new("holdout", serde_json::json!({ "run": cfg, "checkpoint": path }));
    m.corpus_hash = Some(data.hash);
    m.outputs.push(out.display().to_string());
    finish(m, &cfg.output_dir.join("holdout.manifest.json"), &clock)
}

pub fn ablate(config: &Path, drop: &str) -> Result<()> {
    let clock = Clock::start();
    let cfg = RunConfig::load(config)?;
    let field: Field = drop.parse()?;
    let mut data = load_data(&cfg)?;
    data.train = evaluation::ablate(&data.train, field);
    data.test = evaluation::ablate(&data.test, field);
    let t = train_on(&cfg, &format!("ablate {drop}"), &data)?;
    let report = evaluation::evaluate(&t.model, &data.test, &t.stats)?;
    println!("without {drop}: test | {}", report.table_row());
    let dir = cfg.output_dir.join(format!("ablate_{drop}"));
    ensure_dir(&dir)?;
    let out = dir.join("metrics.json");
    write_file(&out, serde_json::to_string_pretty(&report)? + "\n")?;
    let mut m = t.manifest;
    m.outputs.push(out.display().to_string());
    finish(m, &dir.join("ablate.manifest.json"), &clock)
}

fn worker_count(flag: Option<usize>) -> Result<usize> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::validation(format!("{WORKERS_ENV} must be a non-negative integer, got {v:?}"))),
        Err(_) => Ok(0),
    }
}

pub fn grid(config: &Path, workers: Option<usize>) -> Result<()> {
    let clock = Clock::start();
    let cfg = RunConfig::load(config)?;
    let grid = cfg.grid.clone().ok_or_else(|| Failure::validation("config has no `grid` section"))?;
    for mc in &grid.models {
        mc.validate()?;
    }
    let recipe = GridRecipe {
        training: cfg.recipe(),
        pretrain: cfg.pretrain.clone(),
        subsample_seed: grid.subsample_seed,
        delta: cfg.delta,
        cutoff: cfg.cutoff,
        workers: worker_count(workers)?,
    };
    let data = load_data(&cfg)?;
    let points = scaling::run_grid(&data.train, &data.test, &grid.models, &grid.fractions, &recipe)?;
    ensure_dir(&cfg.output_dir)?;
    let out = cfg.output_dir.join("grid.csv");
    scaling::write_grid_csv(&out, &points)?;
    let mut m = RunManifest::new("grid", serde_json::json!({ "run": cfg, "workers": recipe.workers }));
    m.corpus_hash = Some(data.hash);
    m.outputs.push(out.display().to_string());
    finish(m, &cfg.output_dir.join("grid.manifest.json"), &clock)
}

pub fn fit_scaling(grid: &Path, metric: Option<&str>, split: Option<&str>, out: Option<&Path>) -> Result<()> {
    let clock = Clock::start();
    if !grid.is_file() {
        return Err(Failure::validation(format!("grid file not found: {}", grid.display())));
    }
    let points = scaling::read_grid_csv(grid)?;
    let split: Option<Subset> = split.map(str::parse).transpose()?;
    let selected: Vec<_> = points
        .into_iter()
        .filter(|p| split.is_none_or(|s| p.split == s) && metric.is_none_or(|m| p.metric == m))
        .collect();
    let mut combos: Vec<(Subset, &str)> = selected.iter().map(|p| (p.split, p.metric.as_str())).collect();
    combos.sort_unstable();
    combos.dedup();
    if combos.len() > 1 {
        return Err(Failure::validation(format!(
            "grid mixes {} (split, metric) series; choose one with --split and --metric",
            combos.len()
        )));
    }
    let fit = scaling::fit_scaling(&selected)?;
    let json = serde_json::to_string_pretty(&fit)? + "\n";
    print!("{json}");
    if let Some(out) = out {
        write_file(out, &json)?;
        let mut m = RunManifest::new("fit-scaling", serde_json::json!({ "grid": grid, "metric": metric, "split": split }));
        m.corpus_hash = Some(corpus_hash_file(grid)?);
        m.outputs.push(out.display().to_string());
        finish(m, &sibling_manifest(out), &clock)?;
    }
    Ok(())
}

pub fn saliency(args: &CheckpointArgs, ids: &[String], n: usize) -> Result<()> {
    let clock = Clock::start();
    let cfg = RunConfig::load(&args.run.config)?;
    let (model, stats, path) = open_checkpoint(args, &cfg)?;
    let data = load_data(&cfg)?;
    let docs: Vec<&DocumentRecord> = if ids.is_empty() {
        data.test.iter().take(n).collect()
    } else {
        let all: Vec<&DocumentRecord> = data.train.iter().chain(&data.test).chain(&data.holdout).collect();
        ids.iter()
            .map(|id| {
                all.iter()
                    .find(|d| &d.id == id)
                    .copied()
                    .ok_or_else(|| Failure::validation(format!("no document with id {id:?}")))
            })
            .collect::<Result<_>>()?
    };
    let dir = cfg.output_dir.join("saliency");
    ensure_dir(&dir)?;
    let mut m = RunManifest::new("saliency", serde_json::json!({ "run": cfg, "checkpoint": path, "docs": ids, "n": n }));
    m.corpus_hash = Some(data.hash);
    let mut summary = String::from("id,region,mean_abs_score,n_tokens\n");
    for doc in docs {
        let attr = saliency::normalize_scores(saliency::attribute(&model, doc, &stats)?);
        let html = dir.join(format!("{}.html", file_stem(&doc.id)));
        saliency::export_heatmap(doc, &attr, &html)?;
        let regions = saliency::section_attribution_summary(&attr);
        for r in &regions {
            summary.push_str(&format!("{},{},{},{}\n", doc.id, r.region, r.mean_abs_score, r.n_tokens));
        }
        if let Some(top) = saliency::top_region(&regions) {
            println!("{}: predicted log rate {:.3}, top region {top}", doc.id, attr.predicted_log_rate);
        }
        m.outputs.push(html.display().to_string());
    }
    let out = dir.join("summary.csv");
    write_file(&out, summary)?;
    m.outputs.push(out.display().to_string());
    finish(m, &dir.join("saliency.manifest.json"), &clock)
}

/// Document ids are free text; keep file names portable.
fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::runtime(e.to_string())
    }
}
