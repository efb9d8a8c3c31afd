//! Freeze schedule, single-stage trainer and the three-stage pipeline.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, example_from_image, shift_record, to_example, InstructionRecord};
use crate::model::{Example, Model, ModelConfig};
use crate::nn::{adam_step, AdamConfig, AdamState, Partition, ParamStore, Scalar};
use crate::textcodec::Vocab;
use crate::{Error, Result};

/// Trainable flag for every partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask(pub BTreeMap<Partition, bool>);

impl FreezeMask {
    pub fn trainable(&self, p: Partition) -> bool {
        self.0.get(&p).copied().unwrap_or(false)
    }

    pub fn trainable_set(&self) -> Vec<Partition> {
        self.0.iter().filter(|(_, &t)| t).map(|(&p, _)| p).collect()
    }

    pub fn apply<F: Scalar>(&self, ps: &mut ParamStore<F>) {
        for p in Partition::ALL {
            ps.set_partition_trainable(p, self.trainable(p));
        }
    }
}

pub fn freeze_schedule(stage: u8) -> Result<FreezeMask> {
    use Partition::*;
    let on: &[Partition] = match stage {
        1 => &[DownsampleProjector],
        2 => &[VisualEncoder, DownsampleProjector, RegionProjector, WordEmbeddings, Decoder, LmHead],
        3 => &[DownsampleProjector, RegionProjector, WordEmbeddings, Decoder, LmHead],
        s => return Err(Error::UnknownStage(s)),
    };
    Ok(FreezeMask(Partition::ALL.iter().map(|&p| (p, on.contains(&p))).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub stage: u8,
    /// Optimizer steps; when absent, `epochs` passes over the data.
    pub steps: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr_frac: f64,
    pub warmup_frac: f64,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    /// Train the region encoder for the first `region_warmup_frac` of
    /// stage 2 before freezing it. Off reproduces the plain stage-2 mask.
    pub region_warmup: bool,
    pub region_warmup_frac: f64,
    /// Translate every training record by a random whole-pixel offset
    /// (see [`shift_record`]).
    pub shift_augment: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            steps: None,
            epochs: 1,
            batch_size: 8,
            lr: 1e-3,
            min_lr_frac: 0.05,
            warmup_frac: 0.05,
            clip_norm: 1.0,
            weight_decay: 0.0,
            seed: 0,
            dataset: None,
            region_warmup: false,
            region_warmup_frac: 0.2,
            shift_augment: false,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("stage {}: {m}", self.stage)));
        if !(1..=3).contains(&self.stage) {
            return Err(Error::UnknownStage(self.stage));
        }
        if self.batch_size == 0 || (self.steps.is_none() && self.epochs == 0) || self.steps == Some(0) {
            return bad("batch size and step count must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {}", self.lr));
        }
        for (k, v) in [("min_lr_frac", self.min_lr_frac), ("warmup_frac", self.warmup_frac), ("region_warmup_frac", self.region_warmup_frac)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{k} = {v} outside [0,1]"));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self, records: usize) -> usize {
        self.steps.unwrap_or_else(|| (self.epochs * records).div_ceil(self.batch_size).max(1))
    }
}

/// Linear warm-up followed by cosine decay to `min_lr_frac · lr`.
pub fn lr_at(step: usize, total: usize, cfg: &StageConfig) -> f64 {
    let warm = ((total as f64) * cfg.warmup_frac).round() as usize;
    if step < warm {
        return cfg.lr * (step + 1) as f64 / warm as f64;
    }
    let span = (total - warm).max(1) as f64;
    let t = ((step - warm) as f64 / span).min(1.0);
    let floor = cfg.lr * cfg.min_lr_frac;
    floor + (cfg.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u8,
    pub steps: usize,
    pub records: usize,
    pub trace: Vec<TracePoint>,
    pub checksums_before: BTreeMap<Partition, u64>,
    pub checksums_after: BTreeMap<Partition, u64>,
    /// Checksums when the region encoder was frozen after its warm-up.
    pub checksums_after_warmup: Option<BTreeMap<Partition, u64>>,
    pub seconds: f64,
}

impl StageReport {
    pub fn changed(&self) -> Vec<Partition> {
        changed_partitions(&self.checksums_before, &self.checksums_after)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.trace.last().map(|t| t.loss)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_trace_csv(path, &self.trace)
    }
}

pub fn changed_partitions(a: &BTreeMap<Partition, u64>, b: &BTreeMap<Partition, u64>) -> Vec<Partition> {
    Partition::ALL.into_iter().filter(|p| a.get(p) != b.get(p)).collect()
}

pub fn write_trace_csv(path: &Path, trace: &[TracePoint]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,loss,lr")?;
    for t in trace {
        writeln!(w, "{},{:.6},{:.6e}", t.step, t.loss, t.lr)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean over a trailing window of `w` points.
pub fn smooth(trace: &[TracePoint], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(trace.len());
    let mut acc = 0.0;
    for (i, t) in trace.iter().enumerate() {
        acc += t.loss;
        if i >= w {
            acc -= trace[i - w].loss;
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

/// Where the examples of a stage come from.
pub struct StageData<'a> {
    pub records: &'a [InstructionRecord],
    pub base_dir: Option<&'a Path>,
}

fn example<F: Scalar>(
    model: &Model<F>,
    rec: &InstructionRecord,
    base_dir: Option<&Path>,
    vocab: &Vocab,
    shift: Option<&mut ChaCha8Rng>,
) -> Result<Example<F>> {
    let (res, region_res) = (model.cfg.encoder.resolution, model.cfg.region.resolution);
    match shift {
        Some(rng) => {
            let (moved, img) = shift_record(rec, &rec.image.load(base_dir)?, rng)?;
            example_from_image(&moved, &img, vocab, res, region_res)
        }
        None => to_example(rec, vocab, res, region_res, base_dir),
    }
}

/// Runs one stage in place. On a non-finite loss or gradient the stage stops
/// before the offending update, so the model holds the last good weights.
pub fn train_stage<F: Scalar>(model: &mut Model<F>, data: &StageData<'_>, cfg: &StageConfig) -> Result<StageReport> {
    cfg.validate()?;
    if data.records.is_empty() {
        return Err(Error::EmptyInput("stage dataset"));
    }
    if let Some(r) = data.records.iter().find(|r| r.stage != cfg.stage) {
        return Err(Error::Dataset(format!("record {} is tagged stage {}, expected {}", r.id, r.stage, cfg.stage)));
    }
    let mask = freeze_schedule(cfg.stage)?;
    mask.apply(&mut model.params);
    let warm_region = cfg.stage == 2 && cfg.region_warmup;
    if warm_region {
        model.set_trainable(Partition::RegionEncoder, true);
    }

    let total = cfg.total_steps(data.records.len());
    let warm_steps = if warm_region { ((total as f64) * cfg.region_warmup_frac).round() as usize } else { 0 };
    let adam_cfg = AdamConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamConfig::default() };
    let mut adam = AdamState::new(&model.params);
    let vocab = model.vocab.clone();
    let checksums_before = model.params.checksums();
    let mut checksums_after_warmup = None;
    let mut trace = Vec::with_capacity(total);
    let start = Instant::now();

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut shift_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX));
    for step in 0..total {
        if warm_region && step == warm_steps {
            model.set_trainable(Partition::RegionEncoder, false);
            checksums_after_warmup = Some(model.params.checksums());
        }
        let lr = lr_at(step, total, cfg);
        model.params.zero_grad();
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = (0..data.records.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch)));
                epoch += 1;
                cursor = 0;
            }
            let rec = &data.records[order[cursor]];
            cursor += 1;
            let rng = cfg.shift_augment.then_some(&mut shift_rng);
            batch.push((rec, example(model, rec, data.base_dir, &vocab, rng)?));
        }
        // Mean over every answer token in the batch, not over records.
        let tokens: usize = batch.iter().map(|(_, ex)| ex.answer.len()).sum();
        let mut loss = 0.0;
        for (rec, ex) in &batch {
            let w = ex.answer.len() as f64 / tokens as f64;
            let l = model.loss_and_grad_scaled(ex, F::lit(w)).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} at step {step}, record {}", rec.id)),
                other => other,
            })?;
            loss += w * l.to_f64().unwrap_or(f64::NAN);
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("mean loss at step {step}")));
        }
        let norm = model.params.grad_norm();
        if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            model.params.scale_grads(F::lit(cfg.clip_norm / norm));
        }
        adam_step(&mut model.params, &mut adam, &adam_cfg, lr)?;
        trace.push(TracePoint { step, loss, lr });
        if step % 100 == 0 || step + 1 == total {
            log::info!("stage {} step {step}/{total} loss {loss:.4} lr {lr:.2e}", cfg.stage);
        }
    }
    if warm_region && checksums_after_warmup.is_none() {
        model.set_trainable(Partition::RegionEncoder, false);
        checksums_after_warmup = Some(model.params.checksums());
    }
    mask.apply(&mut model.params);
    Ok(StageReport {
        stage: cfg.stage,
        steps: total,
        records: data.records.len(),
        trace,
        checksums_before,
        checksums_after: model.params.checksums(),
        checksums_after_warmup,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Stage bookkeeping stored in checkpoint metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageMeta {
    pub stage_completed: u8,
    pub checksums: BTreeMap<Partition, u64>,
}

pub fn stage_meta(extra: &serde_json::Value) -> Option<StageMeta> {
    serde_json::from_value(extra.get("stage")?.clone()).ok()
}

/// Checks that `stage` may follow a model that has completed
/// `completed` stages.
pub fn check_order(completed: u8, stage: u8) -> Result<()> {
    if !(1..=3).contains(&stage) {
        return Err(Error::UnknownStage(stage));
    }
    if stage != completed + 1 {
        return Err(Error::StageOrder(format!(
            "stage {stage} needs a stage-{} checkpoint, got one after stage {completed}",
            stage - 1
        )));
    }
    Ok(())
}

pub fn stage_checkpoint_path(dir: &Path, stage: u8) -> PathBuf {
    dir.join(format!("stage{stage}.ckpt"))
}

/// Trains `model` (which has completed `completed` stages) through each of
/// `stages` in turn, checkpointing after every stage. A failing stage leaves
/// a `stageN-failed.ckpt` with the last good weights and stops the run.
pub fn run_pipeline<F: Scalar>(
    model: &mut Model<F>,
    completed: u8,
    stages: &[(StageConfig, StageData<'_>)],
    out_dir: &Path,
) -> Result<Vec<StageReport>> {
    let mut done = completed;
    for (cfg, _) in stages {
        check_order(done, cfg.stage)?;
        done = cfg.stage;
    }
    std::fs::create_dir_all(out_dir)?;
    let mut reports = Vec::new();
    for (cfg, data) in stages {
        let report = match train_stage(model, data, cfg) {
            Ok(r) => r,
            Err(e) => {
                let failed = out_dir.join(format!("stage{}-failed.ckpt", cfg.stage));
                let meta = serde_json::json!({ "stage": StageMeta { stage_completed: cfg.stage - 1, checksums: model.params.checksums() }, "error": e.to_string() });
                model.save(&failed, meta)?;
                log::error!("stage {} failed: {e}; last good weights in {}", cfg.stage, failed.display());
                return Err(e);
            }
        };
        report.write_csv(&out_dir.join(format!("stage{}_loss.csv", cfg.stage)))?;
        std::fs::write(out_dir.join(format!("stage{}_report.json", cfg.stage)), serde_json::to_string_pretty(&report)?)?;
        let meta = StageMeta { stage_completed: cfg.stage, checksums: report.checksums_after.clone() };
        model.save(&stage_checkpoint_path(out_dir, cfg.stage), serde_json::json!({ "stage": meta }))?;
        reports.push(report);
    }
    Ok(reports)
}

/// Loads a checkpoint and the number of stages it has completed.
pub fn load_stage_checkpoint<F: Scalar>(path: &Path) -> Result<(Model<F>, u8)> {
    let (model, extra) = Model::<F>::load(path)?;
    let completed = stage_meta(&extra).map_or(0, |m| m.stage_completed);
    Ok((model, completed))
}

pub fn fresh_model<F: Scalar>(cfg: ModelConfig, vocab: Vocab) -> Result<Model<F>> {
    Model::new(cfg, vocab)
}
