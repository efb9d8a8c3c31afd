//! End-to-end run on the synthetic corpus: build the three stage datasets and
//! a held-out evaluation set, train through all stages, evaluate each task.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{build_stage_dataset, default_vocab, write_jsonl, InstructionRecord, SceneSource, Task, Templates};
use crate::eval::{evaluate_model, EvalReport};
use crate::model::Model;
use crate::training::{run_pipeline, StageData, StageReport};
use crate::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeskReport {
    pub params: usize,
    pub stages: Vec<StageReport>,
    pub evals: BTreeMap<Task, EvalReport>,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

impl DeskReport {
    pub fn metric(&self, task: Task, name: &str) -> Option<f64> {
        self.evals.get(&task)?.metrics.get(name).copied()
    }
}

pub fn stage_datasets(cfg: &RunConfig) -> Result<[Vec<InstructionRecord>; 3]> {
    let src = SceneSource::Synthetic(cfg.data.scene.clone());
    let t = Templates::builtin();
    Ok([
        build_stage_dataset(1, &src, cfg.data.sizes[0], cfg.data.seed, t)?,
        build_stage_dataset(2, &src, cfg.data.sizes[1], cfg.data.seed, t)?,
        build_stage_dataset(3, &src, cfg.data.sizes[2], cfg.data.seed, t)?,
    ])
}

/// Held-out records: stage-2 tasks and phrasing under a separate seed.
pub fn eval_dataset(cfg: &RunConfig) -> Result<Vec<InstructionRecord>> {
    let src = SceneSource::Synthetic(cfg.data.scene.clone());
    build_stage_dataset(2, &src, cfg.data.eval_size, cfg.data.eval_seed, Templates::builtin())
}

/// Trains through the configured stages and evaluates; artifacts (datasets,
/// checkpoints, loss traces, reports, prediction dumps) go to `out_dir`.
pub fn run(cfg: &RunConfig, out_dir: &Path) -> Result<(Model<f32>, DeskReport)> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.json"), cfg.to_json())?;
    let sets = stage_datasets(cfg)?;
    let held_out = eval_dataset(cfg)?;
    for (i, s) in sets.iter().enumerate() {
        write_jsonl(&out_dir.join(format!("stage{}.jsonl", i + 1)), s)?;
    }
    write_jsonl(&out_dir.join("eval.jsonl"), &held_out)?;

    let mut model = Model::<f32>::new(cfg.model, default_vocab())?;
    let params = model.param_count(None);
    log::info!("desk model with {params} parameters");
    let stages: Vec<_> = [1u8, 2, 3]
        .iter()
        .map(|&n| Ok((cfg.stage(n)?.clone(), StageData { records: &sets[n as usize - 1], base_dir: None })))
        .collect::<Result<_>>()?;
    let t0 = Instant::now();
    let reports = run_pipeline(&mut model, 0, &stages, out_dir)?;
    let train_seconds = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let mut evals = BTreeMap::new();
    for &task in &cfg.eval.tasks {
        if !held_out.iter().any(|r| r.task == task) {
            continue;
        }
        let (rep, dumps) = evaluate_model(&model, &held_out, task, None, cfg.eval.max_new)?;
        log::info!("{task}: {:?}", rep.metrics);
        write_jsonl(&out_dir.join(format!("predictions_{}.jsonl", task.name())), &dumps)?;
        evals.insert(task, rep);
    }
    let report = DeskReport { params, stages: reports, evals, train_seconds, eval_seconds: t1.elapsed().as_secs_f64() };
    std::fs::write(out_dir.join("desk_report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok((model, report))
}
