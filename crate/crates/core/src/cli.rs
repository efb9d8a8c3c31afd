use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use hires_vlm::config::RunConfig;
use hires_vlm::data::{
    build_stage_dataset, default_vocab, derive_seed, gen_synthetic_scene, read_jsonl, to_example, write_jsonl, ImageRef,
    InstructionRecord, SceneRecord, SceneSource, Task, Templates,
};
use hires_vlm::eval::{evaluate_model, parse_generation};
use hires_vlm::geometry::BoxPix;
use hires_vlm::model::Model;
use hires_vlm::textcodec::{detokenize, EOS};
use hires_vlm::training::{load_stage_checkpoint, run_pipeline, StageData};
use hires_vlm::visual::plan_resolution;
use hires_vlm::{verify, Error};

/// Environment variable naming the root under which run directories are made.
pub const RUNS_ENV: &str = "HIRES_VLM_RUNS";

#[derive(Debug, Parser)]
#[command(name = "hires-vlm", version, about = "High-resolution grounding model on synthetic scenes")]
pub struct Cli {
    /// Run directory name under $HIRES_VLM_RUNS (default: runs/).
    #[arg(long, global = true)]
    run: Option<String>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic scenes as JSONL.
    Synth {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output file (default: <run dir>/scenes.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn scenes into instruction records for one stage.
    Convert {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        stage: u8,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one stage, or all three with --all.
    Train {
        #[arg(long, required_unless_present = "all")]
        stage: Option<u8>,
        #[arg(long, conflicts_with_all = ["stage", "resume"])]
        all: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint of the previous stage.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stage dataset; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one task.
    Eval {
        #[arg(long)]
        task: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 256)]
        max_new: usize,
    },
    /// Answer one instruction about one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        instruction: String,
        /// Referring region in pixels, x1,y1,x2,y2; fills the <region> placeholder.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        region: Option<Vec<f64>>,
        #[arg(long, default_value_t = 256)]
        max_new: usize,
    },
    /// Largest input resolution that fits a token budget.
    Plan {
        #[arg(long)]
        limit: usize,
        #[arg(long)]
        answer: usize,
        #[arg(long, default_value_t = hires_vlm::visual::DEFAULT_RESERVE)]
        reserve: usize,
        #[arg(long)]
        patch: usize,
        #[arg(long)]
        stride: usize,
    },
    /// Finite-difference gradient checks of every layer and the full stack.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: usize,
    },
}

fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn run_dir(name: Option<&str>, default: &str) -> anyhow::Result<PathBuf> {
    let dir = runs_root().join(name.unwrap_or(default));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => {
            let c = RunConfig::default();
            c.validate()?;
            Ok(c)
        }
    }
}

fn snapshot(dir: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    std::fs::write(dir.join("config.json"), cfg.to_json())?;
    Ok(())
}

fn print_json<T: serde::Serialize>(v: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

pub fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    let run = cli.run.as_deref();
    match cli.cmd {
        Command::Synth { seed, n, config, out } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.data.seed = seed;
            let dir = run_dir(run, "synth")?;
            snapshot(&dir, &cfg)?;
            let mut scenes = Vec::with_capacity(n);
            for i in 0..n {
                let mut s = gen_synthetic_scene(derive_seed(seed, i as u64), &cfg.data.scene)?;
                s.image = Some(ImageRef::inline(&s.render())?);
                scenes.push(s);
            }
            let out = out.unwrap_or_else(|| dir.join("scenes.jsonl"));
            write_jsonl(&out, &scenes)?;
            eprintln!("wrote {n} scenes to {}", out.display());
        }
        Command::Convert { scenes, stage, n, seed, out } => {
            let scenes: Vec<SceneRecord> = read_jsonl(&scenes)?;
            let recs = build_stage_dataset(stage, &SceneSource::Scenes(scenes), n, seed, Templates::builtin())?;
            let dir = run_dir(run, &format!("convert-stage{stage}"))?;
            let out = out.unwrap_or_else(|| dir.join(format!("stage{stage}.jsonl")));
            write_jsonl(&out, &recs)?;
            eprintln!("wrote {} stage-{stage} records to {}", recs.len(), out.display());
        }
        Command::Train { stage, all, config, resume, data } => {
            let cfg = load_config(config.as_deref())?;
            let stages: Vec<u8> = if all { vec![1, 2, 3] } else { vec![stage.expect("clap enforces --stage")] };
            let dir = run_dir(run, &if all { "train".to_string() } else { format!("train-stage{}", stages[0]) })?;
            snapshot(&dir, &cfg)?;
            let (mut model, completed) = match &resume {
                Some(p) => load_stage_checkpoint::<f32>(p).with_context(|| format!("loading {}", p.display()))?,
                None => (Model::<f32>::new(cfg.model, default_vocab())?, 0),
            };
            let mut sets: Vec<(u8, Vec<InstructionRecord>, Option<PathBuf>)> = Vec::new();
            for &s in &stages {
                let stage_cfg = cfg.stage(s)?;
                let path = if all { stage_cfg.dataset.clone() } else { data.clone().or_else(|| stage_cfg.dataset.clone()) };
                let recs = match &path {
                    Some(p) => read_jsonl(p).with_context(|| format!("reading {}", p.display()))?,
                    None => build_stage_dataset(
                        s,
                        &SceneSource::Synthetic(cfg.data.scene.clone()),
                        cfg.data.sizes[s as usize - 1],
                        cfg.data.seed,
                        Templates::builtin(),
                    )?,
                };
                let base = path.as_ref().and_then(|p| p.parent().map(Path::to_path_buf));
                sets.push((s, recs, base));
            }
            let plan: Vec<_> = sets
                .iter()
                .map(|(s, recs, base)| Ok((cfg.stage(*s)?.clone(), StageData { records: recs, base_dir: base.as_deref() })))
                .collect::<Result<_, Error>>()?;
            let reports = run_pipeline(&mut model, completed, &plan, &dir)?;
            for r in &reports {
                eprintln!(
                    "stage {}: {} steps, final loss {:.4}, changed {:?}",
                    r.stage,
                    r.steps,
                    r.final_loss().unwrap_or(f64::NAN),
                    r.changed().iter().map(|p| p.name()).collect::<Vec<_>>()
                );
            }
        }
        Command::Eval { task, ckpt, data, max_new } => {
            let Some(task) = Task::parse(&task) else {
                bail!("unknown task {task:?}; expected one of {:?}", Task::ALL.map(Task::name));
            };
            let (model, _) = load_stage_checkpoint::<f32>(&ckpt)?;
            let recs: Vec<InstructionRecord> = read_jsonl(&data)?;
            let base = data.parent();
            let (report, dumps) = evaluate_model(&model, &recs, task, base, max_new)?;
            let dir = run_dir(run, &format!("eval-{}", task.name()))?;
            let resolved = serde_json::json!({ "task": task.name(), "ckpt": ckpt, "data": data, "max_new": max_new, "model": model.cfg });
            std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&resolved)?)?;
            std::fs::write(dir.join(format!("report_{}.json", task.name())), serde_json::to_string_pretty(&report)?)?;
            write_jsonl(&dir.join(format!("predictions_{}.jsonl", task.name())), &dumps)?;
            print_json(&report)?;
        }
        Command::Infer { ckpt, image, instruction, region, max_new } => {
            let (model, _) = load_stage_checkpoint::<f32>(&ckpt)?;
            let img = image::open(&image).with_context(|| format!("reading {}", image.display()))?.to_rgb8();
            let rec = InstructionRecord {
                id: "infer".into(),
                stage: 3,
                task: Task::Rec,
                image: ImageRef::inline(&img)?,
                instruction: instruction.clone(),
                answer: String::new(),
                region_ref: match region.as_deref() {
                    Some(&[x1, y1, x2, y2]) => Some(BoxPix::new(x1, y1, x2, y2)?.to_array()),
                    Some(r) => bail!("--region takes 4 comma-separated values, got {}", r.len()),
                    None => None,
                },
                gt: hires_vlm::data::GroundTruth { categories: vec![], boxes: vec![], canvas: img.width() as usize },
            };
            let ex = to_example::<f32>(&rec, &model.vocab, model.cfg.encoder.resolution, model.cfg.region.resolution, None)?;
            let out = model.generate(&ex.image, ex.region.as_ref(), &ex.instruction, max_new)?;
            let keep = out.ids.iter().position(|&t| t == EOS).unwrap_or(out.ids.len());
            let (boxes, _) = parse_generation(&out.ids[..keep], &out.probs[..keep], &model.vocab);
            print_json(&serde_json::json!({
                "answer_text": detokenize(&out.ids[..keep], &model.vocab),
                "boxes": boxes.iter().map(|b| serde_json::json!({ "label": b.label, "box": b.bbox.to_array() })).collect::<Vec<_>>(),
                "per_object_confidence": boxes.iter().map(|b| b.confidence).collect::<Vec<_>>(),
                "finish": out.finish,
            }))?;
        }
        Command::Plan { limit, answer, reserve, patch, stride } => {
            let plan = plan_resolution(limit, answer, reserve, patch, stride)?;
            print_json(&plan)?;
        }
        Command::Gradcheck { seeds } => {
            let rows = verify::run_all(seeds);
            print!("{}", verify::format_table(&rows));
            if rows.iter().any(|r| !r.passed()) {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
