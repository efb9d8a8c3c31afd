use std::path::Path;
use std::process::{Command, Output};

fn hires(runs: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hires-vlm"))
        .args(args)
        .env("HIRES_VLM_RUNS", runs)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

#[test]
fn plan_prints_json() {
    let tmp = tempfile::tempdir().unwrap();
    let out = hires(tmp.path(), &["plan", "--limit", "4096", "--answer", "2500", "--reserve", "200", "--patch", "14", "--stride", "2"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["resolution"], 1022);
    assert_eq!(v["tokens"], 1369);
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(hires(tmp.path(), &["plan", "--limit", "x"]).status.code(), Some(2));
    assert_eq!(hires(tmp.path(), &["frobnicate"]).status.code(), Some(2));
    let too_small = hires(tmp.path(), &["plan", "--limit", "100", "--answer", "90", "--patch", "14", "--stride", "2"]);
    assert_eq!(too_small.status.code(), Some(1));
    assert!(!too_small.stderr.is_empty());
    let missing = hires(tmp.path(), &["eval", "--task", "rec", "--ckpt", "/nonexistent.ckpt", "--data", "/nonexistent.jsonl"]);
    assert_eq!(missing.status.code(), Some(1));
    let bad_task = hires(tmp.path(), &["eval", "--task", "poetry", "--ckpt", "a", "--data", "b"]);
    assert_eq!(bad_task.status.code(), Some(1));
}

#[test]
fn synth_and_convert_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.jsonl");
    let b = tmp.path().join("b.jsonl");
    for p in [&a, &b] {
        let out = hires(tmp.path(), &["synth", "--seed", "3", "--n", "12", "--out", p.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let sa = std::fs::read(&a).unwrap();
    assert_eq!(sa, std::fs::read(&b).unwrap());
    assert_eq!(sa.iter().filter(|&&c| c == b'\n').count(), 12);
    assert!(tmp.path().join("synth/config.json").exists());

    let c = tmp.path().join("stage2.jsonl");
    let out = hires(tmp.path(), &["convert", "--scenes", a.to_str().unwrap(), "--stage", "2", "--n", "20", "--out", c.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&c).unwrap();
    assert_eq!(text.lines().count(), 20);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["stage"], 2);
        assert!(v["image"]["base64"].is_string());
    }
}

#[test]
fn train_resume_eval_and_infer_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.json");
    let mut c = hires_vlm::config::RunConfig::default();
    c.model = hires_vlm::model::toy_config();
    c.data.sizes = [8, 8, 8];
    c.model.decoder.context_limit = 256;
    c.planner.limit = 256;
    c.planner.answer = 0;
    c.planner.reserve = 0;
    for s in &mut c.train {
        s.steps = Some(2);
        s.batch_size = 2;
    }
    c.validate().unwrap();
    std::fs::write(&cfg, c.to_json()).unwrap();

    let cfg_s = cfg.to_str().unwrap();
    let out = hires(tmp.path(), &["--run", "r", "train", "--stage", "2", "--config", cfg_s]);
    assert_eq!(out.status.code(), Some(1), "stage 2 without stage 1 must be refused");
    let out = hires(tmp.path(), &["--run", "r", "train", "--stage", "1", "--config", cfg_s]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = tmp.path().join("r");
    for f in ["config.json", "stage1.ckpt", "stage1_loss.csv", "stage1_report.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let ckpt = run.join("stage1.ckpt");
    let out = hires(tmp.path(), &["--run", "r", "train", "--stage", "2", "--config", cfg_s, "--resume", ckpt.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("stage2.ckpt").exists());

    let scenes = tmp.path().join("s.jsonl");
    assert!(hires(tmp.path(), &["synth", "--n", "4", "--out", scenes.to_str().unwrap()]).status.success());
    let data = tmp.path().join("d.jsonl");
    assert!(hires(tmp.path(), &["convert", "--scenes", scenes.to_str().unwrap(), "--stage", "2", "--n", "6", "--out", data.to_str().unwrap()])
        .status
        .success());
    let ck2 = run.join("stage2.ckpt");
    let out = hires(tmp.path(), &["--run", "e", "eval", "--task", "detection", "--ckpt", ck2.to_str().unwrap(), "--data", data.to_str().unwrap(), "--max-new", "8"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rep: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(rep["metrics"]["mAP"].is_number());
    assert!(tmp.path().join("e/predictions_detection.jsonl").exists());
    assert!(tmp.path().join("e/config.json").exists());

    let img = tmp.path().join("x.png");
    image::RgbImage::from_pixel(40, 40, image::Rgb([10, 200, 30])).save(&img).unwrap();
    let out = hires(
        tmp.path(),
        &["infer", "--ckpt", ck2.to_str().unwrap(), "--image", img.to_str().unwrap(), "--instruction", "count the objects like <region>", "--region", "2,2,20,20", "--max-new", "5"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["answer_text"].is_string());
    assert!(v["per_object_confidence"].is_array());
    let out = hires(tmp.path(), &["infer", "--ckpt", ck2.to_str().unwrap(), "--image", img.to_str().unwrap(), "--instruction", "count the objects like <region>"]);
    assert_eq!(out.status.code(), Some(1), "placeholder without region");
}
