//! Localization metrics and the model evaluation loop.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{to_example, Category, InstructionRecord, Task, NONE_ANSWER};
use crate::geometry::{decode_boxes, iou, merge_boxes, normalize, BoxNorm, BoxPix};
use crate::lm::token_confidence;
use crate::model::Model;
use crate::nn::Scalar;
use crate::textcodec::{detokenize, tokenize, TokenId, Vocab, BOS, EOS, PAD};
use crate::{Error, Result};

pub const IOU_HIT: f64 = 0.5;
pub const MAX_DETS: usize = 100;

/// COCO's ten IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPrediction {
    pub category: usize,
    pub bbox: BoxNorm,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub category: usize,
    pub bbox: BoxNorm,
}

/// Per sample, the highest-confidence box is compared with the single
/// ground-truth box. Equal confidences keep the earlier box.
pub fn rec_accuracy(preds: &[Vec<(BoxNorm, f64)>], gts: &[BoxNorm]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::Dimension(format!("{} predictions for {} samples", preds.len(), gts.len())));
    }
    if gts.is_empty() {
        return Err(Error::EmptyInput("rec samples"));
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| {
            let best = p.iter().fold(None::<&(BoxNorm, f64)>, |acc, c| match acc {
                Some(a) if a.1 >= c.1 => Some(a),
                _ => Some(c),
            });
            best.is_some_and(|(b, _)| iou(b, g) >= IOU_HIT)
        })
        .count();
    Ok(hits as f64 / gts.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CocoMetrics {
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar100: f64,
}

/// Outcome of matching one category at one threshold.
struct Matched {
    /// (confidence, is true positive), in ranking order.
    ranked: Vec<bool>,
    n_gt: usize,
}

fn match_category(preds: &[Vec<DetPrediction>], gts: &[Vec<GtBox>], cat: usize, thr: f64) -> Matched {
    let mut dets: Vec<(usize, DetPrediction)> = Vec::new();
    for (img, p) in preds.iter().enumerate() {
        let mut mine: Vec<DetPrediction> = p.iter().copied().filter(|d| d.category == cat).collect();
        mine.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        mine.truncate(MAX_DETS);
        dets.extend(mine.into_iter().map(|d| (img, d)));
    }
    // Stable sort: equal confidences keep image order, then in-image order.
    dets.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));
    let gt_cat: Vec<Vec<BoxNorm>> =
        gts.iter().map(|g| g.iter().filter(|x| x.category == cat).map(|x| x.bbox).collect()).collect();
    let mut used: Vec<Vec<bool>> = gt_cat.iter().map(|g| vec![false; g.len()]).collect();
    let mut ranked = Vec::with_capacity(dets.len());
    for (img, d) in dets {
        let mut best: Option<(usize, f64)> = None;
        if let Some(g) = gt_cat.get(img) {
            for (j, gb) in g.iter().enumerate() {
                if used[img][j] {
                    continue;
                }
                let o = iou(&d.bbox, gb);
                if o >= thr && best.map_or(true, |(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
        }
        match best {
            Some((j, _)) => {
                used[img][j] = true;
                ranked.push(true);
            }
            None => ranked.push(false),
        }
    }
    Matched { ranked, n_gt: gt_cat.iter().map(Vec::len).sum() }
}

/// 101-point interpolated AP and final recall.
fn ap_and_recall(m: &Matched) -> (f64, f64) {
    if m.n_gt == 0 {
        return (0.0, 0.0);
    }
    let mut tp = 0usize;
    let mut prec = Vec::with_capacity(m.ranked.len());
    let mut rec = Vec::with_capacity(m.ranked.len());
    for (i, &hit) in m.ranked.iter().enumerate() {
        tp += hit as usize;
        prec.push(tp as f64 / (i + 1) as f64);
        rec.push(tp as f64 / m.n_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = rec.partition_point(|&x| x < r);
        if idx < prec.len() {
            sum += prec[idx];
        }
    }
    (sum / 101.0, rec.last().copied().unwrap_or(0.0))
}

/// COCO-style box AP over the categories that have ground truth.
pub fn coco_map(preds: &[Vec<DetPrediction>], gts: &[Vec<GtBox>]) -> Result<CocoMetrics> {
    if preds.len() != gts.len() {
        return Err(Error::Dimension(format!("{} prediction lists for {} images", preds.len(), gts.len())));
    }
    let mut cats: Vec<usize> = gts.iter().flatten().map(|g| g.category).collect();
    cats.sort_unstable();
    cats.dedup();
    if cats.is_empty() {
        return Ok(CocoMetrics::default());
    }
    let thr = coco_thresholds();
    let mut ap = vec![vec![0.0; cats.len()]; thr.len()];
    let mut ar = vec![vec![0.0; cats.len()]; thr.len()];
    for (ti, &t) in thr.iter().enumerate() {
        for (ci, &c) in cats.iter().enumerate() {
            let (a, r) = ap_and_recall(&match_category(preds, gts, c, t));
            ap[ti][ci] = a;
            ar[ti][ci] = r;
        }
    }
    let mean = |rows: &[Vec<f64>]| rows.iter().flatten().sum::<f64>() / (rows.len() * cats.len()) as f64;
    Ok(CocoMetrics { map: mean(&ap), ap50: mean(&ap[0..1]), ap75: mean(&ap[5..6]), ar100: mean(&ar) })
}

fn check_phrases(preds: &[Vec<BoxNorm>], gts: &[Vec<BoxNorm>]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::Dimension(format!("{} predictions for {} phrases", preds.len(), gts.len())));
    }
    if gts.is_empty() {
        return Err(Error::EmptyInput("grounding phrases"));
    }
    if gts.iter().any(Vec::is_empty) {
        return Err(Error::EmptyInput("phrase without ground-truth boxes"));
    }
    Ok(())
}

/// A phrase counts when any predicted box hits any of its boxes.
pub fn grounding_any(preds: &[Vec<BoxNorm>], gts: &[Vec<BoxNorm>]) -> Result<f64> {
    check_phrases(preds, gts)?;
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| p.iter().any(|a| g.iter().any(|b| iou(a, b) >= IOU_HIT)))
        .count();
    Ok(hits as f64 / gts.len() as f64)
}

/// A phrase counts when the box enclosing all predictions hits the box
/// enclosing all ground truth.
pub fn grounding_merged(preds: &[Vec<BoxNorm>], gts: &[Vec<BoxNorm>]) -> Result<f64> {
    check_phrases(preds, gts)?;
    let mut hits = 0;
    for (p, g) in preds.iter().zip(gts) {
        if p.is_empty() {
            continue;
        }
        if iou(&merge_boxes(p)?, &merge_boxes(g)?) >= IOU_HIT {
            hits += 1;
        }
    }
    Ok(hits as f64 / gts.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountingMetrics {
    pub mae: f64,
    pub nae: f64,
    /// Samples left out of NAE because their true count is zero.
    pub nae_excluded: usize,
}

pub fn counting_metrics(pred: &[usize], gt: &[usize]) -> Result<CountingMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!("{} predicted counts for {} samples", pred.len(), gt.len())));
    }
    if gt.is_empty() {
        return Err(Error::EmptyInput("counting samples"));
    }
    let err: Vec<f64> = pred.iter().zip(gt).map(|(&p, &g)| (p as f64 - g as f64).abs()).collect();
    let mae = err.iter().sum::<f64>() / gt.len() as f64;
    let terms: Vec<f64> = err.iter().zip(gt).filter(|(_, &g)| g > 0).map(|(e, &g)| e / g as f64).collect();
    let excluded = gt.len() - terms.len();
    if excluded > 0 {
        log::warn!("{excluded} counting sample(s) with zero objects left out of NAE");
    }
    let nae = if terms.is_empty() { 0.0 } else { terms.iter().sum::<f64>() / terms.len() as f64 };
    Ok(CountingMetrics { mae, nae, nae_excluded: excluded })
}

/// One box found in generated text, with the label text before it and the
/// confidence of its tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedBox {
    pub label: Option<String>,
    pub bbox: BoxNorm,
    pub confidence: f64,
}

/// Splits generated ids into bracketed box spans. A box's confidence is the
/// geometric mean over its label and coordinate tokens.
pub fn parse_generation(ids: &[TokenId], probs: &[f64], vocab: &Vocab) -> (Vec<ParsedBox>, Vec<String>) {
    let (open, close) = (vocab.id("["), vocab.id("]"));
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    let mut item_start = 0;
    let mut i = 0;
    while i < ids.len() {
        if Some(ids[i]) != open {
            i += 1;
            continue;
        }
        let Some(end) = (i..ids.len()).find(|&j| Some(ids[j]) == close) else {
            warnings.push("unterminated box".into());
            break;
        };
        let text = detokenize(&ids[i..=end], vocab);
        let decoded = decode_boxes(&text);
        warnings.extend(decoded.warnings);
        if let Some(&bbox) = decoded.boxes.first() {
            let label = detokenize(&ids[item_start..i], vocab);
            let label = label.trim().trim_end_matches('-').trim();
            let label_start = if label.is_empty() { i } else { item_start };
            let span: Vec<f64> = probs.get(label_start..=end).map(|s| s.to_vec()).unwrap_or_default();
            let confidence = token_confidence(&span).unwrap_or(f64::MIN_POSITIVE);
            let label = (!label.is_empty()).then(|| strip_count(label).to_string()).filter(|l| !l.is_empty());
            out.push(ParsedBox { label, bbox, confidence });
        }
        item_start = end + 1;
        i = end + 1;
    }
    (out, warnings)
}

/// Drops a leading count such as the `3` in `3 [..]`.
fn strip_count(label: &str) -> &str {
    label.trim_start_matches(|c: char| c.is_ascii_digit()).trim()
}

/// Leading integer of a counting answer, if any.
pub fn stated_count(answer: &str) -> Option<usize> {
    let digits: String = answer.trim_start().chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}

/// What the evaluator keeps per record; scoring works from this alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionDump {
    pub id: String,
    pub task: Task,
    pub raw_answer: String,
    pub parsed_boxes: Vec<BoxNorm>,
    pub labels: Vec<Option<String>>,
    pub confidences: Vec<f64>,
}

impl PredictionDump {
    pub fn from_tokens(rec: &InstructionRecord, ids: &[TokenId], probs: &[f64], vocab: &Vocab) -> Self {
        let (parsed, warnings) = parse_generation(ids, probs, vocab);
        for w in warnings {
            log::debug!("{}: {w}", rec.id);
        }
        Self {
            id: rec.id.clone(),
            task: rec.task,
            raw_answer: detokenize(ids, vocab),
            parsed_boxes: parsed.iter().map(|p| p.bbox).collect(),
            labels: parsed.iter().map(|p| p.label.clone()).collect(),
            confidences: parsed.iter().map(|p| p.confidence).collect(),
        }
    }

    /// Dump of a model that answers with the reference text at full
    /// confidence.
    pub fn oracle(rec: &InstructionRecord, vocab: &Vocab) -> Self {
        let ids = tokenize(&rec.answer, vocab).ids;
        let probs = vec![1.0; ids.len()];
        Self::from_tokens(rec, &ids, &probs, vocab)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub records: usize,
    pub metrics: BTreeMap<String, f64>,
    pub diagnostics: Vec<String>,
}

fn gt_norm(rec: &InstructionRecord) -> Result<Vec<BoxNorm>> {
    let c = rec.gt.canvas as f64;
    rec.gt.boxes.iter().map(|&b| normalize(&BoxPix::try_from(b)?, c, c)).collect()
}

fn normalize_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Scores dumps against their records, matched by position.
pub fn score(task: Task, records: &[InstructionRecord], dumps: &[PredictionDump]) -> Result<EvalReport> {
    if records.len() != dumps.len() {
        return Err(Error::Dimension(format!("{} dumps for {} records", dumps.len(), records.len())));
    }
    if records.is_empty() {
        return Err(Error::EmptyInput("evaluation records"));
    }
    let mut diagnostics = Vec::new();
    for (r, d) in records.iter().zip(dumps) {
        if r.task != task || d.id != r.id {
            return Err(Error::Dataset(format!("record {} ({}) does not match task {task} / dump {}", r.id, r.task, d.id)));
        }
        if d.parsed_boxes.is_empty() && task.emits_boxes() && d.raw_answer.trim() != NONE_ANSWER {
            diagnostics.push(format!("{}: no boxes parsed from {:?}", r.id, d.raw_answer));
        }
    }
    let mut metrics = BTreeMap::new();
    match task {
        Task::Rec => {
            let preds: Vec<Vec<(BoxNorm, f64)>> = dumps
                .iter()
                .map(|d| d.parsed_boxes.iter().copied().zip(d.confidences.iter().copied()).collect())
                .collect();
            let gts: Result<Vec<BoxNorm>> = records
                .iter()
                .map(|r| gt_norm(r)?.first().copied().ok_or_else(|| Error::Dataset(format!("{}: rec needs one box", r.id))))
                .collect();
            metrics.insert("acc@0.5".into(), rec_accuracy(&preds, &gts?)?);
        }
        Task::Detection => {
            let mut preds = Vec::new();
            let mut gts = Vec::new();
            for (r, d) in records.iter().zip(dumps) {
                let mut p = Vec::new();
                for ((b, l), &c) in d.parsed_boxes.iter().zip(&d.labels).zip(&d.confidences) {
                    match l.as_deref().and_then(Category::parse) {
                        Some(cat) => p.push(DetPrediction { category: cat.index(), bbox: *b, confidence: c }),
                        None => diagnostics.push(format!("{}: box with unknown label {l:?}", r.id)),
                    }
                }
                preds.push(p);
                let boxes = gt_norm(r)?;
                let mut g = Vec::new();
                for (name, b) in r.gt.categories.iter().zip(boxes) {
                    let cat = Category::parse(name).ok_or_else(|| Error::Dataset(format!("unknown category {name}")))?;
                    g.push(GtBox { category: cat.index(), bbox: b });
                }
                gts.push(g);
            }
            let m = coco_map(&preds, &gts)?;
            metrics.insert("mAP".into(), m.map);
            metrics.insert("AP50".into(), m.ap50);
            metrics.insert("AP75".into(), m.ap75);
            metrics.insert("AR100".into(), m.ar100);
        }
        Task::Grounding => {
            let preds: Vec<Vec<BoxNorm>> = dumps.iter().map(|d| d.parsed_boxes.clone()).collect();
            let gts: Result<Vec<Vec<BoxNorm>>> = records.iter().map(gt_norm).collect();
            let gts = gts?;
            metrics.insert("any_box".into(), grounding_any(&preds, &gts)?);
            metrics.insert("merged_box".into(), grounding_merged(&preds, &gts)?);
        }
        Task::Counting => {
            let pred: Vec<usize> = dumps.iter().map(|d| d.parsed_boxes.len()).collect();
            let gt: Vec<usize> = records.iter().map(|r| r.gt.boxes.len()).collect();
            for (d, &n) in dumps.iter().zip(&pred) {
                if let Some(s) = stated_count(&d.raw_answer).filter(|&s| s != n) {
                    diagnostics.push(format!("{}: answer states {s} but lists {n} boxes", d.id));
                }
            }
            let m = counting_metrics(&pred, &gt)?;
            metrics.insert("MAE".into(), m.mae);
            metrics.insert("NAE".into(), m.nae);
        }
        Task::NonexistJudge => {
            let ok = dumps.iter().filter(|d| d.parsed_boxes.is_empty() && d.raw_answer.trim() == NONE_ANSWER).count();
            metrics.insert("accuracy".into(), ok as f64 / dumps.len() as f64);
        }
        Task::Reg | Task::Caption => {
            let ok = records
                .iter()
                .zip(dumps)
                .filter(|(r, d)| normalize_text(&r.answer) == normalize_text(&d.raw_answer))
                .count();
            metrics.insert("exact_match".into(), ok as f64 / dumps.len() as f64);
        }
    }
    if let Some((k, v)) = metrics.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("metric {k} = {v}")));
    }
    Ok(EvalReport { task, records: records.len(), metrics, diagnostics })
}

/// Greedy generation over every record of `task`, then scoring. Returns the
/// report and the per-record dumps.
pub fn evaluate_model<F: Scalar>(
    model: &Model<F>,
    records: &[InstructionRecord],
    task: Task,
    base_dir: Option<&Path>,
    max_new: usize,
) -> Result<(EvalReport, Vec<PredictionDump>)> {
    let selected: Vec<InstructionRecord> = records.iter().filter(|r| r.task == task).cloned().collect();
    if selected.is_empty() {
        return Err(Error::EmptyInput("no records for the requested task"));
    }
    let mut dumps = Vec::with_capacity(selected.len());
    for rec in &selected {
        let ex = to_example::<F>(rec, &model.vocab, model.cfg.encoder.resolution, model.cfg.region.resolution, base_dir)?;
        let out = model.generate(&ex.image, ex.region.as_ref(), &ex.instruction, max_new)?;
        let keep = out.ids.iter().position(|&t| t == EOS).unwrap_or(out.ids.len());
        let ids: Vec<TokenId> = out.ids[..keep].iter().copied().filter(|&t| t != PAD && t != BOS).collect();
        dumps.push(PredictionDump::from_tokens(rec, &ids, &out.probs[..keep], &model.vocab));
    }
    let report = score(task, &selected, &dumps)?;
    Ok((report, dumps))
}
