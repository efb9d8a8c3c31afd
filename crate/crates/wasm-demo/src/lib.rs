//! Browser bindings for three interactive views: the token-budget planner,
//! position-embedding interpolation, and the box-text codec on a synthetic
//! scene. Every export returns a JSON string.

use hires_vlm::data::{gen_synthetic_scene, to_instruction, ImageRef, Phrasing, SceneConfig, Task, Templates};
use hires_vlm::geometry::{decode_labeled, encode_box, iou, merge_boxes, DEFAULT_PRECISION};
use hires_vlm::nn::Tensor;
use hires_vlm::visual::{adapt_pos_embed, plan_resolution, visual_token_count, DEFAULT_KERNEL, DEFAULT_PADDING};
use rand::SeedableRng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn to_js(r: Result<Value, String>) -> Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

/// Planner result plus token counts at every resolution up to `max_res`,
/// with and without the strided projector.
pub fn token_curve(limit: usize, answer: usize, reserve: usize, patch: usize, stride: usize, max_res: usize) -> Result<Value, String> {
    let plan = plan_resolution(limit, answer, reserve, patch, stride).map_err(|e| e.to_string())?;
    let mut points = Vec::new();
    let mut res = patch * 2;
    while res <= max_res {
        let with = visual_token_count(res, patch, stride, DEFAULT_KERNEL, DEFAULT_PADDING).map_err(|e| e.to_string())?;
        let without = (res / patch) * (res / patch);
        points.push(json!({ "resolution": res, "projector": with, "plain": without }));
        res += patch;
    }
    Ok(json!({ "plan": plan, "room": limit.saturating_sub(answer + reserve), "points": points }))
}

/// A smooth `g0×g0` one-channel embedding resized to `g×g`.
pub fn pos_embed_heatmap(g0: usize, g: usize) -> Result<Value, String> {
    if g0 < 2 || g < 2 || g0 > 64 || g > 128 {
        return Err("grid sides must lie in 2..=64 (source) and 2..=128 (target)".into());
    }
    let mut src = Vec::with_capacity(g0 * g0);
    for i in 0..g0 {
        for j in 0..g0 {
            let (y, x) = (i as f64 / (g0 - 1) as f64, j as f64 / (g0 - 1) as f64);
            src.push((std::f64::consts::PI * x).sin() * (1.5 * std::f64::consts::PI * y).cos());
        }
    }
    let t = Tensor::<f64>::from_vec(&[g0, g0, 1], src.clone()).map_err(|e| e.to_string())?;
    let out = adapt_pos_embed(&t, g).map_err(|e| e.to_string())?;
    Ok(json!({ "source": { "side": g0, "values": src }, "target": { "side": g, "values": out.data() } }))
}

/// Parses box text, reports every box, their pairwise IoU and enclosing box,
/// and re-encodes each box.
pub fn box_playground(text: &str) -> Value {
    let (boxes, warnings) = decode_labeled(text);
    let n = boxes.len();
    let mut pair_iou = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            pair_iou[i][j] = iou(&boxes[i].bbox, &boxes[j].bbox);
        }
    }
    let plain: Vec<_> = boxes.iter().map(|b| b.bbox).collect();
    let merged = merge_boxes(&plain).ok().map(|m| m.to_array());
    let items: Vec<Value> = boxes
        .iter()
        .map(|b| json!({ "label": b.label, "box": b.bbox.to_array(), "text": encode_box(&b.bbox, DEFAULT_PRECISION).0 }))
        .collect();
    json!({ "boxes": items, "iou": pair_iou, "merged": merged, "warnings": warnings })
}

/// A synthetic scene as a base64 PNG with its detection answer text.
pub fn scene(seed: u64, max_objects: usize) -> Result<Value, String> {
    let cfg = SceneConfig { max_objects: max_objects.clamp(1, 10), ..SceneConfig::default() };
    let s = gen_synthetic_scene(seed, &cfg).map_err(|e| e.to_string())?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let rec = to_instruction(&s, Task::Detection, Templates::builtin(), Phrasing::Canonical, &mut rng)
        .map_err(|e| e.to_string())?
        .ok_or("scene admits no detection record")?;
    let png = match rec.image {
        ImageRef::Base64(b) => b,
        ImageRef::Path(p) => return Err(format!("unexpected image path {p}")),
    };
    Ok(json!({ "canvas": s.canvas, "png": png, "instruction": rec.instruction, "answer": rec.answer }))
}

#[wasm_bindgen(js_name = tokenCurve)]
pub fn token_curve_js(limit: usize, answer: usize, reserve: usize, patch: usize, stride: usize, max_res: usize) -> Result<String, JsValue> {
    to_js(token_curve(limit, answer, reserve, patch, stride, max_res))
}

#[wasm_bindgen(js_name = posEmbedHeatmap)]
pub fn pos_embed_heatmap_js(g0: usize, g: usize) -> Result<String, JsValue> {
    to_js(pos_embed_heatmap(g0, g))
}

#[wasm_bindgen(js_name = boxPlayground)]
pub fn box_playground_js(text: &str) -> String {
    box_playground(text).to_string()
}

#[wasm_bindgen(js_name = scene)]
pub fn scene_js(seed: u32, max_objects: usize) -> Result<String, JsValue> {
    to_js(scene(seed as u64, max_objects))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_contains_the_plan() {
        let v = token_curve(4096, 2500, 200, 14, 2, 1100).unwrap();
        assert_eq!(v["plan"]["resolution"], 1022);
        assert_eq!(v["plan"]["tokens"], 1369);
        let p = v["points"].as_array().unwrap().iter().find(|p| p["resolution"] == 448).unwrap();
        assert_eq!(p["plain"], 1024);
        assert!(token_curve(100, 90, 20, 14, 2, 200).is_err());
    }

    #[test]
    fn heatmap_sides() {
        let v = pos_embed_heatmap(4, 9).unwrap();
        assert_eq!(v["target"]["values"].as_array().unwrap().len(), 81);
        let src = v["source"]["values"].as_array().unwrap();
        let dst = v["target"]["values"].as_array().unwrap();
        assert_eq!(src[0], dst[0]);
        assert!(pos_embed_heatmap(1, 4).is_err());
    }

    #[test]
    fn playground_reports_boxes() {
        let v = box_playground("red circle-[0.1,0.1,0.3,0.3] [0.2,0.2,0.4,0.4] [0.5,0.5,0.5,0.6]");
        assert_eq!(v["boxes"].as_array().unwrap().len(), 2);
        assert_eq!(v["boxes"][0]["label"], "red circle");
        assert_eq!(v["boxes"][0]["text"], "[0.100,0.100,0.300,0.300]");
        assert_eq!(v["merged"], json!([0.1, 0.1, 0.4, 0.4]));
        assert_eq!(v["warnings"].as_array().unwrap().len(), 1);
        assert_eq!(v["iou"][0][0], 1.0);
    }

    #[test]
    fn scene_is_deterministic() {
        let a = scene(3, 5).unwrap();
        assert_eq!(a, scene(3, 5).unwrap());
        assert!(a["answer"].as_str().unwrap().contains('['));
        assert!(!a["png"].as_str().unwrap().is_empty());
    }
}
