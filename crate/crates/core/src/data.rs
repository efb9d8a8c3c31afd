//! Synthetic shape scenes and their conversion into instruction/answer
//! records for each training stage.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::OnceLock;

use base64::Engine as _;
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coreferring::crop_region;
use crate::geometry::{encode_box, iou_raw, normalize, BoxPix, DEFAULT_PRECISION};
use crate::model::Example;
use crate::nn::{Scalar, Tensor};
use crate::textcodec::{tokenize, Vocab, EOS, PLACEHOLDER_TEXT};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

pub const COLORS: [Color; 3] = [Color::Red, Color::Green, Color::Blue];
pub const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

impl Color {
    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }

    fn base_rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [215, 40, 40],
            Color::Green => [40, 190, 60],
            Color::Blue => [45, 70, 220],
        }
    }
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

/// One cell of the color × shape taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Category {
    pub color: Color,
    pub shape: Shape,
}

impl Category {
    /// Every category, color-major.
    pub fn all() -> Vec<Category> {
        COLORS
            .iter()
            .flat_map(|&color| SHAPES.iter().map(move |&shape| Category { color, shape }))
            .collect()
    }

    pub fn index(self) -> usize {
        self.color as usize * SHAPES.len() + self.shape as usize
    }

    pub fn from_index(i: usize) -> Option<Category> {
        (i < COLORS.len() * SHAPES.len())
            .then(|| Category { color: COLORS[i / SHAPES.len()], shape: SHAPES[i % SHAPES.len()] })
    }

    pub fn parse(s: &str) -> Option<Category> {
        let mut words = s.split_whitespace();
        let (c, sh) = (words.next()?, words.next()?);
        if words.next().is_some() {
            return None;
        }
        let color = *COLORS.iter().find(|k| k.name() == c)?;
        let shape = *SHAPES.iter().find(|k| k.name() == sh)?;
        Some(Category { color, shape })
    }

    pub fn plural(self) -> String {
        format!("{} {}s", self.color.name(), self.shape.name())
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.color.name(), self.shape.name())
    }
}

/// Pixel image carried by a record: either inline PNG or a file next to the
/// dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageRef {
    Base64(String),
    Path(String),
}

impl ImageRef {
    pub fn inline(img: &RgbImage) -> Result<Self> {
        let mut buf = std::io::Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(ImageRef::Base64(base64::engine::general_purpose::STANDARD.encode(buf.into_inner())))
    }

    /// Decodes the image; relative paths resolve against `base_dir`.
    pub fn load(&self, base_dir: Option<&Path>) -> Result<RgbImage> {
        match self {
            ImageRef::Base64(s) => {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(s)
                    .map_err(|e| Error::Dataset(format!("bad base64 image: {e}")))?;
                Ok(image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)?.to_rgb8())
            }
            ImageRef::Path(p) => {
                let p = Path::new(p);
                let full = match base_dir {
                    Some(d) if p.is_relative() => d.join(p),
                    _ => p.to_path_buf(),
                };
                Ok(image::open(full)?.to_rgb8())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub color: Color,
    pub shape: Shape,
    pub bbox: BoxPix,
    pub rgb: [u8; 3],
}

impl SceneObject {
    pub fn category(&self) -> Category {
        Category { color: self.color, shape: self.shape }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: String,
    pub canvas: usize,
    pub background: [u8; 3],
    pub objects: Vec<SceneObject>,
    /// Stored pixels; when absent the scene is rendered from `objects`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
}

impl SceneRecord {
    pub fn render(&self) -> RgbImage {
        render_scene(self.canvas, self.background, &self.objects)
    }

    pub fn image_ref(&self) -> Result<ImageRef> {
        match &self.image {
            Some(i) => Ok(i.clone()),
            None => ImageRef::inline(&self.render()),
        }
    }

    pub fn count(&self, cat: Category) -> usize {
        self.objects.iter().filter(|o| o.category() == cat).count()
    }

    /// Objects of `cat` in reading order.
    pub fn instances(&self, cat: Category) -> Vec<&SceneObject> {
        let mut v: Vec<&SceneObject> = self.objects.iter().filter(|o| o.category() == cat).collect();
        sort_reading_order(&mut v);
        v
    }
}

fn sort_reading_order(v: &mut [&SceneObject]) {
    v.sort_by(|a, b| {
        (a.bbox.y1, a.bbox.x1)
            .partial_cmp(&(b.bbox.y1, b.bbox.x1))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub canvas: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub max_iou: f64,
    pub retries: usize,
    /// Chance that a new object copies the category of one already placed.
    /// Copying a uniformly chosen earlier object keeps the per-object
    /// category marginal uniform.
    pub repeat_prob: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            canvas: 64,
            min_objects: 1,
            max_objects: 6,
            min_size: 14,
            max_size: 22,
            max_iou: 0.3,
            retries: 50,
            repeat_prob: 0.35,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene: {m}")));
        if self.canvas < 32 {
            return bad("canvas must be at least 32 px");
        }
        if self.max_objects < 1 || self.min_objects > self.max_objects {
            return bad("need 1 <= max_objects and min_objects <= max_objects");
        }
        if self.min_size < 2 || self.min_size > self.max_size || self.max_size > self.canvas {
            return bad("object sizes must satisfy 2 <= min <= max <= canvas");
        }
        if !(0.0..=1.0).contains(&self.max_iou) || !(0.0..=1.0).contains(&self.repeat_prob) {
            return bad("max_iou and repeat_prob must lie in [0,1]");
        }
        Ok(())
    }
}

/// Mixes a master seed with an index (splitmix64 finalizer).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn jitter(rng: &mut ChaCha8Rng, base: [u8; 3], amount: i32) -> [u8; 3] {
    base.map(|c| (c as i32 + rng.gen_range(-amount..=amount)).clamp(0, 255) as u8)
}

pub fn gen_synthetic_scene(seed: u64, cfg: &SceneConfig) -> Result<SceneRecord> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cats = Category::all();
    let target = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let g = rng.gen_range(20..=70u8);
    let background = jitter(&mut rng, [g, g, g], 8);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(target);
    let canvas = cfg.canvas as f64;
    for _ in 0..target {
        let cat = if !objects.is_empty() && rng.gen_bool(cfg.repeat_prob) {
            objects[rng.gen_range(0..objects.len())].category()
        } else {
            cats[rng.gen_range(0..cats.len())]
        };
        let rgb = jitter(&mut rng, cat.color.base_rgb(), 25);
        for _ in 0..cfg.retries {
            let size = rng.gen_range(cfg.min_size..=cfg.max_size);
            let x = rng.gen_range(0..=cfg.canvas - size) as f64;
            let y = rng.gen_range(0..=cfg.canvas - size) as f64;
            let cand = [x, y, x + size as f64, y + size as f64];
            let ok = objects.iter().all(|o| {
                let b = o.bbox.to_array().map(|v| v / canvas);
                iou_raw(b, cand.map(|v| v / canvas)) <= cfg.max_iou
            });
            if ok {
                let bbox = BoxPix::try_from(cand)?;
                objects.push(SceneObject { color: cat.color, shape: cat.shape, bbox, rgb });
                break;
            }
        }
    }
    Ok(SceneRecord { id: format!("scene-{seed:016x}"), canvas: cfg.canvas, background, objects, image: None })
}

/// Paints the objects in order over a flat background. Circles and triangles
/// touch all four sides of their box.
pub fn render_scene(canvas: usize, background: [u8; 3], objects: &[SceneObject]) -> RgbImage {
    let mut img = RgbImage::from_pixel(canvas as u32, canvas as u32, Rgb(background));
    for o in objects {
        let [x1, y1, x2, y2] = o.bbox.to_array();
        let (w, h) = (x2 - x1, y2 - y1);
        let (cx, cy) = (x1 + w / 2.0, y1 + h / 2.0);
        let px0 = x1.floor().max(0.0) as u32;
        let py0 = y1.floor().max(0.0) as u32;
        let px1 = (x2.ceil() as u32).min(canvas as u32);
        let py1 = (y2.ceil() as u32).min(canvas as u32);
        for py in py0..py1 {
            for px in px0..px1 {
                let (u, v) = (px as f64 + 0.5, py as f64 + 0.5);
                if u < x1 || u > x2 || v < y1 || v > y2 {
                    continue;
                }
                let inside = match o.shape {
                    Shape::Square => true,
                    Shape::Circle => {
                        let (dx, dy) = ((u - cx) / (w / 2.0), (v - cy) / (h / 2.0));
                        // Slightly generous so the extreme pixels reach the box edge.
                        dx * dx + dy * dy <= 1.0 + 2.0 / w.min(h)
                    }
                    Shape::Triangle => {
                        let t = (v - y1) / h;
                        (u - cx).abs() <= t * w / 2.0 + 0.5
                    }
                };
                if inside {
                    img.put_pixel(px, py, Rgb(o.rgb));
                }
            }
        }
    }
    img
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "caption")]
    Caption,
    #[serde(rename = "detection")]
    Detection,
    #[serde(rename = "rec")]
    Rec,
    #[serde(rename = "reg")]
    Reg,
    #[serde(rename = "grounding")]
    Grounding,
    #[serde(rename = "counting")]
    Counting,
    #[serde(rename = "nonexist-judge")]
    NonexistJudge,
}

impl Task {
    pub const ALL: [Task; 7] = [
        Task::Caption,
        Task::Detection,
        Task::Rec,
        Task::Reg,
        Task::Grounding,
        Task::Counting,
        Task::NonexistJudge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Caption => "caption",
            Task::Detection => "detection",
            Task::Rec => "rec",
            Task::Reg => "reg",
            Task::Grounding => "grounding",
            Task::Counting => "counting",
            Task::NonexistJudge => "nonexist-judge",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.name() == s)
    }

    /// Tasks whose answers carry boxes.
    pub fn emits_boxes(self) -> bool {
        matches!(self, Task::Detection | Task::Rec | Task::Grounding | Task::Counting)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Answer for a query whose target is absent from the image.
pub const NONE_ANSWER: &str = "None";

#[derive(Debug, Deserialize)]
struct TemplateFile {
    version: u32,
    templates: Vec<TemplateEntry>,
}

#[derive(Debug, Deserialize)]
struct TemplateEntry {
    task: Task,
    texts: Vec<String>,
}

/// Instruction phrasings per task; the first one is canonical.
#[derive(Debug, Clone)]
pub struct Templates {
    pub version: u32,
    by_task: BTreeMap<Task, Vec<String>>,
}

impl Templates {
    pub fn from_json(s: &str) -> Result<Self> {
        let f: TemplateFile = serde_json::from_str(s)?;
        let mut by_task = BTreeMap::new();
        for e in f.templates {
            if e.texts.is_empty() {
                return Err(Error::Config(format!("no templates for task {}", e.task)));
            }
            by_task.insert(e.task, e.texts);
        }
        for t in Task::ALL {
            if !by_task.contains_key(&t) {
                return Err(Error::Config(format!("no templates for task {t}")));
            }
        }
        Ok(Self { version: f.version, by_task })
    }

    /// The templates shipped with the crate.
    pub fn builtin() -> &'static Templates {
        static T: OnceLock<Templates> = OnceLock::new();
        T.get_or_init(|| {
            Templates::from_json(include_str!("../assets/templates.json")).expect("bundled templates parse")
        })
    }

    pub fn texts(&self, task: Task) -> &[String] {
        &self.by_task[&task]
    }
}

/// Which phrasings a stage draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phrasing {
    Canonical,
    Diverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub categories: Vec<String>,
    /// Pixel boxes, aligned with `categories`.
    pub boxes: Vec<[f64; 4]>,
    pub canvas: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: String,
    pub stage: u8,
    pub task: Task,
    pub image: ImageRef,
    pub instruction: String,
    pub answer: String,
    pub region_ref: Option<[f64; 4]>,
    pub gt: GroundTruth,
}

impl InstructionRecord {
    pub fn gt_boxes(&self) -> Result<Vec<BoxPix>> {
        self.gt.boxes.iter().map(|&b| BoxPix::try_from(b)).collect()
    }
}

fn box_text(b: &BoxPix, canvas: usize) -> Result<String> {
    let n = normalize(b, canvas as f64, canvas as f64)?;
    Ok(encode_box(&n, DEFAULT_PRECISION).0)
}

const NUMBER_WORDS: [&str; 13] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
];

fn number_word(n: usize) -> String {
    NUMBER_WORDS.get(n).map_or_else(|| n.to_string(), |s| s.to_string())
}

pub fn caption_text(scene: &SceneRecord) -> String {
    let parts: Vec<String> = Category::all()
        .into_iter()
        .filter_map(|c| match scene.count(c) {
            0 => None,
            1 => Some(format!("one {c}")),
            n => Some(format!("{} {}", number_word(n), c.plural())),
        })
        .collect();
    match parts.len() {
        0 => "an empty image".to_string(),
        1 => format!("an image with {}", parts[0]),
        _ => {
            let (last, head) = parts.split_last().expect("non-empty");
            format!("an image with {} and {last}", head.join(" , "))
        }
    }
}

fn fill(template: &str, category: Option<Category>, coords: Option<&str>) -> String {
    let mut s = template.to_string();
    if let Some(c) = category {
        s = s.replace("{category}", &c.to_string());
    }
    if let Some(k) = coords {
        s = s.replace("{coords}", k);
    }
    s
}

fn pick_template<'a>(texts: &'a [String], phrasing: Phrasing, rng: &mut ChaCha8Rng) -> &'a str {
    match phrasing {
        Phrasing::Canonical => &texts[0],
        Phrasing::Diverse => &texts[rng.gen_range(0..texts.len())],
    }
}

fn gt_of(objs: &[&SceneObject], canvas: usize) -> GroundTruth {
    GroundTruth {
        categories: objs.iter().map(|o| o.category().to_string()).collect(),
        boxes: objs.iter().map(|o| o.bbox.to_array()).collect(),
        canvas,
    }
}

/// Fills a task template from the scene. `Ok(None)` means the task does not
/// apply to this scene (e.g. no uniquely describable object for `rec`).
pub fn to_instruction(
    scene: &SceneRecord,
    task: Task,
    templates: &Templates,
    phrasing: Phrasing,
    rng: &mut ChaCha8Rng,
) -> Result<Option<InstructionRecord>> {
    let canvas = scene.canvas;
    let template = pick_template(templates.texts(task), phrasing, rng).to_string();
    let present: Vec<Category> = Category::all().into_iter().filter(|&c| scene.count(c) > 0).collect();
    let mut region_ref = None;
    let (instruction, answer, gt) = match task {
        Task::Caption => {
            let mut all: Vec<&SceneObject> = scene.objects.iter().collect();
            sort_reading_order(&mut all);
            (template, caption_text(scene), gt_of(&all, canvas))
        }
        Task::Detection => {
            let mut all: Vec<&SceneObject> = scene.objects.iter().collect();
            sort_reading_order(&mut all);
            let answer = if all.is_empty() {
                NONE_ANSWER.to_string()
            } else {
                let items: Result<Vec<String>> = all
                    .iter()
                    .map(|o| Ok(format!("{}-{}", o.category(), box_text(&o.bbox, canvas)?)))
                    .collect();
                items?.join(" ")
            };
            (template, answer, gt_of(&all, canvas))
        }
        Task::Rec => {
            let unique: Vec<Category> = present.iter().copied().filter(|&c| scene.count(c) == 1).collect();
            let Some(&cat) = unique.choose(rng) else { return Ok(None) };
            let obj = scene.instances(cat);
            (fill(&template, Some(cat), None), box_text(&obj[0].bbox, canvas)?, gt_of(&obj, canvas))
        }
        Task::NonexistJudge => {
            let absent: Vec<Category> = Category::all().into_iter().filter(|&c| scene.count(c) == 0).collect();
            let Some(&cat) = absent.choose(rng) else { return Ok(None) };
            let gt = GroundTruth { categories: vec![], boxes: vec![], canvas };
            (fill(&template, Some(cat), None), NONE_ANSWER.to_string(), gt)
        }
        Task::Grounding => {
            let Some(&cat) = present.choose(rng) else { return Ok(None) };
            let objs = scene.instances(cat);
            let boxes: Result<Vec<String>> = objs.iter().map(|o| box_text(&o.bbox, canvas)).collect();
            (fill(&template, Some(cat), None), boxes?.join(" "), gt_of(&objs, canvas))
        }
        Task::Counting => {
            let Some(exemplar) = scene.objects.choose(rng) else { return Ok(None) };
            let objs = scene.instances(exemplar.category());
            region_ref = Some(exemplar.bbox.to_array());
            let boxes: Result<Vec<String>> = objs.iter().map(|o| box_text(&o.bbox, canvas)).collect();
            let answer = format!("{} {}", objs.len(), boxes?.join(" "));
            if template.matches(PLACEHOLDER_TEXT).count() != 1 {
                return Err(Error::Config("counting templates need exactly one region placeholder".into()));
            }
            (template, answer, gt_of(&objs, canvas))
        }
        Task::Reg => {
            let Some(obj) = scene.objects.choose(rng) else { return Ok(None) };
            let coords = box_text(&obj.bbox, canvas)?;
            (fill(&template, None, Some(&coords)), obj.category().to_string(), gt_of(&[obj], canvas))
        }
    };
    let image = scene.image_ref()?;
    Ok(Some(InstructionRecord {
        id: format!("{}-{}", scene.id, task),
        stage: 0,
        task,
        image,
        instruction,
        answer,
        region_ref,
        gt,
    }))
}

/// Task weights for a stage. Stage 1 is image-text only; stages 2 and 3
/// share the localization mix and differ in phrasing.
pub fn stage_mix(stage: u8) -> Result<(Vec<(Task, f64)>, Phrasing)> {
    let loc = vec![
        (Task::Detection, 0.25),
        (Task::Rec, 0.20),
        (Task::NonexistJudge, 0.10),
        (Task::Grounding, 0.15),
        (Task::Counting, 0.15),
        (Task::Reg, 0.15),
    ];
    match stage {
        1 => Ok((vec![(Task::Caption, 1.0)], Phrasing::Canonical)),
        2 => Ok((loc, Phrasing::Canonical)),
        3 => Ok((loc, Phrasing::Diverse)),
        s => Err(Error::UnknownStage(s)),
    }
}

#[derive(Debug, Clone)]
pub enum SceneSource {
    Synthetic(SceneConfig),
    Scenes(Vec<SceneRecord>),
}

fn pick_task(mix: &[(Task, f64)], rng: &mut ChaCha8Rng) -> Task {
    let total: f64 = mix.iter().map(|m| m.1).sum();
    let mut u = rng.gen_range(0.0..total);
    for &(t, w) in mix {
        if u < w {
            return t;
        }
        u -= w;
    }
    mix[mix.len() - 1].0
}

const MAX_ATTEMPTS: u64 = 64;

/// Builds `size` records for `stage`. Record `i` depends only on
/// `(seed, i)`; the final order is a seeded shuffle.
pub fn build_stage_dataset(
    stage: u8,
    source: &SceneSource,
    size: usize,
    seed: u64,
    templates: &Templates,
) -> Result<Vec<InstructionRecord>> {
    let (mix, phrasing) = stage_mix(stage)?;
    match source {
        SceneSource::Synthetic(cfg) => cfg.validate()?,
        SceneSource::Scenes(s) if s.is_empty() => return Err(Error::EmptyInput("scene source")),
        SceneSource::Scenes(_) => {}
    }
    let stage_seed = derive_seed(seed, stage as u64);
    let mut out = Vec::with_capacity(size);
    for i in 0..size {
        let rec_seed = derive_seed(stage_seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(rec_seed);
        let task = pick_task(&mix, &mut rng);
        let mut made = None;
        for attempt in 0..MAX_ATTEMPTS {
            let scene = match source {
                SceneSource::Synthetic(cfg) => gen_synthetic_scene(derive_seed(rec_seed, attempt), cfg)?,
                SceneSource::Scenes(s) => s[rng.gen_range(0..s.len())].clone(),
            };
            if let Some(mut r) = to_instruction(&scene, task, templates, phrasing, &mut rng)? {
                r.stage = stage;
                r.id = format!("s{stage}-{i:06}-{task}");
                made = Some(r);
                break;
            }
        }
        out.push(made.ok_or_else(|| {
            Error::Dataset(format!("no scene in the source admits task {task} (record {i})"))
        })?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(stage_seed, u64::MAX));
    out.shuffle(&mut rng);
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

/// Text that fixes the vocabulary: every template, every category in singular
/// and plural, caption connectives, number words and the sentinel.
pub fn vocab_corpus(templates: &Templates) -> Vec<String> {
    let mut c: Vec<String> = Task::ALL.iter().flat_map(|&t| templates.texts(t).iter().cloned()).collect();
    for cat in Category::all() {
        c.push(cat.to_string());
        c.push(cat.plural());
    }
    c.push("an empty image with and ,".into());
    c.push(NUMBER_WORDS.join(" "));
    c.push(NONE_ANSWER.into());
    c
}

pub fn default_vocab() -> Vocab {
    Vocab::build(&vocab_corpus(Templates::builtin())).expect("non-empty corpus")
}

/// Pixel values mapped to [-1, 1], resized to `resolution` when needed.
pub fn image_tensor<F: Scalar>(img: &RgbImage, resolution: usize) -> Tensor<F> {
    let owned;
    let img = if img.width() as usize != resolution || img.height() as usize != resolution {
        owned = image::imageops::resize(
            img,
            resolution as u32,
            resolution as u32,
            image::imageops::FilterType::Triangle,
        );
        &owned
    } else {
        img
    };
    let data = img.as_raw().iter().map(|&p| F::lit(p as f64 / 127.5 - 1.0)).collect();
    Tensor::from_vec(&[resolution, resolution, 3], data).expect("rgb buffer matches shape")
}

/// Most frequent colour of the image, taken as its flat background.
fn background_color(img: &RgbImage) -> Rgb<u8> {
    let mut counts: BTreeMap<[u8; 3], usize> = BTreeMap::new();
    for p in img.pixels() {
        *counts.entry(p.0).or_default() += 1;
    }
    Rgb(counts.into_iter().max_by_key(|&(c, n)| (n, std::cmp::Reverse(c))).map(|(c, _)| c).unwrap_or([0, 0, 0]))
}

/// Moves a square record by a random whole-pixel offset. The image slides
/// over its background colour and every box in the instruction, answer,
/// region and ground truth moves with it; the offset keeps all painted
/// pixels and boxes on the canvas. Box texts are matched against the ground
/// truth, so a record whose text names a box outside it is returned as is.
pub fn shift_record(rec: &InstructionRecord, img: &RgbImage, rng: &mut ChaCha8Rng) -> Result<(InstructionRecord, RgbImage)> {
    let unchanged = || Ok((rec.clone(), img.clone()));
    let canvas = rec.gt.canvas;
    if img.width() as usize != canvas || img.height() as usize != canvas {
        return unchanged();
    }
    let bg = background_color(img);
    let n = canvas as i64;
    let (mut lo, mut hi) = ([n, n], [0i64, 0]);
    let mut extend = |x0: i64, y0: i64, x1: i64, y1: i64| {
        lo = [lo[0].min(x0), lo[1].min(y0)];
        hi = [hi[0].max(x1), hi[1].max(y1)];
    };
    for (x, y, p) in img.enumerate_pixels() {
        if *p != bg {
            extend(x as i64, y as i64, x as i64 + 1, y as i64 + 1);
        }
    }
    let mut boxes: Vec<[f64; 4]> = rec.gt.boxes.clone();
    boxes.extend(rec.region_ref);
    for b in &boxes {
        if b.iter().any(|v| v.fract() != 0.0) {
            return unchanged();
        }
        extend(b[0] as i64, b[1] as i64, b[2] as i64, b[3] as i64);
    }
    if lo[0] >= hi[0] {
        return unchanged();
    }
    let dx = rng.gen_range(-lo[0]..=n - hi[0]);
    let dy = rng.gen_range(-lo[1]..=n - hi[1]);
    let moved = |b: &[f64; 4]| [b[0] + dx as f64, b[1] + dy as f64, b[2] + dx as f64, b[3] + dy as f64];

    let mut texts: BTreeMap<String, String> = BTreeMap::new();
    for b in &rec.gt.boxes {
        texts.insert(box_text(&BoxPix::try_from(*b)?, canvas)?, box_text(&BoxPix::try_from(moved(b))?, canvas)?);
    }
    let rewrite = |s: &str| -> Option<String> {
        let mut out = String::with_capacity(s.len());
        let mut rest = s;
        while let Some(i) = rest.find('[') {
            let j = i + rest[i..].find(']')? + 1;
            out.push_str(&rest[..i]);
            out.push_str(texts.get(&rest[i..j])?);
            rest = &rest[j..];
        }
        out.push_str(rest);
        Some(out)
    };
    let (Some(instruction), Some(answer)) = (rewrite(&rec.instruction), rewrite(&rec.answer)) else {
        return unchanged();
    };

    let mut out = RgbImage::from_pixel(canvas as u32, canvas as u32, bg);
    for (x, y, p) in img.enumerate_pixels() {
        let (tx, ty) = (x as i64 + dx, y as i64 + dy);
        if (0..n).contains(&tx) && (0..n).contains(&ty) {
            out.put_pixel(tx as u32, ty as u32, *p);
        }
    }
    let mut shifted = rec.clone();
    shifted.instruction = instruction;
    shifted.answer = answer;
    shifted.region_ref = rec.region_ref.as_ref().map(moved);
    shifted.gt.boxes = rec.gt.boxes.iter().map(moved).collect();
    Ok((shifted, out))
}

/// Turns a record into a model example: image tensor, referring crop, the
/// tokenized instruction, and answer ids terminated by EOS.
pub fn to_example<F: Scalar>(
    rec: &InstructionRecord,
    vocab: &Vocab,
    resolution: usize,
    region_resolution: usize,
    base_dir: Option<&Path>,
) -> Result<Example<F>> {
    let img = rec.image.load(base_dir)?;
    example_from_image(rec, &img, vocab, resolution, region_resolution)
}

/// [`to_example`] with the image already decoded; `rec.image` is ignored.
pub fn example_from_image<F: Scalar>(
    rec: &InstructionRecord,
    img: &RgbImage,
    vocab: &Vocab,
    resolution: usize,
    region_resolution: usize,
) -> Result<Example<F>> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let full = image_tensor::<F>(img, img.width() as usize);
    let image = if img.width() as usize == resolution && img.height() as usize == resolution {
        full.clone()
    } else {
        image_tensor::<F>(img, resolution)
    };
    let region = match rec.region_ref {
        Some(b) => {
            let b = BoxPix::try_from(b)?;
            if b.x2 > w || b.y2 > h {
                return Err(Error::OutOfFrame(format!("{:?}", b.to_array()), w, h));
            }
            Some(crop_region(&full, &b, region_resolution)?)
        }
        None => None,
    };
    let instruction = tokenize(&rec.instruction, vocab);
    let mut answer = tokenize(&rec.answer, vocab).ids;
    answer.push(EOS);
    Ok(Example { image, region, instruction, answer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{decode_boxes, decode_labeled, iou};

    fn templates() -> &'static Templates {
        Templates::builtin()
    }

    fn obj(cat: Category, b: [f64; 4]) -> SceneObject {
        SceneObject { color: cat.color, shape: cat.shape, bbox: BoxPix::try_from(b).unwrap(), rgb: [200, 0, 0] }
    }

    fn cat(s: &str) -> Category {
        Category::parse(s).unwrap()
    }

    fn scene(objects: Vec<SceneObject>) -> SceneRecord {
        SceneRecord { id: "t".into(), canvas: 64, background: [30, 30, 30], objects, image: None }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        assert_eq!(gen_synthetic_scene(11, &cfg).unwrap(), gen_synthetic_scene(11, &cfg).unwrap());
        assert_ne!(gen_synthetic_scene(11, &cfg).unwrap(), gen_synthetic_scene(12, &cfg).unwrap());
    }

    #[test]
    fn boxes_inside_canvas_and_iou_capped() {
        let cfg = SceneConfig { max_objects: 8, ..SceneConfig::default() };
        for seed in 0..500 {
            let s = gen_synthetic_scene(seed, &cfg).unwrap();
            assert!(!s.objects.is_empty() && s.objects.len() <= 8);
            for (i, o) in s.objects.iter().enumerate() {
                let [x1, y1, x2, y2] = o.bbox.to_array();
                assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 64.0 && y2 <= 64.0 && o.bbox.area() > 0.0);
                for p in &s.objects[..i] {
                    let a = p.bbox.to_array().map(|v| v / 64.0);
                    assert!(iou_raw(a, o.bbox.to_array().map(|v| v / 64.0)) <= 0.3 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn category_histogram_is_uniform() {
        let cfg = SceneConfig::default();
        let mut hist = [0usize; 9];
        for seed in 0..10_000 {
            for o in gen_synthetic_scene(seed, &cfg).unwrap().objects {
                hist[o.category().index()] += 1;
            }
        }
        let total: usize = hist.iter().sum();
        let expected = total as f64 / 9.0;
        for (i, &h) in hist.iter().enumerate() {
            let rel = (h as f64 - expected).abs() / expected;
            assert!(rel <= 0.05, "category {i}: {h} vs {expected:.0}");
        }
    }

    #[test]
    fn crowded_config_returns_fewer_objects() {
        let cfg = SceneConfig { canvas: 32, min_objects: 30, max_objects: 30, min_size: 16, max_size: 16, retries: 5, ..SceneConfig::default() };
        let s = gen_synthetic_scene(3, &cfg).unwrap();
        assert!(!s.objects.is_empty() && s.objects.len() < 30);
    }

    #[test]
    fn rendering_covers_the_box() {
        for (shape, lo, hi) in [(Shape::Square, 1.0, 1.0), (Shape::Circle, 0.7, 0.85), (Shape::Triangle, 0.4, 0.6)] {
            let o = SceneObject { color: Color::Blue, shape, bbox: BoxPix::new(10.0, 12.0, 30.0, 32.0).unwrap(), rgb: [1, 2, 250] };
            let img = render_scene(64, [0, 0, 0], &[o]);
            let mut n = 0;
            let (mut minx, mut maxx, mut miny, mut maxy) = (64, 0, 64, 0);
            for (x, y, p) in img.enumerate_pixels() {
                if p.0 == [1, 2, 250] {
                    n += 1;
                    minx = minx.min(x);
                    maxx = maxx.max(x);
                    miny = miny.min(y);
                    maxy = maxy.max(y);
                }
            }
            let frac = n as f64 / 400.0;
            assert!(frac >= lo && frac <= hi, "{shape:?} fill {frac}");
            assert_eq!((minx, miny, maxx, maxy), (10, 12, 29, 31), "{shape:?}");
        }
    }

    #[test]
    fn caption_lists_counts() {
        let s = scene(vec![
            obj(cat("blue square"), [0., 0., 10., 10.]),
            obj(cat("red circle"), [20., 0., 30., 10.]),
            obj(cat("red circle"), [40., 0., 50., 10.]),
        ]);
        assert_eq!(caption_text(&s), "an image with two red circles and one blue square");
        assert_eq!(caption_text(&scene(vec![])), "an empty image");
    }

    #[test]
    fn detection_answer_round_trips() {
        let s = scene(vec![
            obj(cat("red circle"), [30., 20., 45., 35.]),
            obj(cat("red circle"), [2., 3., 14., 15.]),
            obj(cat("green triangle"), [40., 44., 60., 62.]),
        ]);
        let r = to_instruction(&s, Task::Detection, templates(), Phrasing::Canonical, &mut rng()).unwrap().unwrap();
        let (lab, warn) = decode_labeled(&r.answer);
        assert!(warn.is_empty());
        assert_eq!(lab.len(), 3);
        assert_eq!(lab.iter().filter(|l| l.label.as_deref() == Some("red circle")).count(), 2);
        for (l, gt) in lab.iter().zip(r.gt_boxes().unwrap()) {
            let g = normalize(&gt, 64.0, 64.0).unwrap();
            assert!(iou(&l.bbox, &g) >= 0.99);
        }
        assert_eq!(r.gt.categories, vec!["red circle", "red circle", "green triangle"]);
    }

    #[test]
    fn nonexist_answers_none() {
        let s = scene(vec![obj(cat("red circle"), [0., 0., 10., 10.])]);
        let r = to_instruction(&s, Task::NonexistJudge, templates(), Phrasing::Canonical, &mut rng()).unwrap().unwrap();
        assert_eq!(r.answer, "None");
        let named = r.instruction.trim_start_matches("locate the ");
        assert_eq!(s.count(cat(named)), 0);
        assert!(r.gt.boxes.is_empty());
    }

    #[test]
    fn nonexist_skips_full_scene() {
        let objs = Category::all()
            .into_iter()
            .enumerate()
            .map(|(i, c)| obj(c, [(i % 3) as f64 * 20., (i / 3) as f64 * 20., (i % 3) as f64 * 20. + 10., (i / 3) as f64 * 20. + 10.]))
            .collect();
        assert!(to_instruction(&scene(objs), Task::NonexistJudge, templates(), Phrasing::Canonical, &mut rng()).unwrap().is_none());
    }

    #[test]
    fn rec_needs_unique_referent() {
        let s = scene(vec![
            obj(cat("red circle"), [0., 0., 10., 10.]),
            obj(cat("red circle"), [20., 0., 30., 10.]),
        ]);
        assert!(to_instruction(&s, Task::Rec, templates(), Phrasing::Canonical, &mut rng()).unwrap().is_none());
        let s2 = scene(vec![obj(cat("blue square"), [8., 16., 24., 40.])]);
        let r = to_instruction(&s2, Task::Rec, templates(), Phrasing::Canonical, &mut rng()).unwrap().unwrap();
        assert_eq!(r.instruction, "locate the blue square");
        assert_eq!(r.answer, "[0.125,0.250,0.375,0.625]");
    }

    #[test]
    fn counting_oracle() {
        let mut objs: Vec<SceneObject> =
            (0..5).map(|i| obj(cat("green square"), [i as f64 * 12., 2., i as f64 * 12. + 10., 12.])).collect();
        objs.push(obj(cat("red triangle"), [5., 40., 20., 55.]));
        let s = scene(objs);
        let mut r = rng();
        let mut seen = 0;
        for _ in 0..20 {
            let rec = to_instruction(&s, Task::Counting, templates(), Phrasing::Canonical, &mut r).unwrap().unwrap();
            assert_eq!(rec.instruction.matches(PLACEHOLDER_TEXT).count(), 1);
            let exemplar = BoxPix::try_from(rec.region_ref.unwrap()).unwrap();
            let ex_cat = s.objects.iter().find(|o| o.bbox == exemplar).unwrap().category();
            if ex_cat != cat("green square") {
                continue;
            }
            seen += 1;
            assert!(rec.answer.starts_with("5 "));
            let d = decode_boxes(&rec.answer);
            assert_eq!(d.boxes.len(), 5);
            let gts: Vec<_> = s.instances(cat("green square")).iter().map(|o| normalize(&o.bbox, 64., 64.).unwrap()).collect();
            for (p, g) in d.boxes.iter().zip(&gts) {
                assert!(iou(p, g) >= 0.99);
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn reg_names_the_category() {
        let s = scene(vec![obj(cat("green triangle"), [0., 0., 16., 16.])]);
        let r = to_instruction(&s, Task::Reg, templates(), Phrasing::Canonical, &mut rng()).unwrap().unwrap();
        assert_eq!(r.answer, "green triangle");
        assert_eq!(r.instruction, "describe the object at [0.000,0.000,0.250,0.250]");
    }

    #[test]
    fn every_task_has_three_phrasings() {
        for t in Task::ALL {
            assert!(templates().texts(t).len() >= 3, "{t}");
        }
    }

    #[test]
    fn stage_contracts() {
        let src = SceneSource::Synthetic(SceneConfig::default());
        let s1 = build_stage_dataset(1, &src, 40, 5, templates()).unwrap();
        assert_eq!(s1.len(), 40);
        assert!(s1.iter().all(|r| r.task == Task::Caption && r.stage == 1 && decode_boxes(&r.answer).boxes.is_empty()));

        let s2 = build_stage_dataset(2, &src, 200, 5, templates()).unwrap();
        assert_eq!(s2.len(), 200);
        for r in &s2 {
            assert_eq!(r.instruction.replace("{", "").len(), r.instruction.len());
            assert_eq!(r.stage, 2);
            assert_ne!(r.task, Task::Caption);
            if r.task != Task::NonexistJudge && r.task.emits_boxes() {
                let d = decode_boxes(&r.answer);
                assert_eq!(d.boxes.len(), r.gt.boxes.len(), "{}", r.answer);
                for (p, g) in d.boxes.iter().zip(r.gt_boxes().unwrap()) {
                    assert!(iou(p, &normalize(&g, 64., 64.).unwrap()) >= 0.99, "{} {:?} {:?}", r.answer, p, g);
                }
            }
        }

        let s3 = build_stage_dataset(3, &src, 600, 5, templates()).unwrap();
        for t in [Task::Detection, Task::Rec, Task::Grounding, Task::Counting, Task::Reg] {
            let patterns: Vec<regex::Regex> = templates()
                .texts(t)
                .iter()
                .map(|x| {
                    let esc = regex::escape(x).replace(r"\{category\}", ".+").replace(r"\{coords\}", ".+");
                    regex::Regex::new(&format!("^{esc}$")).unwrap()
                })
                .collect();
            let mut used = std::collections::BTreeSet::new();
            for r in s3.iter().filter(|r| r.task == t) {
                let k = patterns.iter().position(|p| p.is_match(&r.instruction)).expect("instruction from a template");
                used.insert(k);
            }
            assert!(used.len() >= 3, "{t}: {used:?}");
        }
    }

    #[test]
    fn dataset_is_reproducible() {
        let src = SceneSource::Synthetic(SceneConfig::default());
        let a = build_stage_dataset(2, &src, 50, 9, templates()).unwrap();
        let b = build_stage_dataset(2, &src, 50, 9, templates()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn empty_source_errors() {
        let r = build_stage_dataset(2, &SceneSource::Scenes(vec![]), 5, 0, templates());
        assert!(matches!(r, Err(Error::EmptyInput(_))));
        assert!(matches!(build_stage_dataset(4, &SceneSource::Synthetic(SceneConfig::default()), 5, 0, templates()), Err(Error::UnknownStage(4))));
    }

    #[test]
    fn jsonl_layout_and_round_trip() {
        let src = SceneSource::Synthetic(SceneConfig::default());
        let recs = build_stage_dataset(2, &src, 20, 1, templates()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_jsonl(&p, &recs).unwrap();
        let back: Vec<InstructionRecord> = read_jsonl(&p).unwrap();
        assert_eq!(back, recs);
        let line = std::fs::read_to_string(&p).unwrap().lines().next().unwrap().to_string();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        for k in ["id", "stage", "task", "image", "instruction", "answer", "region_ref", "gt"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert!(v["image"].get("base64").is_some());
        assert!(v["gt"].get("categories").is_some() && v["gt"].get("boxes").is_some());
    }

    #[test]
    fn vocab_covers_generated_text() {
        let v = default_vocab();
        let src = SceneSource::Synthetic(SceneConfig { max_objects: 8, ..SceneConfig::default() });
        for stage in 1..=3 {
            for r in build_stage_dataset(stage, &src, 150, 2, templates()).unwrap() {
                for text in [&r.instruction, &r.answer] {
                    assert!(!tokenize(text, &v).ids.contains(&crate::textcodec::UNK), "{text}");
                }
            }
        }
    }

    #[test]
    fn shifted_records_stay_consistent() {
        let src = SceneSource::Synthetic(SceneConfig::default());
        let strip = |t: &str| t.split('[').map(|p| p.split_once(']').map_or(p, |(_, b)| b)).collect::<String>();
        let mut r = rng();
        let mut moved_any = false;
        for rec in build_stage_dataset(2, &src, 200, 3, templates()).unwrap() {
            let img = rec.image.load(None).unwrap();
            let (out, shifted) = shift_record(&rec, &img, &mut r).unwrap();
            assert_eq!(strip(&out.answer), strip(&rec.answer));
            assert_eq!(strip(&out.instruction), strip(&rec.instruction));
            let bg = background_color(&img);
            let painted = |im: &RgbImage| im.pixels().filter(|p| **p != bg).count();
            assert_eq!(painted(&shifted), painted(&img), "{}", rec.id);
            assert_eq!(out.gt.boxes.len(), rec.gt.boxes.len());
            let d = (out.gt.boxes.first().map_or(0.0, |b| b[0]), rec.gt.boxes.first().map_or(0.0, |b| b[0]));
            moved_any |= d.0 != d.1;
            for (a, b) in out.gt.boxes.iter().zip(&rec.gt.boxes) {
                let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
                assert_eq!(*a, [b[0] + dx, b[1] + dy, b[2] + dx, b[3] + dy]);
                assert!(a[0] >= 0.0 && a[1] >= 0.0 && a[2] <= 64.0 && a[3] <= 64.0);
                let c = |b: &[f64; 4]| (((b[0] + b[2]) / 2.0) as u32, ((b[1] + b[3]) / 2.0) as u32);
                let (x0, y0) = c(b);
                let (x1, y1) = c(a);
                assert_eq!(shifted.get_pixel(x1, y1), img.get_pixel(x0, y0));
                let t = box_text(&BoxPix::try_from(*a).unwrap(), 64).unwrap();
                assert!(out.answer.contains(&t) || out.instruction.contains(&t) || !rec.task.emits_boxes(), "{} {}", out.answer, t);
            }
            if let (Some(a), Some(b)) = (out.region_ref, rec.region_ref) {
                assert!(out.gt.boxes.iter().zip(&rec.gt.boxes).any(|(g, h)| *h == b && *g == a));
            }
        }
        assert!(moved_any);
    }

    #[test]
    fn example_conversion() {
        let s = scene(vec![
            obj(cat("red circle"), [0., 0., 16., 16.]),
            obj(cat("red circle"), [32., 32., 48., 48.]),
        ]);
        let mut r = rng();
        let rec = loop {
            let rec = to_instruction(&s, Task::Counting, templates(), Phrasing::Canonical, &mut r).unwrap().unwrap();
            break rec;
        };
        let v = default_vocab();
        let ex: Example<f32> = to_example(&rec, &v, 64, 8, None).unwrap();
        assert_eq!(ex.image.shape(), &[64, 64, 3]);
        assert_eq!(ex.region.as_ref().unwrap().shape(), &[8, 8, 3]);
        assert!(ex.image.data().iter().all(|&p| (-1.0..=1.0).contains(&p)));
        assert_eq!(*ex.answer.last().unwrap(), EOS);
        assert_eq!(ex.instruction.placeholder_count(), 1);
        let ex32: Example<f32> = to_example(&rec, &v, 32, 8, None).unwrap();
        assert_eq!(ex32.image.shape(), &[32, 32, 3]);
    }
}
