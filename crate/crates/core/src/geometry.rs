//! Axis-aligned boxes and the plain-text coordinate codec.
//!
//! Boxes travel through the model as ordinary text such as
//! `[0.250,0.250,0.750,0.750]` (normalized top-left and bottom-right corners).
//! There are no special location tokens; [`encode_box`] and [`decode_boxes`]
//! are the only bridge between box values and token text.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of fractional digits in serialized coordinates.
pub const DEFAULT_PRECISION: usize = 3;

/// Box in pixel coordinates, origin at the top-left corner of the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BoxPix {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxPix {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let all_finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !all_finite || x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox(format!("[{x1},{y1},{x2},{y2}]")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl From<BoxPix> for [f64; 4] {
    fn from(b: BoxPix) -> Self {
        b.to_array()
    }
}

impl TryFrom<[f64; 4]> for BoxPix {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoxPix::new(v[0], v[1], v[2], v[3])
    }
}

/// Box with coordinates expressed as fractions of the image width and height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BoxNorm {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoxNorm {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let in_unit = [x1, y1, x2, y2].iter().all(|v| (0.0..=1.0).contains(v));
        if !in_unit || x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox(format!("[{x1},{y1},{x2},{y2}]")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// True when `other` lies inside (or on the border of) `self`.
    pub fn contains(&self, other: &BoxNorm) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }
}

impl From<BoxNorm> for [f64; 4] {
    fn from(b: BoxNorm) -> Self {
        b.to_array()
    }
}

impl TryFrom<[f64; 4]> for BoxNorm {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoxNorm::new(v[0], v[1], v[2], v[3])
    }
}

impl fmt::Display for BoxNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&encode_box(self, DEFAULT_PRECISION).0)
    }
}

/// Serialized box text, e.g. `[0.100,0.200,0.300,0.400]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CoordText(pub String);

impl CoordText {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CoordText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Intersection over union.
pub fn iou(a: &BoxNorm, b: &BoxNorm) -> f64 {
    iou_raw(a.to_array(), b.to_array())
}

/// IoU on raw `[x1,y1,x2,y2]` arrays in any common frame.
pub fn iou_raw(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn normalize(b: &BoxPix, width: f64, height: f64) -> Result<BoxNorm> {
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::Config(format!("image size {width}x{height} must be positive")));
    }
    if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > width || b.y2 > height {
        return Err(Error::OutOfFrame(format!("{:?}", b.to_array()), width, height));
    }
    BoxNorm::new(b.x1 / width, b.y1 / height, b.x2 / width, b.y2 / height)
}

pub fn denormalize(b: &BoxNorm, width: f64, height: f64) -> BoxPix {
    BoxPix {
        x1: b.x1 * width,
        y1: b.y1 * height,
        x2: b.x2 * width,
        y2: b.y2 * height,
    }
}

/// Fixed-point rendering with half-up rounding and exactly `precision`
/// fractional digits. Inputs are non-negative.
pub fn format_coord(v: f64, precision: usize) -> String {
    let scale = 10u64.pow(precision as u32);
    // The epsilon keeps values such as 0.0005 (stored as 0.000499999...) rounding up.
    let n = (v * scale as f64 + 0.5 + 1e-9).floor() as u64;
    if precision == 0 {
        return n.to_string();
    }
    format!("{}.{:0width$}", n / scale, n % scale, width = precision)
}

pub fn encode_box(b: &BoxNorm, precision: usize) -> CoordText {
    let parts: Vec<String> = b.to_array().iter().map(|&v| format_coord(v, precision)).collect();
    CoordText(format!("[{}]", parts.join(",")))
}

/// Result of scanning free-form text for boxes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecodedBoxes {
    pub boxes: Vec<BoxNorm>,
    /// One message per candidate that matched the grammar but was dropped.
    pub warnings: Vec<String>,
}

/// A box together with the text that precedes it (up to the previous box),
/// e.g. the `red circle` in `red circle-[...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBox {
    pub label: Option<String>,
    pub bbox: BoxNorm,
    /// Byte range of the bracketed coordinates in the source text.
    pub span: (usize, usize),
}

fn box_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let num = r"\s*(\d+(?:\.\d+)?)\s*";
        Regex::new(&format!(r"\[{num},{num},{num},{num}\]")).expect("static regex")
    })
}

/// Extracts every bracketed coordinate quadruple, in order of appearance,
/// keeping the label text that precedes each one.
pub fn decode_labeled(text: &str) -> (Vec<LabeledBox>, Vec<String>) {
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    let mut prev_end = 0;
    for caps in box_regex().captures_iter(text) {
        let whole = caps.get(0).expect("group 0");
        let label_text = text[prev_end..whole.start()]
            .trim()
            .trim_end_matches('-')
            .trim();
        prev_end = whole.end();
        let mut c = [0.0f64; 4];
        let mut parse_ok = true;
        for (i, slot) in c.iter_mut().enumerate() {
            match caps[i + 1].parse::<f64>() {
                Ok(v) if v.is_finite() => *slot = v.clamp(0.0, 1.0),
                _ => parse_ok = false,
            }
        }
        if !parse_ok {
            warnings.push(format!("unparseable coordinates in {:?}", whole.as_str()));
            continue;
        }
        match BoxNorm::new(c[0], c[1], c[2], c[3]) {
            Ok(bbox) => out.push(LabeledBox {
                label: (!label_text.is_empty()).then(|| label_text.to_string()),
                bbox,
                span: (whole.start(), whole.end()),
            }),
            Err(_) => warnings.push(format!("dropped degenerate box {:?}", whole.as_str())),
        }
    }
    (out, warnings)
}

pub fn decode_boxes(text: &str) -> DecodedBoxes {
    let (labeled, warnings) = decode_labeled(text);
    for w in &warnings {
        log::debug!("{w}");
    }
    DecodedBoxes {
        boxes: labeled.into_iter().map(|l| l.bbox).collect(),
        warnings,
    }
}

/// Smallest box enclosing every input box.
pub fn merge_boxes(bs: &[BoxNorm]) -> Result<BoxNorm> {
    let first = bs.first().ok_or(Error::EmptyInput("merge_boxes"))?;
    let merged = bs.iter().skip(1).fold(first.to_array(), |acc, b| {
        [acc[0].min(b.x1), acc[1].min(b.y1), acc[2].max(b.x2), acc[3].max(b.y2)]
    });
    BoxNorm::try_from(merged)
}
