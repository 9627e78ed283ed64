//! Axis-aligned proposal boxes and directional extension.
//!
//! Boxes are constructed from `(x, y, w, h)` with `(x, y)` the left-top corner.
//! Internally the corners are stored, so extending one edge leaves the other
//! three bit-identical.

use std::fmt;
use std::str::FromStr;

use crate::error::{CpeError, Result};

/// Width and height of an image in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageDims {
    width: f64,
    height: f64,
}

impl ImageDims {
    pub fn new(width: f64, height: f64) -> Result<Self> {
        if !(width.is_finite() && height.is_finite() && width > 0.0 && height > 0.0) {
            return Err(CpeError::InvalidInput(format!(
                "image dims must be positive, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    /// True when `b` lies entirely inside the image.
    pub fn contains(&self, b: &BBox) -> bool {
        b.x0 >= 0.0 && b.y0 >= 0.0 && b.x1 <= self.width && b.y1 <= self.height
    }
}

impl FromStr for ImageDims {
    type Err = CpeError;

    /// Parses `WxH`, e.g. `640x480`.
    fn from_str(s: &str) -> Result<Self> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| CpeError::InvalidInput(format!("expected WxH, got {s:?}")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| CpeError::InvalidInput(format!("bad dimension {v:?}: {e}")))
        };
        ImageDims::new(parse(w)?, parse(h)?)
    }
}

/// An axis-aligned rectangle with strictly positive width and height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl BBox {
    /// Builds a box from its left-top corner and size.
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(CpeError::InvalidInput("non-finite box coordinate".into()));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(CpeError::InvalidInput(format!(
                "box width and height must be positive, got w={w} h={h}"
            )));
        }
        Self::from_corners(x, y, x + w, y + h)
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) {
            return Err(CpeError::InvalidInput("non-finite box coordinate".into()));
        }
        if x1 <= x0 || y1 <= y0 {
            return Err(CpeError::InvalidInput(format!(
                "degenerate box corners ({x0}, {y0}, {x1}, {y1})"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn x(&self) -> f64 {
        self.x0
    }

    pub fn y(&self) -> f64 {
        self.y0
    }

    pub fn w(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn h(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn right(&self) -> f64 {
        self.x1
    }

    pub fn bottom(&self) -> f64 {
        self.y1
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn area(&self) -> f64 {
        self.w() * self.h()
    }

    /// True when `other` lies inside `self` (edges may coincide).
    pub fn contains(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1);
        let y1 = self.y1.min(other.y1);
        (x1 > x0 && y1 > y0).then_some(BBox { x0, y0, x1, y1 })
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.x(), self.y(), self.w(), self.h())
    }
}

/// The four extension directions. The name gives the direction in which the
/// pooled feature is read; `R2L` grows the left edge, `L2R` the right edge,
/// `T2B` the bottom edge and `B2T` the top edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    R2L,
    L2R,
    T2B,
    B2T,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::R2L, Direction::L2R, Direction::T2B, Direction::B2T];

    pub fn name(self) -> &'static str {
        match self {
            Direction::R2L => "R2L",
            Direction::L2R => "L2R",
            Direction::T2B => "T2B",
            Direction::B2T => "B2T",
        }
    }

    /// Side of the box that moves: `L`, `R`, `B` or `T`.
    pub fn side(self) -> char {
        match self {
            Direction::R2L => 'L',
            Direction::L2R => 'R',
            Direction::T2B => 'B',
            Direction::B2T => 'T',
        }
    }

    pub fn is_horizontal(self) -> bool {
        matches!(self, Direction::R2L | Direction::L2R)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Direction {
    type Err = CpeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "R2L" | "L" => Ok(Direction::R2L),
            "L2R" | "R" => Ok(Direction::L2R),
            "T2B" | "B" => Ok(Direction::T2B),
            "B2T" | "T" => Ok(Direction::B2T),
            other => Err(CpeError::InvalidInput(format!("unknown direction {other:?}"))),
        }
    }
}

/// Extends `b` towards `dir` using the aspect-ratio scaled lengths
/// `w' = w²/(h·t)` and `h' = h²/(w·t)`, clamped at the image border.
pub fn extend_box(b: &BBox, dir: Direction, img: &ImageDims, t: f64) -> Result<BBox> {
    extend_box_with(b, dir, img, t, true)
}

/// Like [`extend_box`]; with `ratio_scaling` off the lengths are `w/t` and `h/t`.
pub fn extend_box_with(b: &BBox, dir: Direction, img: &ImageDims, t: f64, ratio_scaling: bool) -> Result<BBox> {
    if !(t.is_finite() && t > 1.0) {
        return Err(CpeError::InvalidParameter(format!(
            "extension coefficient t must be > 1, got {t}"
        )));
    }
    if !img.contains(b) {
        return Err(CpeError::InvalidInput(format!("box ({b}) lies outside the image")));
    }
    let (w, h) = (b.w(), b.h());
    // (w/h)·(w/t) rather than w²/(h·t): identical in exact arithmetic, and a
    // square box then extends by exactly w/t.
    let (dw, dh) = if ratio_scaling {
        ((w / h) * (w / t), (h / w) * (h / t))
    } else {
        (w / t, h / t)
    };
    let mut out = *b;
    match dir {
        Direction::R2L => out.x0 = (b.x0 - dw).max(0.0),
        Direction::L2R => out.x1 = (b.x1 + dw).min(img.width),
        Direction::B2T => out.y0 = (b.y0 - dh).max(0.0),
        Direction::T2B => out.y1 = (b.y1 + dh).min(img.height),
    }
    Ok(out)
}

/// The extra strip added by an extension (`ext` minus `b`), or `None` when
/// the extension was fully clamped at the border.
pub fn extension_strip(b: &BBox, ext: &BBox, dir: Direction) -> Option<BBox> {
    let strip = match dir {
        Direction::R2L => BBox { x1: b.x0, ..*ext },
        Direction::L2R => BBox { x0: b.x1, ..*ext },
        Direction::B2T => BBox { y1: b.y0, ..*ext },
        Direction::T2B => BBox { y0: b.y1, ..*ext },
    };
    (strip.x1 > strip.x0 && strip.y1 > strip.y0).then_some(strip)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let Some(inter) = a.intersection(b) else {
        return 0.0;
    };
    let i = inter.area();
    let u = a.area() + b.area() - i;
    if u <= 0.0 {
        0.0
    } else {
        (i / u).clamp(0.0, 1.0)
    }
}

/// Largest sub-box of `b` inside the image.
pub fn clip_box(b: &BBox, img: &ImageDims) -> Result<BBox> {
    let x0 = b.x0.max(0.0);
    let y0 = b.y0.max(0.0);
    let x1 = b.x1.min(img.width);
    let y1 = b.y1.min(img.height);
    if x1 <= x0 || y1 <= y0 {
        return Err(CpeError::EmptyIntersection);
    }
    Ok(BBox { x0, y0, x1, y1 })
}

pub fn area(b: &BBox) -> f64 {
    b.area()
}

/// One line of the whitespace separated box text format:
/// `x y w h [class_id] [score]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxRecord {
    pub bbox: BBox,
    pub class_id: Option<usize>,
    pub score: Option<f64>,
}

impl BoxRecord {
    pub fn new(bbox: BBox) -> Self {
        Self {
            bbox,
            class_id: None,
            score: None,
        }
    }
}

impl fmt::Display for BoxRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bbox)?;
        if let Some(c) = self.class_id {
            write!(f, " {c}")?;
            if let Some(s) = self.score {
                write!(f, " {s}")?;
            }
        }
        Ok(())
    }
}

/// Parses box records, one per line. Blank lines and `#` comments are skipped.
pub fn parse_boxes(text: &str) -> Result<Vec<BoxRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| CpeError::Parse { line: i + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(4..=6).contains(&fields.len()) {
            return Err(err(format!("expected 4 to 6 fields, got {}", fields.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
        let bbox = BBox::new(num(fields[0])?, num(fields[1])?, num(fields[2])?, num(fields[3])?)
            .map_err(|e| err(e.to_string()))?;
        let class_id = match fields.get(4) {
            Some(s) => Some(s.parse::<usize>().map_err(|e| err(format!("class id {s:?}: {e}")))?),
            None => None,
        };
        let score = fields.get(5).map(|s| num(s)).transpose()?;
        out.push(BoxRecord { bbox, class_id, score });
    }
    Ok(out)
}

pub fn format_boxes(records: &[BoxRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&r.to_string());
        s.push('\n');
    }
    s
}
