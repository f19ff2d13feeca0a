//! Axis-aligned boxes and the `x,y,w,h` text format.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxFrame {
    /// Pixels of the full frame.
    Image,
    /// Fractions of a square crop side.
    CropNormalized,
}

/// Center-size box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub frame: BoxFrame,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, frame: BoxFrame) -> Self {
        Self { cx, cy, w, h, frame }
    }

    /// Image-frame box from top-left corner form.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x + w / 2.0, y + h / 2.0, w, h, BoxFrame::Image)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h]
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn from_corners(c: [f64; 4], frame: BoxFrame) -> Self {
        Self::new((c[0] + c[2]) / 2.0, (c[1] + c[3]) / 2.0, c[2] - c[0], c[3] - c[1], frame)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn check(&self, op: &'static str) -> Result<()> {
        if !(self.w > 0.0 && self.h > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(CoreError::contract(op, format!("box needs positive finite dims, got {self:?}")));
        }
        Ok(())
    }

    pub fn contains_strictly(&self, x: f64, y: f64) -> bool {
        let [x1, y1, x2, y2] = self.corners();
        x > x1 && x < x2 && y > y1 && y < y2
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let [a1, b1, a2, b2] = self.corners();
        let [c1, d1, c2, d2] = other.corners();
        let iw = (a2.min(c2) - a1.max(c1)).max(0.0);
        let ih = (b2.min(d2) - b1.max(d1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        (self.cx - other.cx).hypot(self.cy - other.cy)
    }
}

pub fn parse_box_line(line: &str) -> Result<BBox> {
    let parts: Vec<&str> = line.trim().split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(CoreError::BoxFormat(format!("expected \"x,y,w,h\", got {line:?}")));
    }
    let mut v = [0.0; 4];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p
            .parse::<f64>()
            .map_err(|_| CoreError::BoxFormat(format!("not a number: {p:?} in {line:?}")))?;
        if !slot.is_finite() {
            return Err(CoreError::BoxFormat(format!("non-finite value in {line:?}")));
        }
    }
    let b = BBox::from_xywh(v[0], v[1], v[2], v[3]);
    if b.w <= 0.0 || b.h <= 0.0 {
        return Err(CoreError::BoxFormat(format!("width and height must be positive in {line:?}")));
    }
    Ok(b)
}

/// Shortest decimal that round-trips each coordinate.
pub fn format_box_line(b: &BBox) -> String {
    let [x, y, w, h] = b.to_xywh();
    format!("{x},{y},{w},{h}")
}

pub fn read_boxes(path: &Path) -> Result<Vec<BBox>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(parse_box_line).collect()
}

pub fn write_boxes(path: &Path, boxes: &[BBox]) -> Result<()> {
    let mut s = String::new();
    for b in boxes {
        let _ = writeln!(s, "{}", format_box_line(b));
    }
    std::fs::write(path, s)?;
    Ok(())
}
