//! Axis-aligned boxes. Center + size internally; files use the top-left
//! corner convention `x,y,w,h`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, width: f64, height: f64) -> Self {
        Self { cx, cy, width, height }
    }

    pub fn from_corner(x: f64, y: f64, width: f64, height: f64) -> Self {
        Self::new(x + width / 2.0, y + height / 2.0, width, height)
    }

    /// `(x, y, w, h)` with `(x, y)` the top-left corner.
    pub fn corner(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.width / 2.0,
            self.cy - self.height / 2.0,
            self.width,
            self.height,
        )
    }

    pub fn is_valid(&self) -> bool {
        self.width > 0.0 && self.height > 0.0 && self.cx.is_finite() && self.cy.is_finite()
    }

    pub fn ensure_valid(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::TrackingFailure(format!("degenerate box {self:?}")))
        }
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    /// Intersection over union; 0 for disjoint boxes.
    pub fn iou(&self, other: &Self) -> f64 {
        let (ax, ay, aw, ah) = self.corner();
        let (bx, by, bw, bh) = other.corner();
        let iw = ((ax + aw).min(bx + bw) - ax.max(bx)).max(0.0);
        let ih = ((ay + ah).min(by + bh) - ay.max(by)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }

    pub fn center_distance(&self, other: &Self) -> f64 {
        (self.cx - other.cx).hypot(self.cy - other.cy)
    }

    /// Clip the center into the frame and floor each side at `min_side`.
    pub fn clipped(&self, frame_w: f64, frame_h: f64, min_side: f64) -> Self {
        Self {
            cx: self.cx.clamp(0.0, frame_w),
            cy: self.cy.clamp(0.0, frame_h),
            width: self.width.clamp(min_side, frame_w.max(min_side)),
            height: self.height.clamp(min_side, frame_h.max(min_side)),
        }
    }

    /// Format as an `x,y,w,h` corner line.
    pub fn to_line(&self) -> String {
        let (x, y, w, h) = self.corner();
        format!("{x},{y},{w},{h}")
    }

    /// Parse an `x,y,w,h` corner line; commas, tabs or spaces separate fields.
    pub fn parse_line(line: &str) -> Result<Self> {
        let fields: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Data(format!("bad box line `{line}`: {e}")))?;
        match fields.as_slice() {
            &[x, y, w, h] => Ok(Self::from_corner(x, y, w, h)),
            _ => Err(Error::Data(format!("expected 4 fields in `{line}`"))),
        }
    }
}

pub fn read_boxes(path: &std::path::Path) -> Result<Vec<BoundingBox>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(BoundingBox::parse_line)
        .collect()
}

pub fn write_boxes(path: &std::path::Path, boxes: &[BoundingBox]) -> Result<()> {
    let mut out = String::new();
    for b in boxes {
        out.push_str(&b.to_line());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_basics() {
        let a = BoundingBox::from_corner(10.0, 10.0, 20.0, 10.0);
        assert_eq!(a.iou(&a), 1.0);
        let far = BoundingBox::from_corner(100.0, 100.0, 5.0, 5.0);
        assert_eq!(a.iou(&far), 0.0);
        let half = BoundingBox::from_corner(20.0, 10.0, 20.0, 10.0);
        assert!((a.iou(&half) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn corner_line_round_trip() {
        let b = BoundingBox::from_corner(3.5, -2.0, 10.25, 7.0);
        let back = BoundingBox::parse_line(&b.to_line()).unwrap();
        assert_eq!(b, back);
        assert!(BoundingBox::parse_line("1,2,3").is_err());
        assert_eq!(
            BoundingBox::parse_line("1\t2\t3\t4").unwrap(),
            BoundingBox::from_corner(1.0, 2.0, 3.0, 4.0)
        );
    }

    #[test]
    fn clipping_floors_sides() {
        let b = BoundingBox::new(-5.0, 50.0, 0.5, 300.0).clipped(100.0, 80.0, 2.0);
        assert_eq!(b, BoundingBox::new(0.0, 50.0, 2.0, 80.0));
    }
}
