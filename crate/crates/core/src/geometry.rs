//! Axis-aligned boxes and points on the unit square.
//!
//! Coordinates are normalized at ingestion so every measure here lies in
//! `[0, 1]`. Normalized L1 is the mean (not the sum) of per-coordinate
//! absolute differences.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("coordinate {value} is outside the unit interval")]
    OutOfRange { value: f64 },
    #[error("box corners are inverted: [{x1}, {y1}, {x2}, {y2}]")]
    Inverted { x1: f64, y1: f64, x2: f64, y2: f64 },
}

fn check_unit(v: f64) -> Result<(), GeometryError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(GeometryError::OutOfRange { value: v })
    }
}

/// A box `[x1, y1, x2, y2]` with `0 <= x1 <= x2 <= 1` and `0 <= y1 <= y2 <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoxN {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoxN {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        for v in [x1, y1, x2, y2] {
            check_unit(v)?;
        }
        if x1 > x2 || y1 > y2 {
            return Err(GeometryError::Inverted { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Box of the given width and height centered at `(cx, cy)`, clamped to the unit square.
    pub fn centered_clamped(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        let clamp = |v: f64| v.clamp(0.0, 1.0);
        let (x1, x2) = (clamp(cx - w / 2.0), clamp(cx + w / 2.0));
        let (y1, y2) = (clamp(cy - h / 2.0), clamp(cy + h / 2.0));
        Self {
            x1: x1.min(x2),
            y1: y1.min(y2),
            x2,
            y2,
        }
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

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
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

    pub fn center(&self) -> PointN {
        PointN {
            x: (self.x1 + self.x2) / 2.0,
            y: (self.y1 + self.y2) / 2.0,
        }
    }

    pub fn contains(&self, p: PointN) -> bool {
        p.x >= self.x1 && p.x <= self.x2 && p.y >= self.y1 && p.y <= self.y2
    }
}

impl TryFrom<[f64; 4]> for BoxN {
    type Error = GeometryError;
    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        BoxN::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BoxN> for [f64; 4] {
    fn from(b: BoxN) -> Self {
        b.coords()
    }
}

/// A point `(x, y)` on the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct PointN {
    x: f64,
    y: f64,
}

impl PointN {
    pub fn new(x: f64, y: f64) -> Result<Self, GeometryError> {
        check_unit(x)?;
        check_unit(y)?;
        Ok(Self { x, y })
    }

    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn coords(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

impl TryFrom<[f64; 2]> for PointN {
    type Error = GeometryError;
    fn try_from(c: [f64; 2]) -> Result<Self, Self::Error> {
        PointN::new(c[0], c[1])
    }
}

impl From<PointN> for [f64; 2] {
    fn from(p: PointN) -> Self {
        p.coords()
    }
}

/// Intersection over union; 0 when the union has zero area.
pub fn iou(a: &BoxN, b: &BoxN) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Mean absolute coordinate difference between two boxes.
pub fn l1_box(a: &BoxN, b: &BoxN) -> f64 {
    let sum: f64 = a
        .coords()
        .iter()
        .zip(b.coords())
        .map(|(u, v)| (u - v).abs())
        .sum();
    sum / 4.0
}

/// Mean absolute coordinate difference between two points.
pub fn l1_point(a: &PointN, b: &PointN) -> f64 {
    ((a.x - b.x).abs() + (a.y - b.y).abs()) / 2.0
}
