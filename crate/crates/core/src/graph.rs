//! Boxes and ground-truth scene graphs.

use serde::{Deserialize, Serialize};

/// Smallest width/height used for box geometry.
pub const MIN_EXTENT: f64 = 1e-7;

/// Axis-aligned box in normalized `(cx, cy, w, h)` form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `[x1, y1, x2, y2]` with extents clamped to [`MIN_EXTENT`].
    pub fn corners(&self) -> [f64; 4] {
        let (hw, hh) = (self.w.max(MIN_EXTENT) / 2.0, self.h.max(MIN_EXTENT) / 2.0);
        [self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh]
    }

    pub fn area(&self) -> f64 {
        self.w.max(MIN_EXTENT) * self.h.max(MIN_EXTENT)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Smallest box enclosing both.
    pub fn hull(&self, other: &BBox) -> BBox {
        let [a1, b1, a2, b2] = self.corners();
        let [c1, d1, c2, d2] = other.corners();
        BBox::from_corners(a1.min(c1), b1.min(d1), a2.max(c2), b2.max(d2))
    }

    pub fn contains(&self, other: &BBox) -> bool {
        let [a1, b1, a2, b2] = self.corners();
        let [c1, d1, c2, d2] = other.corners();
        a1 <= c1 && b1 <= d1 && a2 >= c2 && b2 >= d2
    }

    fn intersection(&self, other: &BBox) -> f64 {
        let [a1, b1, a2, b2] = self.corners();
        let [c1, d1, c2, d2] = other.corners();
        (a2.min(c2) - a1.max(c1)).max(0.0) * (b2.min(d2) - b1.max(d1)).max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        inter / (self.area() + other.area() - inter)
    }

    pub fn giou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        let [a1, b1, a2, b2] = self.corners();
        let [c1, d1, c2, d2] = other.corners();
        let hull = (a2.max(c2) - a1.min(c1)) * (b2.max(d2) - b1.min(d1));
        inter / union - (hull - union) / hull
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub label: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: Entity,
    pub object: Entity,
    pub predicate: usize,
}

impl Triplet {
    /// The predicate is localized by the box enclosing both entities.
    pub fn predicate_box(&self) -> BBox {
        self.subject.bbox.hull(&self.object.bbox)
    }

    /// `(subject, predicate, object)` labels.
    pub fn label_triple(&self) -> (usize, usize, usize) {
        (self.subject.label, self.predicate, self.object.label)
    }

    pub fn entity(&self, task: usize) -> Entity {
        match task {
            0 => self.subject,
            1 => self.object,
            _ => Entity {
                label: self.predicate,
                bbox: self.predicate_box(),
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub triplets: Vec<Triplet>,
}

impl SceneGraph {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn touching_corner_boxes() {
        let a = BBox::from_corners(0.0, 0.0, 1.0, 1.0);
        let b = BBox::from_corners(1.0, 1.0, 2.0, 2.0);
        assert_eq!(a.iou(&b), 0.0);
        assert!((a.giou(&b) + 0.5).abs() < 1e-12);
        assert!((1.0 - a.giou(&b) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn nested_boxes() {
        let outer = BBox::new(0.5, 0.5, 0.8, 0.6);
        let inner = BBox::new(0.45, 0.5, 0.2, 0.3);
        assert!(outer.contains(&inner));
        let expect = inner.area() / outer.area();
        assert!((outer.giou(&inner) - expect).abs() < 1e-12);
        assert!((outer.iou(&inner) - expect).abs() < 1e-12);
        let h = outer.hull(&inner);
        for (a, b) in h.to_array().iter().zip(outer.to_array()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(outer.giou(&outer), 1.0);
    }
}
