//! Box geometry in the two forms the pipeline uses: corner form in pixels
//! (annotation files) and normalized center form (regression targets).

use serde::{Deserialize, Serialize};

/// Axis-aligned box, corner form, pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl CornerBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        CornerBox { x_min, y_min, x_max, y_max }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn to_center(&self, image_w: f64, image_h: f64) -> CenterBox {
        CenterBox {
            cx: (self.x_min + self.x_max) / (2.0 * image_w),
            cy: (self.y_min + self.y_max) / (2.0 * image_h),
            w: self.width() / image_w,
            h: self.height() / image_h,
        }
    }
}

/// Normalized (cx, cy, w, h), each coordinate in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl CenterBox {
    pub fn to_corner(&self, image_w: f64, image_h: f64) -> CornerBox {
        CornerBox {
            x_min: (self.cx - self.w / 2.0) * image_w,
            y_min: (self.cy - self.h / 2.0) * image_h,
            x_max: (self.cx + self.w / 2.0) * image_w,
            y_max: (self.cy + self.h / 2.0) * image_h,
        }
    }
}

/// Intersection-over-union of two corner-form boxes; 0 when disjoint.
pub fn iou(a: &CornerBox, b: &CornerBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: IoU minus the normalized slack of the enclosing box.
pub fn giou(a: &CornerBox, b: &CornerBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let ew = a.x_max.max(b.x_max) - a.x_min.min(b.x_min);
    let eh = a.y_max.max(b.y_max) - a.y_min.min(b.y_min);
    let enclose = ew * eh;
    inter / union - (enclose - union) / enclose
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_worked_values() {
        let a = CornerBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        let b = CornerBox::new(1.0, 1.0, 3.0, 3.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
        let c = CornerBox::new(5.0, 5.0, 6.0, 6.0);
        assert_eq!(iou(&a, &c), 0.0);
    }

    #[test]
    fn giou_disjoint_unit_boxes() {
        // IoU 0, union 2, enclosing 3 -> GIoU = -1/3
        let a = CornerBox::new(0.0, 0.0, 1.0, 1.0);
        let b = CornerBox::new(2.0, 0.0, 3.0, 1.0);
        assert!((giou(&a, &b) + 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(giou(&a, &a), 1.0);
    }

    #[test]
    fn center_corner_roundtrip_exact_for_pow2_sizes() {
        let b = CornerBox::new(3.0, 9.0, 17.0, 30.0);
        let c = b.to_center(64.0, 64.0);
        let back = c.to_corner(64.0, 64.0);
        assert_eq!(b, back);
    }
}
