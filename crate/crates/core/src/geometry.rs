//! Box algebra on normalized center-format boxes, plus both reward functions.

use serde::{Deserialize, Serialize};

/// Axis-aligned box in normalized center format.
///
/// `cx`/`w` are fractions of image width and `cy`/`h` fractions of image
/// height. Ground-truth boxes live in `[0,1]` with positive size; predicted
/// boxes are unconstrained and may be degenerate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// `(left, top, right, bottom)` edges.
    pub fn edges(&self) -> (f64, f64, f64, f64) {
        let hw = 0.5 * self.w;
        let hh = 0.5 * self.h;
        (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.w > 0.0 && self.h > 0.0)
    }

    /// True when the box satisfies the ground-truth invariant.
    pub fn is_valid_ground_truth(&self) -> bool {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        self.to_array().iter().all(|&v| in_unit(v)) && !self.is_degenerate()
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Intersection over union. Total: degenerate boxes and empty unions give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a.is_degenerate() || b.is_degenerate() || !a.is_finite() || !b.is_finite() {
        return 0.0;
    }
    let (al, at, ar, ab) = a.edges();
    let (bl, bt, br, bb) = b.edges();
    let iw = (ar.min(br) - al.max(bl)).max(0.0);
    let ih = (ab.min(bb) - at.max(bt)).max(0.0);
    let inter = iw * ih;
    // Areas from the same edges as the intersection so that iou(a, a) == 1 exactly.
    let area_a = (ar - al) * (ab - at);
    let area_b = (br - bl) * (bb - bt);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Distance between box centers in pixels.
pub fn center_error_px(a: &BBox, b: &BBox, img_w: f64, img_h: f64) -> f64 {
    let dx = (a.cx - b.cx) * img_w;
    let dy = (a.cy - b.cy) * img_h;
    dx.hypot(dy)
}

/// Coordinate-distance reward: `-mean(|l-g|) - max(|l-g|)` over the four
/// normalized coordinates. Always `<= 0`, zero only when `l == g`.
pub fn reward_early(l: &BBox, g: &BBox) -> f64 {
    let la = l.to_array();
    let ga = g.to_array();
    let mut sum = 0.0;
    let mut max = 0.0_f64;
    for k in 0..4 {
        let d = (la[k] - ga[k]).abs();
        sum += d;
        max = max.max(d);
    }
    -(sum / 4.0) - max
}

/// Overlap reward, identical to [`iou`].
pub fn reward_late(l: &BBox, g: &BBox) -> f64 {
    iou(l, g)
}
