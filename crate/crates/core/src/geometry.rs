//! Axis-aligned boxes: overlap, regression parameterization, suppression and
//! the expand-to-integer rounding applied to final detections.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Rectangle in pixel coordinates, stored as top-left corner plus size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    /// Like [`BBox::new`] but enforces positive size and finite coordinates.
    pub fn checked(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { x, y, w, h };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::invalid(format!("degenerate box {b:?}")))
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn cx(&self) -> f64 {
        self.x + self.w / 2.0
    }

    pub fn cy(&self) -> f64 {
        self.y + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Geometric-mean side length `sqrt(w * h)`.
    pub fn scale(&self) -> f64 {
        self.area().sqrt()
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }

    /// Intersection with `other`, or `None` when they do not overlap.
    pub fn clip_to(&self, other: &BBox) -> Option<BBox> {
        let x1 = self.x.max(other.x);
        let y1 = self.y.max(other.y);
        let x2 = self.right().min(other.right());
        let y2 = self.bottom().min(other.bottom());
        (x2 > x1 && y2 > y1).then(|| BBox::from_corners(x1, y1, x2, y2))
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x <= other.x && self.y <= other.y && self.right() >= other.right() && self.bottom() >= other.bottom()
    }

    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        px >= self.x && px < self.right() && py >= self.y && py < self.bottom()
    }

    /// Maps through `p -> (p - origin) * factor`.
    pub fn transform(&self, origin_x: f64, origin_y: f64, factor: f64) -> BBox {
        BBox::new(
            (self.x - origin_x) * factor,
            (self.y - origin_y) * factor,
            self.w * factor,
            self.h * factor,
        )
    }
}

/// Scored detection; the score is a face probability in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64) -> Self {
        Detection { bbox, score }
    }
}

/// Regression target of a box relative to an anchor.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxDelta {
            tx: a[0],
            ty: a[1],
            tw: a[2],
            th: a[3],
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Largest `|tw|`/`|th|` accepted by [`BoxCoder::decode`] before clamping.
pub const MAX_LOG_SCALE: f64 = 30.0;

/// Decoded box plus whether a log-size term had to be clamped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decoded {
    pub bbox: BBox,
    pub clamped: bool,
}

/// Centre-offset / log-size box parameterization.
///
/// With `variances` set, offsets are divided by `v[0]` and log sizes by `v[1]`
/// as in the SSD reference code; the default uses none.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BoxCoder {
    pub variances: Option<[f64; 2]>,
}

impl BoxCoder {
    pub const fn plain() -> Self {
        BoxCoder { variances: None }
    }

    pub const fn with_variances(center: f64, size: f64) -> Self {
        BoxCoder {
            variances: Some([center, size]),
        }
    }

    pub fn encode(&self, gt: &BBox, anchor: &BBox) -> BoxDelta {
        let [vc, vs] = self.variances.unwrap_or([1.0, 1.0]);
        BoxDelta {
            tx: (gt.cx() - anchor.cx()) / anchor.w / vc,
            ty: (gt.cy() - anchor.cy()) / anchor.h / vc,
            tw: (gt.w / anchor.w).ln() / vs,
            th: (gt.h / anchor.h).ln() / vs,
        }
    }

    pub fn decode(&self, d: &BoxDelta, anchor: &BBox) -> Decoded {
        let [vc, vs] = self.variances.unwrap_or([1.0, 1.0]);
        let mut clamped = false;
        let mut clamp = |v: f64| {
            if v.abs() > MAX_LOG_SCALE {
                clamped = true;
                v.signum() * MAX_LOG_SCALE
            } else {
                v
            }
        };
        let tw = clamp(d.tw * vs);
        let th = clamp(d.th * vs);
        let cx = anchor.cx() + d.tx * vc * anchor.w;
        let cy = anchor.cy() + d.ty * vc * anchor.h;
        Decoded {
            bbox: BBox::from_center(cx, cy, anchor.w * tw.exp(), anchor.h * th.exp()),
            clamped,
        }
    }
}

pub fn encode(gt: &BBox, anchor: &BBox) -> BoxDelta {
    BoxCoder::plain().encode(gt, anchor)
}

pub fn decode(delta: &BoxDelta, anchor: &BBox) -> Decoded {
    BoxCoder::plain().decode(delta, anchor)
}

/// Greedy non-maximum suppression.
///
/// A detection is dropped when its IoU with an already kept one is strictly
/// greater than `overlap`. Equal scores keep their input order.
pub fn nms(dets: &[Detection], overlap: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(Ordering::Equal)
    });
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= overlap) {
            kept.push(d);
        }
    }
    kept
}

/// Floors the top-left corner and ceils the width and height.
///
/// The corner never moves right or down and the size never shrinks; the far
/// edge can still end up to one pixel inside the original one.
pub fn round_detection(b: &BBox) -> BBox {
    BBox::new(b.x.floor(), b.y.floor(), b.w.ceil(), b.h.ceil())
}
