//! Axis-aligned box geometry: IoU and generalized IoU.
//!
//! Boxes travel through the model as `(cx, cy, w, h)`; the overlap measures
//! work on corner form `(x1, y1, x2, y2)`.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// `(x1, y1, x2, y2)` with `x1 < x2`, `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corners<T> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

impl<T: Real> Corners<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_cxcywh(b: [T; 4]) -> Self {
        let half = T::lit(0.5);
        Self {
            x1: b[0] - half * b[2],
            y1: b[1] - half * b[3],
            x2: b[0] + half * b[2],
            y2: b[1] + half * b[3],
        }
    }

    pub fn to_cxcywh(self) -> [T; 4] {
        let half = T::lit(0.5);
        [
            half * (self.x1 + self.x2),
            half * (self.y1 + self.y2),
            self.x2 - self.x1,
            self.y2 - self.y1,
        ]
    }

    pub fn area(&self) -> T {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    fn validate(&self) -> Result<()> {
        if !(self.x2 > self.x1 && self.y2 > self.y1) {
            return Err(Error::Domain(format!(
                "box needs positive extent, got ({}, {}, {}, {})",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        Ok(())
    }
}

/// Pieces of the overlap computation, shared with the GIoU loss gradient.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Overlap<T> {
    pub inter_w: T,
    pub inter_h: T,
    pub inter: T,
    pub union: T,
    pub encl_w: T,
    pub encl_h: T,
    pub enclosing: T,
}

pub(crate) fn overlap<T: Real>(a: &Corners<T>, b: &Corners<T>) -> Overlap<T> {
    let inter_w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(T::zero());
    let inter_h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(T::zero());
    let inter = inter_w * inter_h;
    let union = a.area() + b.area() - inter;
    let encl_w = a.x2.max(b.x2) - a.x1.min(b.x1);
    let encl_h = a.y2.max(b.y2) - a.y1.min(b.y1);
    Overlap {
        inter_w,
        inter_h,
        inter,
        union,
        encl_w,
        encl_h,
        enclosing: encl_w * encl_h,
    }
}

pub fn iou_corners<T: Real>(a: &Corners<T>, b: &Corners<T>) -> T {
    let o = overlap(a, b);
    if o.union <= T::zero() {
        return T::zero();
    }
    o.inter / o.union
}

/// IoU of two `(cx, cy, w, h)` boxes.
pub fn iou<T: Real>(a: [T; 4], b: [T; 4]) -> T {
    iou_corners(&Corners::from_cxcywh(a), &Corners::from_cxcywh(b))
}

/// Generalized IoU: `IoU - (enclosing - union) / enclosing`, in `[-1, 1]`.
pub fn giou_corners<T: Real>(a: &Corners<T>, b: &Corners<T>) -> Result<T> {
    a.validate()?;
    b.validate()?;
    let o = overlap(a, b);
    Ok(o.inter / o.union - (o.enclosing - o.union) / o.enclosing)
}

pub fn giou<T: Real>(a: [T; 4], b: [T; 4]) -> Result<T> {
    giou_corners(&Corners::from_cxcywh(a), &Corners::from_cxcywh(b))
}
