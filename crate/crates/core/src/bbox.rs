//! Axis-aligned boxes in `(x, y, w, h)` top-left form.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox<T = f64> {
    pub x: T,
    pub y: T,
    pub w: T,
    pub h: T,
}

impl<T: Scalar> BoundingBox<T> {
    pub fn new(x: T, y: T, w: T, h: T) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: T, cy: T, w: T, h: T) -> Self {
        let half = T::lit(0.5);
        Self { x: cx - half * w, y: cy - half * h, w, h }
    }

    pub fn center(&self) -> (T, T) {
        let half = T::lit(0.5);
        (self.x + half * self.w, self.y + half * self.h)
    }

    pub fn right(&self) -> T {
        self.x + self.w
    }

    pub fn bottom(&self) -> T {
        self.y + self.h
    }

    pub fn area(&self) -> T {
        self.w.max(T::zero()) * self.h.max(T::zero())
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    pub fn has_positive_area(&self) -> bool {
        self.is_finite() && self.w > T::zero() && self.h > T::zero()
    }

    /// `[cx, cy, w, h]`
    pub fn to_cxcywh(&self) -> [T; 4] {
        let (cx, cy) = self.center();
        [cx, cy, self.w, self.h]
    }

    pub fn intersection(&self, other: &Self) -> T {
        let iw = (self.right().min(other.right()) - self.x.max(other.x)).max(T::zero());
        let ih = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(T::zero());
        iw * ih
    }

    /// Smallest box containing both.
    pub fn enclosing(&self, other: &Self) -> Self {
        let x = self.x.min(other.x);
        let y = self.y.min(other.y);
        Self { x, y, w: self.right().max(other.right()) - x, h: self.bottom().max(other.bottom()) - y }
    }

    /// IoU; zero when the union is empty.
    pub fn iou(&self, other: &Self) -> T {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= T::zero() {
            T::zero()
        } else {
            inter / union
        }
    }

    /// Generalized IoU in `(−1, 1]`; zero when both boxes are empty.
    pub fn giou(&self, other: &Self) -> T {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        let enclose = self.enclosing(other).area();
        if union <= T::zero() || enclose <= T::zero() {
            return T::zero();
        }
        inter / union - (enclose - union) / enclose
    }

    /// Clips to `[0, width] × [0, height]`, keeping at least `min_side` per side.
    pub fn clip_to(&self, width: T, height: T, min_side: T) -> Self {
        let x0 = self.x.max(T::zero()).min(width - min_side);
        let y0 = self.y.max(T::zero()).min(height - min_side);
        let x1 = self.right().min(width).max(x0 + min_side);
        let y1 = self.bottom().min(height).max(y0 + min_side);
        Self { x: x0, y: y0, w: x1 - x0, h: y1 - y0 }
    }

    pub fn cast<U: Scalar>(&self) -> BoundingBox<U> {
        let c = |v: T| U::from(v).expect("box cast");
        BoundingBox { x: c(self.x), y: c(self.y), w: c(self.w), h: c(self.h) }
    }
}

/// `1 − GIoU`; two empty boxes give 1.
pub fn giou_loss<T: Scalar>(pred: &BoundingBox<T>, gt: &BoundingBox<T>) -> T {
    T::one() - pred.giou(gt)
}
