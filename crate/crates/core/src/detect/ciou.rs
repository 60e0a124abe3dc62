//! Complete IoU, written once over a small numeric trait so the same code
//! yields values (`f64`) and exact derivatives ([`Dual4`]).

use std::f64::consts::PI;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::bbox::BBox;

pub const GUARD: f64 = 1e-9;

pub trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn val(self) -> f64;
    fn atan(self) -> Self;

    fn max(self, o: Self) -> Self {
        if self.val() >= o.val() {
            self
        } else {
            o
        }
    }

    fn min(self, o: Self) -> Self {
        if self.val() <= o.val() {
            self
        } else {
            o
        }
    }
}

impl Real for f64 {
    fn cst(v: f64) -> f64 {
        v
    }
    fn val(self) -> f64 {
        self
    }
    fn atan(self) -> f64 {
        f64::atan(self)
    }
}

/// Forward-mode dual number carrying derivatives along four directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual4 {
    pub v: f64,
    pub d: [f64; 4],
}

impl Dual4 {
    pub fn var(v: f64, axis: usize, sign: f64) -> Dual4 {
        let mut d = [0.0; 4];
        d[axis] = sign;
        Dual4 { v, d }
    }
}

impl Add for Dual4 {
    type Output = Dual4;
    fn add(self, o: Dual4) -> Dual4 {
        Dual4 { v: self.v + o.v, d: std::array::from_fn(|i| self.d[i] + o.d[i]) }
    }
}

impl Sub for Dual4 {
    type Output = Dual4;
    fn sub(self, o: Dual4) -> Dual4 {
        Dual4 { v: self.v - o.v, d: std::array::from_fn(|i| self.d[i] - o.d[i]) }
    }
}

#[allow(clippy::suspicious_arithmetic_impl)]
impl Mul for Dual4 {
    type Output = Dual4;
    fn mul(self, o: Dual4) -> Dual4 {
        Dual4 { v: self.v * o.v, d: std::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]) }
    }
}

#[allow(clippy::suspicious_arithmetic_impl)]
impl Div for Dual4 {
    type Output = Dual4;
    fn div(self, o: Dual4) -> Dual4 {
        let inv = 1.0 / o.v;
        Dual4 {
            v: self.v * inv,
            d: std::array::from_fn(|i| (self.d[i] - self.v * inv * o.d[i]) * inv),
        }
    }
}

impl Neg for Dual4 {
    type Output = Dual4;
    fn neg(self) -> Dual4 {
        Dual4 { v: -self.v, d: self.d.map(|x| -x) }
    }
}

impl Real for Dual4 {
    fn cst(v: f64) -> Dual4 {
        Dual4 { v, d: [0.0; 4] }
    }
    fn val(self) -> f64 {
        self.v
    }
    fn atan(self) -> Dual4 {
        let k = 1.0 / (1.0 + self.v * self.v);
        Dual4 { v: self.v.atan(), d: self.d.map(|x| x * k) }
    }
}

/// CIoU of two boxes given as corners `[x1, y1, x2, y2]`.
pub fn ciou_corners<T: Real>(a: [T; 4], b: [T; 4]) -> T {
    let g = T::cst(GUARD);
    let zero = T::cst(0.0);
    let (wa, ha) = (a[2] - a[0], a[3] - a[1]);
    let (wb, hb) = (b[2] - b[0], b[3] - b[1]);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(zero);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(zero);
    let inter = iw * ih;
    let union = wa * ha + wb * hb - inter + g;
    let iou = inter / union;

    let cw = a[2].max(b[2]) - a[0].min(b[0]);
    let ch = a[3].max(b[3]) - a[1].min(b[1]);
    let c2 = cw * cw + ch * ch + g;
    let dx = (b[0] + b[2] - a[0] - a[2]) / T::cst(2.0);
    let dy = (b[1] + b[3] - a[1] - a[3]) / T::cst(2.0);
    let rho2 = dx * dx + dy * dy;

    let dv = (wb / (hb + g)).atan() - (wa / (ha + g)).atan();
    let v = T::cst(4.0 / (PI * PI)) * dv * dv;
    let alpha = v / (T::cst(1.0) - iou + v + g);
    iou - rho2 / c2 - alpha * v
}

pub fn ciou(a: &BBox, b: &BBox) -> f64 {
    ciou_corners(a.corners(), b.corners())
}
