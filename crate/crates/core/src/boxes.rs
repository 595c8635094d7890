//! Axis-aligned boxes and the IoU family of regression losses: IoU, GIoU,
//! SIoU, the Focaler interval mapping, Focaler-IoU and Focaler-SIoU.
//!
//! The loss formulas are written once, generically over [`Real`], and
//! evaluated either on plain `f64` or on [`Dual4`] to obtain exact
//! coordinate gradients of the predicted box.

use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoxError {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): need finite coordinates with x2 ≥ x1 and y2 ≥ y1")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("ground-truth box has zero width or height")]
    DegenerateTarget,
    #[error("focaler thresholds must satisfy 0 ≤ d < u ≤ 1, got d = {d}, u = {u}")]
    InvalidFocaler { d: f64, u: f64 },
    #[error("unknown box loss {0:?} (expected giou, siou or focaler_siou)")]
    UnknownKind(String),
}

/// Corner-form box, `x2 ≥ x1`, `y2 ≥ y1`. Zero-area boxes are allowed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, BoxError> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x2 < x1 || y2 < y1 {
            return Err(BoxError::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self, BoxError> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, BoxError> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
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

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn scaled(&self, k: f64) -> Result<Self, BoxError> {
        Self::new(self.x1 * k, self.y1 * k, self.x2 * k, self.y2 * k)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Result<Self, BoxError> {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }
}

/// Interval thresholds of the Focaler mapping, `0 ≤ d < u ≤ 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalerParams {
    d: f64,
    u: f64,
}

impl FocalerParams {
    pub fn new(d: f64, u: f64) -> Result<Self, BoxError> {
        if !(0.0..=1.0).contains(&d) || !(0.0..=1.0).contains(&u) || d >= u {
            return Err(BoxError::InvalidFocaler { d, u });
        }
        Ok(FocalerParams { d, u })
    }

    /// `(d, u) = (0, 1)`: the mapping is the identity.
    pub fn identity() -> Self {
        FocalerParams { d: 0.0, u: 1.0 }
    }

    pub fn d(&self) -> f64 {
        self.d
    }

    pub fn u(&self) -> f64 {
        self.u
    }
}

impl Default for FocalerParams {
    fn default() -> Self {
        FocalerParams { d: 0.0, u: 0.95 }
    }
}

/// Breakdown of the SIoU penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SIoUTerms {
    pub iou: f64,
    /// Λ ∈ [0, 1]
    pub angle_cost: f64,
    /// Δ ∈ [0, 2]
    pub distance_cost: f64,
    /// Ω ∈ [0, 2]
    pub shape_cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoxLossKind {
    Giou,
    Siou,
    FocalerSiou,
}

impl BoxLossKind {
    pub fn name(self) -> &'static str {
        match self {
            BoxLossKind::Giou => "giou",
            BoxLossKind::Siou => "siou",
            BoxLossKind::FocalerSiou => "focaler_siou",
        }
    }
}

impl std::str::FromStr for BoxLossKind {
    type Err = BoxError;

    fn from_str(s: &str) -> Result<Self, BoxError> {
        match s {
            "giou" => Ok(BoxLossKind::Giou),
            "siou" => Ok(BoxLossKind::Siou),
            "focaler_siou" => Ok(BoxLossKind::FocalerSiou),
            other => Err(BoxError::UnknownKind(other.to_string())),
        }
    }
}

// ---- scalar abstraction ----------------------------------------------------

pub trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn val(self) -> f64;
    fn exp(self) -> Self;
    fn abs(self) -> Self;
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn val(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
}

/// Forward-mode dual number carrying derivatives w.r.t. four inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual4 {
    pub v: f64,
    pub d: [f64; 4],
}

impl Dual4 {
    pub fn var(v: f64, slot: usize) -> Self {
        let mut d = [0.0; 4];
        d[slot] = 1.0;
        Dual4 { v, d }
    }

    fn map_d(self, f: impl Fn(f64) -> f64) -> [f64; 4] {
        self.d.map(f)
    }
}

impl Add for Dual4 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Dual4 {
            v: self.v + o.v,
            d: std::array::from_fn(|i| self.d[i] + o.d[i]),
        }
    }
}

impl Sub for Dual4 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Dual4 {
            v: self.v - o.v,
            d: std::array::from_fn(|i| self.d[i] - o.d[i]),
        }
    }
}

impl Mul for Dual4 {
    type Output = Self;
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn mul(self, o: Self) -> Self {
        Dual4 {
            v: self.v * o.v,
            d: std::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]),
        }
    }
}

impl Div for Dual4 {
    type Output = Self;
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn div(self, o: Self) -> Self {
        let q = self.v / o.v;
        Dual4 {
            v: q,
            d: std::array::from_fn(|i| (self.d[i] - q * o.d[i]) / o.v),
        }
    }
}

impl Neg for Dual4 {
    type Output = Self;
    fn neg(self) -> Self {
        Dual4 {
            v: -self.v,
            d: self.map_d(|x| -x),
        }
    }
}

impl Real for Dual4 {
    fn cst(v: f64) -> Self {
        Dual4 { v, d: [0.0; 4] }
    }
    fn val(self) -> f64 {
        self.v
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual4 {
            v: e,
            d: self.map_d(|x| x * e),
        }
    }
    fn abs(self) -> Self {
        if self.v < 0.0 {
            -self
        } else {
            self
        }
    }
}

fn max<T: Real>(a: T, b: T) -> T {
    if a.val() >= b.val() {
        a
    } else {
        b
    }
}

fn min<T: Real>(a: T, b: T) -> T {
    if a.val() <= b.val() {
        a
    } else {
        b
    }
}

fn pow4<T: Real>(x: T) -> T {
    let sq = x * x;
    sq * sq
}

// ---- generic formulas ------------------------------------------------------

type Corners<T> = [T; 4];

fn lift<T: Real>(b: &BBox) -> Corners<T> {
    b.to_array().map(T::cst)
}

struct Overlap<T> {
    iou: T,
    union: T,
    hull: Corners<T>,
}

fn overlap<T: Real>(a: &Corners<T>, b: &Corners<T>) -> Overlap<T> {
    let zero = T::cst(0.0);
    let iw = max(min(a[2], b[2]) - max(a[0], b[0]), zero);
    let ih = max(min(a[3], b[3]) - max(a[1], b[1]), zero);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    let iou = if union.val() > 0.0 { inter / union } else { zero };
    let hull = [min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3])];
    Overlap { iou, union, hull }
}

fn giou_generic<T: Real>(a: &Corners<T>, b: &Corners<T>) -> T {
    let o = overlap(a, b);
    let hull_area = (o.hull[2] - o.hull[0]) * (o.hull[3] - o.hull[1]);
    let penalty = if hull_area.val() > 0.0 {
        (hull_area - o.union) / hull_area
    } else {
        T::cst(0.0)
    };
    T::cst(1.0) - (o.iou - penalty)
}

/// Returns `(loss, iou, Λ, Δ, Ω)`. `gt` must have positive width and height.
fn siou_generic<T: Real>(p: &Corners<T>, gt: &Corners<T>) -> (T, T, T, T, T) {
    let zero = T::cst(0.0);
    let one = T::cst(1.0);
    let half = T::cst(0.5);
    let o = overlap(p, gt);

    let dx = (gt[0] + gt[2]) * half - (p[0] + p[2]) * half;
    let dy = (gt[1] + gt[3]) * half - (p[1] + p[3]) * half;
    let sigma_sq = dx * dx + dy * dy;
    // 1 − 2·sin²(arcsin(c_h/σ) − π/4) = sin(2α) = 2·c_w·c_h/σ²
    let angle = if sigma_sq.val() > 0.0 {
        T::cst(2.0) * dx.abs() * dy.abs() / sigma_sq
    } else {
        zero
    };

    let cw = o.hull[2] - o.hull[0];
    let ch = o.hull[3] - o.hull[1];
    let gamma = T::cst(2.0) - angle;
    let rho_x = (dx / cw) * (dx / cw);
    let rho_y = (dy / ch) * (dy / ch);
    let distance = (one - (-(gamma * rho_x)).exp()) + (one - (-(gamma * rho_y)).exp());

    let (wp, hp) = (p[2] - p[0], p[3] - p[1]);
    let (wg, hg) = (gt[2] - gt[0], gt[3] - gt[1]);
    let omega_w = (wp - wg).abs() / max(wp, wg);
    let omega_h = (hp - hg).abs() / max(hp, hg);
    let shape = pow4(one - (-omega_w).exp()) + pow4(one - (-omega_h).exp());

    let loss = one - o.iou + (distance + shape) * half;
    (loss, o.iou, angle, distance, shape)
}

fn focaler_generic<T: Real>(iou: T, p: FocalerParams) -> T {
    // kinks take the middle-segment slope: only strict inequalities clamp
    if iou.val() < p.d {
        T::cst(0.0)
    } else if iou.val() > p.u {
        T::cst(1.0)
    } else {
        (iou - T::cst(p.d)) / T::cst(p.u - p.d)
    }
}

fn loss_generic<T: Real>(kind: BoxLossKind, pred: &Corners<T>, gt: &Corners<T>, p: FocalerParams) -> T {
    match kind {
        BoxLossKind::Giou => giou_generic(pred, gt),
        BoxLossKind::Siou => siou_generic(pred, gt).0,
        BoxLossKind::FocalerSiou => {
            let (siou, iou, ..) = siou_generic(pred, gt);
            siou + (iou - focaler_generic(iou, p))
        }
    }
}

// ---- public API --------------------------------------------------------------

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    overlap::<f64>(&lift(a), &lift(b)).iou
}

/// `1 − GIoU`, in `[0, 2]`.
pub fn giou_loss(a: &BBox, b: &BBox) -> f64 {
    giou_generic::<f64>(&lift(a), &lift(b))
}

/// SIoU loss of prediction `a` against ground truth `b` with θ = 4.
pub fn siou_loss(a: &BBox, b: &BBox) -> Result<(f64, SIoUTerms), BoxError> {
    if b.width() <= 0.0 || b.height() <= 0.0 {
        return Err(BoxError::DegenerateTarget);
    }
    let (loss, iou, angle_cost, distance_cost, shape_cost) = siou_generic::<f64>(&lift(a), &lift(b));
    Ok((
        loss,
        SIoUTerms {
            iou,
            angle_cost,
            distance_cost,
            shape_cost,
        },
    ))
}

/// Piecewise-linear interval mapping: 0 below `d`, 1 above `u`, linear between.
pub fn focaler_map(iou_value: f64, p: FocalerParams) -> f64 {
    focaler_generic(iou_value, p)
}

pub fn focaler_iou_loss(a: &BBox, b: &BBox, p: FocalerParams) -> f64 {
    1.0 - focaler_map(iou(a, b), p)
}

/// `L_SIoU + IoU − IoU^focaler`.
pub fn focaler_siou_loss(a: &BBox, b: &BBox, p: FocalerParams) -> Result<f64, BoxError> {
    if b.width() <= 0.0 || b.height() <= 0.0 {
        return Err(BoxError::DegenerateTarget);
    }
    Ok(loss_generic::<f64>(BoxLossKind::FocalerSiou, &lift(a), &lift(b), p))
}

pub fn box_loss(kind: BoxLossKind, a: &BBox, b: &BBox, p: FocalerParams) -> Result<f64, BoxError> {
    match kind {
        BoxLossKind::Giou => Ok(giou_loss(a, b)),
        BoxLossKind::Siou => siou_loss(a, b).map(|(l, _)| l),
        BoxLossKind::FocalerSiou => focaler_siou_loss(a, b, p),
    }
}

/// Loss value and its gradient w.r.t. the four predicted corner coordinates.
pub fn loss_and_grad(
    kind: BoxLossKind,
    pred: [f64; 4],
    gt: &BBox,
    p: FocalerParams,
) -> Result<(f64, [f64; 4]), BoxError> {
    let pb = BBox::from_array(pred)?;
    if kind != BoxLossKind::Giou && (gt.width() <= 0.0 || gt.height() <= 0.0) {
        return Err(BoxError::DegenerateTarget);
    }
    let pd: Corners<Dual4> = std::array::from_fn(|i| Dual4::var(pb.to_array()[i], i));
    let out = loss_generic(kind, &pd, &lift(gt), p);
    Ok((out.v, out.d))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(2.0, 0.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, f64::NAN, 1.0, 1.0).is_err());
        assert!(BBox::new(1.0, 1.0, 1.0, 1.0).is_ok());
    }

    #[test]
    fn iou_fixtures() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &b(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
        let p = b(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&p, &p), 0.0);
    }

    #[test]
    fn giou_fixtures() {
        let a = b(0.0, 0.0, 1.0, 1.0);
        assert_eq!(giou_loss(&a, &a), 0.0);
        let l = giou_loss(&a, &b(2.0, 0.0, 3.0, 1.0));
        assert!((l - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn siou_identical_is_zero() {
        let a = b(1.0, 2.0, 4.0, 7.0);
        let (l, t) = siou_loss(&a, &a).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!((t.distance_cost, t.shape_cost, t.iou), (0.0, 0.0, 1.0));
    }

    #[test]
    fn siou_axis_aligned_centres_have_zero_angle_cost() {
        let gt = b(0.0, 0.0, 2.0, 2.0);
        let (_, t) = siou_loss(&b(3.0, 0.0, 5.0, 2.0), &gt).unwrap();
        assert_eq!(t.angle_cost, 0.0);
        let (_, t) = siou_loss(&b(0.0, -4.0, 2.0, -1.0), &gt).unwrap();
        assert_eq!(t.angle_cost, 0.0);
    }

    #[test]
    fn angle_cost_matches_arcsin_form() {
        let gt = b(0.0, 0.0, 2.0, 2.0);
        for (dx, dy) in [(1.0, 0.3), (0.2, 2.0), (-1.5, 1.5), (3.0, -0.7)] {
            let p = gt.translated(dx, dy).unwrap();
            let (_, t) = siou_loss(&p, &gt).unwrap();
            let sigma = f64::hypot(dx, dy);
            let s = (dy.abs() / sigma).asin() - std::f64::consts::FRAC_PI_4;
            let expected = 1.0 - 2.0 * s.sin().powi(2);
            assert!((t.angle_cost - expected).abs() < 1e-12, "{dx},{dy}");
        }
    }

    #[test]
    fn siou_degenerate_target_rejected() {
        let a = b(0.0, 0.0, 1.0, 1.0);
        assert_eq!(siou_loss(&a, &b(0.0, 0.0, 0.0, 1.0)), Err(BoxError::DegenerateTarget));
    }

    #[test]
    fn focaler_points() {
        let p = FocalerParams::new(0.2, 0.8).unwrap();
        assert_eq!(focaler_map(0.2, p), 0.0);
        assert_eq!(focaler_map(0.8, p), 1.0);
        assert!((focaler_map(0.5, p) - 0.5).abs() < 1e-15);
        assert_eq!(focaler_map(0.1, p), 0.0);
        assert_eq!(focaler_map(0.9, p), 1.0);
        let id = FocalerParams::identity();
        for i in 0..=100 {
            let x = i as f64 / 100.0;
            assert_eq!(focaler_map(x, id), x);
        }
        assert!(FocalerParams::new(0.5, 0.5).is_err());
        assert!(FocalerParams::new(-0.1, 0.5).is_err());
        assert!(FocalerParams::new(0.1, 1.1).is_err());
    }

    #[test]
    fn focaler_iou_loss_points() {
        let p = FocalerParams::new(0.1, 0.9).unwrap();
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(focaler_iou_loss(&a, &a, p), 0.0);
        assert_eq!(focaler_iou_loss(&a, &b(3.0, 3.0, 4.0, 4.0), p), 1.0);
        // IoU = 1/2: shift a unit square by 1/3
        let q = FocalerParams::new(0.3, 0.7).unwrap();
        let u = b(0.0, 0.0, 1.0, 1.0);
        let v = b(1.0 / 3.0, 0.0, 4.0 / 3.0, 1.0);
        assert!((iou(&u, &v) - 0.5).abs() < 1e-15);
        assert!((focaler_iou_loss(&u, &v, q) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn focaler_siou_identity_reduces_exactly() {
        let gt = b(1.0, 1.0, 4.0, 3.0);
        let p = b(1.5, 0.7, 3.9, 3.4);
        let (s, _) = siou_loss(&p, &gt).unwrap();
        assert_eq!(focaler_siou_loss(&p, &gt, FocalerParams::identity()).unwrap(), s);
        assert_eq!(focaler_siou_loss(&gt, &gt, FocalerParams::default()).unwrap(), 0.0);
    }

    #[test]
    fn dual_gradient_matches_central_difference() {
        let gt = b(1.0, 1.0, 4.0, 3.0);
        let pred = [1.3, 0.6, 3.9, 3.3];
        for kind in [BoxLossKind::Giou, BoxLossKind::Siou, BoxLossKind::FocalerSiou] {
            let (l, g) = loss_and_grad(kind, pred, &gt, FocalerParams::default()).unwrap();
            let eval = |c: [f64; 4]| box_loss(kind, &BBox::from_array(c).unwrap(), &gt, FocalerParams::default()).unwrap();
            assert!((l - eval(pred)).abs() < 1e-15);
            for i in 0..4 {
                let (mut hi, mut lo) = (pred, pred);
                hi[i] += 1e-6;
                lo[i] -= 1e-6;
                let fd = (eval(hi) - eval(lo)) / 2e-6;
                assert!((fd - g[i]).abs() < 1e-7, "{kind:?} coord {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("focaler_siou".parse::<BoxLossKind>().unwrap(), BoxLossKind::FocalerSiou);
        assert!("ciou".parse::<BoxLossKind>().is_err());
    }
}
