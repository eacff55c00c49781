//! Planar vectors and line-segment obstacles.

use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::ad::Real;
use crate::error::{Error, Result};

/// A 2D vector. Generic so geometry can be evaluated on dual numbers.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Vec2<T = f64> {
    pub x: T,
    pub y: T,
}

impl<T: Real> Vec2<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Self) -> T {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3D cross product.
    pub fn det(self, other: Self) -> T {
        self.x * other.y - self.y * other.x
    }

    pub fn norm_squared(self) -> T {
        self.dot(self)
    }

    pub fn norm(self) -> T {
        self.norm_squared().sqrt()
    }

    pub fn scale(self, k: T) -> Self {
        Self::new(self.x * k, self.y * k)
    }

    /// Left-hand perpendicular `(-y, x)`.
    pub fn perp(self) -> Self {
        Self::new(-self.y, self.x)
    }

    pub fn cst(v: Vec2<f64>) -> Self {
        Self::new(T::cst(v.x), T::cst(v.y))
    }

    pub fn re(self) -> Vec2<f64> {
        Vec2::new(self.x.re(), self.y.re())
    }
}

impl Vec2<f64> {
    pub const ZERO: Self = Self { x: 0.0, y: 0.0 };

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(self, other: Self) -> f64 {
        (self - other).norm()
    }

    /// Unit vector, or zero for the zero vector.
    pub fn normalized(self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            self.scale(1.0 / n)
        } else {
            Self::ZERO
        }
    }

    pub fn from_angle(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }
}

impl<T: Real> Add for Vec2<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl<T: Real> Sub for Vec2<T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl<T: Real> Neg for Vec2<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y)
    }
}

impl<T: Real> AddAssign for Vec2<T> {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl<T: Real> SubAssign for Vec2<T> {
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl Mul<Vec2<f64>> for f64 {
    type Output = Vec2<f64>;
    fn mul(self, rhs: Vec2<f64>) -> Vec2<f64> {
        rhs.scale(self)
    }
}

impl Serialize for Vec2<f64> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        [self.x, self.y].serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Vec2<f64> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let [x, y] = <[f64; 2]>::deserialize(deserializer)?;
        Ok(Self::new(x, y))
    }
}

/// A static line-segment obstacle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: Vec2,
    pub b: Vec2,
}

impl Segment {
    pub fn new(a: Vec2, b: Vec2) -> Result<Self> {
        if !(a.is_finite() && b.is_finite()) {
            return Err(Error::InvalidState("segment endpoint is not finite".into()));
        }
        if a == b {
            return Err(Error::DegenerateGeometry(
                "segment endpoints coincide".into(),
            ));
        }
        Ok(Self { a, b })
    }

    pub fn length(&self) -> f64 {
        self.a.distance(self.b)
    }
}

/// Which part of a segment is nearest to a query point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Feature {
    EndpointA,
    Interior,
    EndpointB,
}

/// Closest point on `segment` to `point`, and the feature it lies on.
pub fn closest_point<T: Real>(point: Vec2<T>, segment: &Segment) -> (Vec2<T>, Feature) {
    let a = Vec2::<T>::cst(segment.a);
    let ab = segment.b - segment.a;
    let len_sq = ab.norm_squared();
    let t = (point - a).dot(Vec2::cst(ab)) / T::cst(len_sq);
    if t.re() <= 0.0 {
        (a, Feature::EndpointA)
    } else if t.re() >= 1.0 {
        (Vec2::cst(segment.b), Feature::EndpointB)
    } else {
        (a + Vec2::cst(ab).scale(t), Feature::Interior)
    }
}

/// Euclidean distance from a point to the closest point on a segment.
pub fn point_segment_distance(point: Vec2, segment: &Segment) -> f64 {
    let (c, _) = closest_point(point, segment);
    point.distance(c)
}

/// Heading normalization into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    use std::f64::consts::PI;
    if theta > -PI && theta <= PI {
        return theta;
    }
    let mut a = theta.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn seg(ax: f64, ay: f64, bx: f64, by: f64) -> Segment {
        Segment::new(Vec2::new(ax, ay), Vec2::new(bx, by)).unwrap()
    }

    #[test]
    fn point_on_segment_has_zero_distance() {
        let s = seg(-1.0, 0.0, 1.0, 0.0);
        assert!(point_segment_distance(Vec2::new(0.3, 0.0), &s) < 1e-15);
    }

    #[test]
    fn perpendicular_foot() {
        let s = seg(-1.0, 0.0, 1.0, 0.0);
        assert!((point_segment_distance(Vec2::new(0.0, 1.0), &s) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn coincident_endpoints_rejected() {
        assert!(Segment::new(Vec2::new(1.0, 1.0), Vec2::new(1.0, 1.0)).is_err());
    }

    #[test]
    fn wrap_edges() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn distance_matches_dense_discretization(
            ax in -3.0..3.0f64, ay in -3.0..3.0f64,
            bx in -3.0..3.0f64, by in -3.0..3.0f64,
            px in -4.0..4.0f64, py in -4.0..4.0f64,
        ) {
            prop_assume!((ax - bx).abs() + (ay - by).abs() > 1e-3);
            let s = seg(ax, ay, bx, by);
            let p = Vec2::new(px, py);
            let steps = 10_000;
            let oracle = (0..=steps)
                .map(|k| {
                    let t = k as f64 / steps as f64;
                    let q = Vec2::new(ax + t * (bx - ax), ay + t * (by - ay));
                    p.distance(q)
                })
                .fold(f64::INFINITY, f64::min);
            let d = point_segment_distance(p, &s);
            // discretization error is bounded by half the sample spacing
            prop_assert!(d <= oracle + 1e-12);
            prop_assert!(oracle - d <= 0.5 * s.length() / steps as f64 + 1e-12);
        }

        #[test]
        fn wrap_is_idempotent(theta in -100.0..100.0f64) {
            let w = wrap_angle(theta);
            prop_assert!(w > -PI && w <= PI);
            prop_assert_eq!(wrap_angle(w), w);
        }
    }
}
