//! Coordinate systems used by the warping pipeline.
//!
//! Three frames appear throughout the crate:
//!
//! * image pixel coordinates, where pixel `(row i, col j)` has its center at
//!   `(j + 0.5, i + 0.5)`;
//! * the source coordinate system (SCS), the face-template frame in which the
//!   face rectangle spans `[-1, 1]²`;
//! * the warped coordinate system (WCS), in which the borders of the warped
//!   image lie at `±1`.
//!
//! A [`SimilarityTransform`] maps image pixels to SCS; `tanh` maps SCS to WCS.

use std::ops::{Add, Mul, Sub};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

/// A point in the source (face-rectangle) coordinate system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScsPoint(pub Point2);

/// A point in the warped coordinate system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WcsPoint(pub Point2);

/// Template positions of the five landmarks in SCS.
pub const TEMPLATE_POINTS: [Point2; 5] = [
    Point2::new(-0.25, -0.1),
    Point2::new(0.25, -0.1),
    Point2::new(0.0, 0.1),
    Point2::new(-0.15, 0.4),
    Point2::new(0.15, 0.4),
];

/// Five facial landmarks in image pixel coordinates, ordered
/// left eye, right eye, nose tip, left mouth corner, right mouth corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmarks5 {
    points: [Point2; 5],
}

impl Landmarks5 {
    pub fn new(points: [Point2; 5]) -> Result<Self> {
        if let Some(p) = points.iter().find(|p| !p.is_finite()) {
            return Err(Error::DegenerateLandmarks(format!(
                "non-finite landmark ({}, {})",
                p.x, p.y
            )));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point2; 5] {
        &self.points
    }

    pub fn center(&self) -> Point2 {
        let sum = self.points.iter().fold(Point2::default(), |acc, &p| acc + p);
        sum * 0.2
    }

    /// Applies `f` to every point, keeping the semantic order.
    pub fn map(&self, f: impl Fn(Point2) -> Point2) -> Result<Self> {
        Self::new(self.points.map(f))
    }

    /// Mirrors the landmarks about the vertical axis `x = width / 2` and
    /// swaps left/right roles so the semantic order is preserved.
    pub fn mirrored(&self, width: f64) -> Self {
        let m = |p: Point2| Point2::new(width - p.x, p.y);
        let p = &self.points;
        Self {
            points: [m(p[1]), m(p[0]), m(p[2]), m(p[4]), m(p[3])],
        }
    }
}

/// `T(p) = scale * R(rotation) * p + translation`, mapping image pixel
/// coordinates to SCS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: f64,
    pub translation: Point2,
}

impl SimilarityTransform {
    pub const IDENTITY: SimilarityTransform = SimilarityTransform {
        scale: 1.0,
        rotation: 0.0,
        translation: Point2::new(0.0, 0.0),
    };

    pub fn new(scale: f64, rotation: f64, translation: Point2) -> Self {
        debug_assert!(scale > 0.0, "similarity scale must be positive");
        Self {
            scale,
            rotation,
            translation,
        }
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let (s, c) = self.rotation.sin_cos();
        Point2::new(
            self.scale * (c * p.x - s * p.y) + self.translation.x,
            self.scale * (s * p.x + c * p.y) + self.translation.y,
        )
    }

    pub fn invert(&self) -> SimilarityTransform {
        let inv_scale = 1.0 / self.scale;
        let rotation = -self.rotation;
        let (s, c) = rotation.sin_cos();
        let t = self.translation;
        let translation = Point2::new(
            -inv_scale * (c * t.x - s * t.y),
            -inv_scale * (s * t.x + c * t.y),
        );
        SimilarityTransform {
            scale: inv_scale,
            rotation,
            translation,
        }
    }

    /// `self` after `first`.
    pub fn compose(&self, first: &SimilarityTransform) -> SimilarityTransform {
        let translation = self.apply(first.translation);
        SimilarityTransform {
            scale: self.scale * first.scale,
            rotation: self.rotation + first.rotation,
            translation,
        }
    }

    /// Corners of the face rectangle in image coordinates: `T⁻¹` applied to
    /// `(-1,-1), (1,-1), (1,1), (-1,1)`.
    pub fn face_rect_corners(&self) -> [Point2; 4] {
        let inv = self.invert();
        [
            Point2::new(-1.0, -1.0),
            Point2::new(1.0, -1.0),
            Point2::new(1.0, 1.0),
            Point2::new(-1.0, 1.0),
        ]
        .map(|p| inv.apply(p))
    }

    pub fn to_scs(&self, p: Point2) -> ScsPoint {
        ScsPoint(self.apply(p))
    }
}

/// Least-squares similarity (no reflection) taking the landmarks onto
/// [`TEMPLATE_POINTS`].
pub fn estimate_similarity(landmarks: &Landmarks5) -> Result<SimilarityTransform> {
    estimate_similarity_between(landmarks.points(), &TEMPLATE_POINTS)
}

/// Closed-form minimiser of `Σ ‖s R src_k + t − dst_k‖²` over similarities.
pub fn estimate_similarity_between(src: &[Point2], dst: &[Point2]) -> Result<SimilarityTransform> {
    assert_eq!(src.len(), dst.len(), "point sets must pair up");
    let n = src.len() as f64;
    let mean = |pts: &[Point2]| pts.iter().fold(Point2::default(), |a, &p| a + p) * (1.0 / n);
    let src_mean = mean(src);
    let dst_mean = mean(dst);

    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    let (mut dot, mut cross) = (0.0, 0.0);
    for (&p, &q) in src.iter().zip(dst) {
        let p = p - src_mean;
        let q = q - dst_mean;
        sxx += p.x * p.x;
        syy += p.y * p.y;
        sxy += p.x * p.y;
        dot += p.x * q.x + p.y * q.y;
        cross += p.x * q.y - p.y * q.x;
    }

    // Principal spreads of the source cloud.
    let half_trace = 0.5 * (sxx + syy);
    let disc = (0.25 * (sxx - syy).powi(2) + sxy * sxy).sqrt();
    let minor = ((half_trace - disc).max(0.0) / n).sqrt();
    if minor <= 1e-6 {
        return Err(Error::DegenerateLandmarks(format!(
            "landmark spread {minor:.3e} px along the minor principal axis"
        )));
    }

    let denom = sxx + syy;
    let a = dot / denom;
    let b = cross / denom;
    let scale = a.hypot(b);
    if scale <= f64::EPSILON {
        return Err(Error::DegenerateLandmarks(
            "landmarks are uncorrelated with the template".into(),
        ));
    }
    let rotation = b.atan2(a);
    let rotated = SimilarityTransform::new(scale, rotation, Point2::default()).apply(src_mean);
    Ok(SimilarityTransform::new(scale, rotation, dst_mean - rotated))
}

pub fn tanh_map(p: ScsPoint) -> WcsPoint {
    WcsPoint(Point2::new(p.0.x.tanh(), p.0.y.tanh()))
}

pub fn atanh_map(p: WcsPoint) -> Result<ScsPoint> {
    let Point2 { x, y } = p.0;
    if !(x.abs() < 1.0 && y.abs() < 1.0) {
        return Err(Error::OutOfDomain { x, y });
    }
    Ok(ScsPoint(Point2::new(x.atanh(), y.atanh())))
}
