//! Screw-axis rigid transforms, ray warping and quaternion utilities.
//!
//! A screw axis `(ω; v)` acts on a ray as `o' = R o + G v`, `d' = R d`, with
//! `R = I + A[ω]× + B[ω]×²` and `G = I + B[ω]× + C[ω]×²`, where
//! `A = sinθ/θ`, `B = (1-cosθ)/θ²`, `C = (θ-sinθ)/θ³` and `θ = |ω|`.
//! The coefficients are written as functions of `θ²` so they stay smooth
//! at the zero screw every embedding is initialized to.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::diffmath::{Graph, Var};
use crate::error::{Error, Result};
use crate::render::Ray;

/// Below this angle the coefficients switch to their Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Derivative series are used below this angle, where the closed forms cancel.
const SERIES_ANGLE: f64 = 0.25;

/// Derivative in `s = θ²` of `Σ_k (−s)^k / (2k + offset)!`, through `k = 6`.
fn series_deriv(s: f64, offset: u32) -> f64 {
    let mut fact = (1..=offset + 2).map(f64::from).product::<f64>();
    let (mut acc, mut pow) = (0.0, 1.0);
    for k in 1..=6u32 {
        if k > 1 {
            fact *= f64::from(2 * k + offset - 1) * f64::from(2 * k + offset);
        }
        let sign = if k % 2 == 1 { -1.0 } else { 1.0 };
        acc += sign * f64::from(k) * pow / fact;
        pow *= s;
    }
    acc
}

/// `sinθ/θ` and its derivative with respect to `θ²`.
pub fn rotation_coeff(theta_sq: f64) -> (f64, f64) {
    let s = theta_sq;
    let theta = s.sqrt();
    let value = if theta < SMALL_ANGLE {
        1.0 - s / 6.0
    } else {
        theta.sin() / theta
    };
    let deriv = if theta < SERIES_ANGLE {
        series_deriv(s, 1)
    } else {
        (theta * theta.cos() - theta.sin()) / (2.0 * theta * s)
    };
    (value, deriv)
}

/// `(1-cosθ)/θ²` and its derivative with respect to `θ²`.
pub fn coupling_coeff(theta_sq: f64) -> (f64, f64) {
    let s = theta_sq;
    let theta = s.sqrt();
    let one_minus_cos = 2.0 * (0.5 * theta).sin().powi(2);
    let value = if theta < SMALL_ANGLE {
        0.5 - s / 24.0
    } else {
        one_minus_cos / s
    };
    let deriv = if theta < SERIES_ANGLE {
        series_deriv(s, 2)
    } else {
        (theta * theta.sin() - 2.0 * one_minus_cos) / (2.0 * s * s)
    };
    (value, deriv)
}

/// `(θ-sinθ)/θ³` and its derivative with respect to `θ²`.
pub fn translation_coeff(theta_sq: f64) -> (f64, f64) {
    let s = theta_sq;
    let theta = s.sqrt();
    let value = if theta < SMALL_ANGLE {
        1.0 / 6.0 - s / 120.0
    } else {
        (theta - theta.sin()) / (s * theta)
    };
    let deriv = if theta < SERIES_ANGLE {
        series_deriv(s, 3)
    } else {
        let one_minus_cos = 2.0 * (0.5 * theta).sin().powi(2);
        (one_minus_cos * theta - 3.0 * (theta - theta.sin())) / (2.0 * s * s * theta)
    };
    (value, deriv)
}

/// Cross-product matrix `[w]×`.
pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rotation exponential `e^{[ω]×}`.
pub fn exp_rotation(omega: &Vector3<f64>) -> Matrix3<f64> {
    let s = omega.norm_squared();
    let k = skew(omega);
    Matrix3::identity() + k * rotation_coeff(s).0 + k * k * coupling_coeff(s).0
}

/// Translation matrix `G(ω)` paired with [`exp_rotation`].
pub fn translation_matrix(omega: &Vector3<f64>) -> Matrix3<f64> {
    let s = omega.norm_squared();
    let k = skew(omega);
    Matrix3::identity() + k * coupling_coeff(s).0 + k * k * translation_coeff(s).0
}

/// Six-parameter rigid motion `(ω; v)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScrewAxis {
    pub omega: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl ScrewAxis {
    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Self { omega, v }
    }

    /// From a `[ωx, ωy, ωz, vx, vy, vz]` row.
    pub fn from_slice(s: &[f64]) -> Self {
        Self {
            omega: Vector3::new(s[0], s[1], s[2]),
            v: Vector3::new(s[3], s[4], s[5]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.omega.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }

    pub fn angle(&self) -> f64 {
        self.omega.norm()
    }

    pub fn transform(&self) -> RigidTransform {
        RigidTransform {
            rotation: exp_rotation(&self.omega),
            translation: translation_matrix(&self.omega) * self.v,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Largest deviation of `RᵀR` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        rotation_error(&self.rotation)
    }
}

/// `max(|RᵀR - I|, |det R - 1|)`.
pub fn rotation_error(r: &Matrix3<f64>) -> f64 {
    let e = (r.transpose() * r - Matrix3::identity()).abs().max();
    e.max((r.determinant() - 1.0).abs())
}

/// Applies a screw to a ray: rotation on origin and direction, translation on
/// the origin only; the direction is renormalized.
pub fn warp_ray(ray: &Ray, screw: &ScrewAxis) -> Ray {
    let t = screw.transform();
    let d = t.rotation * ray.direction;
    Ray {
        origin: t.rotation * ray.origin + t.translation,
        direction: d / d.norm(),
        ..*ray
    }
}

/// Batched, differentiable [`warp_ray`] over `n x 3` origins, directions,
/// rotation encodings and translation encodings.
pub fn warp_rays_graph(g: &mut Graph, origins: Var, dirs: Var, omega: Var, v: Var) -> Result<(Var, Var)> {
    let sq = g.mul(omega, omega)?;
    let theta_sq = g.sum_cols(sq);
    let a = g.elementwise(theta_sq, rotation_coeff);
    let b = g.elementwise(theta_sq, coupling_coeff);
    let c = g.elementwise(theta_sq, translation_coeff);

    let rotate = |g: &mut Graph, x: Var| -> Result<Var> {
        let wx = g.cross3(omega, x)?;
        let wwx = g.cross3(omega, wx)?;
        let t1 = g.mul(wx, a)?;
        let t2 = g.mul(wwx, b)?;
        let s = g.add(x, t1)?;
        g.add(s, t2)
    };
    let ro = rotate(g, origins)?;
    let rd = rotate(g, dirs)?;

    let wv = g.cross3(omega, v)?;
    let wwv = g.cross3(omega, wv)?;
    let t1 = g.mul(wv, b)?;
    let t2 = g.mul(wwv, c)?;
    let gv = g.add(v, t1)?;
    let gv = g.add(gv, t2)?;

    let o = g.add(ro, gv)?;
    let d = g.normalize3(rd)?;
    Ok((o, d))
}

/// Unit quaternion `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let a = axis.normalize() * (0.5 * angle).sin();
        Self::new((0.5 * angle).cos(), a.x, a.y, a.z).canonical()
    }

    pub fn dot(&self, o: &Quaternion) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    pub fn normalized(&self) -> Self {
        self.scale(1.0 / self.norm())
    }

    pub fn neg(&self) -> Self {
        self.scale(-1.0)
    }

    /// Representative with `w >= 0`.
    pub fn canonical(&self) -> Self {
        if self.w < 0.0 {
            self.neg()
        } else {
            *self
        }
    }

    /// Rotation angle between two orientations, in `[0, π]`.
    pub fn angle_to(&self, o: &Quaternion) -> f64 {
        2.0 * self.dot(o).abs().min(1.0).acos()
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let Quaternion { w, x, y, z } = *self;
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Shepperd's method, branching on the largest diagonal term.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let tr = m.trace();
        let q = if tr > m[(0, 0)] && tr > m[(1, 1)] && tr > m[(2, 2)] {
            let s = 2.0 * (1.0 + tr).sqrt();
            Self::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = 2.0 * (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt();
            Self::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = 2.0 * (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt();
            Self::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = 2.0 * (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt();
            Self::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        q.normalized().canonical()
    }
}

/// Spherical linear interpolation at constant angular velocity.
pub fn slerp(q0: &Quaternion, q1: &Quaternion, u: f64) -> Quaternion {
    let mut dot = q0.dot(q1);
    let q1 = if dot < 0.0 {
        dot = -dot;
        q1.neg()
    } else {
        *q1
    };
    if dot > 1.0 - 1e-9 {
        let q = Quaternion::new(
            q0.w + u * (q1.w - q0.w),
            q0.x + u * (q1.x - q0.x),
            q0.y + u * (q1.y - q0.y),
            q0.z + u * (q1.z - q0.z),
        );
        return q.normalized();
    }
    let half = dot.min(1.0).acos();
    let s = half.sin();
    let a = ((1.0 - u) * half).sin() / s;
    let b = (u * half).sin() / s;
    Quaternion::new(
        a * q0.w + b * q1.w,
        a * q0.x + b * q1.x,
        a * q0.y + b * q1.y,
        a * q0.z + b * q1.z,
    )
}

/// Normalized componentwise mean of the `w >= 0` representatives.
///
/// Inputs are expected to lie in one hemisphere (small dispersion around the
/// first element); exactly opposite inputs cancel and are rejected.
pub fn average_quaternions(qs: &[Quaternion]) -> Result<Quaternion> {
    if qs.is_empty() {
        return Err(Error::InvalidArgument("cannot average an empty quaternion list".into()));
    }
    let mut acc = Quaternion::new(0.0, 0.0, 0.0, 0.0);
    for q in qs {
        let q = q.canonical();
        acc = Quaternion::new(acc.w + q.w, acc.x + q.x, acc.y + q.y, acc.z + q.z);
    }
    let mean = acc.scale(1.0 / qs.len() as f64);
    let n = mean.norm();
    if n < 1e-8 {
        return Err(Error::DegenerateAverage(n));
    }
    Ok(mean.scale(1.0 / n).canonical())
}

/// Pinhole intrinsics; pixel centers sit at integer image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        if self.fx > 0.0 && self.fy > 0.0 && self.cx.is_finite() && self.cy.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("focal lengths must be positive: {self:?}")))
        }
    }

    /// Intrinsics of the same camera sampled `factor` times more densely.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            fx: self.fx * factor,
            fy: self.fy * factor,
            cx: self.cx * factor,
            cy: self.cy * factor,
        }
    }
}

/// World-from-camera pose; the camera looks down its +z axis, +y down.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub intrinsics: Intrinsics,
    pub frame: usize,
}

impl CameraPose {
    /// Unit ray through pixel `(u, v)` in world coordinates.
    pub fn pixel_ray(&self, u: f64, v: f64, near: f64, far: f64, pixel: (u32, u32)) -> Ray {
        let k = &self.intrinsics;
        let cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        let d = self.rotation * cam;
        Ray {
            origin: self.translation,
            direction: d / d.norm(),
            frame: self.frame,
            pixel,
            near,
            far,
        }
    }

    /// The 3x4 `[R | t]` matrix in row-major order.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn from_row_major(m: &[f64; 12], intrinsics: Intrinsics, frame: usize) -> Self {
        Self {
            rotation: Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]),
            translation: Vector3::new(m[3], m[7], m[11]),
            intrinsics,
            frame,
        }
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    use proptest::prelude::*;

    use super::*;

    fn ray() -> Ray {
        Ray {
            origin: Vector3::new(0.3, -0.2, 1.0),
            direction: Vector3::new(0.1, 0.2, 1.0).normalize(),
            frame: 3,
            pixel: (5, 7),
            near: 0.5,
            far: 6.0,
        }
    }

    #[test]
    fn exp_rotation_at_zero_is_identity() {
        assert_eq!(exp_rotation(&Vector3::zeros()), Matrix3::identity());
        assert_eq!(translation_matrix(&Vector3::zeros()), Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = exp_rotation(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        // quaternion oracle: (cos π/4, 0, 0, sin π/4)
        let q = Quaternion::new(FRAC_PI_4.cos(), 0.0, 0.0, FRAC_PI_4.sin()).to_matrix();
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((r - expected).abs().max() < 1e-12);
        assert!((q - expected).abs().max() < 1e-12);
    }

    #[test]
    fn translation_matrix_matches_quadrature() {
        let omega = Vector3::new(0.0, 0.0, PI);
        let g = translation_matrix(&omega);
        // composite Simpson over s in [0, 1] of exp(s [ω]×)
        let n = 2000;
        let h = 1.0 / n as f64;
        let mut acc = Matrix3::zeros();
        for i in 0..=n {
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += exp_rotation(&(omega * (i as f64 * h))) * w;
        }
        acc *= h / 3.0;
        assert!((g - acc).abs().max() < 1e-10, "{}", (g - acc).abs().max());
    }

    #[test]
    fn taylor_switch_is_continuous() {
        let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
        let at = axis * SMALL_ANGLE;
        let s = SMALL_ANGLE * SMALL_ANGLE;
        let k = skew(&at);
        let exact_g = Matrix3::identity()
            + k * ((1.0 - SMALL_ANGLE.cos()) / s)
            + k * k * ((SMALL_ANGLE - SMALL_ANGLE.sin()) / (s * SMALL_ANGLE));
        let taylor_g = Matrix3::identity() + k * (0.5 - s / 24.0) + k * k * (1.0 / 6.0 - s / 120.0);
        assert!((exact_g - taylor_g).abs().max() < 1e-9);
        let below = translation_matrix(&(axis * (SMALL_ANGLE * (1.0 - 1e-9))));
        let above = translation_matrix(&(axis * (SMALL_ANGLE * (1.0 + 1e-9))));
        assert!((below - above).abs().max() < 1e-9);
        let below = exp_rotation(&(axis * (SMALL_ANGLE * (1.0 - 1e-9))));
        let above = exp_rotation(&(axis * (SMALL_ANGLE * (1.0 + 1e-9))));
        assert!((below - above).abs().max() < 1e-9);
    }

    #[test]
    fn coefficient_derivatives_agree_across_series_switch() {
        for f in [rotation_coeff, coupling_coeff, translation_coeff] {
            let s = SERIES_ANGLE * SERIES_ANGLE;
            let lo = f(s * (1.0 - 1e-9)).1;
            let hi = f(s * (1.0 + 1e-9)).1;
            assert!((lo - hi).abs() < 1e-9 * lo.abs().max(1e-3), "{lo} {hi}");
            let h = 1e-7;
            let fd = (f(s + h).0 - f(s - h).0) / (2.0 * h);
            assert!((fd - hi).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_screw_leaves_ray_unchanged() {
        let r = ray();
        let w = warp_ray(&r, &ScrewAxis::default());
        assert!((w.origin - r.origin).norm() <= 1e-12);
        assert!((w.direction - r.direction).norm() <= 1e-12);
        assert_eq!((w.frame, w.pixel, w.near, w.far), (r.frame, r.pixel, r.near, r.far));
    }

    #[test]
    fn pure_translation_shifts_origin() {
        let r = ray();
        let w = warp_ray(&r, &ScrewAxis::new(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)));
        assert!((w.origin - (r.origin + Vector3::new(1.0, 0.0, 0.0))).norm() < 1e-15);
        assert!((w.direction - r.direction).norm() < 1e-15);
    }

    #[test]
    fn negated_rotation_restores_direction() {
        let r = ray();
        let omega = Vector3::new(0.4, -0.7, 0.2);
        let w = warp_ray(&r, &ScrewAxis::new(omega, Vector3::new(0.1, 0.2, 0.3)));
        let back = warp_ray(&w, &ScrewAxis::new(-omega, Vector3::zeros()));
        assert!((back.direction - r.direction).norm() < 1e-10);
    }

    #[test]
    fn slerp_endpoints_and_midpoint() {
        let q0 = Quaternion::IDENTITY;
        let q1 = Quaternion::from_axis_angle(&Vector3::z(), FRAC_PI_2);
        assert!(slerp(&q0, &q1, 0.0).dot(&q0) > 1.0 - 1e-15);
        assert!(slerp(&q0, &q1, 1.0).dot(&q1) > 1.0 - 1e-15);
        let mid = slerp(&q0, &q1, 0.5);
        let expected = Quaternion::from_axis_angle(&Vector3::z(), FRAC_PI_4);
        assert!((mid.angle_to(&expected)).abs() < 1e-9);
        let same = slerp(&q1, &q1, 0.37);
        assert!(same.angle_to(&q1) < 1e-9);
    }

    #[test]
    fn quaternion_average_cases() {
        let q = Quaternion::from_axis_angle(&Vector3::new(1.0, 2.0, 3.0), 0.8);
        let avg = average_quaternions(&[q; 5]).unwrap();
        assert!(avg.angle_to(&q) < 1e-12);

        let q1 = Quaternion::from_axis_angle(&Vector3::z(), FRAC_PI_2);
        let avg = average_quaternions(&[Quaternion::IDENTITY, q1]).unwrap();
        let mid = slerp(&Quaternion::IDENTITY, &q1, 0.5);
        assert!(avg.angle_to(&mid) < 1e-6);

        let flipped = average_quaternions(&[Quaternion::IDENTITY, q1.neg()]).unwrap();
        assert!((flipped.w - avg.w).abs() < 1e-15 && (flipped.z - avg.z).abs() < 1e-15);

        assert!(average_quaternions(&[]).is_err());
    }

    #[test]
    fn antipodal_average_is_degenerate() {
        let a = Quaternion::new(0.0, 1.0, 0.0, 0.0);
        let err = average_quaternions(&[a, a.neg()]);
        assert!(matches!(err, Err(Error::DegenerateAverage(_))));
        let err = average_quaternions(&[Quaternion::new(0.0, 0.0, 0.0, 0.0)]);
        assert!(matches!(err, Err(Error::DegenerateAverage(_))));
    }

    fn omega_strategy() -> impl Strategy<Value = Vector3<f64>> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, 0.0..PI).prop_map(|(x, y, z, a)| {
            let v = Vector3::new(x, y, z);
            if v.norm() < 1e-3 {
                Vector3::new(0.0, 0.0, a)
            } else {
                v.normalize() * a
            }
        })
    }

    proptest! {
        #[test]
        fn exp_rotation_is_orthonormal(omega in omega_strategy()) {
            prop_assert!(rotation_error(&exp_rotation(&omega)) < 1e-10);
        }

        #[test]
        fn exp_rotation_inverse(omega in omega_strategy()) {
            let p = exp_rotation(&omega) * exp_rotation(&(-omega));
            prop_assert!((p - Matrix3::identity()).abs().max() < 1e-10);
        }

        #[test]
        fn warp_keeps_direction_unit(omega in omega_strategy(), v in proptest::array::uniform3(-2.0..2.0f64)) {
            let w = warp_ray(&ray(), &ScrewAxis::new(omega, Vector3::from(v)));
            prop_assert!((w.direction.norm() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn matrix_quaternion_round_trip(omega in omega_strategy()) {
            let r = exp_rotation(&omega);
            let back = Quaternion::from_matrix(&r).to_matrix();
            prop_assert!((back - r).abs().max() < 1e-10);
        }

        #[test]
        fn slerp_constant_angle(a in omega_strategy(), b in omega_strategy(), u in 0.0..1.0f64) {
            let q0 = Quaternion::from_matrix(&exp_rotation(&a));
            let q1 = Quaternion::from_matrix(&exp_rotation(&b));
            let total = q0.angle_to(&q1);
            let q = slerp(&q0, &q1, u);
            prop_assert!((q0.angle_to(&q) - u * total).abs() < 1e-9);
        }
    }
}
