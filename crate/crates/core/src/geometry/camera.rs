//! Pinhole (radially distorted) and equidistant fisheye camera models.
//!
//! Both models share the intrinsics layout (fx, fy, cx, cy) plus up to four
//! radial coefficients. The fisheye depth channel is the Euclidean distance
//! to the point rather than the z coordinate, which keeps the fuzzy depth
//! test meaningful for rays far off the optical axis.

use crate::{Error, Result};
use nalgebra::{Matrix2x3, SMatrix, Vector2, Vector3};

const UNPROJECT_MAX_ITERS: usize = 100;
/// Convergence threshold in pixel units (the step is scaled by the focal
/// length before comparison).
const UNPROJECT_TOL_PX: f64 = 1e-8;
const UNPROJECT_DAMPING: f64 = 0.7;

/// Number of optimizable intrinsics per camera: fx, fy, cx, cy, k1..k4.
pub const INTRINSIC_PARAMS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CameraKind {
    PinholeDistorted,
    FisheyeEquidistant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub kind: CameraKind,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub distortion: [f64; 4],
}

/// Successful projection: continuous pixel coordinates plus the value used
/// by the depth test (z for pinhole, camera distance for fisheye).
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub uv: Vector2<f64>,
    pub z: f64,
}

impl CameraModel {
    pub fn new(
        kind: CameraKind,
        width: u32,
        height: u32,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        distortion: [f64; 4],
    ) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 || !fx.is_finite() || !fy.is_finite() {
            return Err(Error::InvalidArgument("focal lengths must be positive".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("image dimensions must be >= 1".into()));
        }
        if !cx.is_finite() || !cy.is_finite() || distortion.iter().any(|k| !k.is_finite()) {
            return Err(Error::NonFinite("camera intrinsics"));
        }
        Ok(CameraModel {
            kind,
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            distortion,
        })
    }

    pub fn pinhole(
        width: u32,
        height: u32,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        distortion: [f64; 4],
    ) -> Result<Self> {
        Self::new(CameraKind::PinholeDistorted, width, height, fx, fy, cx, cy, distortion)
    }

    pub fn fisheye(
        width: u32,
        height: u32,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        distortion: [f64; 4],
    ) -> Result<Self> {
        Self::new(CameraKind::FisheyeEquidistant, width, height, fx, fy, cx, cy, distortion)
    }

    fn radial_factor(&self, r2: f64) -> f64 {
        let [k1, k2, k3, k4] = self.distortion;
        1.0 + r2 * (k1 + r2 * (k2 + r2 * (k3 + r2 * k4)))
    }

    /// d(radial_factor * r2_arg) terms: derivative of the factor w.r.t. r2.
    fn radial_factor_dr2(&self, r2: f64) -> f64 {
        let [k1, k2, k3, k4] = self.distortion;
        k1 + r2 * (2.0 * k2 + r2 * (3.0 * k3 + r2 * 4.0 * k4))
    }

    /// theta_d = theta * (1 + k1 th^2 + k2 th^4 + k3 th^6 + k4 th^8)
    fn fisheye_theta_d(&self, theta: f64) -> f64 {
        let t2 = theta * theta;
        theta * self.radial_factor(t2)
    }

    fn fisheye_theta_d_deriv(&self, theta: f64) -> f64 {
        let [k1, k2, k3, k4] = self.distortion;
        let t2 = theta * theta;
        1.0 + t2 * (3.0 * k1 + t2 * (5.0 * k2 + t2 * (7.0 * k3 + t2 * 9.0 * k4)))
    }

    /// Projects a camera-space point. `None` is the behind-camera cull
    /// signal (pinhole: z <= 0; fisheye: point at the camera center or on
    /// the backward pole).
    pub fn project(&self, xc: &Vector3<f64>) -> Option<Projection> {
        match self.kind {
            CameraKind::PinholeDistorted => {
                let z = xc.z;
                if !(z > 1e-12) {
                    return None;
                }
                let xn = xc.x / z;
                let yn = xc.y / z;
                let f = self.radial_factor(xn * xn + yn * yn);
                Some(Projection {
                    uv: Vector2::new(self.fx * xn * f + self.cx, self.fy * yn * f + self.cy),
                    z,
                })
            }
            CameraKind::FisheyeEquidistant => {
                let dist = xc.norm();
                if dist < 1e-12 {
                    return None;
                }
                let rho = xc.x.hypot(xc.y);
                if rho < 1e-12 {
                    if xc.z < 0.0 {
                        // Backward pole: azimuth undefined.
                        return None;
                    }
                    return Some(Projection {
                        uv: Vector2::new(self.cx, self.cy),
                        z: dist,
                    });
                }
                let theta = rho.atan2(xc.z);
                let theta_d = self.fisheye_theta_d(theta);
                let s = theta_d / rho;
                Some(Projection {
                    uv: Vector2::new(self.fx * s * xc.x + self.cx, self.fy * s * xc.y + self.cy),
                    z: dist,
                })
            }
        }
    }

    /// Unit direction in camera space for continuous pixel coordinates.
    pub fn unproject(&self, uv: &Vector2<f64>) -> Result<Vector3<f64>> {
        let mx = (uv.x - self.cx) / self.fx;
        let my = (uv.y - self.cy) / self.fy;
        match self.kind {
            CameraKind::PinholeDistorted => {
                let focal = self.fx.max(self.fy);
                let target = Vector2::new(mx, my);
                let mut p = target;
                let mut converged = target.norm() == 0.0;
                for _ in 0..UNPROJECT_MAX_ITERS {
                    let f = self.radial_factor(p.norm_squared());
                    if f.abs() < 1e-12 {
                        break;
                    }
                    let next = target / f;
                    let step = next - p;
                    p += step * UNPROJECT_DAMPING;
                    if step.norm() * focal < UNPROJECT_TOL_PX {
                        converged = true;
                        break;
                    }
                }
                if !converged {
                    return Err(Error::Convergence(format!(
                        "distortion inversion at pixel ({:.2}, {:.2})",
                        uv.x, uv.y
                    )));
                }
                Ok(Vector3::new(p.x, p.y, 1.0).normalize())
            }
            CameraKind::FisheyeEquidistant => {
                let theta_d = mx.hypot(my);
                if theta_d < 1e-12 {
                    return Ok(Vector3::new(0.0, 0.0, 1.0));
                }
                let focal = self.fx.max(self.fy);
                let mut theta = theta_d;
                let mut converged = false;
                for _ in 0..UNPROJECT_MAX_ITERS {
                    let f = self.radial_factor(theta * theta);
                    if f.abs() < 1e-12 {
                        break;
                    }
                    let next = theta_d / f;
                    let step = next - theta;
                    theta += step * UNPROJECT_DAMPING;
                    if step.abs() * focal < UNPROJECT_TOL_PX {
                        converged = true;
                        break;
                    }
                }
                if !converged {
                    return Err(Error::Convergence(format!(
                        "fisheye angle inversion at pixel ({:.2}, {:.2})",
                        uv.x, uv.y
                    )));
                }
                let dir_x = mx / theta_d;
                let dir_y = my / theta_d;
                Ok(Vector3::new(
                    theta.sin() * dir_x,
                    theta.sin() * dir_y,
                    theta.cos(),
                ))
            }
        }
    }

    /// 2x3 Jacobian d(uv)/d(xc); `None` where the projection is undefined.
    pub fn projection_jacobian(&self, xc: &Vector3<f64>) -> Option<Matrix2x3<f64>> {
        match self.kind {
            CameraKind::PinholeDistorted => {
                let z = xc.z;
                if !(z > 1e-12) {
                    return None;
                }
                let inv_z = 1.0 / z;
                let xn = xc.x * inv_z;
                let yn = xc.y * inv_z;
                let r2 = xn * xn + yn * yn;
                let f = self.radial_factor(r2);
                let g = self.radial_factor_dr2(r2);
                // d(xd, yd)/d(xn, yn)
                let a = f + 2.0 * xn * xn * g;
                let b = 2.0 * xn * yn * g;
                let c = f + 2.0 * yn * yn * g;
                // d(xn, yn)/d(xc)
                let jn = Matrix2x3::new(inv_z, 0.0, -xn * inv_z, 0.0, inv_z, -yn * inv_z);
                let jd = nalgebra::Matrix2::new(a, b, b, c);
                let mut j = jd * jn;
                j.row_mut(0).scale_mut(self.fx);
                j.row_mut(1).scale_mut(self.fy);
                Some(j)
            }
            CameraKind::FisheyeEquidistant => {
                let rho = xc.x.hypot(xc.y);
                let d2 = xc.norm_squared();
                if d2 < 1e-24 {
                    return None;
                }
                if rho < 1e-9 {
                    if xc.z <= 0.0 {
                        return None;
                    }
                    // Small-angle limit reduces to the pinhole Jacobian.
                    let inv_z = 1.0 / xc.z;
                    return Some(Matrix2x3::new(
                        self.fx * inv_z,
                        0.0,
                        0.0,
                        0.0,
                        self.fy * inv_z,
                        0.0,
                    ));
                }
                let theta = rho.atan2(xc.z);
                let theta_d = self.fisheye_theta_d(theta);
                let dtheta_d = self.fisheye_theta_d_deriv(theta);
                let s = theta_d / rho;
                let drho = [xc.x / rho, xc.y / rho, 0.0];
                let dtheta = [
                    (xc.x / rho) * xc.z / d2,
                    (xc.y / rho) * xc.z / d2,
                    -rho / d2,
                ];
                let mut j = Matrix2x3::zeros();
                for q in 0..3 {
                    let ds = (dtheta_d * dtheta[q] * rho - theta_d * drho[q]) / (rho * rho);
                    j[(0, q)] = self.fx * (ds * xc.x + if q == 0 { s } else { 0.0 });
                    j[(1, q)] = self.fy * (ds * xc.y + if q == 1 { s } else { 0.0 });
                }
                Some(j)
            }
        }
    }

    /// 2x8 Jacobian d(uv)/d(fx, fy, cx, cy, k1, k2, k3, k4).
    pub fn intrinsics_jacobian(&self, xc: &Vector3<f64>) -> Option<SMatrix<f64, 2, 8>> {
        let mut j = SMatrix::<f64, 2, 8>::zeros();
        match self.kind {
            CameraKind::PinholeDistorted => {
                let z = xc.z;
                if !(z > 1e-12) {
                    return None;
                }
                let xn = xc.x / z;
                let yn = xc.y / z;
                let r2 = xn * xn + yn * yn;
                let f = self.radial_factor(r2);
                j[(0, 0)] = xn * f;
                j[(1, 1)] = yn * f;
                j[(0, 2)] = 1.0;
                j[(1, 3)] = 1.0;
                let mut pow = r2;
                for i in 0..4 {
                    j[(0, 4 + i)] = self.fx * xn * pow;
                    j[(1, 4 + i)] = self.fy * yn * pow;
                    pow *= r2;
                }
                Some(j)
            }
            CameraKind::FisheyeEquidistant => {
                let rho = xc.x.hypot(xc.y);
                if xc.norm_squared() < 1e-24 {
                    return None;
                }
                if rho < 1e-9 {
                    if xc.z <= 0.0 {
                        return None;
                    }
                    j[(0, 2)] = 1.0;
                    j[(1, 3)] = 1.0;
                    return Some(j);
                }
                let theta = rho.atan2(xc.z);
                let theta_d = self.fisheye_theta_d(theta);
                let ux = theta_d * xc.x / rho;
                let uy = theta_d * xc.y / rho;
                j[(0, 0)] = ux;
                j[(1, 1)] = uy;
                j[(0, 2)] = 1.0;
                j[(1, 3)] = 1.0;
                let mut pow = theta * theta * theta;
                for i in 0..4 {
                    j[(0, 4 + i)] = self.fx * (xc.x / rho) * pow;
                    j[(1, 4 + i)] = self.fy * (xc.y / rho) * pow;
                    pow *= theta * theta;
                }
                Some(j)
            }
        }
    }

    pub fn intrinsics_vec(&self) -> [f64; INTRINSIC_PARAMS] {
        [
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.distortion[0],
            self.distortion[1],
            self.distortion[2],
            self.distortion[3],
        ]
    }

    pub fn set_intrinsics_vec(&mut self, p: &[f64; INTRINSIC_PARAMS]) {
        self.fx = p[0];
        self.fy = p[1];
        self.cx = p[2];
        self.cy = p[3];
        self.distortion = [p[4], p[5], p[6], p[7]];
    }
}
