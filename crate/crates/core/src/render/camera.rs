use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RESOLUTION: usize = 512;

/// Side length of the square region framed by the planar camera, centered on
/// the unit square, so moderate edits stay in view.
pub const PLANAR_FRAME_EXTENT: f64 = 1.2;

/// Orbit distance and vertical field of view of the four canonical views.
pub const ORBIT_DISTANCE: f64 = 2.5;
pub const ORBIT_FOV_DEG: f64 = 40.0;

const NEAR_PLANE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Projection {
    /// Pinhole; `focal` in pixels.
    Perspective { focal: f64, cx: f64, cy: f64 },
    /// Parallel projection; `scale` in pixels per world unit.
    Orthographic { scale: f64, cx: f64, cy: f64 },
}

/// World-to-camera rigid transform plus intrinsics. Camera space has x to
/// the right, y down and z pointing into the scene; pixel `(0, 0)` is the
/// top-left corner of the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub projection: Projection,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    Planar,
    FourView,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig(format!(
                "camera resolution must be positive, got {}x{}",
                self.width, self.height
            )));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        if err > 1e-10 || self.rotation.determinant() < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "camera rotation is not a proper orthonormal matrix (error {err:e})"
            )));
        }
        let ok = match self.projection {
            Projection::Perspective { focal, .. } => focal > 0.0,
            Projection::Orthographic { scale, .. } => scale > 0.0,
        };
        if !ok {
            return Err(Error::InvalidConfig("camera focal length / scale must be positive".into()));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target` with `up` pointing toward the top
    /// of the image.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        projection: Projection,
        width: usize,
        height: usize,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Self {
            rotation,
            translation: -(rotation * eye),
            projection,
            width,
            height,
        }
    }

    /// Orthographic camera looking down −z at the unit square `[0, 1]²`.
    pub fn planar(resolution: usize) -> Self {
        let r = resolution as f64;
        Self::look_at(
            Vector3::new(0.5, 0.5, 1.0),
            Vector3::new(0.5, 0.5, 0.0),
            Vector3::y(),
            Projection::Orthographic {
                scale: r / PLANAR_FRAME_EXTENT,
                cx: r / 2.0,
                cy: r / 2.0,
            },
            resolution,
            resolution,
        )
    }

    pub fn to_camera_space(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Pixel position and depth, or `None` behind the near plane.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
        let q = self.to_camera_space(p);
        match self.projection {
            Projection::Perspective { focal, cx, cy } => {
                if q.z <= NEAR_PLANE {
                    return None;
                }
                Some((Vector2::new(focal * q.x / q.z + cx, focal * q.y / q.z + cy), q.z))
            }
            Projection::Orthographic { scale, cx, cy } => {
                Some((Vector2::new(scale * q.x + cx, scale * q.y + cy), q.z))
            }
        }
    }

    /// Derivative of the pixel position with respect to the world point.
    pub fn screen_jacobian(&self, p: &Vector3<f64>) -> Matrix2x3<f64> {
        let q = self.to_camera_space(p);
        let d = match self.projection {
            Projection::Perspective { focal, .. } => Matrix2x3::new(
                focal / q.z,
                0.0,
                -focal * q.x / (q.z * q.z),
                0.0,
                focal / q.z,
                -focal * q.y / (q.z * q.z),
            ),
            Projection::Orthographic { scale, .. } => {
                Matrix2x3::new(scale, 0.0, 0.0, 0.0, scale, 0.0)
            }
        };
        d * self.rotation
    }
}

/// `Planar`: one orthographic view of the unit square. `FourView`: front,
/// right, back and left perspective views on the equator (azimuths 0°, 90°,
/// 180°, 270°) looking at the origin.
pub fn canonical_cameras(mode: ViewMode, resolution: usize) -> Vec<Camera> {
    match mode {
        ViewMode::Planar => vec![Camera::planar(resolution)],
        ViewMode::FourView => {
            let r = resolution as f64;
            let focal = (r / 2.0) / (ORBIT_FOV_DEG.to_radians() / 2.0).tan();
            (0..4)
                .map(|k| {
                    let az = (k as f64 * 90.0).to_radians();
                    let eye = Vector3::new(az.sin(), 0.0, az.cos()) * ORBIT_DISTANCE;
                    Camera::look_at(
                        eye,
                        Vector3::zeros(),
                        Vector3::y(),
                        Projection::Perspective {
                            focal,
                            cx: r / 2.0,
                            cy: r / 2.0,
                        },
                        resolution,
                        resolution,
                    )
                })
                .collect()
        }
    }
}

/// Azimuth of a camera's position around the y axis, in degrees `[0, 360)`.
pub fn camera_azimuth_deg(camera: &Camera) -> f64 {
    let eye = -(camera.rotation.transpose() * camera.translation);
    eye.x.atan2(eye.z).to_degrees().rem_euclid(360.0)
}
