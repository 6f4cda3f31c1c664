use serde::{Deserialize, Serialize};

use super::{GeometryError, Matrix3, Point2, Point3, Vector3};

/// Pinhole camera with square pixels, zero skew and the principal point at
/// the image centre.
///
/// `rotation` and `translation` map world coordinates into the camera frame:
/// `x_cam = rotation * x_world + translation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pinhole {
    pub rotation: Matrix3,
    pub translation: Vector3,
    /// Focal length in pixels.
    pub focal: f64,
    pub width: u32,
    pub height: u32,
}

impl Pinhole {
    pub fn new(
        rotation: Matrix3,
        translation: Vector3,
        focal: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        if !is_rotation(&rotation, 1e-9) {
            return Err(GeometryError::NotARotation);
        }
        if !(focal > 0.0 && focal.is_finite()) {
            return Err(GeometryError::InvalidCamera(
                "focal length must be positive",
            ));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidCamera("image size must be non-zero"));
        }
        if !translation.iter().all(|t| t.is_finite()) {
            return Err(GeometryError::InvalidCamera("translation must be finite"));
        }
        Ok(Self {
            rotation,
            translation,
            focal,
            width,
            height,
        })
    }

    /// Camera placed at `eye`, looking at `target`, with image-up roughly
    /// along `up`.
    pub fn look_at(
        eye: Point3,
        target: Point3,
        up: Vector3,
        focal: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let z = (target - eye)
            .try_normalize(1e-12)
            .ok_or(GeometryError::InvalidCamera("eye and target coincide"))?;
        let x = z
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or(GeometryError::InvalidCamera(
                "up vector parallel to view direction",
            ))?;
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye.coords);
        Self::new(rotation, translation, focal, width, height)
    }

    pub fn principal_point(&self) -> Point2 {
        Point2::new(self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    /// Optical centre in world coordinates.
    pub fn center(&self) -> Point3 {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }

    pub fn to_camera(&self, p: &Point3) -> Vector3 {
        self.rotation * p.coords + self.translation
    }

    pub fn project(&self, p: &Point3) -> Result<Point2, GeometryError> {
        let c = self.to_camera(p);
        if c.z <= 0.0 {
            return Err(GeometryError::NonPositiveDepth { depth: c.z });
        }
        Ok(self.project_camera_point(&c))
    }

    /// Projects a point already expressed in the camera frame. No depth check.
    #[inline]
    pub(crate) fn project_camera_point(&self, c: &Vector3) -> Point2 {
        let pp = self.principal_point();
        Point2::new(pp.x + self.focal * c.x / c.z, pp.y + self.focal * c.y / c.z)
    }

    pub fn backproject_ray(&self, f: &Point2) -> Ray {
        let pp = self.principal_point();
        let d_cam = Vector3::new((f.x - pp.x) / self.focal, (f.y - pp.y) / self.focal, 1.0);
        Ray {
            origin: self.center(),
            dir: (self.rotation.transpose() * d_cam).normalize(),
        }
    }
}

/// Half-line with a unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Point3,
    pub dir: Vector3,
}

impl Ray {
    pub fn distance_to(&self, p: &Point3) -> f64 {
        point_to_ray_distance_mm(p, &self.origin, &self.dir)
    }
}

pub fn project(camera: &Pinhole, p: &Point3) -> Result<Point2, GeometryError> {
    camera.project(p)
}

pub fn backproject_ray(camera: &Pinhole, f: &Point2) -> Ray {
    camera.backproject_ray(f)
}

/// Perpendicular distance from `p` to the infinite line through `origin`
/// along the unit vector `dir`.
pub fn point_to_ray_distance_mm(p: &Point3, origin: &Point3, dir: &Vector3) -> f64 {
    let w = p - origin;
    // |w x d| is better conditioned than |w - (w.d) d| when p is far away.
    w.cross(dir).norm()
}

pub fn is_rotation(m: &Matrix3, tol: f64) -> bool {
    if !m.iter().all(|x| x.is_finite()) {
        return false;
    }
    let err = (m.transpose() * m - Matrix3::identity()).abs().max();
    err <= tol && (m.determinant() - 1.0).abs() <= tol
}

/// Geodesic angle between two rotations, in degrees, in `[0, 180]`.
pub fn rotation_angle_deg(a: &Matrix3, b: &Matrix3) -> Result<f64, GeometryError> {
    if !is_rotation(a, 1e-6) || !is_rotation(b, 1e-6) {
        return Err(GeometryError::NotARotation);
    }
    let r = a.transpose() * b;
    let cos = (r.trace() - 1.0) / 2.0;
    let sin = 0.5
        * Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        )
        .norm();
    Ok(sin.atan2(cos).to_degrees())
}

/// Rotation matrix for a right-handed rotation of `angle_rad` about `axis`.
pub fn rotation_about(axis: &Vector3, angle_rad: f64) -> Matrix3 {
    let unit = nalgebra::Unit::new_normalize(*axis);
    *nalgebra::Rotation3::from_axis_angle(&unit, angle_rad).matrix()
}
