//! Pinhole camera and per-pixel ray generation.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Pinhole camera with `x_cam = rotation * x_world + translation`, looking down `+z`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera<T: Real> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray<T: Real> {
    pub origin: Vector3<T>,
    pub direction: Vector3<T>,
    pub t_min: T,
    pub t_max: T,
}

impl<T: Real> Ray<T> {
    /// `direction` is normalized here.
    pub fn new(origin: Vector3<T>, direction: Vector3<T>, t_min: T, t_max: T) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
            t_min,
            t_max,
        }
    }

    #[inline]
    pub fn at(&self, t: T) -> Vector3<T> {
        self.origin + self.direction * t
    }
}

/// Bounding sphere of the scene used to clip rays.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneBounds<T: Real> {
    pub center: Vector3<T>,
    pub radius: T,
}

impl<T: Real> SceneBounds<T> {
    /// Ray parameter range inside the sphere, clamped to `t >= 0`.
    pub fn clip(&self, origin: &Vector3<T>, dir: &Vector3<T>) -> Option<(T, T)> {
        let oc = origin - self.center;
        let b = oc.dot(dir);
        let c = oc.norm_squared() - self.radius * self.radius;
        let disc = b * b - c;
        if disc < T::zero() {
            return None;
        }
        let s = disc.sqrt();
        let t0 = (-b - s).max(T::zero());
        let t1 = -b + s;
        (t1 > t0).then_some((t0, t1))
    }
}

impl<T: Real> Camera<T> {
    pub fn new(
        rotation: Matrix3<T>,
        translation: Vector3<T>,
        focal: (T, T),
        principal: (T, T),
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            rotation,
            translation,
            fx: focal.0,
            fy: focal.1,
            cx: principal.0,
            cy: principal.1,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(Error::Invalid("camera focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invalid("camera resolution must be positive".into()));
        }
        if !crate::rotation::is_rotation(&self.rotation, 1e-5) {
            return Err(Error::Invalid("camera rotation is not a rotation".into()));
        }
        Ok(())
    }

    /// Camera looking from `eye` towards `target`, image `y` pointing along `-up`.
    pub fn look_at(
        eye: Vector3<T>,
        target: Vector3<T>,
        up: Vector3<T>,
        fov_y: T,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        let f = T::of_usize(height) / (T::lit(2.0) * (fov_y / T::lit(2.0)).tan());
        Self::new(
            rotation,
            translation,
            (f, f),
            (T::of_usize(width) / T::lit(2.0), T::of_usize(height) / T::lit(2.0)),
            width,
            height,
        )
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<T> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    /// Pixel coordinates (continuous, pixel centers at `+0.5`) and depth.
    pub fn project(&self, p: &Vector3<T>) -> Option<(Vector2<T>, T)> {
        let c = self.to_camera(p);
        if c.z <= T::lit(1e-12) {
            return None;
        }
        Some((
            Vector2::new(self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy),
            c.z,
        ))
    }

    /// Unit world-space direction through continuous pixel coordinate `(u, v)`.
    pub fn direction(&self, u: T, v: T) -> Vector3<T> {
        let d = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, T::one());
        (self.rotation.transpose() * d).normalize()
    }

    /// Ray through the center of pixel `(px, py)`, clipped to `bounds` when given.
    ///
    /// A ray that misses the bounds gets an empty `[0, 0]` range.
    pub fn pixel_ray(&self, px: usize, py: usize, bounds: Option<&SceneBounds<T>>) -> Ray<T> {
        let half = T::lit(0.5);
        let dir = self.direction(T::of_usize(px) + half, T::of_usize(py) + half);
        let origin = self.center();
        let (t_min, t_max) = match bounds {
            Some(b) => b.clip(&origin, &dir).unwrap_or((T::zero(), T::zero())),
            None => (T::zero(), T::max_value().unwrap()),
        };
        Ray {
            origin,
            direction: dir,
            t_min,
            t_max,
        }
    }

    /// One ray per pixel in row-major order.
    pub fn generate_rays(&self, bounds: Option<&SceneBounds<T>>) -> Vec<Ray<T>> {
        (0..self.height)
            .flat_map(|py| (0..self.width).map(move |px| (px, py)))
            .map(|(px, py)| self.pixel_ray(px, py, bounds))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> Camera<U> {
        Camera {
            rotation: self.rotation.map(|x| U::lit(x.as_f64())),
            translation: self.translation.map(|x| U::lit(x.as_f64())),
            fx: U::lit(self.fx.as_f64()),
            fy: U::lit(self.fy.as_f64()),
            cx: U::lit(self.cx.as_f64()),
            cy: U::lit(self.cy.as_f64()),
            width: self.width,
            height: self.height,
        }
    }

    pub fn to_json(&self) -> CameraJson {
        let r = self.rotation;
        CameraJson {
            rotation: (0..3)
                .flat_map(|i| (0..3).map(move |j| r[(i, j)].as_f64()))
                .collect(),
            translation: self.translation.iter().map(|x| x.as_f64()).collect(),
            fx: self.fx.as_f64(),
            fy: self.fy.as_f64(),
            cx: self.cx.as_f64(),
            cy: self.cy.as_f64(),
            width: self.width,
            height: self.height,
        }
    }

    pub fn from_json(j: &CameraJson) -> Result<Self> {
        if j.rotation.len() != 9 || j.translation.len() != 3 {
            return Err(Error::Shape(
                "camera json needs 9 rotation and 3 translation entries".into(),
            ));
        }
        let rotation = Matrix3::from_row_iterator(j.rotation.iter().map(|&x| T::lit(x)));
        let translation = Vector3::from_iterator(j.translation.iter().map(|&x| T::lit(x)));
        Self::new(
            rotation,
            translation,
            (T::lit(j.fx), T::lit(j.fy)),
            (T::lit(j.cx), T::lit(j.cy)),
            j.width,
            j.height,
        )
    }
}

/// On-disk camera: rotation is row-major world-to-camera.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CameraJson {
    pub rotation: Vec<f64>,
    pub translation: Vec<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}
