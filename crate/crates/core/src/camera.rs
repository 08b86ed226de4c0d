//! Pinhole cameras, orbit parameterization, and per-pixel ray generation.

use crate::error::{Error, Result};
use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

/// A single ray with unit-length direction.
#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Point3<f64>,
    pub dir: Vector3<f64>,
}

impl Ray {
    pub fn at(&self, t: f64) -> Point3<f64> {
        self.origin + self.dir * t
    }
}

/// Pinhole camera. `azimuth_deg`/`elevation_deg`/`distance` describe the
/// orbit pose that produced the camera and drive view scheduling and
/// pose-conditioned priors; the render geometry itself uses only
/// position/target/up/FOV/resolution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Camera {
    pub position: Point3<f64>,
    pub target: Point3<f64>,
    pub up: Vector3<f64>,
    /// Vertical field of view in degrees, exclusive range (0, 180).
    pub fov_y_deg: f64,
    pub width: usize,
    pub height: usize,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub distance: f64,
}

impl Camera {
    /// Camera on an orbit around `target`: azimuth 0° looks down the −z axis
    /// from +z, azimuth grows counterclockwise when seen from +y, elevation
    /// tilts toward +y. Up is the world +y axis.
    pub fn orbit(
        target: Point3<f64>,
        azimuth_deg: f64,
        elevation_deg: f64,
        distance: f64,
        fov_y_deg: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let dir = orbit_direction(azimuth_deg, elevation_deg);
        Camera {
            position: target + dir * distance,
            target,
            up: Vector3::y(),
            fov_y_deg,
            width,
            height,
            azimuth_deg,
            elevation_deg,
            distance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov_y_deg > 0.0 && self.fov_y_deg < 180.0) {
            return Err(Error::InvalidCamera(format!(
                "vertical FOV must lie in (0, 180) degrees, got {}",
                self.fov_y_deg
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("zero image resolution".into()));
        }
        let view = self.target - self.position;
        if view.norm() < 1e-12 {
            return Err(Error::InvalidCamera("position equals target".into()));
        }
        if self.up.cross(&view).norm() < 1e-9 {
            return Err(Error::InvalidCamera("up is parallel to the view direction".into()));
        }
        Ok(())
    }

    /// Orthonormal camera frame: forward toward the target, right, and true up.
    fn frame(&self) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let forward = (self.target - self.position).normalize();
        let right = forward.cross(&self.up).normalize();
        let up = right.cross(&forward);
        (forward, right, up)
    }

    /// Ray through the center of pixel (x, y); y runs downward in the image.
    pub fn pixel_ray(&self, x: usize, y: usize) -> Ray {
        let (forward, right, up) = self.frame();
        let tan_half = (self.fov_y_deg.to_radians() / 2.0).tan();
        let aspect = self.width as f64 / self.height as f64;
        let sx = ((x as f64 + 0.5) / self.width as f64 * 2.0 - 1.0) * tan_half * aspect;
        let sy = (1.0 - (y as f64 + 0.5) / self.height as f64 * 2.0) * tan_half;
        Ray {
            origin: self.position,
            dir: (forward + right * sx + up * sy).normalize(),
        }
    }

    /// One ray per pixel in row-major order (matches image buffer layout).
    pub fn generate_rays(&self) -> Result<Vec<Ray>> {
        self.validate()?;
        let mut rays = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                rays.push(self.pixel_ray(x, y));
            }
        }
        Ok(rays)
    }
}

/// Unit vector from the orbit target toward a camera at the given pose.
pub fn orbit_direction(azimuth_deg: f64, elevation_deg: f64) -> Vector3<f64> {
    let az = azimuth_deg.to_radians();
    let el = elevation_deg.to_radians();
    Vector3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos())
}
