//! Calibrated pinhole camera and planar screen.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::so3;

const DEFAULT_SCENE: &str = include_str!("../configs/default_scene.toml");

/// Ray with a unit direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub dir: Vector3<f64>,
}

/// Pinhole camera without distortion. `rotation`/`translation` map camera
/// coordinates (x right, y down, z forward) to world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub width: usize,
    pub height: usize,
    pub focal: [f64; 2],
    pub principal_point: [f64; 2],
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal[0] > 0.0 && self.focal[1] > 0.0) {
            return Err(Error::InvalidScene("focal lengths must be positive".into()));
        }
        let [cx, cy] = self.principal_point;
        if !(cx >= 0.0 && cx <= self.width as f64 && cy >= 0.0 && cy <= self.height as f64) {
            return Err(Error::InvalidScene("principal point outside the image".into()));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        so3::exp_f64(&self.rotation)
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    /// Same camera resampled to a `width x height` image covering the same
    /// field of view.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            width,
            height,
            focal: [self.focal[0] * sx, self.focal[1] * sy],
            principal_point: [self.principal_point[0] * sx, self.principal_point[1] * sy],
            ..self.clone()
        }
    }

    /// Projects a world point to continuous pixel coordinates.
    pub fn project(&self, p: &Vector3<f64>) -> Option<[f64; 2]> {
        let pc = self.rotation_matrix().transpose() * (p - self.center());
        if pc.z <= 0.0 {
            return None;
        }
        Some([
            self.focal[0] * pc.x / pc.z + self.principal_point[0],
            self.focal[1] * pc.y / pc.z + self.principal_point[1],
        ])
    }
}

/// Ray from the camera center through continuous pixel coordinate `p`.
/// Pixel `(x, y)` of an image has its center at `(x + 0.5, y + 0.5)`.
pub fn pixel_ray(camera: &CameraModel, p: [f64; 2]) -> Ray {
    let d = Vector3::new(
        (p[0] - camera.principal_point[0]) / camera.focal[0],
        (p[1] - camera.principal_point[1]) / camera.focal[1],
        1.0,
    );
    Ray {
        origin: camera.center(),
        dir: (camera.rotation_matrix() * d).normalize(),
    }
}

/// Rectangular screen spanned by half-extent vectors. A plane point
/// `center + u * basis_u + v * basis_v` is on the physical screen iff
/// `|u| <= 1` and `|v| <= 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenModel {
    pub center: [f64; 3],
    pub basis_u: [f64; 3],
    pub basis_v: [f64; 3],
    /// Pixels along `basis_u` and `basis_v`.
    pub resolution: [usize; 2],
}

/// Ray/screen-plane intersection in normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScreenHit {
    pub uv: [f64; 2],
    /// Signed ray parameter of the intersection.
    pub distance: f64,
    /// Intersection lies in front of the ray origin.
    pub hit: bool,
}

impl ScreenHit {
    pub fn on_screen(&self) -> bool {
        self.hit && self.uv[0].abs() <= 1.0 && self.uv[1].abs() <= 1.0
    }
}

impl ScreenModel {
    pub fn validate(&self) -> Result<()> {
        let (u, v) = (Vector3::from(self.basis_u), Vector3::from(self.basis_v));
        if u.dot(&v).abs() > 1e-9 {
            return Err(Error::InvalidScene("screen basis vectors are not orthogonal".into()));
        }
        if u.norm() == 0.0 || v.norm() == 0.0 {
            return Err(Error::InvalidScene("screen has zero extent".into()));
        }
        Ok(())
    }

    pub fn normal(&self) -> Vector3<f64> {
        Vector3::from(self.basis_u)
            .cross(&Vector3::from(self.basis_v))
            .normalize()
    }

    /// World point of normalized coordinate `uv`.
    pub fn point(&self, uv: [f64; 2]) -> Vector3<f64> {
        Vector3::from(self.center)
            + Vector3::from(self.basis_u) * uv[0]
            + Vector3::from(self.basis_v) * uv[1]
    }

    /// Normalized coordinates of a world point on (or projected onto) the plane.
    pub fn normalized(&self, p: &Vector3<f64>) -> [f64; 2] {
        let (u, v) = (Vector3::from(self.basis_u), Vector3::from(self.basis_v));
        let d = p - Vector3::from(self.center);
        [d.dot(&u) / u.norm_squared(), d.dot(&v) / v.norm_squared()]
    }
}

/// Intersects a ray with the screen plane. `None` when the ray is parallel
/// to the plane.
pub fn intersect_screen(screen: &ScreenModel, ray: &Ray) -> Option<ScreenHit> {
    let n = screen.normal();
    let denom = ray.dir.dot(&n);
    if denom.abs() < 1e-12 {
        return None;
    }
    let distance = (Vector3::from(screen.center) - ray.origin).dot(&n) / denom;
    let q = ray.origin + ray.dir * distance;
    Some(ScreenHit {
        uv: screen.normalized(&q),
        distance,
        hit: distance > 0.0,
    })
}

/// Camera, screen and nominal working distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub working_distance: f64,
    pub camera: CameraModel,
    pub screen: ScreenModel,
}

fn default_version() -> u32 {
    1
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        self.screen.validate()?;
        let off = (self.camera.center() - Vector3::from(self.screen.center)).dot(&self.screen.normal());
        if off.abs() < 1e-9 {
            return Err(Error::InvalidScene("camera center lies in the screen plane".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let scene: Self = toml::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, toml::to_string(self)?)?;
        Ok(())
    }

    /// Copy of the scene with the camera image resampled.
    pub fn with_resolution(&self, width: usize, height: usize) -> Self {
        Self {
            camera: self.camera.resized(width, height),
            ..self.clone()
        }
    }
}

/// The shipped synthetic rig (`configs/default_scene.toml`).
pub fn default_scene() -> SceneConfig {
    SceneConfig::from_toml(DEFAULT_SCENE).expect("shipped scene file is valid")
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;

    #[test]
    fn principal_point_ray_is_optical_axis() {
        let scene = default_scene();
        let cam = &scene.camera;
        let r = pixel_ray(cam, cam.principal_point);
        let axis = cam.rotation_matrix().column(2).into_owned();
        assert_relative_eq!(r.dir, axis, epsilon = 1e-15);
    }

    #[test]
    fn ray_at_one_focal_length_is_45_degrees() {
        let cam = default_scene().camera;
        let [cx, cy] = cam.principal_point;
        let r = pixel_ray(&cam, [cx + cam.focal[0], cy]);
        let axis = cam.rotation_matrix().column(2).into_owned();
        let xaxis = cam.rotation_matrix().column(0).into_owned();
        assert_relative_eq!(r.dir.angle(&axis), std::f64::consts::FRAC_PI_4, epsilon = 1e-12);
        // stays in the camera x-z plane
        let yaxis = cam.rotation_matrix().column(1).into_owned();
        assert!(r.dir.dot(&yaxis).abs() < 1e-15);
        assert!(r.dir.dot(&xaxis) > 0.0);
    }

    #[test]
    fn rays_are_unit_length() {
        let cam = default_scene().camera;
        for p in [[0.0, 0.0], [511.3, 17.9], [100.25, 400.5]] {
            assert!((pixel_ray(&cam, p).dir.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn screen_center_and_edge_hits() {
        let screen = default_scene().screen;
        let n = screen.normal();
        let c = Vector3::from(screen.center);
        let ray = Ray { origin: c + n * 10.0, dir: -n };
        let hit = intersect_screen(&screen, &ray).unwrap();
        assert!(hit.hit);
        assert!(hit.uv[0].abs() < 1e-12 && hit.uv[1].abs() < 1e-12);

        let target = c + Vector3::from(screen.basis_u);
        let origin = c + n * 30.0;
        let ray = Ray { origin, dir: (target - origin).normalize() };
        let hit = intersect_screen(&screen, &ray).unwrap();
        assert_relative_eq!(hit.uv[0], 1.0, epsilon = 1e-12);
        assert!(hit.uv[1].abs() < 1e-12);

        let away = Ray { origin: c + n * 10.0, dir: n };
        assert!(!intersect_screen(&screen, &away).unwrap().hit);

        let parallel = Ray { origin: c + n, dir: Vector3::from(screen.basis_u).normalize() };
        assert!(intersect_screen(&screen, &parallel).is_none());
    }

    #[test]
    fn default_scene_geometry() {
        let scene = default_scene();
        assert_relative_eq!(scene.camera.center().norm(), 80.0, epsilon = 1e-9);
        // optical axis passes through the eye center
        let r = pixel_ray(&scene.camera, scene.camera.principal_point);
        let closest = r.origin - r.dir * r.origin.dot(&r.dir);
        assert!(closest.norm() < 1e-9);
        let mut res = scene.screen.resolution;
        res.sort();
        assert_eq!(res, [1170, 2532]);
        // 2532 x 1170 at 460 ppi
        let bu = Vector3::from(scene.screen.basis_u).norm();
        assert_relative_eq!(2.0 * bu, 2532.0 / 460.0 * 25.4, epsilon = 1e-9);
    }

    #[test]
    fn normalized_coordinates_are_affine() {
        let screen = default_scene().screen;
        let p = screen.point([0.3, -0.2]);
        let q = p + Vector3::from(screen.basis_u);
        let (a, b) = (screen.normalized(&p), screen.normalized(&q));
        assert_relative_eq!(b[0] - a[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(b[1], a[1], epsilon = 1e-12);
    }

    #[test]
    fn plane_round_trip_reproduces_pixel() {
        let scene = default_scene();
        let cam = &scene.camera;
        // A ray straight from the camera to the screen plane.
        for px in [[10.5, 20.5], [300.0, 41.0], [256.0, 256.0]] {
            let ray = pixel_ray(cam, px);
            let Some(hit) = intersect_screen(&scene.screen, &ray) else { continue };
            let world = scene.screen.point(hit.uv);
            if hit.hit {
                let back = cam.project(&world).unwrap();
                assert!((back[0] - px[0]).abs() < 1e-9 && (back[1] - px[1]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn resized_camera_keeps_field_of_view() {
        let cam = default_scene().camera;
        let small = cam.resized(128, 128);
        let a = pixel_ray(&cam, [0.0, 0.0]);
        let b = pixel_ray(&small, [0.0, 0.0]);
        assert_relative_eq!(a.dir, b.dir, epsilon = 1e-14);
    }

    #[test]
    fn scene_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.toml");
        let s = default_scene();
        s.save(&path).unwrap();
        assert_eq!(SceneConfig::load(&path).unwrap(), s);
    }
}
