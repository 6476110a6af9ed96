//! Parametric eye surface: a stack of circular edge loops around the optical
//! axis, seeded from two intersecting spheres (sclera and cornea).
//!
//! Local frame: the sclera sphere is centered at the origin and the optical
//! axis is `+z`, pointing out through the cornea apex.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::autodiff::{v3, Real};
use crate::error::{Error, Result};
use crate::so3;

/// Default sclera sphere radius (mm).
pub const SCLERA_RADIUS: f64 = 12.0;
/// Default cornea sphere radius (mm).
pub const CORNEA_RADIUS: f64 = 8.0;
/// Default distance between the sphere centers (mm).
pub const SPHERE_CENTER_OFFSET: f64 = 6.0;
/// Default number of edge loops and of vertices per loop.
pub const DEFAULT_LOOPS: usize = 100;
pub const DEFAULT_VERTICES_PER_LOOP: usize = 100;
/// Lower end of the meshed band as a fraction of the sclera radius.
pub const DEFAULT_BAND_FRACTION: f64 = 0.2;

/// Rotationally symmetric eye surface described by its edge loops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EyeShape {
    pub loop_radii: Vec<f64>,
    pub loop_heights: Vec<f64>,
    pub vertices_per_loop: usize,
    pub sclera_radius: f64,
    pub cornea_radius: f64,
    pub sphere_center_offset: f64,
}

impl EyeShape {
    /// Two-sphere profile sampled into `n_loops` edge loops over
    /// `z >= band_min_z`. The limbus (sphere intersection) is always an edge
    /// loop; loops are uniformly spaced on each side of it.
    pub fn two_sphere(
        sclera_radius: f64,
        cornea_radius: f64,
        sphere_center_offset: f64,
        n_loops: usize,
        vertices_per_loop: usize,
        band_min_z: f64,
    ) -> Result<Self> {
        let (rs, rc, d) = (sclera_radius, cornea_radius, sphere_center_offset);
        if !(d > (rs - rc).abs() && d < rs + rc) {
            return Err(Error::InvalidShape(
                "sclera and cornea spheres do not intersect".into(),
            ));
        }
        if d + rc <= rs {
            return Err(Error::InvalidShape("cornea does not protrude".into()));
        }
        if n_loops < 3 || vertices_per_loop < 3 {
            return Err(Error::InvalidShape("need at least 3 loops and 3 vertices".into()));
        }
        let limbus = limbus_height(rs, rc, d);
        let apex = d + rc;
        if !(band_min_z > -rs && band_min_z < limbus) {
            return Err(Error::InvalidShape("band start outside the sclera".into()));
        }
        // n_loops loops plus the apex split the band into n_loops intervals.
        let span = apex - band_min_z;
        let sclera_intervals = (((limbus - band_min_z) / span) * n_loops as f64)
            .round()
            .clamp(1.0, (n_loops - 2) as f64) as usize;
        let cornea_intervals = n_loops - sclera_intervals;
        let hs = (limbus - band_min_z) / sclera_intervals as f64;
        let hc = (apex - limbus) / cornea_intervals as f64;

        let mut heights = Vec::with_capacity(n_loops);
        for k in 0..sclera_intervals {
            heights.push(band_min_z + k as f64 * hs);
        }
        heights.push(limbus);
        for k in 1..cornea_intervals {
            heights.push(limbus + k as f64 * hc);
        }
        debug_assert_eq!(heights.len(), n_loops);

        let radii = heights
            .iter()
            .enumerate()
            .map(|(j, &z)| {
                if j == sclera_intervals {
                    // exact limbus radius from the sclera side
                    (rs * rs - z * z).max(0.0).sqrt()
                } else if z < limbus {
                    (rs * rs - z * z).max(0.0).sqrt()
                } else {
                    (rc * rc - (z - d) * (z - d)).max(0.0).sqrt()
                }
            })
            .collect();

        let shape = Self {
            loop_radii: radii,
            loop_heights: heights,
            vertices_per_loop,
            sclera_radius: rs,
            cornea_radius: rc,
            sphere_center_offset: d,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn num_loops(&self) -> usize {
        self.loop_radii.len()
    }

    /// Height of the synthetic apex vertex closing the frontal cap.
    pub fn apex_height(&self) -> f64 {
        self.sphere_center_offset + self.cornea_radius
    }

    /// Whether the mesh closes with a synthetic apex vertex.
    pub fn has_apex(&self) -> bool {
        self.loop_radii.last().is_some_and(|&r| r > 0.0)
    }

    /// Height of the intersection circle of the generating spheres.
    pub fn limbus_height(&self) -> f64 {
        limbus_height(self.sclera_radius, self.cornea_radius, self.sphere_center_offset)
    }

    /// Loops in the frontal part of the eye (`c_j >= 0`): the ones whose
    /// radii are optimized and regularized.
    pub fn frontal_loops(&self) -> std::ops::Range<usize> {
        let first = self
            .loop_heights
            .iter()
            .position(|&c| c >= 0.0)
            .unwrap_or(self.num_loops());
        first..self.num_loops()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_loops();
        if n < 3 || self.vertices_per_loop < 3 {
            return Err(Error::InvalidShape("need N >= 3 loops and H >= 3 vertices".into()));
        }
        if self.loop_heights.len() != n {
            return Err(Error::InvalidShape("radii and heights differ in length".into()));
        }
        if self.loop_heights.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidShape("loop heights must be strictly increasing".into()));
        }
        if self
            .loop_radii
            .iter()
            .any(|&r| !(r >= 0.0 && r <= self.sclera_radius))
        {
            return Err(Error::InvalidShape("loop radii must lie in [0, sclera radius]".into()));
        }
        if self.has_apex() && self.apex_height() <= self.loop_heights[n - 1] {
            return Err(Error::InvalidShape("apex must lie above the last loop".into()));
        }
        Ok(())
    }

    /// `(r_j cos(2 pi i / H), r_j sin(2 pi i / H), c_j)`.
    pub fn loop_vertex(&self, j: usize, i: usize) -> [f64; 3] {
        assert!(j < self.num_loops(), "loop index {j} out of range");
        assert!(i < self.vertices_per_loop, "vertex index {i} out of range");
        let (s, c) = loop_angle(i, self.vertices_per_loop).sin_cos();
        let r = self.loop_radii[j];
        [r * c, r * s, self.loop_heights[j]]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let shape: Self = toml::from_str(&text)?;
        shape.validate()?;
        Ok(shape)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, toml::to_string(self)?)?;
        Ok(())
    }
}

/// Base eye: 12 mm sclera, 8 mm cornea, centers 6 mm apart, 100 x 100 loops.
pub fn base_shape() -> EyeShape {
    EyeShape::two_sphere(
        SCLERA_RADIUS,
        CORNEA_RADIUS,
        SPHERE_CENTER_OFFSET,
        DEFAULT_LOOPS,
        DEFAULT_VERTICES_PER_LOOP,
        -DEFAULT_BAND_FRACTION * SCLERA_RADIUS,
    )
    .expect("default eye parameters are valid")
}

pub fn limbus_height(sclera_radius: f64, cornea_radius: f64, offset: f64) -> f64 {
    (sclera_radius * sclera_radius - cornea_radius * cornea_radius + offset * offset)
        / (2.0 * offset)
}

#[inline]
pub(crate) fn loop_angle(i: usize, h: usize) -> f64 {
    2.0 * PI * i as f64 / h as f64
}

/// Reference to a mesh vertex by its structured position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum VRef {
    Loop(usize, usize),
    Apex,
}

/// Structured topology of an edge-loop mesh.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoopTopology {
    pub loops: usize,
    pub per_loop: usize,
    pub apex: bool,
}

impl LoopTopology {
    pub fn of(shape: &EyeShape) -> Self {
        Self {
            loops: shape.num_loops(),
            per_loop: shape.vertices_per_loop,
            apex: shape.has_apex(),
        }
    }

    pub fn vertex_index(&self, j: usize, i: usize) -> usize {
        j * self.per_loop + i % self.per_loop
    }

    pub fn apex_index(&self) -> usize {
        self.loops * self.per_loop
    }

    pub fn num_vertices(&self) -> usize {
        self.loops * self.per_loop + usize::from(self.apex)
    }

    pub fn num_faces(&self) -> usize {
        2 * self.per_loop * (self.loops - 1) + if self.apex { self.per_loop } else { 0 }
    }

    fn index(&self, v: VRef) -> usize {
        match v {
            VRef::Loop(j, i) => self.vertex_index(j, i),
            VRef::Apex => self.apex_index(),
        }
    }

    /// The two triangles of the quad between loops `j` and `j + 1`
    /// starting at vertex `i`, wound outward.
    pub(crate) fn strip_faces(&self, j: usize, i: usize) -> [[VRef; 3]; 2] {
        let h = self.per_loop;
        let a = VRef::Loop(j, i % h);
        let b = VRef::Loop(j, (i + 1) % h);
        let c = VRef::Loop(j + 1, (i + 1) % h);
        let d = VRef::Loop(j + 1, i % h);
        [[a, b, c], [a, c, d]]
    }

    pub(crate) fn fan_face(&self, i: usize) -> [VRef; 3] {
        let h = self.per_loop;
        let j = self.loops - 1;
        [VRef::Loop(j, i % h), VRef::Loop(j, (i + 1) % h), VRef::Apex]
    }

    /// Face `f` in the same order [`build_mesh`] emits them.
    pub(crate) fn face(&self, f: usize) -> [VRef; 3] {
        let strip = 2 * self.per_loop * (self.loops - 1);
        if f < strip {
            let q = f / 2;
            self.strip_faces(q / self.per_loop, q % self.per_loop)[f % 2]
        } else {
            self.fan_face(f - strip)
        }
    }

    /// Lowest loop touched by face `f`.
    pub fn face_base_loop(&self, f: usize) -> usize {
        let strip = 2 * self.per_loop * (self.loops - 1);
        if f < strip {
            f / (2 * self.per_loop)
        } else {
            self.loops - 1
        }
    }

    /// Faces incident to vertex `(j, i)`.
    pub(crate) fn incident_faces(&self, j: usize, i: usize) -> Vec<[VRef; 3]> {
        let h = self.per_loop;
        let me = VRef::Loop(j, i % h);
        let mut out = Vec::with_capacity(6);
        let prev = (i + h - 1) % h;
        for jj in [j.wrapping_sub(1), j] {
            if jj >= self.loops - 1 {
                continue;
            }
            for ii in [prev, i % h] {
                for tri in self.strip_faces(jj, ii) {
                    if tri.contains(&me) {
                        out.push(tri);
                    }
                }
            }
        }
        if self.apex && j == self.loops - 1 {
            for ii in [prev, i % h] {
                let tri = self.fan_face(ii);
                if tri.contains(&me) {
                    out.push(tri);
                }
            }
        }
        out
    }
}

/// Position of a structured vertex given loop radii as [`Real`] values.
#[inline]
pub(crate) fn vertex_position<T: Real>(
    shape: &EyeShape,
    radius: &impl Fn(usize) -> T,
    v: VRef,
) -> [T; 3] {
    match v {
        VRef::Loop(j, i) => {
            let (s, c) = loop_angle(i, shape.vertices_per_loop).sin_cos();
            let r = radius(j);
            [r * c, r * s, T::cst(shape.loop_heights[j])]
        }
        VRef::Apex => [T::zero(), T::zero(), T::cst(shape.apex_height())],
    }
}

/// Area-weighted vertex normal of `(j, i)` as a function of the loop radii.
pub(crate) fn loop_vertex_normal<T: Real>(
    shape: &EyeShape,
    topo: &LoopTopology,
    radius: &impl Fn(usize) -> T,
    j: usize,
    i: usize,
) -> [T; 3] {
    let mut acc = [T::zero(); 3];
    for tri in topo.incident_faces(j, i) {
        let [a, b, c] = tri.map(|v| vertex_position(shape, radius, v));
        acc = v3::add(acc, v3::cross(v3::sub(b, a), v3::sub(c, a)));
    }
    v3::normalize(acc)
}

/// Rigid placement of the eye: axis-angle rotation then translation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EyePose {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl EyePose {
    pub fn identity() -> Self {
        Self::default()
    }

    /// Pose looking at the given elevation (positive up, `+y`) and azimuth
    /// (positive toward `+x`), both in degrees, with no twist.
    pub fn from_gaze_angles(elevation_deg: f64, azimuth_deg: f64) -> Self {
        let rx = so3::exp_f64(&[-elevation_deg.to_radians(), 0.0, 0.0]);
        let ry = so3::exp_f64(&[0.0, azimuth_deg.to_radians(), 0.0]);
        Self {
            rotation: so3::log_f64(&(ry * rx)),
            translation: [0.0; 3],
        }
    }

    pub fn with_translation(mut self, t: [f64; 3]) -> Self {
        self.translation = t;
        self
    }

    pub fn rotation_matrix(&self) -> nalgebra::Matrix3<f64> {
        so3::exp_f64(&self.rotation)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + Vector3::from(self.translation)
    }

    /// Composition `self * other` (apply `other` first).
    pub fn compose(&self, other: &EyePose) -> EyePose {
        let r = self.rotation_matrix();
        let t = r * Vector3::from(other.translation) + Vector3::from(self.translation);
        EyePose {
            rotation: so3::log_f64(&(r * other.rotation_matrix())),
            translation: [t.x, t.y, t.z],
        }
    }

    pub fn canonical(&self) -> Self {
        Self {
            rotation: so3::canonical(&self.rotation),
            translation: self.translation,
        }
    }
}

/// Gaze direction: the rotated optical axis `R (0, 0, 1)`.
pub fn gaze_direction(pose: &EyePose) -> Vector3<f64> {
    pose.rotation_matrix().column(2).into_owned().normalize()
}

/// Elevation and azimuth (degrees) of a gaze direction, inverse of
/// [`EyePose::from_gaze_angles`].
pub fn gaze_angles(gaze: &Vector3<f64>) -> (f64, f64) {
    let el = gaze.y.clamp(-1.0, 1.0).asin().to_degrees();
    let az = gaze.x.atan2(gaze.z).to_degrees();
    (el, az)
}

/// Triangle mesh of an eye shape.
#[derive(Clone, Debug, PartialEq)]
pub struct EyeMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
    pub vertex_normals: Vec<Vector3<f64>>,
    pub topology: LoopTopology,
}

/// Builds the loop-strip mesh with an apex fan and area-weighted normals.
pub fn build_mesh(shape: &EyeShape) -> Result<EyeMesh> {
    shape.validate()?;
    let n = shape.num_loops();
    if let Some(j) = shape.loop_radii[..n - 1].iter().position(|&r| r <= 0.0) {
        return Err(Error::DegenerateGeometry(format!("loop {j} has zero radius")));
    }
    let topo = LoopTopology::of(shape);
    let h = shape.vertices_per_loop;

    let mut vertices = Vec::with_capacity(topo.num_vertices());
    for j in 0..n {
        for i in 0..h {
            vertices.push(Vector3::from(shape.loop_vertex(j, i)));
        }
    }
    if topo.apex {
        vertices.push(Vector3::new(0.0, 0.0, shape.apex_height()));
    }

    let faces: Vec<[usize; 3]> = (0..topo.num_faces())
        .map(|f| topo.face(f).map(|v| topo.index(v)))
        .collect();

    let mut acc = vec![Vector3::zeros(); vertices.len()];
    for f in &faces {
        let [a, b, c] = f.map(|k| vertices[k]);
        let n = (b - a).cross(&(c - a));
        for &k in f {
            acc[k] += n;
        }
    }
    let vertex_normals = acc
        .into_iter()
        .enumerate()
        .map(|(k, n)| {
            let len = n.norm();
            if len > 0.0 {
                Ok(n / len)
            } else {
                Err(Error::DegenerateGeometry(format!("vertex {k} has no area")))
            }
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(EyeMesh {
        vertices,
        faces,
        vertex_normals,
        topology: topo,
    })
}

/// Maps vertices `p -> R p + t` and normals `n -> R n`.
pub fn apply_pose(mesh: &EyeMesh, pose: &EyePose) -> EyeMesh {
    let r = pose.rotation_matrix();
    let t = Vector3::from(pose.translation);
    EyeMesh {
        vertices: mesh.vertices.iter().map(|p| r * p + t).collect(),
        faces: mesh.faces.clone(),
        vertex_normals: mesh.vertex_normals.iter().map(|n| r * n).collect(),
        topology: mesh.topology,
    }
}

impl EyeMesh {
    /// Writes `v`, `vn` and `f` lines (1-based indices).
    pub fn write_obj(&self, mut w: impl Write) -> Result<()> {
        for v in &self.vertices {
            writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
        }
        for n in &self.vertex_normals {
            writeln!(w, "vn {} {} {}", n.x, n.y, n.z)?;
        }
        for f in &self.faces {
            let [a, b, c] = f.map(|k| k + 1);
            writeln!(w, "f {a}//{a} {b}//{b} {c}//{c}")?;
        }
        Ok(())
    }
}
