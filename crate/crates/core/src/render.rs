//! Single-bounce deflectometry renderer with forward-mode derivatives.
//!
//! Each camera ray is intersected with the posed eye mesh, the smooth normal
//! is interpolated barycentrically, the view direction is mirrored and the
//! reflected ray is intersected with the screen plane. Triangle assignment
//! comes from a BVH and is held fixed when differentiating; everything after
//! it is evaluated over [`Real`] scalars so dual numbers give exact partials
//! with respect to the pose and the radii of the loops around the hit face.

use nalgebra::{DMatrix, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{v3, Dual, Real};
use crate::bvh::Bvh;
use crate::error::{Error, Result};
use crate::eye_model::{build_mesh, loop_angle, loop_vertex_normal, vertex_position, EyeMesh, EyePose, EyeShape, VRef};
use crate::patterns::{Image, Pattern};
use crate::scene::{pixel_ray, Ray, SceneConfig};
use crate::so3;

/// Tangent width for pose-only derivatives: rotation (0..3), translation (3..6).
pub const POSE_SLOTS: usize = 6;
/// Pose plus the four loop radii a pixel can depend on.
pub const FULL_SLOTS: usize = 10;

const CHUNK: usize = 1024;

/// Diffuse background and albedo texture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shading {
    /// Scale of the mirrored screen radiance.
    pub specular_gain: f64,
    pub ambient: f64,
    /// Lambertian weight; the light sits at the camera.
    pub diffuse: f64,
    /// Radii (mm, around the optical axis) of the pupil and iris disks.
    pub pupil_radius: f64,
    pub iris_radius: f64,
    pub pupil_albedo: f64,
    pub iris_albedo: f64,
    pub sclera_albedo: f64,
}

impl Default for Shading {
    fn default() -> Self {
        Self {
            specular_gain: 0.9,
            ambient: 0.1,
            diffuse: 0.3,
            pupil_radius: 2.0,
            iris_radius: 5.5,
            pupil_albedo: 0.0,
            iris_albedo: 0.5,
            sclera_albedo: 1.0,
        }
    }
}

impl Shading {
    /// Albedo at a local-frame surface point.
    pub fn albedo(&self, p: &[f64; 3]) -> f64 {
        if p[2] <= 0.0 {
            return self.sclera_albedo;
        }
        let rho = p[0].hypot(p[1]);
        if rho < self.pupil_radius {
            self.pupil_albedo
        } else if rho < self.iris_radius {
            self.iris_albedo
        } else {
            self.sclera_albedo
        }
    }
}

/// Dense render of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub image: Image,
    pub hit_mask: Vec<bool>,
    /// Unclamped screen coordinate of the reflected ray; NaN where the pixel
    /// misses the eye or the reflection is parallel to the screen.
    pub screen_uv: Vec<[f64; 2]>,
    /// Reflected ray reaches the physical screen.
    pub on_screen: Vec<bool>,
    pub surface_point: Vec<[f64; 3]>,
    pub surface_normal: Vec<[f64; 3]>,
    pub face_id: Vec<Option<usize>>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }
}

/// Gradient of a scalar with respect to the optimizable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradient {
    pub d_rotation: [f64; 3],
    pub d_translation: [f64; 3],
    pub d_loop_radii: Vec<f64>,
}

impl ParamGradient {
    pub fn zeros(n_loops: usize) -> Self {
        Self {
            d_rotation: [0.0; 3],
            d_translation: [0.0; 3],
            d_loop_radii: vec![0.0; n_loops],
        }
    }

    fn add(&mut self, o: &ParamGradient) {
        for k in 0..3 {
            self.d_rotation[k] += o.d_rotation[k];
            self.d_translation[k] += o.d_translation[k];
        }
        for (a, b) in self.d_loop_radii.iter_mut().zip(&o.d_loop_radii) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.d_rotation.iter_mut().for_each(|v| *v *= s);
        self.d_translation.iter_mut().for_each(|v| *v *= s);
        self.d_loop_radii.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.d_rotation
            .iter()
            .chain(&self.d_translation)
            .chain(&self.d_loop_radii)
            .all(|v| v.is_finite())
    }
}

/// Rendered counterpart `corr_opt(p)` of one requested pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderedCorrespondence {
    pub uv: [f64; 2],
    /// The pixel hits the eye and its reflection reaches the screen plane.
    pub hit: bool,
    pub face: Option<usize>,
}

/// Visibility and pose retained from a forward correspondence pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardContext {
    pub pose: EyePose,
    pub pixels: Vec<[f64; 2]>,
    faces: Vec<Option<usize>>,
    shape_version: u64,
}

/// Per-pixel state retained from a photometric forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PhotometricContext {
    pub pose: EyePose,
    faces: Vec<Option<usize>>,
    on_screen: Vec<bool>,
    albedo: Vec<f64>,
    shape_version: u64,
}

/// Vertex normal of loop `j` at angle 0, `(n_x, n_z)`, with partials with
/// respect to the radii of loops `j - 1`, `j`, `j + 1`.
#[derive(Clone, Copy, Debug)]
struct LoopNormal {
    value: [f64; 2],
    partials: [[f64; 3]; 2],
}

/// Posed, differentiable geometry of one pixel.
struct PixelGeometry<T> {
    point: [T; 3],
    normal: [T; 3],
    /// `None` when the reflected ray is parallel to the screen.
    uv: Option<[T; 2]>,
    ahead: bool,
    /// Cosine between the normal and the direction to the camera.
    cos_view: T,
}

/// Pose as [`Real`] values seeded in slots 0..6.
struct PoseVars<T> {
    r: [[T; 3]; 3],
    t: [T; 3],
}

impl<T: Real> PoseVars<T> {
    fn new(pose: &EyePose) -> Self {
        let w = std::array::from_fn(|k| T::with_partials(pose.rotation[k], &[(k, 1.0)]));
        let t = std::array::from_fn(|k| T::with_partials(pose.translation[k], &[(3 + k, 1.0)]));
        Self { r: so3::exp(w), t }
    }
}

/// Ray tracer for one camera, screen and eye shape.
#[derive(Clone, Debug)]
pub struct DiffRenderer {
    scene: SceneConfig,
    shape: EyeShape,
    mesh: EyeMesh,
    bvh: Bvh,
    normals: Vec<LoopNormal>,
    rays: Vec<Ray>,
    pub shading: Shading,
    shape_version: u64,
    context: Option<ForwardContext>,
}

impl DiffRenderer {
    pub fn new(scene: &SceneConfig, shape: &EyeShape) -> Result<Self> {
        scene.validate()?;
        let cam = &scene.camera;
        let rays = (0..cam.height)
            .flat_map(|y| (0..cam.width).map(move |x| [x as f64 + 0.5, y as f64 + 0.5]))
            .map(|p| pixel_ray(cam, p))
            .collect();
        let (mesh, bvh, normals) = Self::build(shape)?;
        Ok(Self {
            scene: scene.clone(),
            shape: shape.clone(),
            mesh,
            bvh,
            normals,
            rays,
            shading: Shading::default(),
            shape_version: 0,
            context: None,
        })
    }

    fn build(shape: &EyeShape) -> Result<(EyeMesh, Bvh, Vec<LoopNormal>)> {
        let mesh = build_mesh(shape)?;
        let tris = mesh.faces.iter().map(|f| f.map(|k| mesh.vertices[k])).collect();
        let bvh = Bvh::build(tris);
        let n = shape.num_loops();
        let normals = (0..n)
            .map(|j| {
                let radius = |l: usize| {
                    let slot = (l + 1).wrapping_sub(j);
                    Dual::<3>::with_partials(shape.loop_radii[l], &[(slot, 1.0)])
                };
                let nv = loop_vertex_normal(shape, &mesh.topology, &radius, j, 0);
                LoopNormal {
                    value: [nv[0].v, nv[2].v],
                    partials: [nv[0].d, nv[2].d],
                }
            })
            .collect();
        Ok((mesh, bvh, normals))
    }

    pub fn scene(&self) -> &SceneConfig {
        &self.scene
    }

    pub fn shape(&self) -> &EyeShape {
        &self.shape
    }

    pub fn mesh(&self) -> &EyeMesh {
        &self.mesh
    }

    /// Replaces the eye shape, rebuilding mesh and BVH. Invalidates any
    /// retained forward context.
    pub fn set_shape(&mut self, shape: &EyeShape) -> Result<()> {
        let (mesh, bvh, normals) = Self::build(shape)?;
        self.shape = shape.clone();
        self.mesh = mesh;
        self.bvh = bvh;
        self.normals = normals;
        self.shape_version += 1;
        self.context = None;
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.scene.camera.width
    }

    pub fn height(&self) -> usize {
        self.scene.camera.height
    }

    /// Nearest face hit by `ray` under `pose`.
    fn visible_face(&self, rt: &nalgebra::Matrix3<f64>, t: &Vector3<f64>, ray: &Ray) -> Option<usize> {
        let o = rt * (ray.origin - t);
        let d = rt * ray.dir;
        self.bvh.intersect(&o, &d).map(|h| h.face)
    }

    /// Tangent slot of loop `l` for a pixel on a face based at loop `jb`.
    #[inline]
    fn radius_slot(l: usize, jb: usize) -> usize {
        POSE_SLOTS + l + 1 - jb
    }

    fn loop_normal<T: Real>(&self, j: usize, i: usize, jb: usize) -> [T; 3] {
        let ln = &self.normals[j];
        let n = self.shape.num_loops();
        let mut parts = [(usize::MAX, 0.0); 3];
        let mut comp = |c: usize| {
            for (k, l) in [j.wrapping_sub(1), j, j + 1].into_iter().enumerate() {
                parts[k] = if l < n {
                    (Self::radius_slot(l, jb), ln.partials[c][k])
                } else {
                    (usize::MAX, 0.0)
                };
            }
            T::with_partials(ln.value[c], &parts)
        };
        let nx = comp(0);
        let nz = comp(1);
        let (s, c) = loop_angle(i, self.shape.vertices_per_loop).sin_cos();
        [nx * c, nx * s, nz]
    }

    fn geometry<T: Real>(&self, pv: &PoseVars<T>, ray: &Ray, face: usize) -> Option<PixelGeometry<T>> {
        let topo = &self.mesh.topology;
        let tri = topo.face(face);
        let jb = topo.face_base_loop(face);
        let radius = |l: usize| T::with_partials(self.shape.loop_radii[l], &[(Self::radius_slot(l, jb), 1.0)]);
        let world = |p: [T; 3]| v3::add(v3::mat_mul(&pv.r, p), pv.t);
        let [p0, p1, p2] = tri.map(|v| world(vertex_position(&self.shape, &radius, v)));
        let [n0, n1, n2] = tri.map(|v| match v {
            VRef::Loop(j, i) => self.loop_normal::<T>(j, i, jb),
            VRef::Apex => v3::cst([0.0, 0.0, 1.0]),
        });

        let o: [T; 3] = v3::cst(ray.origin.into());
        let d: [T; 3] = v3::cst(ray.dir.into());
        let e1 = v3::sub(p1, p0);
        let e2 = v3::sub(p2, p0);
        let pvec = v3::cross(d, e2);
        let det = v3::dot(e1, pvec);
        if det.value().abs() < 1e-14 {
            return None;
        }
        let inv = T::one() / det;
        let s = v3::sub(o, p0);
        let b1 = v3::dot(s, pvec) * inv;
        let q = v3::cross(s, e1);
        let b2 = v3::dot(d, q) * inv;
        let t = v3::dot(e2, q) * inv;
        let b0 = T::one() - b1 - b2;

        let nl = v3::normalize(v3::add(v3::add(v3::scale(n0, b0), v3::scale(n1, b1)), v3::scale(n2, b2)));
        let normal = v3::mat_mul(&pv.r, nl);
        let point = v3::add(o, v3::scale(d, t));
        let dn = v3::dot(d, normal);
        let refl = v3::sub(d, v3::scale(normal, dn * 2.0));

        let scr = &self.scene.screen;
        let sn: [T; 3] = v3::cst(scr.normal().into());
        let c: [T; 3] = v3::cst(scr.center);
        let denom = v3::dot(refl, sn);
        let (uv, ahead) = if denom.value().abs() < 1e-12 {
            (None, false)
        } else {
            let dist = v3::dot(v3::sub(c, point), sn) / denom;
            let y = v3::sub(v3::add(point, v3::scale(refl, dist)), c);
            let bu = Vector3::from(scr.basis_u);
            let bv = Vector3::from(scr.basis_v);
            let bu_n: [T; 3] = v3::cst((bu / bu.norm_squared()).into());
            let bv_n: [T; 3] = v3::cst((bv / bv.norm_squared()).into());
            (Some([v3::dot(y, bu_n), v3::dot(y, bv_n)]), dist.value() > 0.0)
        };
        Some(PixelGeometry {
            point,
            normal,
            uv,
            ahead,
            cos_view: -dn,
        })
    }

    /// Local-frame point for albedo lookup.
    fn local_point(&self, pose: &EyePose, p: &[f64; 3]) -> [f64; 3] {
        let r = pose.rotation_matrix();
        (r.transpose() * (Vector3::from(*p) - Vector3::from(pose.translation))).into()
    }

    fn on_screen<T: Real>(g: &PixelGeometry<T>) -> bool {
        g.ahead && g.uv.is_some_and(|uv| uv[0].value().abs() <= 1.0 && uv[1].value().abs() <= 1.0)
    }

    /// `min(1, gain * pattern * on_screen + albedo * (ambient + diffuse * max(0, n.l)))`.
    fn intensity<T: Real>(&self, g: &PixelGeometry<T>, on_screen: bool, albedo: f64, pattern: &Pattern, c: usize) -> T {
        let sh = &self.shading;
        let spec = match (on_screen, g.uv) {
            (true, Some(uv)) => pattern.value(uv, c) * sh.specular_gain,
            _ => T::zero(),
        };
        let diffuse = (g.cos_view.max0() * sh.diffuse + sh.ambient) * albedo;
        (spec + diffuse).min1()
    }

    /// Geometry buffers of a full frame (no pattern).
    pub fn trace(&self, pose: &EyePose) -> RenderOutput {
        self.render_many(pose, &[]).0
    }

    /// Renders one image.
    pub fn render(&self, pose: &EyePose, pattern: &Pattern) -> RenderOutput {
        let (mut out, mut imgs) = self.render_many(pose, &[pattern]);
        out.image = imgs.pop().expect("one image");
        out
    }

    /// Traces the frame once and shades it with every pattern. The returned
    /// geometry carries an image of the first pattern (black if none).
    pub fn render_many(&self, pose: &EyePose, patterns: &[&Pattern]) -> (RenderOutput, Vec<Image>) {
        let (w, h) = (self.width(), self.height());
        let rt = pose.rotation_matrix().transpose();
        let t = Vector3::from(pose.translation);
        let pv = PoseVars::<f64>::new(pose);
        struct Px {
            face: Option<usize>,
            uv: [f64; 2],
            on_screen: bool,
            point: [f64; 3],
            normal: [f64; 3],
            values: Vec<f64>,
        }
        let channels: Vec<usize> = patterns.iter().map(|p| p.channels()).collect();
        let pixels: Vec<Px> = self
            .rays
            .par_iter()
            .with_min_len(CHUNK)
            .map(|ray| {
                let face = self.visible_face(&rt, &t, ray);
                let g = face.and_then(|f| self.geometry(&pv, ray, f));
                match g {
                    Some(g) => {
                        let on = Self::on_screen(&g);
                        let albedo = self.shading.albedo(&self.local_point(pose, &g.point));
                        let mut values = Vec::new();
                        for (p, &nc) in patterns.iter().zip(&channels) {
                            for c in 0..nc {
                                values.push(self.intensity(&g, on, albedo, p, c));
                            }
                        }
                        Px {
                            face,
                            uv: g.uv.unwrap_or([f64::NAN; 2]),
                            on_screen: on,
                            point: g.point,
                            normal: g.normal,
                            values,
                        }
                    }
                    None => Px {
                        face: None,
                        uv: [f64::NAN; 2],
                        on_screen: false,
                        point: [f64::NAN; 3],
                        normal: [f64::NAN; 3],
                        values: channels.iter().flat_map(|&nc| std::iter::repeat_n(0.0, nc)).collect(),
                    },
                }
            })
            .collect();

        let mut images: Vec<Image> = channels.iter().map(|&nc| Image::new(w, h, nc)).collect();
        for (k, px) in pixels.iter().enumerate() {
            let mut off = 0;
            for img in images.iter_mut() {
                let nc = img.channels;
                img.data[k * nc..(k + 1) * nc].copy_from_slice(&px.values[off..off + nc]);
                off += nc;
            }
        }
        let image = images.first().cloned().unwrap_or_else(|| Image::new(w, h, 1));
        let out = RenderOutput {
            image,
            hit_mask: pixels.iter().map(|p| p.face.is_some()).collect(),
            screen_uv: pixels.iter().map(|p| p.uv).collect(),
            on_screen: pixels.iter().map(|p| p.on_screen).collect(),
            surface_point: pixels.iter().map(|p| p.point).collect(),
            surface_normal: pixels.iter().map(|p| p.normal).collect(),
            face_id: pixels.iter().map(|p| p.face).collect(),
        };
        (out, images)
    }

    /// `corr_opt(p)` for the requested pixels, without retaining context.
    pub fn forward(&self, pose: &EyePose, pixels: &[[f64; 2]]) -> (Vec<RenderedCorrespondence>, ForwardContext) {
        let rt = pose.rotation_matrix().transpose();
        let t = Vector3::from(pose.translation);
        let pv = PoseVars::<f64>::new(pose);
        let cam = &self.scene.camera;
        let out: Vec<RenderedCorrespondence> = pixels
            .par_iter()
            .with_min_len(CHUNK)
            .map(|&p| {
                let ray = pixel_ray(cam, p);
                let face = self.visible_face(&rt, &t, &ray);
                let g = face.and_then(|f| self.geometry(&pv, &ray, f));
                match g {
                    Some(PixelGeometry {
                        uv: Some(uv), ahead, ..
                    }) => RenderedCorrespondence { uv, hit: ahead, face },
                    _ => RenderedCorrespondence {
                        uv: [f64::NAN; 2],
                        hit: false,
                        face: None,
                    },
                }
            })
            .collect();
        let ctx = ForwardContext {
            pose: *pose,
            pixels: pixels.to_vec(),
            faces: out.iter().map(|c| c.face).collect(),
            shape_version: self.shape_version,
        };
        (out, ctx)
    }

    /// Forward pass that retains its context for [`DiffRenderer::backward`].
    pub fn render_correspondences(&mut self, pose: &EyePose, pixels: &[[f64; 2]]) -> Vec<RenderedCorrespondence> {
        let (out, ctx) = self.forward(pose, pixels);
        self.context = Some(ctx);
        out
    }

    /// Chain rule through the retained forward pass of the same pose and
    /// pixels. `upstream[k]` is `d loss / d uv_k`.
    pub fn backward(&self, pose: &EyePose, pixels: &[[f64; 2]], upstream: &[[f64; 2]], with_shape: bool) -> Result<ParamGradient> {
        match &self.context {
            Some(ctx) if ctx.pose == *pose && ctx.pixels == pixels => self.backward_with(ctx, upstream, with_shape),
            _ => Err(Error::MissingForwardContext),
        }
    }

    /// Chain rule through an explicit forward context. Radii partials are
    /// only evaluated when `with_shape` is set.
    pub fn backward_with(&self, ctx: &ForwardContext, upstream: &[[f64; 2]], with_shape: bool) -> Result<ParamGradient> {
        if ctx.shape_version != self.shape_version {
            return Err(Error::MissingForwardContext);
        }
        if upstream.len() != ctx.pixels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} upstream gradients for {} pixels",
                upstream.len(),
                ctx.pixels.len()
            )));
        }
        let cam = &self.scene.camera;
        let kernel = |k: usize| -> Option<(usize, [f64; FULL_SLOTS])> {
            let up = upstream[k];
            let face = ctx.faces[k]?;
            if up == [0.0, 0.0] {
                return None;
            }
            let ray = pixel_ray(cam, ctx.pixels[k]);
            let mut g = [0.0; FULL_SLOTS];
            if with_shape {
                let uv = self.geometry(&PoseVars::<Dual<FULL_SLOTS>>::new(&ctx.pose), &ray, face)?.uv?;
                for s in 0..FULL_SLOTS {
                    g[s] = up[0] * uv[0].d[s] + up[1] * uv[1].d[s];
                }
            } else {
                let uv = self.geometry(&PoseVars::<Dual<POSE_SLOTS>>::new(&ctx.pose), &ray, face)?.uv?;
                for s in 0..POSE_SLOTS {
                    g[s] = up[0] * uv[0].d[s] + up[1] * uv[1].d[s];
                }
            }
            Some((self.mesh.topology.face_base_loop(face), g))
        };
        Ok(self.reduce(ctx.pixels.len(), kernel))
    }

    /// Sums per-pixel local gradients over fixed chunks, merged in order.
    fn reduce(&self, n: usize, kernel: impl Fn(usize) -> Option<(usize, [f64; FULL_SLOTS])> + Sync) -> ParamGradient {
        let n_loops = self.shape.num_loops();
        let partials: Vec<ParamGradient> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut acc = ParamGradient::zeros(n_loops);
                for k in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    if let Some((jb, g)) = kernel(k) {
                        for s in 0..3 {
                            acc.d_rotation[s] += g[s];
                            acc.d_translation[s] += g[3 + s];
                        }
                        for s in 0..4 {
                            let l = (jb + s).wrapping_sub(1);
                            if l < n_loops {
                                acc.d_loop_radii[l] += g[POSE_SLOTS + s];
                            }
                        }
                    }
                }
                acc
            })
            .collect();
        let mut total = ParamGradient::zeros(n_loops);
        for p in &partials {
            total.add(p);
        }
        total
    }

    /// `sum_k J_k^T J_k` over the pixels of a forward pass, where `J_k` holds
    /// the partials of the rendered `uv` with respect to rotation,
    /// translation and, with `with_shape`, every loop radius (in that order).
    pub fn gauss_newton(&self, ctx: &ForwardContext, with_shape: bool) -> Result<DMatrix<f64>> {
        if ctx.shape_version != self.shape_version {
            return Err(Error::MissingForwardContext);
        }
        let cam = &self.scene.camera;
        let kernel = |k: usize| -> Option<(usize, Vec<[f64; FULL_SLOTS]>)> {
            let face = ctx.faces[k]?;
            let ray = pixel_ray(cam, ctx.pixels[k]);
            let rows = if with_shape {
                let uv = self.geometry(&PoseVars::<Dual<FULL_SLOTS>>::new(&ctx.pose), &ray, face)?.uv?;
                vec![uv[0].d, uv[1].d]
            } else {
                let uv = self.geometry(&PoseVars::<Dual<POSE_SLOTS>>::new(&ctx.pose), &ray, face)?.uv?;
                vec![pad(uv[0].d), pad(uv[1].d)]
            };
            Some((self.mesh.topology.face_base_loop(face), rows))
        };
        Ok(self.reduce_outer(ctx.pixels.len(), with_shape, kernel))
    }

    /// As [`DiffRenderer::gauss_newton`] for the rendered intensities of a
    /// photometric pass, over the pixels selected by `mask`.
    pub fn gauss_newton_photometric(&self, ctx: &PhotometricContext, pattern: &Pattern, mask: &[bool], with_shape: bool) -> Result<DMatrix<f64>> {
        if ctx.shape_version != self.shape_version {
            return Err(Error::MissingForwardContext);
        }
        if mask.len() != ctx.faces.len() {
            return Err(Error::DimensionMismatch("photometric mask size".into()));
        }
        let kernel = |k: usize| -> Option<(usize, Vec<[f64; FULL_SLOTS]>)> {
            if !mask[k] {
                return None;
            }
            let face = ctx.faces[k]?;
            let rows = if with_shape {
                let geo = self.geometry(&PoseVars::<Dual<FULL_SLOTS>>::new(&ctx.pose), &self.rays[k], face)?;
                (0..pattern.channels())
                    .map(|c| self.intensity(&geo, ctx.on_screen[k], ctx.albedo[k], pattern, c).d)
                    .collect()
            } else {
                let geo = self.geometry(&PoseVars::<Dual<POSE_SLOTS>>::new(&ctx.pose), &self.rays[k], face)?;
                (0..pattern.channels())
                    .map(|c| pad(self.intensity(&geo, ctx.on_screen[k], ctx.albedo[k], pattern, c).d))
                    .collect()
            };
            Some((self.mesh.topology.face_base_loop(face), rows))
        };
        Ok(self.reduce_outer(ctx.faces.len(), with_shape, kernel))
    }

    fn reduce_outer(&self, n: usize, with_shape: bool, kernel: impl Fn(usize) -> Option<(usize, Vec<[f64; FULL_SLOTS]>)> + Sync) -> DMatrix<f64> {
        let n_loops = self.shape.num_loops();
        let dim = if with_shape { POSE_SLOTS + n_loops } else { POSE_SLOTS };
        let global = |s: usize, jb: usize| -> Option<usize> {
            if s < POSE_SLOTS {
                return Some(s);
            }
            let l = (jb + s - POSE_SLOTS).wrapping_sub(1);
            (with_shape && l < n_loops).then_some(POSE_SLOTS + l)
        };
        let partials: Vec<DMatrix<f64>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut acc = DMatrix::zeros(dim, dim);
                for k in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    let Some((jb, rows)) = kernel(k) else { continue };
                    for row in &rows {
                        for a in 0..FULL_SLOTS {
                            let Some(ga) = global(a, jb) else { continue };
                            if row[a] == 0.0 {
                                continue;
                            }
                            for b in 0..FULL_SLOTS {
                                if let Some(gb) = global(b, jb) {
                                    acc[(ga, gb)] += row[a] * row[b];
                                }
                            }
                        }
                    }
                }
                acc
            })
            .collect();
        let mut total = DMatrix::zeros(dim, dim);
        for p in &partials {
            total += p;
        }
        total
    }

    /// Renders an image and retains what the photometric backward pass needs.
    pub fn render_photometric(&self, pose: &EyePose, pattern: &Pattern) -> (Image, PhotometricContext) {
        let out = self.render(pose, pattern);
        let albedo = out
            .surface_point
            .iter()
            .zip(&out.face_id)
            .map(|(p, f)| f.map_or(0.0, |_| self.shading.albedo(&self.local_point(pose, p))))
            .collect();
        let ctx = PhotometricContext {
            pose: *pose,
            faces: out.face_id,
            on_screen: out.on_screen,
            albedo,
            shape_version: self.shape_version,
        };
        (out.image, ctx)
    }

    /// Chain rule from per-pixel, per-channel `d loss / d I` to the
    /// parameters; the on-screen test and the albedo region stay fixed.
    pub fn backward_photometric(&self, ctx: &PhotometricContext, pattern: &Pattern, upstream: &Image, with_shape: bool) -> Result<ParamGradient> {
        if ctx.shape_version != self.shape_version {
            return Err(Error::MissingForwardContext);
        }
        let nc = pattern.channels();
        if upstream.num_pixels() != ctx.faces.len() || upstream.channels != nc {
            return Err(Error::DimensionMismatch("photometric upstream gradient shape".into()));
        }
        let kernel = |k: usize| -> Option<(usize, [f64; FULL_SLOTS])> {
            let face = ctx.faces[k]?;
            let up = &upstream.data[k * nc..(k + 1) * nc];
            if up.iter().all(|&v| v == 0.0) {
                return None;
            }
            let ray = &self.rays[k];
            let mut g = [0.0; FULL_SLOTS];
            if with_shape {
                let geo = self.geometry(&PoseVars::<Dual<FULL_SLOTS>>::new(&ctx.pose), ray, face)?;
                for (c, &u) in up.iter().enumerate() {
                    let i = self.intensity(&geo, ctx.on_screen[k], ctx.albedo[k], pattern, c);
                    for s in 0..FULL_SLOTS {
                        g[s] += u * i.d[s];
                    }
                }
            } else {
                let geo = self.geometry(&PoseVars::<Dual<POSE_SLOTS>>::new(&ctx.pose), ray, face)?;
                for (c, &u) in up.iter().enumerate() {
                    let i = self.intensity(&geo, ctx.on_screen[k], ctx.albedo[k], pattern, c);
                    for s in 0..POSE_SLOTS {
                        g[s] += u * i.d[s];
                    }
                }
            }
            Some((self.mesh.topology.face_base_loop(face), g))
        };
        Ok(self.reduce(ctx.faces.len(), kernel))
    }
}

fn pad(d: [f64; POSE_SLOTS]) -> [f64; FULL_SLOTS] {
    let mut out = [0.0; FULL_SLOTS];
    out[..POSE_SLOTS].copy_from_slice(&d);
    out
}

/// Mirror reflection `d - 2 (d . n) n`.
pub fn reflect(d: &Vector3<f64>, n: &Vector3<f64>) -> Vector3<f64> {
    d - n * (2.0 * d.dot(n))
}

/// One-shot render at `resolution = (width, height)`, which may not exceed
/// the scene camera's.
pub fn render(scene: &SceneConfig, shape: &EyeShape, pose: &EyePose, pattern: &Pattern, resolution: (usize, usize)) -> Result<RenderOutput> {
    let (w, h) = resolution;
    if w == 0 || h == 0 || w > scene.camera.width || h > scene.camera.height {
        return Err(Error::InvalidScene(format!(
            "resolution {w}x{h} exceeds the camera's {}x{}",
            scene.camera.width, scene.camera.height
        )));
    }
    pattern.validate()?;
    let r = DiffRenderer::new(&scene.with_resolution(w, h), shape)?;
    Ok(r.render(pose, pattern))
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::eye_model::base_shape;
    use crate::patterns::Orientation;
    use crate::scene::{default_scene, intersect_screen};

    fn small_renderer(n: usize) -> DiffRenderer {
        DiffRenderer::new(&default_scene().with_resolution(n, n), &base_shape()).unwrap()
    }

    #[test]
    fn reflection_examples() {
        let r = reflect(&Vector3::new(0.0, 0.0, -1.0), &Vector3::z());
        assert_eq!(r, Vector3::z());
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let r = reflect(&Vector3::new(s, -s, 0.0), &Vector3::y());
        assert_abs_diff_eq!((r - Vector3::new(s, s, 0.0)).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn white_pattern_shows_specular_patch() {
        let r = small_renderer(64);
        let out = r.render(&EyePose::identity(), &Pattern::uniform(1.0));
        assert!(out.hit_mask.iter().any(|&h| h));
        let spec = (0..out.hit_mask.len()).filter(|&k| out.on_screen[k] && out.image.data[k] > 0.85).count();
        assert!(spec > 0);
        let dark = r.render(&EyePose::identity(), &Pattern::uniform(0.0));
        for k in 0..out.hit_mask.len() {
            if out.on_screen[k] {
                assert!(out.image.data[k] > dark.image.data[k]);
            } else {
                assert_eq!(out.image.data[k], dark.image.data[k]);
            }
        }
    }

    #[test]
    fn reflection_law_and_screen_consistency() {
        let r = small_renderer(48);
        let pose = EyePose::from_gaze_angles(2.0, -3.0).with_translation([0.3, -0.2, 0.5]);
        let out = r.trace(&pose);
        let scr = &r.scene().screen;
        let mut checked = 0;
        for k in 0..out.hit_mask.len() {
            if !out.hit_mask[k] {
                continue;
            }
            let n = Vector3::from(out.surface_normal[k]);
            let p = Vector3::from(out.surface_point[k]);
            let d = (p - r.scene().camera.center()).normalize();
            let refl = reflect(&d, &n);
            assert_abs_diff_eq!(n.norm(), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(refl.norm(), 1.0, epsilon = 1e-9);
            assert_abs_diff_eq!(refl.dot(&n), -d.dot(&n), epsilon = 1e-9);
            assert_abs_diff_eq!(refl.dot(&d.cross(&n)), 0.0, epsilon = 1e-9);
            let hit = intersect_screen(scr, &Ray { origin: p, dir: refl }).unwrap();
            assert_abs_diff_eq!(hit.uv[0], out.screen_uv[k][0], epsilon = 1e-9);
            assert_abs_diff_eq!(hit.uv[1], out.screen_uv[k][1], epsilon = 1e-9);
            // The screen point lies on the reflected ray through the surface point.
            let q = scr.point(out.screen_uv[k]);
            let back = (q - p).normalize();
            assert!((back - refl * hit.distance.signum()).norm() < 1e-9);
            checked += 1;
        }
        assert!(checked > 1000);
    }

    #[test]
    fn correspondences_match_dense_buffer() {
        let mut r = small_renderer(40);
        let pose = EyePose::from_gaze_angles(-1.0, 2.0);
        let out = r.trace(&pose);
        let pixels: Vec<[f64; 2]> = (0..out.hit_mask.len())
            .filter(|&k| out.hit_mask[k])
            .map(|k| [(k % 40) as f64 + 0.5, (k / 40) as f64 + 0.5])
            .collect();
        let corr = r.render_correspondences(&pose, &pixels);
        for (c, p) in corr.iter().zip(&pixels) {
            let k = p[1] as usize * 40 + p[0] as usize;
            assert_eq!(c.uv, out.screen_uv[k]);
            assert_eq!(c.face, out.face_id[k]);
        }
        assert!(r.render_correspondences(&pose, &[]).is_empty());
    }

    #[test]
    fn translation_shifts_uv_consistently() {
        let r = small_renderer(32);
        let pixels: Vec<[f64; 2]> = (10..22).map(|x| [x as f64 + 0.5, 16.5]).collect();
        let (a, _) = r.forward(&EyePose::identity(), &pixels);
        let (b, _) = r.forward(&EyePose::identity().with_translation([0.1, 0.0, 0.0]), &pixels);
        let signs: Vec<f64> = a
            .iter()
            .zip(&b)
            .filter(|(a, b)| a.hit && b.hit && a.face.is_some())
            .map(|(a, b)| (b.uv[0] - a.uv[0]).signum())
            .collect();
        assert!(signs.len() > 8);
        assert!(signs.iter().all(|&s| s == signs[0]));
        // At a fixed pixel the normal of a convex mirror moved toward +x
        // tilts toward -x, and so does the reflection.
        assert_eq!(signs[0], -1.0);
    }

    #[test]
    fn backward_requires_matching_forward() {
        let mut r = small_renderer(16);
        let pixels = [[8.5, 8.5]];
        let pose = EyePose::identity();
        assert!(matches!(r.backward(&pose, &pixels, &[[1.0, 0.0]], true), Err(Error::MissingForwardContext)));
        r.render_correspondences(&pose, &pixels);
        assert!(r.backward(&pose, &pixels, &[[1.0, 0.0]], true).is_ok());
        let other = EyePose::from_gaze_angles(1.0, 0.0);
        assert!(matches!(r.backward(&other, &pixels, &[[1.0, 0.0]], true), Err(Error::MissingForwardContext)));
        let zero = r.backward(&pose, &pixels, &[[0.0, 0.0]], true).unwrap();
        assert_eq!(zero, ParamGradient::zeros(r.shape().num_loops()));
        let shape = r.shape().clone();
        r.set_shape(&shape).unwrap();
        assert!(matches!(r.backward(&pose, &pixels, &[[1.0, 0.0]], true), Err(Error::MissingForwardContext)));
    }

    /// Per-pixel uv partials against central differences of the f64 path.
    #[test]
    fn uv_partials_match_finite_differences() {
        let r = small_renderer(24);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pose = EyePose {
            rotation: [0.03, -0.05, 0.01],
            translation: [0.2, -0.3, 0.4],
        };
        let out = r.trace(&pose);
        let mut tested = 0;
        for _ in 0..40 {
            let k = rng.gen_range(0..out.hit_mask.len());
            let Some(face) = out.face_id[k] else { continue };
            let ray = r.rays[k];
            let g = r.geometry(&PoseVars::<Dual<FULL_SLOTS>>::new(&pose), &ray, face).unwrap();
            let uv = g.uv.unwrap();
            for s in 0..POSE_SLOTS {
                let h = if s < 3 { 1e-6 } else { 1e-5 };
                let eval = |sign: f64| {
                    let mut p = pose;
                    if s < 3 {
                        p.rotation[s] += sign * h;
                    } else {
                        p.translation[s - 3] += sign * h;
                    }
                    r.geometry(&PoseVars::<f64>::new(&p), &ray, face).unwrap().uv.unwrap()
                };
                let (a, b) = (eval(1.0), eval(-1.0));
                for c in 0..2 {
                    let fd = (a[c] - b[c]) / (2.0 * h);
                    assert!((uv[c].d[s] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "slot {s}: {} vs {fd}", uv[c].d[s]);
                }
            }
            let jb = r.mesh.topology.face_base_loop(face);
            for s in 0..4 {
                let l = (jb + s).wrapping_sub(1);
                if l >= r.shape.num_loops() {
                    continue;
                }
                let h = 1e-6;
                let eval = |sign: f64| {
                    let mut sh = r.shape.clone();
                    sh.loop_radii[l] += sign * h;
                    let rr = DiffRenderer::new(&r.scene, &sh).unwrap();
                    rr.geometry(&PoseVars::<f64>::new(&pose), &ray, face).unwrap().uv.unwrap()
                };
                let (a, b) = (eval(1.0), eval(-1.0));
                for c in 0..2 {
                    let fd = (a[c] - b[c]) / (2.0 * h);
                    let an = uv[c].d[POSE_SLOTS + s];
                    assert!((an - fd).abs() < 1e-5 * (1.0 + fd.abs()), "loop {l}: {an} vs {fd}");
                }
            }
            tested += 1;
        }
        assert!(tested > 20);
    }

    #[test]
    fn gauss_newton_matches_finite_difference_jacobian() {
        let r = small_renderer(20);
        let pose = EyePose::from_gaze_angles(1.0, -2.0);
        let pixels: Vec<[f64; 2]> = (0..20).map(|k| [4.5 + 0.5 * k as f64, 9.5]).collect();
        let (base, ctx) = r.forward(&pose, &pixels);
        let h = 1e-6;
        let mut jac = DMatrix::<f64>::zeros(2 * pixels.len(), POSE_SLOTS);
        for s in 0..POSE_SLOTS {
            let shift = |sign: f64| {
                let mut p = pose;
                if s < 3 {
                    p.rotation[s] += sign * h;
                } else {
                    p.translation[s - 3] += sign * h;
                }
                r.forward(&p, &pixels).0
            };
            let (a, b) = (shift(1.0), shift(-1.0));
            for k in 0..pixels.len() {
                if base[k].face.is_some() && a[k].face == base[k].face && b[k].face == base[k].face {
                    for c in 0..2 {
                        jac[(2 * k + c, s)] = (a[k].uv[c] - b[k].uv[c]) / (2.0 * h);
                    }
                }
            }
        }
        let fd = jac.transpose() * &jac;
        let gn = r.gauss_newton(&ctx, false).unwrap();
        assert_eq!(gn.shape(), (POSE_SLOTS, POSE_SLOTS));
        assert!((&gn - &fd).norm() < 1e-5 * fd.norm(), "{gn} vs {fd}");
        let full = r.gauss_newton(&ctx, true).unwrap();
        assert_eq!(full.nrows(), POSE_SLOTS + r.shape().num_loops());
        assert!((full.view((0, 0), (POSE_SLOTS, POSE_SLOTS)) - &gn).norm() < 1e-12 * gn.norm());
    }

    #[test]
    fn photometric_self_consistency_and_smooth_band() {
        let r = small_renderer(32);
        let pattern = Pattern::sinusoid(1.0, Orientation::Horizontal, 0.0, 0.3, 0.3);
        let (a, ctx) = r.render_photometric(&EyePose::identity(), &pattern);
        let (b, _) = r.render_photometric(&EyePose::identity(), &pattern);
        assert_eq!(a, b);
        let up = Image::new(32, 32, 1);
        let g = r.backward_photometric(&ctx, &pattern, &up, false).unwrap();
        assert_eq!(g, ParamGradient::zeros(r.shape().num_loops()));
    }

    #[test]
    fn render_rejects_oversized_resolution() {
        let s = default_scene();
        let big = (s.camera.width + 1, 4);
        assert!(render(&s, &base_shape(), &EyePose::identity(), &Pattern::uniform(1.0), big).is_err());
        let out = render(&s, &base_shape(), &EyePose::identity(), &Pattern::uniform(1.0), (8, 8)).unwrap();
        assert_eq!(out.image.num_pixels(), 64);
    }

    #[test]
    fn rendering_is_deterministic() {
        let r = small_renderer(32);
        let p = Pattern::sinusoid(16.0, Orientation::Horizontal, 0.0, 0.3, 0.3);
        let a = r.render(&EyePose::from_gaze_angles(3.0, 1.0), &p);
        let b = r.render(&EyePose::from_gaze_angles(3.0, 1.0), &p);
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }
}
