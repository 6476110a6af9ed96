//! Gradient-descent recovery of eye pose and shape.
//!
//! Adam with per-group step sizes and step rejection: a step that raises the
//! loss is retried at half length, and the halved length is kept for later
//! iterations. Stage 1 moves the pose only; stage 2 adds the radii of the
//! frontal loops together with the shape regularizers.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Dual;
use crate::error::{Error, Result};
use crate::eye_model::{build_mesh, gaze_direction, EyeMesh, EyePose, EyeShape};
use crate::losses::{correspondence_loss, photometric_loss, total_shape_regularizer, write_trace, LossReport, RegularizerConfig};
use crate::patterns::{CorrespondenceSet, Image, Pattern};
use crate::render::{DiffRenderer, ForwardContext, ParamGradient, PhotometricContext};
use crate::scene::SceneConfig;
use crate::so3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Correspondence,
    Photometric,
}

/// What the solver fits.
#[derive(Clone, Debug)]
pub enum Observation {
    Correspondences(CorrespondenceSet),
    /// A captured image of the eye reflecting `pattern`.
    Photometric { image: Image, pattern: Pattern },
}

impl Observation {
    pub fn mode(&self) -> Mode {
        match self {
            Observation::Correspondences(_) => Mode::Correspondence,
            Observation::Photometric { .. } => Mode::Photometric,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveConfig {
    pub mode: Mode,
    pub optimize_shape: bool,
    pub regularizers: RegularizerConfig,
    pub max_iters_pose: usize,
    pub max_iters_joint: usize,
    pub lr_rotation: f64,
    pub lr_translation: f64,
    pub lr_radii: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Relative loss change over `patience` iterations below which a stage stops.
    pub tolerance: f64,
    pub patience: usize,
    /// Loss below which a stage stops immediately.
    pub loss_floor: f64,
    pub backtracking: bool,
    /// Run the moment updates in coordinates whitened by the Gauss-Newton
    /// matrix of the loss, rebuilt every `precondition_every` iterations.
    /// The per-group step sizes and `epsilon` apply only without it.
    pub precondition: bool,
    pub precondition_every: usize,
    pub lr_whitened: f64,
    pub epsilon_whitened: f64,
    pub max_backtracks: usize,
    /// Step scale multiplier after a step accepted without shortening.
    pub step_growth: f64,
    pub max_step_scale: f64,
    pub pin_translation: bool,
    pub miss_penalty: Option<f64>,
    /// Correspondences used by the coarse pass of each stage; the stage then
    /// continues on the full set for `refine_iters`.
    pub max_correspondences: Option<usize>,
    pub refine_iters: usize,
    /// Grid cells refined by [`init_pose_refined`]; 0 keeps the best cell.
    pub init_starts: usize,
    pub init_iters: usize,
    pub seed: u64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Correspondence,
            optimize_shape: false,
            regularizers: RegularizerConfig::default(),
            max_iters_pose: 500,
            max_iters_joint: 500,
            lr_rotation: 1e-2,
            lr_translation: 1e-2,
            lr_radii: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-12,
            tolerance: 1e-8,
            patience: 10,
            loss_floor: 1e-20,
            backtracking: true,
            precondition: true,
            precondition_every: 1,
            lr_whitened: 1.0,
            epsilon_whitened: 1.0,
            max_backtracks: 5,
            step_growth: 1.2,
            max_step_scale: 10.0,
            pin_translation: false,
            miss_penalty: None,
            max_correspondences: Some(4096),
            refine_iters: 40,
            init_starts: 4,
            init_iters: 15,
            seed: 0,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        let steps = [self.lr_rotation, self.lr_translation, self.lr_radii, self.lr_whitened];
        if steps.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidExperiment("step sizes must be positive".into()));
        }
        if self.max_iters_pose == 0 || (self.optimize_shape && self.max_iters_joint == 0) {
            return Err(Error::InvalidExperiment("iteration caps must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidExperiment("moment decay rates must lie in [0, 1)".into()));
        }
        self.regularizers.validate()
    }
}

/// Where each stage sits in the loss trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub name: String,
    /// Index of the stage's first trace entry.
    pub trace_start: usize,
    pub iterations: usize,
    pub converged: bool,
    pub correspondences: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub pose: EyePose,
    pub shape: EyeShape,
    /// Accepted iterates; nonincreasing within each stage.
    pub trace: Vec<LossReport>,
    pub iterations: usize,
    pub converged: bool,
    pub gaze: [f64; 3],
    pub stages: Vec<StageSummary>,
}

impl SolveResult {
    pub fn final_loss(&self) -> Option<&LossReport> {
        self.trace.last()
    }

    /// Writes the result as TOML and the trace as CSV next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Doc<'a> {
            iterations: usize,
            converged: bool,
            gaze: [f64; 3],
            final_loss: Option<&'a LossReport>,
            pose: &'a EyePose,
            stages: &'a [StageSummary],
            shape: &'a EyeShape,
        }
        let doc = Doc {
            iterations: self.iterations,
            converged: self.converged,
            gaze: self.gaze,
            final_loss: self.trace.last(),
            pose: &self.pose,
            stages: &self.stages,
            shape: &self.shape,
        };
        std::fs::write(path, toml::to_string(&doc)?)?;
        let mut f = std::fs::File::create(path.with_extension("trace.csv"))?;
        write_trace(&self.trace, &mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// Angle between two unit vectors in degrees.
pub fn gaze_error(estimated: &Vector3<f64>, truth: &Vector3<f64>) -> f64 {
    estimated.dot(truth).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Optimization variables: rotation, position of the cornea sphere center
/// (or the fixed translation when pinned), optimized radii.
#[derive(Clone, Debug)]
struct Params {
    rotation: [f64; 3],
    position: [f64; 3],
    radii: Vec<f64>,
}

/// `R(w) c` and its Jacobian with respect to `w`.
fn rotated_pivot(w: &[f64; 3], c: &[f64; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let wd: [Dual<3>; 3] = std::array::from_fn(|k| Dual::variable(w[k], k));
    let r = so3::exp(wd);
    let mut val = [0.0; 3];
    let mut jac = [[0.0; 3]; 3];
    for i in 0..3 {
        let mut acc = Dual::<3>::constant(0.0);
        for j in 0..3 {
            acc += r[i][j] * Dual::constant(c[j]);
        }
        val[i] = acc.v;
        jac[i] = acc.d;
    }
    (val, jac)
}

struct Problem<'a> {
    renderer: DiffRenderer,
    observation: &'a Observation,
    cfg: &'a SolveConfig,
    /// Loops whose radii are optimized in the joint stage.
    free_loops: std::ops::Range<usize>,
    initial_mesh: EyeMesh,
    /// Regularizer curvature, computed once per stage.
    reg_hessian: Option<DMatrix<f64>>,
    /// Center of the cornea sphere in the eye frame; rotations act about it.
    pivot: [f64; 3],
}

/// Retained forward pass of one evaluation.
enum Pass {
    Correspondence {
        ctx: ForwardContext,
        upstream: Vec<[f64; 2]>,
        count: usize,
    },
    Photometric {
        ctx: PhotometricContext,
        upstream: Image,
    },
}

struct Evaluation {
    report: LossReport,
    pass: Pass,
    /// Regularizer gradient over all loops (joint stage only).
    reg_grad: Option<Vec<f64>>,
}

impl<'a> Problem<'a> {
    fn params_of(&self, pose: &EyePose, radii: Vec<f64>) -> Params {
        let position = if self.cfg.pin_translation {
            pose.translation
        } else {
            let (rc, _) = rotated_pivot(&pose.rotation, &self.pivot);
            std::array::from_fn(|k| pose.translation[k] + rc[k])
        };
        Params {
            rotation: pose.rotation,
            position,
            radii,
        }
    }

    fn pose_of(&self, p: &Params) -> EyePose {
        let translation = if self.cfg.pin_translation {
            p.position
        } else {
            let (rc, _) = rotated_pivot(&p.rotation, &self.pivot);
            std::array::from_fn(|k| p.position[k] - rc[k])
        };
        EyePose {
            rotation: p.rotation,
            translation,
        }
    }

    fn shape_with(&self, radii: &[f64]) -> EyeShape {
        let mut s = self.renderer.shape().clone();
        s.loop_radii[self.free_loops.clone()].copy_from_slice(radii);
        s
    }

    /// Whether the renderer currently holds the shape of `p`.
    fn holds(&self, p: &Params, with_shape: bool) -> bool {
        !with_shape || self.renderer.shape().loop_radii[self.free_loops.clone()] == p.radii[..]
    }

    /// Loss at `p` on the correspondence subset `subset` (ignored in
    /// photometric mode), keeping the forward pass.
    fn evaluate(&mut self, p: &Params, with_shape: bool, subset: Option<&CorrespondenceSet>) -> Result<Evaluation> {
        let pose = self.pose_of(p);
        if !self.holds(p, with_shape) {
            let shape = self.shape_with(&p.radii);
            self.renderer.set_shape(&shape)?;
        }
        let (mut report, pass) = match self.observation {
            Observation::Correspondences(full) => {
                let set = subset.unwrap_or(full);
                let (rendered, ctx) = self.renderer.forward(&pose, &set.pixels);
                let (report, upstream) = correspondence_loss(set, &rendered, self.cfg.miss_penalty)?;
                let count = rendered.iter().filter(|c| c.hit).count();
                (report, Pass::Correspondence { ctx, upstream, count })
            }
            Observation::Photometric { image, pattern } => {
                let (rendered, ctx) = self.renderer.render_photometric(&pose, pattern);
                let mask = vec![true; image.num_pixels()];
                let (report, upstream) = photometric_loss(image, &rendered, &mask)?;
                (report, Pass::Photometric { ctx, upstream })
            }
        };
        let mut reg_grad = None;
        if with_shape {
            let shape = self.renderer.shape();
            let mesh = self.regularized_mesh(shape)?;
            let (reg, rg) = total_shape_regularizer(shape, &mesh, &self.cfg.regularizers);
            report = report.with_regularizers(&reg);
            reg_grad = Some(rg);
        }
        if !report.total.is_finite() {
            return Err(Error::Diverged {
                iteration: 0,
                loss: report.total,
            });
        }
        Ok(Evaluation { report, pass, reg_grad })
    }

    /// Gradient in optimization coordinates from the retained pass at `p`.
    fn gradient(&self, p: &Params, e: &Evaluation, with_shape: bool) -> Result<Vec<f64>> {
        let g = match (&e.pass, self.observation) {
            (Pass::Correspondence { ctx, upstream, .. }, _) => self.renderer.backward_with(ctx, upstream, with_shape)?,
            (Pass::Photometric { ctx, upstream }, Observation::Photometric { pattern, .. }) => {
                self.renderer.backward_photometric(ctx, pattern, upstream, with_shape)?
            }
            _ => unreachable!("pass matches the observation"),
        };
        let mut grad = self.flatten(p, &g, with_shape);
        if let Some(rg) = &e.reg_grad {
            for (k, l) in self.free_loops.clone().enumerate() {
                grad[6 + k] += rg[l];
            }
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                iteration: 0,
                loss: e.report.total,
            });
        }
        Ok(grad)
    }

    /// Gauss-Newton matrix of the loss at `p` in optimization coordinates,
    /// plus the finite-difference Hessian of the regularizers.
    fn curvature(&mut self, p: &Params, e: &Evaluation, with_shape: bool) -> Result<DMatrix<f64>> {
        let (h, count) = match (&e.pass, self.observation) {
            (Pass::Correspondence { ctx, count, .. }, _) => (self.renderer.gauss_newton(ctx, with_shape)?, *count),
            (Pass::Photometric { ctx, .. }, Observation::Photometric { image, pattern }) => {
                let mask = vec![true; image.num_pixels()];
                (self.renderer.gauss_newton_photometric(ctx, pattern, &mask, with_shape)?, image.num_pixels())
            }
            _ => unreachable!("pass matches the observation"),
        };
        let idx: Vec<usize> = (0..6)
            .chain(if with_shape { self.free_loops.clone() } else { 0..0 }.map(|l| 6 + l))
            .collect();
        let n = idx.len();
        let mut hs = DMatrix::from_fn(n, n, |a, b| h[(idx[a], idx[b])] * 2.0 / count.max(1) as f64);
        let mut a = DMatrix::<f64>::identity(n, n);
        if !self.cfg.pin_translation {
            let (_, jac) = rotated_pivot(&p.rotation, &self.pivot);
            for i in 0..3 {
                for k in 0..3 {
                    a[(3 + i, k)] = -jac[i][k];
                }
            }
        }
        hs = a.transpose() * hs * a;
        if self.cfg.pin_translation {
            for i in 3..6 {
                for k in 0..n {
                    hs[(i, k)] = 0.0;
                    hs[(k, i)] = 0.0;
                }
                hs[(i, i)] = 1.0;
            }
        }
        if with_shape {
            if self.reg_hessian.is_none() {
                self.reg_hessian = Some(self.regularizer_hessian(&p.radii)?);
            }
            let rh = self.reg_hessian.as_ref().expect("just computed");
            let m = rh.nrows();
            let mut block = hs.view_mut((6, 6), (m, m));
            block += rh;
        }
        Ok(hs)
    }

    /// Mesh seen by the laplacian term: the shape's mesh, or its vertex
    /// displacement from the initial shape.
    fn regularized_mesh(&self, shape: &EyeShape) -> Result<EyeMesh> {
        let mut mesh = build_mesh(shape)?;
        if self.cfg.regularizers.laplacian_relative {
            for (v, v0) in mesh.vertices.iter_mut().zip(&self.initial_mesh.vertices) {
                *v -= v0;
            }
        }
        Ok(mesh)
    }

    /// Central-difference Hessian of the shape regularizers in the free
    /// radii, symmetrized.
    fn regularizer_hessian(&self, radii: &[f64]) -> Result<DMatrix<f64>> {
        let step = 1e-4;
        let rmax = self.renderer.shape().sclera_radius;
        let reg_grad = |radii: &[f64]| -> Result<Vec<f64>> {
            let shape = self.shape_with(radii);
            let mesh = self.regularized_mesh(&shape)?;
            let (_, g) = total_shape_regularizer(&shape, &mesh, &self.cfg.regularizers);
            Ok(self.free_loops.clone().map(|l| g[l]).collect())
        };
        let m = radii.len();
        let mut h = DMatrix::zeros(m, m);
        for k in 0..m {
            let mut up = radii.to_vec();
            let mut dn = radii.to_vec();
            up[k] = (up[k] + step).min(rmax);
            dn[k] = (dn[k] - step).max(0.0);
            let (gu, gd) = (reg_grad(&up)?, reg_grad(&dn)?);
            let span = up[k] - dn[k];
            for i in 0..m {
                let v = 0.5 * (gu[i] - gd[i]) / span;
                h[(i, k)] += v;
                h[(k, i)] += v;
            }
        }
        Ok(h)
    }

    fn flatten(&self, p: &Params, g: &ParamGradient, with_shape: bool) -> Vec<f64> {
        let mut out: Vec<f64> = g.d_rotation.iter().chain(&g.d_translation).copied().collect();
        if self.cfg.pin_translation {
            out[3..6].fill(0.0);
        } else {
            let (_, jac) = rotated_pivot(&p.rotation, &self.pivot);
            for k in 0..3 {
                out[k] -= (0..3).map(|i| jac[i][k] * g.d_translation[i]).sum::<f64>();
            }
        }
        if with_shape {
            out.extend_from_slice(&g.d_loop_radii[self.free_loops.clone()]);
        }
        out
    }

    fn step_sizes(&self, n: usize) -> Vec<f64> {
        let mut lr = vec![self.cfg.lr_rotation; 3];
        lr.extend([if self.cfg.pin_translation { 0.0 } else { self.cfg.lr_translation }; 3]);
        lr.resize(n, self.cfg.lr_radii);
        lr
    }

    fn apply(&self, p: &Params, delta: &[f64]) -> Params {
        let mut q = p.clone();
        for k in 0..3 {
            q.rotation[k] -= delta[k];
            q.position[k] -= delta[3 + k];
        }
        let rmax = self.renderer.shape().sclera_radius;
        for (r, d) in q.radii.iter_mut().zip(&delta[6..]) {
            *r = (*r - d).clamp(1e-3, rmax);
        }
        q
    }
}

/// `V diag(1 / sqrt(max(lambda, floor)))` for `h = V diag(lambda) V^T`.
fn whitening(h: DMatrix<f64>) -> DMatrix<f64> {
    let n = h.nrows();
    let eig = SymmetricEigen::new(h);
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    let floor = (top * 1e-10).max(1e-300);
    let scale = DVector::from_iterator(n, eig.eigenvalues.iter().map(|&l| 1.0 / l.max(floor).sqrt()));
    eig.eigenvectors * DMatrix::from_diagonal(&scale)
}

struct StageOutcome {
    params: Params,
    iterations: usize,
    converged: bool,
    /// Remaining step scale after rejections.
    scale: f64,
}

/// Runs Adam on one fixed objective until convergence or `max_iters`.
#[allow(clippy::too_many_arguments)]
fn run_stage(
    prob: &mut Problem,
    start: Params,
    with_shape: bool,
    subset: Option<&CorrespondenceSet>,
    max_iters: usize,
    initial_scale: f64,
    trace: &mut Vec<LossReport>,
    iteration_offset: usize,
) -> Result<StageOutcome> {
    let cfg = prob.cfg;
    let at = |it: usize| {
        move |e: Error| match e {
            Error::Diverged { loss, .. } => Error::Diverged {
                iteration: iteration_offset + it,
                loss,
            },
            other => other,
        }
    };
    prob.reg_hessian = None;
    let mut p = start;
    let mut cur = prob.evaluate(&p, with_shape, subset).map_err(at(0))?;
    let mut grad = prob.gradient(&p, &cur, with_shape).map_err(at(0))?;
    trace.push(cur.report);
    let n = grad.len();
    let (lr, eps) = if cfg.precondition {
        (vec![cfg.lr_whitened; n], cfg.epsilon_whitened)
    } else {
        (prob.step_sizes(n), cfg.epsilon)
    };
    let mut basis = DMatrix::<f64>::identity(n, n);
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut scale = initial_scale;
    let mut history = vec![cur.report.total];
    let mut best = (cur.report.total, p.clone());
    let mut iterations = 0;
    let mut converged = false;
    let mut t = 0;
    for it in 1..=max_iters {
        if cur.report.total <= cfg.loss_floor {
            converged = true;
            break;
        }
        if cfg.precondition && (it - 1) % cfg.precondition_every.max(1) == 0 {
            basis = whitening(prob.curvature(&p, &cur, with_shape)?);
            m.fill(0.0);
            v.fill(0.0);
            t = 0;
        }
        let gz = basis.tr_mul(&DVector::from_column_slice(&grad));
        t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for k in 0..n {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gz[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gz[k] * gz[k];
        }
        let dz = DVector::from_iterator(n, (0..n).map(|k| lr[k] * (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps)));
        let dir = &basis * dz;
        iterations = it;
        let mut accepted = None;
        let tries = if cfg.backtracking { cfg.max_backtracks + 1 } else { 1 };
        for attempt in 0..tries {
            let delta: Vec<f64> = dir.iter().map(|d| d * scale).collect();
            let q = prob.apply(&p, &delta);
            let e = prob.evaluate(&q, with_shape, subset).map_err(at(it))?;
            if !cfg.backtracking || e.report.total <= cur.report.total {
                if cfg.backtracking && attempt == 0 {
                    scale = (scale * cfg.step_growth).min(cfg.max_step_scale);
                }
                accepted = Some((q, e));
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some((q, e)) => {
                p = q;
                cur = e;
                grad = prob.gradient(&p, &cur, with_shape).map_err(at(it))?;
                trace.push(cur.report);
                if cur.report.total < best.0 {
                    best = (cur.report.total, p.clone());
                }
            }
            None => {
                // Every shortened step was rejected: stay, drop the moments.
                m.fill(0.0);
                v.fill(0.0);
                t = 0;
                if with_shape {
                    cur = prob.evaluate(&p, with_shape, subset).map_err(at(it))?;
                }
            }
        }
        history.push(cur.report.total);
        log::trace!("iteration {it}: loss {:.6e}, step scale {scale:.3e}", cur.report.total);
        if history.len() > cfg.patience {
            let old = history[history.len() - 1 - cfg.patience];
            let now = cur.report.total;
            if (old - now).abs() <= cfg.tolerance * now.abs().max(f64::MIN_POSITIVE) {
                converged = true;
                break;
            }
        }
    }
    Ok(StageOutcome {
        params: best.1,
        iterations,
        converged,
        scale,
    })
}

/// Fits pose (and optionally the frontal loop radii) to `observation`.
pub fn solve(
    scene: &SceneConfig,
    initial_shape: &EyeShape,
    initial_pose: &EyePose,
    observation: &Observation,
    cfg: &SolveConfig,
) -> Result<SolveResult> {
    cfg.validate()?;
    if cfg.mode != observation.mode() {
        return Err(Error::InvalidExperiment(format!(
            "{:?} mode with a {:?} observation",
            cfg.mode,
            observation.mode()
        )));
    }
    let observation = match observation {
        Observation::Correspondences(set) => {
            let valid = set.only_valid();
            if valid.is_empty() {
                return Err(Error::NoCorrespondences);
            }
            Observation::Correspondences(valid)
        }
        Observation::Photometric { image, pattern } => {
            if image.width != scene.camera.width || image.height != scene.camera.height {
                return Err(Error::DimensionMismatch("observed image and camera differ in size".into()));
            }
            Observation::Photometric {
                image: image.clone(),
                pattern: pattern.clone(),
            }
        }
    };
    let renderer = DiffRenderer::new(scene, initial_shape)?;
    let free_loops = initial_shape.frontal_loops();
    let mut prob = Problem {
        renderer,
        observation: &observation,
        cfg,
        free_loops: free_loops.clone(),
        pivot: [0.0, 0.0, initial_shape.sphere_center_offset],
        initial_mesh: build_mesh(initial_shape)?,
        reg_hessian: None,
    };

    let subset = match (&observation, cfg.max_correspondences) {
        (Observation::Correspondences(set), Some(cap)) if set.len() > cap => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut idx = sample(&mut rng, set.len(), cap).into_vec();
            idx.sort_unstable();
            Some(set.select(&idx))
        }
        _ => None,
    };
    let full_count = match &observation {
        Observation::Correspondences(set) => set.len(),
        Observation::Photometric { image, .. } => image.num_pixels(),
    };

    let mut trace = Vec::new();
    let mut stages = Vec::new();
    let mut params = prob.params_of(initial_pose, initial_shape.loop_radii[free_loops.clone()].to_vec());
    let mut total_iters = 0;
    let mut converged = true;

    let mut plan: Vec<(&str, bool, usize)> = vec![("pose", false, cfg.max_iters_pose)];
    if cfg.optimize_shape {
        plan.push(("joint", true, cfg.max_iters_joint));
    }
    for (name, with_shape, max_iters) in plan {
        let mut scale = 1.0;
        let passes: Vec<(String, Option<&CorrespondenceSet>, usize)> = match &subset {
            Some(s) => vec![
                (format!("{name}-coarse"), Some(s), max_iters),
                (name.to_string(), None, cfg.refine_iters.max(1)),
            ],
            None => vec![(name.to_string(), None, max_iters)],
        };
        for (label, set, iters) in passes {
            let start = trace.len();
            let out = run_stage(&mut prob, params, with_shape, set, iters, scale, &mut trace, total_iters)?;
            params = out.params;
            scale = out.scale.max(0.1);
            total_iters += out.iterations;
            stages.push(StageSummary {
                name: label,
                trace_start: start,
                iterations: out.iterations,
                converged: out.converged,
                correspondences: set.map_or(full_count, |s| s.len()),
            });
            converged = out.converged;
        }
    }

    let shape = if cfg.optimize_shape {
        prob.shape_with(&params.radii)
    } else {
        initial_shape.clone()
    };
    let pose = prob.pose_of(&params).canonical();
    let gaze = gaze_direction(&pose);
    Ok(SolveResult {
        pose,
        shape,
        trace,
        iterations: total_iters,
        converged,
        gaze: [gaze.x, gaze.y, gaze.z],
        stages,
    })
}

/// Block average over `factor x factor` pixels; trailing partial blocks are
/// dropped.
fn downsample(img: &Image, factor: usize) -> Image {
    let (w, h) = (img.width / factor, img.height / factor);
    let mut out = Image::new(w, h, img.channels);
    let norm = 1.0 / (factor * factor) as f64;
    for y in 0..h {
        for x in 0..w {
            for c in 0..img.channels {
                let mut sum = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        sum += img.get(x * factor + dx, y * factor + dy, c);
                    }
                }
                out.set(x, y, c, sum * norm);
            }
        }
    }
    out
}

/// Observation and scene the initialization scores against: at most 2000
/// evenly strided valid correspondences, or the image block-averaged to
/// about 64 px wide.
fn scoring_problem(scene: &SceneConfig, observation: &Observation) -> Result<(SceneConfig, Observation)> {
    match observation {
        Observation::Correspondences(set) => {
            let valid = set.only_valid();
            if valid.is_empty() {
                return Err(Error::NoCorrespondences);
            }
            let cap = 2000;
            let subset = if valid.len() > cap {
                let stride = valid.len() as f64 / cap as f64;
                let idx: Vec<usize> = (0..cap).map(|k| (k as f64 * stride) as usize).collect();
                valid.select(&idx)
            } else {
                valid
            };
            Ok((scene.clone(), Observation::Correspondences(subset)))
        }
        Observation::Photometric { image, pattern } => {
            let factor = (image.width / 64).max(1);
            if factor == 1 {
                return Ok((scene.clone(), observation.clone()));
            }
            let small = downsample(image, factor);
            Ok((
                scene.with_resolution(small.width, small.height),
                Observation::Photometric {
                    image: small,
                    pattern: pattern.clone(),
                },
            ))
        }
    }
}

/// Data loss of every cell of a 9 x 9 grid of gaze angles over +-10
/// degrees at `translation`, best first.
fn grid_scores(scene: &SceneConfig, shape: &EyeShape, observation: &Observation, translation: [f64; 3]) -> Result<Vec<(f64, EyePose)>> {
    let renderer = DiffRenderer::new(scene, shape)?;
    let mut scores = Vec::with_capacity(81);
    for ie in -4..=4 {
        for ia in -4..=4 {
            let pose = EyePose::from_gaze_angles(2.5 * ie as f64, 2.5 * ia as f64).with_translation(translation);
            let loss = match observation {
                Observation::Correspondences(set) => {
                    let (r, _) = renderer.forward(&pose, &set.pixels);
                    correspondence_loss(set, &r, Some(1.0))?.0.total
                }
                Observation::Photometric { image, pattern } => {
                    let (img, _) = renderer.render_photometric(&pose, pattern);
                    photometric_loss(image, &img, &vec![true; image.num_pixels()])?.0.total
                }
            };
            scores.push((loss, pose));
        }
    }
    scores.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(scores)
}

/// Coarse initialization: the best of a 9 x 9 grid of gaze angles over
/// +-10 degrees at `translation`, scored with the base shape. A previous
/// frame's pose, when given, is returned unchanged.
pub fn init_pose(
    scene: &SceneConfig,
    shape: &EyeShape,
    observation: &Observation,
    translation: [f64; 3],
    previous: Option<&EyePose>,
) -> Result<EyePose> {
    if let Some(p) = previous {
        return Ok(*p);
    }
    let (scene, obs) = scoring_problem(scene, observation)?;
    Ok(grid_scores(&scene, shape, &obs, translation)?[0].1)
}

/// Multi-start initialization: short pose-only solves at fixed translation
/// from the `starts` best grid cells and from the rest gaze, on the scoring
/// subset; the lowest final loss wins. With no starts this is
/// [`init_pose`] without a previous frame.
///
/// Grid scores alone can prefer a flat region where no observed pixel sees
/// the cornea over a narrow basin around the true gaze.
pub fn init_pose_refined(
    scene: &SceneConfig,
    shape: &EyeShape,
    observation: &Observation,
    translation: [f64; 3],
    starts: usize,
    iterations: usize,
) -> Result<EyePose> {
    let (scene, obs) = scoring_problem(scene, observation)?;
    let scores = grid_scores(&scene, shape, &obs, translation)?;
    if starts == 0 {
        return Ok(scores[0].1);
    }
    let rest = EyePose::identity().with_translation(translation);
    let mut candidates: Vec<EyePose> = scores.iter().take(starts).map(|s| s.1).collect();
    if !candidates.contains(&rest) {
        candidates.push(rest);
    }
    let cfg = SolveConfig {
        mode: observation.mode(),
        optimize_shape: false,
        pin_translation: true,
        max_iters_pose: iterations.max(1),
        max_correspondences: None,
        ..SolveConfig::default()
    };
    let mut best: Option<(f64, EyePose)> = None;
    for start in candidates {
        let res = solve(&scene, shape, &start, &obs, &cfg)?;
        let loss = res.final_loss().map_or(f64::INFINITY, |l| l.total);
        if best.as_ref().is_none_or(|b| loss < b.0) {
            best = Some((loss, res.pose));
        }
    }
    Ok(best.expect("at least one start").1)
}
