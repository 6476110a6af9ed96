//! Data terms and shape regularizers, each returning its value and gradient.

use std::io::Write;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Dual, Real};
use crate::error::{Error, Result};
use crate::eye_model::{EyeMesh, EyeShape};
use crate::patterns::{CorrespondenceSet, Image};
use crate::render::RenderedCorrespondence;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub lambda_grad: f64,
    pub lambda_mc: f64,
    pub lambda_lap: f64,
    /// Curvature threshold in 1/mm.
    pub t_mc: f64,
    /// Average the mesh laplacian over vertices instead of summing.
    #[serde(default = "yes")]
    pub laplacian_mean: bool,
    /// In the solver, apply the laplacian to the displacement from the
    /// initial mesh.
    #[serde(default = "yes")]
    pub laplacian_relative: bool,
}

fn yes() -> bool {
    true
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            lambda_grad: 0.05,
            lambda_mc: 0.1,
            lambda_lap: 0.1,
            t_mc: 4.0,
            laplacian_mean: true,
            laplacian_relative: true,
        }
    }
}

impl RegularizerConfig {
    pub fn off() -> Self {
        Self {
            lambda_grad: 0.0,
            lambda_mc: 0.0,
            lambda_lap: 0.0,
            t_mc: 4.0,
            laplacian_mean: true,
            laplacian_relative: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_grad, self.lambda_mc, self.lambda_lap, self.t_mc];
        if all.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidExperiment("regularizer weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Objective value with its breakdown.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub data: f64,
    pub grad: f64,
    pub mc: f64,
    pub lap: f64,
    /// Correspondences or pixels entering the data term.
    pub count: usize,
    /// Requested correspondences whose render missed.
    pub misses: usize,
}

impl LossReport {
    pub fn components(&self) -> [(&'static str, f64); 4] {
        [("data", self.data), ("grad", self.grad), ("mc", self.mc), ("lap", self.lap)]
    }

    /// Sum of the components.
    pub fn recompute_total(&mut self) {
        self.total = self.data + self.grad + self.mc + self.lap;
    }

    /// Adds the regularizer components of `reg`.
    pub fn with_regularizers(mut self, reg: &LossReport) -> Self {
        self.grad = reg.grad;
        self.mc = reg.mc;
        self.lap = reg.lap;
        self.recompute_total();
        self
    }
}

/// Writes the per-iteration trace `iter,total,data,grad,mc,lap,count`.
pub fn write_trace(reports: &[LossReport], w: impl Write) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["iter", "total", "data", "grad", "mc", "lap", "count"])?;
    for (k, r) in reports.iter().enumerate() {
        wr.write_record([
            k.to_string(),
            r.total.to_string(),
            r.data.to_string(),
            r.grad.to_string(),
            r.mc.to_string(),
            r.lap.to_string(),
            r.count.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// `d` for `d <= 1`, `ln d + 1` beyond.
pub fn dist_clamped(d: f64) -> f64 {
    dist_clamped_with_slope(d).0
}

/// Value and derivative of [`dist_clamped`].
pub fn dist_clamped_with_slope(d: f64) -> (f64, f64) {
    if d <= 1.0 {
        (d, 1.0)
    } else {
        (d.ln() + 1.0, 1.0 / d)
    }
}

/// Mean clamped squared distance between measured and rendered screen
/// coordinates, with its gradient with respect to each rendered `uv`.
///
/// Pairs whose render missed are left out of the mean and counted; with a
/// `miss_penalty` each miss instead adds that constant to the mean.
pub fn correspondence_loss(
    measured: &CorrespondenceSet,
    rendered: &[RenderedCorrespondence],
    miss_penalty: Option<f64>,
) -> Result<(LossReport, Vec<[f64; 2]>)> {
    if measured.len() != rendered.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} measured vs {} rendered correspondences",
            measured.len(),
            rendered.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut misses = 0usize;
    let mut grad = vec![[0.0; 2]; rendered.len()];
    for k in 0..rendered.len() {
        if !measured.valid[k] {
            continue;
        }
        let r = &rendered[k];
        if !r.hit {
            misses += 1;
            continue;
        }
        let m = measured.screen_uv[k];
        let (du, dv) = (r.uv[0] - m[0], r.uv[1] - m[1]);
        let (val, slope) = dist_clamped_with_slope(du * du + dv * dv);
        sum += val;
        grad[k] = [2.0 * slope * du, 2.0 * slope * dv];
        count += 1;
    }
    let denom = match miss_penalty {
        Some(p) => {
            sum += p * misses as f64;
            count + misses
        }
        None => count,
    };
    if count == 0 {
        return Err(Error::NoCorrespondences);
    }
    let inv = 1.0 / denom as f64;
    for g in grad.iter_mut() {
        g[0] *= inv;
        g[1] *= inv;
    }
    let mut report = LossReport {
        data: sum * inv,
        count,
        misses,
        ..Default::default()
    };
    report.recompute_total();
    Ok((report, grad))
}

/// Mean absolute difference over masked pixels and all channels, with its
/// gradient with respect to `rendered` (zero at equality).
pub fn photometric_loss(gt: &Image, rendered: &Image, mask: &[bool]) -> Result<(LossReport, Image)> {
    if !gt.same_shape(rendered) || mask.len() != gt.num_pixels() {
        return Err(Error::DimensionMismatch("photometric inputs differ in shape".into()));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let nc = gt.channels;
    let inv = 1.0 / (count * nc) as f64;
    let mut grad = Image::new(gt.width, gt.height, nc);
    let mut sum = 0.0;
    for (k, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for c in 0..nc {
            let i = k * nc + c;
            let d = rendered.data[i] - gt.data[i];
            sum += d.abs();
            grad.data[i] = if d > 0.0 {
                inv
            } else if d < 0.0 {
                -inv
            } else {
                0.0
            };
        }
    }
    let mut report = LossReport {
        data: sum * inv,
        count,
        ..Default::default()
    };
    report.recompute_total();
    Ok((report, grad))
}

/// Penalizes radius increases toward the apex: `sum max(0, r[i+1] - r[i])`
/// over loops ordered by increasing height.
pub fn grad_regularizer(radii: &[f64], heights: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(radii.len(), heights.len(), "one height per radius");
    assert!(heights.windows(2).all(|w| w[0] < w[1]), "heights must increase");
    let mut grad = vec![0.0; radii.len()];
    let mut value = 0.0;
    for i in 0..radii.len().saturating_sub(1) {
        let d = radii[i + 1] - radii[i];
        if d > 0.0 {
            value += d;
            grad[i + 1] += 1.0;
            grad[i] -= 1.0;
        }
    }
    (value, grad)
}

/// Menger curvature `4 area / (|ab| |bc| |ca|)` of three points.
pub fn menger_curvature<T: Real>(a: [T; 2], b: [T; 2], c: [T; 2]) -> T {
    let len = |p: [T; 2], q: [T; 2]| ((p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1])).sqrt();
    let cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    // 4 * area = 2 |cross|
    cross.abs() * 2.0 / (len(a, b) * len(b, c) * len(c, a))
}

/// `sum max(0, MC(p_i, p_i+1, p_i+2) - t_mc)` over profile points
/// `p_j = (c_j, r_j)`, with the gradient with respect to the radii.
pub fn menger_regularizer(radii: &[f64], heights: &[f64], t_mc: f64) -> (f64, Vec<f64>) {
    assert_eq!(radii.len(), heights.len(), "one height per radius");
    let n = radii.len();
    assert!(n >= 3, "menger curvature needs at least three loops");
    let mut grad = vec![0.0; n];
    let mut value = 0.0;
    for i in 0..n - 2 {
        let pts: [[f64; 2]; 3] = std::array::from_fn(|k| [heights[i + k], radii[i + k]]);
        if pts[0] == pts[1] || pts[1] == pts[2] {
            log::warn!("duplicate profile points at loop {i}; treated as collinear");
            continue;
        }
        let p: [[Dual<3>; 2]; 3] = std::array::from_fn(|k| [Dual::constant(pts[k][0]), Dual::variable(pts[k][1], k)]);
        let mc = menger_curvature(p[0], p[1], p[2]);
        if mc.v > t_mc {
            value += mc.v - t_mc;
            for k in 0..3 {
                grad[i + k] += mc.d[k];
            }
        }
    }
    (value, grad)
}

/// One-ring neighbors of every vertex, sorted.
pub fn vertex_neighbors(mesh: &EyeMesh) -> Vec<Vec<usize>> {
    let mut nb = vec![Vec::new(); mesh.vertices.len()];
    for f in &mesh.faces {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            nb[a].push(b);
            nb[b].push(a);
        }
    }
    for v in nb.iter_mut() {
        v.sort_unstable();
        v.dedup();
    }
    nb
}

/// `||L V||^2` with the uniform graph Laplacian, and its gradient with
/// respect to the vertex positions. Isolated vertices are skipped.
pub fn laplacian_regularizer(mesh: &EyeMesh) -> (f64, Vec<Vector3<f64>>) {
    let nb = vertex_neighbors(mesh);
    let v = &mesh.vertices;
    let mut delta = vec![Vector3::zeros(); v.len()];
    let mut value = 0.0;
    for i in 0..v.len() {
        if nb[i].is_empty() {
            log::warn!("vertex {i} is isolated; left out of the laplacian");
            continue;
        }
        let mean = nb[i].iter().map(|&k| v[k]).sum::<Vector3<f64>>() / nb[i].len() as f64;
        delta[i] = v[i] - mean;
        value += delta[i].norm_squared();
    }
    let mut grad = vec![Vector3::zeros(); v.len()];
    for i in 0..v.len() {
        if nb[i].is_empty() {
            continue;
        }
        grad[i] += 2.0 * delta[i];
        let w = 2.0 / nb[i].len() as f64;
        for &k in &nb[i] {
            grad[k] -= w * delta[i];
        }
    }
    (value, grad)
}

/// Chains vertex gradients of a loop mesh to its loop radii.
pub fn vertex_to_radii_gradient(shape: &EyeShape, vertex_grad: &[Vector3<f64>]) -> Vec<f64> {
    let h = shape.vertices_per_loop;
    (0..shape.num_loops())
        .map(|j| {
            (0..h)
                .map(|i| {
                    let (s, c) = crate::eye_model::loop_angle(i, h).sin_cos();
                    let g = vertex_grad[j * h + i];
                    g.x * c + g.y * s
                })
                .sum()
        })
        .collect()
}

/// `lambda_grad L_grad + lambda_mc L_mc + lambda_lap L_lap` with the
/// gradient with respect to all loop radii. The profile terms act on the
/// frontal loops (`c_j >= 0`); the laplacian uses the unposed mesh.
pub fn total_shape_regularizer(shape: &EyeShape, mesh: &EyeMesh, cfg: &RegularizerConfig) -> (LossReport, Vec<f64>) {
    let n = shape.num_loops();
    let mut grad = vec![0.0; n];
    let mut report = LossReport::default();
    let front = shape.frontal_loops();
    let (r, c) = (&shape.loop_radii[front.clone()], &shape.loop_heights[front.clone()]);
    if cfg.lambda_grad > 0.0 && r.len() >= 2 {
        let (v, g) = grad_regularizer(r, c);
        report.grad = cfg.lambda_grad * v;
        for (k, gk) in g.iter().enumerate() {
            grad[front.start + k] += cfg.lambda_grad * gk;
        }
    }
    if cfg.lambda_mc > 0.0 && r.len() >= 3 {
        let (v, g) = menger_regularizer(r, c, cfg.t_mc);
        report.mc = cfg.lambda_mc * v;
        for (k, gk) in g.iter().enumerate() {
            grad[front.start + k] += cfg.lambda_mc * gk;
        }
    }
    if cfg.lambda_lap > 0.0 {
        let (v, gv) = laplacian_regularizer(mesh);
        let w = if cfg.laplacian_mean {
            cfg.lambda_lap / mesh.vertices.len().max(1) as f64
        } else {
            cfg.lambda_lap
        };
        report.lap = w * v;
        for (k, gk) in vertex_to_radii_gradient(shape, &gv).iter().enumerate() {
            grad[k] += w * gk;
        }
    }
    report.recompute_total();
    (report, grad)
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;
    use crate::eye_model::{base_shape, build_mesh, EyeShape};

    fn corr(uv: [f64; 2]) -> RenderedCorrespondence {
        RenderedCorrespondence {
            uv,
            hit: true,
            face: Some(0),
        }
    }

    fn measured(uvs: &[[f64; 2]]) -> CorrespondenceSet {
        let mut s = CorrespondenceSet::default();
        for &uv in uvs {
            s.push([0.5, 0.5], uv, true);
        }
        s
    }

    #[test]
    fn dist_clamped_examples() {
        assert_eq!(dist_clamped(0.5), 0.5);
        assert_eq!(dist_clamped(1.0), 1.0);
        assert_abs_diff_eq!(dist_clamped(std::f64::consts::E), 2.0, epsilon = 1e-15);
        // Matching slopes at the branch point.
        let h = 1e-7;
        assert_abs_diff_eq!((dist_clamped(1.0 + h) - 1.0) / h, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn correspondence_loss_examples() {
        let m = measured(&[[0.0, 0.0]]);
        let (r, _) = correspondence_loss(&m, &[corr([0.0, 0.0])], None).unwrap();
        assert_eq!(r.total, 0.0);
        let (r, g) = correspondence_loss(&m, &[corr([0.1, 0.0])], None).unwrap();
        assert_abs_diff_eq!(r.data, 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(g[0][0], 0.2, epsilon = 1e-15);
        let (r, _) = correspondence_loss(&m, &[corr([2.0, 0.0])], None).unwrap();
        assert_abs_diff_eq!(r.data, 4f64.ln() + 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.data, 2.386, epsilon = 1e-3);
    }

    #[test]
    fn misses_are_counted_not_penalized() {
        let m = measured(&[[0.0, 0.0], [0.0, 0.0]]);
        let miss = RenderedCorrespondence {
            uv: [f64::NAN; 2],
            hit: false,
            face: None,
        };
        let (r, g) = correspondence_loss(&m, &[corr([0.1, 0.0]), miss], None).unwrap();
        assert_eq!((r.count, r.misses), (1, 1));
        assert_abs_diff_eq!(r.data, 0.01, epsilon = 1e-15);
        assert_eq!(g[1], [0.0, 0.0]);
        let (r, _) = correspondence_loss(&m, &[corr([0.1, 0.0]), miss], Some(1.0)).unwrap();
        assert_abs_diff_eq!(r.data, 0.505, epsilon = 1e-15);
        assert!(matches!(correspondence_loss(&m, &[miss, miss], None), Err(Error::NoCorrespondences)));
        assert!(matches!(
            correspondence_loss(&CorrespondenceSet::default(), &[], None),
            Err(Error::NoCorrespondences)
        ));
    }

    #[test]
    fn photometric_examples() {
        let a = Image::filled(3, 2, 3, 0.4);
        let mask = vec![true; 6];
        assert_eq!(photometric_loss(&a, &a, &mask).unwrap().0.total, 0.0);
        let one = Image::filled(3, 2, 3, 1.0);
        let zero = Image::filled(3, 2, 3, 0.0);
        assert_eq!(photometric_loss(&one, &zero, &mask).unwrap().0.total, 1.0);
        let mut gt = Image::filled(2, 1, 1, 0.0);
        let mut re = Image::filled(2, 1, 1, 0.0);
        gt.data[1] = 0.75;
        re.data[1] = 0.5;
        let (r, g) = photometric_loss(&gt, &re, &[false, true]).unwrap();
        assert_eq!(r.total, 0.25);
        assert_eq!(g.data, vec![0.0, -1.0]);
        assert!(matches!(photometric_loss(&gt, &re, &[false, false]), Err(Error::EmptyMask)));
    }

    #[test]
    fn grad_regularizer_examples() {
        assert_eq!(grad_regularizer(&[7.0, 5.0, 3.0], &[0.0, 1.0, 2.0]).0, 0.0);
        let (v, g) = grad_regularizer(&[3.0, 5.0], &[0.0, 1.0]);
        assert_eq!(v, 2.0);
        assert_eq!(g, vec![-1.0, 1.0]);
        let s = base_shape();
        let f = s.frontal_loops();
        assert_eq!(grad_regularizer(&s.loop_radii[f.clone()], &s.loop_heights[f]).0, 0.0);
    }

    #[test]
    fn menger_examples() {
        let c = [[0.0, 1.0], [1.0, 2.0], [3.0, 4.0]];
        assert_eq!(menger_curvature(c[0], c[1], c[2]), 0.0);
        // Three points on a circle of radius 0.5 centered at the origin.
        let on = |t: f64| [0.5 * t.cos(), 0.5 * t.sin()];
        assert_abs_diff_eq!(menger_curvature(on(0.1), on(1.3), on(2.9)), 2.0, epsilon = 1e-12);
        // Circle of curvature 5 with threshold 4 contributes 1.
        let on5 = |t: f64| [0.2 * t.cos(), 0.2 * t.sin() + 1.0];
        let (heights, radii): (Vec<f64>, Vec<f64>) = [on5(-0.4), on5(0.0), on5(0.5)].iter().map(|p| (p[0], p[1])).unzip();
        let (v, _) = menger_regularizer(&radii, &heights, 4.0);
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
        let (v, g) = menger_regularizer(&[1.0, 1.0, 2.0], &[0.0, 0.0, 1.0], 0.0);
        assert_eq!(v, 0.0);
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn menger_gradient_matches_finite_differences() {
        let heights = [0.0, 0.1, 0.25, 0.3, 0.5];
        let radii = [1.0, 1.2, 1.05, 1.3, 1.1];
        let (_, g) = menger_regularizer(&radii, &heights, 4.0);
        let h = 1e-7;
        for k in 0..radii.len() {
            let mut p = radii;
            let mut m = radii;
            p[k] += h;
            m[k] -= h;
            let fd = (menger_regularizer(&p, &heights, 4.0).0 - menger_regularizer(&m, &heights, 4.0).0) / (2.0 * h);
            assert!((g[k] - fd).abs() <= 1e-6 * fd.abs().max(1.0), "{k}: {} vs {fd}", g[k]);
        }
    }

    fn grid_mesh(n: usize) -> EyeMesh {
        let mut vertices = Vec::new();
        for y in 0..n {
            for x in 0..n {
                vertices.push(Vector3::new(x as f64, y as f64, 0.0));
            }
        }
        let mut faces = Vec::new();
        for y in 0..n - 1 {
            for x in 0..n - 1 {
                let a = y * n + x;
                faces.push([a, a + 1, a + n + 1]);
                faces.push([a, a + n + 1, a + n]);
            }
        }
        EyeMesh {
            vertex_normals: vec![Vector3::z(); vertices.len()],
            vertices,
            faces,
            topology: crate::eye_model::LoopTopology {
                loops: n,
                per_loop: n,
                apex: false,
            },
        }
    }

    #[test]
    fn laplacian_examples() {
        let mut m = grid_mesh(4);
        let nb = vertex_neighbors(&m);
        // Interior vertex of a regular triangulated grid: symmetric ring.
        let i = 5;
        let mean = nb[i].iter().map(|&k| m.vertices[k]).sum::<Vector3<f64>>() / nb[i].len() as f64;
        assert_abs_diff_eq!((m.vertices[i] - mean).norm(), 0.0, epsilon = 1e-15);
        for v in m.vertices.iter_mut() {
            *v = Vector3::new(1.0, 2.0, 3.0);
        }
        assert_eq!(laplacian_regularizer(&m).0, 0.0);

        let base = build_mesh(&base_shape()).unwrap();
        let mut bumped = base.clone();
        bumped.vertices[2500] += Vector3::new(0.0, 0.0, 1.0);
        assert!(laplacian_regularizer(&base).0 < laplacian_regularizer(&bumped).0);
    }

    #[test]
    fn laplacian_gradient_matches_finite_differences() {
        let shape = EyeShape::two_sphere(12.0, 8.0, 6.0, 8, 6, -2.4).unwrap();
        let mesh = build_mesh(&shape).unwrap();
        let (_, g) = laplacian_regularizer(&mesh);
        let h = 1e-6;
        for k in [0, 7, 20, mesh.vertices.len() - 1] {
            for c in 0..3 {
                let mut p = mesh.clone();
                let mut m = mesh.clone();
                p.vertices[k][c] += h;
                m.vertices[k][c] -= h;
                let fd = (laplacian_regularizer(&p).0 - laplacian_regularizer(&m).0) / (2.0 * h);
                assert!((g[k][c] - fd).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
        let gr = vertex_to_radii_gradient(&shape, &g);
        for j in 0..shape.num_loops() {
            let eval = |s: f64| {
                let mut sh = shape.clone();
                sh.loop_radii[j] += s * h;
                laplacian_regularizer(&build_mesh(&sh).unwrap()).0
            };
            let fd = (eval(1.0) - eval(-1.0)) / (2.0 * h);
            assert!((gr[j] - fd).abs() < 1e-6 * fd.abs().max(1.0), "{j}: {} vs {fd}", gr[j]);
        }
    }

    #[test]
    fn total_regularizer() {
        let s = base_shape();
        let m = build_mesh(&s).unwrap();
        let (r, _) = total_shape_regularizer(&s, &m, &RegularizerConfig::default());
        assert_eq!(r.grad, 0.0);
        assert_abs_diff_eq!(r.total, r.grad + r.mc + r.lap, epsilon = 1e-12);
        let d = RegularizerConfig::default();
        assert_eq!((d.lambda_grad, d.lambda_mc, d.t_mc, d.lambda_lap), (0.05, 0.1, 4.0, 0.1));
        let mut bent = s.clone();
        let j = bent.frontal_loops().start + 10;
        bent.loop_radii[j] -= 0.5;
        let (r, g) = total_shape_regularizer(&bent, &build_mesh(&bent).unwrap(), &RegularizerConfig::off());
        assert_eq!(r.total, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trace_csv() {
        let mut buf = Vec::new();
        let r = LossReport {
            total: 1.5,
            data: 1.0,
            grad: 0.5,
            count: 3,
            ..Default::default()
        };
        write_trace(&[r], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "iter,total,data,grad,mc,lap,count\n0,1.5,1,0.5,0,0,3\n");
    }

    proptest! {
        #[test]
        fn dist_clamped_is_monotone(a in 0.0f64..50.0, b in 0.0f64..50.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(dist_clamped(lo) <= dist_clamped(hi));
        }

        #[test]
        fn photometric_symmetric_and_permutation_invariant(v in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..30), rot in 0usize..30) {
            let n = v.len();
            let a = Image::from_data(n, 1, 1, v.iter().map(|p| p.0).collect()).unwrap();
            let b = Image::from_data(n, 1, 1, v.iter().map(|p| p.1).collect()).unwrap();
            let mask = vec![true; n];
            let ab = photometric_loss(&a, &b, &mask).unwrap().0.total;
            let ba = photometric_loss(&b, &a, &mask).unwrap().0.total;
            prop_assert!((ab - ba).abs() < 1e-15);
            prop_assert!(ab >= 0.0);
            let mut ar = a.clone();
            let mut br = b.clone();
            ar.data.rotate_left(rot % n);
            br.data.rotate_left(rot % n);
            let r = photometric_loss(&ar, &br, &mask).unwrap().0.total;
            prop_assert!((r - ab).abs() < 1e-12);
        }

        #[test]
        fn correspondence_loss_gradient(uvs in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.5f64..1.5, -1.5f64..1.5), 1..10)) {
            let m = measured(&uvs.iter().map(|p| [p.0, p.1]).collect::<Vec<_>>());
            let r: Vec<_> = uvs.iter().map(|p| corr([p.2, p.3])).collect();
            let (rep, g) = correspondence_loss(&m, &r, None).unwrap();
            prop_assert!(rep.total >= 0.0);
            let h = 1e-7;
            for k in 0..r.len() {
                for c in 0..2 {
                    let mut rp = r.clone();
                    let mut rm = r.clone();
                    rp[k].uv[c] += h;
                    rm[k].uv[c] -= h;
                    let d2 = (r[k].uv[0] - m.screen_uv[k][0]).powi(2) + (r[k].uv[1] - m.screen_uv[k][1]).powi(2);
                    prop_assume!((d2 - 1.0).abs() > 1e-4);
                    let fd = (correspondence_loss(&m, &rp, None).unwrap().0.total
                        - correspondence_loss(&m, &rm, None).unwrap().0.total) / (2.0 * h);
                    prop_assert!((g[k][c] - fd).abs() <= 1e-6 * fd.abs().max(1.0));
                }
            }
        }

        #[test]
        fn profile_regularizers_ignore_pose(t in prop::collection::vec(-1.0f64..1.0, 3)) {
            // The profile terms read only radii and heights; posing the mesh
            // cannot change them. The laplacian is evaluated on the unposed mesh.
            let s = base_shape();
            let pose = crate::eye_model::EyePose { rotation: [t[0] * 0.1, t[1] * 0.1, 0.0], translation: [t[2], 0.0, 0.0] };
            let m = build_mesh(&s).unwrap();
            let posed = crate::eye_model::apply_pose(&m, &pose);
            let (a, _) = laplacian_regularizer(&m);
            let (b, _) = laplacian_regularizer(&posed);
            prop_assert!((a - b).abs() < 1e-9 * a.max(1.0));
        }
    }
}
