//! Glint-tracking baseline: a ring of point-like sources reflected by the
//! cornea, pupil-glint feature vectors and a calibrated quadratic mapping to
//! gaze angles.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eye_model::{EyePose, EyeShape};
use crate::patterns::{Image, Pattern};
use crate::render;
use crate::scene::{SceneConfig, ScreenModel};

pub const NUM_SOURCES: usize = 12;
/// Minimum number of detected glints for a usable feature.
pub const MIN_GLINTS: usize = 6;
pub const GLINT_THRESHOLD: f64 = 0.8;
pub const PUPIL_THRESHOLD: f64 = 0.1;

/// Illumination sources shown on the screen as small bright discs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlintRig {
    /// Source centers on the screen plane (mm).
    pub source_positions: Vec<[f64; 3]>,
    pub source_radius: f64,
}

impl GlintRig {
    /// `NUM_SOURCES` sources evenly spaced on a circle of `ring_radius` mm
    /// around the screen center.
    pub fn ring(screen: &ScreenModel, ring_radius: f64, source_radius: f64) -> Self {
        let c = Vector3::from(screen.center);
        let eu = Vector3::from(screen.basis_u).normalize();
        let ev = Vector3::from(screen.basis_v).normalize();
        let source_positions = (0..NUM_SOURCES)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / NUM_SOURCES as f64;
                (c + (eu * a.cos() + ev * a.sin()) * ring_radius).into()
            })
            .collect();
        Self {
            source_positions,
            source_radius,
        }
    }

    /// Default rig: 14 mm ring, 2.5 mm discs.
    pub fn default_for(screen: &ScreenModel) -> Self {
        Self::ring(screen, 14.0, 2.5)
    }

    pub fn validate(&self, screen: &ScreenModel) -> Result<()> {
        if self.source_positions.len() != NUM_SOURCES {
            return Err(Error::InvalidScene(format!(
                "glint rig needs {NUM_SOURCES} sources, got {}",
                self.source_positions.len()
            )));
        }
        if !(self.source_radius > 0.0) {
            return Err(Error::InvalidScene("source radius must be positive".into()));
        }
        let [ru, rv] = self.uv_radii(screen);
        let n = screen.normal();
        for p in &self.source_positions {
            let d = Vector3::from(*p) - Vector3::from(screen.center);
            if d.dot(&n).abs() > 1e-6 {
                return Err(Error::InvalidScene("glint source off the screen plane".into()));
            }
            let [u, v] = self.to_uv(screen, p);
            if u.abs() + ru > 1.0 || v.abs() + rv > 1.0 {
                return Err(Error::InvalidScene("glint ring exceeds the screen".into()));
            }
        }
        Ok(())
    }

    fn to_uv(&self, screen: &ScreenModel, p: &[f64; 3]) -> [f64; 2] {
        let d = Vector3::from(*p) - Vector3::from(screen.center);
        let (bu, bv) = (Vector3::from(screen.basis_u), Vector3::from(screen.basis_v));
        [d.dot(&bu) / bu.norm_squared(), d.dot(&bv) / bv.norm_squared()]
    }

    fn uv_radii(&self, screen: &ScreenModel) -> [f64; 2] {
        [
            self.source_radius / Vector3::from(screen.basis_u).norm(),
            self.source_radius / Vector3::from(screen.basis_v).norm(),
        ]
    }

    /// Screen content: black except the source discs.
    pub fn pattern(&self, screen: &ScreenModel) -> Pattern {
        Pattern::Spots {
            centers: self.source_positions.iter().map(|p| self.to_uv(screen, p)).collect(),
            radii: self.uv_radii(screen),
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(toml::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, toml::to_string(self)?)?;
        Ok(())
    }
}

/// Glint and pupil measurements of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct GlintFeatures {
    /// Sub-pixel centroids (pixel centers at `x + 0.5`), at most `NUM_SOURCES`.
    pub glint_centroids: Vec<[f64; 2]>,
    pub glint_valid: Vec<bool>,
    pub pupil_center: [f64; 2],
    /// `(pupil - glint) / mean inter-glint distance` per valid glint.
    pub normalized_vectors: Vec<[f64; 2]>,
}

impl GlintFeatures {
    /// Mean of the normalized vectors.
    pub fn mean_vector(&self) -> [f64; 2] {
        let n = self.normalized_vectors.len().max(1) as f64;
        let s = self.normalized_vectors.iter().fold([0.0; 2], |a, v| [a[0] + v[0], a[1] + v[1]]);
        [s[0] / n, s[1] / n]
    }
}

pub fn render_glints(scene: &SceneConfig, shape: &EyeShape, pose: &EyePose, rig: &GlintRig, resolution: (usize, usize)) -> Result<Image> {
    rig.validate(&scene.screen)?;
    Ok(render::render(scene, shape, pose, &rig.pattern(&scene.screen), resolution)?.image)
}

/// 8-connected components of `mask` as pixel index lists, in scan order of
/// their first pixel.
fn components(mask: &[bool], w: usize, h: usize) -> Vec<Vec<usize>> {
    let mut label = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] {
            continue;
        }
        let mut comp = Vec::new();
        label[start] = true;
        stack.push(start);
        while let Some(k) = stack.pop() {
            comp.push(k);
            let (x, y) = ((k % w) as isize, (k / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask[q] && !label[q] {
                        label[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// `comp` plus the pixels it encloses.
fn fill_holes(comp: &[usize], w: usize, h: usize) -> Vec<usize> {
    let mut inside = vec![false; w * h];
    for &k in comp {
        inside[k] = true;
    }
    // Background reachable from the border through 4-neighbours.
    let mut outside = vec![false; w * h];
    let mut stack: Vec<usize> = (0..w * h)
        .filter(|&k| {
            let (x, y) = (k % w, k / w);
            (x == 0 || y == 0 || x == w - 1 || y == h - 1) && !inside[k]
        })
        .collect();
    for &k in &stack {
        outside[k] = true;
    }
    while let Some(k) = stack.pop() {
        let (x, y) = (k % w, k / w);
        let mut visit = |q: usize| {
            if !inside[q] && !outside[q] {
                outside[q] = true;
                stack.push(q);
            }
        };
        if x > 0 {
            visit(k - 1);
        }
        if x + 1 < w {
            visit(k + 1);
        }
        if y > 0 {
            visit(k - w);
        }
        if y + 1 < h {
            visit(k + w);
        }
    }
    (0..w * h).filter(|&k| !outside[k]).collect()
}

/// Detects glints and the pupil in a luminance image.
///
/// Glints are bright components (above `GLINT_THRESHOLD`) with
/// intensity-weighted centroids; the `NUM_SOURCES` nearest the pupil are
/// kept. The pupil is the largest dark component (below
/// `PUPIL_THRESHOLD`) with enclosed glints filled in.
pub fn extract_features(img: &Image) -> Result<GlintFeatures> {
    let (w, h) = (img.width, img.height);
    let lum: Vec<f64> = (0..img.num_pixels()).map(|k| img.luminance(k)).collect();

    let dark: Vec<bool> = lum.iter().map(|&v| v < PUPIL_THRESHOLD).collect();
    let pupil = components(&dark, w, h)
        .into_iter()
        .max_by_key(|c| c.len())
        .ok_or_else(|| Error::FeatureExtraction("no pupil".into()))?;
    let disc = fill_holes(&pupil, w, h);
    let n = disc.len() as f64;
    let pupil_center = disc.iter().fold([0.0; 2], |a, &k| {
        [a[0] + ((k % w) as f64 + 0.5) / n, a[1] + ((k / w) as f64 + 0.5) / n]
    });

    let bright: Vec<bool> = lum.iter().map(|&v| v > GLINT_THRESHOLD).collect();
    let mut glints: Vec<[f64; 2]> = components(&bright, w, h)
        .iter()
        .map(|c| {
            let total: f64 = c.iter().map(|&k| lum[k]).sum();
            c.iter().fold([0.0; 2], |a, &k| {
                [
                    a[0] + lum[k] * ((k % w) as f64 + 0.5) / total,
                    a[1] + lum[k] * ((k / w) as f64 + 0.5) / total,
                ]
            })
        })
        .collect();
    let dist2 = |g: &[f64; 2]| (g[0] - pupil_center[0]).powi(2) + (g[1] - pupil_center[1]).powi(2);
    glints.sort_by(|a, b| dist2(a).total_cmp(&dist2(b)));
    glints.truncate(NUM_SOURCES);
    if glints.len() < MIN_GLINTS {
        return Err(Error::FeatureExtraction(format!(
            "{} glints found, need {MIN_GLINTS}",
            glints.len()
        )));
    }

    let mut spacing = 0.0;
    let mut pairs = 0.0;
    for i in 0..glints.len() {
        for j in i + 1..glints.len() {
            spacing += ((glints[i][0] - glints[j][0]).powi(2) + (glints[i][1] - glints[j][1]).powi(2)).sqrt();
            pairs += 1.0;
        }
    }
    spacing /= pairs;
    if !(spacing > 0.0) {
        return Err(Error::FeatureExtraction("coincident glints".into()));
    }
    let normalized_vectors = glints
        .iter()
        .map(|g| [(pupil_center[0] - g[0]) / spacing, (pupil_center[1] - g[1]) / spacing])
        .collect();
    Ok(GlintFeatures {
        glint_valid: vec![true; glints.len()],
        glint_centroids: glints,
        pupil_center,
        normalized_vectors,
    })
}

/// Quadratic map from the mean normalized vector to gaze angles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlintCalibration {
    /// Coefficients of `[1, x, y, x^2, x y, y^2]` for elevation and azimuth.
    pub elevation: [f64; 6],
    pub azimuth: [f64; 6],
    /// Calibration gazes `(elevation, azimuth)` in degrees.
    pub grid: Vec<[f64; 2]>,
    /// RMS angular residual over the calibration set, degrees.
    pub residual_rms: f64,
}

fn monomials(v: [f64; 2]) -> [f64; 6] {
    let [x, y] = v;
    [1.0, x, y, x * x, x * y, y * y]
}

fn eval(c: &[f64; 6], v: [f64; 2]) -> f64 {
    monomials(v).iter().zip(c).map(|(a, b)| a * b).sum()
}

/// Least-squares fit from feature vectors to `(elevation, azimuth)` pairs.
pub fn fit_calibration(features: &[[f64; 2]], gazes: &[[f64; 2]]) -> Result<GlintCalibration> {
    if features.len() != gazes.len() {
        return Err(Error::DimensionMismatch("features and gazes differ in count".into()));
    }
    if features.len() < 6 {
        return Err(Error::TooFewMeasurements {
            needed: 6,
            got: features.len(),
        });
    }
    let a = DMatrix::from_fn(features.len(), 6, |i, j| monomials(features[i])[j]);
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-10 * smax) {
        return Err(Error::Calibration("rank-deficient calibration design".into()));
    }
    let solve = |col: usize| -> Result<[f64; 6]> {
        let b = DVector::from_iterator(gazes.len(), gazes.iter().map(|g| g[col]));
        let x = svd.solve(&b, 0.0).map_err(|e| Error::Calibration(e.into()))?;
        Ok(std::array::from_fn(|k| x[k]))
    };
    let elevation = solve(0)?;
    let azimuth = solve(1)?;
    let mut sq = 0.0;
    for (f, g) in features.iter().zip(gazes) {
        sq += (eval(&elevation, *f) - g[0]).powi(2) + (eval(&azimuth, *f) - g[1]).powi(2);
    }
    Ok(GlintCalibration {
        elevation,
        azimuth,
        grid: gazes.to_vec(),
        residual_rms: (sq / features.len() as f64).sqrt(),
    })
}

/// `n x n` gaze grid over `+-half_range` degrees.
pub fn calibration_grid(n: usize, half_range: f64) -> Vec<[f64; 2]> {
    let step = |i: usize| if n == 1 { 0.0 } else { -half_range + 2.0 * half_range * i as f64 / (n - 1) as f64 };
    (0..n * n).map(|k| [step(k / n), step(k % n)]).collect()
}

/// Renders each grid gaze (translation zero), extracts features and fits.
/// `prepare` may alter each rendered image (for instance to add noise).
pub fn calibrate(
    scene: &SceneConfig,
    shape: &EyeShape,
    rig: &GlintRig,
    grid: &[[f64; 2]],
    mut prepare: impl FnMut(Image) -> Image,
) -> Result<GlintCalibration> {
    if grid.len() < 6 {
        return Err(Error::TooFewMeasurements {
            needed: 6,
            got: grid.len(),
        });
    }
    let res = (scene.camera.width, scene.camera.height);
    let mut feats = Vec::with_capacity(grid.len());
    for g in grid {
        let img = render_glints(scene, shape, &EyePose::from_gaze_angles(g[0], g[1]), rig, res)?;
        feats.push(extract_features(&prepare(img))?.mean_vector());
    }
    fit_calibration(&feats, grid)
}

/// `(elevation, azimuth)` in degrees.
pub fn estimate_gaze(features: &GlintFeatures, calib: &GlintCalibration) -> (f64, f64) {
    let v = features.mean_vector();
    (eval(&calib.elevation, v), eval(&calib.azimuth, v))
}
