//! Synthetic experiments: capture simulation, metrics, the sweep,
//! comparison and sparsity studies, and report files.

use std::io::Write;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eye_model::{base_shape, gaze_angles, gaze_direction, EyePose, EyeShape};
use crate::eye_model::{DEFAULT_BAND_FRACTION, DEFAULT_LOOPS, DEFAULT_VERTICES_PER_LOOP};
use crate::glint::{self, GlintCalibration, GlintRig};
use crate::losses::RegularizerConfig;
use crate::patterns::{self, add_poisson_noise, CorrespondenceSet, DecodeConfig, Image, Orientation, Pattern, PhaseCaptures};
use crate::render::DiffRenderer;
use crate::scene::{default_scene, SceneConfig};
use crate::solver::{self, gaze_error, Mode, Observation, SolveConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    RotationSweep,
    MethodComparison,
    Sparsity,
    Ablation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Correspondence,
    Photometric,
    Glint,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Correspondence => "correspondence",
            Method::Photometric => "photometric",
            Method::Glint => "glint",
        }
    }
}

/// Two-sphere parameters of the simulated eye.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthShape {
    pub sclera_radius: f64,
    pub cornea_radius: f64,
    pub sphere_center_offset: f64,
}

impl TruthShape {
    pub fn base() -> Self {
        Self {
            sclera_radius: crate::eye_model::SCLERA_RADIUS,
            cornea_radius: crate::eye_model::CORNEA_RADIUS,
            sphere_center_offset: crate::eye_model::SPHERE_CENTER_OFFSET,
        }
    }

    /// Flatter, slightly shifted cornea unknown to the solver.
    pub fn deformed() -> Self {
        Self {
            cornea_radius: 8.3,
            sphere_center_offset: 5.8,
            ..Self::base()
        }
    }

    pub fn build(&self) -> Result<EyeShape> {
        EyeShape::two_sphere(
            self.sclera_radius,
            self.cornea_radius,
            self.sphere_center_offset,
            DEFAULT_LOOPS,
            DEFAULT_VERTICES_PER_LOOP,
            -DEFAULT_BAND_FRACTION * self.sclera_radius,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomGazes {
    pub count: usize,
    /// Elevation and azimuth are drawn uniformly from `+-max_angle` degrees.
    pub max_angle: f64,
}

/// Which form of the mean relative error to compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelativeError {
    /// `|mean_a - mean_ref|`.
    Absolute,
    /// `|(mean_a - mean_ref) - (a - ref)|`: deviation from the commanded
    /// relative rotation.
    Commanded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    /// Scene file; the built-in scene when absent.
    pub scene: Option<PathBuf>,
    /// Camera resolution `[width, height]` overriding the scene's.
    pub resolution: Option<[usize; 2]>,
    pub truth_shape: TruthShape,
    /// Commanded azimuths in degrees (sweep, ablation and sparsity).
    pub positions: Vec<f64>,
    pub reference_position: f64,
    pub repeats: usize,
    pub random_gazes: RandomGazes,
    /// Relative Poisson noise at full intensity; 0 disables noise.
    pub noise_level: f64,
    pub methods: Vec<Method>,
    pub thinning: Vec<f64>,
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub solver: SolveConfig,
    pub decode: DecodeConfig,
    pub pattern_mean: f64,
    pub pattern_amplitude: f64,
    /// Frequency of the horizontal sinusoid shown for the photometric method.
    pub photometric_frequency: f64,
    /// Use the `n - 1` divisor for precision.
    pub sample_precision: bool,
    /// A method fails when more than this fraction of its poses fail.
    pub max_failure_fraction: f64,
    pub glint_ring_radius: f64,
    pub glint_source_radius: f64,
    /// Calibration grid is `n x n` over `+-calibration_range` degrees.
    pub calibration_grid: usize,
    pub calibration_range: f64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::RotationSweep,
            scene: None,
            resolution: None,
            truth_shape: TruthShape::base(),
            positions: vec![-4.0, -2.0, 0.0, 2.0, 4.0],
            reference_position: 0.0,
            repeats: 20,
            random_gazes: RandomGazes {
                count: 50,
                max_angle: 5.0,
            },
            noise_level: 0.05,
            methods: vec![Method::Correspondence, Method::Photometric, Method::Glint],
            thinning: vec![1.0, 1.0 / 50.0, 1.0 / 100.0, 1.0 / 200.0, 1.0 / 500.0],
            seed: 0,
            output: None,
            solver: SolveConfig::default(),
            decode: DecodeConfig::default(),
            pattern_mean: 0.3,
            pattern_amplitude: 0.3,
            photometric_frequency: 1.0,
            sample_precision: false,
            max_failure_fraction: 0.2,
            glint_ring_radius: 14.0,
            glint_source_radius: 2.5,
            calibration_grid: 3,
            calibration_range: 5.0,
        }
    }
}

impl ExperimentSpec {
    /// Reads a spec; relative `scene` and `output` paths resolve against
    /// the spec's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut spec: Self = toml::from_str(&std::fs::read_to_string(path)?)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        for p in [&mut spec.scene, &mut spec.output].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidExperiment(m.into()));
        if self.repeats < 1 || self.random_gazes.count < 1 {
            return bad("repeat and gaze counts must be at least 1");
        }
        if !(self.random_gazes.max_angle >= 0.0) {
            return bad("gaze bound must be nonnegative");
        }
        if !(self.noise_level >= 0.0 && self.noise_level < 1.0) {
            return bad("noise level must lie in [0, 1)");
        }
        if self.thinning.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return bad("thinning factors must lie in (0, 1]");
        }
        if !(self.max_failure_fraction >= 0.0 && self.max_failure_fraction <= 1.0) {
            return bad("failure fraction must lie in [0, 1]");
        }
        if let Some([w, h]) = self.resolution {
            if w == 0 || h == 0 {
                return bad("resolution must be positive");
            }
        }
        match self.kind {
            ExperimentKind::RotationSweep | ExperimentKind::Ablation | ExperimentKind::Sparsity => {
                if !self.positions.contains(&self.reference_position) {
                    return bad("reference position missing from positions");
                }
            }
            ExperimentKind::MethodComparison => {
                if self.methods.is_empty() {
                    return bad("no methods to compare");
                }
            }
        }
        if self.kind == ExperimentKind::Sparsity && self.thinning.is_empty() {
            return bad("no thinning factors");
        }
        self.solver.validate()
    }

    pub fn scene_config(&self) -> Result<SceneConfig> {
        let scene = match &self.scene {
            Some(p) => SceneConfig::load(p)?,
            None => default_scene(),
        };
        Ok(match self.resolution {
            Some([w, h]) => scene.with_resolution(w, h),
            None => scene,
        })
    }

    fn photometric_pattern(&self) -> Pattern {
        Pattern::sinusoid(
            self.photometric_frequency,
            Orientation::Horizontal,
            0.0,
            self.pattern_mean,
            self.pattern_amplitude,
        )
    }
}

/// Poisson scale giving `level` relative noise at full intensity.
pub fn noise_scale(level: f64) -> Option<f64> {
    (level > 0.0).then(|| 1.0 / (level * level))
}

/// Independent, reproducible random stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Renders noisy captures of a known eye.
pub struct Simulator {
    pub scene: SceneConfig,
    renderer: DiffRenderer,
    decode: DecodeConfig,
    sequences: [[Pattern; 4]; 4],
    noise: Option<f64>,
}

impl Simulator {
    pub fn new(scene: &SceneConfig, truth: &EyeShape, decode: DecodeConfig, mean: f64, amplitude: f64, noise_level: f64) -> Result<Self> {
        Ok(Self {
            scene: scene.clone(),
            renderer: DiffRenderer::new(scene, truth)?,
            decode,
            sequences: patterns::capture_sequences(&decode, mean, amplitude),
            noise: noise_scale(noise_level),
        })
    }

    fn noisy(&self, img: &Image, rng: &mut ChaCha8Rng) -> Image {
        match self.noise {
            Some(s) => add_poisson_noise(img, s, rng),
            None => img.clone(),
        }
    }

    /// Phase-shift captures at `pose` with the eye's hit mask.
    pub fn captures(&self, pose: &EyePose, rng: &mut ChaCha8Rng) -> (PhaseCaptures, Vec<bool>) {
        let pats: Vec<&Pattern> = self.sequences.iter().flat_map(|s| s.iter()).collect();
        let (out, imgs) = self.renderer.render_many(pose, &pats);
        let imgs: Vec<Image> = imgs.iter().map(|i| self.noisy(i, rng)).collect();
        let q = |k: usize| -> [Image; 4] { std::array::from_fn(|i| imgs[4 * k + i].clone()) };
        let caps = PhaseCaptures {
            horizontal: q(0),
            vertical: q(1),
            coarse_horizontal: Some(q(2)),
            coarse_vertical: Some(q(3)),
        };
        (caps, out.hit_mask)
    }

    /// Decoded correspondences at `pose`, restricted to the eye.
    pub fn correspondences(&self, pose: &EyePose, rng: &mut ChaCha8Rng) -> Result<CorrespondenceSet> {
        let (caps, mask) = self.captures(pose, rng);
        patterns::decode(&caps, &self.decode, Some(&mask))
    }

    pub fn image(&self, pose: &EyePose, pattern: &Pattern, rng: &mut ChaCha8Rng) -> Image {
        self.noisy(&self.renderer.render(pose, pattern).image, rng)
    }
}

/// Root-mean-square deviation from the mean; `sample` uses `n - 1`.
pub fn precision(angles: &[f64], sample: bool) -> Result<f64> {
    let n = angles.len();
    if n < 2 {
        return Err(Error::TooFewMeasurements { needed: 2, got: n });
    }
    let mean = angles.iter().sum::<f64>() / n as f64;
    let ss: f64 = angles.iter().map(|a| (a - mean).powi(2)).sum();
    Ok((ss / if sample { n - 1 } else { n } as f64).sqrt())
}

/// Per-position mean relative error against the `reference` position, for
/// `(position, mean angle)` pairs.
pub fn mean_relative_error(means: &[(f64, f64)], reference: f64, form: RelativeError) -> Result<Vec<(f64, f64)>> {
    let &(_, mref) = means
        .iter()
        .find(|(a, _)| *a == reference)
        .ok_or_else(|| Error::InvalidExperiment("reference position missing".into()))?;
    Ok(means
        .iter()
        .map(|&(a, m)| {
            let commanded = match form {
                RelativeError::Absolute => 0.0,
                RelativeError::Commanded => a - reference,
            };
            (a, ((m - mref) - commanded).abs())
        })
        .collect())
}

/// One solve (or glint estimate) of the raw table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Measurement {
    pub index: usize,
    pub variant: String,
    pub group: String,
    pub repeat: usize,
    pub truth_elevation: f64,
    pub truth_azimuth: f64,
    pub est_elevation: Option<f64>,
    pub est_azimuth: Option<f64>,
    pub gaze_error: Option<f64>,
    pub iterations: usize,
    pub correspondences: usize,
    pub status: String,
}

impl Measurement {
    fn new(index: usize, variant: &str, group: String, repeat: usize, truth: (f64, f64)) -> Self {
        Self {
            index,
            variant: variant.into(),
            group,
            repeat,
            truth_elevation: truth.0,
            truth_azimuth: truth.1,
            est_elevation: None,
            est_azimuth: None,
            gaze_error: None,
            iterations: 0,
            correspondences: 0,
            status: String::new(),
        }
    }

    fn record(mut self, outcome: Result<(Vector3<f64>, usize, usize)>) -> Self {
        match outcome {
            Ok((gaze, iterations, correspondences)) => {
                let (el, az) = gaze_angles(&gaze);
                let truth = gaze_direction(&EyePose::from_gaze_angles(self.truth_elevation, self.truth_azimuth));
                self.est_elevation = Some(el);
                self.est_azimuth = Some(az);
                self.gaze_error = Some(gaze_error(&gaze, &truth));
                self.iterations = iterations;
                self.correspondences = correspondences;
                self.status = "ok".into();
            }
            Err(e) => self.status = e.to_string(),
        }
        self
    }

    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// One aggregate row of `summary.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub variant: String,
    pub group: String,
    pub position: Option<f64>,
    pub measurements: usize,
    pub failures: usize,
    /// Mean estimated azimuth.
    pub mean_angle: Option<f64>,
    pub precision: Option<f64>,
    pub relative_error: Option<f64>,
    pub mean_gaze_error: Option<f64>,
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub spec: ExperimentSpec,
    pub measurements: Vec<Measurement>,
    pub summary: Vec<SummaryRow>,
}

impl MetricsReport {
    pub fn row(&self, variant: &str, group: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.variant == variant && r.group == group)
    }
}

fn position_label(a: f64) -> String {
    format!("{a}")
}

fn factor_label(f: f64) -> String {
    let inv = 1.0 / f;
    if f < 1.0 && (inv - inv.round()).abs() < 1e-9 {
        format!("1/{}", inv.round())
    } else {
        format!("{f}")
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs `spec` on a pool of `jobs` threads (all cores when `None`).
pub fn run_experiment(spec: &ExperimentSpec, jobs: Option<usize>) -> Result<MetricsReport> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidExperiment(e.to_string()))?;
    pool.install(|| match spec.kind {
        ExperimentKind::RotationSweep => run_rotation_sweep(spec),
        ExperimentKind::Ablation => run_ablation(spec),
        ExperimentKind::MethodComparison => run_method_comparison(spec),
        ExperimentKind::Sparsity => run_sparsity_study(spec),
    })
}

fn check_kind(spec: &ExperimentSpec, kinds: &[ExperimentKind]) -> Result<()> {
    if !kinds.contains(&spec.kind) {
        return Err(Error::InvalidExperiment(format!("unexpected kind {:?}", spec.kind)));
    }
    spec.validate()
}

/// Position-major list of `(position, repeat)` pairs.
fn sweep_grid(spec: &ExperimentSpec) -> Vec<(f64, usize)> {
    spec.positions
        .iter()
        .flat_map(|&a| (0..spec.repeats).map(move |r| (a, r)))
        .collect()
}

fn solve_correspondences(
    scene: &SceneConfig,
    shape: &EyeShape,
    set: &CorrespondenceSet,
    cfg: &SolveConfig,
) -> Result<(Vector3<f64>, usize, usize)> {
    let obs = Observation::Correspondences(set.clone());
    let init = solver::init_pose_refined(scene, shape, &obs, [0.0; 3], cfg.init_starts, cfg.init_iters)?;
    let res = solver::solve(scene, shape, &init, &obs, cfg)?;
    Ok((Vector3::from(res.gaze), res.iterations, set.num_valid()))
}

/// Per-position mean azimuth, precision and relative error of one variant.
fn sweep_summary(spec: &ExperimentSpec, variant: &str, rows: &[Measurement]) -> Result<Vec<SummaryRow>> {
    let mut out = Vec::new();
    let mut means = Vec::new();
    for &a in &spec.positions {
        let group = position_label(a);
        let mine: Vec<&Measurement> = rows.iter().filter(|m| m.variant == variant && m.group == group).collect();
        let ok: Vec<f64> = mine.iter().filter(|m| m.ok()).filter_map(|m| m.est_azimuth).collect();
        let errs: Vec<f64> = mine.iter().filter_map(|m| m.gaze_error).collect();
        let m = mean(&ok);
        if let Some(m) = m {
            means.push((a, m));
        }
        out.push(SummaryRow {
            variant: variant.into(),
            group,
            position: Some(a),
            measurements: mine.len(),
            failures: mine.len() - ok.len(),
            mean_angle: m,
            precision: precision(&ok, spec.sample_precision).ok(),
            relative_error: None,
            mean_gaze_error: mean(&errs),
            failed: ok.len() < 2,
        });
    }
    if means.iter().any(|&(a, _)| a == spec.reference_position) {
        for (a, eps) in mean_relative_error(&means, spec.reference_position, RelativeError::Commanded)? {
            if let Some(r) = out.iter_mut().find(|r| r.position == Some(a)) {
                r.relative_error = Some(eps);
            }
        }
    }
    Ok(out)
}

/// Sweep over commanded azimuths with repeated noisy captures. Each
/// `(variant, regularizers)` pair is solved on the same captures.
fn sweep_variants(spec: &ExperimentSpec, variants: &[(&str, RegularizerConfig)]) -> Result<MetricsReport> {
    let scene = spec.scene_config()?;
    let sim = Simulator::new(&scene, &spec.truth_shape.build()?, spec.decode, spec.pattern_mean, spec.pattern_amplitude, spec.noise_level)?;
    let solver_shape = base_shape();
    let grid = sweep_grid(spec);
    let per: Vec<Vec<Measurement>> = grid
        .par_iter()
        .enumerate()
        .map(|(i, &(a, rep))| {
            let mut rng = stream_rng(spec.seed, i as u64);
            let set = sim.correspondences(&EyePose::from_gaze_angles(0.0, a), &mut rng);
            variants
                .iter()
                .enumerate()
                .map(|(v, (name, reg))| {
                    let cfg = SolveConfig {
                        mode: Mode::Correspondence,
                        regularizers: *reg,
                        seed: spec.seed.wrapping_add(i as u64),
                        ..spec.solver
                    };
                    let m = Measurement::new(i * variants.len() + v, name, position_label(a), rep, (0.0, a));
                    m.record(set.as_ref().map_err(clone_err).and_then(|s| solve_correspondences(&scene, &solver_shape, s, &cfg)))
                })
                .collect()
        })
        .collect();
    let measurements: Vec<Measurement> = per.into_iter().flatten().collect();
    let mut summary = Vec::new();
    for (name, _) in variants {
        summary.extend(sweep_summary(spec, name, &measurements)?);
    }
    Ok(MetricsReport {
        spec: spec.clone(),
        measurements,
        summary,
    })
}

fn clone_err(e: &Error) -> Error {
    Error::InvalidExperiment(e.to_string())
}

/// Commanded azimuth sweep with the configured solver.
pub fn run_rotation_sweep(spec: &ExperimentSpec) -> Result<MetricsReport> {
    check_kind(spec, &[ExperimentKind::RotationSweep])?;
    sweep_variants(spec, &[("", spec.solver.regularizers)])
}

/// The sweep solved with the configured regularizers and without any.
pub fn run_ablation(spec: &ExperimentSpec) -> Result<MetricsReport> {
    check_kind(spec, &[ExperimentKind::Ablation])?;
    sweep_variants(
        spec,
        &[
            ("regularized", spec.solver.regularizers),
            ("unregularized", RegularizerConfig::off()),
        ],
    )
}

/// Shared random gaze set `(elevation, azimuth)` of a comparison.
pub fn random_gazes(spec: &ExperimentSpec) -> Vec<(f64, f64)> {
    let mut rng = stream_rng(spec.seed, u64::MAX);
    let b = spec.random_gazes.max_angle;
    let dist = Uniform::new_inclusive(-b, b);
    (0..spec.random_gazes.count)
        .map(|_| (dist.sample(&mut rng), dist.sample(&mut rng)))
        .collect()
}

/// Correspondence, photometric and glint tracking on one shared set of
/// random gazes with translation pinned to zero.
pub fn run_method_comparison(spec: &ExperimentSpec) -> Result<MetricsReport> {
    check_kind(spec, &[ExperimentKind::MethodComparison])?;
    let scene = spec.scene_config()?;
    let shape = spec.truth_shape.build()?;
    let sim = Simulator::new(&scene, &shape, spec.decode, spec.pattern_mean, spec.pattern_amplitude, spec.noise_level)?;
    let gazes = random_gazes(spec);
    let rig = GlintRig::ring(&scene.screen, spec.glint_ring_radius, spec.glint_source_radius);
    let calibration: Option<std::result::Result<GlintCalibration, String>> = spec.methods.contains(&Method::Glint).then(|| {
        let mut rng = stream_rng(spec.seed, u64::MAX - 1);
        let grid = glint::calibration_grid(spec.calibration_grid, spec.calibration_range);
        let noise = sim.noise;
        glint::calibrate(&scene, &shape, &rig, &grid, |img| match noise {
            Some(s) => add_poisson_noise(&img, s, &mut rng),
            None => img,
        })
        .map_err(|e| e.to_string())
    });
    let photo = spec.photometric_pattern();
    let glint_pattern = rig.pattern(&scene.screen);
    let base_cfg = SolveConfig {
        pin_translation: true,
        optimize_shape: false,
        ..spec.solver
    };
    let tasks: Vec<(usize, Method)> = (0..gazes.len())
        .flat_map(|g| spec.methods.iter().map(move |&m| (g, m)))
        .collect();
    let measurements: Vec<Measurement> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, &(g, method))| {
            let (el, az) = gazes[g];
            let truth = EyePose::from_gaze_angles(el, az);
            let mut rng = stream_rng(spec.seed, i as u64);
            let cfg = SolveConfig {
                seed: spec.seed.wrapping_add(i as u64),
                ..base_cfg
            };
            let outcome = match method {
                Method::Correspondence => sim
                    .correspondences(&truth, &mut rng)
                    .and_then(|set| solve_correspondences(&scene, &shape, &set, &cfg)),
                Method::Photometric => {
                    let obs = Observation::Photometric {
                        image: sim.image(&truth, &photo, &mut rng),
                        pattern: photo.clone(),
                    };
                    let cfg = SolveConfig {
                        mode: Mode::Photometric,
                        ..cfg
                    };
                    solver::init_pose_refined(&scene, &shape, &obs, [0.0; 3], cfg.init_starts, cfg.init_iters)
                        .and_then(|init| solver::solve(&scene, &shape, &init, &obs, &cfg))
                        .map(|r| (Vector3::from(r.gaze), r.iterations, 0))
                }
                Method::Glint => match calibration.as_ref().expect("calibrated when requested") {
                    Ok(calib) => glint::extract_features(&sim.image(&truth, &glint_pattern, &mut rng)).map(|f| {
                        let (e, a) = glint::estimate_gaze(&f, calib);
                        (gaze_direction(&EyePose::from_gaze_angles(e, a)), 0, f.glint_centroids.len())
                    }),
                    Err(msg) => Err(Error::Calibration(msg.clone())),
                },
            };
            Measurement::new(i, "", method.name().into(), g, (el, az)).record(outcome)
        })
        .collect();
    let mut summary = Vec::new();
    for &method in &spec.methods {
        let mine: Vec<&Measurement> = measurements.iter().filter(|m| m.group == method.name()).collect();
        let errs: Vec<f64> = mine.iter().filter_map(|m| m.gaze_error).collect();
        let failures = mine.len() - errs.len();
        summary.push(SummaryRow {
            variant: String::new(),
            group: method.name().into(),
            position: None,
            measurements: mine.len(),
            failures,
            mean_angle: None,
            precision: precision(&errs, spec.sample_precision).ok(),
            relative_error: None,
            mean_gaze_error: mean(&errs),
            failed: failures as f64 > spec.max_failure_fraction * mine.len() as f64,
        });
    }
    Ok(MetricsReport {
        spec: spec.clone(),
        measurements,
        summary,
    })
}

/// The sweep protocol re-solved on random subsets of each decoded set.
/// Summary rows average precision and relative error over positions.
pub fn run_sparsity_study(spec: &ExperimentSpec) -> Result<MetricsReport> {
    check_kind(spec, &[ExperimentKind::Sparsity])?;
    let scene = spec.scene_config()?;
    let sim = Simulator::new(&scene, &spec.truth_shape.build()?, spec.decode, spec.pattern_mean, spec.pattern_amplitude, spec.noise_level)?;
    let solver_shape = base_shape();
    let grid = sweep_grid(spec);
    let nf = spec.thinning.len();
    let per: Vec<Vec<Measurement>> = grid
        .par_iter()
        .enumerate()
        .map(|(i, &(a, rep))| {
            let mut rng = stream_rng(spec.seed, i as u64);
            let full = sim.correspondences(&EyePose::from_gaze_angles(0.0, a), &mut rng).map(|s| s.only_valid());
            spec.thinning
                .iter()
                .enumerate()
                .map(|(k, &f)| {
                    let m = Measurement::new(i * nf + k, "", factor_label(f), rep, (0.0, a));
                    let cfg = SolveConfig {
                        mode: Mode::Correspondence,
                        seed: spec.seed.wrapping_add(i as u64),
                        ..spec.solver
                    };
                    let outcome = full.as_ref().map_err(clone_err).and_then(|set| {
                        let n = set.len();
                        let keep = ((n as f64) * f).round() as usize;
                        if keep == 0 {
                            return Err(Error::NoCorrespondences);
                        }
                        let sub = if keep >= n {
                            set.clone()
                        } else {
                            let mut idx = sample(&mut rng, n, keep).into_vec();
                            idx.sort_unstable();
                            set.select(&idx)
                        };
                        solve_correspondences(&scene, &solver_shape, &sub, &cfg)
                    });
                    let mut m = m.record(outcome);
                    m.group = factor_label(f);
                    m
                })
                .collect()
        })
        .collect();
    let measurements: Vec<Measurement> = per.into_iter().flatten().collect();
    let mut summary = Vec::new();
    for &f in &spec.thinning {
        let label = factor_label(f);
        let mut rows: Vec<Measurement> = measurements.iter().filter(|m| m.group == label).cloned().collect();
        for r in rows.iter_mut() {
            r.group = position_label(r.truth_azimuth);
        }
        let per_pos = sweep_summary(spec, "", &rows)?;
        let sigmas: Vec<f64> = per_pos.iter().filter_map(|r| r.precision).collect();
        let eps: Vec<f64> = per_pos
            .iter()
            .filter(|r| r.position != Some(spec.reference_position))
            .filter_map(|r| r.relative_error)
            .collect();
        let errs: Vec<f64> = rows.iter().filter_map(|m| m.gaze_error).collect();
        let failures = rows.len() - errs.len();
        summary.push(SummaryRow {
            variant: String::new(),
            group: label,
            position: None,
            measurements: rows.len(),
            failures,
            mean_angle: None,
            precision: mean(&sigmas),
            relative_error: mean(&eps),
            mean_gaze_error: mean(&errs),
            failed: sigmas.len() < spec.positions.len(),
        });
    }
    Ok(MetricsReport {
        spec: spec.clone(),
        measurements,
        summary,
    })
}

fn write_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

const PALETTE: [[u8; 3]; 4] = [[52, 101, 164], [204, 0, 0], [78, 154, 6], [196, 160, 0]];

/// Bars of `(value, error)` per group, one color per series, with error
/// bars and a zero line. Missing values leave gaps.
pub fn bar_plot(series: &[Vec<Option<(f64, f64)>>]) -> RgbImage {
    let (w, h, margin) = (640u32, 400u32, 30u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let groups = series.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
    let vals = series.iter().flatten().flatten();
    let top = vals.clone().map(|(v, e)| v + e).fold(0.0f64, f64::max);
    let bottom = vals.map(|(v, e)| v - e).fold(0.0f64, f64::min);
    let span = if top - bottom > 0.0 { top - bottom } else { 1.0 };
    let plot_h = (h - 2 * margin) as f64;
    let y_of = |v: f64| (h - margin) as f64 - (v - bottom) / span * plot_h;
    let vline = |img: &mut RgbImage, x: u32, y0: f64, y1: f64, c: Rgb<u8>| {
        let (a, b) = (y0.min(y1).round().max(0.0) as u32, y0.max(y1).round().min((h - 1) as f64) as u32);
        for y in a..=b {
            if x < w {
                img.put_pixel(x, y, c);
            }
        }
    };
    let slot = (w - 2 * margin) as f64 / groups as f64;
    let nser = series.len().max(1) as f64;
    let bar_w = (slot * 0.8 / nser).max(1.0);
    for (s, values) in series.iter().enumerate() {
        let color = Rgb(PALETTE[s % PALETTE.len()]);
        for (g, v) in values.iter().enumerate() {
            let Some((v, e)) = v else { continue };
            let x0 = margin as f64 + g as f64 * slot + slot * 0.1 + s as f64 * bar_w;
            for x in x0.round() as u32..(x0 + bar_w).round() as u32 {
                vline(&mut img, x, y_of(0.0), y_of(*v), color);
            }
            let xc = (x0 + bar_w / 2.0).round() as u32;
            vline(&mut img, xc, y_of(v - e), y_of(v + e), Rgb([0, 0, 0]));
            for x in xc.saturating_sub(3)..=xc + 3 {
                for y in [y_of(v - e), y_of(v + e)] {
                    let y = y.round().clamp(0.0, (h - 1) as f64) as u32;
                    if x < w {
                        img.put_pixel(x, y, Rgb([0, 0, 0]));
                    }
                }
            }
        }
    }
    let y0 = y_of(0.0).round().clamp(0.0, (h - 1) as f64) as u32;
    for x in margin..w - margin {
        img.put_pixel(x, y0, Rgb([0, 0, 0]));
    }
    for y in margin..=h - margin {
        img.put_pixel(margin, y, Rgb([0, 0, 0]));
    }
    img
}

fn save_plot(img: &RgbImage, path: &Path) -> Result<()> {
    Ok(img.save(path)?)
}

/// Writes `raw.csv`, `summary.csv`, plots and `manifest.txt` into `dir`.
pub fn emit_report(report: &MetricsReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = vec![dir.join("raw.csv"), dir.join("summary.csv")];
    write_rows(&report.measurements, &written[0])?;
    write_rows(&report.summary, &written[1])?;

    let mut variants: Vec<&str> = Vec::new();
    for r in &report.summary {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    let series_of = |value: &dyn Fn(&SummaryRow) -> Option<(f64, f64)>| -> Vec<Vec<Option<(f64, f64)>>> {
        variants
            .iter()
            .map(|v| report.summary.iter().filter(|r| r.variant == *v).map(value).collect())
            .collect()
    };
    let plots: Vec<(&str, Vec<Vec<Option<(f64, f64)>>>)> = match report.spec.kind {
        ExperimentKind::RotationSweep | ExperimentKind::Ablation => vec![
            (
                "deviation.png",
                series_of(&|r| Some((r.mean_angle? - r.position?, r.precision.unwrap_or(0.0)))),
            ),
            ("relative_error.png", series_of(&|r| Some((r.relative_error?, 0.0)))),
        ],
        ExperimentKind::MethodComparison | ExperimentKind::Sparsity => vec![(
            "error.png",
            series_of(&|r| Some((r.mean_gaze_error?, r.precision.unwrap_or(0.0)))),
        )],
    };
    for (name, series) in plots {
        let path = dir.join(name);
        save_plot(&bar_plot(&series), &path)?;
        written.push(path);
    }

    let path = dir.join("manifest.txt");
    let mut f = std::fs::File::create(&path)?;
    writeln!(f, "version = \"{}\"", env!("CARGO_PKG_VERSION"))?;
    writeln!(f, "seed = {}", report.spec.seed)?;
    writeln!(f, "measurements = {}", report.measurements.len())?;
    writeln!(
        f,
        "# relative_error is |(mean_a - mean_ref) - (a - ref)| in degrees: the deviation of the estimated from the commanded relative rotation"
    )?;
    writeln!(f, "\n[spec]\n{}", report.spec.to_toml()?)?;
    written.push(path);
    Ok(written)
}
