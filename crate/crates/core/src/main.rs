use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use deflecto::eye_model::{base_shape, gaze_angles, gaze_direction, EyePose, EyeShape};
use deflecto::glint::{self, GlintRig};
use deflecto::harness::{self, ExperimentSpec};
use deflecto::patterns::{add_poisson_noise, load_external_correspondences, Image, PatternSpec, Raster};
use deflecto::render::DiffRenderer;
use deflecto::scene::{default_scene, SceneConfig};
use deflecto::solver::{self, gaze_error, Mode, Observation, SolveConfig};
use deflecto::{Error, Result};

#[derive(Parser)]
#[command(name = "deflecto", version, about = "Eye tracking from screen reflections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Correspondence,
    Photometric,
}

#[derive(Subcommand)]
enum Command {
    /// Render the eye reflecting a pattern.
    Render {
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Eye shape file; the base eye when absent.
        #[arg(long)]
        shape: Option<PathBuf>,
        /// Pose file; the identity pose when absent.
        #[arg(long)]
        pose: Option<PathBuf>,
        #[arg(long)]
        pattern: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit pose (and optionally shape) to an observation.
    Solve {
        #[arg(long)]
        scene: Option<PathBuf>,
        /// `px,py,u,v` CSV, or a PNG capture for photometric mode.
        #[arg(long)]
        observation: PathBuf,
        #[arg(long, value_enum, default_value = "correspondence")]
        mode: ModeArg,
        /// Pattern shown during a photometric capture.
        #[arg(long)]
        pattern: Option<PathBuf>,
        #[arg(long)]
        optimize_shape: bool,
        /// Solver configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Initial shape; the base eye when absent.
        #[arg(long)]
        shape: Option<PathBuf>,
        /// Result file; the loss trace is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate the glint tracker and estimate gazes.
    Baseline {
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Light source rig; a 12-source ring when absent.
        #[arg(long)]
        rig: Option<PathBuf>,
        /// Shape of the simulated eye.
        #[arg(long)]
        shape: Option<PathBuf>,
        /// Calibration grid size per axis.
        #[arg(long, default_value_t = 3)]
        calibrate_grid: usize,
        /// Half range of the calibration grid in degrees.
        #[arg(long, default_value_t = 5.0)]
        calibrate_range: f64,
        /// CSV of `elevation,azimuth` test gazes in degrees.
        #[arg(long)]
        poses: PathBuf,
        /// Relative Poisson noise; 0 renders noiseless images.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment spec and write its report.
    Experiment {
        #[arg(long)]
        spec: PathBuf,
        /// Output directory; overrides the spec.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; all cores when absent.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn load_scene(path: &Option<PathBuf>) -> Result<SceneConfig> {
    path.as_deref().map_or_else(|| Ok(default_scene()), SceneConfig::load)
}

fn load_shape(path: &Option<PathBuf>) -> Result<EyeShape> {
    path.as_deref().map_or_else(|| Ok(base_shape()), EyeShape::load)
}

fn render(scene: &Option<PathBuf>, shape: &Option<PathBuf>, pose: &Option<PathBuf>, pattern: &Path, out: &Path) -> Result<()> {
    let scene = load_scene(scene)?;
    let shape = load_shape(shape)?;
    let pose: EyePose = match pose {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?)?,
        None => EyePose::identity(),
    };
    let pattern = PatternSpec::load(pattern)?;
    let out_img = DiffRenderer::new(&scene, &shape)?.render(&pose, &pattern);
    std::fs::create_dir_all(out)?;
    out_img.image.save_png(&out.join("image.png"))?;
    let (w, h) = (out_img.width(), out_img.height());
    for c in 0..out_img.image.channels {
        let mut r = Raster::new(w, h);
        for (i, v) in r.data.iter_mut().enumerate() {
            *v = out_img.image.data[i * out_img.image.channels + c];
        }
        r.save(&out.join(format!("image_{c}.f32")))?;
    }
    for (k, name) in ["u", "v"].iter().enumerate() {
        let mut r = Raster::new(w, h);
        for (v, uv) in r.data.iter_mut().zip(&out_img.screen_uv) {
            *v = uv[k];
        }
        r.save(&out.join(format!("uv_{name}.f32")))?;
    }
    let mask = out_img.hit_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    Image::from_data(w, h, 1, mask)?.save_png(&out.join("mask.png"))
}

#[allow(clippy::too_many_arguments)]
fn solve(
    scene: &Option<PathBuf>,
    observation: &Path,
    mode: ModeArg,
    pattern: &Option<PathBuf>,
    optimize_shape: bool,
    config: &Option<PathBuf>,
    shape: &Option<PathBuf>,
    out: &Path,
) -> Result<()> {
    let scene = load_scene(scene)?;
    let shape = load_shape(shape)?;
    let mut cfg: SolveConfig = match config {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?)?,
        None => SolveConfig::default(),
    };
    cfg.optimize_shape |= optimize_shape;
    let obs = match mode {
        ModeArg::Correspondence => {
            cfg.mode = Mode::Correspondence;
            Observation::Correspondences(load_external_correspondences(observation)?)
        }
        ModeArg::Photometric => {
            cfg.mode = Mode::Photometric;
            let pattern = pattern
                .as_deref()
                .ok_or_else(|| Error::InvalidPattern("photometric mode needs --pattern".into()))?;
            Observation::Photometric {
                image: Image::load_png(observation)?,
                pattern: PatternSpec::load(pattern)?,
            }
        }
    };
    let init = solver::init_pose_refined(&scene, &shape, &obs, [0.0; 3], cfg.init_starts, cfg.init_iters)?;
    let res = solver::solve(&scene, &shape, &init, &obs, &cfg)?;
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    res.save(out)?;
    let (el, az) = gaze_angles(&res.gaze.into());
    println!("gaze elevation {el:.4} azimuth {az:.4} iterations {} converged {}", res.iterations, res.converged);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn baseline(
    scene: &Option<PathBuf>,
    rig: &Option<PathBuf>,
    shape: &Option<PathBuf>,
    grid: usize,
    range: f64,
    poses: &Path,
    noise: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let scene = load_scene(scene)?;
    let shape = load_shape(shape)?;
    let rig = match rig {
        Some(p) => GlintRig::load(p)?,
        None => GlintRig::default_for(&scene.screen),
    };
    rig.validate(&scene.screen)?;
    let scale = harness::noise_scale(noise);
    let mut rng = harness::stream_rng(seed, 0);
    let mut prepare = |img: Image| match scale {
        Some(s) => add_poisson_noise(&img, s, &mut rng),
        None => img,
    };
    let calib = glint::calibrate(&scene, &shape, &rig, &glint::calibration_grid(grid, range), &mut prepare)?;
    log::info!("calibration residual {:.4} deg", calib.residual_rms);

    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(poses)?;
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["truth_elevation", "truth_azimuth", "est_elevation", "est_azimuth", "gaze_error", "glints", "status"])?;
    let renderer = DiffRenderer::new(&scene, &shape)?;
    let pattern = rig.pattern(&scene.screen);
    for rec in rd.deserialize() {
        let (el, az): (f64, f64) = rec?;
        let truth = EyePose::from_gaze_angles(el, az);
        let img = prepare(renderer.render(&truth, &pattern).image);
        let row = match glint::extract_features(&img) {
            Ok(f) => {
                let (e, a) = glint::estimate_gaze(&f, &calib);
                let err = gaze_error(&gaze_direction(&EyePose::from_gaze_angles(e, a)), &gaze_direction(&truth));
                let n = f.glint_valid.iter().filter(|&&v| v).count();
                [el, az, e, a, err].map(|v| v.to_string()).into_iter().chain([n.to_string(), "ok".into()]).collect::<Vec<_>>()
            }
            Err(e) => vec![el.to_string(), az.to_string(), String::new(), String::new(), String::new(), "0".into(), e.to_string()],
        };
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn experiment(spec: &Path, out: &Option<PathBuf>, seed: Option<u64>, jobs: Option<usize>) -> Result<()> {
    let mut spec = ExperimentSpec::load(spec)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(o) = out {
        spec.output = Some(o.clone());
    }
    let dir = spec
        .output
        .clone()
        .ok_or_else(|| Error::InvalidExperiment("no output directory".into()))?;
    let report = harness::run_experiment(&spec, jobs)?;
    for p in harness::emit_report(&report, &dir)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Render {
            scene,
            shape,
            pose,
            pattern,
            out,
        } => render(scene, shape, pose, pattern, out),
        Command::Solve {
            scene,
            observation,
            mode,
            pattern,
            optimize_shape,
            config,
            shape,
            out,
        } => solve(scene, observation, *mode, pattern, *optimize_shape, config, shape, out),
        Command::Baseline {
            scene,
            rig,
            shape,
            calibrate_grid,
            calibrate_range,
            poses,
            noise,
            seed,
            out,
        } => baseline(scene, rig, shape, *calibrate_grid, *calibrate_range, poses, *noise, *seed, out),
        Command::Experiment { spec, out, seed, jobs } => experiment(spec, out, *seed, *jobs),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
