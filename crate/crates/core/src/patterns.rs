//! Screen patterns, phase-shift decoding and screen/camera correspondences.
//!
//! Normalized screen coordinates run over `[-1, 1]` along each screen axis.
//! A sinusoid with `f` periods has absolute phase `pi * f * (coord + 1)`; the
//! four phase-shifted captures use pattern offsets `0, -pi/2, -pi, -3pi/2` so
//! that [`four_step_phase`] returns that absolute phase modulo `2 pi`.

use std::f64::consts::{PI, TAU};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};

/// Row-major intensity image with 1 or 3 interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        assert!(channels == 1 || channels == 3, "images have 1 or 3 channels");
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::DimensionMismatch(format!("{channels} channels")));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Channel mean of pixel `k` (row-major index).
    #[inline]
    pub fn luminance(&self, k: usize) -> f64 {
        let px = &self.data[k * self.channels..(k + 1) * self.channels];
        px.iter().sum::<f64>() / self.channels as f64
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Loads an 8-bit or 16-bit PNG as gray or RGB in `[0, 1]`.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        if img.color().has_color() {
            let rgb = img.into_rgb32f();
            Self::from_data(w, h, 3, rgb.into_raw().into_iter().map(f64::from).collect())
        } else {
            let g = img.into_luma16();
            Self::from_data(w, h, 1, g.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect())
        }
    }

    /// Writes an 8-bit PNG, clamping to `[0, 1]`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let color = if self.channels == 3 {
            image::ExtendedColorType::Rgb8
        } else {
            image::ExtendedColorType::L8
        };
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, color)?;
        Ok(())
    }
}

/// Single-channel floating point map (phase, modulation, uv components).
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    /// Writes `"<width> <height> <min> <max>\n"` followed by little-endian
    /// `f32` samples in row-major order. Min and max ignore non-finite values.
    pub fn write(&self, mut w: impl Write) -> Result<()> {
        let finite = self.data.iter().copied().filter(|v| v.is_finite());
        let min = finite.clone().fold(f64::INFINITY, f64::min);
        let max = finite.fold(f64::NEG_INFINITY, f64::max);
        writeln!(w, "{} {} {} {}", self.width, self.height, min, max)?;
        for v in &self.data {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::DimensionMismatch("raster header missing".into()))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::DimensionMismatch("raster header is not text".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let parse = |s: Option<&&str>| -> Result<usize> {
            s.and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::DimensionMismatch(format!("bad raster header {header:?}")))
        };
        let (width, height) = (parse(fields.first())?, parse(fields.get(1))?);
        let body = &bytes[nl + 1..];
        if body.len() != width * height * 4 {
            return Err(Error::DimensionMismatch(format!(
                "raster body has {} bytes, expected {}",
                body.len(),
                width * height * 4
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::fs::File::open(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Varies along the screen `u` axis.
    Horizontal,
    /// Varies along the screen `v` axis.
    Vertical,
}

/// Content shown on the screen.
#[derive(Clone, Debug, PartialEq)]
pub enum Pattern {
    Sinusoid {
        frequency: f64,
        orientation: Orientation,
        offset: f64,
        mean: f64,
        amplitude: f64,
    },
    /// Raster covering the screen; row 0 at `v = -1`, column 0 at `u = -1`.
    Image(Image),
    /// Bright elliptical spots on black, given in normalized coordinates.
    Spots {
        centers: Vec<[f64; 2]>,
        radii: [f64; 2],
    },
}

impl Pattern {
    pub fn sinusoid(frequency: f64, orientation: Orientation, offset: f64, mean: f64, amplitude: f64) -> Self {
        Pattern::Sinusoid {
            frequency,
            orientation,
            offset,
            mean,
            amplitude,
        }
    }

    pub fn uniform(level: f64) -> Self {
        Self::sinusoid(0.0, Orientation::Horizontal, 0.0, level, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Pattern::Sinusoid {
                frequency,
                offset,
                mean,
                amplitude,
                ..
            } => {
                if !(frequency.is_finite() && offset.is_finite() && *amplitude >= 0.0) {
                    return Err(Error::InvalidPattern("non-finite sinusoid parameters".into()));
                }
                if mean - amplitude < -1e-12 || mean + amplitude > 1.0 + 1e-12 {
                    return Err(Error::InvalidPattern(format!(
                        "mean {mean} and amplitude {amplitude} exceed the displayable range"
                    )));
                }
                Ok(())
            }
            Pattern::Image(img) => {
                if img.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::InvalidPattern("image values outside [0, 1]".into()));
                }
                Ok(())
            }
            Pattern::Spots { radii, .. } => {
                if !(radii[0] > 0.0 && radii[1] > 0.0) {
                    return Err(Error::InvalidPattern("spot radii must be positive".into()));
                }
                Ok(())
            }
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Pattern::Image(img) => img.channels,
            _ => 1,
        }
    }

    /// Screen radiance in channel `c` at `uv`, differentiable in `uv` for
    /// sinusoids and (piecewise) for images.
    pub fn value<T: Real>(&self, uv: [T; 2], c: usize) -> T {
        match self {
            Pattern::Sinusoid {
                frequency,
                orientation,
                offset,
                mean,
                amplitude,
            } => {
                let coord = match orientation {
                    Orientation::Horizontal => uv[0],
                    Orientation::Vertical => uv[1],
                };
                ((coord + 1.0) * (PI * frequency) + *offset).cos() * *amplitude + *mean
            }
            Pattern::Image(img) => sample_bilinear(img, uv, c),
            Pattern::Spots { centers, radii } => {
                let (u, v) = (uv[0].value(), uv[1].value());
                let inside = centers.iter().any(|p| {
                    let (du, dv) = ((u - p[0]) / radii[0], (v - p[1]) / radii[1]);
                    du * du + dv * dv <= 1.0
                });
                T::cst(if inside { 1.0 } else { 0.0 })
            }
        }
    }
}

fn sample_bilinear<T: Real>(img: &Image, uv: [T; 2], c: usize) -> T {
    let (u, v) = (uv[0].value(), uv[1].value());
    if !(u.abs() <= 1.0 && v.abs() <= 1.0) {
        return T::zero();
    }
    let x = (uv[0] + 1.0) * (0.5 * img.width as f64) - 0.5;
    let y = (uv[1] + 1.0) * (0.5 * img.height as f64) - 0.5;
    let (xf, yf) = (x.value().floor(), y.value().floor());
    let (fx, fy) = (x - xf, y - yf);
    let clampx = |i: f64| i.clamp(0.0, (img.width - 1) as f64) as usize;
    let clampy = |i: f64| i.clamp(0.0, (img.height - 1) as f64) as usize;
    let (x0, x1, y0, y1) = (clampx(xf), clampx(xf + 1.0), clampy(yf), clampy(yf + 1.0));
    let top = fx * (img.get(x1, y0, c) - img.get(x0, y0, c)) + img.get(x0, y0, c);
    let bot = fx * (img.get(x1, y1, c) - img.get(x0, y1, c)) + img.get(x0, y1, c);
    fy * (bot - top) + top
}

/// Screen color at `uv`; gray patterns are replicated over RGB.
pub fn render_pattern_value(pattern: &Pattern, uv: [f64; 2]) -> [f64; 3] {
    if pattern.channels() == 3 {
        std::array::from_fn(|c| pattern.value(uv, c))
    } else {
        [pattern.value(uv, 0); 3]
    }
}

/// The four captures of one phase-shift sequence.
pub fn phase_shift_sequence(frequency: f64, orientation: Orientation, mean: f64, amplitude: f64) -> [Pattern; 4] {
    std::array::from_fn(|k| Pattern::sinusoid(frequency, orientation, -(k as f64) * PI / 2.0, mean, amplitude))
}

/// Horizontal, vertical, coarse horizontal and coarse vertical sequences
/// matching `cfg`.
pub fn capture_sequences(cfg: &DecodeConfig, mean: f64, amplitude: f64) -> [[Pattern; 4]; 4] {
    [
        phase_shift_sequence(cfg.frequency_h, Orientation::Horizontal, mean, amplitude),
        phase_shift_sequence(cfg.frequency_v, Orientation::Vertical, mean, amplitude),
        phase_shift_sequence(cfg.coarse_frequency, Orientation::Horizontal, mean, amplitude),
        phase_shift_sequence(cfg.coarse_frequency, Orientation::Vertical, mean, amplitude),
    ]
}

/// Pattern description as read from configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PatternSpec {
    Sinusoid {
        frequency: f64,
        orientation: Orientation,
        #[serde(default)]
        offset: f64,
        mean: f64,
        amplitude: f64,
    },
    Uniform {
        level: f64,
    },
    Image {
        path: PathBuf,
    },
}

impl PatternSpec {
    /// Builds the pattern; relative image paths resolve against `base_dir`.
    pub fn build(&self, base_dir: &Path) -> Result<Pattern> {
        let p = match self {
            PatternSpec::Sinusoid {
                frequency,
                orientation,
                offset,
                mean,
                amplitude,
            } => Pattern::sinusoid(*frequency, *orientation, *offset, *mean, *amplitude),
            PatternSpec::Uniform { level } => Pattern::uniform(*level),
            PatternSpec::Image { path } => Pattern::Image(Image::load_png(&base_dir.join(path))?),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Pattern> {
        let spec: PatternSpec = toml::from_str(&std::fs::read_to_string(path)?)?;
        spec.build(path.parent().unwrap_or(Path::new(".")))
    }
}

/// Wrapped phase and modulation amplitude of a four-step sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseMap {
    pub phase: Raster,
    pub modulation: Raster,
}

/// `phi = atan2(I1 - I3, I0 - I2)`, `B = sqrt((I1 - I3)^2 + (I0 - I2)^2) / 2`
/// per pixel (channel mean for color captures).
pub fn four_step_phase(images: [&Image; 4]) -> Result<PhaseMap> {
    let first = images[0];
    if images.iter().any(|im| !im.same_shape(first)) {
        return Err(Error::DimensionMismatch("phase-shift captures differ in shape".into()));
    }
    let n = first.num_pixels();
    let mut phase = Raster::new(first.width, first.height);
    let mut modulation = Raster::new(first.width, first.height);
    for k in 0..n {
        let [i0, i1, i2, i3] = images.map(|im| im.luminance(k));
        let (s, c) = (i1 - i3, i0 - i2);
        phase.data[k] = four_step_atan(s, c);
        modulation.data[k] = 0.5 * s.hypot(c);
    }
    Ok(PhaseMap { phase, modulation })
}

/// `atan2` mapped into `(-pi, pi]`.
fn four_step_atan(s: f64, c: f64) -> f64 {
    let p = s.atan2(c);
    if p <= -PI {
        p + TAU
    } else {
        p
    }
}

/// Wraps into `(-pi, pi]`.
pub fn wrap(p: f64) -> f64 {
    let w = p - TAU * ((p + PI) / TAU).floor();
    if w <= -PI {
        w + TAU
    } else if w > PI {
        w - TAU
    } else {
        w
    }
}

/// Removes `2 pi` jumps so successive differences lie in `(-pi, pi]`.
pub fn unwrap_scanline(wrapped: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(wrapped.len());
    let mut offset = 0.0;
    for (k, &p) in wrapped.iter().enumerate() {
        if k > 0 {
            let d = wrap(p - wrapped[k - 1]);
            offset += d - (p - wrapped[k - 1]);
        }
        out.push(p + offset);
    }
    out
}

/// Pixel with a known absolute screen coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelAnchor {
    pub x: usize,
    pub y: usize,
    pub uv: [f64; 2],
}

/// How the global `2 pi` ambiguity is resolved.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Anchoring {
    /// Low-frequency coarse sequences in both orientations.
    Coarse,
    Pixel(PixelAnchor),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub frequency_h: f64,
    pub frequency_v: f64,
    /// Frequency of the coarse sequences; below 1 so that one period covers
    /// the whole screen with a margin.
    #[serde(default = "default_coarse_frequency")]
    pub coarse_frequency: f64,
    /// Minimum modulation amplitude of a valid pixel.
    pub modulation_threshold: f64,
    pub anchoring: Anchoring,
}

pub const DEFAULT_COARSE_FREQUENCY: f64 = 0.75;

fn default_coarse_frequency() -> f64 {
    DEFAULT_COARSE_FREQUENCY
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            frequency_h: 16.0,
            frequency_v: 7.4,
            coarse_frequency: DEFAULT_COARSE_FREQUENCY,
            modulation_threshold: 0.05,
            anchoring: Anchoring::Coarse,
        }
    }
}

/// Captured phase-shift sequences of one measurement.
#[derive(Clone, Debug)]
pub struct PhaseCaptures {
    pub horizontal: [Image; 4],
    pub vertical: [Image; 4],
    pub coarse_horizontal: Option<[Image; 4]>,
    pub coarse_vertical: Option<[Image; 4]>,
}

/// Camera pixels paired with the screen coordinates they observe.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrespondenceSet {
    /// Continuous pixel coordinates (pixel centers at `x + 0.5`).
    pub pixels: Vec<[f64; 2]>,
    pub screen_uv: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn push(&mut self, pixel: [f64; 2], uv: [f64; 2], valid: bool) {
        self.pixels.push(pixel);
        self.screen_uv.push(uv);
        self.valid.push(valid);
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Copy restricted to the valid entries.
    pub fn only_valid(&self) -> Self {
        let mut out = Self::default();
        for k in 0..self.len() {
            if self.valid[k] {
                out.push(self.pixels[k], self.screen_uv[k], true);
            }
        }
        out
    }

    /// Entries at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Self::default();
        for &k in indices {
            out.push(self.pixels[k], self.screen_uv[k], self.valid[k]);
        }
        out
    }

    /// Writes `px,py,u,v` rows for the valid entries.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["px", "py", "u", "v"])?;
        for k in 0..self.len() {
            if self.valid[k] {
                let [px, py] = self.pixels[k];
                let [u, v] = self.screen_uv[k];
                wr.write_record([px, py, u, v].map(|x| x.to_string()))?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Reads `px,py,u,v` rows (header required). Rows with `|u|` or `|v|` above
/// 1.5 are skipped with a warning.
pub fn load_external_correspondences(path: &Path) -> Result<CorrespondenceSet> {
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)?;
    let mut out = CorrespondenceSet::default();
    for rec in rd.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        if rec.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, found {}", rec.len())));
        }
        let mut vals = [0.0; 4];
        for (k, field) in rec.iter().enumerate() {
            vals[k] = field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(format!("field {} is not a finite number: {field:?}", k + 1)))?;
        }
        let [px, py, u, v] = vals;
        if u.abs() > 1.5 || v.abs() > 1.5 {
            log::warn!("{}:{line}: screen coordinate ({u}, {v}) out of range, row skipped", path.display());
            continue;
        }
        out.push([px, py], [u, v], true);
    }
    Ok(out)
}

/// Replaces each intensity `x` by `Poisson(x * scale) / scale`, clamped to
/// `[0, 1]`. `scale = 400` gives 5% relative noise at full intensity.
pub fn add_poisson_noise(img: &Image, scale: f64, rng: &mut impl Rng) -> Image {
    let mut out = img.clone();
    for v in out.data.iter_mut() {
        let lambda = *v * scale;
        *v = if lambda > 0.0 {
            let k: f64 = Poisson::new(lambda).expect("positive rate").sample(rng);
            (k / scale).clamp(0.0, 1.0)
        } else {
            0.0
        };
    }
    out
}

/// Scanline geometry: rows (`along_rows`) or columns of a `w x h` grid.
#[derive(Clone, Copy)]
struct Lines {
    w: usize,
    h: usize,
    along_rows: bool,
}

impl Lines {
    fn count(&self) -> usize {
        if self.along_rows {
            self.h
        } else {
            self.w
        }
    }
    fn len(&self) -> usize {
        if self.along_rows {
            self.w
        } else {
            self.h
        }
    }
    fn idx(&self, line: usize, pos: usize) -> usize {
        if self.along_rows {
            line * self.w + pos
        } else {
            pos * self.w + line
        }
    }
}

/// Contiguous valid stretch of a scanline.
struct Run {
    line: usize,
    start: usize,
    end: usize,
}

/// Unwraps each valid run of every scanline from its maximum-modulation
/// pixel outward. Returns the unwrapped map and the runs.
fn unwrap_runs(map: &PhaseMap, valid: &[bool], lines: Lines) -> (Vec<f64>, Vec<Run>) {
    let mut out = vec![f64::NAN; valid.len()];
    let mut runs = Vec::new();
    for line in 0..lines.count() {
        let mut pos = 0;
        while pos < lines.len() {
            if !valid[lines.idx(line, pos)] {
                pos += 1;
                continue;
            }
            let start = pos;
            while pos < lines.len() && valid[lines.idx(line, pos)] {
                pos += 1;
            }
            let end = pos;
            let seed = (start..end)
                .max_by(|&a, &b| {
                    map.modulation.data[lines.idx(line, a)].total_cmp(&map.modulation.data[lines.idx(line, b)])
                })
                .unwrap_or(start);
            let w = |p: usize| map.phase.data[lines.idx(line, p)];
            out[lines.idx(line, seed)] = w(seed);
            for p in seed + 1..end {
                let prev = out[lines.idx(line, p - 1)];
                out[lines.idx(line, p)] = prev + wrap(w(p) - prev);
            }
            for p in (start..seed).rev() {
                let next = out[lines.idx(line, p + 1)];
                out[lines.idx(line, p)] = next + wrap(w(p) - next);
            }
            runs.push(Run { line, start, end });
        }
    }
    (out, runs)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Absolute phase of a coarse map of frequency `fc < 1`; the screen spans
/// `[0, 2 pi fc]` and the unused gap is split in the middle.
fn coarse_absolute(wrapped: f64, fc: f64) -> f64 {
    if wrapped < -PI * (1.0 - fc) {
        wrapped + TAU
    } else {
        wrapped
    }
}

/// Aligns each run to the phase predicted by the coarse map (per-run median
/// of the difference) and invalidates pixels still more than half a fringe
/// away from the prediction.
fn anchor_runs_coarse(unwrapped: &mut [f64], valid: &mut [bool], runs: &[Run], lines: Lines, coarse: &[f64], fc: f64, f: f64) {
    let ratio = f / fc;
    let mut diffs = Vec::new();
    for run in runs {
        diffs.clear();
        for p in run.start..run.end {
            let k = lines.idx(run.line, p);
            diffs.push(coarse_absolute(coarse[k], fc) * ratio - unwrapped[k]);
        }
        let shift = TAU * (median(&mut diffs) / TAU).round();
        for p in run.start..run.end {
            let k = lines.idx(run.line, p);
            unwrapped[k] += shift;
            let expected = coarse_absolute(coarse[k], fc) * ratio;
            if (unwrapped[k] - expected).abs() > PI {
                valid[k] = false;
            }
        }
    }
}

/// Links runs of neighboring scanlines into one consistent unwrapping,
/// starting from the run containing `seed`. Pixels of runs that are not
/// connected to it become invalid.
fn link_runs(unwrapped: &mut [f64], valid: &mut [bool], runs: &[Run], lines: Lines, seed: usize) {
    let mut run_of = vec![usize::MAX; valid.len()];
    for (r, run) in runs.iter().enumerate() {
        for p in run.start..run.end {
            run_of[lines.idx(run.line, p)] = r;
        }
    }
    let first = run_of[seed];
    let mut done = vec![false; runs.len()];
    done[first] = true;
    let mut queue = std::collections::VecDeque::from([first]);
    let mut diffs = Vec::new();
    while let Some(r) = queue.pop_front() {
        let run = &runs[r];
        for nl in [run.line.wrapping_sub(1), run.line + 1] {
            if nl >= lines.count() {
                continue;
            }
            // Neighbouring runs overlapping this one, in order of first contact.
            let mut p = run.start;
            while p < run.end {
                let q = run_of[lines.idx(nl, p)];
                if q == usize::MAX || done[q] {
                    p += 1;
                    continue;
                }
                let other = &runs[q];
                diffs.clear();
                for pp in run.start.max(other.start)..run.end.min(other.end) {
                    diffs.push(unwrapped[lines.idx(run.line, pp)] - unwrapped[lines.idx(nl, pp)]);
                }
                let shift = TAU * (median(&mut diffs) / TAU).round();
                for pp in other.start..other.end {
                    unwrapped[lines.idx(nl, pp)] += shift;
                }
                done[q] = true;
                queue.push_back(q);
                p = other.end;
            }
        }
    }
    for (k, v) in valid.iter_mut().enumerate() {
        if *v && !done[run_of[k]] {
            *v = false;
        }
    }
}

/// Converts absolute phase maps into correspondences for every valid pixel.
/// With an anchor, both maps are first shifted by the multiple of `2 pi`
/// that makes the anchor pixel decode closest to its known coordinate.
pub fn phase_to_correspondence(
    phase_h: &Raster,
    phase_v: &Raster,
    f_h: f64,
    f_v: f64,
    valid: &[bool],
    anchor: Option<&PixelAnchor>,
) -> Result<CorrespondenceSet> {
    let (w, h) = (phase_h.width, phase_h.height);
    if phase_v.width != w || phase_v.height != h || valid.len() != w * h {
        return Err(Error::DimensionMismatch("phase maps and mask differ in shape".into()));
    }
    let (mut shift_h, mut shift_v) = (0.0, 0.0);
    if let Some(a) = anchor {
        let k = a.y * w + a.x;
        if a.x >= w || a.y >= h || !valid[k] {
            return Err(Error::Anchoring(a.x, a.y));
        }
        let target_h = PI * f_h * (a.uv[0] + 1.0);
        let target_v = PI * f_v * (a.uv[1] + 1.0);
        shift_h = TAU * ((target_h - phase_h.data[k]) / TAU).round();
        shift_v = TAU * ((target_v - phase_v.data[k]) / TAU).round();
    }
    let mut out = CorrespondenceSet::default();
    for y in 0..h {
        for x in 0..w {
            let k = y * w + x;
            if !valid[k] {
                continue;
            }
            let u = (phase_h.data[k] + shift_h) / (PI * f_h) - 1.0;
            let v = (phase_v.data[k] + shift_v) / (PI * f_v) - 1.0;
            out.push([x as f64 + 0.5, y as f64 + 0.5], [u, v], u.is_finite() && v.is_finite());
        }
    }
    Ok(out)
}

/// Decodes one measurement into correspondences.
///
/// `eye_mask` restricts decoding to pixels that see the eye. Horizontal
/// phase is unwrapped along rows, vertical phase along columns.
pub fn decode(captures: &PhaseCaptures, cfg: &DecodeConfig, eye_mask: Option<&[bool]>) -> Result<CorrespondenceSet> {
    let ph = four_step_phase(std::array::from_fn(|k| &captures.horizontal[k]))?;
    let pv = four_step_phase(std::array::from_fn(|k| &captures.vertical[k]))?;
    let (w, h) = (ph.phase.width, ph.phase.height);
    if pv.phase.width != w || pv.phase.height != h {
        return Err(Error::DimensionMismatch("horizontal and vertical captures differ".into()));
    }
    if let Some(m) = eye_mask {
        if m.len() != w * h {
            return Err(Error::DimensionMismatch("eye mask size".into()));
        }
    }
    let mut valid: Vec<bool> = (0..w * h)
        .map(|k| {
            ph.modulation.data[k] > cfg.modulation_threshold
                && pv.modulation.data[k] > cfg.modulation_threshold
                && eye_mask.is_none_or(|m| m[k])
        })
        .collect();

    let rows = Lines { w, h, along_rows: true };
    let cols = Lines { w, h, along_rows: false };
    let (mut uh, runs_h) = unwrap_runs(&ph, &valid, rows);
    let (mut uv, runs_v) = unwrap_runs(&pv, &valid, cols);

    let anchor = match cfg.anchoring {
        Anchoring::Coarse => {
            if !(cfg.coarse_frequency > 0.0 && cfg.coarse_frequency <= 1.0) {
                return Err(Error::InvalidPattern("coarse frequency must lie in (0, 1]".into()));
            }
            let (ch, cv) = match (&captures.coarse_horizontal, &captures.coarse_vertical) {
                (Some(ch), Some(cv)) => (ch, cv),
                _ => {
                    return Err(Error::InvalidPattern(
                        "coarse anchoring needs coarse captures".into(),
                    ))
                }
            };
            let ch = four_step_phase(std::array::from_fn(|k| &ch[k]))?;
            let cv = four_step_phase(std::array::from_fn(|k| &cv[k]))?;
            for (k, v) in valid.iter_mut().enumerate() {
                *v &= ch.modulation.data[k] > cfg.modulation_threshold && cv.modulation.data[k] > cfg.modulation_threshold;
            }
            anchor_runs_coarse(&mut uh, &mut valid, &runs_h, rows, &ch.phase.data, cfg.coarse_frequency, cfg.frequency_h);
            anchor_runs_coarse(&mut uv, &mut valid, &runs_v, cols, &cv.phase.data, cfg.coarse_frequency, cfg.frequency_v);
            None
        }
        Anchoring::Pixel(a) => {
            let k = a.y * w + a.x;
            if a.x >= w || a.y >= h || !valid[k] {
                return Err(Error::Anchoring(a.x, a.y));
            }
            link_runs(&mut uh, &mut valid, &runs_h, rows, k);
            link_runs(&mut uv, &mut valid, &runs_v, cols, k);
            Some(a)
        }
    };
    let phase_h = Raster {
        width: w,
        height: h,
        data: uh,
    };
    let phase_v = Raster {
        width: w,
        height: h,
        data: uv,
    };
    phase_to_correspondence(&phase_h, &phase_v, cfg.frequency_h, cfg.frequency_v, &valid, anchor.as_ref())
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn gray(v: f64) -> Image {
        Image::filled(1, 1, 1, v)
    }

    #[test]
    fn sinusoid_values() {
        let p = Pattern::sinusoid(1.0, Orientation::Horizontal, 0.0, 0.5, 0.5);
        assert_abs_diff_eq!(render_pattern_value(&p, [-1.0, 0.3])[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(render_pattern_value(&p, [0.0, 0.3])[0], 0.0, epsilon = 1e-15);
        let v = Pattern::sinusoid(1.0, Orientation::Vertical, 0.0, 0.5, 0.5);
        assert_abs_diff_eq!(v.value([0.7, 0.0], 0), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v.value([0.7, -1.0], 0), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn image_pattern_is_black_off_screen() {
        let p = Pattern::Image(Image::filled(4, 4, 3, 1.0));
        assert_eq!(render_pattern_value(&p, [2.0, 0.0]), [0.0; 3]);
        assert_eq!(render_pattern_value(&p, [0.1, -0.2]), [1.0; 3]);
    }

    #[test]
    fn bilinear_interpolates_between_pixel_centers() {
        let img = Image::from_data(2, 1, 1, vec![0.0, 1.0]).unwrap();
        let p = Pattern::Image(img);
        // Pixel centers sit at u = -0.5 and u = 0.5.
        assert_abs_diff_eq!(p.value([-0.5, 0.0], 0), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.value([0.0, 0.0], 0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p.value([0.5, 0.0], 0), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn displayability_is_checked() {
        assert!(Pattern::sinusoid(16.0, Orientation::Horizontal, 0.0, 0.5, 0.5).validate().is_ok());
        assert!(Pattern::sinusoid(16.0, Orientation::Horizontal, 0.0, 0.3, 0.4).validate().is_err());
        assert!(Pattern::sinusoid(16.0, Orientation::Horizontal, 0.0, 0.8, 0.3).validate().is_err());
    }

    #[test]
    fn four_step_examples() {
        let m = four_step_phase([&gray(1.0), &gray(0.5), &gray(0.0), &gray(0.5)]).unwrap();
        assert_abs_diff_eq!(m.phase.data[0], 0.0, epsilon = 1e-15);
        let m = four_step_phase([&gray(0.5), &gray(1.0), &gray(0.5), &gray(0.0)]).unwrap();
        assert_abs_diff_eq!(m.phase.data[0], PI / 2.0, epsilon = 1e-15);
        let m = four_step_phase([&gray(0.4); 4].each_ref().map(|x| *x)).unwrap();
        assert_eq!(m.modulation.data[0], 0.0);
    }

    #[test]
    fn four_step_rejects_mismatched_shapes() {
        let a = Image::new(2, 2, 1);
        let b = Image::new(2, 3, 1);
        assert!(matches!(four_step_phase([&a, &a, &b, &a]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn four_step_phase_is_pi_when_reversed() {
        let m = four_step_phase([&gray(0.0), &gray(0.5), &gray(1.0), &gray(0.5)]).unwrap();
        assert_eq!(m.phase.data[0], PI);
    }

    #[test]
    fn unwrap_examples() {
        let out = unwrap_scanline(&[0.0, 3.0, 3.0 - TAU + 3.0]);
        assert_abs_diff_eq!(out[2], 6.0, epsilon = 1e-12);
        assert_eq!(out[1], 3.0);
        let smooth = [0.1, 0.4, 0.2, -0.5];
        assert_eq!(unwrap_scanline(&smooth), smooth.to_vec());
        assert_eq!(unwrap_scanline(&[1.0; 5]), vec![1.0; 5]);
        assert!(unwrap_scanline(&[]).is_empty());
    }

    #[test]
    fn sixteen_periods_span_thirty_two_pi() {
        let n = 4001;
        let p = Pattern::sinusoid(16.0, Orientation::Horizontal, 0.0, 0.5, 0.5);
        let wrapped: Vec<f64> = (0..n)
            .map(|k| {
                let u = -1.0 + 2.0 * k as f64 / (n - 1) as f64;
                let imgs = phase_shift_sequence(16.0, Orientation::Horizontal, 0.5, 0.5)
                    .map(|q| gray(q.value([u, 0.0], 0)));
                let _ = &p;
                four_step_phase(imgs.each_ref()).unwrap().phase.data[0]
            })
            .collect();
        let un = unwrap_scanline(&wrapped);
        assert_abs_diff_eq!(un[n - 1] - un[0], 32.0 * PI, epsilon = 1e-9);
    }

    #[test]
    fn phase_to_correspondence_maps_zero_phase_to_left_edge() {
        let ph = Raster {
            width: 1,
            height: 1,
            data: vec![0.0],
        };
        let set = phase_to_correspondence(&ph, &ph, 16.0, 7.4, &[true], None).unwrap();
        assert_eq!(set.screen_uv[0], [-1.0, -1.0]);
        assert_eq!(set.pixels[0], [0.5, 0.5]);
    }

    #[test]
    fn anchor_outside_mask_is_rejected() {
        let ph = Raster::new(2, 1);
        let a = PixelAnchor {
            x: 1,
            y: 0,
            uv: [0.0, 0.0],
        };
        let r = phase_to_correspondence(&ph, &ph, 1.0, 1.0, &[true, false], Some(&a));
        assert!(matches!(r, Err(Error::Anchoring(1, 0))));
    }

    #[test]
    fn anchor_selects_the_nearest_fringe() {
        let ph = Raster {
            width: 1,
            height: 1,
            data: vec![1.0],
        };
        let a = PixelAnchor {
            x: 0,
            y: 0,
            uv: [0.5, -0.25],
        };
        let set = phase_to_correspondence(&ph, &ph, 4.0, 4.0, &[true], Some(&a)).unwrap();
        // Phase 1 rad plus whole fringes; u closest to 0.5 at f = 4.
        let u = set.screen_uv[0][0];
        assert!((u - 0.5).abs() <= 0.25);
        let fringes = ((u + 1.0) * PI * 4.0 - 1.0) / TAU;
        assert_abs_diff_eq!(fringes, fringes.round(), epsilon = 1e-12);
    }

    fn synthetic_captures(w: usize, h: usize, uv: impl Fn(usize, usize) -> [f64; 2], f_h: f64, f_v: f64) -> PhaseCaptures {
        let seq = |f: f64, o: Orientation| -> [Image; 4] {
            phase_shift_sequence(f, o, 0.5, 0.4).map(|p| {
                let mut img = Image::new(w, h, 1);
                for y in 0..h {
                    for x in 0..w {
                        img.set(x, y, 0, p.value(uv(x, y), 0));
                    }
                }
                img
            })
        };
        PhaseCaptures {
            horizontal: seq(f_h, Orientation::Horizontal),
            vertical: seq(f_v, Orientation::Vertical),
            coarse_horizontal: Some(seq(DEFAULT_COARSE_FREQUENCY, Orientation::Horizontal)),
            coarse_vertical: Some(seq(DEFAULT_COARSE_FREQUENCY, Orientation::Vertical)),
        }
    }

    /// A tilted planar mirror seen head on maps pixels affinely to the screen.
    fn planar_uv(x: usize, y: usize) -> [f64; 2] {
        [-0.9 + 0.03 * x as f64 + 0.002 * y as f64, -0.8 + 0.025 * y as f64 - 0.001 * x as f64]
    }

    #[test]
    fn decode_planar_mirror_with_coarse_anchoring() {
        let caps = synthetic_captures(60, 50, planar_uv, 16.0, 7.4);
        let set = decode(&caps, &DecodeConfig::default(), None).unwrap();
        assert_eq!(set.len(), 60 * 50);
        for k in 0..set.len() {
            let [px, py] = set.pixels[k];
            let truth = planar_uv(px as usize, py as usize);
            assert_abs_diff_eq!(set.screen_uv[k][0], truth[0], epsilon = 1e-9);
            assert_abs_diff_eq!(set.screen_uv[k][1], truth[1], epsilon = 1e-9);
        }
        // Monotone along each row where the true hit is monotone.
        for y in 0..50 {
            for x in 1..60 {
                assert!(set.screen_uv[y * 60 + x][0] > set.screen_uv[y * 60 + x - 1][0]);
            }
        }
    }

    #[test]
    fn decode_planar_mirror_with_pixel_anchor() {
        let caps = synthetic_captures(40, 30, planar_uv, 16.0, 7.4);
        let cfg = DecodeConfig {
            anchoring: Anchoring::Pixel(PixelAnchor {
                x: 20,
                y: 15,
                uv: planar_uv(20, 15),
            }),
            ..DecodeConfig::default()
        };
        let set = decode(&caps, &cfg, None).unwrap();
        assert_eq!(set.len(), 40 * 30);
        for k in 0..set.len() {
            let [px, py] = set.pixels[k];
            let truth = planar_uv(px as usize, py as usize);
            assert_abs_diff_eq!(set.screen_uv[k][0], truth[0], epsilon = 1e-9);
            assert_abs_diff_eq!(set.screen_uv[k][1], truth[1], epsilon = 1e-9);
        }
    }

    #[test]
    fn decode_masks_out_unmodulated_pixels() {
        let mut caps = synthetic_captures(10, 10, planar_uv, 4.0, 4.0);
        for img in caps.horizontal.iter_mut() {
            img.set(3, 3, 0, 0.5);
        }
        let set = decode(&caps, &DecodeConfig { frequency_h: 4.0, frequency_v: 4.0, ..Default::default() }, None).unwrap();
        assert_eq!(set.len(), 99);
        assert!(!set.pixels.contains(&[3.5, 3.5]));
        let mask = vec![false; 100];
        assert_eq!(decode(&caps, &DecodeConfig::default(), Some(&mask)).unwrap().len(), 0);
    }

    #[test]
    fn external_correspondences() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        std::fs::write(&p, "px,py,u,v\n10.5, 20.25, 0.0, 0.0\n1,2,1.6,0\n3,4,0.5,-0.5\n").unwrap();
        let set = load_external_correspondences(&p).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.pixels[0], [10.5, 20.25]);
        assert_eq!(set.screen_uv[0], [0.0, 0.0]);

        std::fs::write(&p, "px,py,u,v\n1,2,3,4\n1,2,x,4\n").unwrap();
        match load_external_correspondences(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }

        std::fs::write(&p, "").unwrap();
        assert!(load_external_correspondences(&p).unwrap().is_empty());

        let mut rows = String::from("px,py,u,v\n");
        for k in 0..50 {
            rows += &format!("{k},{k},0.1,0.2\n");
        }
        std::fs::write(&p, rows).unwrap();
        let set = load_external_correspondences(&p).unwrap();
        assert_eq!(set.len(), 50);

        let q = dir.path().join("d.csv");
        set.save_csv(&q).unwrap();
        assert_eq!(load_external_correspondences(&q).unwrap(), set);
    }

    #[test]
    fn poisson_noise_statistics() {
        let img = Image::filled(200, 200, 1, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noisy = add_poisson_noise(&img, 400.0, &mut rng);
        let n = noisy.data.len() as f64;
        let mean = noisy.data.iter().sum::<f64>() / n;
        // Clamping at 1 halves the upper tail; the clamped mean sits below 1.
        assert!(mean < 1.0 && mean > 0.97);
        let half = Image::filled(200, 200, 1, 0.5);
        let noisy = add_poisson_noise(&half, 400.0, &mut rng);
        let mean = noisy.data.iter().sum::<f64>() / n;
        let var = noisy.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((mean - 0.5).abs() < 2e-3);
        assert!((var.sqrt() - (0.5f64 / 400.0).sqrt()).abs() < 2e-3);
        assert_eq!(add_poisson_noise(&Image::new(3, 3, 1), 400.0, &mut rng).data, vec![0.0; 9]);
    }

    #[test]
    fn poisson_noise_is_seeded() {
        let img = Image::filled(16, 16, 1, 0.6);
        let a = add_poisson_noise(&img, 400.0, &mut ChaCha8Rng::seed_from_u64(9));
        let b = add_poisson_noise(&img, 400.0, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn raster_round_trip() {
        let r = Raster {
            width: 3,
            height: 2,
            data: vec![0.0, -1.5, 2.25, 4.0, f64::NAN, 1.0],
        };
        let mut buf = Vec::new();
        r.write(&mut buf).unwrap();
        assert!(buf.starts_with(b"3 2 -1.5 4\n"));
        let back = Raster::read(&buf[..]).unwrap();
        assert_eq!(back.data[..4], r.data[..4]);
        assert!(back.data[4].is_nan());
        assert!(Raster::read(&b"3 2 0 1\n\0\0"[..]).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Image::from_data(2, 1, 1, vec![0.0, 1.0]).unwrap();
        img.save_png(&p).unwrap();
        assert_eq!(Image::load_png(&p).unwrap(), img);
        let rgb = Image::from_data(1, 1, 3, vec![1.0, 0.0, 1.0]).unwrap();
        rgb.save_png(&p).unwrap();
        assert_eq!(Image::load_png(&p).unwrap(), rgb);
    }

    #[test]
    fn pattern_spec_from_toml() {
        let spec: PatternSpec = toml::from_str(
            "kind = \"sinusoid\"\nfrequency = 16.0\norientation = \"horizontal\"\nmean = 0.5\namplitude = 0.5\n",
        )
        .unwrap();
        let p = spec.build(Path::new(".")).unwrap();
        assert_eq!(p, Pattern::sinusoid(16.0, Orientation::Horizontal, 0.0, 0.5, 0.5));
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap(PI), PI);
        assert_eq!(wrap(-PI), PI);
        assert_abs_diff_eq!(wrap(3.0 * PI + 0.1), -PI + 0.1, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn four_step_round_trip(phi in -PI..PI, a in 0.05f64..0.95, frac in 0.05f64..1.0) {
            let b = frac * a.min(1.0 - a);
            let imgs: [Image; 4] = std::array::from_fn(|k| gray(a + b * (phi - k as f64 * PI / 2.0).cos()));
            let m = four_step_phase(imgs.each_ref()).unwrap();
            prop_assert!(wrap(m.phase.data[0] - phi).abs() < 1e-10);
            prop_assert!((m.modulation.data[0] - b).abs() < 1e-12);
        }

        #[test]
        fn unwrapped_differences_in_range(v in prop::collection::vec(-10.0f64..10.0, 1..60)) {
            let out = unwrap_scanline(&v);
            prop_assert_eq!(out[0], v[0]);
            for k in 1..out.len() {
                let d = out[k] - out[k - 1];
                prop_assert!(d > -PI - 1e-9 && d <= PI + 1e-9);
                let m = (out[k] - v[k]) / TAU;
                prop_assert!((m - m.round()).abs() < 1e-9);
            }
        }
    }
}
