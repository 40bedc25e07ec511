//! Synthetic degradations and the on-disk paired dataset format.
//!
//! Every generator is a pure function of `(clean, params, seed)`. Images are `[H, W, 3]`
//! arrays of `f32` in `[0, 1]`; noise is added in continuous values and the result is
//! quantized to 8 bits only when written to disk.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Zip};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Task;
use crate::error::{Error, Result};

/// Noise levels of the standard denoising benchmarks.
pub const STANDARD_SIGMAS: [u32; 3] = [15, 25, 50];

#[derive(Debug, Clone, PartialEq)]
pub struct CleanImage {
    pub pixels: Array3<f32>,
    pub source_id: String,
}

impl CleanImage {
    pub fn new(pixels: Array3<f32>, source_id: impl Into<String>) -> Result<Self> {
        let img = Self {
            pixels,
            source_id: source_id.into(),
        };
        img.validate()?;
        Ok(img)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.pixels.dim();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("image {h}x{w} is not a positive multiple of 8")));
        }
        if self.pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Shape("pixel values outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseParams {
    pub sigma: u32,
    /// Set when `sigma` is outside the standard benchmark levels.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub nonstandard: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RainParams {
    /// Fraction in `[0, 1]` controlling how many streaks are seeded.
    pub density: f64,
    /// Streak orientation in degrees.
    pub angle: f64,
    pub length: usize,
    pub intensity: f64,
}

impl RainParams {
    pub fn new(density: f64, angle: f64) -> Self {
        Self {
            density,
            angle,
            length: 9,
            intensity: 0.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HazeParams {
    pub transmission: f64,
    pub airlight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlurParams {
    pub length: usize,
    pub angle: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowlightParams {
    pub gamma: f64,
    pub scale: f64,
}

/// Parameters of the generator that produced a pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DegradationParams {
    Noise(NoiseParams),
    Rain(RainParams),
    Haze(HazeParams),
    Blur(BlurParams),
    Lowlight(LowlightParams),
}

impl DegradationParams {
    pub fn task(&self) -> Task {
        match self {
            Self::Noise(_) => Task::Denoise,
            Self::Rain(_) => Task::Derain,
            Self::Haze(_) => Task::Dehaze,
            Self::Blur(_) => Task::Deblur,
            Self::Lowlight(_) => Task::Lowlight,
        }
    }

    /// Applies the generator described by these parameters.
    pub fn apply(&self, clean: &CleanImage, seed: u64) -> Result<DegradedPair> {
        match *self {
            Self::Noise(p) => gen_noise(clean, p.sigma, seed),
            Self::Rain(p) => gen_rain(clean, p, seed),
            Self::Haze(p) => gen_haze(clean, p.transmission, p.airlight),
            Self::Blur(p) => gen_blur(clean, p.length, p.angle),
            Self::Lowlight(p) => gen_lowlight(clean, p.gamma, p.scale),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegradedPair {
    pub clean: CleanImage,
    pub degraded: Array3<f32>,
    pub task: Task,
    pub params: DegradationParams,
}

fn clamp01(x: f32) -> f32 {
    x.clamp(0.0, 1.0)
}

fn pair(clean: &CleanImage, degraded: Array3<f32>, params: DegradationParams) -> DegradedPair {
    DegradedPair {
        clean: clean.clone(),
        degraded,
        task: params.task(),
        params,
    }
}

/// Pre-clamp Gaussian noise field with standard deviation `sigma / 255`.
pub fn noise_field(h: usize, w: usize, sigma: u32, seed: u64) -> Array3<f32> {
    let std = sigma as f64 / 255.0;
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn((h, w, 3), || normal.sample(&mut rng) as f32)
}

pub fn gen_noise(clean: &CleanImage, sigma: u32, seed: u64) -> Result<DegradedPair> {
    clean.validate()?;
    let noise = noise_field(clean.height(), clean.width(), sigma, seed);
    let degraded = Zip::from(&clean.pixels)
        .and(&noise)
        .map_collect(|&c, &n| clamp01(c + n));
    let params = NoiseParams {
        sigma,
        nonstandard: !STANDARD_SIGMAS.contains(&sigma),
    };
    Ok(pair(clean, degraded, DegradationParams::Noise(params)))
}

/// Unnormalized line kernel (peak 1) of `length` pixels at `angle` degrees.
fn line_mask(length: usize, angle: f64) -> Array2<f64> {
    let length = length.max(1);
    let size = if length % 2 == 1 { length } else { length + 1 };
    let center = (size - 1) as f64 / 2.0;
    let mut k = Array2::zeros((size, size));
    let half = (length - 1) as f64 / 2.0;
    let samples = 4 * length;
    let (s, c) = angle.to_radians().sin_cos();
    for i in 0..samples {
        let t = if samples == 1 || length == 1 {
            0.0
        } else {
            -half + 2.0 * half * i as f64 / (samples - 1) as f64
        };
        let x = (center + t * c).round() as usize;
        let y = (center - t * s).round() as usize;
        k[[y.min(size - 1), x.min(size - 1)]] = 1.0;
    }
    k
}

/// Normalized linear motion-blur kernel; coefficients sum to 1.
pub fn motion_kernel(length: usize, angle: f64) -> Array2<f64> {
    let k = line_mask(length, angle);
    let total = k.sum();
    k / total
}

/// Additive rain layer (single channel, non-negative).
pub fn streak_layer(h: usize, w: usize, params: &RainParams, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = 0.04 * params.density.clamp(0.0, 1.0);
    let seeds = Array2::from_shape_simple_fn((h, w), || {
        let u: f64 = rng.random();
        let b: f64 = rng.random_range(0.5..1.0);
        if u < p {
            b
        } else {
            0.0
        }
    });
    let kernel = line_mask(params.length, params.angle);
    let (kh, kw) = kernel.dim();
    let (cy, cx) = (kh / 2, kw / 2);
    let mut out = Array2::<f32>::zeros((h, w));
    for ((y, x), &v) in seeds.indexed_iter() {
        if v == 0.0 {
            continue;
        }
        for ((i, j), &k) in kernel.indexed_iter() {
            if k == 0.0 {
                continue;
            }
            let (ty, tx) = (y as isize + i as isize - cy as isize, x as isize + j as isize - cx as isize);
            if ty >= 0 && tx >= 0 && (ty as usize) < h && (tx as usize) < w {
                let cell = &mut out[[ty as usize, tx as usize]];
                *cell = cell.max((v * k * params.intensity) as f32);
            }
        }
    }
    out
}

pub fn gen_rain(clean: &CleanImage, params: RainParams, seed: u64) -> Result<DegradedPair> {
    clean.validate()?;
    if !(0.0..=1.0).contains(&params.density) {
        return Err(Error::Config(format!("rain density must lie in [0, 1], got {}", params.density)));
    }
    let layer = streak_layer(clean.height(), clean.width(), &params, seed);
    let mut degraded = clean.pixels.clone();
    for ((y, x, _), v) in degraded.indexed_iter_mut() {
        *v = clamp01(*v + layer[[y, x]]);
    }
    Ok(pair(clean, degraded, DegradationParams::Rain(params)))
}

pub fn gen_haze(clean: &CleanImage, transmission: f64, airlight: f64) -> Result<DegradedPair> {
    clean.validate()?;
    if !(0.0..=1.0).contains(&transmission) || !(0.0..=1.0).contains(&airlight) {
        return Err(Error::Config(format!(
            "haze needs transmission and airlight in [0, 1], got {transmission}, {airlight}"
        )));
    }
    let (t, a) = (transmission as f32, airlight as f32);
    let degraded = clean.pixels.mapv(|c| clamp01(c * t + a * (1.0 - t)));
    Ok(pair(
        clean,
        degraded,
        DegradationParams::Haze(HazeParams {
            transmission,
            airlight,
        }),
    ))
}

pub fn gen_blur(clean: &CleanImage, length: usize, angle: f64) -> Result<DegradedPair> {
    clean.validate()?;
    if length == 0 {
        return Err(Error::Config("blur length must be at least 1".into()));
    }
    let kernel = motion_kernel(length, angle);
    let (kh, kw) = kernel.dim();
    let (cy, cx) = ((kh / 2) as isize, (kw / 2) as isize);
    let (h, w) = (clean.height() as isize, clean.width() as isize);
    let taps: Vec<(isize, isize, f64)> = kernel
        .indexed_iter()
        .filter(|(_, &k)| k != 0.0)
        .map(|((i, j), &k)| (i as isize - cy, j as isize - cx, k))
        .collect();
    let src = &clean.pixels;
    let degraded = Array3::from_shape_fn(src.dim(), |(y, x, c)| {
        let mut acc = 0.0f64;
        for &(dy, dx, k) in &taps {
            let sy = (y as isize + dy).clamp(0, h - 1) as usize;
            let sx = (x as isize + dx).clamp(0, w - 1) as usize;
            acc += k * src[[sy, sx, c]] as f64;
        }
        clamp01(acc as f32)
    });
    Ok(pair(
        clean,
        degraded,
        DegradationParams::Blur(BlurParams { length, angle }),
    ))
}

pub fn gen_lowlight(clean: &CleanImage, gamma: f64, scale: f64) -> Result<DegradedPair> {
    clean.validate()?;
    if !(gamma >= 1.0) || !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::Config(format!(
            "low-light needs gamma >= 1 and scale in (0, 1], got {gamma}, {scale}"
        )));
    }
    let degraded = clean
        .pixels
        .mapv(|c| clamp01((scale * (c as f64).powf(gamma)) as f32));
    Ok(pair(
        clean,
        degraded,
        DegradationParams::Lowlight(LowlightParams { gamma, scale }),
    ))
}

/// Piecewise-smooth procedural scene: a colour gradient with overlaid rectangles, discs and
/// a faint sinusoidal texture.
pub fn procedural_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let mut color = || [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
    let (top, bottom) = (color(), color());
    let mut img = Array3::from_shape_fn((h, w, 3), |(y, _, c)| {
        let t = y as f32 / (h.max(2) - 1) as f32;
        top[c] * (1.0 - t) + bottom[c] * t
    });
    let shapes = rng.random_range(3..7);
    for _ in 0..shapes {
        let col = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
        let cy = rng.random_range(0.0..h as f32);
        let cx = rng.random_range(0.0..w as f32);
        let ry = rng.random_range(0.1..0.35) * h as f32;
        let rx = rng.random_range(0.1..0.35) * w as f32;
        let disc = rng.random_bool(0.5);
        for ((y, x, c), v) in img.indexed_iter_mut() {
            let (dy, dx) = ((y as f32 - cy) / ry, (x as f32 - cx) / rx);
            let inside = if disc {
                dy * dy + dx * dx <= 1.0
            } else {
                dy.abs() <= 1.0 && dx.abs() <= 1.0
            };
            if inside {
                *v = col[c];
            }
        }
    }
    let (fy, fx) = (rng.random_range(0.05..0.3), rng.random_range(0.05..0.3));
    let amp = rng.random_range(0.0..0.06);
    img.indexed_iter_mut().for_each(|((y, x, _), v)| {
        let tex = amp * ((y as f32 * fy).sin() * (x as f32 * fx).cos());
        *v = clamp01(*v + tex);
    });
    img
}

/// Stable per-image seed from the global seed and an image id (FNV-1a over the id).
pub fn derive_seed(seed: u64, id: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in id.bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// Draws task parameters from the dataset's default ranges.
pub fn sample_params(task: Task, sigmas: &[u32], rng: &mut ChaCha8Rng) -> DegradationParams {
    match task {
        Task::Denoise => {
            let sigma = sigmas[rng.random_range(0..sigmas.len())];
            DegradationParams::Noise(NoiseParams {
                sigma,
                nonstandard: !STANDARD_SIGMAS.contains(&sigma),
            })
        }
        Task::Derain => DegradationParams::Rain(RainParams::new(
            rng.random_range(0.4..0.9),
            rng.random_range(60.0..120.0),
        )),
        Task::Dehaze => DegradationParams::Haze(HazeParams {
            transmission: rng.random_range(0.45..0.75),
            airlight: rng.random_range(0.75..0.95),
        }),
        Task::Deblur => DegradationParams::Blur(BlurParams {
            length: [5, 7, 9][rng.random_range(0..3)],
            angle: rng.random_range(0.0..180.0),
        }),
        Task::Lowlight => DegradationParams::Lowlight(LowlightParams {
            gamma: rng.random_range(1.5..2.5),
            scale: rng.random_range(0.3..0.6),
        }),
    }
}

/// Generates one pair deterministically from `(seed, id)`.
pub fn synthesize_pair(task: Task, id: &str, h: usize, w: usize, seed: u64, sigmas: &[u32]) -> Result<DegradedPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, id));
    let clean = CleanImage::new(procedural_image(h, w, &mut rng), id)?;
    let params = sample_params(task, sigmas, &mut rng);
    params.apply(&clean, rng.next_u64())
}

/// Per-task counts from mixing weights, by largest-remainder apportionment of `total`.
pub fn apportion(weights: &BTreeMap<Task, f64>, total: usize) -> Result<BTreeMap<Task, usize>> {
    let sum: f64 = weights.values().sum();
    if weights.is_empty() || !(sum > 0.0) || weights.values().any(|w| *w < 0.0) {
        return Err(Error::Config("mix weights must be non-negative with a positive sum".into()));
    }
    let exact: Vec<(Task, f64)> = weights.iter().map(|(&t, &w)| (t, w / sum * total as f64)).collect();
    let mut counts: BTreeMap<Task, usize> = exact.iter().map(|&(t, e)| (t, e.floor() as usize)).collect();
    let assigned: usize = counts.values().sum();
    let mut order: Vec<(Task, f64)> = exact.iter().map(|&(t, e)| (t, e - e.floor())).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for (t, _) in order.into_iter().take(total - assigned) {
        *counts.get_mut(&t).unwrap() += 1;
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRequest {
    pub counts: BTreeMap<Task, usize>,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    #[serde(default = "default_sigmas")]
    pub sigmas: Vec<u32>,
}

fn default_sigmas() -> Vec<u32> {
    STANDARD_SIGMAS.to_vec()
}

impl DatasetRequest {
    pub fn new(counts: BTreeMap<Task, usize>, height: usize, width: usize, seed: u64) -> Self {
        Self {
            counts,
            height,
            width,
            seed,
            sigmas: default_sigmas(),
        }
    }

    /// A request whose per-task counts follow `weights` over `total` pairs.
    pub fn weighted(weights: &BTreeMap<Task, f64>, total: usize, height: usize, width: usize, seed: u64) -> Result<Self> {
        Ok(Self::new(apportion(weights, total)?, height, width, seed))
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// `(task, id)` for every pair, in manifest order.
    pub fn ids(&self) -> Vec<(Task, String)> {
        self.counts
            .iter()
            .flat_map(|(&t, &n)| (0..n).map(move |i| (t, format!("{}_{i:04}", t.name()))))
            .collect()
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub task: Task,
    pub params: DegradationParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub seed: Option<u64>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const REQUEST_FILE: &str = "dataset.json";

impl DatasetManifest {
    pub fn clean_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join("clean").join(format!("{}.png", entry.id))
    }

    pub fn degraded_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join("degraded").join(format!("{}.png", entry.id))
    }

    pub fn counts(&self) -> BTreeMap<Task, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.task).or_insert(0) += 1;
        }
        counts
    }

    pub fn tasks(&self) -> Vec<Task> {
        self.counts().into_keys().collect()
    }

    /// Reads `<root>/manifest.jsonl`.
    pub fn read(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST_FILE);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line).map_err(|e| Error::json(&path, e))?);
        }
        let seed = fs::read_to_string(root.join(REQUEST_FILE))
            .ok()
            .and_then(|s| serde_json::from_str::<DatasetRequest>(&s).ok())
            .map(|r| r.seed);
        Ok(Self { root, entries, seed })
    }

    /// Loads `(clean, degraded)` for one entry.
    pub fn load_pair(&self, entry: &ManifestEntry) -> Result<(Array3<f32>, Array3<f32>)> {
        Ok((read_png(self.clean_path(entry))?, read_png(self.degraded_path(entry))?))
    }
}

/// Synthesizes the requested pairs under `root` and writes the manifest.
pub fn build_dataset(request: &DatasetRequest, root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref().to_path_buf();
    if request.sigmas.is_empty() {
        return Err(Error::Config("at least one noise level is required".into()));
    }
    for dir in ["clean", "degraded"] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let manifest = DatasetManifest {
        root: root.clone(),
        entries: Vec::new(),
        seed: Some(request.seed),
    };
    let entries = request
        .ids()
        .into_par_iter()
        .map(|(task, id)| {
            let pair = synthesize_pair(task, &id, request.height, request.width, request.seed, &request.sigmas)?;
            let entry = ManifestEntry {
                id,
                task,
                params: pair.params,
            };
            write_png(&pair.clean.pixels, manifest.clean_path(&entry))?;
            write_png(&pair.degraded, manifest.degraded_path(&entry))?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;

    let path = root.join(MANIFEST_FILE);
    let mut out = Vec::new();
    for e in &entries {
        serde_json::to_writer(&mut out, e).map_err(|err| Error::json(&path, err))?;
        out.push(b'\n');
    }
    fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    let req_path = root.join(REQUEST_FILE);
    let body = serde_json::to_vec_pretty(request).map_err(|e| Error::json(&req_path, e))?;
    fs::write(&req_path, body).map_err(|e| Error::io(&req_path, e))?;
    Ok(DatasetManifest { entries, ..manifest })
}

/// 8-bit quantization used when writing images.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png(img: &Array3<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = img.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let bytes: Vec<u8> = img.iter().map(|&v| quantize(v)).collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))
}

pub fn read_png(path: impl AsRef<Path>) -> Result<Array3<f32>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), data).expect("rgb buffer"))
}

/// Writes a single-channel 8-bit PNG.
pub fn write_gray_png(pixels: &Array2<u8>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = pixels.dim();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, pixels.iter().copied().collect())
        .expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, v: f32) -> CleanImage {
        CleanImage::new(Array3::from_elem((h, w, 3), v), "gray").unwrap()
    }

    fn textured(seed: u64) -> CleanImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CleanImage::new(procedural_image(32, 48, &mut rng), "tex").unwrap()
    }

    #[test]
    fn clean_image_validation() {
        assert!(CleanImage::new(Array3::from_elem((12, 16, 3), 0.5), "x").is_err());
        assert!(CleanImage::new(Array3::from_elem((16, 16, 3), 1.5), "x").is_err());
        assert!(CleanImage::new(Array3::from_elem((16, 16, 1), 0.5), "x").is_err());
    }

    #[test]
    fn zero_sigma_is_identity() {
        let img = textured(1);
        let p = gen_noise(&img, 0, 9).unwrap();
        assert_eq!(p.degraded, img.pixels);
    }

    #[test]
    fn noise_std_matches_sigma() {
        let field = noise_field(256, 256, 25, 3);
        let n = field.len() as f64;
        let mean = field.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = field.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = 25.0 / 255.0;
        assert!((var.sqrt() - target).abs() <= 0.03 * target, "{}", var.sqrt());
        // The generator adds exactly this field before clamping.
        let img = gray(256, 256, 0.5);
        let p = gen_noise(&img, 25, 3).unwrap();
        let diff = (&p.degraded - &img.pixels).mapv(|v| v as f64);
        let m = diff.mean().unwrap();
        let s = (diff.mapv(|v| (v - m).powi(2)).sum() / (n - 1.0)).sqrt();
        assert!((s - target).abs() <= 0.03 * target, "{s}");
    }

    #[test]
    fn nonstandard_sigma_is_flagged() {
        let img = gray(8, 8, 0.5);
        for s in STANDARD_SIGMAS {
            let p = gen_noise(&img, s, 0).unwrap();
            assert_eq!(p.params, DegradationParams::Noise(NoiseParams { sigma: s, nonstandard: false }));
        }
        let p = gen_noise(&img, 37, 0).unwrap();
        assert_eq!(p.params, DegradationParams::Noise(NoiseParams { sigma: 37, nonstandard: true }));
    }

    #[test]
    fn rain_neutral_deterministic_and_brightening() {
        let img = textured(2);
        assert_eq!(gen_rain(&img, RainParams::new(0.0, 70.0), 5).unwrap().degraded, img.pixels);
        let a = gen_rain(&img, RainParams::new(0.5, 70.0), 5).unwrap();
        let b = gen_rain(&img, RainParams::new(0.5, 70.0), 5).unwrap();
        assert_eq!(a, b);
        let layer = streak_layer(32, 48, &RainParams::new(0.5, 70.0), 5);
        assert!(layer.iter().all(|&v| v >= 0.0));
        assert!(layer.iter().any(|&v| v > 0.0));
        assert!(gen_rain(&img, RainParams::new(1.5, 70.0), 5).is_err());
    }

    #[test]
    fn haze_limits() {
        let img = textured(3);
        assert_eq!(gen_haze(&img, 1.0, 0.8).unwrap().degraded, img.pixels);
        let full = gen_haze(&img, 0.0, 0.8).unwrap();
        assert!(full.degraded.iter().all(|&v| v == 0.8));
        let black = gray(8, 8, 0.0);
        let half = gen_haze(&black, 0.5, 1.0).unwrap();
        assert!(half.degraded.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn blur_kernel_and_identity() {
        let img = textured(4);
        assert_eq!(gen_blur(&img, 1, 33.0).unwrap().degraded, img.pixels);
        for length in 1..16 {
            for angle in [0.0, 15.0, 45.0, 90.0, 137.0, 180.0] {
                let k = motion_kernel(length, angle);
                assert!((k.sum() - 1.0).abs() < 1e-6);
                assert!(k.iter().all(|&v| v >= 0.0));
            }
        }
        let flat = gray(16, 16, 0.3);
        let b = gen_blur(&flat, 7, 30.0).unwrap();
        assert!(b.degraded.iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn lowlight_arithmetic() {
        let img = textured(5);
        assert_eq!(gen_lowlight(&img, 1.0, 1.0).unwrap().degraded, img.pixels);
        let white = gray(8, 8, 1.0);
        assert!(gen_lowlight(&white, 2.0, 0.5).unwrap().degraded.iter().all(|&v| v == 0.5));
        assert!(gen_lowlight(&img, 0.5, 0.5).is_err());
    }

    #[test]
    fn lowlight_darkens_on_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for i in 0..20 {
            let img = textured(i);
            let gamma = rng.random_range(1.0..4.0);
            let scale = rng.random_range(0.05..=1.0);
            let d = gen_lowlight(&img, gamma, scale).unwrap();
            assert!(d.degraded.mean().unwrap() <= img.pixels.mean().unwrap());
        }
    }

    #[test]
    fn apportion_counts() {
        let w: BTreeMap<Task, f64> = [Task::Denoise, Task::Derain, Task::Dehaze, Task::Deblur]
            .into_iter()
            .map(|t| (t, 0.25))
            .collect();
        let c = apportion(&w, 16).unwrap();
        assert!(c.values().all(|&n| n == 4));
        let w: BTreeMap<Task, f64> = [(Task::Denoise, 1.0), (Task::Derain, 1.0), (Task::Deblur, 2.0)].into();
        let c = apportion(&w, 10).unwrap();
        assert_eq!(c.values().sum::<usize>(), 10);
        assert_eq!(c[&Task::Deblur], 5);
        assert!(apportion(&BTreeMap::new(), 4).is_err());
    }

    #[test]
    fn params_serialize_untagged() {
        let e = ManifestEntry {
            id: "denoise_0000".into(),
            task: Task::Denoise,
            params: DegradationParams::Noise(NoiseParams { sigma: 25, nonstandard: false }),
        };
        let s = serde_json::to_string(&e).unwrap();
        assert_eq!(s, r#"{"id":"denoise_0000","task":"denoise","params":{"sigma":25}}"#);
        let back: ManifestEntry = serde_json::from_str(&s).unwrap();
        assert_eq!(back, e);
        let blur = DegradationParams::Blur(BlurParams { length: 7, angle: 10.0 });
        let back: DegradationParams = serde_json::from_str(&serde_json::to_string(&blur).unwrap()).unwrap();
        assert_eq!(back, blur);
    }
}
