//! PSNR / SSIM on `[0, 1]` images and dataset evaluation.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::backbone::CatAir;
use crate::config::Task;
use crate::degrade::DatasetManifest;
use crate::error::{Error, Result};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same(a: &Array3<f32>, b: &Array3<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("image shapes differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.is_empty() {
        return Err(Error::Empty("image"));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB with peak 1; identical images give `+inf`.
pub fn psnr(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    check_same(a, b)?;
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering with the SSIM window.
fn filter_valid(x: &Array2<f64>, g: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = g.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let rows: Array2<f64> = Array2::from_shape_fn((h, ow), |(y, x0)| (0..n).map(|i| g[i] * x[[y, x0 + i]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(y0, x0)| (0..n).map(|i| g[i] * rows[[y0 + i, x0]]).sum::<f64>())
}

fn ssim_channel(a: ArrayView2<f32>, b: ArrayView2<f32>, g: &[f64]) -> f64 {
    let a = a.mapv(f64::from);
    let b = b.mapv(f64::from);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mu_a = filter_valid(&a, g);
    let mu_b = filter_valid(&b, g);
    let saa = filter_valid(&(&a * &a), g);
    let sbb = filter_valid(&(&b * &b), g);
    let sab = filter_valid(&(&a * &b), g);
    let mut total = 0.0;
    for (((&ma, &mb), (&xx, &yy)), &xy) in mu_a
        .iter()
        .zip(mu_b.iter())
        .zip(saa.iter().zip(sbb.iter()))
        .zip(sab.iter())
    {
        let va = xx - ma * ma;
        let vb = yy - mb * mb;
        let cov = xy - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / mu_a.len() as f64
}

/// Structural similarity: 11x11 Gaussian window (sigma 1.5), computed per channel and averaged.
pub fn ssim(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    check_same(a, b)?;
    let (h, w, c) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}")));
    }
    let g = gaussian_window();
    let sum: f64 = (0..c)
        .map(|ch| ssim_channel(a.index_axis(Axis(2), ch), b.index_axis(Axis(2), ch), &g))
        .sum();
    Ok(sum / c as f64)
}

/// Serializes non-finite dB values as the strings `"inf"`, `"-inf"` and `"nan"`.
pub mod db_serde {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Db {
            Num(f64),
            Text(String),
        }
        match Db::deserialize(d)? {
            Db::Num(v) => Ok(v),
            Db::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("invalid dB value `{other}`"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    #[serde(with = "db_serde")]
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub count: usize,
    /// PSNR of the degraded inputs against the clean targets.
    #[serde(with = "db_serde")]
    pub input_psnr_mean: f64,
    pub input_ssim_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub gamma: f64,
    pub tasks: BTreeMap<Task, TaskMetrics>,
    /// Mean over tasks of the per-task means.
    pub overall: TaskMetrics,
}

/// Per-pair scores, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct PairScore {
    pub id: String,
    pub task: Task,
    pub psnr: f64,
    pub ssim: f64,
    pub input_psnr: f64,
    pub input_ssim: f64,
}

pub fn tensor_to_image(t: &Tensor) -> Result<Array3<f32>> {
    let (h, w, c) = t.dims3()?;
    let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(Array3::from_shape_vec((h, w, c), v).expect("tensor length matches dims"))
}

pub fn image_to_tensor(img: &Array3<f32>, dtype: DType) -> Result<Tensor> {
    let (h, w, c) = img.dim();
    let v: Vec<f32> = img.iter().copied().collect();
    Ok(Tensor::from_vec(v, (h, w, c), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Restores every pair of `manifest` at hard ratio `gamma` and scores it against its clean image.
pub fn score_pairs(model: &CatAir, manifest: &DatasetManifest, gamma: f64) -> Result<Vec<PairScore>> {
    if manifest.entries.is_empty() {
        return Err(Error::Empty("evaluation manifest"));
    }
    manifest
        .entries
        .iter()
        .map(|entry| {
            let (clean, degraded) = manifest.load_pair(entry)?;
            let (restored, _) = model.restore(&image_to_tensor(&degraded, model.dtype())?, gamma)?;
            let restored = tensor_to_image(&restored)?.mapv(|v| v.clamp(0.0, 1.0));
            Ok(PairScore {
                id: entry.id.clone(),
                task: entry.task,
                psnr: psnr(&restored, &clean)?,
                ssim: ssim(&restored, &clean)?,
                input_psnr: psnr(&degraded, &clean)?,
                input_ssim: ssim(&degraded, &clean)?,
            })
        })
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Aggregates per-pair scores into per-task means.
pub fn aggregate(scores: &[PairScore], gamma: f64) -> Result<EvalResult> {
    if scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    let mut by_task: BTreeMap<Task, Vec<&PairScore>> = BTreeMap::new();
    for s in scores {
        by_task.entry(s.task).or_default().push(s);
    }
    let tasks: BTreeMap<Task, TaskMetrics> = by_task
        .into_iter()
        .map(|(t, v)| {
            let m = TaskMetrics {
                psnr_mean: mean(v.iter().map(|s| s.psnr)),
                ssim_mean: mean(v.iter().map(|s| s.ssim)),
                count: v.len(),
                input_psnr_mean: mean(v.iter().map(|s| s.input_psnr)),
                input_ssim_mean: mean(v.iter().map(|s| s.input_ssim)),
            };
            (t, m)
        })
        .collect();
    let overall = TaskMetrics {
        psnr_mean: mean(tasks.values().map(|m| m.psnr_mean)),
        ssim_mean: mean(tasks.values().map(|m| m.ssim_mean)),
        count: scores.len(),
        input_psnr_mean: mean(tasks.values().map(|m| m.input_psnr_mean)),
        input_ssim_mean: mean(tasks.values().map(|m| m.input_ssim_mean)),
    };
    Ok(EvalResult { gamma, tasks, overall })
}

pub fn evaluate(model: &CatAir, manifest: &DatasetManifest, gamma: f64) -> Result<EvalResult> {
    aggregate(&score_pairs(model, manifest, gamma)?, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, seed: u64) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((h, w, 3), || rng.random())
    }

    #[test]
    fn psnr_closed_forms() {
        let a = random(16, 16, 1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let zero = Array3::<f32>::zeros((8, 8, 3));
        let step = Array3::<f32>::from_elem((8, 8, 3), 1.0 / 255.0);
        let p = psnr(&zero, &step).unwrap();
        assert!((p - 20.0 * 255f64.log10()).abs() < 1e-4, "{p}");
        assert!((p - 48.1308).abs() < 1e-4);
        let tenth = Array3::<f32>::from_elem((8, 8, 3), 0.1);
        assert!((psnr(&zero, &tenth).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&zero, &Array3::zeros((8, 4, 3))).is_err());
    }

    #[test]
    fn psnr_decreases_with_mse() {
        let mut last = f64::INFINITY;
        for i in 1..50 {
            let v = psnr_from_mse(i as f64 * 1e-3);
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn ssim_properties() {
        let a = random(24, 20, 2);
        let b = random(24, 20, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let ab = ssim(&a, &b).unwrap();
        assert_eq!(ab, ssim(&b, &a).unwrap());
        assert!((-1.0..=1.0).contains(&ab));
        let zeros = Array3::<f32>::zeros((16, 16, 3));
        let ones = Array3::<f32>::ones((16, 16, 3));
        assert!(ssim(&zeros, &ones).unwrap() < 0.01);
        assert!(ssim(&Array3::zeros((8, 8, 3)), &Array3::zeros((8, 8, 3))).is_err());
    }

    #[test]
    fn gaussian_window_normalized() {
        let g = gaussian_window();
        assert_eq!(g.len(), 11);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(g[0], g[10]);
    }

    #[test]
    fn infinite_psnr_serializes_as_string() {
        let m = TaskMetrics {
            psnr_mean: f64::INFINITY,
            ssim_mean: 1.0,
            count: 1,
            input_psnr_mean: 20.0,
            input_ssim_mean: 0.5,
        };
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains(r#""psnr_mean":"inf""#), "{s}");
        let back: TaskMetrics = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn aggregate_one_entry_per_task() {
        let mk = |task, psnr| PairScore {
            id: String::new(),
            task,
            psnr,
            ssim: 0.5,
            input_psnr: 10.0,
            input_ssim: 0.2,
        };
        let r = aggregate(&[mk(Task::Denoise, 30.0), mk(Task::Derain, 20.0), mk(Task::Denoise, 32.0)], 0.5).unwrap();
        assert_eq!(r.tasks.len(), 2);
        assert_eq!(r.tasks[&Task::Denoise].psnr_mean, 31.0);
        assert_eq!(r.tasks[&Task::Denoise].count, 2);
        assert_eq!(r.overall.psnr_mean, 25.5);
        assert!(aggregate(&[], 0.5).is_err());
    }
}
