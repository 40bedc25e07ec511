//! Loss and EMA laws, training determinism and prompt growth.

use candle_core::{DType, Device, Tensor};
use catair::backbone::PromptBank;
use catair::degrade::{gen_noise, procedural_image, CleanImage};
use catair::training::{
    ema_step, extend, grow_prompts, loss, train, EmaState, ExtensionPlan, PairSet, TrainConfig, TrainPair,
};
use catair::{CatAir, Checkpoint, InitOptions, ModelConfig, Task};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn s(v: f64) -> Tensor {
    Tensor::new(v, &Device::Cpu).unwrap()
}

fn val(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

#[test]
fn loss_examples() {
    let a = Tensor::full(0.7f64, (2, 8, 8, 3), &Device::Cpu).unwrap();
    let (total, parts) = loss(&a, &a, &[s(0.4), s(0.6)], 0.5).unwrap();
    assert_eq!(parts.total, 0.0);
    assert_eq!(val(&total), 0.0);
    let (_, parts) = loss(&a, &a, &[s(0.6), s(0.6), s(0.6)], 0.5).unwrap();
    assert!((parts.ratio_reg - 0.01).abs() < 1e-15);
    let b = (&a - 0.1).unwrap();
    let (_, parts) = loss(&b, &a, &[s(0.5)], 0.5).unwrap();
    assert!((parts.l1 - 0.1).abs() < 1e-12);
    assert_eq!(parts.ratio_reg, 0.0);
}

#[test]
fn ema_single_step_and_fixed_point() {
    assert_eq!(val(&ema_step(&s(1.0), &s(0.0), 0.999).unwrap()), 0.999);
    assert_eq!(val(&ema_step(&s(-3.5), &s(-3.5), 0.999).unwrap()), -3.5);
}

#[test]
fn ema_closed_form_after_ten_updates() {
    let (beta, theta, s0) = (0.999, 0.37, -1.25);
    let mut shadow = s(s0);
    for _ in 0..10 {
        shadow = ema_step(&shadow, &s(theta), beta).unwrap();
    }
    let expected = theta + beta.powi(10) * (s0 - theta);
    assert!((val(&shadow) - expected).abs() < 1e-10);
}

fn tiny(tasks: usize) -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        enc_blocks: [1, 1, 1, 1],
        dec_blocks: [1, 1, 1],
        window: 2,
        task_count: tasks,
        prompt_size: 4,
        ..ModelConfig::default()
    }
}

#[test]
fn ema_state_tracks_model_parameters() {
    let model = CatAir::new(&tiny(3), &InitOptions::default()).unwrap();
    let start: Vec<Vec<f32>> = model.params().iter().map(|p| p.var.flatten_all().unwrap().to_vec1().unwrap()).collect();
    let mut ema = EmaState::new(model.params(), 0.9).unwrap();
    for p in model.params().iter() {
        p.var.set(&p.var.ones_like().unwrap()).unwrap();
    }
    for _ in 0..10 {
        ema.update(model.params()).unwrap();
    }
    let k = 0.9f64.powi(10);
    for ((_, sh), s0) in ema.shadow.iter().zip(&start) {
        let got: Vec<f32> = sh.flatten_all().unwrap().to_vec1().unwrap();
        for (g, s0) in got.iter().zip(s0) {
            let expected = 1.0 + k * (*s0 as f64 - 1.0);
            assert!((*g as f64 - expected).abs() < 1e-5);
        }
    }
    assert!(EmaState::new(model.params(), 1.0).is_err());
}

proptest! {
    #[test]
    fn ema_contracts_toward_theta(
        shadow in -10.0f64..10.0,
        theta in -10.0f64..10.0,
        beta in 0.5f64..0.9999,
    ) {
        let next = val(&ema_step(&s(shadow), &s(theta), beta).unwrap());
        let lhs = (next - theta).abs();
        let rhs = beta * (shadow - theta).abs();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + shadow.abs() + theta.abs()));
    }

    #[test]
    fn ratio_term_vanishes_only_at_target(g in 0.0f64..1.0, g0 in 0.0f64..1.0) {
        let a = Tensor::zeros((1, 2, 2, 3), DType::F64, &Device::Cpu).unwrap();
        let (_, parts) = loss(&a, &a, &[s(g)], g0).unwrap();
        prop_assert_eq!(parts.ratio_reg == 0.0, g == g0);
    }
}

fn noise_pairs(n: u64, size: usize) -> PairSet {
    let pairs = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            let clean = CleanImage::new(procedural_image(size, size, &mut rng), format!("p{i}")).unwrap();
            let pair = gen_noise(&clean, 25, i).unwrap();
            TrainPair {
                clean: pair.clean.pixels,
                degraded: pair.degraded,
                task: Task::Denoise,
            }
        })
        .collect();
    PairSet { pairs }
}

#[test]
fn training_is_seed_deterministic_and_finite() {
    let data = noise_pairs(3, 24);
    let cfg = TrainConfig {
        steps: 3,
        lr: 1e-3,
        batch_size: 2,
        crop: 16,
        seed: 5,
        ..TrainConfig::default()
    };
    let tasks = [Task::Denoise, Task::Derain, Task::Dehaze];
    let run = || {
        let mut m = CatAir::new(&tiny(3), &InitOptions { seed: 2, ..Default::default() }).unwrap();
        train(&mut m, &tasks, &data, &cfg, None).unwrap().history
    };
    let (a, b) = (run(), run());
    assert_eq!(a.len(), 3);
    assert!(a.iter().all(|l| l.total.is_finite()));
    assert_eq!(a, b);
}

#[test]
fn training_writes_metrics_and_both_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = noise_pairs(2, 16);
    let cfg = TrainConfig {
        steps: 2,
        batch_size: 1,
        crop: 16,
        ..TrainConfig::default()
    };
    let mut m = CatAir::new(&tiny(3), &InitOptions::default()).unwrap();
    train(&mut m, &[Task::Denoise, Task::Derain, Task::Dehaze], &data, &cfg, Some(dir.path())).unwrap();
    let log = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for key in ["step", "l1", "ratio_reg", "mean_gamma"] {
        assert!(lines[0].get(key).is_some(), "{key}");
    }
    assert!(Checkpoint::load(dir.path().join("raw")).is_ok());
    assert!(Checkpoint::load(dir.path().join("ema")).is_ok());
}

fn base() -> Checkpoint {
    let options = InitOptions {
        seed: 4,
        zero_output_conv: false,
        ..Default::default()
    };
    let model = CatAir::new(&tiny(3), &options).unwrap();
    Checkpoint::new(model, vec![Task::Denoise, Task::Derain, Task::Dehaze]).unwrap()
}

#[test]
fn growing_prompts_keeps_old_rows_bit_exact() {
    let base = base();
    let plan = ExtensionPlan::new(&base.tasks, &[Task::Deblur]).unwrap();
    let grown = grow_prompts(&base, &plan, 9).unwrap();
    assert_eq!(grown.tasks.len(), 4);
    let mut banks = 0;
    for p in grown.model.params().iter() {
        let old = base.model.params().get(&p.name).unwrap();
        let axis = PromptBank::TASK_AXES.iter().find(|(s, _)| p.name.ends_with(&format!("prompt.{s}")));
        match axis {
            Some(&(_, axis)) => {
                banks += 1;
                assert_eq!(p.var.dim(axis).unwrap(), 4, "{}", p.name);
                let kept = p.var.narrow(axis, 0, 3).unwrap();
                let a: Vec<u32> = kept.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect();
                let b: Vec<u32> = old.var.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect();
                assert_eq!(a, b, "{}", p.name);
                let scale = p.lr_scale.as_ref().expect("new rows carry a learning-rate scale");
                assert_eq!(val(&scale.narrow(axis, 0, 3).unwrap().max_all().unwrap()), 1.0);
                assert_eq!(val(&scale.narrow(axis, 3, 1).unwrap().min_all().unwrap()), 5.0);
            }
            None => {
                assert_eq!(p.var.dims(), old.var.dims(), "{}", p.name);
                assert!(p.lr_scale.is_none());
            }
        }
    }
    assert_eq!(banks, 9);
}

#[test]
fn extension_rejects_task_collisions() {
    let base = base();
    assert!(ExtensionPlan::new(&base.tasks, &[Task::Derain]).is_err());
    assert!(ExtensionPlan::new(&base.tasks, &[]).is_err());
}

#[test]
fn default_mix_gives_new_tasks_double_weight() {
    let plan = ExtensionPlan::new(&[Task::Denoise, Task::Derain, Task::Dehaze], &[Task::Deblur]).unwrap();
    assert!((plan.mix[&Task::Deblur] - 0.4).abs() < 1e-12);
    assert!((plan.mix[&Task::Denoise] - 0.2).abs() < 1e-12);
}

#[test]
fn zero_step_extension_keeps_old_outputs() {
    let base = base();
    let plan = ExtensionPlan::new(&base.tasks, &[Task::Lowlight]).unwrap();
    let cfg = TrainConfig {
        steps: 0,
        crop: 16,
        ..TrainConfig::default()
    };
    let (grown, outcome) = extend(&base, &plan, &noise_pairs(1, 16), &cfg, None).unwrap();
    assert_eq!(grown.tasks.len(), 4);
    assert_eq!(grown.model.config.task_count, 4);
    for p in base.model.params().iter().filter(|p| !p.name.contains(".prompt.")) {
        let g = grown.model.params().get(&p.name).unwrap();
        assert_eq!(val(&(g.var.as_tensor() - p.var.as_tensor()).unwrap().abs().unwrap().max_all().unwrap()), 0.0, "{}", p.name);
    }
    let ema = outcome.ema.expect("extension keeps an EMA shadow");
    assert_eq!(ema.shadow.len(), grown.model.params().len());
    let x = Tensor::rand(0f32, 1.0, (16, 16, 3), &Device::Cpu).unwrap();
    for gamma in [0.0, 0.5, 1.0] {
        let (a, _) = base.model.restore(&x, gamma).unwrap();
        let (b, _) = grown.model.restore(&x, gamma).unwrap();
        assert!(val(&(a - b).unwrap().abs().unwrap().max_all().unwrap()) < 1e-4);
    }
}
