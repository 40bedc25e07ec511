#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use catair::nn::{with_init, Init, ParamStore};
use catair::Result;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms; below it central
/// differences are dominated by round-off.
pub const FLOOR: f64 = 1e-4;

/// Builds a module in f64 with its own parameter store.
pub fn build<T>(seed: u64, f: impl FnOnce(&mut Init) -> Result<T>) -> (T, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = with_init(&mut store, &mut rng, DType::F64, &Device::Cpu, false, f).unwrap();
    (m, store)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Central-difference check of `loss` against autograd for `vars`. With `fraction < 1`
/// only that share of each tensor's elements (at least one) is probed.
/// Returns the worst relative error.
pub fn check(vars: &[(String, Var)], fraction: f64, seed: u64, loss: impl Fn() -> Tensor) -> f64 {
    let grads = loss().backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0, String::new());
    for (name, var) in vars {
        let analytic: Vec<f64> = match grads.get(var) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; var.elem_count()],
        };
        let base: Vec<f64> = var.flatten_all().unwrap().to_vec1().unwrap();
        let n = base.len();
        let picks = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
        for i in sample(&mut rng, n, picks) {
            let probe = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()).unwrap();
                scalar(&loss())
            };
            let numeric = (probe(STEP) - probe(-STEP)) / (2.0 * STEP);
            let e = rel_err(analytic[i], numeric);
            if e > worst.0 {
                worst = (e, format!("{name}[{i}] analytic {} numeric {numeric}", analytic[i]));
            }
        }
        var.set(&Tensor::from_vec(base, var.dims(), &Device::Cpu).unwrap()).unwrap();
    }
    if worst.0 > 0.0 {
        eprintln!("worst: {:.3e} at {}", worst.0, worst.1);
    }
    worst.0
}

/// Named vars of a store plus an input var.
pub fn vars_with_input(store: &ParamStore, input: &Var) -> Vec<(String, Var)> {
    let mut v: Vec<(String, Var)> = store.iter().map(|p| (p.name.clone(), p.var.clone())).collect();
    v.push(("input".into(), input.clone()));
    v
}
