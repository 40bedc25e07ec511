//! Loss, optimizer, EMA shadows, the training loop and prompt-bank task extension.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use ndarray::{s, Array3, ArrayView3, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{CatAir, InitOptions, PromptBank};
use crate::checkpoint::{save_tensors, Checkpoint};
use crate::config::Task;
use crate::degrade::DatasetManifest;
use crate::error::{config_bail, Error, Result};
use crate::nn::ParamStore;
use crate::spatial::Routing;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub ratio_reg: f64,
    pub total: f64,
    pub mean_gamma: f64,
}

/// `mean |pred - target| + (mean(gammas) - gamma0)^2`. Returns the differentiable total and
/// its parts.
pub fn loss(pred: &Tensor, target: &Tensor, gammas: &[Tensor], gamma0: f64) -> Result<(Tensor, LossBreakdown)> {
    if pred.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} differ",
            pred.dims(),
            target.dims()
        )));
    }
    if gammas.is_empty() {
        return Err(Error::Empty("hard-ratio list"));
    }
    let l1 = (pred - target.to_dtype(pred.dtype())?)?.abs()?.mean_all()?;
    let gammas: Vec<Tensor> = gammas.iter().map(|g| g.reshape(())).collect::<candle_core::Result<_>>()?;
    let mean_gamma = Tensor::stack(&gammas, 0)?.mean_all()?.to_dtype(pred.dtype())?;
    let ratio_reg = (mean_gamma.clone() - gamma0)?.sqr()?;
    let total = (&l1 + &ratio_reg)?;
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let parts = LossBreakdown {
        l1: scalar(&l1)?,
        ratio_reg: scalar(&ratio_reg)?,
        total: scalar(&total)?,
        mean_gamma: scalar(&mean_gamma)?,
    };
    Ok((total, parts))
}

/// Adaptive-moment optimizer with optional per-element learning-rate scales.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        if self.moments.len() != params.len() {
            self.moments = vec![None; params.len()];
        }
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (p, slot) in params.iter().zip(self.moments.iter_mut()) {
            let Some(g) = grads.get(p.var.as_tensor()) else { continue };
            let g = &g.detach();
            let (m, v) = match slot.take() {
                Some((m, v)) => (
                    ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                    ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                ),
                None => ((g * (1.0 - self.beta1))?, (g.sqr()? * (1.0 - self.beta2))?),
            };
            let mut update = ((&m / c1)? / ((&v / c2)?.sqrt()? + self.eps)?)?;
            update = (update * self.lr)?;
            if let Some(scale) = &p.lr_scale {
                update = (update * scale)?;
            }
            p.var.set(&(p.var.as_tensor().detach() - update)?)?;
            *slot = Some((m.detach(), v.detach()));
        }
        Ok(())
    }
}

/// `shadow * beta + theta * (1 - beta)`.
pub fn ema_step(shadow: &Tensor, theta: &Tensor, beta: f64) -> Result<Tensor> {
    Ok(((shadow * beta)? + (theta * (1.0 - beta))?)?)
}

/// Exponential moving average of the parameters.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub beta: f64,
    pub shadow: Vec<(String, Tensor)>,
}

impl EmaState {
    pub const DEFAULT_BETA: f64 = 0.999;

    pub fn new(params: &ParamStore, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            config_bail!("EMA beta must lie in (0, 1), got {beta}");
        }
        let shadow = params
            .iter()
            .map(|p| Ok((p.name.clone(), p.var.as_tensor().copy()?.detach())))
            .collect::<Result<_>>()?;
        Ok(Self { beta, shadow })
    }

    pub fn update(&mut self, params: &ParamStore) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(Error::Shape("EMA shadow does not match the model".into()));
        }
        for ((name, s), p) in self.shadow.iter_mut().zip(params.iter()) {
            if *name != p.name || s.dims() != p.var.dims() {
                return Err(Error::Shape(format!("EMA shadow {name} does not match {}", p.name)));
            }
            *s = ema_step(s, &p.var.as_tensor().detach(), self.beta)?.detach();
        }
        Ok(())
    }

    /// Copies the shadow values into `model`.
    pub fn apply_to(&self, model: &CatAir) -> Result<()> {
        for (name, s) in &self.shadow {
            let p = model
                .params()
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("no parameter named {name}")))?;
            p.var.set(s)?;
        }
        Ok(())
    }
}

/// One clean/degraded training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub clean: Array3<f32>,
    pub degraded: Array3<f32>,
    pub task: Task,
}

/// In-memory paired dataset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<TrainPair>,
}

impl PairSet {
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        let pairs = manifest
            .entries
            .iter()
            .map(|e| {
                let (clean, degraded) = manifest.load_pair(e)?;
                Ok(TrainPair { clean, degraded, task: e.task })
            })
            .collect::<Result<_>>()?;
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn tasks(&self) -> Vec<Task> {
        let mut t: Vec<Task> = self.pairs.iter().map(|p| p.task).collect();
        t.sort();
        t.dedup();
        t
    }
}

/// One of the eight flips/rotations of a square or rectangular image.
pub fn dihedral(img: ArrayView3<f32>, variant: u8) -> Array3<f32> {
    let mut v = img;
    for _ in 0..(variant % 4) {
        // Rotate 90 degrees: transpose, then mirror columns.
        v = v.permuted_axes([1, 0, 2]);
        v.invert_axis(Axis(1));
    }
    if variant >= 4 {
        v.invert_axis(Axis(1));
    }
    v.to_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub seed: u64,
    pub use_ema: bool,
    pub ema_beta: f64,
    /// Random flips and quarter turns of each crop.
    pub augment: bool,
    /// Sampling weight per task; uniform over pairs when empty.
    pub task_weights: BTreeMap<Task, f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 2e-4,
            batch_size: 4,
            crop: 64,
            seed: 0,
            use_ema: true,
            ema_beta: EmaState::DEFAULT_BETA,
            augment: true,
            task_weights: BTreeMap::new(),
        }
    }
}

/// Metrics log line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub l1: f64,
    pub ratio_reg: f64,
    pub mean_gamma: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<LossBreakdown>,
    pub ema: Option<EmaState>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<LossBreakdown> {
        self.history.last().copied()
    }
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RAW_DIR: &str = "raw";
pub const EMA_DIR: &str = "ema";

struct Sampler {
    rng: ChaCha8Rng,
    by_task: Vec<Vec<usize>>,
    weights: Option<WeightedIndex<f64>>,
    total: usize,
}

impl Sampler {
    fn new(data: &PairSet, weights: &BTreeMap<Task, f64>, seed: u64) -> Result<Self> {
        let tasks = data.tasks();
        let by_task: Vec<Vec<usize>> = tasks
            .iter()
            .map(|t| (0..data.len()).filter(|&i| data.pairs[i].task == *t).collect())
            .collect();
        let weights = if weights.is_empty() {
            None
        } else {
            if let Some(t) = weights.keys().find(|t| !tasks.contains(t)) {
                config_bail!("task weight given for `{t}` but the dataset has no such pairs");
            }
            let w: Vec<f64> = tasks.iter().map(|t| weights.get(t).copied().unwrap_or(0.0)).collect();
            Some(WeightedIndex::new(&w).map_err(|e| Error::Config(format!("invalid task weights: {e}")))?)
        };
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            by_task,
            weights,
            total: data.len(),
        })
    }

    fn next(&mut self) -> usize {
        match &self.weights {
            Some(w) => {
                let pool = &self.by_task[w.sample(&mut self.rng)];
                pool[self.rng.random_range(0..pool.len())]
            }
            None => self.rng.random_range(0..self.total),
        }
    }
}

fn crop_pair(pair: &TrainPair, crop: usize, augment: bool, rng: &mut ChaCha8Rng) -> Result<(Array3<f32>, Array3<f32>)> {
    let (h, w, _) = pair.clean.dim();
    if pair.degraded.dim() != pair.clean.dim() {
        return Err(Error::Shape("clean and degraded images differ in size".into()));
    }
    if h < crop || w < crop {
        return Err(Error::Shape(format!("image {h}x{w} is smaller than the {crop}x{crop} crop")));
    }
    let y = rng.random_range(0..=h - crop);
    let x = rng.random_range(0..=w - crop);
    let variant: u8 = if augment { rng.random_range(0..8) } else { 0 };
    let window = s![y..y + crop, x..x + crop, ..];
    Ok((
        dihedral(pair.clean.slice(window), variant),
        dihedral(pair.degraded.slice(window), variant),
    ))
}

fn stack_batch(images: &[Array3<f32>], dtype: DType) -> Result<Tensor> {
    let (h, w, c) = images[0].dim();
    let data: Vec<f32> = images.iter().flat_map(|i| i.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (images.len(), h, w, c), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Trains `model` in place. With `out_dir`, writes `metrics.jsonl` and the `raw/` and `ema/`
/// checkpoints.
pub fn train(model: &mut CatAir, tasks: &[Task], data: &PairSet, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    if cfg.batch_size == 0 {
        config_bail!("batch_size must be positive");
    }
    model.config.check_input(cfg.crop, cfg.crop)?;
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            Some((path, BufWriter::new(f)))
        }
        None => None,
    };

    let mut sampler = Sampler::new(data, &cfg.task_weights, cfg.seed)?;
    let mut crop_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut adam = Adam::new(cfg.lr);
    let mut ema = if cfg.use_ema {
        Some(EmaState::new(model.params(), cfg.ema_beta)?)
    } else {
        None
    };
    let routing = Routing::train(model.config.temperature);
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let mut clean = Vec::with_capacity(cfg.batch_size);
        let mut degraded = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (c, d) = crop_pair(&data.pairs[sampler.next()], cfg.crop, cfg.augment, &mut crop_rng)?;
            clean.push(c);
            degraded.push(d);
        }
        let target = stack_batch(&clean, model.dtype())?;
        let input = stack_batch(&degraded, model.dtype())?;
        let out = model.forward(&input, routing, &mut noise_rng)?;
        let (total, parts) = loss(&out.restored, &target, &out.gammas, model.config.gamma0)?;
        if !parts.total.is_finite() {
            return Err(Error::Diverged { step, loss: parts.total });
        }
        let grads = total.backward()?;
        adam.step(model.params(), &grads)?;
        if let Some(ema) = ema.as_mut() {
            ema.update(model.params())?;
        }
        if let Some((path, w)) = log.as_mut() {
            let line = StepLog {
                step,
                l1: parts.l1,
                ratio_reg: parts.ratio_reg,
                mean_gamma: parts.mean_gamma,
            };
            serde_json::to_writer(&mut *w, &line).map_err(|e| Error::json(&*path, e))?;
            w.write_all(b"\n").map_err(|e| Error::io(&*path, e))?;
        }
        log::debug!("step {step}: l1 {:.5} reg {:.5} gamma {:.3}", parts.l1, parts.ratio_reg, parts.mean_gamma);
        history.push(parts);
    }

    if let Some((path, mut w)) = log {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(dir) = out_dir {
        Checkpoint::new(model.clone(), tasks.to_vec())?.save(dir.join(RAW_DIR))?;
        if let Some(ema) = &ema {
            save_tensors(dir.join(EMA_DIR), &model.config, tasks, &ema.shadow)?;
        }
    }
    Ok(TrainOutcome { history, ema })
}

/// How to grow a checkpoint from `N` to `N + M` tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtensionPlan {
    pub old_tasks: Vec<Task>,
    pub new_tasks: Vec<Task>,
    /// Sampling weight per task during fine-tuning; sums to 1.
    pub mix: BTreeMap<Task, f64>,
    pub lr_base: f64,
    pub lr_prompt_multiplier: f64,
}

impl ExtensionPlan {
    pub const DEFAULT_PROMPT_MULTIPLIER: f64 = 5.0;
    /// Weight of each new task relative to each old task.
    pub const DEFAULT_NEW_TASK_WEIGHT: f64 = 2.0;
    /// New tasks start with zero mixing weights and a bias this far below the smallest old
    /// bias, so their prompt share starts near `exp(-10)` and the old outputs barely move.
    pub const NEW_TASK_BIAS_OFFSET: f64 = 10.0;

    pub fn new(old_tasks: &[Task], new_tasks: &[Task]) -> Result<Self> {
        let raw: Vec<(Task, f64)> = old_tasks
            .iter()
            .map(|&t| (t, 1.0))
            .chain(new_tasks.iter().map(|&t| (t, Self::DEFAULT_NEW_TASK_WEIGHT)))
            .collect();
        let sum: f64 = raw.iter().map(|(_, w)| w).sum();
        let plan = Self {
            old_tasks: old_tasks.to_vec(),
            new_tasks: new_tasks.to_vec(),
            mix: raw.into_iter().map(|(t, w)| (t, w / sum)).collect(),
            lr_base: 2e-4,
            lr_prompt_multiplier: Self::DEFAULT_PROMPT_MULTIPLIER,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.new_tasks.is_empty() {
            config_bail!("an extension must add at least one task");
        }
        let mut seen: Vec<Task> = Vec::new();
        for &t in self.old_tasks.iter().chain(&self.new_tasks) {
            if seen.contains(&t) {
                return Err(Error::TaskCollision(t.to_string()));
            }
            seen.push(t);
        }
        if let Some(t) = self.mix.keys().find(|t| !seen.contains(t)) {
            config_bail!("mix weight for `{t}`, which is neither an old nor a new task");
        }
        let sum: f64 = self.mix.values().sum();
        if (sum - 1.0).abs() > 1e-9 || self.mix.values().any(|w| *w < 0.0) {
            config_bail!("mix weights must be non-negative and sum to 1, got {sum}");
        }
        if !(self.lr_base > 0.0) || !(self.lr_prompt_multiplier > 0.0) {
            config_bail!("learning rates must be positive");
        }
        Ok(())
    }

    pub fn all_tasks(&self) -> Vec<Task> {
        self.old_tasks.iter().chain(&self.new_tasks).copied().collect()
    }
}

/// Builds the `N + M`-task model: every parameter is copied from `base`; prompt-bank tensors
/// keep their old task rows bit-exactly and gain new rows whose learning rate is scaled by
/// the plan's multiplier. New components are freshly initialized; new mixing rows start
/// switched off (see [`ExtensionPlan::NEW_TASK_BIAS_OFFSET`]).
pub fn grow_prompts(base: &Checkpoint, plan: &ExtensionPlan, seed: u64) -> Result<Checkpoint> {
    plan.validate()?;
    if plan.old_tasks != base.tasks {
        config_bail!(
            "plan starts from tasks {:?} but the checkpoint has {:?}",
            plan.old_tasks,
            base.tasks
        );
    }
    let n = base.tasks.len();
    let total = n + plan.new_tasks.len();
    let mut cfg = base.model.config.clone();
    cfg.task_count = total;
    let mut grown = CatAir::new(
        &cfg,
        &InitOptions {
            seed,
            dtype: base.model.dtype(),
            ..Default::default()
        },
    )?;
    let skipped = grown.copy_matching_params(&base.model)?;
    let mut scales = Vec::new();
    for name in skipped {
        let Some((_, axis)) = PromptBank::TASK_AXES.iter().find(|(s, _)| name.ends_with(&format!("prompt.{s}"))) else {
            return Err(Error::Checkpoint(format!("parameter {name} changed shape outside the prompt banks")));
        };
        let old = base.model.params().get(&name).expect("skipped names come from the grown model");
        let new = grown.params().get(&name).expect("present");
        let old_rows = old.var.as_tensor().to_dtype(grown.dtype())?;
        let fresh = if name.ends_with("prompt.mix_weight") {
            new.var.narrow(*axis, n, total - n)?.zeros_like()?
        } else if name.ends_with("prompt.mix_bias") {
            let floor = old_rows.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()? - ExtensionPlan::NEW_TASK_BIAS_OFFSET;
            Tensor::full(floor, total - n, grown.device())?.to_dtype(grown.dtype())?
        } else {
            new.var.narrow(*axis, n, total - n)?
        };
        new.var.set(&Tensor::cat(&[&old_rows, &fresh], *axis)?)?;
        let keep = Tensor::ones(old_rows.dims(), grown.dtype(), grown.device())?;
        let boost = (Tensor::ones(fresh.dims(), grown.dtype(), grown.device())? * plan.lr_prompt_multiplier)?;
        scales.push((name, Tensor::cat(&[&keep, &boost], *axis)?));
    }
    for (name, scale) in scales {
        grown.params_mut().set_lr_scale(&name, scale)?;
    }
    Checkpoint::new(grown, plan.all_tasks())
}

/// Grows `base` per `plan` and fine-tunes on `data` with EMA enabled. The returned checkpoint
/// holds the fine-tuned raw weights; the EMA shadow is in the outcome.
pub fn extend(
    base: &Checkpoint,
    plan: &ExtensionPlan,
    data: &PairSet,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(Checkpoint, TrainOutcome)> {
    let mut grown = grow_prompts(base, plan, cfg.seed)?;
    let cfg = TrainConfig {
        lr: plan.lr_base,
        use_ema: true,
        task_weights: plan.mix.clone(),
        ..cfg.clone()
    };
    let outcome = if cfg.steps == 0 {
        TrainOutcome {
            history: Vec::new(),
            ema: Some(EmaState::new(grown.model.params(), cfg.ema_beta)?),
        }
    } else {
        let tasks = grown.tasks.clone();
        train(&mut grown.model, &tasks, data, &cfg, out_dir)?
    };
    Ok((grown, outcome))
}
