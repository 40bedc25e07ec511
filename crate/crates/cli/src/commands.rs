use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use catair::checkpoint::CONFIG_FILE;
use catair::costmodel::{count_exact, formula_report, parse_range, sweep, sweep_csv, Mode, SweepParam};
use catair::degrade::{build_dataset, read_png, write_png, DatasetManifest};
use catair::masks::dump_masks;
use catair::metrics::{evaluate, image_to_tensor, tensor_to_image};
use catair::training::{extend, train, EmaState, ExtensionPlan, PairSet, TrainConfig, EMA_DIR, RAW_DIR};
use catair::{CatAir, Checkpoint, InitOptions, Task};
use log::info;

use crate::run_config::RunConfig;
use crate::{Cli, Command, EvalArgs, ExtendArgs, Failure, FlopsArgs, InferArgs, SynthArgs, TrainArgs, TrainOverrides};

type Result<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

pub fn run(cli: Cli) -> Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref()).map_err(|e| usage(format!("{e:#}")))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.train.seed = config.seed;
    match cli.command {
        Command::Synth(a) => synth(config, a),
        Command::Train(a) => train_cmd(config, a),
        Command::Extend(a) => extend_cmd(config, a),
        Command::Eval(a) => eval(config, a),
        Command::Flops(a) => flops(config, a),
        Command::Infer(a) => infer(config, a),
    }
}

fn parse_task(s: &str) -> Result<Task> {
    s.parse().map_err(|e: catair::Error| usage(e.to_string()))
}

fn synth(mut config: RunConfig, a: SynthArgs) -> Result<()> {
    if let Some(h) = a.height {
        config.data.height = h;
    }
    if let Some(w) = a.width {
        config.data.width = w;
    }
    if !a.counts.is_empty() {
        let mut counts = BTreeMap::new();
        for c in &a.counts {
            let (task, n) = c.split_once('=').ok_or_else(|| usage(format!("--count expects TASK=N, got `{c}`")))?;
            let n: usize = n.parse().map_err(|_| usage(format!("--count expects a count, got `{n}`")))?;
            counts.insert(parse_task(task)?, n);
        }
        config.data.counts = counts;
        config.data.total = None;
    }
    let request = config.dataset_request()?;
    let manifest = build_dataset(&request, &a.out)?;
    config.echo(&a.out)?;
    info!("wrote {} pairs to {}", manifest.entries.len(), a.out.display());
    Ok(())
}

fn apply_overrides(cfg: &mut TrainConfig, o: &TrainOverrides) {
    if let Some(v) = o.steps {
        cfg.steps = v;
    }
    if let Some(v) = o.lr {
        cfg.lr = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.crop {
        cfg.crop = v;
    }
    if o.no_ema {
        cfg.use_ema = false;
    }
    if o.no_augment {
        cfg.augment = false;
    }
}

fn load_pairs(dir: &Path) -> Result<(DatasetManifest, PairSet)> {
    let manifest = DatasetManifest::read(dir)?;
    let pairs = PairSet::from_manifest(&manifest)?;
    Ok((manifest, pairs))
}

fn summarize(out: &Path, outcome: &catair::training::TrainOutcome) {
    if let Some(last) = outcome.final_loss() {
        info!(
            "{} steps: l1 {:.5}, ratio term {:.5}, mean gamma {:.3}; checkpoints in {}",
            outcome.history.len(),
            last.l1,
            last.ratio_reg,
            last.mean_gamma,
            out.display()
        );
    }
}

fn train_cmd(mut config: RunConfig, a: TrainArgs) -> Result<()> {
    apply_overrides(&mut config.train, &a.train);
    let (_, data) = load_pairs(&a.data)?;
    let tasks = data.tasks();
    if tasks.len() > config.model.task_count {
        config.model.task_count = tasks.len();
    }
    let options = InitOptions {
        seed: config.seed,
        ..InitOptions::default()
    };
    let mut model = CatAir::new(&config.model, &options)?;
    config.echo(&a.out)?;
    let outcome = train(&mut model, &tasks, &data, &config.train, Some(&a.out))?;
    summarize(&a.out, &outcome);
    Ok(())
}

fn extend_cmd(mut config: RunConfig, a: ExtendArgs) -> Result<()> {
    apply_overrides(&mut config.train, &a.train);
    if !a.new_tasks.is_empty() {
        config.extend.new_tasks = a.new_tasks.iter().map(|t| parse_task(t)).collect::<Result<_>>()?;
    }
    if config.extend.new_tasks.is_empty() {
        return Err(usage("no new tasks: pass --new-task or set [extend] new_tasks"));
    }
    let base = Checkpoint::load(resolve_checkpoint(&a.base)?)?;
    let mut plan = ExtensionPlan::new(&base.tasks, &config.extend.new_tasks)?;
    plan.lr_base = a.train.lr.unwrap_or(config.extend.lr);
    plan.lr_prompt_multiplier = config.extend.prompt_lr_multiplier;
    if !config.extend.mix.is_empty() {
        plan.mix = config.extend.mix.clone();
        plan.validate()?;
    }
    let (_, data) = load_pairs(&a.data)?;
    config.model = base.model.config.clone();
    config.echo(&a.out)?;
    let (grown, outcome) = extend(&base, &plan, &data, &config.train, Some(&a.out))?;
    if outcome.history.is_empty() {
        grown.save(a.out.join(RAW_DIR))?;
        let ema = EmaState::new(grown.model.params(), config.train.ema_beta)?;
        catair::checkpoint::save_tensors(a.out.join(EMA_DIR), &grown.model.config, &grown.tasks, &ema.shadow)?;
    }
    let plan_path = a.out.join("extension_plan.json");
    fs::write(&plan_path, serde_json::to_vec_pretty(&plan).context("serializing the plan")?)
        .with_context(|| format!("writing {}", plan_path.display()))?;
    summarize(&a.out, &outcome);
    Ok(())
}

/// A checkpoint directory, or a training output directory (its `ema/`, else `raw/`).
fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.join(CONFIG_FILE).exists() {
        return Ok(path.to_path_buf());
    }
    for sub in [EMA_DIR, RAW_DIR] {
        if path.join(sub).join(CONFIG_FILE).exists() {
            info!("using {}", path.join(sub).display());
            return Ok(path.join(sub));
        }
    }
    Err(Failure::Runtime(anyhow::anyhow!("{} is not a checkpoint directory", path.display())))
}

fn load_model(path: &Path) -> Result<CatAir> {
    Ok(Checkpoint::load(resolve_checkpoint(path)?)?.model)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if (0.0..=1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(usage(format!("--gamma must lie in [0, 1], got {gamma}")))
    }
}

fn eval(config: RunConfig, a: EvalArgs) -> Result<()> {
    let gamma = a.gamma.unwrap_or(config.eval.gamma);
    check_gamma(gamma)?;
    let model = load_model(&a.ckpt)?;
    let manifest = DatasetManifest::read(&a.data)?;
    let result = evaluate(&model, &manifest, gamma)?;
    println!("{}", serde_json::to_string_pretty(&result).context("serializing the result")?);
    Ok(())
}

fn flops(config: RunConfig, a: FlopsArgs) -> Result<()> {
    let mode: Mode = a.mode.parse().map_err(|e: catair::Error| usage(e.to_string()))?;
    let f = &config.flops;
    let (h, w) = (a.height.unwrap_or(f.height), a.width.unwrap_or(f.width));
    let gamma = a.gamma.unwrap_or(f.gamma);
    check_gamma(gamma)?;
    let model = a.ckpt.as_deref().map(load_model).transpose()?;
    let arch = model.as_ref().map_or(config.model.clone(), |m| m.config.clone());

    let Some(spec) = a.sweep else {
        let report = match mode {
            Mode::Formula => formula_report(&arch, h, w, gamma)?,
            Mode::Exact => count_exact(&arch, h, w, gamma, f.convention, f.schedule)?,
        };
        println!("{}", serde_json::to_string_pretty(&report).context("serializing the report")?);
        return Ok(());
    };
    let (param, range) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("--sweep expects PARAM=RANGE, got `{spec}`")))?;
    let param: SweepParam = param.trim().parse().map_err(|e: catair::Error| usage(e.to_string()))?;
    let values = parse_range(range).map_err(|e| usage(e.to_string()))?;
    let mut rows = sweep(&arch, h, w, gamma, param, &values)?;
    if let Some(data) = &a.data {
        if param != SweepParam::Gamma {
            return Err(usage("a PSNR column needs a gamma sweep; other parameters change the architecture"));
        }
        let model = model.as_ref().expect("clap requires --ckpt with --data");
        let manifest = DatasetManifest::read(data)?;
        for row in &mut rows {
            row.psnr = Some(evaluate(model, &manifest, row.value)?.overall.psnr_mean);
        }
    }
    print!("{}", sweep_csv(&rows));
    Ok(())
}

fn infer(config: RunConfig, a: InferArgs) -> Result<()> {
    let gamma = a.gamma.unwrap_or(config.eval.gamma);
    check_gamma(gamma)?;
    let model = load_model(&a.ckpt)?;
    let image = read_png(&a.input)?;
    let (restored, decisions) = model.restore(&image_to_tensor(&image, model.dtype())?, gamma)?;
    write_png(&tensor_to_image(&restored)?, &a.output)?;
    if let Some(dir) = &a.dump_masks {
        let paths = dump_masks(&model, &decisions, dir)?;
        info!("wrote {} masks to {}", paths.len(), dir.display());
    }
    Ok(())
}
