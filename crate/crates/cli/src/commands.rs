use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use depthattack_core::attacks::{self, AttackConfig, Method, Mode, TargetSpec};
use depthattack_core::data::dataset::{self, generate_dataset, load_split, read_index, Split};
use depthattack_core::data::netpbm::write_ppm;
use depthattack_core::data::{Sample, SceneConfig};
use depthattack_core::metrics::{self, select_targets, MetricReport, DEFAULT_TARGET_THRESHOLD};
use depthattack_core::models::{
    read_checkpoint, train_depth, train_seg, write_checkpoint, Arch, DepthModel, DepthNet, SegNet, TrainConfig,
    TrainReport,
};
use depthattack_core::universal::{
    apply_universal, train_universal, write_delta, BatchStart, DeltaInit, MultiTaskWeights, UniversalTrainConfig,
};
use depthattack_core::{parallel, Tensor};

use crate::config::{merge, to_pretty};
use crate::report::{write_rows, Row};
use crate::CliError;

pub const NET_MAGIC: &str = "DAVNET";
pub const SEG_TAG: &str = "seg";
pub const RUN_CONFIG: &str = "run_config.json";

fn required(p: Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    p.ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))
}

// ---------------------------------------------------------------- gen

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct GenArgs {
    /// Number of scenes.
    #[arg(long)]
    count: Option<usize>,
    /// Image side length in pixels.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of pixels with ground-truth depth.
    #[arg(long)]
    sparsity: Option<f64>,
    /// Fraction of scenes assigned to the validation split.
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
struct GenConfig {
    count: usize,
    size: usize,
    seed: u64,
    sparsity: f64,
    val_fraction: f64,
    out: Option<PathBuf>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            count: 100,
            size: 64,
            seed: 0,
            sparsity: 0.3,
            val_fraction: 0.2,
            out: None,
        }
    }
}

pub fn gen(file: Map<String, Value>, args: GenArgs) -> Result<(), CliError> {
    let cfg: GenConfig = merge(file, &args)?;
    let out = required(cfg.out.clone(), "out")?;
    if !(0.0..=1.0).contains(&cfg.val_fraction) {
        return Err(CliError::Usage("--val-fraction must lie in [0, 1]".into()));
    }
    let scene = SceneConfig {
        height: cfg.size,
        width: cfg.size,
        sparsity: cfg.sparsity,
        ..SceneConfig::default()
    };
    scene.validate()?;
    create_dir(&out)?;
    let entries = generate_dataset(&out, cfg.count, &scene, cfg.val_fraction, cfg.seed)?;
    write_file(&out.join(RUN_CONFIG), to_pretty(&cfg))?;
    info!("wrote {} scenes to {}", entries.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------- verify

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct VerifyArgs {
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
struct VerifyConfig {
    data: Option<PathBuf>,
}

pub fn verify(file: Map<String, Value>, args: VerifyArgs) -> Result<(), CliError> {
    let cfg: VerifyConfig = merge(file, &args)?;
    let root = required(cfg.data, "data")?;
    let entries = read_index(&root)?;
    let mut counts = [0usize; 2];
    for e in &entries {
        let s = dataset::read_sample(&root, e).map_err(|err| CliError::Data(format!("sample {}: {err}", e.id)))?;
        if s.instances.len() != e.instances {
            return Err(CliError::Data(format!("sample {}: index lists {} instances", e.id, e.instances)));
        }
        counts[(e.split == Split::Val) as usize] += 1;
    }
    println!("ok: {} samples ({} train, {} val)", entries.len(), counts[0], counts[1]);
    Ok(())
}

// ---------------------------------------------------------------- models

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Depth,
    Seg,
}

pub fn load_depth(path: &Path) -> Result<DepthNet, CliError> {
    let ck = read_checkpoint(path, NET_MAGIC).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let arch: Arch = ck
        .tag
        .parse()
        .map_err(|_| CliError::Data(format!("{} holds a `{}` model, not a depth net", path.display(), ck.tag)))?;
    let net = DepthNet { arch, params: ck.tensors };
    if net.param_count() != DepthNet::new(arch, 0).param_count() {
        return Err(CliError::Data(format!("{}: parameters do not match {arch}", path.display())));
    }
    Ok(net)
}

pub fn load_seg(path: &Path) -> Result<SegNet, CliError> {
    let ck = read_checkpoint(path, NET_MAGIC).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if ck.tag != SEG_TAG {
        return Err(CliError::Data(format!("{} holds a `{}` model, not a segmentation net", path.display(), ck.tag)));
    }
    let classes = ck
        .tensors
        .get("head.b")
        .map(Tensor::len)
        .ok_or_else(|| CliError::Data(format!("{}: missing head", path.display())))?;
    Ok(SegNet {
        classes,
        params: ck.tensors,
    })
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainArgs {
    #[arg(long)]
    arch: Option<Arch>,
    #[arg(long, value_enum)]
    task: Option<Task>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate; defaults depend on the task.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Global gradient-norm clip; defaults depend on the task.
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint path; the training report goes next to it as `.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
struct TrainRunConfig {
    arch: Arch,
    task: Task,
    epochs: usize,
    lr: Option<f64>,
    batch_size: usize,
    momentum: f64,
    clip_norm: Option<f64>,
    seed: u64,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        let d = TrainConfig::depth_default();
        TrainRunConfig {
            arch: Arch::A,
            task: Task::Depth,
            epochs: d.epochs,
            lr: None,
            batch_size: d.batch_size,
            momentum: d.momentum,
            clip_norm: None,
            seed: 0,
            data: None,
            out: None,
        }
    }
}

#[derive(Serialize)]
#[serde(rename_all = "kebab-case")]
struct TrainOutput<'a> {
    config: &'a TrainRunConfig,
    model: String,
    param_count: usize,
    report: &'a TrainReport,
}

pub fn train(file: Map<String, Value>, args: TrainArgs) -> Result<(), CliError> {
    let mut cfg: TrainRunConfig = merge(file, &args)?;
    let root = required(cfg.data.clone(), "data")?;
    let out = required(cfg.out.clone(), "out")?;
    let base = match cfg.task {
        Task::Depth => TrainConfig::depth_default(),
        Task::Seg => TrainConfig::seg_default(),
    };
    cfg.lr = Some(cfg.lr.unwrap_or(base.learning_rate));
    cfg.clip_norm = Some(cfg.clip_norm.unwrap_or(base.clip_norm));
    let tc = TrainConfig {
        epochs: cfg.epochs,
        learning_rate: cfg.lr.expect("resolved"),
        batch_size: cfg.batch_size,
        momentum: cfg.momentum,
        clip_norm: cfg.clip_norm.expect("resolved"),
        seed: cfg.seed,
    };
    let strip = |v: Vec<(String, Sample)>| v.into_iter().map(|(_, s)| s).collect::<Vec<_>>();
    let train_set = strip(load_split(&root, Split::Train)?);
    let val_set = strip(load_split(&root, Split::Val)?);
    info!("training {:?} on {} scenes ({} held out)", cfg.task, train_set.len(), val_set.len());
    let (tag, params, report) = match cfg.task {
        Task::Depth => {
            let mut net = DepthNet::new(cfg.arch, cfg.seed);
            let report = train_depth(&mut net, &train_set, &val_set, &tc)?;
            (cfg.arch.to_string(), net.params, report)
        }
        Task::Seg => {
            let mut net = SegNet::new(depthattack_core::data::NUM_CLASSES, cfg.seed);
            let report = train_seg(&mut net, &train_set, &val_set, &tc)?;
            (SEG_TAG.to_owned(), net.params, report)
        }
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_checkpoint(&out, NET_MAGIC, &tag, &params)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", out.display())))?;
    let summary = TrainOutput {
        config: &cfg,
        model: tag,
        param_count: params.values().map(Tensor::len).sum(),
        report: &report,
    };
    write_file(&out.with_extension("json"), to_pretty(&summary))?;
    match &report.held_out {
        Some(m) => info!("held-out {m:?}"),
        None => warn!("no validation split; held-out metric not computed"),
    }
    Ok(())
}

// ---------------------------------------------------------------- attack

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct AttackArgs {
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    mode: Option<Mode>,
    /// L∞ budget in pixel units; 0 leaves images untouched.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Iteration count; defaults to the rule ceil(min(ε+4, 1.25ε)).
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Target depths in metres for targeted mode, comma separated.
    #[arg(long, value_delimiter = ',')]
    target_depth: Option<Vec<f64>>,
    /// Attack only this instance index of each image (targeted mode).
    #[arg(long)]
    instance: Option<usize>,
    /// Instances are eligible when their mean ground-truth depth is below this.
    #[arg(long)]
    select_below: Option<f64>,
    /// Checkpoint the attack is crafted on.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Further checkpoints to evaluate the crafted images on (repeatable).
    #[arg(long)]
    eval_model: Option<Vec<PathBuf>>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<Split>,
    /// Attack at most this many images.
    #[arg(long)]
    limit: Option<usize>,
    /// Write adversarial images as P6.
    #[arg(long)]
    save_images: Option<bool>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
struct AttackRunConfig {
    method: Method,
    mode: Mode,
    epsilon: f64,
    alpha: f64,
    iterations: Option<usize>,
    momentum: f64,
    target_depth: Vec<f64>,
    instance: Option<usize>,
    select_below: f64,
    model: Option<PathBuf>,
    eval_model: Vec<PathBuf>,
    data: Option<PathBuf>,
    split: Split,
    limit: Option<usize>,
    save_images: bool,
    out: Option<PathBuf>,
}

impl Default for AttackRunConfig {
    fn default() -> Self {
        let a = AttackConfig::default();
        AttackRunConfig {
            method: Method::Ifgsm,
            mode: a.mode,
            epsilon: a.epsilon,
            alpha: a.alpha,
            iterations: None,
            momentum: a.momentum,
            target_depth: vec![a.target_depth],
            instance: None,
            select_below: DEFAULT_TARGET_THRESHOLD,
            model: None,
            eval_model: Vec::new(),
            data: None,
            split: Split::Val,
            limit: None,
            save_images: true,
            out: None,
        }
    }
}

/// One crafted image before its rows are written.
struct Crafted {
    name: String,
    target_depth: Option<f64>,
    x_adv: Tensor,
    rows: Vec<Row>,
}

#[derive(Serialize)]
#[serde(rename_all = "kebab-case")]
struct AttackSummary {
    images: usize,
    attacks: usize,
    /// Largest |round(x_adv) − x_adv| over all saved pixels.
    max_quantization_gap: f64,
    /// Largest L∞ distance between a rounded adversarial image and its clean image.
    max_saved_linf: f64,
}

pub fn attack(file: Map<String, Value>, args: AttackArgs) -> Result<(), CliError> {
    let cfg: AttackRunConfig = merge(file, &args)?;
    let root = required(cfg.data.clone(), "data")?;
    let out = required(cfg.out.clone(), "out")?;
    let model_path = required(cfg.model.clone(), "model")?;
    if !(cfg.epsilon >= 0.0 && cfg.epsilon.is_finite()) {
        return Err(CliError::Usage("--epsilon must be non-negative".into()));
    }
    let acfg = AttackConfig {
        epsilon: cfg.epsilon,
        alpha: cfg.alpha,
        iterations: cfg.iterations,
        momentum: cfg.momentum,
        mode: cfg.mode,
        target_depth: cfg.target_depth.first().copied().unwrap_or(100.0),
    };
    if cfg.epsilon > 0.0 {
        acfg.validate()?;
    }
    if cfg.mode == Mode::Targeted && cfg.target_depth.is_empty() {
        return Err(CliError::Usage("targeted mode needs at least one --target-depth".into()));
    }
    for &c in &cfg.target_depth {
        if !(c > 0.0 && c.is_finite()) {
            return Err(CliError::Usage(format!("target depth {c} must be positive")));
        }
    }

    let craft = load_depth(&model_path)?;
    let craft_name = model_label(&model_path);
    let evals: Vec<(String, DepthNet)> = cfg
        .eval_model
        .iter()
        .filter(|p| **p != model_path)
        .map(|p| Ok((model_label(p), load_depth(p)?)))
        .collect::<Result<_, CliError>>()?;
    let mut samples = load_split(&root, cfg.split)?;
    if let Some(n) = cfg.limit {
        samples.truncate(n);
    }
    info!(
        "{} {} attack on {} images, crafted on {craft_name}, epsilon {}",
        cfg.mode,
        cfg.method,
        samples.len(),
        cfg.epsilon
    );

    let per_image = parallel::try_map(&samples, |(id, s)| {
        craft_image(id, s, &craft, &craft_name, &evals, &cfg, &acfg)
    })?;

    create_dir(&out)?;
    write_file(&out.join(RUN_CONFIG), to_pretty(&cfg))?;
    let mut rows = Vec::new();
    let mut summary = AttackSummary {
        images: samples.len(),
        attacks: 0,
        max_quantization_gap: 0.0,
        max_saved_linf: 0.0,
    };
    let adv_dir = out.join("adv");
    if cfg.save_images {
        create_dir(&adv_dir)?;
    }
    for ((_, s), crafted) in samples.iter().zip(per_image) {
        for c in crafted {
            summary.attacks += 1;
            if cfg.save_images {
                let rounded = c.x_adv.map(f64::round);
                let gap = rounded.linf_distance(&c.x_adv)?;
                summary.max_quantization_gap = summary.max_quantization_gap.max(gap);
                summary.max_saved_linf = summary.max_saved_linf.max(rounded.linf_distance(&s.rgb)?);
                let file = match c.target_depth {
                    Some(d) => format!("{}_c{d}.ppm", c.name.replace('/', "_")),
                    None => format!("{}.ppm", c.name),
                };
                write_ppm(&adv_dir.join(file), &rounded)?;
            }
            rows.extend(c.rows);
        }
    }
    write_rows(&out.join("results.csv"), &rows)?;
    write_file(&out.join("summary.json"), to_pretty(&summary))?;
    info!("wrote {} rows to {}", rows.len(), out.join("results.csv").display());
    Ok(())
}

fn model_label(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn craft_image(
    id: &str,
    s: &Sample,
    craft: &DepthNet,
    craft_name: &str,
    evals: &[(String, DepthNet)],
    cfg: &AttackRunConfig,
    acfg: &AttackConfig,
) -> depthattack_core::Result<Vec<Crafted>> {
    let gt = s.ground_truth();
    let mut jobs: Vec<(String, Option<TargetSpec>)> = Vec::new();
    match cfg.mode {
        Mode::NonTargeted => jobs.push((id.to_owned(), None)),
        Mode::Targeted => {
            let masks: Vec<&Tensor> = s.instances.iter().map(|i| &i.mask).collect();
            let eligible = select_targets(&masks, &gt, cfg.select_below);
            let chosen: Vec<usize> = match cfg.instance {
                Some(k) => eligible.into_iter().filter(|&i| i == k).collect(),
                None => eligible,
            };
            for k in chosen {
                for &c in &cfg.target_depth {
                    jobs.push((format!("{id}/inst{k}"), Some(TargetSpec::new(s.instances[k].mask.clone(), c)?)));
                }
            }
        }
    }
    let mut out = Vec::with_capacity(jobs.len());
    for (name, spec) in jobs {
        let target_depth = spec.as_ref().map(|t| t.depth);
        let mask = spec.as_ref().map(|t| &t.mask);
        let (x_adv, white) = if cfg.epsilon == 0.0 {
            let clean = craft.predict(&s.rgb)?;
            (s.rgb.clone(), attacks::compare(&clean, &clean, &gt, mask)?)
        } else {
            let run = AttackConfig {
                target_depth: target_depth.unwrap_or(acfg.target_depth),
                ..acfg.clone()
            };
            let r = attacks::attack(craft, &s.rgb, &gt, cfg.method, &run, spec.as_ref())?;
            (r.x_adv, r.metrics)
        };
        let mut rows = vec![row(&name, cfg, target_depth, craft_name, craft_name, &white)];
        for (label, net) in evals {
            let m = attacks::evaluate_transfer(net, &s.rgb, &x_adv, &gt, mask)?;
            rows.push(row(&name, cfg, target_depth, craft_name, label, &m));
        }
        out.push(Crafted {
            name,
            target_depth,
            x_adv,
            rows,
        });
    }
    Ok(out)
}

fn row(name: &str, cfg: &AttackRunConfig, target: Option<f64>, craft: &str, eval: &str, m: &MetricReport) -> Row {
    Row {
        image_id: name.to_owned(),
        method: cfg.method.to_string(),
        mode: cfg.mode.to_string(),
        clean_rmse: m.clean_rmse,
        adv_rmse: m.adv_rmse,
        rmse_ratio: m.rmse_ratio,
        clean_mmd: m.clean_mmd,
        adv_mmd: m.adv_mmd,
        mmd_ratio: m.mmd_ratio,
        target_depth: target,
        craft_model: craft.to_owned(),
        eval_model: eval.to_owned(),
    }
}

// ---------------------------------------------------------------- universal

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct UniversalArgs {
    /// Task weights `w_depth,w_semantic`; repeat to train several perturbations.
    #[arg(long)]
    weights: Option<Vec<String>>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Inner iterations per minibatch; defaults to the per-image rule.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Start each minibatch from `perturbed` (x + δ) or `clean` images.
    #[arg(long)]
    batch_start: Option<BatchStart>,
    /// Initial δ: `uniform` or `zero`.
    #[arg(long)]
    init: Option<DeltaInit>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    depth_model: Option<PathBuf>,
    /// Required when any weight pair has a positive semantic weight.
    #[arg(long)]
    seg_model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use at most this many training images.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Evaluate on at most this many validation images.
    #[arg(long)]
    eval_limit: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
struct UniversalRunConfig {
    weights: Vec<String>,
    gamma: f64,
    epochs: usize,
    epsilon: f64,
    alpha: f64,
    iterations: Option<usize>,
    momentum: f64,
    batch_size: usize,
    batch_start: BatchStart,
    init: DeltaInit,
    seed: u64,
    depth_model: Option<PathBuf>,
    seg_model: Option<PathBuf>,
    data: Option<PathBuf>,
    train_limit: Option<usize>,
    eval_limit: Option<usize>,
    out: Option<PathBuf>,
}

impl Default for UniversalRunConfig {
    fn default() -> Self {
        let u = UniversalTrainConfig::default();
        UniversalRunConfig {
            weights: vec!["1,0".into(), "0.5,0.5".into()],
            gamma: u.gamma,
            epochs: u.epochs,
            epsilon: u.epsilon,
            alpha: u.alpha,
            iterations: u.inner_iterations,
            momentum: u.momentum,
            batch_size: u.batch_size,
            batch_start: u.batch_start,
            init: u.init,
            seed: u.seed,
            depth_model: None,
            seg_model: None,
            data: None,
            train_limit: None,
            eval_limit: None,
            out: None,
        }
    }
}

fn parse_weights(s: &str) -> Result<MultiTaskWeights, CliError> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || CliError::Usage(format!("weights `{s}` must look like `0.5,0.5`"));
    if parts.len() != 2 {
        return Err(bad());
    }
    let wd: f64 = parts[0].parse().map_err(|_| bad())?;
    let ws: f64 = parts[1].parse().map_err(|_| bad())?;
    Ok(MultiTaskWeights::new(wd, ws)?)
}

#[derive(Serialize)]
#[serde(rename_all = "kebab-case")]
struct ComparisonRow {
    w_depth: f64,
    w_semantic: f64,
    images: usize,
    clean_rmse: f64,
    adv_rmse: f64,
    rmse_ratio: Option<f64>,
    images_worse: usize,
    delta_file: String,
}

pub fn universal(file: Map<String, Value>, args: UniversalArgs) -> Result<(), CliError> {
    let cfg: UniversalRunConfig = merge(file, &args)?;
    let root = required(cfg.data.clone(), "data")?;
    let out = required(cfg.out.clone(), "out")?;
    let depth_path = required(cfg.depth_model.clone(), "depth-model")?;
    if cfg.weights.is_empty() {
        return Err(CliError::Usage("at least one --weights pair is required".into()));
    }
    let weights: Vec<MultiTaskWeights> = cfg.weights.iter().map(|w| parse_weights(w)).collect::<Result<_, _>>()?;
    let ucfg = UniversalTrainConfig {
        epsilon: cfg.epsilon,
        gamma: cfg.gamma,
        momentum: cfg.momentum,
        epochs: cfg.epochs,
        inner_iterations: cfg.iterations,
        alpha: cfg.alpha,
        batch_size: cfg.batch_size,
        batch_start: cfg.batch_start,
        init: cfg.init,
        seed: cfg.seed,
    };
    ucfg.validate()?;

    let depth = load_depth(&depth_path)?;
    let seg = if weights.iter().any(MultiTaskWeights::uses_semantic) {
        let p = cfg
            .seg_model
            .clone()
            .ok_or_else(|| CliError::Usage("--seg-model is required when w_semantic > 0".into()))?;
        info!("loading segmentation model {}", p.display());
        Some(load_seg(&p)?)
    } else {
        info!("all semantic weights are zero; segmentation model not loaded");
        None
    };
    let mut train_set: Vec<Sample> = load_split(&root, Split::Train)?.into_iter().map(|(_, s)| s).collect();
    if let Some(n) = cfg.train_limit {
        train_set.truncate(n);
    }
    let mut eval_set = load_split(&root, Split::Val)?;
    if let Some(n) = cfg.eval_limit {
        eval_set.truncate(n);
    }
    if eval_set.is_empty() {
        return Err(CliError::Data("the validation split is empty".into()));
    }
    let depth_name = model_label(&depth_path);

    create_dir(&out)?;
    write_file(&out.join(RUN_CONFIG), to_pretty(&cfg))?;
    let clean: Vec<f64> = parallel::try_map(&eval_set, |(_, s)| metrics::rmse(&depth.predict(&s.rgb)?, &s.ground_truth()))?;
    let mut comparison = Vec::new();
    let mut rows = Vec::new();
    for w in &weights {
        info!("training universal perturbation with weights ({}, {})", w.w_depth, w.w_semantic);
        let p = train_universal(&depth, seg.as_ref().filter(|_| w.uses_semantic()), &train_set, &ucfg, w)?;
        let delta_file = format!("delta-{}-{}.bin", w.w_depth, w.w_semantic);
        write_delta(&out.join(&delta_file), &p)?;
        let adv: Vec<f64> = parallel::try_map(&eval_set, |(_, s)| {
            metrics::rmse(&depth.predict(&apply_universal(&s.rgb, &p)?)?, &s.ground_truth())
        })?;
        let mode = format!("w={}/{}", w.w_depth, w.w_semantic);
        for (((id, _), &c), &a) in eval_set.iter().zip(&clean).zip(&adv) {
            let m = metrics::ratio_report(c, a, None);
            rows.push(Row {
                image_id: id.clone(),
                method: "universal".into(),
                mode: mode.clone(),
                clean_rmse: m.clean_rmse,
                adv_rmse: m.adv_rmse,
                rmse_ratio: m.rmse_ratio,
                clean_mmd: None,
                adv_mmd: None,
                mmd_ratio: None,
                target_depth: None,
                craft_model: depth_name.clone(),
                eval_model: depth_name.clone(),
            });
        }
        let n = eval_set.len() as f64;
        let (mc, ma) = (clean.iter().sum::<f64>() / n, adv.iter().sum::<f64>() / n);
        comparison.push(ComparisonRow {
            w_depth: w.w_depth,
            w_semantic: w.w_semantic,
            images: eval_set.len(),
            clean_rmse: mc,
            adv_rmse: ma,
            rmse_ratio: metrics::ratio(mc, ma),
            images_worse: clean.iter().zip(&adv).filter(|(c, a)| a > c).count(),
            delta_file,
        });
        info!("weights ({}, {}): ratio {}", w.w_depth, w.w_semantic, metrics::format_ratio(metrics::ratio(mc, ma)));
    }
    write_rows(&out.join("universal.csv"), &rows)?;
    let mut wtr = csv::Writer::from_path(out.join("comparison.csv"))?;
    for c in &comparison {
        wtr.serialize(c)?;
    }
    wtr.flush()?;
    Ok(())
}
