//! Command-line front-end: configuration resolution, run manifests and the
//! subcommands.
//!
//! Configuration is resolved as `defaults ← config file ← flags`. The config
//! file is flat TOML (no tables); every key is listed by [`CONFIG_SPEC`].

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::synth::natural_image;
use crate::imaging::{degradation, load_png, save_png, Dataset, DatasetSpec, NamedImage};
use crate::metrics::{assert_canonical_degradation, evaluate, lr_psnr, EvalOptions};
use crate::numerics::Real;
use crate::oracle;
use crate::trainer::{fine_tune, train, Phase, TrainConfig, TrainLog, TrainOutputs, TrainState};
use crate::vspm::checkpoint::Checkpoint;
use crate::vspm::{super_resolve_counters, DeterministicPath, SampleOptions, VSpMConfig, VSpMModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Int,
    Float,
    Bool,
    Str,
}

/// Every accepted configuration key and its type.
pub const CONFIG_SPEC: &[(&str, &str)] = &[
    ("preset", "str"),
    ("seed", "int"),
    ("threads", "int"),
    ("n_samples", "int"),
    ("f64", "bool"),
    ("scale", "int"),
    ("num_basis", "int"),
    ("blocks", "int"),
    ("width", "int"),
    ("coeff_depth", "int"),
    ("stochastic_z", "bool"),
    ("stochastic_omega", "bool"),
    ("deterministic_path", "str"),
    ("cem_iters", "int"),
    ("sigma_floor", "float"),
    ("epochs", "int"),
    ("lr", "float"),
    ("lr_decay_every", "int"),
    ("lr_decay_factor", "float"),
    ("batch_size", "int"),
    ("lr_patch", "int"),
    ("crops_per_image", "int"),
    ("augment", "bool"),
    ("alpha", "float"),
    ("beta", "float"),
    ("lambda_omega", "float"),
    ("lambda_adv", "float"),
    ("lambda_per", "float"),
    ("stop_grad_mu_rho", "bool"),
    ("grad_clip", "float"),
    ("checkpoint_every", "int"),
    ("finetune_epochs", "int"),
    ("finetune_beta", "float"),
    ("finetune_lambda_adv", "float"),
];

fn kind_of(key: &str) -> Option<Kind> {
    CONFIG_SPEC.iter().find(|(k, _)| *k == key).map(|(_, t)| match *t {
        "int" => Kind::Int,
        "float" => Kind::Float,
        "bool" => Kind::Bool,
        _ => Kind::Str,
    })
}

/// Fully resolved settings of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub threads: usize,
    pub n_samples: usize,
    pub f64: bool,
    pub model: VSpMConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    fn preset(name: &str) -> Result<Self> {
        let (model, train) = match name {
            "full" => (VSpMConfig::default(), TrainConfig::default()),
            "desk" => (VSpMConfig::desk_scale(), TrainConfig::desk_scale()),
            _ => return Err(Error::Config(format!("preset must be full or desk, got {name:?}"))),
        };
        Ok(Self {
            preset: name.to_string(),
            seed: 0,
            threads: 1,
            n_samples: 10,
            f64: false,
            model,
            train,
        })
    }

    /// Merges `file` values and then `flags` over the defaults of the chosen
    /// preset. All problems are reported together.
    pub fn resolve(file: &BTreeMap<String, String>, flags: &BTreeMap<String, String>) -> Result<Self> {
        let mut merged = file.clone();
        merged.extend(flags.iter().map(|(k, v)| (k.clone(), v.clone())));
        let preset = merged.get("preset").cloned().unwrap_or_else(|| "full".to_string());
        let mut cfg = Self::preset(&preset)?;
        let scale_given = merged.contains_key("scale");
        let patch_given = merged.contains_key("lr_patch");
        let mut errs = Vec::new();
        for (k, v) in &merged {
            if let Err(e) = cfg.set(k, v) {
                errs.push(e);
            }
        }
        if scale_given && !patch_given && preset == "full" {
            cfg.train.lr_patch = TrainConfig::default_lr_patch(cfg.model.scale);
        }
        cfg.train.seed = cfg.seed;
        if let Err(Error::Config(e)) = cfg.model.validate() {
            errs.push(e);
        }
        if let Err(Error::Config(e)) = cfg.train.validate() {
            errs.push(e);
        }
        if cfg.n_samples == 0 {
            errs.push("n_samples must be at least 1".into());
        }
        if cfg.threads == 0 {
            errs.push("threads must be at least 1".into());
        }
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "preset" => self.preset = v.to_string(),
            "seed" => self.seed = p(key, v)?,
            "threads" => self.threads = p(key, v)?,
            "n_samples" => self.n_samples = p(key, v)?,
            "f64" => self.f64 = p(key, v)?,
            "scale" => m.scale = p(key, v)?,
            "num_basis" => m.num_basis = p(key, v)?,
            "blocks" => m.blocks = p(key, v)?,
            "width" => m.width = p(key, v)?,
            "coeff_depth" => m.coeff_depth = p(key, v)?,
            "stochastic_z" => m.stochastic_z = p(key, v)?,
            "stochastic_omega" => m.stochastic_omega = p(key, v)?,
            "deterministic_path" => m.deterministic_path = DeterministicPath::parse(v).map_err(|e| e.to_string())?,
            "cem_iters" => m.cem_iters = p(key, v)?,
            "sigma_floor" => m.sigma_floor = p(key, v)?,
            "epochs" => t.epochs = p(key, v)?,
            "lr" => t.lr = p(key, v)?,
            "lr_decay_every" => t.lr_decay_every = p(key, v)?,
            "lr_decay_factor" => t.lr_decay_factor = p(key, v)?,
            "batch_size" => t.batch_size = p(key, v)?,
            "lr_patch" => t.lr_patch = p(key, v)?,
            "crops_per_image" => t.crops_per_image = p(key, v)?,
            "augment" => t.augment = p(key, v)?,
            "alpha" => t.prior.alpha = p(key, v)?,
            "beta" => t.prior.beta = p(key, v)?,
            "lambda_omega" => t.weights.lambda_omega = p(key, v)?,
            "lambda_adv" => t.weights.lambda_adv = p(key, v)?,
            "lambda_per" => t.weights.lambda_per = p(key, v)?,
            "stop_grad_mu_rho" => t.stop_grad_mu_rho = p(key, v)?,
            "grad_clip" => t.grad_clip = p(key, v)?,
            "checkpoint_every" => t.checkpoint_every = p(key, v)?,
            "finetune_epochs" => t.finetune.epochs = p(key, v)?,
            "finetune_beta" => t.finetune.beta = p(key, v)?,
            "finetune_lambda_adv" => t.finetune.lambda_adv = p(key, v)?,
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// Canonical `key → value` form; feeding it back through
    /// [`RunConfig::resolve`] reproduces `self`.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let (m, t) = (&self.model, &self.train);
        let f = |x: f64| format!("{x:?}");
        let mut kv: BTreeMap<String, String> = [
            ("preset", self.preset.clone()),
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("n_samples", self.n_samples.to_string()),
            ("f64", self.f64.to_string()),
            ("epochs", t.epochs.to_string()),
            ("lr", f(t.lr)),
            ("lr_decay_every", t.lr_decay_every.to_string()),
            ("lr_decay_factor", f(t.lr_decay_factor)),
            ("batch_size", t.batch_size.to_string()),
            ("lr_patch", t.lr_patch.to_string()),
            ("crops_per_image", t.crops_per_image.to_string()),
            ("augment", t.augment.to_string()),
            ("alpha", f(t.prior.alpha)),
            ("beta", f(t.prior.beta)),
            ("lambda_omega", f(t.weights.lambda_omega)),
            ("lambda_adv", f(t.weights.lambda_adv)),
            ("lambda_per", f(t.weights.lambda_per)),
            ("stop_grad_mu_rho", t.stop_grad_mu_rho.to_string()),
            ("grad_clip", f(t.grad_clip)),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("finetune_epochs", t.finetune.epochs.to_string()),
            ("finetune_beta", f(t.finetune.beta)),
            ("finetune_lambda_adv", f(t.finetune.lambda_adv)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        kv.extend(m.to_kv());
        kv
    }
}

/// Reads a flat TOML file into strings after checking each value's type.
pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    let mut errs = Vec::new();
    for (k, v) in table {
        let Some(kind) = kind_of(&k) else {
            errs.push(format!("unknown config key {k:?}"));
            continue;
        };
        let s = match (kind, &v) {
            (Kind::Int, toml::Value::Integer(i)) if *i >= 0 => i.to_string(),
            (Kind::Float, toml::Value::Float(x)) => format!("{x:?}"),
            (Kind::Float, toml::Value::Integer(i)) => format!("{:?}", *i as f64),
            (Kind::Bool, toml::Value::Boolean(b)) => b.to_string(),
            (Kind::Str, toml::Value::String(s)) => s.clone(),
            (_, toml::Value::Table(_)) => {
                errs.push(format!("{k}: nested tables are not allowed"));
                continue;
            }
            _ => {
                errs.push(format!("{k}: expected {kind:?}, found {}", v.type_str()));
                continue;
            }
        };
        out.insert(k, s);
    }
    if errs.is_empty() {
        Ok(out)
    } else {
        Err(Error::Config(format!("{}: {}", path.display(), errs.join("; "))))
    }
}

#[derive(Debug, Parser)]
#[command(name = "vspsr", version, about = "Explorable super-resolution with variational sparse coefficients")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Default, Args)]
pub struct Common {
    /// Flat TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Run inference in 64-bit precision.
    #[arg(long = "f64", global = true)]
    pub f64: bool,
    /// Extra `key=value` settings; same keys as the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from scratch or resume a baseline run.
    Train(TrainArgs),
    /// Continue a trained checkpoint with the fine-tune settings.
    Finetune(FinetuneArgs),
    /// Draw SR samples for one LR image.
    Sample(SampleArgs),
    /// Score a checkpoint on a folder of HR images.
    Eval(EvalArgs),
    /// Run the reference-implementation checks.
    Selfcheck,
    /// Write synthetic HR training images.
    Synth(SynthArgs),
    /// Repeat a run from its manifest and compare output digests.
    Rerun(RerunArgs),
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    /// Folder of HR PNG images.
    #[arg(long)]
    pub data: PathBuf,
    /// Continue from a baseline checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Run the fine-tune phase after the baseline.
    #[arg(long)]
    pub with_finetune: bool,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long)]
    pub lr_patch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Clone, Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub lr_patch: Option<usize>,
}

#[derive(Clone, Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// LR input image.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub cem_iters: Option<usize>,
}

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Folder of HR PNG images.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub cem_iters: Option<usize>,
    /// Also write per-sample distance maps.
    #[arg(long)]
    pub maps: bool,
}

#[derive(Clone, Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 96)]
    pub size: usize,
}

#[derive(Clone, Debug, Args)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

/// Record of one run, written when it finishes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub threads: usize,
    pub precision: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub config: BTreeMap<String, String>,
    /// Named inputs (paths) of the command.
    pub inputs: BTreeMap<String, String>,
    pub input_digests: BTreeMap<String, String>,
    /// SHA-256 of every deterministic output, keyed by path relative to
    /// the output directory.
    pub outputs: BTreeMap<String, String>,
    /// Logs with wall-clock content; listed but not expected to repeat.
    pub logs: Vec<String>,
    #[serde(default)]
    pub results: BTreeMap<String, serde_json::Value>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Exclusive claim on an output directory, released on drop.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Data(format!(
                "{} is locked by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn load_images(dir: &Path) -> Result<Vec<NamedImage>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no PNG images in {}", dir.display())));
    }
    files
        .iter()
        .map(|p| {
            Ok(NamedImage {
                id: p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                image: load_png(p)?,
            })
        })
        .collect()
}

/// Everything a command needs besides its own arguments.
struct Context {
    cfg: RunConfig,
    out: PathBuf,
    manifest: RunManifest,
}

impl Context {
    fn new(command: &str, cfg: RunConfig, out: PathBuf) -> Self {
        let manifest = RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            threads: cfg.threads,
            precision: if cfg.f64 { "f64" } else { "f32" }.to_string(),
            started_unix: now(),
            finished_unix: 0.0,
            config: cfg.to_kv(),
            inputs: BTreeMap::new(),
            input_digests: BTreeMap::new(),
            outputs: BTreeMap::new(),
            logs: Vec::new(),
            results: BTreeMap::new(),
        };
        Self { cfg, out, manifest }
    }

    fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let abs = std::fs::canonicalize(path).map_err(|e| Error::io(path, e))?;
        self.manifest.inputs.insert(role.to_string(), abs.display().to_string());
        if abs.is_file() {
            self.manifest.input_digests.insert(role.to_string(), sha256_file(&abs)?);
        } else if abs.is_dir() {
            let mut h = Sha256::new();
            let mut files: Vec<PathBuf> = std::fs::read_dir(&abs)
                .map_err(|e| Error::io(&abs, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            for f in files {
                h.update(f.file_name().unwrap_or_default().to_string_lossy().as_bytes());
                h.update(sha256_file(&f)?.as_bytes());
            }
            self.manifest.input_digests.insert(role.to_string(), hex::encode(h.finalize()));
        }
        Ok(())
    }

    fn output(&mut self, rel: &str) -> Result<()> {
        let d = sha256_file(&self.out.join(rel))?;
        self.manifest.outputs.insert(rel.to_string(), d);
        Ok(())
    }

    fn finish(mut self) -> Result<RunManifest> {
        self.manifest.finished_unix = now();
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes") + "\n";
        crate::vspm::checkpoint::write_atomic(&self.out.join("manifest.json"), text.as_bytes())?;
        Ok(self.manifest)
    }
}

fn dataset_for(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    Dataset::load(DatasetSpec {
        dir: dir.to_path_buf(),
        scale: cfg.model.scale,
        lr_patch: cfg.train.lr_patch,
        augment: cfg.train.augment,
        seed: cfg.seed,
    })
}

fn rel_checkpoints(out: &Path) -> Result<Vec<String>> {
    let dir = out.join("checkpoints");
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut names: Vec<String> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| format!("checkpoints/{}", e.file_name().to_string_lossy()))
        .filter(|n| n.ends_with(".ckpt"))
        .collect();
    names.sort();
    Ok(names)
}

fn finish_training(mut ctx: Context, state: &TrainState) -> Result<RunManifest> {
    state.to_checkpoint().save(ctx.out.join("model.ckpt"))?;
    ctx.output("model.ckpt")?;
    for rel in rel_checkpoints(&ctx.out)? {
        ctx.output(&rel)?;
    }
    ctx.manifest.logs.push("train_log.jsonl".into());
    let r = &mut ctx.manifest.results;
    r.insert("phase".into(), state.phase.as_str().into());
    r.insert("epoch".into(), state.epoch.into());
    r.insert("global_step".into(), state.global_step.into());
    r.insert("prior_alpha".into(), state.prior.alpha.into());
    r.insert("prior_beta".into(), state.prior.beta.into());
    r.insert("lambda_adv".into(), state.weights.lambda_adv.into());
    ctx.finish()
}

fn cmd_train(cfg: RunConfig, out: PathBuf, args: &TrainArgs) -> Result<RunManifest> {
    if cfg.f64 {
        return Err(Error::Config("training runs in 32-bit precision; --f64 applies to sample and eval".into()));
    }
    let _lock = DirLock::acquire(&out)?;
    let mut ctx = Context::new("train", cfg, out);
    ctx.input("data", &args.data)?;
    let cfg = ctx.cfg.clone();
    let dataset = dataset_for(&cfg, &args.data)?;
    let mut state = match &args.resume {
        Some(path) => {
            ctx.input("resume", path)?;
            let ck = Checkpoint::load_expecting(path, &cfg.model)?;
            let st = TrainState::from_checkpoint(&ck)?;
            if st.phase != Phase::Baseline {
                return Err(Error::Config("--resume expects a baseline checkpoint; use finetune".into()));
            }
            st
        }
        None => TrainState::new(VSpMModel::init(cfg.model.clone(), cfg.train.prior.scale(), cfg.seed)?, &cfg.train),
    };
    let mut log = TrainLog::append_to(ctx.out.join("train_log.jsonl"))?;
    let outputs = TrainOutputs::in_dir(&ctx.out);
    train(&mut state, &dataset, &cfg.train, &mut log, &outputs)?;
    if args.with_finetune {
        fine_tune(&mut state, &dataset, &cfg.train, &mut log, &outputs)?;
    }
    finish_training(ctx, &state)
}

fn cmd_finetune(cfg: RunConfig, out: PathBuf, args: &FinetuneArgs) -> Result<RunManifest> {
    if cfg.f64 {
        return Err(Error::Config("training runs in 32-bit precision; --f64 applies to sample and eval".into()));
    }
    let _lock = DirLock::acquire(&out)?;
    let mut ctx = Context::new("finetune", cfg, out);
    ctx.input("checkpoint", &args.checkpoint)?;
    ctx.input("data", &args.data)?;
    let ck = Checkpoint::load_expecting(&args.checkpoint, &ctx.cfg.model)?;
    let mut state = TrainState::from_checkpoint(&ck)?;
    let cfg = ctx.cfg.clone();
    let dataset = dataset_for(&cfg, &args.data)?;
    let mut log = TrainLog::append_to(ctx.out.join("train_log.jsonl"))?;
    fine_tune(&mut state, &dataset, &cfg.train, &mut log, &TrainOutputs::in_dir(&ctx.out))?;
    finish_training(ctx, &state)
}

fn load_model(path: &Path) -> Result<VSpMModel<f32>> {
    Checkpoint::load(path)?.model()
}

/// Inference-only settings may differ from those stored with the weights.
fn with_inference_overrides(mut model_cfg: VSpMConfig, cfg: &RunConfig, flags: &BTreeMap<String, String>) -> VSpMConfig {
    if flags.contains_key("deterministic_path") {
        model_cfg.deterministic_path = cfg.model.deterministic_path.clone();
    }
    if flags.contains_key("cem_iters") {
        model_cfg.cem_iters = cfg.model.cem_iters;
    }
    model_cfg
}

fn rebuild(model: VSpMModel<f32>, cfg: VSpMConfig) -> Result<VSpMModel<f32>> {
    VSpMModel::from_params(cfg, model.params().to_vec())
}

fn sample_with<T: Real>(model: &VSpMModel<T>, y: &crate::imaging::Image, n: usize, seed: u64, threads: usize) -> Result<crate::vspm::SRSampleSet> {
    let counters: Vec<u64> = (0..n as u64).collect();
    let opts = SampleOptions::default();
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return super_resolve_counters(model, y, &counters, seed, &opts);
    }
    let parts: Vec<Vec<u64>> = (0..threads)
        .map(|t| counters.iter().copied().skip(t).step_by(threads).collect())
        .collect();
    let results = std::thread::scope(|scope| {
        let handles: Vec<_> = parts
            .iter()
            .map(|p| scope.spawn(|| super_resolve_counters(model, y, p, seed, &opts)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sampling worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut samples = vec![None; n];
    let mut m = None;
    for set in results {
        for (k, img) in set.sample_counters.iter().zip(set.samples) {
            samples[*k as usize] = Some(img);
        }
        m = Some(set.m);
    }
    Ok(crate::vspm::SRSampleSet {
        m: m.expect("at least one worker"),
        samples: samples.into_iter().map(|s| s.expect("all samples drawn")).collect(),
        seed,
        sample_counters: counters,
    })
}

fn cmd_sample(cfg: RunConfig, out: PathBuf, args: &SampleArgs, flags: &BTreeMap<String, String>) -> Result<RunManifest> {
    let _lock = DirLock::acquire(&out)?;
    let mut ctx = Context::new("sample", cfg, out);
    ctx.input("checkpoint", &args.checkpoint)?;
    ctx.input("input", &args.input)?;
    let cfg = ctx.cfg.clone();
    let model = load_model(&args.checkpoint)?;
    let model_cfg = with_inference_overrides(model.config().clone(), &cfg, flags);
    let model = rebuild(model, model_cfg)?;
    let s = model.config().scale;
    let y = load_png(&args.input)?;
    let n = cfg.n_samples;
    let set = if cfg.f64 {
        sample_with(&model.cast::<f64>(), &y, n, cfg.seed, cfg.threads)?
    } else {
        sample_with(&model, &y, n, cfg.seed, cfg.threads)?
    };
    save_png(&set.m, ctx.out.join("deterministic.png"))?;
    ctx.output("deterministic.png")?;
    let mut psnrs = Vec::new();
    for (k, img) in set.samples.iter().enumerate() {
        let name = format!("sample_{k:03}.png");
        save_png(img, ctx.out.join(&name))?;
        ctx.output(&name)?;
        psnrs.push(lr_psnr(img, &y, s)?);
    }
    for (k, p) in psnrs.iter().enumerate() {
        println!("sample_{k:03}.png  LR PSNR {p:.3} dB");
    }
    ctx.manifest.results.insert("lr_psnr".into(), serde_json::json!(psnrs));
    ctx.finish()
}

fn cmd_eval(cfg: RunConfig, out: PathBuf, args: &EvalArgs, flags: &BTreeMap<String, String>) -> Result<RunManifest> {
    let _lock = DirLock::acquire(&out)?;
    let mut ctx = Context::new("eval", cfg, out);
    ctx.input("checkpoint", &args.checkpoint)?;
    ctx.input("data", &args.data)?;
    let cfg = ctx.cfg.clone();
    let model = load_model(&args.checkpoint)?;
    let model_cfg = with_inference_overrides(model.config().clone(), &cfg, flags);
    let model = rebuild(model, model_cfg)?;
    let images = load_images(&args.data)?;
    let map_dir = if args.maps {
        let d = ctx.out.join("maps");
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Some(d)
    } else {
        None
    };
    let opts = EvalOptions {
        sampling: SampleOptions::default(),
        map_dir,
        threads: cfg.threads,
    };
    let report = if cfg.f64 {
        evaluate(&model.cast::<f64>(), &images, cfg.n_samples, cfg.seed, &opts)?
    } else {
        evaluate(&model, &images, cfg.n_samples, cfg.seed, &opts)?
    };
    let path = ctx.out.join("eval_report.json");
    crate::vspm::checkpoint::write_atomic(&path, report.to_json().as_bytes())?;
    ctx.output("eval_report.json")?;
    if args.maps {
        let mut names: Vec<String> = std::fs::read_dir(ctx.out.join("maps"))
            .map_err(|e| Error::io(ctx.out.join("maps"), e))?
            .filter_map(|e| e.ok())
            .map(|e| format!("maps/{}", e.file_name().to_string_lossy()))
            .collect();
        names.sort();
        for n in names {
            ctx.output(&n)?;
        }
    }
    println!("{}", report.summary());
    ctx.manifest
        .results
        .insert("aggregate".into(), serde_json::to_value(&report.aggregate).expect("json"));
    ctx.finish()
}

fn cmd_selfcheck(seed: u64) -> Result<()> {
    let results = oracle::run_all(seed)?;
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "pass" } else { "FAIL" };
        println!("{status}  {:42} max error {:.3e}  (tolerance {:.0e})", r.name, r.max_error, r.tolerance);
        if !r.passed() {
            failed.push(format!("{}: observed {:.3e} > tolerated {:.0e}", r.name, r.max_error, r.tolerance));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("self-check failed: {}", failed.join("; "))))
    }
}

fn cmd_synth(cfg: &RunConfig, out: &Path, args: &SynthArgs) -> Result<()> {
    let _lock = DirLock::acquire(out)?;
    for i in 0..args.count {
        let img = natural_image(args.size, args.size, cfg.seed.wrapping_add(i as u64));
        save_png(&img, out.join(format!("img_{i:03}.png")))?;
    }
    println!("wrote {} images to {}", args.count, out.display());
    Ok(())
}

/// Parses `--set` entries and the dedicated flags into config keys.
fn flag_overrides(cli: &Cli) -> Result<BTreeMap<String, String>> {
    let mut kv = BTreeMap::new();
    let mut errs = Vec::new();
    for s in &cli.common.set {
        match s.split_once('=') {
            Some((k, v)) if kind_of(k.trim()).is_some() => {
                kv.insert(k.trim().to_string(), v.trim().to_string());
            }
            Some((k, _)) => errs.push(format!("unknown config key {:?}", k.trim())),
            None => errs.push(format!("--set expects KEY=VALUE, got {s:?}")),
        }
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs.join("; ")));
    }
    let c = &cli.common;
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            kv.insert(k.to_string(), v);
        }
    };
    put("seed", c.seed.map(|v| v.to_string()));
    put("threads", c.threads.map(|v| v.to_string()));
    if c.f64 {
        put("f64", Some("true".into()));
    }
    match &cli.command {
        Command::Train(a) => {
            put("preset", a.preset.clone());
            put("scale", a.scale.map(|v| v.to_string()));
            put("lr_patch", a.lr_patch.map(|v| v.to_string()));
            put("epochs", a.epochs.map(|v| v.to_string()));
            put("batch_size", a.batch_size.map(|v| v.to_string()));
            put("lr", a.lr.map(|v| format!("{v:?}")));
        }
        Command::Finetune(a) => {
            put("preset", a.preset.clone());
            put("lr_patch", a.lr_patch.map(|v| v.to_string()));
        }
        Command::Sample(a) => {
            put("n_samples", a.n.map(|v| v.to_string()));
            put("cem_iters", a.cem_iters.map(|v| v.to_string()));
        }
        Command::Eval(a) => {
            put("n_samples", a.n.map(|v| v.to_string()));
            put("cem_iters", a.cem_iters.map(|v| v.to_string()));
        }
        _ => {}
    }
    Ok(kv)
}

/// For commands that take their architecture from a checkpoint, the model
/// keys of the run config are filled from it before validation.
fn checkpoint_model_keys(cli: &Cli) -> Result<BTreeMap<String, String>> {
    let path = match &cli.command {
        Command::Finetune(a) => &a.checkpoint,
        Command::Sample(a) => &a.checkpoint,
        Command::Eval(a) => &a.checkpoint,
        _ => return Ok(BTreeMap::new()),
    };
    let ck = Checkpoint::load(path)?;
    Ok(ck.config.to_kv().into_iter().collect())
}

fn require_out(common: &Common) -> Result<PathBuf> {
    common
        .out
        .clone()
        .ok_or_else(|| Error::Config("--out is required for this command".into()))
}

/// Executes a parsed command line.
pub fn execute(cli: &Cli) -> Result<Option<RunManifest>> {
    assert_canonical_degradation(degradation())?;
    let mut file = match &cli.common.config {
        Some(p) => read_config_file(p)?,
        None => BTreeMap::new(),
    };
    let flags = flag_overrides(cli)?;
    // checkpoint architecture sits between file and flags
    let ck_keys = checkpoint_model_keys(cli)?;
    if matches!(cli.command, Command::Finetune(_)) {
        for (k, v) in &ck_keys {
            if let Some(fv) = file.get(k).or(flags.get(k)) {
                let same = fv == v || matches!((fv.parse::<f64>(), v.parse::<f64>()), (Ok(x), Ok(y)) if x == y);
                if !same {
                    return Err(Error::Config(format!(
                        "config mismatch: {k} = {fv} conflicts with the checkpoint's {v}"
                    )));
                }
            }
        }
    }
    file.extend(ck_keys);
    let cfg = RunConfig::resolve(&file, &flags)?;
    match &cli.command {
        Command::Train(a) => cmd_train(cfg, require_out(&cli.common)?, a).map(Some),
        Command::Finetune(a) => cmd_finetune(cfg, require_out(&cli.common)?, a).map(Some),
        Command::Sample(a) => cmd_sample(cfg, require_out(&cli.common)?, a, &flags).map(Some),
        Command::Eval(a) => cmd_eval(cfg, require_out(&cli.common)?, a, &flags).map(Some),
        Command::Selfcheck => cmd_selfcheck(cfg.seed).map(|_| None),
        Command::Synth(a) => cmd_synth(&cfg, &require_out(&cli.common)?, a).map(|_| None),
        Command::Rerun(a) => cmd_rerun(a, cli.common.out.clone()).map(Some),
    }
}

/// Rebuilds the command line of a manifest with every resolved key pinned.
pub fn manifest_command(m: &RunManifest, out: &Path) -> Result<Cli> {
    let input = |role: &str| -> Result<OsString> {
        m.inputs
            .get(role)
            .map(OsString::from)
            .ok_or_else(|| Error::Data(format!("manifest lacks input {role:?}")))
    };
    let mut args: Vec<OsString> = vec!["vspsr".into(), m.command.clone().into()];
    match m.command.as_str() {
        "train" => {
            args.extend(["--data".into(), input("data")?]);
            if m.inputs.contains_key("resume") {
                args.extend(["--resume".into(), input("resume")?]);
            }
            if m.results.get("phase").and_then(|v| v.as_str()) == Some("finetune") {
                args.push("--with-finetune".into());
            }
        }
        "finetune" => args.extend(["--checkpoint".into(), input("checkpoint")?, "--data".into(), input("data")?]),
        "sample" => args.extend(["--checkpoint".into(), input("checkpoint")?, "--input".into(), input("input")?]),
        "eval" => {
            args.extend(["--checkpoint".into(), input("checkpoint")?, "--data".into(), input("data")?]);
            if m.outputs.keys().any(|k| k.starts_with("maps/")) {
                args.push("--maps".into());
            }
        }
        other => return Err(Error::Data(format!("manifest command {other:?} cannot be rerun"))),
    }
    let architecture: Vec<String> = VSpMConfig::default()
        .to_kv()
        .into_iter()
        .map(|(k, _)| k.to_string())
        .filter(|k| k != "cem_iters" && k != "deterministic_path")
        .collect();
    for (k, v) in &m.config {
        // inference commands read the architecture from the checkpoint
        if m.command != "train" && architecture.contains(k) {
            continue;
        }
        args.push("--set".into());
        args.push(format!("{k}={v}").into());
    }
    args.extend(["--out".into(), out.as_os_str().to_owned()]);
    Cli::try_parse_from(args).map_err(|e| Error::Data(format!("manifest does not form a valid command: {e}")))
}

fn cmd_rerun(args: &RerunArgs, out: Option<PathBuf>) -> Result<RunManifest> {
    let text = std::fs::read_to_string(&args.manifest).map_err(|e| Error::io(&args.manifest, e))?;
    let old: RunManifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", args.manifest.display())))?;
    let out = out.ok_or_else(|| Error::Config("rerun needs --out for the repeated outputs".into()))?;
    for (role, digest) in &old.input_digests {
        let p = PathBuf::from(&old.inputs[role]);
        let mut probe = Context::new("probe", RunConfig::preset("full")?, out.clone());
        probe.input(role, &p)?;
        if probe.manifest.input_digests.get(role) != Some(digest) {
            return Err(Error::Data(format!("input {role} ({}) changed since the original run", p.display())));
        }
    }
    let cli = manifest_command(&old, &out)?;
    let new = execute(&cli)?.ok_or_else(|| Error::Data("rerun produced no manifest".into()))?;
    let mut mismatched = Vec::new();
    for (rel, digest) in &old.outputs {
        match new.outputs.get(rel) {
            Some(d) if d == digest => {}
            Some(_) => mismatched.push(format!("{rel} differs")),
            None => mismatched.push(format!("{rel} missing")),
        }
    }
    if mismatched.is_empty() {
        println!("rerun reproduced all {} output digests", old.outputs.len());
        Ok(new)
    } else {
        Err(Error::Numerical(format!("rerun did not reproduce: {}", mismatched.join(", "))))
    }
}

/// Entry point; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let cfg = RunConfig::resolve(&kv(&[("epochs", "7"), ("lr", "0.5")]), &kv(&[("epochs", "9")])).unwrap();
        assert_eq!(cfg.train.epochs, 9);
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.train.batch_size, 16);
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::resolve(&kv(&[("preset", "desk"), ("seed", "3")]), &kv(&[("lambda_adv", "0.01"), ("lambda_per", "0.01")])).unwrap();
        let again = RunConfig::resolve(&cfg.to_kv(), &BTreeMap::new()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(cfg.to_kv()["lambda_adv"], "0.01");
    }

    #[test]
    fn scale_eight_uses_patch_thirty_two() {
        let cfg = RunConfig::resolve(&BTreeMap::new(), &kv(&[("scale", "8")])).unwrap();
        assert_eq!(cfg.train.lr_patch, 32);
        let cfg = RunConfig::resolve(&BTreeMap::new(), &kv(&[("scale", "8"), ("lr_patch", "32")])).unwrap();
        assert_eq!(cfg.train.lr_patch, 32);
    }

    #[test]
    fn every_problem_is_reported() {
        let err = RunConfig::resolve(&kv(&[("bogus", "1"), ("epochs", "x")]), &kv(&[("scale", "3")]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("bogus") && err.contains("epochs") && err.contains("scale"), "{err}");
    }

    #[test]
    fn config_file_types_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "epochs = 5\nlr = 1\nswitch = true\naugment = \"yes\"\n[model]\nscale = 4\n").unwrap();
        let err = read_config_file(&p).unwrap_err().to_string();
        assert!(err.contains("switch") && err.contains("augment") && err.contains("model"), "{err}");
        std::fs::write(&p, "epochs = 5\nlr = 1\n").unwrap();
        let kv = read_config_file(&p).unwrap();
        assert_eq!(kv["lr"], "1.0");
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["vspsr", "frobnicate"]), 1);
        assert_eq!(run(["vspsr", "train"]), 1);
    }

    #[test]
    fn output_directory_lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let a = DirLock::acquire(dir.path()).unwrap();
        assert!(matches!(DirLock::acquire(dir.path()), Err(Error::Data(_))));
        drop(a);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }
}
