//! Optimization loop, learning-rate schedule, checkpointing and the
//! fine-tune phase.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{bicubic_upsample, save_png, Dataset, Image, PatchPair};
use crate::numerics::{AdamConfig, AdamState, Graph, Tensor};
use crate::objective::{LossInputs, LossWeights, Objective, PriorParams};
use crate::rng::SeedStream;
use crate::vspm::checkpoint::Checkpoint;
use crate::vspm::{residual_on_graph, DeterministicPath, VSpMModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub beta: f64,
    pub lambda_adv: f64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            beta: 1.0,
            lambda_adv: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    pub lr_patch: usize,
    pub crops_per_image: usize,
    pub augment: bool,
    pub prior: PriorParams,
    pub weights: LossWeights,
    pub stop_grad_mu_rho: bool,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub seed: u64,
    pub finetune: FineTuneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 1e-4,
            lr_decay_every: 100,
            lr_decay_factor: 0.1,
            batch_size: 16,
            lr_patch: 48,
            crops_per_image: 32,
            augment: true,
            prior: PriorParams::default(),
            weights: LossWeights::default(),
            stop_grad_mu_rho: false,
            grad_clip: 10.0,
            checkpoint_every: 0,
            seed: 0,
            finetune: FineTuneConfig::default(),
        }
    }
}

impl TrainConfig {
    /// LR patch edge used for a scale factor: 48 at ×4 and below, 32 at ×8.
    pub fn default_lr_patch(scale: usize) -> usize {
        if scale >= 8 {
            32
        } else {
            48
        }
    }

    /// Short CPU schedule for the small model.
    pub fn desk_scale() -> Self {
        Self {
            epochs: 40,
            lr: 2e-3,
            lr_decay_every: 30,
            batch_size: 4,
            lr_patch: 12,
            crops_per_image: 4,
            checkpoint_every: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push("epochs must be positive".to_string());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(format!("lr must be positive, got {}", self.lr));
        }
        if self.lr_decay_every == 0 {
            errs.push("lr_decay_every must be positive".to_string());
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            errs.push(format!("lr_decay_factor must lie in (0, 1], got {}", self.lr_decay_factor));
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".to_string());
        }
        if self.lr_patch == 0 {
            errs.push("lr_patch must be positive".to_string());
        }
        if self.crops_per_image == 0 {
            errs.push("crops_per_image must be positive".to_string());
        }
        if !(self.grad_clip >= 0.0) {
            errs.push(format!("grad_clip must be non-negative, got {}", self.grad_clip));
        }
        if !(self.finetune.beta > 0.0) {
            errs.push(format!("finetune beta must be positive, got {}", self.finetune.beta));
        }
        if !(self.finetune.lambda_adv >= 0.0) {
            errs.push("finetune lambda_adv must be non-negative".to_string());
        }
        if let Err(e) = self.weights.validate() {
            errs.push(e.to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    /// `lr₀ · factor^⌊epoch / every⌋`; epochs count from zero.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }

    pub fn steps_per_epoch(&self, images: usize) -> usize {
        (images * self.crops_per_image / self.batch_size).max(1)
    }
}

/// Which part of the schedule a run is in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Baseline,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Baseline => "baseline",
            Phase::Finetune => "finetune",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Phase::Baseline),
            "finetune" => Ok(Phase::Finetune),
            _ => Err(Error::Checkpoint(format!("unknown phase {s:?}"))),
        }
    }
}

/// Everything needed to continue optimization.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: VSpMModel<f32>,
    pub adam: AdamState<f32>,
    pub phase: Phase,
    /// Completed epochs of the current phase.
    pub epoch: usize,
    /// Completed optimizer steps over all phases.
    pub global_step: u64,
    pub prior: PriorParams,
    pub weights: LossWeights,
}

impl TrainState {
    pub fn new(model: VSpMModel<f32>, cfg: &TrainConfig) -> Self {
        let adam = AdamState::new(AdamConfig::default(), model.params());
        Self {
            model,
            adam,
            phase: Phase::Baseline,
            epoch: 0,
            global_step: 0,
            prior: cfg.prior,
            weights: cfg.weights,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = BTreeMap::from([
            ("phase".to_string(), self.phase.as_str().to_string()),
            ("epoch".to_string(), self.epoch.to_string()),
            ("global_step".to_string(), self.global_step.to_string()),
            ("prior_alpha".to_string(), format!("{:?}", self.prior.alpha)),
            ("prior_beta".to_string(), format!("{:?}", self.prior.beta)),
            ("lambda_omega".to_string(), format!("{:?}", self.weights.lambda_omega)),
            ("lambda_adv".to_string(), format!("{:?}", self.weights.lambda_adv)),
            ("lambda_per".to_string(), format!("{:?}", self.weights.lambda_per)),
        ]);
        Checkpoint::from_model(&self.model, Some(&self.adam), meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let get = |k: &str| {
            ck.meta
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks training field {k:?}")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("training field {k:?} is not a number")))
        };
        let int = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("training field {k:?} is not an integer")))
        };
        let adam = ck
            .adam
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        Ok(Self {
            model: ck.model()?,
            adam,
            phase: Phase::parse(get("phase")?)?,
            epoch: int("epoch")? as usize,
            global_step: int("global_step")?,
            prior: PriorParams::new(num("prior_alpha")?, num("prior_beta")?)?,
            weights: LossWeights {
                lambda_omega: num("lambda_omega")?,
                lambda_adv: num("lambda_adv")?,
                lambda_per: num("lambda_per")?,
            },
        })
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step {
        phase: Phase,
        epoch: usize,
        step: u64,
        lr: f64,
        l_x: f64,
        l_omega: f64,
        l_total: f64,
        grad_norm: f64,
        clipped: bool,
    },
    Epoch {
        phase: Phase,
        epoch: usize,
        step: u64,
        mean_l_x: f64,
        mean_l_omega: f64,
        mean_l_total: f64,
        mean_sigma: f64,
        wall_seconds: f64,
    },
}

/// Append-only training records, mirrored to a JSON-lines file when open.
#[derive(Debug, Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    sink: Option<(PathBuf, BufWriter<File>)>,
}

impl TrainLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append_to(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            records: Vec::new(),
            sink: Some((path, BufWriter::new(file))),
        })
    }

    pub fn push(&mut self, record: LogRecord) -> Result<()> {
        if let Some((path, w)) = &mut self.sink {
            let line = serde_json::to_string(&record).expect("log records serialize");
            writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some((path, w)) = &mut self.sink {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }

    /// `(step, l_total)` of every optimizer step.
    pub fn losses(&self) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { step, l_total, .. } => Some((*step, *l_total)),
                _ => None,
            })
            .collect()
    }

    pub fn step_records(&self) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(|r| matches!(r, LogRecord::Step { .. }))
    }
}

/// Where checkpoints and failure dumps go.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub dir: Option<PathBuf>,
}

impl TrainOutputs {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    fn checkpoint_path(&self, phase: Phase, epoch: usize) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join("checkpoints").join(format!("{}-epoch{epoch:04}.ckpt", phase.as_str())))
    }
}

/// Scalars of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub l_x: f64,
    pub l_omega: f64,
    pub l_total: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    pub mean_sigma: f64,
}

/// Channel-stacked tensors of a batch: `[3B, 1, h, w]` LR and `[3B, 1, sh, sw]` HR.
fn stack(pairs: &[PatchPair], pick: impl Fn(&PatchPair) -> &Image) -> Result<Tensor<f32>> {
    let (h, w) = pick(&pairs[0]).dims();
    let mut data = Vec::with_capacity(pairs.len() * 3 * h * w);
    for p in pairs {
        data.extend_from_slice(pick(p).data());
    }
    Tensor::new(&[pairs.len() * 3, 1, h, w], data)
}

fn dump_batch(outputs: &TrainOutputs, step: u64, pairs: &[PatchPair]) -> Option<PathBuf> {
    let dir = outputs.dir.as_ref()?.join(format!("nonfinite-step{step}"));
    std::fs::create_dir_all(&dir).ok()?;
    for (i, p) in pairs.iter().enumerate() {
        let _ = save_png(&p.lr.clamped(), dir.join(format!("{i:02}-lr.png")));
        let _ = save_png(&p.hr.clamped(), dir.join(format!("{i:02}-hr.png")));
    }
    let meta: Vec<String> = pairs
        .iter()
        .map(|p| format!("source={} offset={:?} transform={}", p.source, p.offset, p.transform.index()))
        .collect();
    let _ = std::fs::write(dir.join("batch.txt"), meta.join("\n"));
    Some(dir)
}

/// Draws the batch of `global_step`; depends only on `(seed, step)`.
pub fn batch_for_step(dataset: &Dataset, seed: u64, global_step: u64, batch_size: usize) -> Result<Vec<PatchPair>> {
    let mut rng = SeedStream::new(seed).stream("batch", global_step);
    (0..batch_size).map(|_| dataset.crop_pair(&mut rng)).collect()
}

/// Forward, loss, backward and Adam update on one batch.
pub fn train_step(
    state: &mut TrainState,
    objective: &Objective<f32>,
    pairs: &[PatchPair],
    noise_seed: u64,
    lr: f64,
    grad_clip: f64,
) -> Result<StepReport> {
    let cfg = state.model.config().clone();
    let s = cfg.scale;
    let lr_t = stack(pairs, |p| &p.lr)?;
    let hr_t = stack(pairs, |p| &p.hr)?;
    let m_t = match &cfg.deterministic_path {
        DeterministicPath::Bicubic => {
            let mut data = Vec::with_capacity(hr_t.len());
            for p in pairs {
                data.extend_from_slice(bicubic_upsample(&p.lr, s).data());
            }
            Tensor::new(hr_t.shape(), data)?
        }
        DeterministicPath::None => Tensor::zeros(hr_t.shape()),
        DeterministicPath::External(_) => {
            return Err(Error::Config(
                "an external deterministic estimate is only available at inference".into(),
            ))
        }
    };

    let mut g = Graph::<f32>::new();
    let vars = state.model.bind(&mut g, true);
    let y = g.constant(lr_t);
    let x = g.constant(hr_t);
    let m = g.constant(m_t);
    let out = state.model.forward(&mut g, &vars, y)?;
    let mut rng = SeedStream::new(noise_seed).stream("noise", state.global_step);
    let eps = if cfg.stochastic_omega {
        Some(g.constant(randn_like(g.shape(out.mu), &mut rng)))
    } else {
        None
    };
    let delta = if cfg.stochastic_z {
        Some(g.constant(randn_like(g.shape(out.tiles), &mut rng)))
    } else {
        None
    };
    let e = residual_on_graph(&mut g, &out, eps, delta)?;
    let report = objective.total_loss(
        &mut g,
        LossInputs {
            hr: x,
            m,
            e,
            mu: out.mu,
            sigma: out.sigma,
        },
    )?;
    if !report.l_total.is_finite() {
        return Err(Error::Numerical(format!("loss is {}", report.l_total)));
    }
    let grads = g.backward(report.total)?;
    let mut grad_list: Vec<Tensor<f32>> = vars
        .iter()
        .zip(state.model.params())
        .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
        .collect();
    let norm_sq: f64 = grad_list.iter().map(|t| t.norm_sq() as f64).sum();
    let grad_norm = norm_sq.sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::Numerical(format!("gradient norm is {grad_norm}")));
    }
    let clipped = grad_clip > 0.0 && grad_norm > grad_clip;
    if clipped {
        let k = (grad_clip / grad_norm) as f32;
        for t in &mut grad_list {
            t.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    let sigma = g.value(out.sigma);
    let mean_sigma = sigma.data().iter().map(|&v| v as f64).sum::<f64>() / sigma.len() as f64;
    state.adam.step(state.model.params_mut(), &grad_list, lr)?;
    state.global_step += 1;
    Ok(StepReport {
        l_x: report.l_x,
        l_omega: report.l_omega,
        l_total: report.l_total,
        grad_norm,
        clipped,
        mean_sigma,
    })
}

fn randn_like(shape: &[usize], rng: &mut impl rand::Rng) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
    Tensor::new(shape, data).expect("shape")
}

/// Runs the current phase of `state` until `total_epochs` are complete.
fn run_phase(
    state: &mut TrainState,
    dataset: &Dataset,
    cfg: &TrainConfig,
    total_epochs: usize,
    log: &mut TrainLog,
    outputs: &TrainOutputs,
) -> Result<()> {
    if dataset.eligible().is_empty() {
        return Err(Error::Data("training set has no usable images".into()));
    }
    let mut objective = Objective::<f32>::new(state.prior, state.weights)?;
    objective.stop_grad_mu_rho = cfg.stop_grad_mu_rho;
    let steps = cfg.steps_per_epoch(dataset.eligible().len());
    let clock = Instant::now();
    while state.epoch < total_epochs {
        let epoch = state.epoch;
        let lr = cfg.lr_at(epoch);
        let (mut sx, mut so, mut st, mut ss) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..steps {
            let step = state.global_step;
            let pairs = batch_for_step(dataset, cfg.seed, step, cfg.batch_size)?;
            let r = match train_step(state, &objective, &pairs, cfg.seed, lr, cfg.grad_clip) {
                Ok(r) => r,
                Err(Error::Numerical(msg)) => {
                    let dump = dump_batch(outputs, step, &pairs);
                    let at = dump.map(|d| format!("; batch written to {}", d.display())).unwrap_or_default();
                    return Err(Error::Numerical(format!("step {step}: {msg}{at}")));
                }
                Err(e) => return Err(e),
            };
            if r.clipped {
                log::info!("step {step}: gradient norm {:.3e} clipped to {}", r.grad_norm, cfg.grad_clip);
            }
            sx += r.l_x;
            so += r.l_omega;
            st += r.l_total;
            ss += r.mean_sigma;
            log.push(LogRecord::Step {
                phase: state.phase,
                epoch,
                step,
                lr,
                l_x: r.l_x,
                l_omega: r.l_omega,
                l_total: r.l_total,
                grad_norm: r.grad_norm,
                clipped: r.clipped,
            })?;
        }
        state.epoch += 1;
        let n = steps as f64;
        log.push(LogRecord::Epoch {
            phase: state.phase,
            epoch,
            step: state.global_step,
            mean_l_x: sx / n,
            mean_l_omega: so / n,
            mean_l_total: st / n,
            mean_sigma: ss / n,
            wall_seconds: clock.elapsed().as_secs_f64(),
        })?;
        log::info!(
            "{} epoch {}/{}: L_total {:.5} L_x {:.5} L_ω {:.4} σ̄ {:.4}",
            state.phase.as_str(),
            state.epoch,
            total_epochs,
            st / n,
            sx / n,
            so / n,
            ss / n
        );
        let periodic = cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0;
        if periodic || state.epoch == total_epochs {
            if let Some(path) = outputs.checkpoint_path(state.phase, state.epoch) {
                let dir = path.parent().expect("checkpoint dir");
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                state.to_checkpoint().save(&path)?;
            }
        }
    }
    log.flush()
}

/// Baseline training from `state` (fresh or resumed) through `cfg.epochs`.
pub fn train(state: &mut TrainState, dataset: &Dataset, cfg: &TrainConfig, log: &mut TrainLog, outputs: &TrainOutputs) -> Result<()> {
    cfg.validate()?;
    check_dataset(dataset, state, cfg)?;
    if state.phase != Phase::Baseline {
        return Err(Error::Config("state is already past the baseline phase".into()));
    }
    run_phase(state, dataset, cfg, cfg.epochs, log, outputs)
}

/// Switches a baseline state to the fine-tune settings (prior β and the
/// adversarial weight slot) and trains `cfg.finetune.epochs` more epochs.
/// The step counter carries on; the learning-rate schedule restarts.
pub fn fine_tune(
    state: &mut TrainState,
    dataset: &Dataset,
    cfg: &TrainConfig,
    log: &mut TrainLog,
    outputs: &TrainOutputs,
) -> Result<()> {
    cfg.validate()?;
    check_dataset(dataset, state, cfg)?;
    if state.phase == Phase::Baseline {
        state.phase = Phase::Finetune;
        state.epoch = 0;
        state.prior = PriorParams::new(state.prior.alpha, cfg.finetune.beta)?;
        state.weights.lambda_adv = cfg.finetune.lambda_adv;
    }
    run_phase(state, dataset, cfg, cfg.finetune.epochs, log, outputs)
}

fn check_dataset(dataset: &Dataset, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    if dataset.spec.scale != state.model.config().scale {
        return Err(Error::Config(format!(
            "dataset scale ×{} differs from model scale ×{}",
            dataset.spec.scale,
            state.model.config().scale
        )));
    }
    if dataset.spec.lr_patch != cfg.lr_patch {
        return Err(Error::Config(format!(
            "dataset LR patch {} differs from configured {}",
            dataset.spec.lr_patch, cfg.lr_patch
        )));
    }
    Ok(())
}
