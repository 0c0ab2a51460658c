//! Training loop, resumable training checkpoints, evaluation passes and the
//! model-level gradient check.

use std::fs::OpenOptions;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use crate::data::{bicubic_resize, make_pairs, ImagePair, Image, PatchSampler, ResizeOptions};
use crate::error::{Error, Result};
use crate::metrics::{psnr_y, ssim_y, EvalReport};
use crate::model::{Block, DsrNet, GateDecision, ModelConfig};
use crate::nn::{grad_check, Eval, GradCheckReport, Mode};
use crate::optim::{adam_step, mse_loss, AdamState, LrSchedule};
use crate::rng::Rng;
use crate::tensor::{Element, Shape, Tensor};

const STATE_MAGIC: &[u8; 4] = b"ADAM";

/// Model weights plus everything needed to continue training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub model: DsrNet<T>,
    pub adam: AdamState,
    /// Completed optimizer steps.
    pub step: u64,
}

impl<T: Element> TrainState<T> {
    pub fn fresh(config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(TrainState {
            model: DsrNet::build(config, &mut Rng::named(seed, "init"))?,
            adam: AdamState::default(),
            step: 0,
        })
    }

    /// The model record first, so [`DsrNet::load`] reads a training
    /// checkpoint directly; the optimizer section follows.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        self.model.write_to(out)?;
        out.write_all(STATE_MAGIC)?;
        out.write_all(&self.step.to_le_bytes())?;
        out.write_all(&self.adam.t.to_le_bytes())?;
        for l in self.model.params().layers() {
            for p in l.params() {
                p.adam_m.write_to(out)?;
                p.adam_v.write_to(out)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut model = DsrNet::<T>::read_from(input)?;
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != STATE_MAGIC {
            return Err(Error::Checkpoint("no optimizer state after the model".into()));
        }
        let mut b = [0u8; 8];
        input.read_exact(&mut b)?;
        let step = u64::from_le_bytes(b);
        input.read_exact(&mut b)?;
        let t = u64::from_le_bytes(b);
        for l in model.params_mut().layers_mut() {
            for p in l.params_mut() {
                for slot in [&mut p.adam_m, &mut p.adam_v] {
                    let moment = Tensor::<T>::read_from(input)?;
                    if moment.shape() != slot.shape() {
                        return Err(Error::Checkpoint(format!(
                            "optimizer moment shape {} differs from {}",
                            moment.shape(),
                            slot.shape()
                        )));
                    }
                    *slot = moment;
                }
            }
        }
        Ok(TrainState {
            model,
            adam: AdamState {
                t,
                ..AdamState::default()
            },
            step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub train_dir: PathBuf,
    /// Pre-generated LR images matched by file name.
    pub lr_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Total optimizer steps, counting any already done before a resume.
    pub steps: u64,
    pub batch: usize,
    /// HR patch side, rounded down to a multiple of the scale.
    pub patch: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            train_dir: PathBuf::new(),
            lr_dir: None,
            out_dir: PathBuf::from("runs/train"),
            steps: 600_000,
            batch: 64,
            patch: 64,
            schedule: LrSchedule::default(),
            seed: 0,
            checkpoint_every: 1000,
            log_every: 1,
            resume: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.patch < self.model.scale {
            return Err(Error::Config(format!("patch {} is below the scale", self.patch)));
        }
        if self.patch / self.model.scale < 3 {
            return Err(Error::Config(format!(
                "patch {} gives LR patches under 3x3 at scale {}",
                self.patch, self.model.scale
            )));
        }
        if !(self.schedule.initial > 0.0) || self.schedule.half_every == 0 {
            return Err(Error::Config("learning rate and half_every must be positive".into()));
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(Error::Config("checkpoint_every and log_every must be positive".into()));
        }
        Ok(())
    }
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("ckpt_{step:08}.bin"))
}

/// The sampler stream of one step depends only on the seed and the step,
/// so a resumed run draws the same batches as an uninterrupted one.
pub fn step_rng(seed: u64, step: u64) -> Rng {
    Rng::named(seed, &format!("sampler/{step}"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the finished step.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub routed_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub steps_done: u64,
    pub final_checkpoint: PathBuf,
    pub interrupted: bool,
    pub records: Vec<StepRecord>,
}

/// One optimizer step on a sampled batch. Returns the pre-update loss.
pub fn train_step<T: Element>(
    state: &mut TrainState<T>,
    sampler: &PatchSampler<'_>,
    batch: usize,
    schedule: &LrSchedule,
    seed: u64,
) -> Result<StepRecord> {
    let step = state.step;
    let (lr_batch, hr_batch) = sampler.sample::<T>(batch, &mut step_rng(seed, step));
    let (tape, out, gate) = state.model.forward_tape(lr_batch)?;
    let (loss, grad) = mse_loss(tape.value(out), &hr_batch)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss at step {}", step + 1)));
    }
    tape.backward(out, grad, state.model.params_mut())?;
    drop(tape);
    state.adam.lr = schedule.lr_at(step);
    adam_step(state.model.params_mut(), &mut state.adam)?;
    state.step += 1;
    Ok(StepRecord {
        step: state.step,
        lr: state.adam.lr,
        loss,
        routed_fraction: gate.map(|g| g.routed_fraction()).unwrap_or(0.0),
    })
}

/// Trains until `cfg.steps` completed steps or until `stop` is raised; in
/// the latter case the current state is checkpointed before returning.
pub fn train<T: Element>(cfg: &TrainConfig, stop: Option<&AtomicBool>) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut state = match &cfg.resume {
        Some(path) => {
            let s = TrainState::<T>::load(path)?;
            if s.model.config() != &cfg.model {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different model configuration",
                    path.display()
                )));
            }
            log::info!("resuming from {} at step {}", path.display(), s.step);
            s
        }
        None => TrainState::<T>::fresh(cfg.model.clone(), cfg.seed)?,
    };

    let log_path = cfg.out_dir.join("train_log.csv");
    let fresh_log = state.step == 0 || !log_path.exists();
    let log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh_log)
        .truncate(fresh_log)
        .open(&log_path)?;
    let mut log_csv = csv::WriterBuilder::new().has_headers(false).from_writer(log_file);
    if fresh_log {
        log_csv.write_record(["step", "lr", "loss", "routed_fraction"])?;
    }

    let mut records = Vec::new();
    if state.step >= cfg.steps {
        let path = checkpoint_path(&cfg.out_dir, state.step);
        state.save(&path)?;
        return Ok(TrainOutcome {
            steps_done: state.step,
            final_checkpoint: path,
            interrupted: false,
            records,
        });
    }

    let pairs = make_pairs(&cfg.train_dir, cfg.model.scale, cfg.lr_dir.as_deref())?;
    let sampler = PatchSampler::new(&pairs, cfg.patch)?;
    log::info!(
        "training on {} images, {}px HR patches, batch {}, steps {}..{}",
        sampler.usable(),
        sampler.hr_patch(),
        cfg.batch,
        state.step,
        cfg.steps
    );
    let started = Instant::now();
    let mut last_saved = None;
    let mut interrupted = false;
    while state.step < cfg.steps {
        let rec = train_step(&mut state, &sampler, cfg.batch, &cfg.schedule, cfg.seed)?;
        if rec.step % cfg.log_every == 0 || rec.step == cfg.steps {
            log_csv.write_record([
                rec.step.to_string(),
                format!("{:e}", rec.lr),
                format!("{:.8}", rec.loss),
                format!("{:.4}", rec.routed_fraction),
            ])?;
            log_csv.flush()?;
            log::info!(
                "step {} loss {:.6} lr {:e} routed {:.2} ({:.1}s)",
                rec.step,
                rec.loss,
                rec.lr,
                rec.routed_fraction,
                started.elapsed().as_secs_f64()
            );
        }
        records.push(rec);
        if rec.step % cfg.checkpoint_every == 0 {
            let path = checkpoint_path(&cfg.out_dir, rec.step);
            state.save(&path)?;
            last_saved = Some(rec.step);
        }
        if stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
            interrupted = true;
            log::warn!("interrupted at step {}", state.step);
            break;
        }
    }
    let path = checkpoint_path(&cfg.out_dir, state.step);
    if last_saved != Some(state.step) {
        state.save(&path)?;
    }
    Ok(TrainOutcome {
        steps_done: state.step,
        final_checkpoint: path,
        interrupted,
        records,
    })
}

/// Super-resolves one image, rounding the result to 8-bit levels.
pub fn super_resolve<T: Element>(model: &DsrNet<T>, lr: &Image) -> Result<(Image, Option<GateDecision>)> {
    let (out, gate) = model.infer(&lr.to_tensor::<T>())?;
    Ok((Image::from_tensor(&out, 0).quantize(), gate))
}

/// Bicubic upscaling of the LR image to the HR size, rounded to 8 bits.
pub fn bicubic_upscale(lr: &Image, width: usize, height: usize) -> Result<Image> {
    Ok(bicubic_resize(lr, width, height, ResizeOptions::default())?.quantize())
}

/// PSNR/SSIM of the bicubic baseline and, if given, of the model, on every
/// pair.
pub fn evaluate_pairs<T: Element>(model: Option<&DsrNet<T>>, pairs: &[ImagePair], shave: usize) -> Result<EvalReport> {
    let scale = pairs.first().map(|p| p.scale).unwrap_or(0);
    let mut report = EvalReport::new(scale);
    for p in pairs {
        let up = bicubic_upscale(&p.lr, p.hr.width(), p.hr.height())?;
        report.push("bicubic", &p.name, psnr_y(&up, &p.hr, shave)?, ssim_y(&up, &p.hr, shave)?);
    }
    if let Some(m) = model {
        for p in pairs {
            let (sr, _) = super_resolve(m, &p.lr)?;
            report.push("dsrnet", &p.name, psnr_y(&sr, &p.hr, shave)?, ssim_y(&sr, &p.hr, shave)?);
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckSetup {
    pub width: usize,
    pub scale: usize,
    pub lr_size: usize,
    pub batch: usize,
    pub eps: f64,
    pub seed: u64,
    /// Force every sample through SDG (`true`) or around it.
    pub routed: bool,
    /// Required distance of every ReLU input from zero, in units of `eps`.
    pub kink_margin: f64,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        GradCheckSetup {
            width: 8,
            scale: 2,
            lr_size: 4,
            batch: 1,
            eps: 1e-5,
            seed: 0,
            routed: true,
            kink_margin: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradCheck {
    pub report: GradCheckReport,
    pub seed: u64,
    /// Smallest |pre-activation| over all ReLUs at the base point.
    pub relu_margin: f64,
    pub gate: GateDecision,
}

/// Finite-difference check of every parameter gradient of a small `f64`
/// full model with the gate pinned to one routing state.
///
/// Biases are randomized so that every path carries signal, and the fc2
/// bias is shifted so the mean logit gap `z1 - z0` is -1 (routed, probs[1]
/// near 0.27) or 3 (skipped, near 0.95). Seeds are tried from `setup.seed` upward until no ReLU input
/// lies within `kink_margin * eps` of its kink.
pub fn model_grad_check(setup: GradCheckSetup) -> Result<ModelGradCheck> {
    let config = ModelConfig {
        scale: setup.scale,
        width: setup.width,
        ..ModelConfig::default()
    };
    config.validate()?;
    for seed in setup.seed..setup.seed + 64 {
        let mut model = DsrNet::<f64>::build(config.clone(), &mut Rng::named(seed, "gradcheck-init"))?;
        let mut rng = Rng::named(seed, "gradcheck-data");
        for l in model.params_mut().layers_mut() {
            for v in l.bias.value.data_mut() {
                *v = 0.2 * (rng.uniform() - 0.5);
            }
        }
        let x = Tensor::uniform(Shape::new(setup.batch, 3, setup.lr_size, setup.lr_size), 0.0, 1.0, &mut rng);
        pin_gate(&mut model, &x, if setup.routed { -1.0 } else { 3.0 })?;
        let hr = setup.lr_size * setup.scale;
        let target = Tensor::uniform(Shape::new(setup.batch, 3, hr, hr), 0.0, 1.0, &mut rng);

        let (tape, _, gate) = model.forward_tape(x.clone())?;
        let margin = tape.relu_margin();
        let gate = gate.expect("full variant has a gate");
        drop(tape);
        if gate.use_sdg.iter().any(|&r| r != setup.routed) {
            return Err(Error::invalid("model_grad_check", "gate bias did not pin the routing state"));
        }
        if margin < setup.kink_margin * setup.eps {
            log::debug!("seed {seed}: ReLU margin {margin:e} too small, trying the next seed");
            continue;
        }
        let report = grad_check(&mut model, setup.eps, |m, mode| {
            let (tape, out, _) = m.forward_tape(x.clone())?;
            let (loss, grad) = mse_loss(tape.value(out), &target)?;
            if mode == Mode::WithGradients {
                tape.backward(out, grad, m.params_mut())?;
            }
            Ok(loss)
        })?;
        return Ok(ModelGradCheck {
            report,
            seed,
            relu_margin: margin,
            gate,
        });
    }
    Err(Error::invalid("model_grad_check", "no seed kept every ReLU away from its kink"))
}

/// Shifts the second fc2 bias so the batch-mean logit gap `z1 - z0` equals
/// `gap`.
fn pin_gate(model: &mut DsrNet<f64>, x: &Tensor<f64>, gap: f64) -> Result<()> {
    let fc2 = model.block_layers(Block::Gm)[1];
    model.params_mut().get_mut(fc2).bias.value.fill(0.0);
    let (o_reb, _) = model.reb_forward(&mut Eval, x)?;
    let (_, d) = model.gate_mechanism(&mut Eval, &o_reb)?;
    let mean_gap = d.probs.iter().map(|p| (p[1] / p[0]).ln()).sum::<f64>() / d.probs.len() as f64;
    model.params_mut().get_mut(fc2).bias.value.data_mut()[1] = gap - mean_gap;
    Ok(())
}
