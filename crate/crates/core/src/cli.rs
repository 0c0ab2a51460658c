//! Command-line front end.
//!
//! Every subcommand reads a [`RunConfig`]: built-in defaults, then an
//! optional `--config` file, then `--set key=value` pairs, then the named
//! flags. Exit status is 0 on success, 1 for usage or configuration errors
//! and 2 for anything that fails at run time.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{self, Boundary, ManifestRow, ResizeOptions};
use crate::error::{Error, Result};
use crate::metrics::{self, TimingResult};
use crate::model::{DsrNet, GateTrainMode, ModelConfig, Variant};
use crate::optim::LrSchedule;
use crate::rng::Rng;
use crate::train::{self, GradCheckSetup, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "dsrnet", version, about = "Dynamic super-resolution network: train, evaluate and run")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration file with `key = value` lines.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override a configuration key; repeatable.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a directory of HR images.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train_dir: Option<String>,
        #[arg(long)]
        out_dir: Option<String>,
        #[arg(long)]
        scale: Option<String>,
        #[arg(long)]
        steps: Option<String>,
        #[arg(long)]
        batch: Option<String>,
        #[arg(long)]
        seed: Option<String>,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<String>,
    },
    /// Score a checkpoint and bicubic on a test directory.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        test_dir: Option<String>,
        #[arg(long)]
        out_dir: Option<String>,
        /// Scale, needed only without a checkpoint.
        #[arg(long)]
        scale: Option<String>,
        /// Report bicubic alone; no checkpoint is read.
        #[arg(long)]
        bicubic_only: bool,
    },
    /// Super-resolve one PNG.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        input: Option<String>,
        #[arg(long)]
        output: Option<String>,
    },
    /// Write mod-cropped HR and bicubic-downscaled LR images plus a manifest.
    Degrade {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        hr_dir: Option<String>,
        #[arg(long)]
        out_dir: Option<String>,
        #[arg(long)]
        scale: Option<String>,
    },
    /// Per-block parameter counts.
    CountParams {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scale: Option<String>,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Per-block multiply-accumulate counts for one LR input size.
    CountFlops {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scale: Option<String>,
        #[arg(long)]
        variant: Option<String>,
        /// LR side length.
        #[arg(long)]
        lr_size: Option<String>,
    },
    /// Finite-difference gradient check of a small model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// `routed`, `skipped` or `both`.
        #[arg(long)]
        routing: Option<String>,
        #[arg(long)]
        seed: Option<String>,
    },
    /// Time single-image inference at several LR sizes.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to time; a freshly initialized model otherwise.
        #[arg(long)]
        checkpoint: Option<String>,
        /// Comma-separated LR side lengths.
        #[arg(long)]
        sizes: Option<String>,
        #[arg(long)]
        runs: Option<String>,
        #[arg(long)]
        out_dir: Option<String>,
    },
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run_from<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn resolve(common: &Common, flags: &[(&str, &Option<String>)]) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::new(),
    };
    for pair in &common.set {
        cfg.set_pair(pair)?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

/// Runs a parsed command. `Ok(false)` means it ran but its check failed.
pub fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            common,
            train_dir,
            out_dir,
            scale,
            steps,
            batch,
            seed,
            resume,
        } => {
            let cfg = resolve(
                &common,
                &[
                    ("train_dir", &train_dir),
                    ("out_dir", &out_dir),
                    ("scale", &scale),
                    ("steps", &steps),
                    ("batch", &batch),
                    ("seed", &seed),
                    ("resume", &resume),
                ],
            )?;
            cmd_train(&cfg)
        }
        Command::Eval {
            common,
            checkpoint,
            test_dir,
            out_dir,
            scale,
            bicubic_only,
        } => {
            let only = bicubic_only.then(|| "true".to_string());
            let cfg = resolve(
                &common,
                &[
                    ("checkpoint", &checkpoint),
                    ("test_dir", &test_dir),
                    ("out_dir", &out_dir),
                    ("scale", &scale),
                    ("bicubic_only", &only),
                ],
            )?;
            cmd_eval(&cfg)
        }
        Command::Infer {
            common,
            checkpoint,
            input,
            output,
        } => {
            let cfg = resolve(
                &common,
                &[("checkpoint", &checkpoint), ("input", &input), ("output", &output)],
            )?;
            cmd_infer(&cfg)
        }
        Command::Degrade {
            common,
            hr_dir,
            out_dir,
            scale,
        } => {
            let cfg = resolve(&common, &[("hr_dir", &hr_dir), ("out_dir", &out_dir), ("scale", &scale)])?;
            cmd_degrade(&cfg)
        }
        Command::CountParams { common, scale, variant } => {
            let cfg = resolve(&common, &[("scale", &scale), ("variant", &variant)])?;
            cmd_count_params(&cfg)
        }
        Command::CountFlops {
            common,
            scale,
            variant,
            lr_size,
        } => {
            let cfg = resolve(&common, &[("scale", &scale), ("variant", &variant), ("lr_size", &lr_size)])?;
            cmd_count_flops(&cfg)
        }
        Command::Gradcheck { common, routing, seed } => {
            let cfg = resolve(&common, &[("routing", &routing), ("seed", &seed)])?;
            cmd_gradcheck(&cfg)
        }
        Command::Bench {
            common,
            checkpoint,
            sizes,
            runs,
            out_dir,
        } => {
            let cfg = resolve(
                &common,
                &[
                    ("checkpoint", &checkpoint),
                    ("sizes", &sizes),
                    ("runs", &runs),
                    ("out_dir", &out_dir),
                ],
            )?;
            cmd_bench(&cfg)
        }
    }
}

pub fn model_config(cfg: &RunConfig) -> Result<ModelConfig> {
    let mc = ModelConfig {
        scale: cfg.get("scale")?,
        width: cfg.get("width")?,
        in_channels: 3,
        gate_threshold: cfg.get("gate_threshold")?,
        gate_hidden: cfg.get("gate_hidden")?,
        variant: cfg.get::<Variant>("variant")?,
        gate_train_mode: cfg.get::<GateTrainMode>("gate_train_mode")?,
    };
    mc.validate()?;
    Ok(mc)
}

pub fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let tc = TrainConfig {
        model: model_config(cfg)?,
        train_dir: cfg.require_path("train_dir")?,
        lr_dir: cfg.path("lr_dir")?,
        out_dir: cfg.require_path("out_dir")?,
        steps: cfg.get("steps")?,
        batch: cfg.get("batch")?,
        patch: cfg.get("patch")?,
        schedule: LrSchedule {
            initial: cfg.get("lr")?,
            half_every: cfg.get("lr_half_every")?,
        },
        seed: cfg.get("seed")?,
        checkpoint_every: cfg.get("checkpoint_every")?,
        log_every: cfg.get("log_every")?,
        resume: cfg.path("resume")?,
    };
    tc.validate()?;
    Ok(tc)
}

fn write_config_into(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    cfg.write_resolved(dir.join("config.txt"))
}

fn cmd_train(cfg: &RunConfig) -> Result<bool> {
    let tc = train_config(cfg)?;
    write_config_into(cfg, &tc.out_dir)?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)) {
        log::warn!("cannot install the interrupt handler: {e}");
    }
    let outcome = train::train::<f32>(&tc, Some(&stop))?;
    if outcome.interrupted {
        log::warn!("interrupted at step {}", outcome.steps_done);
    }
    println!(
        "trained to step {}; checkpoint {}",
        outcome.steps_done,
        outcome.final_checkpoint.display()
    );
    Ok(true)
}

/// Loads a checkpoint and checks it against an explicitly given scale.
fn load_checkpoint(cfg: &RunConfig) -> Result<DsrNet<f32>> {
    let path = cfg.require_path("checkpoint")?;
    let model = DsrNet::<f32>::load(&path)?;
    if cfg.is_set("scale") {
        let want: usize = cfg.get("scale")?;
        if want != model.config().scale {
            return Err(Error::Config(format!(
                "scale {want} given but {} is a x{} model",
                path.display(),
                model.config().scale
            )));
        }
    }
    Ok(model)
}

fn cmd_eval(cfg: &RunConfig) -> Result<bool> {
    let bicubic_only = cfg.get_bool("bicubic_only")?;
    let model = if bicubic_only { None } else { Some(load_checkpoint(cfg)?) };
    let scale = match &model {
        Some(m) => m.config().scale,
        None => cfg.get("scale")?,
    };
    let shave = cfg.get_opt::<usize>("shave")?.unwrap_or(scale);
    let test_dir = cfg.require_path("test_dir")?;
    let lr_dir = cfg.path("lr_dir")?;
    let pairs = data::make_pairs(&test_dir, scale, lr_dir.as_deref())?;
    let report = train::evaluate_pairs(model.as_ref(), &pairs, shave)?;
    print!("{}", report.to_table());
    if let Some(out) = cfg.path("out_dir")? {
        write_config_into(cfg, &out)?;
        report.write_csv(out.join("report.csv"))?;
        std::fs::write(out.join("report.txt"), report.to_table())?;
    }
    Ok(true)
}

fn cmd_infer(cfg: &RunConfig) -> Result<bool> {
    let model = load_checkpoint(cfg)?;
    let input = cfg.require_path("input")?;
    let output = cfg.require_path("output")?;
    let mut lr = data::load_png(&input)?;
    if lr.channels() == 1 {
        lr = lr.gray_to_rgb();
    }
    let start = Instant::now();
    let (sr, gate) = train::super_resolve(&model, &lr)?;
    let elapsed = start.elapsed();
    match gate.as_ref().and_then(|g| g.probs.first().zip(g.use_sdg.first())) {
        Some((p, routed)) => log::info!(
            "gate p = [{:.4}, {:.4}]; {}",
            p[0],
            p[1],
            if *routed { "SDG used" } else { "SDG skipped" }
        ),
        None => log::info!("variant has no gate"),
    }
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    data::save_png(&sr, &output)?;
    cfg.write_resolved(output.with_extension("config.txt"))?;
    println!(
        "{} ({}x{}) -> {} ({}x{}) in {:.1} ms",
        input.display(),
        lr.width(),
        lr.height(),
        output.display(),
        sr.width(),
        sr.height(),
        elapsed.as_secs_f64() * 1e3
    );
    Ok(true)
}

fn resize_options(cfg: &RunConfig) -> Result<ResizeOptions> {
    let boundary = match cfg.raw("boundary") {
        Some("clamp") | None => Boundary::Clamp,
        Some("symmetric") => Boundary::Symmetric,
        Some(other) => return Err(Error::Config(format!("boundary {other:?} is not clamp or symmetric"))),
    };
    Ok(ResizeOptions {
        antialias: true,
        boundary,
    })
}

fn cmd_degrade(cfg: &RunConfig) -> Result<bool> {
    let hr_dir = cfg.require_path("hr_dir")?;
    let out = cfg.require_path("out_dir")?;
    let scale: usize = cfg.get("scale")?;
    if scale == 0 {
        return Err(Error::Config("scale must be positive".into()));
    }
    let opts = resize_options(cfg)?;
    let hr_out = out.join("HR");
    let lr_out = out.join(format!("LR_x{scale}"));
    std::fs::create_dir_all(&hr_out)?;
    std::fs::create_dir_all(&lr_out)?;
    let mut rows = Vec::new();
    for path in data::list_pngs(&hr_dir)? {
        let name = path.file_name().map(PathBuf::from).unwrap_or_default();
        let mut img = data::load_png(&path)?;
        if img.channels() == 1 {
            img = img.gray_to_rgb();
        }
        let (hr, lr) = data::degrade(&img, scale, opts)?;
        data::save_png(&hr, hr_out.join(&name))?;
        data::save_png(&lr, lr_out.join(&name))?;
        rows.push(ManifestRow {
            hr_path: hr_out.join(&name),
            lr_path: lr_out.join(&name),
            scale,
        });
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("no PNG images in {}", hr_dir.display())));
    }
    data::write_manifest(out.join("manifest.csv"), &rows)?;
    write_config_into(cfg, &out)?;
    println!("wrote {} pairs to {}", rows.len(), out.display());
    Ok(true)
}

fn counting_model(cfg: &RunConfig) -> Result<DsrNet<f32>> {
    DsrNet::build(model_config(cfg)?, &mut Rng::new(0))
}

fn cmd_count_params(cfg: &RunConfig) -> Result<bool> {
    let model = counting_model(cfg)?;
    let r = model.count_params();
    println!("{:<6} {:>5} {:>3} {:>10}", "block", "conv", "fc", "params");
    for b in &r.blocks {
        println!("{:<6} {:>5} {:>3} {:>10}", b.block.name(), b.conv_layers, b.fc_layers, b.params);
    }
    println!("total {:>21}", r.total);
    println!("total without SDG {:>9}", r.total_without_sdg);
    Ok(true)
}

fn cmd_count_flops(cfg: &RunConfig) -> Result<bool> {
    let model = counting_model(cfg)?;
    let n: usize = cfg.get("lr_size")?;
    let r = model.count_macs(n, n);
    println!("LR {}x{}, x{}", r.lr_height, r.lr_width, model.config().scale);
    println!("{:<6} {:>16}", "block", "MACs");
    for (b, macs) in &r.blocks {
        println!("{:<6} {:>16}", b.name(), macs);
    }
    println!("routed total  {:>16} ({:.2} G)", r.routed_total, r.routed_total as f64 / 1e9);
    println!("skipped total {:>16} ({:.2} G)", r.skipped_total, r.skipped_total as f64 / 1e9);
    println!("saved by skipping SDG {:>8} ({:.2} G)", r.sdg, r.sdg as f64 / 1e9);
    Ok(true)
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<bool> {
    let states: &[bool] = match cfg.raw("routing") {
        Some("both") | None => &[true, false],
        Some("routed") => &[true],
        Some("skipped") => &[false],
        Some(other) => return Err(Error::Config(format!("routing {other:?} is not routed, skipped or both"))),
    };
    let tolerance: f64 = cfg.get("tolerance")?;
    let mut ok = true;
    for &routed in states {
        let setup = GradCheckSetup {
            eps: cfg.get("eps")?,
            seed: cfg.get("seed")?,
            kink_margin: cfg.get("kink_margin")?,
            routed,
            ..GradCheckSetup::default()
        };
        let start = Instant::now();
        let r = train::model_grad_check(setup)?;
        let pass = r.report.max_rel_error < tolerance;
        ok &= pass;
        println!(
            "{:<8} max rel error {:.3e} at {}[{}] over {} params (seed {}, {:.1} s) {}",
            if routed { "routed" } else { "skipped" },
            r.report.max_rel_error,
            r.report.worst_layer,
            r.report.worst_index,
            r.report.checked,
            r.seed,
            start.elapsed().as_secs_f64(),
            if pass { "PASS" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn cmd_bench(cfg: &RunConfig) -> Result<bool> {
    let model = match cfg.path("checkpoint")? {
        Some(_) => load_checkpoint(cfg)?,
        None => DsrNet::build(model_config(cfg)?, &mut Rng::named(cfg.get("seed")?, "init"))?,
    };
    let sizes: Vec<usize> = cfg.get_list("sizes")?;
    if sizes.is_empty() {
        return Err(Error::Config("sizes is empty".into()));
    }
    let runs: usize = cfg.get("runs")?;
    let warmup: usize = cfg.get("warmup")?;
    let seed: u64 = cfg.get("seed")?;
    let mut rows: Vec<TimingResult> = Vec::new();
    for &n in &sizes {
        rows.push(metrics::time_inference(&model, n, runs, warmup, seed)?);
    }
    print!("{}", metrics::timing_table(&rows));
    if let Some(out) = cfg.path("out_dir")? {
        write_config_into(cfg, &out)?;
        let mut report = metrics::EvalReport::new(model.config().scale);
        report.timing = rows;
        report.write_timing_csv(out.join("timing.csv"))?;
    }
    Ok(true)
}
