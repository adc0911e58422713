//! Command-line front end: subcommands over a run directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{parse_config, RunConfig};
use crate::data::{
    downsample, make_windows, read_dataset, read_sequence, split_every, synth_generate, window_split, write_dataset,
    MotionSequence, SampleWindow,
};
use crate::error::{Error, Result};
use crate::eval::{config_hash, emit_report, evaluate, linear_probe, predict_windows};
use crate::masking::{build_mask, joint_velocity};
use crate::model::Model;
use crate::training::{load_checkpoint, save_checkpoint, Checkpoint, StepStats, Trainer};

pub const PRETRAIN_CKPT: &str = "pretrain.mckp";
pub const FINETUNE_CKPT: &str = "finetune.mckp";
pub const LOG_FILE: &str = "train.log";

#[derive(Debug, Parser)]
#[command(
    name = "mrl",
    version,
    about = "Masked motion pretraining and skeleton motion prediction"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Checkpoint to start from or evaluate.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory (overrides `data.dir`).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Single MSEQ file for `mask-dump`.
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth,
    /// Masked (or denoising) pretraining.
    Pretrain,
    /// Train future prediction, optionally from a checkpoint.
    Finetune,
    /// Score a checkpoint on the held-out split.
    Eval,
    /// Linear probe on pooled features of a checkpoint.
    Probe,
    /// Write the velocity mask of one past window as CSV.
    MaskDump,
}

/// Result of the `probe` subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub shuffled_accuracy: f64,
    pub chance: f64,
    pub samples: usize,
}

/// One row of the `mask-dump` CSV. Frames are 1-based; frame 1 has no velocity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRow {
    pub frame: usize,
    pub joint: usize,
    pub velocity: Option<f32>,
    pub masked: u8,
}

/// Resolved configuration and paths for one invocation.
pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
}

impl Context {
    pub fn new(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(path) => parse_config(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &common.data {
            cfg.data.dir = Some(dir.clone());
        }
        let out = common
            .out
            .clone()
            .or_else(|| cfg.out.clone())
            .unwrap_or_else(|| PathBuf::from("run"));
        Ok(Self {
            cfg,
            out,
            checkpoint: common.checkpoint.clone(),
            input: common.input.clone(),
        })
    }

    fn create_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))
    }

    fn dataset(&self) -> Result<Vec<MotionSequence>> {
        let dir = self.cfg.data.dir.as_ref().ok_or_else(|| Error::Config {
            key: "data.dir".into(),
            message: "no dataset given; set data.dir or pass --data".into(),
        })?;
        let seqs = read_dataset(dir)?;
        if seqs.is_empty() {
            return Err(Error::Invalid(format!("{}: dataset is empty", dir.display())));
        }
        Ok(seqs)
    }

    /// Train windows and held-out windows.
    pub fn windows(&self) -> Result<(Vec<SampleWindow>, Vec<SampleWindow>)> {
        let d = &self.cfg.data;
        let seqs = self.dataset()?;
        let (train, test) = split_every(&seqs, d.test_every);
        let cut =
            |s: &[MotionSequence], stride| make_windows(s, d.fps, d.past_frames, d.future_frames, stride, d.root());
        Ok((cut(&train, d.stride)?, cut(&test, d.eval_stride())?))
    }

    fn joint_shape(windows: &[SampleWindow]) -> Result<(usize, usize)> {
        let w = windows
            .first()
            .ok_or_else(|| Error::Invalid("dataset yields no windows for the configured past/future lengths".into()))?;
        let (_, j, k) = w.past.dim();
        Ok((j, k))
    }

    fn checkpoint_or(&self, default: &str) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join(default))
    }

    fn config_value(&self) -> serde_json::Value {
        serde_json::to_value(&self.cfg).expect("config serializes")
    }

    fn write_config(&self) -> Result<()> {
        let path = self.out.join("config.json");
        fs::write(&path, self.cfg.to_json()).map_err(|e| Error::io(&path, e))
    }
}

/// Appends `step=<n> lr=<v> loss=<v>` lines to the run log.
struct StepLog {
    file: fs::File,
    path: PathBuf,
    error: Option<std::io::Error>,
}

impl StepLog {
    fn create(path: PathBuf, stage: &str) -> Result<Self> {
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let stamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        writeln!(file, "# {stage} started unix={stamp}").map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            file,
            path,
            error: None,
        })
    }

    fn record(&mut self, s: &StepStats) {
        let line = format!("step={} lr={:.6e} loss={:.6e}", s.step, s.lr, s.loss);
        log::info!("{line}");
        if self.error.is_none() {
            if let Err(e) = writeln!(self.file, "{line}") {
                self.error = Some(e);
            }
        }
    }

    fn finish(self) -> Result<()> {
        match self.error {
            Some(e) => Err(Error::io(&self.path, e)),
            None => Ok(()),
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let ctx = Context::new(&cli.common)?;
    match cli.command {
        Command::Synth => synth(&ctx),
        Command::Pretrain => pretrain(&ctx).map(|_| ()),
        Command::Finetune => finetune(&ctx).map(|_| ()),
        Command::Eval => eval(&ctx).map(|_| ()),
        Command::Probe => probe(&ctx).map(|_| ()),
        Command::MaskDump => mask_dump(&ctx).map(|_| ()),
    }
}

pub fn synth(ctx: &Context) -> Result<()> {
    let s = &ctx.cfg.data.synth;
    let seqs = synth_generate(
        &s.skeleton.spec(),
        s.classes,
        s.per_class,
        s.frames,
        s.fps,
        ctx.cfg.seed,
    )?;
    write_dataset(&ctx.out, &seqs)?;
    log::info!("wrote {} sequences to {}", seqs.len(), ctx.out.display());
    Ok(())
}

pub fn pretrain(ctx: &Context) -> Result<Checkpoint> {
    let (train, _) = ctx.windows()?;
    let (joints, dims) = Context::joint_shape(&train)?;
    let cfg = &ctx.cfg;
    let model = Model::<f32>::new(cfg.model_config_with(joints, dims), cfg.seed)?;
    ctx.create_out()?;
    ctx.write_config()?;
    let mut trainer = Trainer::new(model, cfg.pretrain_stage(), cfg.seed)?;
    let mut log = StepLog::create(ctx.out.join(LOG_FILE), "pretrain")?;
    trainer.run_pretrain(&train, &cfg.pretrain_options(), |s| log.record(s))?;
    log.finish()?;
    let ckpt = Checkpoint {
        model: trainer.model,
        optimizer: trainer.optimizer,
        step: trainer.step,
        seed: cfg.seed,
        run_config: ctx.config_value(),
    };
    save_checkpoint(&ctx.out.join(PRETRAIN_CKPT), &ckpt)?;
    Ok(ckpt)
}

pub fn finetune(ctx: &Context) -> Result<Checkpoint> {
    let (train, _) = ctx.windows()?;
    let (joints, dims) = Context::joint_shape(&train)?;
    let cfg = &ctx.cfg;
    let model_cfg = cfg.model_config_with(joints, dims);
    let model = match &ctx.checkpoint {
        Some(path) => load_checkpoint(path, Some(&model_cfg))?.model,
        None => Model::<f32>::new(model_cfg, cfg.seed)?,
    };
    ctx.create_out()?;
    ctx.write_config()?;
    let mut trainer = Trainer::new(model, cfg.finetune_stage(), cfg.seed)?;
    let mut log = StepLog::create(ctx.out.join(LOG_FILE), "finetune")?;
    trainer.run_finetune(&train, &cfg.finetune_options(), |s| log.record(s))?;
    log.finish()?;
    let ckpt = Checkpoint {
        model: trainer.model,
        optimizer: trainer.optimizer,
        step: trainer.step,
        seed: cfg.seed,
        run_config: ctx.config_value(),
    };
    save_checkpoint(&ctx.out.join(FINETUNE_CKPT), &ckpt)?;
    Ok(ckpt)
}

fn labelled(windows: &[SampleWindow], feats: Vec<Vec<f32>>) -> (Vec<Vec<f32>>, Vec<i32>) {
    windows
        .iter()
        .zip(feats)
        .filter_map(|(w, f)| w.label.map(|l| (f, l)))
        .unzip()
}

pub fn eval(ctx: &Context) -> Result<crate::eval::EvalReport> {
    let (_, test) = ctx.windows()?;
    let (joints, dims) = Context::joint_shape(&test)?;
    let cfg = &ctx.cfg;
    let path = ctx.checkpoint_or(FINETUNE_CKPT);
    let model = load_checkpoint(&path, Some(&cfg.model_config_with(joints, dims)))?.model;
    let mut report = evaluate(&model, &test, &cfg.eval.horizons_ms, cfg.data.fps)?;
    if cfg.eval.probe {
        let (_, feats) = predict_windows(&model, &test)?;
        let (x, y) = labelled(&test, feats);
        report.probe_accuracy = match linear_probe(&x, &y, cfg.eval.probe_split, cfg.seed) {
            Ok(acc) => Some(acc),
            Err(e) => {
                log::warn!("probe skipped: {e}");
                None
            }
        };
    }
    report.config_hash = config_hash(cfg.to_json().as_bytes());
    ctx.create_out()?;
    emit_report(&report, &ctx.out)?;
    Ok(report)
}

pub fn probe(ctx: &Context) -> Result<ProbeReport> {
    let (train, test) = ctx.windows()?;
    let windows: Vec<SampleWindow> = train.into_iter().chain(test).collect();
    let (joints, dims) = Context::joint_shape(&windows)?;
    let cfg = &ctx.cfg;
    let path = ctx.checkpoint_or(PRETRAIN_CKPT);
    let model = load_checkpoint(&path, Some(&cfg.model_config_with(joints, dims)))?.model;
    let (_, feats) = predict_windows(&model, &windows)?;
    let (x, y) = labelled(&windows, feats);
    let accuracy = linear_probe(&x, &y, cfg.eval.probe_split, cfg.seed)?;
    let mut shuffled = y.clone();
    {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed));
    }
    let shuffled_accuracy = linear_probe(&x, &shuffled, cfg.eval.probe_split, cfg.seed)?;
    let mut classes = y.clone();
    classes.sort_unstable();
    classes.dedup();
    let report = ProbeReport {
        accuracy,
        shuffled_accuracy,
        chance: 1.0 / classes.len() as f64,
        samples: x.len(),
    };
    ctx.create_out()?;
    let path = ctx.out.join("probe.json");
    fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// Mask rows for the first past window of the input sequence.
pub fn mask_dump(ctx: &Context) -> Result<Vec<MaskRow>> {
    let cfg = &ctx.cfg;
    let seq = match &ctx.input {
        Some(path) => read_sequence(path)?,
        None => ctx.dataset()?.swap_remove(0),
    };
    let seq = downsample(&seq, cfg.data.fps)?;
    let window = window_split(&seq, cfg.data.past_frames, cfg.data.future_frames, 1)?
        .into_iter()
        .next()
        .ok_or_else(|| {
            Error::Invalid(format!(
                "sequence of {} frames is too short for one window",
                seq.frames()
            ))
        })?;
    let vel = joint_velocity(&window.past)?;
    let mut plan = build_mask(&vel, cfg.mask.rate, cfg.mask.strategy, cfg.seed)?;
    if cfg.mask.invert {
        plan = plan.inverted();
    }
    let (frames, joints) = plan.masked.dim();
    let rows: Vec<MaskRow> = (0..frames)
        .flat_map(|t| (0..joints).map(move |j| (t, j)))
        .map(|(t, j)| MaskRow {
            frame: t + 1,
            joint: j,
            velocity: (t > 0).then(|| plan.velocity_mag[[t - 1, j]]),
            masked: plan.masked[[t, j]] as u8,
        })
        .collect();
    ctx.create_out()?;
    write_mask_csv(&ctx.out.join("mask.csv"), &rows)?;
    Ok(rows)
}

fn write_mask_csv(path: &Path, rows: &[MaskRow]) -> Result<()> {
    let err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Invalid(format!("{}: {other:?}", path.display())),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for row in rows {
        w.serialize(row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
