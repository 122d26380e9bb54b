//! `drlt` command line: synth | train | track | eval | gradcheck.
//!
//! Every command reads an optional TOML run config, applies flag overrides,
//! and writes the fully resolved config next to its outputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::env::{generate_sequence, load_sequence, split_train_eval, write_sequence, Manifest, ManifestEntry, SequenceData, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{
    auc, default_overlap_thresholds, default_pixel_thresholds, precision_at, precision_plot, success_plot, track_sequence, Aligned,
    Curve,
};
use crate::geometry::{center_error_px, iou, BBox};
use crate::gradcheck::{self, GradcheckOptions};
use crate::network::Dims;
use crate::trainer::{BaselineMode, EpochStats, ReturnMode, Trainer, TrainerConfig};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const MANIFEST: &str = "manifest.json";
pub const TRAINING_LOG: &str = "training_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.bin";
pub const TRACK_SUMMARY: &str = "track_summary.json";
pub const EVAL_SUMMARY: &str = "summary.json";

pub const TRAINING_LOG_HEADER: &str = "epoch,lr,reward,mean_return,max_param_delta,wall_clock_seconds";
pub const RESULTS_HEADER: &str = "frame,cx,cy,w,h,iou,center_error_px";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub encoding: usize,
    pub hidden: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            encoding: 32,
            hidden: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Sequence manifest; when absent, `count` synthetic sequences are generated.
    pub manifest: Option<PathBuf>,
    pub count: usize,
    /// Evaluate on the frames after the training prefix only.
    pub strict_heldout: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            count: 20,
            strict_heldout: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Leave the supervised first frame out of the metrics.
    pub exclude_first_frame: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Periodic checkpoint interval in epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/default"),
            checkpoint_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub trainer: TrainerConfig,
    pub network: NetworkConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn dims(&self, feature: usize) -> Dims {
        Dims::new(feature, self.network.encoding, self.network.hidden)
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        if self.data.manifest.is_none() {
            self.synth.validate()?;
            if self.data.count == 0 {
                return Err(Error::config("data.count", "must be >= 1"));
            }
        }
        self.dims(1).validate().map_err(|e| match e {
            Error::Config { field, reason } => {
                Error::config(format!("network.{}", field.trim_end_matches("_dim")), reason)
            }
            other => other,
        })
    }

    /// Creates the output directory and records this config in it.
    pub fn prepare_output(&self) -> Result<PathBuf> {
        let dir = self.output.dir.clone();
        fs::create_dir_all(&dir).map_err(|_| {
            Error::config("output.dir", format!("cannot create {}", dir.display()))
        })?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_toml())
            .map_err(|_| Error::config("output.dir", format!("{} is not writable", dir.display())))?;
        Ok(dir)
    }

    /// Training/evaluation sequences: the manifest if set, otherwise synthetic.
    pub fn dataset(&self) -> Result<Vec<SequenceData>> {
        match &self.data.manifest {
            Some(path) => {
                let manifest = Manifest::read(path)?;
                manifest.load_all(path.parent().unwrap_or(Path::new(".")))
            }
            None => synthetic_dataset(&self.synth, self.data.count),
        }
    }
}

/// `count` sequences seeded `synth.seed, synth.seed + 1, ...`.
pub fn synthetic_dataset(synth: &SynthConfig, count: usize) -> Result<Vec<SequenceData>> {
    (0..count as u64)
        .map(|i| generate_sequence(synth, synth.seed.wrapping_add(i)))
        .collect()
}

#[derive(Debug, Parser)]
#[command(name = "drlt", version, about = "Recurrent REINFORCE tracker: data synthesis, training, tracking, evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML run config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for both data synthesis and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Generate synthetic sequences and a manifest.
    Synth(SynthArgs),
    /// Train on the first third of every sequence.
    Train(TrainArgs),
    /// Run a checkpoint over sequences and write per-frame results.
    Track(TrackArgs),
    /// Compute success/precision curves from tracking results.
    Eval(EvalArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub velocity_max: Option<f64>,
    #[arg(long)]
    pub distractors: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// Sequence manifest (defaults to synthetic data).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr_initial: Option<f64>,
    #[arg(long)]
    pub lr_final: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub chunk_len: Option<usize>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub reward_switch_epoch: Option<usize>,
    /// per-step | reward-to-go | total
    #[arg(long)]
    pub return_mode: Option<String>,
    /// batch-mean | leave-one-out
    #[arg(long)]
    pub baseline: Option<String>,
    /// Reset the LSTM state at every chunk.
    #[arg(long)]
    pub no_carryover: bool,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub encoding: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub synth: SynthArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Single sequence feature file (with --gt, --img-w, --img-h).
    #[arg(long, requires_all = ["gt", "img_w", "img_h"])]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub img_w: Option<f64>,
    #[arg(long)]
    pub img_h: Option<f64>,
    /// Track only the frames after the training prefix.
    #[arg(long)]
    pub strict_heldout: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvalArgs {
    /// Directory with per-sequence result CSVs.
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub exclude_first_frame: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Network dims as D,E,H.
    #[arg(long, default_value = "4,6,8")]
    pub dims: String,
    #[arg(long, default_value_t = 3)]
    pub chunk_len: usize,
    /// Perturb the analytic gradient (the check must then fail).
    #[arg(long)]
    pub corrupt: bool,
}

fn resolve(global: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.synth.seed = seed;
        cfg.trainer.seed = seed;
    }
    if let Some(out) = &global.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn apply_synth_args(cfg: &mut RunConfig, a: &SynthArgs) {
    if let Some(v) = a.count {
        cfg.data.count = v;
    }
    if let Some(v) = a.seq_len {
        cfg.synth.seq_len = v;
    }
    if let Some(v) = a.grid {
        cfg.synth.grid = v;
    }
    if let Some(v) = a.noise_std {
        cfg.synth.noise_std = v;
    }
    if let Some(v) = a.velocity_max {
        cfg.synth.velocity_max = v;
    }
    if let Some(v) = a.distractors {
        cfg.synth.distractors = v;
    }
}

fn apply_train_args(cfg: &mut RunConfig, a: &TrainArgs) -> Result<()> {
    apply_synth_args(cfg, &a.synth);
    if a.manifest.is_some() {
        cfg.data.manifest = a.manifest.clone();
    }
    let t = &mut cfg.trainer;
    if let Some(v) = a.epochs {
        t.max_epochs = v;
    }
    if let Some(v) = a.lr_initial {
        t.lr_initial = v;
    }
    if let Some(v) = a.lr_final {
        t.lr_final = v;
    }
    if let Some(v) = a.sigma {
        t.sigma = v;
    }
    if let Some(v) = a.chunk_len {
        t.chunk_len = v;
    }
    if let Some(v) = a.episodes {
        t.episodes = v;
    }
    if let Some(v) = a.reward_switch_epoch {
        t.reward_switch_epoch = v;
    }
    if let Some(v) = &a.return_mode {
        t.return_mode = v.parse::<ReturnMode>()?;
    }
    if let Some(v) = &a.baseline {
        t.baseline = v.parse::<BaselineMode>()?;
    }
    if a.no_carryover {
        t.state_carryover = false;
    }
    if let Some(v) = a.patience {
        t.patience = v;
    }
    if let Some(v) = a.hidden {
        cfg.network.hidden = v;
    }
    if let Some(v) = a.encoding {
        cfg.network.encoding = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.output.checkpoint_every = v;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve(&cli.global)?;
    match cli.command {
        Command::Synth(a) => {
            apply_synth_args(&mut cfg, &a);
            cmd_synth(&cfg).map(|_| ())
        }
        Command::Train(a) => {
            apply_train_args(&mut cfg, &a)?;
            cmd_train(&cfg, a.resume.as_deref()).map(|_| ())
        }
        Command::Track(a) => {
            if a.manifest.is_some() {
                cfg.data.manifest = a.manifest.clone();
            }
            if a.strict_heldout {
                cfg.data.strict_heldout = true;
            }
            let single = match (&a.features, &a.gt, a.img_w, a.img_h) {
                (Some(f), Some(g), Some(w), Some(h)) => Some(load_sequence(f, g, w, h)?),
                _ => None,
            };
            cmd_track(&cfg, &a.checkpoint, single).map(|_| ())
        }
        Command::Eval(a) => {
            if a.manifest.is_some() {
                cfg.data.manifest = a.manifest.clone();
            }
            if a.exclude_first_frame {
                cfg.eval.exclude_first_frame = true;
            }
            cmd_eval(&cfg, &a.results).map(|_| ())
        }
        Command::Gradcheck(a) => {
            let opts = GradcheckOptions {
                dims: parse_dims(&a.dims)?,
                chunk_len: a.chunk_len,
                seed: cli.global.seed.unwrap_or(0),
                corrupt: a.corrupt,
                ..GradcheckOptions::default()
            };
            let report = cmd_gradcheck(&opts)?;
            if report.passed {
                Ok(())
            } else {
                Err(Error::Verification("analytic and numeric gradients disagree".into()))
            }
        }
    }
}

fn parse_dims(s: &str) -> Result<Dims> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::config("dims", format!("expected D,E,H, got `{s}`")))?;
    match parts[..] {
        [d, e, h] => {
            let dims = Dims::new(d, e, h);
            dims.validate()?;
            Ok(dims)
        }
        _ => Err(Error::config("dims", format!("expected D,E,H, got `{s}`"))),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes the synthetic dataset and its manifest; returns the manifest path.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.synth.validate()?;
    if cfg.data.count == 0 {
        return Err(Error::config("data.count", "must be >= 1"));
    }
    let out = cfg.prepare_output()?;
    let seq_dir = out.join("sequences");
    let mut entries = Vec::with_capacity(cfg.data.count);
    for seq in synthetic_dataset(&cfg.synth, cfg.data.count)? {
        write_sequence(&seq, &seq_dir)?;
        entries.push(ManifestEntry {
            name: seq.name.clone(),
            frames: seq.len(),
            dim: seq.feature_dim(),
            img_w: seq.img_w,
            img_h: seq.img_h,
            features: Path::new("sequences").join(format!("{}.features.txt", seq.name)),
            groundtruth: Path::new("sequences").join(format!("{}.gt.txt", seq.name)),
        });
    }
    let manifest = Manifest {
        feature_dim: cfg.synth.feature_dim(),
        sequences: entries,
    };
    let path = out.join(MANIFEST);
    manifest.write(&path)?;
    println!("wrote {} sequences to {}", manifest.sequences.len(), path.display());
    Ok(path)
}

pub fn training_log_row(s: &EpochStats) -> String {
    format!(
        "{},{},{},{},{},{:.6}",
        s.epoch,
        s.lr,
        s.reward.tag(),
        s.mean_return,
        s.max_param_delta,
        s.seconds
    )
}

/// Outcome of [`cmd_train`].
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub history: Vec<f64>,
    pub final_checkpoint: PathBuf,
}

/// Trains on the first third of every sequence; writes checkpoints and the epoch log.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = cfg.dataset()?;
    let first = data.first().ok_or_else(|| Error::Data("dataset is empty".into()))?;
    let dims = cfg.dims(first.feature_dim());
    let train: Vec<SequenceData> = data
        .iter()
        .map(|s| split_train_eval(s, false).map(|(t, _)| t))
        .collect::<Result<_>>()?;

    let out = cfg.prepare_output()?;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;

    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.params.dims != dims {
                return Err(Error::Data(format!(
                    "checkpoint dims {:?} do not match configured {:?}",
                    ckpt.params.dims, dims
                )));
            }
            Trainer::resume(ckpt, cfg.trainer.clone())?
        }
        None => Trainer::new(dims, cfg.trainer.clone())?,
    };
    let start_epoch = trainer.epoch;

    let log_path = out.join(TRAINING_LOG);
    let append = resume.is_some() && log_path.exists();
    let mut log = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    if !append {
        writeln!(log, "{TRAINING_LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;
    }

    let every = cfg.output.checkpoint_every;
    trainer.train_with(&train, |t, s| {
        writeln!(log, "{}", training_log_row(s)).map_err(|e| Error::io(&log_path, e))?;
        if t.epochs_since_best == 0 {
            t.checkpoint().save(&ckpt_dir.join("best.bin"))?;
        }
        if every > 0 && (s.epoch + 1) % every == 0 {
            t.checkpoint().save(&ckpt_dir.join(format!("epoch_{:05}.bin", s.epoch + 1)))?;
        }
        Ok(())
    })?;

    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&final_checkpoint)?;
    println!(
        "trained {} epochs ({} updates); final checkpoint {}",
        trainer.epoch - start_epoch,
        trainer.updates,
        final_checkpoint.display()
    );
    Ok(TrainSummary {
        epochs_run: trainer.epoch - start_epoch,
        history: trainer.history,
        final_checkpoint,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedSequence {
    pub name: String,
    pub frames: usize,
    /// Wall-clock inference speed.
    pub fps: f64,
}

fn results_csv(seq: &SequenceData, predictions: &[BBox], frame_offset: usize) -> String {
    let mut s = String::from(RESULTS_HEADER);
    s.push('\n');
    for (t, (p, g)) in predictions.iter().zip(&seq.ground_truth).enumerate() {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            t + frame_offset,
            p.cx,
            p.cy,
            p.w,
            p.h,
            iou(p, g),
            center_error_px(p, g, seq.img_w, seq.img_h)
        ));
    }
    s
}

/// Tracks each sequence; writes `results/<name>.csv` and a speed summary.
pub fn cmd_track(cfg: &RunConfig, checkpoint: &Path, single: Option<SequenceData>) -> Result<Vec<TrackedSequence>> {
    let params = Checkpoint::load(checkpoint)?.params;
    let data = match single {
        Some(seq) => vec![seq],
        None => cfg.dataset()?,
    };
    let out = cfg.prepare_output()?;
    let mut summary = Vec::with_capacity(data.len());
    for seq in &data {
        let (seq, offset) = if cfg.data.strict_heldout {
            let (_, tail) = split_train_eval(seq, true)?;
            (tail, seq.len() / 3)
        } else {
            (seq.clone(), 0)
        };
        let result = track_sequence(&params, &seq)?;
        write_file(
            &out.join("results").join(format!("{}.csv", seq.name)),
            results_csv(&seq, &result.predictions, offset),
        )?;
        summary.push(TrackedSequence {
            name: seq.name.clone(),
            frames: seq.len(),
            fps: result.fps,
        });
    }
    write_file(
        &out.join(TRACK_SUMMARY),
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    )?;
    for s in &summary {
        println!("{}: {} frames at {:.1} fps", s.name, s.frames, s.fps);
    }
    Ok(summary)
}

/// One row of a results CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResultRow {
    pub frame: usize,
    pub bbox: BBox,
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let perr = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut rows = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r').trim();
        if line.is_empty() || (idx == 0 && line.starts_with("frame")) {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 5 {
            return Err(perr(idx + 1, format!("expected at least 5 columns, found {}", cols.len())));
        }
        let frame = cols[0]
            .parse::<usize>()
            .map_err(|_| perr(idx + 1, format!("bad frame index `{}`", cols[0])))?;
        let mut v = [0.0; 4];
        for k in 0..4 {
            v[k] = cols[k + 1]
                .parse::<f64>()
                .map_err(|_| perr(idx + 1, format!("bad value `{}`", cols[k + 1])))?;
        }
        rows.push(ResultRow {
            frame,
            bbox: BBox::from_array(v),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub name: String,
    pub frames: usize,
    pub avg_overlap: f64,
    pub auc: f64,
    pub precision_at_20: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub auc: f64,
    pub precision_at_20: f64,
    pub frames: usize,
    pub sequences: Vec<SequenceMetrics>,
    /// Mean tracking speed from the results directory, if recorded.
    pub fps: Option<f64>,
}

fn curve_csv(c: &Curve) -> String {
    let mut s = String::from("threshold,value\n");
    for (t, v) in c.thresholds.iter().zip(&c.values) {
        s.push_str(&format!("{t},{v}\n"));
    }
    s
}

/// Scores `results/<name>.csv` files against the manifest's ground truth.
pub fn cmd_eval(cfg: &RunConfig, results_dir: &Path) -> Result<EvalSummary> {
    let data = cfg.dataset()?;
    let out = cfg.prepare_output()?;
    let overlap = default_overlap_thresholds();
    let pixels = default_pixel_thresholds();

    // (name, predictions, ground truth, img_w, img_h)
    type Scored = (String, Vec<BBox>, Vec<BBox>, f64, f64);
    let mut aligned: Vec<Scored> = Vec::with_capacity(data.len());
    for seq in &data {
        let path = results_dir.join(format!("{}.csv", seq.name));
        let rows = read_results(&path)?;
        let skip = usize::from(cfg.eval.exclude_first_frame);
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for row in rows.iter().skip(skip) {
            let g = seq.ground_truth.get(row.frame).ok_or_else(|| {
                Error::Data(format!(
                    "{}: frame {} beyond the {} ground-truth frames",
                    path.display(),
                    row.frame,
                    seq.len()
                ))
            })?;
            preds.push(row.bbox);
            gts.push(*g);
        }
        if preds.is_empty() {
            return Err(Error::Data(format!("{} has no frames to score", path.display())));
        }
        aligned.push((seq.name.clone(), preds, gts, seq.img_w, seq.img_h));
    }
    let runs: Vec<Aligned<'_>> = aligned
        .iter()
        .map(|(_, p, g, w, h)| Aligned {
            predictions: p,
            ground_truth: g,
            img_w: *w,
            img_h: *h,
        })
        .collect();

    let success = success_plot(&runs, &overlap)?;
    let precision = precision_plot(&runs, &pixels)?;
    write_file(&out.join("success.csv"), curve_csv(&success))?;
    write_file(&out.join("precision.csv"), curve_csv(&precision))?;

    let mut sequences = Vec::with_capacity(runs.len());
    for (entry, run) in aligned.iter().zip(&runs) {
        let s = success_plot(std::slice::from_ref(run), &overlap)?;
        let p = precision_plot(std::slice::from_ref(run), &pixels)?;
        write_file(&out.join("curves").join(format!("{}_success.csv", entry.0)), curve_csv(&s))?;
        write_file(&out.join("curves").join(format!("{}_precision.csv", entry.0)), curve_csv(&p))?;
        sequences.push(SequenceMetrics {
            name: entry.0.clone(),
            frames: run.predictions.len(),
            avg_overlap: crate::eval::avg_overlap(run)?,
            auc: auc(&s)?,
            precision_at_20: precision_at(&p, 20.0)?,
        });
    }

    let fps = fs::read_to_string(results_dir.join(TRACK_SUMMARY))
        .ok()
        .or_else(|| fs::read_to_string(results_dir.parent()?.join(TRACK_SUMMARY)).ok())
        .and_then(|t| serde_json::from_str::<Vec<TrackedSequence>>(&t).ok())
        .filter(|v| !v.is_empty())
        .map(|v| v.iter().map(|s| s.fps).sum::<f64>() / v.len() as f64);

    let summary = EvalSummary {
        auc: auc(&success)?,
        precision_at_20: precision_at(&precision, 20.0)?,
        frames: runs.iter().map(|r| r.predictions.len()).sum(),
        sequences,
        fps,
    };
    write_file(
        &out.join(EVAL_SUMMARY),
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    )?;
    println!(
        "AUC {:.4}  precision@20px {:.4}  over {} frames",
        summary.auc, summary.precision_at_20, summary.frames
    );
    Ok(summary)
}

pub fn cmd_gradcheck(opts: &GradcheckOptions) -> Result<gradcheck::GradcheckReport> {
    let report = gradcheck::run(opts)?;
    print!("{}", report.render());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = RunConfig::from_toml("[trainer]\nsigma = 0.05\n").unwrap();
        assert_eq!(partial.trainer.sigma, 0.05);
        assert_eq!(partial.trainer.chunk_len, 10);
    }

    #[test]
    fn unknown_and_invalid_fields_are_named() {
        let err = RunConfig::from_toml("[trainer]\nsigmaa = 0.05\n").unwrap_err();
        assert!(err.to_string().contains("sigmaa"), "{err}");
        assert_eq!(err.exit_code(), 1);
        let cfg = RunConfig::from_toml("[trainer]\nepisodes = 0\n").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("trainer.episodes"));
        let cfg = RunConfig::from_toml("[network]\nhidden = 2\n").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("network.hidden"));
        let cfg = RunConfig::from_toml("[synth]\ngrid = 2\n").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("synth.grid"));
    }

    #[test]
    fn dims_parsing() {
        assert_eq!(parse_dims("4,6,8").unwrap(), Dims::new(4, 6, 8));
        assert!(parse_dims("4,6").is_err());
        assert!(parse_dims("4,6,2").is_err());
        assert!(parse_dims("a,b,c").is_err());
    }

    #[test]
    fn flags_override_config() {
        let cli = Cli::try_parse_from([
            "drlt", "train", "--seed", "9", "--epochs", "3", "--return-mode", "total", "--no-carryover", "--count", "2",
        ])
        .unwrap();
        let mut cfg = resolve(&cli.global).unwrap();
        let Command::Train(a) = &cli.command else { panic!() };
        apply_train_args(&mut cfg, a).unwrap();
        assert_eq!(cfg.trainer.seed, 9);
        assert_eq!(cfg.synth.seed, 9);
        assert_eq!(cfg.trainer.max_epochs, 3);
        assert_eq!(cfg.trainer.return_mode, ReturnMode::Total);
        assert!(!cfg.trainer.state_carryover);
        assert_eq!(cfg.data.count, 2);
    }
}
