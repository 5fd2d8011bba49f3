//! Command implementations behind the `evtrack` binary.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use evtrack::checkpoint::{load_checkpoint, save_checkpoint};
use evtrack::config::{RunConfig, Variant};
use evtrack::datamodel::{generate_synthetic_sequence, load_sequence, pair_frame_with_events, save_sequence, SequenceRecord};
use evtrack::eval::{attribute_report, emit_plots, ope_evaluate, OpeResult};
use evtrack::tracker::{read_trajectory, run_sequences, write_timing, write_trajectory, Tracker};
use evtrack::trainer::{PreparedSequence, Trainer};
use evtrack::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "evtrack", version, about = "RGB-Event single object tracking on unaligned sensors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Track every sequence of a dataset with a checkpoint.
    Track(TrackArgs),
    /// One-pass evaluation of trajectory directories.
    Eval(EvalArgs),
    /// Render the stacked event frame of one frame as a PNG.
    StackPreview(PreviewArgs),
}

#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// TOML file with dotted or nested keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override, repeatable; applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(p) = &self.config {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            cfg.apply_toml(&text)?;
        }
        for s in &self.set {
            cfg.apply_override(s)?;
        }
        Ok(())
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        self.apply(&mut cfg)?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of sequences.
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    /// Seed of the first sequence; sequence i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Event sensor offset `dx,dy,dt` (pixels, pixels, microseconds).
    #[arg(long, value_name = "DX,DY,DT")]
    pub misalign: Option<String>,
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Run directory for the log, resolved config and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Shorthand for `train.epochs=1`, `train.steps_per_epoch=N`.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    pub force: bool,
    /// Overrides on top of the configuration stored in the checkpoint.
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Trajectory directory written by `track`; repeat to compare trackers.
    #[arg(long = "trajectories", required = true)]
    pub trajectories: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Attribute codes to report (all when omitted).
    #[arg(long, value_delimiter = ',')]
    pub attributes: Vec<String>,
    /// Accept trajectories produced under different configuration hashes.
    #[arg(long)]
    pub allow_mixed: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PreviewArgs {
    /// Sequence directory.
    #[arg(long)]
    pub sequence: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Track(a) => cmd_track(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::StackPreview(a) => cmd_stack_preview(&a),
    }
}

/// Refuses to write into an existing non-empty directory unless forced.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(Error::Argument(format!("{} exists and is not empty; pass --force to overwrite", dir.display())));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { location: path.display().to_string(), message: e.to_string() })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SynthManifest {
    pub config_hash: String,
    pub seed: u64,
    pub misalignment: (f64, f64, i64),
    pub sequences: Vec<SynthEntry>,
    pub synth: evtrack::datamodel::SynthConfig,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SynthEntry {
    pub name: String,
    pub seed: u64,
}

pub const MANIFEST: &str = "manifest.json";

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = a.config.resolve()?;
    if let Some(m) = &a.misalign {
        cfg.apply_override(&format!("synth.misalign=[{m}]"))?;
    }
    cfg.synth.validate()?;
    if a.n == 0 {
        return Err(Error::Argument("--n must be at least 1".into()));
    }
    prepare_out_dir(&a.out, a.force)?;
    let mut entries = Vec::with_capacity(a.n);
    for i in 0..a.n {
        let seed = a.seed + i as u64;
        let seq = generate_synthetic_sequence(&cfg.synth, seed)?;
        save_sequence(&seq, &a.out.join(&seq.name))?;
        entries.push(SynthEntry { name: seq.name, seed });
    }
    let m = cfg.synth.misalignment;
    let manifest = SynthManifest {
        config_hash: cfg.config_hash(),
        seed: a.seed,
        misalignment: (m.dx, m.dy, m.dt),
        sequences: entries,
        synth: cfg.synth.clone(),
    };
    write_json(&a.out.join(MANIFEST), &manifest)?;
    println!("wrote {} sequences to {}", a.n, a.out.display());
    Ok(())
}

/// Every subdirectory holding a `groundtruth.txt`, sorted by name.
pub fn load_dataset(dir: &Path) -> Result<Vec<SequenceRecord>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("groundtruth.txt").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Format(format!("{} contains no sequences", dir.display())));
    }
    dirs.iter().map(|d| load_sequence(d)).collect()
}

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.config.resolve()?;
    if let Some(v) = a.variant {
        cfg.model.variant = v;
    }
    if let Some(s) = a.steps {
        cfg.train.epochs = 1;
        cfg.train.steps_per_epoch = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let seqs = load_dataset(&a.dataset)?;
    for s in &seqs {
        s.check_integrity()?;
    }
    let prepared = seqs.iter().map(PreparedSequence::new).collect::<Result<Vec<_>>>()?;
    prepare_out_dir(&a.out, a.force)?;
    fs::write(a.out.join("config.toml"), cfg.to_toml()).map_err(|e| Error::io(a.out.join("config.toml"), e))?;

    let hash = cfg.config_hash();
    let variant = cfg.model.variant.as_str();
    let log_path = a.out.join(TRAIN_LOG);
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut trainer = Trainer::<f32>::new(cfg.clone())?;
    let total = cfg.train.total_steps();
    let spe = cfg.train.steps_per_epoch.max(1);
    let mut last = BTreeMap::new();
    for _ in 0..total {
        let batch = trainer.sample_batch(&prepared)?;
        let report = trainer.training_step(&batch)?;
        writeln!(log, "{}", report.to_json(variant, &hash)).map_err(|e| Error::io(&log_path, e))?;
        last = BTreeMap::from([("loss".to_string(), report.total)]);
        if trainer.step % spe == 0 && trainer.step < total {
            let p = a.out.join(format!("epoch_{:03}.ckpt", trainer.step / spe));
            save_checkpoint(&p, &trainer.model.params, Some(&trainer.optimizer), &cfg, trainer.step, trainer.epoch(), last.clone())?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let p = a.out.join(FINAL_CHECKPOINT);
    save_checkpoint(&p, &trainer.model.params, Some(&trainer.optimizer), &cfg, trainer.step, trainer.epoch(), last)?;
    println!("trained {variant} for {} steps; checkpoint {} (config {hash})", trainer.step, p.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrackManifest {
    pub config_hash: String,
    pub model_hash: String,
    pub variant: String,
    pub checkpoint: String,
    pub sequences: Vec<TrackedSequence>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrackedSequence {
    pub name: String,
    pub frames: usize,
}

pub fn cmd_track(a: &TrackArgs) -> Result<()> {
    let ck = load_checkpoint::<f32>(&a.checkpoint)?;
    let mut cfg = ck.config()?;
    a.config.apply(&mut cfg)?;
    cfg.validate()?;
    let model = ck.restore(&cfg)?;
    let seqs = load_dataset(&a.dataset)?;
    prepare_out_dir(&a.out, a.force)?;
    let tracker = Tracker::new(&model, &cfg.data, &cfg.track);
    let runs = run_sequences(&tracker, &seqs, a.workers);
    let mut tracked = Vec::with_capacity(seqs.len());
    for (seq, run) in seqs.iter().zip(runs) {
        let run = run?;
        write_trajectory(&a.out.join(format!("{}.txt", seq.name)), &run.trajectory)?;
        write_timing(&a.out.join(format!("{}.timing.csv", seq.name)), &run.timing)?;
        println!("{}: {:.2} fps with event stacking, {:.2} fps model only", seq.name, run.fps(true), run.fps(false));
        tracked.push(TrackedSequence { name: seq.name.clone(), frames: run.trajectory.len() });
    }
    let manifest = TrackManifest {
        config_hash: cfg.config_hash(),
        model_hash: cfg.model_hash(),
        variant: cfg.model.variant.as_str().to_string(),
        checkpoint: a.checkpoint.display().to_string(),
        sequences: tracked,
    };
    write_json(&a.out.join(MANIFEST), &manifest)?;
    println!("tracked {} sequences into {} (config {})", seqs.len(), a.out.display(), manifest.config_hash);
    Ok(())
}

/// Trajectories of one tracker directory, in dataset order.
pub fn load_trajectories(dir: &Path, seqs: &[SequenceRecord]) -> Result<Vec<Vec<evtrack::BoundingBox>>> {
    let missing: Vec<&str> =
        seqs.iter().filter(|s| !dir.join(format!("{}.txt", s.name)).is_file()).map(|s| s.name.as_str()).collect();
    if !missing.is_empty() {
        return Err(Error::Integrity(format!("{}: missing trajectories for {}", dir.display(), missing.join(", "))));
    }
    seqs.iter().map(|s| read_trajectory(&dir.join(format!("{}.txt", s.name)))).collect()
}

#[derive(Debug, Serialize)]
struct MetricSummary {
    frames: usize,
    pr: f64,
    npr: f64,
    sr: f64,
}

impl From<&OpeResult> for MetricSummary {
    fn from(r: &OpeResult) -> Self {
        Self { frames: r.frames, pr: r.pr_at_20, npr: r.npr, sr: r.sr_auc }
    }
}

#[derive(Debug, Serialize)]
struct TrackerReport {
    name: String,
    config_hash: String,
    overall: MetricSummary,
    attributes: BTreeMap<String, MetricSummary>,
    omitted_attributes: Vec<String>,
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let seqs = load_dataset(&a.dataset)?;
    let mut inputs = Vec::new();
    for dir in &a.trajectories {
        let manifest: TrackManifest = read_json(&dir.join(MANIFEST))?;
        let trajs = load_trajectories(dir, &seqs)?;
        inputs.push((dir, manifest, trajs));
    }
    let hashes: BTreeSet<&str> = inputs.iter().map(|(_, m, _)| m.config_hash.as_str()).collect();
    if hashes.len() > 1 && !a.allow_mixed {
        return Err(Error::Integrity(format!(
            "trajectories come from different configurations ({}); pass --allow-mixed to compare them",
            hashes.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    prepare_out_dir(&a.out, a.force)?;
    let mut entries = Vec::new();
    let mut reports = Vec::new();
    let mut names = BTreeSet::new();
    for (dir, manifest, trajs) in &inputs {
        let base = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "tracker".into());
        let mut name = base.clone();
        let mut k = 2;
        while !names.insert(name.clone()) {
            name = format!("{base}_{k}");
            k += 1;
        }
        let overall = ope_evaluate(trajs, &seqs)?;
        let attrs = attribute_report(trajs, &seqs, &a.attributes)?;
        println!("{name}: PR {:.4} NPR {:.4} SR {:.4} over {} frames", overall.pr_at_20, overall.npr, overall.sr_auc, overall.frames);
        if !attrs.omitted.is_empty() {
            let codes: Vec<String> = attrs.omitted.iter().map(|c| c.to_string()).collect();
            println!("  no sequence carries {}", codes.join(", "));
        }
        reports.push(TrackerReport {
            name: name.clone(),
            config_hash: manifest.config_hash.clone(),
            overall: (&overall).into(),
            attributes: attrs.results.iter().map(|(k, v)| (k.to_string(), v.into())).collect(),
            omitted_attributes: attrs.omitted.iter().map(|c| c.to_string()).collect(),
        });
        entries.push((name, overall));
    }
    emit_plots(&entries, &a.out)?;
    write_json(&a.out.join("report.json"), &reports)?;
    Ok(())
}

pub fn cmd_stack_preview(a: &PreviewArgs) -> Result<()> {
    let seq = load_sequence(&a.sequence)?;
    let pair = pair_frame_with_events(&seq, a.frame)?;
    pair.event_image().save_png(&a.out)?;
    println!(
        "frame {}: {} events rendered to {}",
        a.frame,
        pair.event_frame.total(),
        a.out.display()
    );
    Ok(())
}
