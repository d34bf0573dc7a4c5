//! The `rvlab` command line: corpus generation, training, evaluation,
//! ablation sweeps and temporal analysis. Every command writes a
//! [`RunManifest`] that `rvlab replay` can re-execute.

mod error;
mod manifest;
pub mod svg;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use rvlab_core::corpus::{generate, read_corpus, validation_start, write_corpus, CorpusRecord, GeneratorConfig};
use rvlab_core::heads::HeadKind;
use rvlab_core::metrics::{temporal_variance, MetricReport};
use rvlab_core::pipeline::{
    evaluate_records, noise_weight, predict_records, read_checkpoint, train, write_checkpoint, LogRow, PipelineConfig,
    TrainConfig, TrainOutcome, LOG_HEADER, NOISE_SCHEDULE,
};
use rvlab_core::refine::RefineKind;
use rvlab_core::ParamStore;

pub use error::{exit_kind, CliError, CliResult, ExitCode};
pub use manifest::{git_describe, RunManifest, RUN_MANIFEST};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckp";
pub const LOG_FILE: &str = "train_log.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const TEMPORAL_CSV: &str = "temporal.csv";
pub const NONFINITE_DUMP: &str = "nonfinite_dump.json";

#[derive(Parser, Debug)]
#[command(name = "rvlab", version = concat!(env!("CARGO_PKG_VERSION"), " (", env!("RVLAB_GIT_DESCRIBE"), ")"))]
#[command(about = "Desk-scale referring video segmentation lab")]
pub struct Cli {
    /// Worker threads for per-video evaluation [default: 1]
    #[arg(long, global = true, env = "RVLAB_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Generate a synthetic corpus
    Gen(GenArgs),
    /// Train a model and write a checkpoint plus the training log
    Train(TrainArgs),
    /// Score a checkpoint on a corpus
    Eval(EvalArgs),
    /// Train and score one arm per variant of a component
    Ablate(AblateArgs),
    /// Per-k temporal J&F variance of a checkpoint
    Temporal(TemporalArgs),
    /// Re-run the command recorded in a run manifest
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
            Command::Temporal(_) => "temporal",
            Command::Replay(_) => "replay",
        }
    }

    fn out_mut(&mut self) -> &mut PathBuf {
        match self {
            Command::Gen(a) => &mut a.out,
            Command::Train(a) => &mut a.out,
            Command::Eval(a) => &mut a.out,
            Command::Ablate(a) => &mut a.out,
            Command::Temporal(a) => &mut a.out,
            Command::Replay(a) => &mut a.out,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GenArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub videos: usize,
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    /// Frame height and width
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [96, 96])]
    pub size: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Flags shared by `train` and `ablate`. Unset optimizer and model flags
/// take the library defaults.
#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainOpts {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Videos per optimizer step
    #[arg(long)]
    pub batch: Option<usize>,
    /// Train on random windows of this many frames
    #[arg(long)]
    pub clip_frames: Option<usize>,
    /// Global gradient-norm limit
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Validate every N steps (0: only after the last)
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Cap on validation videos
    #[arg(long)]
    pub eval_videos: Option<usize>,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
}

impl TrainOpts {
    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            steps: self.steps.unwrap_or(d.steps),
            lr: self.lr.unwrap_or(d.lr),
            momentum: self.momentum.unwrap_or(d.momentum),
            batch_videos: self.batch.unwrap_or(d.batch_videos),
            clip_frames: self.clip_frames.or(d.clip_frames),
            grad_clip: self.grad_clip.or(d.grad_clip),
            eval_every: self.eval_every.unwrap_or(d.eval_every),
            eval_videos: self.eval_videos.or(d.eval_videos),
        }
    }

    pub fn pipeline_config(&self, head: HeadKind, refine: RefineKind, noise: Option<u32>) -> PipelineConfig {
        let d = PipelineConfig::default();
        PipelineConfig {
            num_queries: self.queries.unwrap_or(d.num_queries),
            channels: self.channels.unwrap_or(d.channels),
            head_kind: head,
            refine_kind: refine,
            noise_timestep: noise,
            seed: self.seed,
            ..d
        }
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub opts: TrainOpts,
    #[arg(long, default_value = "hcd")]
    pub head: HeadKind,
    #[arg(long, default_value = "tcmr")]
    pub refine: RefineKind,
    /// Inject feature noise at this diffusion timestep
    #[arg(long)]
    pub noise_timestep: Option<u32>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write loss.svg
    #[arg(long)]
    pub svg: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    All,
    /// The held-out tail that training validates on
    Validation,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub split: Split,
    /// Score only the first N videos of the split
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblateMode {
    Heads,
    Noise,
    Refine,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub mode: AblateMode,
    #[command(flatten)]
    pub opts: TrainOpts,
    /// Head of every arm in noise and refine modes
    #[arg(long, default_value = "hcd")]
    pub head: HeadKind,
    /// Refiner of every arm in heads and noise modes
    #[arg(long, default_value = "tcmr")]
    pub refine: RefineKind,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TemporalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub kmax: usize,
    #[arg(long, value_enum, default_value = "all")]
    pub split: Split,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write temporal.svg
    #[arg(long)]
    pub svg: bool,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// A run_manifest.json written by an earlier command
    #[arg(long)]
    pub manifest: PathBuf,
    /// Where the replayed outputs go
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { ExitCode::Usage.code() } else { ExitCode::Success.code() };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::Success.code(),
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> CliResult<()> {
    let threads = cli.threads.unwrap_or(1);
    if threads == 0 {
        return Err(CliError::usage("--threads must be at least 1"));
    }
    dispatch(cli.command, threads)
}

fn dispatch(command: Command, threads: usize) -> CliResult<()> {
    let start = Instant::now();
    let recorded = command.clone();
    let (out, done) = match &command {
        Command::Gen(a) => (a.out.clone(), cmd_gen(a)?),
        Command::Train(a) => (a.out.clone(), cmd_train(a, threads)?),
        Command::Eval(a) => (a.out.clone(), cmd_eval(a, threads)?),
        Command::Ablate(a) => (a.out.clone(), cmd_ablate(a, threads)?),
        Command::Temporal(a) => (a.out.clone(), cmd_temporal(a, threads)?),
        Command::Replay(a) => return cmd_replay(a, threads),
    };
    let manifest = RunManifest {
        command: command.name().into(),
        args: recorded,
        config: done.config,
        seed: done.seed,
        threads,
        artifacts: done.artifacts,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        git_describe: git_describe().into(),
    };
    manifest.write(&out)
}

/// What a finished command reports back for its manifest.
struct Done {
    config: serde_json::Value,
    seed: u64,
    artifacts: Vec<String>,
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn load_corpus(dir: &Path) -> CliResult<(Vec<String>, Vec<CorpusRecord>)> {
    if !dir.join(rvlab_core::corpus::MANIFEST).is_file() {
        return Err(CliError::io(format!("{} holds no corpus manifest", dir.display())));
    }
    let (manifest, records) = read_corpus(dir)?;
    Ok((manifest.videos.into_iter().map(|v| v.id).collect(), records))
}

fn load_checkpoint(path: &Path) -> CliResult<(PipelineConfig, ParamStore)> {
    let file = File::open(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    Ok(read_checkpoint(&mut std::io::BufReader::new(file))?)
}

fn save_checkpoint(path: &Path, config: &PipelineConfig, params: &ParamStore) -> CliResult<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut out, config, params)?;
    out.flush()?;
    Ok(())
}

/// Indices of `split`, truncated to `limit`.
fn split_range(n: usize, split: Split, limit: Option<usize>) -> std::ops::Range<usize> {
    let start = match split {
        Split::All => 0,
        // a one-video corpus validates on itself, as in training
        Split::Validation if validation_start(n) == n => 0,
        Split::Validation => validation_start(n),
    };
    let end = limit.map_or(n, |l| (start + l).min(n));
    start..end
}

fn cmd_gen(a: &GenArgs) -> CliResult<Done> {
    let cfg = GeneratorConfig {
        seed: a.seed,
        num_videos: a.videos,
        frames: a.frames,
        height: a.size[0],
        width: a.size[1],
        ..GeneratorConfig::default()
    };
    cfg.validate()?;
    if cfg.num_videos == 0 {
        return Err(CliError::usage("--videos must be at least 1"));
    }
    let records = generate(&cfg)?;
    create_dir(&a.out)?;
    write_corpus(&records, &cfg, &a.out)?;
    let mut artifacts = vec![rvlab_core::corpus::MANIFEST.to_string()];
    artifacts.extend((0..records.len()).map(|i| format!("videos/{}.rvc", rvlab_core::corpus::video_id(i))));
    Ok(Done {
        config: serde_json::to_value(&cfg)?,
        seed: a.seed,
        artifacts,
    })
}

fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s += &r.csv_line();
        s.push('\n');
    }
    s
}

fn loss_svg(rows: &[LogRow]) -> String {
    let loss = svg::Series {
        label: "total_loss",
        points: rows.iter().map(|r| (r.step as f64, r.total_loss)).collect(),
    };
    let jf = svg::Series {
        label: "val J&F",
        points: rows.iter().filter_map(|r| r.val_jf.map(|v| (r.step as f64, v))).collect(),
    };
    svg::line_chart("training", "step", "value", &[loss, jf])
}

/// Trains one arm, dumping the recent log rows when the loss blows up.
fn train_arm(
    config: &PipelineConfig,
    tcfg: &TrainConfig,
    records: &[CorpusRecord],
    threads: usize,
    out: &Path,
) -> CliResult<TrainOutcome> {
    let mut rows: Vec<LogRow> = Vec::new();
    match train(config, tcfg, records, threads, |r| rows.push(r.clone())) {
        Ok(outcome) => Ok(outcome),
        Err(e) => {
            let err = CliError::from(e);
            if err.kind == ExitCode::Numeric {
                let recent: Vec<String> = rows.iter().rev().take(20).rev().map(LogRow::csv_line).collect();
                let dump = serde_json::json!({
                    "error": err.message,
                    "failed_step": rows.len(),
                    "config": config,
                    "train_config": tcfg,
                    "log_header": LOG_HEADER,
                    "recent_rows": recent,
                });
                create_dir(out)?;
                write_file(&out.join(NONFINITE_DUMP), &(serde_json::to_string_pretty(&dump)? + "\n"))?;
            }
            Err(err)
        }
    }
}

fn cmd_train(a: &TrainArgs, threads: usize) -> CliResult<Done> {
    let config = a.opts.pipeline_config(a.head, a.refine, a.noise_timestep);
    config.validate()?;
    let tcfg = a.opts.train_config();
    tcfg.validate()?;
    let (_, records) = load_corpus(&a.opts.corpus)?;
    create_dir(&a.out)?;
    let outcome = train_arm(&config, &tcfg, &records, threads, &a.out)?;
    save_checkpoint(&a.out.join(CHECKPOINT_FILE), &config, &outcome.params)?;
    write_file(&a.out.join(LOG_FILE), &log_csv(&outcome.log))?;
    let mut artifacts = vec![CHECKPOINT_FILE.to_string(), LOG_FILE.to_string()];
    if a.svg {
        write_file(&a.out.join("loss.svg"), &loss_svg(&outcome.log))?;
        artifacts.push("loss.svg".into());
    }
    if let Some(jf) = outcome.final_val_jf {
        println!("final validation J&F {jf:.4}");
    }
    Ok(Done {
        config: serde_json::json!({ "pipeline": config, "train": tcfg }),
        seed: config.seed,
        artifacts,
    })
}

fn cmd_eval(a: &EvalArgs, threads: usize) -> CliResult<Done> {
    let (config, params) = load_checkpoint(&a.checkpoint)?;
    let (ids, records) = load_corpus(&a.corpus)?;
    let range = split_range(records.len(), a.split, a.limit);
    if range.is_empty() {
        return Err(CliError::usage("the selected split holds no videos"));
    }
    let report = evaluate_records(&config, &params, &records[range.clone()], Some(&ids[range]), threads)?;
    create_dir(&a.out)?;
    report.write_json(&a.out.join(REPORT_JSON))?;
    write_file(&a.out.join(REPORT_CSV), &report.to_csv())?;
    write_file(&a.out.join(TEMPORAL_CSV), &report.temporal_csv())?;
    println!("J {:.4}  F {:.4}  J&F {:.4}  mAP {:.4}", report.j, report.f, report.jf, report.map);
    Ok(Done {
        config: serde_json::json!({ "pipeline": config, "split": a.split, "limit": a.limit }),
        seed: config.seed,
        artifacts: vec![REPORT_JSON.into(), REPORT_CSV.into(), TEMPORAL_CSV.into()],
    })
}

/// Scores of one ablation arm on the validation split.
struct ArmScore {
    report: MetricReport,
    /// Mean temporal variance at the largest k over videos with an occluder.
    occluded_variance: Option<f64>,
}

fn score_arm(
    config: &PipelineConfig,
    params: &ParamStore,
    ids: &[String],
    records: &[CorpusRecord],
    threads: usize,
) -> CliResult<ArmScore> {
    let range = split_range(records.len(), Split::Validation, None);
    let report = evaluate_records(config, params, &records[range.clone()], Some(&ids[range.clone()]), threads)?;
    let occluded: Vec<CorpusRecord> = records[range].iter().filter(|r| !r.scene.occluders.is_empty()).cloned().collect();
    let occluded_variance = if occluded.is_empty() {
        None
    } else {
        Some(mean_temporal_variance(config, params, &occluded, rvlab_core::metrics::TEMPORAL_K_MAX, threads)?
            .last()
            .map_or(0.0, |&(_, v)| v))
    };
    Ok(ArmScore {
        report,
        occluded_variance,
    })
}

fn cmd_ablate(a: &AblateArgs, threads: usize) -> CliResult<Done> {
    let tcfg = a.opts.train_config();
    tcfg.validate()?;
    let arms: Vec<(String, PipelineConfig)> = match a.mode {
        AblateMode::Heads => HeadKind::ALL
            .iter()
            .map(|&h| (h.name().to_string(), a.opts.pipeline_config(h, a.refine, None)))
            .collect(),
        AblateMode::Noise => std::iter::once(None)
            .chain(NOISE_SCHEDULE.iter().map(|&(t, _)| Some(t)))
            .map(|t| {
                let name = t.map_or_else(|| "none".to_string(), |t| t.to_string());
                (name, a.opts.pipeline_config(a.head, a.refine, t))
            })
            .collect(),
        AblateMode::Refine => RefineKind::ALL
            .iter()
            .map(|&r| (r.name().to_string(), a.opts.pipeline_config(a.head, r, None)))
            .collect(),
    };
    for (_, c) in &arms {
        c.validate()?;
    }
    let (ids, records) = load_corpus(&a.opts.corpus)?;
    let arm_dir = a.out.join("arms");
    create_dir(&arm_dir)?;

    let (mode, header) = match a.mode {
        AblateMode::Heads => ("heads", "head,J,F,JF"),
        AblateMode::Noise => ("noise", "timestep,weight,J,F,JF"),
        AblateMode::Refine => ("refine", "refine,J,F,JF,occluded_var_k10"),
    };
    let mut csv = format!("{header}\n");
    let mut artifacts = Vec::new();
    for (name, config) in &arms {
        let outcome = train_arm(config, &tcfg, &records, threads, &a.out)?;
        let ckpt = format!("arms/{mode}_{name}.ckp");
        save_checkpoint(&a.out.join(&ckpt), config, &outcome.params)?;
        write_file(&a.out.join(format!("arms/{mode}_{name}.csv")), &log_csv(&outcome.log))?;
        artifacts.push(ckpt);
        artifacts.push(format!("arms/{mode}_{name}.csv"));
        let score = score_arm(config, &outcome.params, &ids, &records, threads)?;
        let r = &score.report;
        let line = match a.mode {
            AblateMode::Heads => format!("{name},{},{},{}", r.j, r.f, r.jf),
            AblateMode::Noise => {
                let w = config.noise_timestep.map_or(Ok(0.0), noise_weight)?;
                format!("{name},{w},{},{},{}", r.j, r.f, r.jf)
            }
            AblateMode::Refine => {
                let v = score.occluded_variance.map_or_else(String::new, |v| v.to_string());
                format!("{name},{},{},{},{v}", r.j, r.f, r.jf)
            }
        };
        println!("{line}");
        csv += &line;
        csv.push('\n');
    }
    let table = format!("ablate_{mode}.csv");
    write_file(&a.out.join(&table), &csv)?;
    artifacts.insert(0, table);
    let configs: Vec<&PipelineConfig> = arms.iter().map(|(_, c)| c).collect();
    Ok(Done {
        config: serde_json::json!({ "mode": a.mode, "arms": configs, "train": tcfg }),
        seed: a.opts.seed,
        artifacts,
    })
}

/// `(k, mean over videos of the per-video variance)` for `k = 2..=k_max`.
pub fn mean_temporal_variance(
    config: &PipelineConfig,
    params: &ParamStore,
    records: &[CorpusRecord],
    k_max: usize,
    threads: usize,
) -> CliResult<Vec<(usize, f64)>> {
    let predicted = predict_records(config, params, records, threads)?;
    let mut sums = vec![0.0; k_max.saturating_sub(1)];
    for (inf, rec) in predicted.iter().zip(records) {
        for (k, v) in temporal_variance(&inf.masks, &rec.gt_masks, k_max)? {
            sums[k - 2] += v;
        }
    }
    let n = records.len() as f64;
    Ok(sums.iter().enumerate().map(|(i, s)| (i + 2, s / n)).collect())
}

fn cmd_temporal(a: &TemporalArgs, threads: usize) -> CliResult<Done> {
    if a.kmax < 2 {
        return Err(CliError::usage("--kmax must be at least 2"));
    }
    let (config, params) = load_checkpoint(&a.checkpoint)?;
    let (_, records) = load_corpus(&a.corpus)?;
    let range = split_range(records.len(), a.split, a.limit);
    let records = &records[range];
    if records.is_empty() {
        return Err(CliError::usage("the selected split holds no videos"));
    }
    if let Some(short) = records.iter().map(CorpusRecord::len).filter(|&t| t < a.kmax).min() {
        return Err(CliError::usage(format!("videos have {short} frames, fewer than --kmax {}", a.kmax)));
    }
    let rows = mean_temporal_variance(&config, &params, records, a.kmax, threads)?;
    create_dir(&a.out)?;
    let mut csv = String::from("k,mean_variance\n");
    for (k, v) in &rows {
        csv += &format!("{k},{v}\n");
    }
    write_file(&a.out.join(TEMPORAL_CSV), &csv)?;
    let mut artifacts = vec![TEMPORAL_CSV.to_string()];
    if a.svg {
        let series = svg::Series {
            label: "variance",
            points: rows.iter().map(|&(k, v)| (k as f64, v)).collect(),
        };
        write_file(&a.out.join("temporal.svg"), &svg::line_chart("temporal J&F variance", "k", "variance", &[series]))?;
        artifacts.push("temporal.svg".into());
    }
    Ok(Done {
        config: serde_json::json!({ "pipeline": config, "kmax": a.kmax, "split": a.split, "limit": a.limit }),
        seed: config.seed,
        artifacts,
    })
}

fn cmd_replay(a: &ReplayArgs, threads: usize) -> CliResult<()> {
    let manifest = RunManifest::read(&a.manifest)?;
    let mut command = manifest.args;
    if matches!(command, Command::Replay(_)) {
        return Err(CliError::usage("a manifest never records a replay"));
    }
    *command.out_mut() = a.out.clone();
    // thread count never changes results; keep the caller's
    dispatch(command, threads)
}
