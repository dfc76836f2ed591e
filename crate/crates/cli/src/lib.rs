//! Operator commands: dataset generation, pretraining, probing, retrieval
//! evaluation, clip inspection and toy-benchmark export.
//!
//! Every command that produces artifacts first writes a [`RunManifest`]
//! into its output directory. Failures map to exit codes through
//! [`exit_code`].

pub mod inspect;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ctp_core::checkpoint::load_checkpoint;
use ctp_core::config::{CtpConfig, DataMode, ProbeMode};
use ctp_core::dataset::{generate_dataset, worker_pool, ClipProvider};
use ctp_core::io::{read_clip, read_sidecar, write_atomic};
use ctp_core::model::CtpModel;
use ctp_core::seeding::{self, tag};
use ctp_core::trainer::{evaluate_iou, pretrain, PretrainOptions};
use ctp_core::transfer::{
    extract_video_feature, linear_probe, make_toy_benchmark, read_toy_benchmark, retrieval_eval, write_feature_store,
    write_toy_benchmark, ToyBenchmark,
};
use ctp_core::{CtpError, Result};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const METRICS: &str = "metrics.json";
pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Exit code for a library error: 2 config, 3 data, 4 numeric failure.
pub fn exit_code(e: &CtpError) -> i32 {
    match e {
        CtpError::Config(_) | CtpError::InvalidInput(_) => 2,
        CtpError::Data(_) | CtpError::Io { .. } | CtpError::Checkpoint(_) => 3,
        CtpError::Numeric(_) => 4,
    }
}

#[derive(Debug, Parser)]
#[command(name = "ctp", version, about = "Patch-tracking self-supervised video pretraining")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML config file; unset keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for data synthesis (capped by CTP_NUM_WORKERS).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a training dataset: clip binaries, sidecars and a manifest.
    Generate {
        /// Trajectories per clip.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        num_clips: Option<usize>,
        /// Print the planned clip count and exit without writing.
        #[arg(long)]
        dry_run: bool,
    },
    /// Pretrain encoder and head on the tracking objective.
    Pretrain {
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Accept a resume checkpoint written under a different config.
        #[arg(long)]
        force: bool,
        /// Train on a generated dataset instead of synthesizing on the fly.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Stop after this many epochs.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Linear probe on the toy motion benchmark.
    Probe {
        /// Pretrained checkpoint; a random-init encoder when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Benchmark directory written by make-toy; built in memory when omitted.
        #[arg(long)]
        toy: Option<PathBuf>,
        /// Override probe.mode.
        #[arg(long, value_parser = ["frozen", "finetune"])]
        mode: Option<String>,
    },
    /// Nearest-neighbour retrieval of test videos against training videos.
    EvalRetrieval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        toy: Option<PathBuf>,
    },
    /// Render a contact sheet of a clip with its ground-truth boxes.
    Inspect {
        /// Clip binary (`.ctpc`).
        clip: PathBuf,
        /// Sidecar; defaults to the clip path with a `.json` extension.
        #[arg(long)]
        sidecar: Option<PathBuf>,
        /// Also write one image per frame.
        #[arg(long)]
        frames: bool,
        /// Integer upscaling factor.
        #[arg(long, default_value_t = 4)]
        scale: usize,
    },
    /// Write the toy motion benchmark to disk.
    MakeToy {
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Pretrain { .. } => "pretrain",
            Command::Probe { .. } => "probe",
            Command::EvalRetrieval { .. } => "eval-retrieval",
            Command::Inspect { .. } => "inspect",
            Command::MakeToy { .. } => "make-toy",
        }
    }
}

/// Every config key with its default, one `key = value` line each.
pub fn config_reference() -> String {
    fn walk(prefix: &str, v: &serde_json::Value, out: &mut Vec<String>) {
        match v {
            serde_json::Value::Object(m) => {
                for (k, v) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            serde_json::Value::Null => out.push(format!("  {prefix} = (unset)")),
            other => out.push(format!("  {prefix} = {other}")),
        }
    }
    let value = serde_json::to_value(CtpConfig::default()).expect("config serializes");
    let mut lines = vec!["Config keys and defaults:".to_string()];
    walk("", &value, &mut lines);
    lines.join("\n")
}

/// The clap command with the config reference attached to every `--help`.
pub fn command() -> clap::Command {
    let reference = config_reference();
    Cli::command()
        .after_help(reference.clone())
        .mut_subcommands(|s| s.after_help(reference.clone()))
}

/// Parse `args` and run, returning the process exit code.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let matches = match command().try_get_matches_from(&args) {
        Ok(m) => m,
        Err(e) if e.use_stderr() => {
            let _ = write!(stderr, "{}", e.render());
            return 2;
        }
        Err(e) => {
            let _ = write!(stdout, "{}", e.render());
            return 0;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return 2;
        }
    };
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match run(&cli, &argv, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

// ---------------------------------------------------------------------------
// Run manifest and metrics

/// Record of one invocation, written before any long-running work starts
/// and never modified afterwards. `config` is the effective config, so the
/// run can be repeated from this file alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub started_at: String,
    pub outputs: Vec<String>,
    pub config: CtpConfig,
}

impl RunManifest {
    pub fn new(command: &str, args: &[String], cfg: &CtpConfig, outputs: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            args: args.to_vec(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            outputs,
            config: cfg.clone(),
        }
    }

    /// Write into `dir` without replacing an earlier manifest: repeated runs
    /// in one directory get `run_manifest.1.json`, `run_manifest.2.json`, ...
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| CtpError::io(dir, e))?;
        let mut path = dir.join(RUN_MANIFEST);
        let mut n = 0;
        while path.exists() {
            n += 1;
            path = dir.join(format!("run_manifest.{n}.json"));
        }
        write_atomic(&path, &serde_json::to_vec_pretty(self).expect("manifest serializes"))?;
        Ok(path)
    }
}

/// Metrics written by `pretrain`, `probe` and `eval-retrieval`. The layout
/// is fixed by `schema/metrics.schema.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub schema_version: u32,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub info: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
}

impl Metrics {
    fn new(command: &str, cfg: &CtpConfig) -> Self {
        Self {
            schema_version: METRICS_SCHEMA_VERSION,
            command: command.to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            metrics: BTreeMap::new(),
            info: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    fn set(&mut self, key: &str, v: f64) -> &mut Self {
        self.metrics.insert(key.to_string(), v);
        self
    }

    fn note(&mut self, key: &str, v: impl ToString) -> &mut Self {
        self.info.insert(key.to_string(), v.to_string());
        self
    }

    fn artifact(&mut self, key: &str, p: &Path) -> &mut Self {
        self.artifacts.insert(key.to_string(), p.display().to_string());
        self
    }

    fn write(&self, dir: &Path) -> Result<PathBuf> {
        if let Some((k, _)) = self.metrics.iter().find(|(_, v)| !v.is_finite()) {
            return Err(CtpError::Numeric(format!("metric {k} is not finite")));
        }
        let path = dir.join(METRICS);
        write_atomic(&path, &serde_json::to_vec_pretty(self).expect("metrics serialize"))?;
        Ok(path)
    }
}

// ---------------------------------------------------------------------------
// Commands

/// Config file (or defaults) with the `--seed` override applied, validated.
pub fn effective_config(g: &GlobalArgs) -> Result<CtpConfig> {
    let mut cfg = match &g.config {
        Some(p) => CtpConfig::load(p)?,
        None => CtpConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(g: &GlobalArgs, command: &str) -> PathBuf {
    g.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(command))
}

pub fn run(cli: &Cli, argv: &[String], stdout: &mut dyn Write) -> Result<()> {
    let g = &cli.global;
    let name = cli.command.name();
    match &cli.command {
        Command::Generate { k, num_clips, dry_run } => {
            let mut cfg = effective_config(g)?;
            if let Some(k) = k {
                cfg.data.k = *k;
            }
            if let Some(n) = num_clips {
                cfg.data.num_clips = *n;
            }
            cfg.validate()?;
            let out = out_dir(g, name);
            if *dry_run {
                writeln!(
                    stdout,
                    "{}",
                    serde_json::json!({"dry_run": true, "clips": cfg.data.num_clips, "k": cfg.data.k, "out": out})
                )
                .map_err(|e| CtpError::io("<stdout>", e))?;
                return Ok(());
            }
            RunManifest::new(name, argv, &cfg, vec![out.join("manifest.jsonl").display().to_string()]).write(&out)?;
            let records = generate_dataset(&cfg, &out, &worker_pool(g.workers)?)?;
            writeln!(stdout, "{}", serde_json::json!({"generated": records.len(), "out": out}))
                .map_err(|e| CtpError::io("<stdout>", e))
        }
        Command::Pretrain {
            resume,
            force,
            data,
            max_epochs,
        } => {
            let mut cfg = effective_config(g)?;
            if let Some(m) = data {
                cfg.data.mode = DataMode::Pregenerated;
                cfg.data.manifest = Some(m.display().to_string());
            }
            cfg.validate()?;
            cmd_pretrain(&cfg, g, argv, resume.clone(), *force, *max_epochs, stdout)
        }
        Command::Probe { checkpoint, toy, mode } => {
            let mut cfg = effective_config(g)?;
            if let Some(m) = mode {
                cfg.probe.mode = if m == "finetune" { ProbeMode::Finetune } else { ProbeMode::Frozen };
            }
            cmd_probe(&cfg, g, argv, checkpoint.as_deref(), toy.as_deref(), stdout)
        }
        Command::EvalRetrieval { checkpoint, toy } => {
            let cfg = effective_config(g)?;
            cmd_eval_retrieval(&cfg, g, argv, checkpoint.as_deref(), toy.as_deref(), stdout)
        }
        Command::Inspect {
            clip,
            sidecar,
            frames,
            scale,
        } => {
            let sidecar_path = sidecar.clone().unwrap_or_else(|| clip.with_extension("json"));
            if !sidecar_path.exists() {
                return Err(CtpError::data(format!("missing sidecar {}", sidecar_path.display())));
            }
            let (dims, pixels) = read_clip(clip)?;
            let side = read_sidecar(&sidecar_path)?;
            let out = g.out.clone().unwrap_or_else(|| clip.parent().unwrap_or(Path::new(".")).to_path_buf());
            let written = inspect::write_inspection(&out, &side, dims, &pixels, *frames, *scale)?;
            for p in written {
                writeln!(stdout, "{}", p.display()).map_err(|e| CtpError::io("<stdout>", e))?;
            }
            Ok(())
        }
        Command::MakeToy { classes, per_class } => {
            let mut cfg = effective_config(g)?;
            if let Some(c) = classes {
                cfg.toy.n_classes = *c;
            }
            if let Some(p) = per_class {
                cfg.toy.per_class = *p;
            }
            let out = out_dir(g, name);
            RunManifest::new(name, argv, &cfg, vec![out.join(ctp_core::transfer::TOY_INDEX).display().to_string()])
                .write(&out)?;
            let bench = make_toy_benchmark(cfg.seed, &cfg.toy)?;
            write_toy_benchmark(&out, &bench)?;
            writeln!(
                stdout,
                "{}",
                serde_json::json!({"videos": bench.videos.len(), "train": bench.train.len(), "test": bench.test.len(), "out": out})
            )
            .map_err(|e| CtpError::io("<stdout>", e))
        }
    }
}

fn cmd_pretrain(
    cfg: &CtpConfig,
    g: &GlobalArgs,
    argv: &[String],
    resume: Option<PathBuf>,
    force: bool,
    max_epochs: Option<usize>,
    stdout: &mut dyn Write,
) -> Result<()> {
    let out = out_dir(g, "pretrain");
    let outputs = ["train_log.jsonl", "final.ctpk", METRICS].map(|f| out.join(f).display().to_string());
    RunManifest::new("pretrain", argv, cfg, outputs.to_vec()).write(&out)?;
    let data = ClipProvider::from_config(cfg)?;
    let eval_clips = (0..data.len().min(16)).map(|i| data.clip(i, 0)).collect::<Result<Vec<_>>>()?;
    let opts = PretrainOptions {
        resume,
        force,
        max_epochs,
    };
    let outcome = pretrain(cfg, data, worker_pool(g.workers)?, &out, &opts, stdout)?;
    let mut m = Metrics::new("pretrain", cfg);
    m.set("epoch", outcome.epoch as f64)
        .set("step", outcome.step as f64)
        .set("k", cfg.data.k as f64)
        .set("p_mask", cfg.data.p_mask)
        .set("finished", if outcome.finished { 1.0 } else { 0.0 })
        .set("train_iou", evaluate_iou(&outcome.model, &eval_clips, &cfg.sigmas)?);
    if let Some(s) = &outcome.last_epoch {
        let [dx, dy, dw, dh] = s.mean_components;
        m.set("loss", s.mean_loss).set("loss_dx", dx).set("loss_dy", dy).set("loss_dw", dw).set("loss_dh", dh);
    }
    m.artifact("checkpoint", &outcome.checkpoint).artifact("train_log", &out.join("train_log.jsonl"));
    m.write(&out)?;
    Ok(())
}

/// Encoder for probing: from a checkpoint (built with the checkpoint's own
/// model spec) or randomly initialized from `cfg`.
fn probe_model(cfg: &CtpConfig, checkpoint: Option<&Path>) -> Result<(CtpModel<f32>, String)> {
    match checkpoint {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            let mut model = CtpModel::<f32>::new(&ckpt.config.model, &mut seeding::rng_for(ckpt.config.seed, &[tag::INIT]))?;
            ckpt.restore_encoder(&mut model)?;
            Ok((model, format!("checkpoint:{}", p.display())))
        }
        None => Ok((
            CtpModel::<f32>::new(&cfg.model, &mut seeding::rng_for(cfg.seed, &[tag::INIT]))?,
            "random".to_string(),
        )),
    }
}

fn load_benchmark(cfg: &CtpConfig, toy: Option<&Path>, model: &CtpModel<f32>) -> Result<ToyBenchmark> {
    let bench = match toy {
        Some(d) => read_toy_benchmark(d)?,
        None => make_toy_benchmark(cfg.seed, &cfg.toy)?,
    };
    let e = &model.spec.encoder;
    if let Some(v) = bench.videos.iter().find(|v| v.h != e.input_h || v.w != e.input_w || v.t < e.input_t) {
        return Err(CtpError::config(format!(
            "toy video {} is {}x{}x{}, the encoder takes {}x{}x{}",
            v.id, v.t, v.h, v.w, e.input_t, e.input_h, e.input_w
        )));
    }
    Ok(bench)
}

fn cmd_probe(
    cfg: &CtpConfig,
    g: &GlobalArgs,
    argv: &[String],
    checkpoint: Option<&Path>,
    toy: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<()> {
    let out = out_dir(g, "probe");
    RunManifest::new("probe", argv, cfg, vec![out.join(METRICS).display().to_string()]).write(&out)?;
    let (model, init) = probe_model(cfg, checkpoint)?;
    let bench = load_benchmark(cfg, toy, &model)?;
    let report = linear_probe(&model.encoder, &model.spec.normalization, &bench, &cfg.probe, cfg.seed)?;
    let mut m = Metrics::new("probe", cfg);
    m.set("train_accuracy", report.train_accuracy)
        .set("test_accuracy", report.test_accuracy)
        .set("final_loss", report.final_loss)
        .note("init", init)
        .note("mode", format!("{:?}", report.mode).to_lowercase());
    m.write(&out)?;
    writeln!(stdout, "{}", serde_json::to_string(&m).expect("metrics serialize")).map_err(|e| CtpError::io("<stdout>", e))
}

fn cmd_eval_retrieval(
    cfg: &CtpConfig,
    g: &GlobalArgs,
    argv: &[String],
    checkpoint: Option<&Path>,
    toy: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<()> {
    let out = out_dir(g, "eval-retrieval");
    let bin = out.join("features.bin");
    let index = out.join("features.json");
    let outputs = [&bin, &index, &out.join(METRICS)].map(|p| p.display().to_string());
    RunManifest::new("eval-retrieval", argv, cfg, outputs.to_vec()).write(&out)?;
    let (model, init) = probe_model(cfg, checkpoint)?;
    let bench = load_benchmark(cfg, toy, &model)?;
    let feats = bench
        .videos
        .iter()
        .map(|v| extract_video_feature(&model.encoder, &model.spec.normalization, v, cfg.probe.n_clips))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = bench.videos.iter().map(|v| v.id.clone()).collect();
    let labels: Vec<usize> = bench.videos.iter().map(|v| v.label).collect();
    write_feature_store(&bin, &index, &ids, &labels, &feats)?;
    let pick = |idx: &[usize]| idx.iter().map(|i| feats[*i].clone()).collect::<Vec<_>>();
    let report = retrieval_eval(
        &pick(&bench.train),
        &bench.labels(&bench.train),
        &pick(&bench.test),
        &bench.labels(&bench.test),
        &cfg.probe.retrieval_ks,
    )?;
    let mut m = Metrics::new("eval-retrieval", cfg);
    for (k, acc) in &report.topk {
        m.set(&format!("top{k}"), *acc);
    }
    m.set("zero_norm_gallery", report.zero_norm_gallery as f64)
        .set("zero_norm_queries", report.zero_norm_queries as f64)
        .note("init", init)
        .artifact("features", &bin)
        .artifact("feature_index", &index);
    m.write(&out)?;
    writeln!(stdout, "{}", serde_json::to_string(&m).expect("metrics serialize")).map_err(|e| CtpError::io("<stdout>", e))
}
