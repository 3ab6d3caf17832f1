//! Command-line front end.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use gram_core::model::embed::EmbeddingMode;
use serde_json::{json, Map, Value};

use crate::config::RunConfig;
use crate::error::{CliError, FieldError};
use crate::stages::{self, StatsQuery};

#[derive(Debug, Parser)]
#[command(name = "gram", about = "Binaural masked-autoencoder pipeline", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON config file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, env = "GRAM_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Start from the toy defaults.
    #[arg(long, global = true)]
    pub toy: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate rooms and export source and noise BRIRs.
    BrirGen {
        #[arg(long)]
        rooms: Option<usize>,
    },
    /// Mix binaural scenes from BRIRs, target and noise clips.
    SceneMix {
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        brirs: Option<PathBuf>,
        #[arg(long)]
        targets: Option<PathBuf>,
        #[arg(long)]
        noise: Option<PathBuf>,
        #[arg(long)]
        snr_min: Option<f64>,
        #[arg(long)]
        snr_max: Option<f64>,
    },
    /// Binaural log-mel features for every scene.
    Featurize {
        /// Scene directory or manifest.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Masked-reconstruction pretraining.
    Pretrain {
        #[arg(long)]
        steps: Option<u64>,
        /// Defaults to a tenth of `--steps` when the configured warmup would exceed it.
        #[arg(long)]
        warmup: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Frozen-encoder embeddings.
    Embed {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<EmbeddingMode>,
    },
    /// Cross-validated shallow probe on embeddings.
    Probe {
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// direction, azimuth8 or target_class
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Direction-of-arrival error of probe predictions.
    DoaEval {
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Paired tests, FDR correction and sample counts.
    Stats {
        #[command(subcommand)]
        query: StatsCommand,
    },
    /// Reverberation time of BRIR WAVs.
    Rt60 {
        /// A BRIR WAV or a directory of them.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Every stage in order.
    Pipeline,
}

#[derive(Debug, Subcommand)]
pub enum StatsCommand {
    Mcnemar {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        q: Option<f64>,
    },
    Bh {
        #[arg(long, value_delimiter = ',', required = true)]
        p: Vec<f64>,
        #[arg(long)]
        q: Option<f64>,
    },
    SamplesSeen {
        #[arg(long)]
        batch: u64,
        #[arg(long)]
        steps_per_epoch: u64,
        #[arg(long, default_value_t = 1)]
        epochs: u64,
    },
}

fn parse_mode(s: &str) -> Result<EmbeddingMode, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unknown mode {s:?}; use clip_level or localization"))
}

/// Sets `path` (dot-separated) in `obj` when `value` is present.
fn put<T: serde::Serialize>(obj: &mut Value, path: &str, value: Option<T>) {
    let Some(v) = value else { return };
    let mut cur = obj;
    let parts: Vec<&str> = path.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        cur = cur.as_object_mut().unwrap().entry(*p).or_insert_with(|| Value::Object(Map::new()));
    }
    cur.as_object_mut().unwrap().insert(parts[parts.len() - 1].to_string(), serde_json::to_value(v).unwrap());
}

fn overrides(g: &GlobalArgs, cmd: &Command) -> Value {
    let mut o = json!({});
    put(&mut o, "master_seed", g.seed);
    put(&mut o, "workers", g.workers);
    put(&mut o, "out", g.out.clone());
    match cmd {
        Command::BrirGen { rooms } => put(&mut o, "scenes.rooms", *rooms),
        Command::SceneMix { scenes, brirs, targets, noise, snr_min, snr_max } => {
            put(&mut o, "scenes.count", *scenes);
            put(&mut o, "inputs.brirs", brirs.clone());
            put(&mut o, "corpus.targets", targets.clone());
            put(&mut o, "corpus.noise", noise.clone());
            if snr_min.is_some() || snr_max.is_some() {
                let d = crate::config::ScenesConfig::default().snr_range_db;
                put(&mut o, "scenes.snr_range_db", Some((snr_min.unwrap_or(d.0), snr_max.unwrap_or(d.1))));
            }
        }
        Command::Featurize { input } => put(&mut o, "inputs.scenes", input.clone()),
        Command::Pretrain { steps, warmup, lr, features } => {
            put(&mut o, "train.steps", *steps);
            put(&mut o, "train.warmup_steps", *warmup);
            put(&mut o, "train.base_lr", *lr);
            put(&mut o, "inputs.features", features.clone());
        }
        Command::Embed { checkpoint, features, mode } => {
            put(&mut o, "inputs.checkpoint", checkpoint.clone());
            put(&mut o, "inputs.features", features.clone());
            put(&mut o, "eval.embedding_mode", *mode);
        }
        Command::Probe { embeddings, task, folds } => {
            put(&mut o, "inputs.embeddings", embeddings.clone());
            put(&mut o, "eval.task", task.clone());
            put(&mut o, "eval.folds", *folds);
            if task.as_deref() == Some("direction") {
                put(&mut o, "eval.probe.kind", Some("regression_unit_sphere"));
            } else if task.is_some() {
                put(&mut o, "eval.probe.kind", Some("classification"));
            }
        }
        Command::Rt60 { input } => put(&mut o, "inputs.brirs", input.clone()),
        Command::DoaEval { predictions } => put(&mut o, "inputs.predictions", predictions.clone()),
        Command::Stats { query: StatsCommand::Mcnemar { q, .. } | StatsCommand::Bh { q, .. } } => put(&mut o, "eval.fdr_q", *q),
        Command::Stats { .. } | Command::Pipeline => {}
    }
    o
}

/// Effective configuration for a parsed command line.
pub fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let flags = overrides(&cli.global, &cli.command);
    let mut cfg = RunConfig::layered_unchecked(cli.global.toy, cli.global.config.as_deref(), flags)?;
    if let Command::Pretrain { steps: Some(s), warmup: None, .. } = cli.command {
        if cfg.train.warmup_steps > s {
            cfg.train.warmup_steps = s / 10;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `args` (program name first), runs the command and returns a one-line summary.
pub fn run<I, T>(args: I) -> Result<Value, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => CliError::Help(e.to_string()),
        _ => CliError::Config(vec![FieldError::new("arguments", e.to_string())]),
    })?;
    let cfg = resolve(&cli)?;
    let summary = match &cli.command {
        Command::BrirGen { .. } => {
            let r = stages::brir_gen(&cfg)?;
            json!({"stage": "brir-gen", "rooms": r.len()})
        }
        Command::SceneMix { .. } => {
            let r = stages::scene_mix(&cfg)?;
            json!({"stage": "scene-mix", "scenes": r.len()})
        }
        Command::Featurize { .. } => {
            let r = stages::featurize(&cfg)?;
            json!({"stage": "featurize", "clips": r.len()})
        }
        Command::Pretrain { .. } => {
            let r = stages::pretrain_stage(&cfg)?;
            json!({"stage": "pretrain", "initial_eval_loss": r.initial_eval_loss, "final_eval_loss": r.final_eval_loss})
        }
        Command::Embed { .. } => {
            let r = stages::embed(&cfg)?;
            json!({"stage": "embed", "clips": r.len()})
        }
        Command::Probe { .. } => {
            let r = stages::probe(&cfg)?;
            json!({"stage": "probe", "task": r.task, "metric": r.metric, "value": r.value})
        }
        Command::DoaEval { .. } => {
            let r = stages::doa_eval(&cfg)?;
            json!({"stage": "doa-eval", "median_deg": r.median_deg, "mean_deg": r.mean_deg})
        }
        Command::Stats { query } => {
            let q = match query {
                StatsCommand::Mcnemar { a, b, .. } => StatsQuery::McNemar { a: a.clone(), b: b.clone() },
                StatsCommand::Bh { p, .. } => StatsQuery::Bh { p: p.clone() },
                StatsCommand::SamplesSeen { batch, steps_per_epoch, epochs } => {
                    StatsQuery::SamplesSeen { batch: *batch, steps_per_epoch: *steps_per_epoch, epochs: *epochs }
                }
            };
            json!({"stage": "stats", "report": stages::stats(&cfg, &q)?})
        }
        Command::Rt60 { .. } => {
            let r = stages::rt60(&cfg)?;
            json!({"stage": "rt60", "files": r.len()})
        }
        Command::Pipeline => {
            let r = stages::pipeline(&cfg)?;
            json!({"stage": "pipeline", "task": r.task, "metric": r.metric, "value": r.value})
        }
    };
    Ok(summary)
}
