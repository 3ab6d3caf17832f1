//! Run configuration: built-in defaults, overlaid by a JSON file, overlaid by flags.

use std::path::{Path, PathBuf};

use gram_core::brir::RoomDefaults;
use gram_core::eval::{ProbeConfig, ProbeKind};
use gram_core::mixer::SNR_RANGE_DB;
use gram_core::model::embed::EmbeddingMode;
use gram_core::model::train::TrainConfig;
use gram_core::model::{Backbone, ModelConfig, Strategy};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, FieldError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// JSONL manifest of mono target clips; synthetic clips when absent.
    pub targets: Option<PathBuf>,
    /// JSONL manifest of mono noise clips; synthetic colored noise when absent.
    pub noise: Option<PathBuf>,
    pub synthetic_duration_s: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { targets: None, noise: None, synthetic_duration_s: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenesConfig {
    /// Scene poses rendered by `brir-gen`; scenes reuse them cyclically.
    pub rooms: usize,
    pub count: usize,
    pub snr_range_db: (f64, f64),
    pub room: RoomDefaults,
}

impl Default for ScenesConfig {
    fn default() -> Self {
        Self { rooms: 64, count: 64, snr_range_db: SNR_RANGE_DB, room: RoomDefaults::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub embedding_mode: EmbeddingMode,
    /// Label the probe predicts: `direction`, `azimuth8` or `target_class`.
    pub task: String,
    pub folds: usize,
    pub probe: ProbeConfig,
    pub fdr_q: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            embedding_mode: EmbeddingMode::Localization,
            task: "azimuth8".into(),
            folds: 4,
            probe: ProbeConfig::default(),
            fdr_q: 0.05,
        }
    }
}

/// Stage inputs; empty entries resolve to the matching stage directory under `out`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    pub brirs: Option<PathBuf>,
    pub scenes: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    pub workers: usize,
    pub out: PathBuf,
    pub corpus: CorpusConfig,
    pub scenes: ScenesConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub inputs: InputPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            workers: 1,
            out: PathBuf::from("runs/default"),
            corpus: CorpusConfig::default(),
            scenes: ScenesConfig::default(),
            model: ModelConfig::toy(Strategy::PatchBased, Backbone::Transformer),
            train: TrainConfig::toy(),
            eval: EvalConfig::default(),
            inputs: InputPaths::default(),
        }
    }
}

/// Recursively overlays `patch` onto `base`; objects merge, everything else replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

impl RunConfig {
    pub fn toy() -> Self {
        Self { out: PathBuf::from("runs/toy"), ..Self::default() }
    }

    /// Defaults (toy or not) overlaid with the file at `path`, then with `flags`.
    pub fn layered(toy: bool, path: Option<&Path>, flags: Value) -> Result<Self, CliError> {
        let cfg = Self::layered_unchecked(toy, path, flags)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// [`RunConfig::layered`] without validation.
    pub fn layered_unchecked(toy: bool, path: Option<&Path>, flags: Value) -> Result<Self, CliError> {
        let base = if toy { Self::toy() } else { Self::default() };
        let mut v = serde_json::to_value(base).expect("config serializes");
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Io { path: p.to_path_buf(), detail: e.to_string() })?;
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(vec![FieldError::new("config", format!("{}: {e}", p.display()))]))?;
            merge(&mut v, file);
        }
        merge(&mut v, flags);
        serde_json::from_value(v).map_err(|e| CliError::Config(vec![FieldError::new("config", e.to_string())]))
    }

    /// Every invalid field, not just the first.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut errs = vec![];
        let mut check = |ok: bool, field: &str, msg: String| {
            if !ok {
                errs.push(FieldError::new(field, msg));
            }
        };
        check(self.workers >= 1, "workers", "must be at least 1".into());
        let (lo, hi) = self.scenes.snr_range_db;
        check(
            lo <= hi && lo >= SNR_RANGE_DB.0 && hi <= SNR_RANGE_DB.1,
            "scenes.snr_range_db",
            format!("[{lo}, {hi}] must lie within [{}, {}]", SNR_RANGE_DB.0, SNR_RANGE_DB.1),
        );
        check(self.scenes.rooms >= 1, "scenes.rooms", "must be at least 1".into());
        check(self.scenes.count >= 1, "scenes.count", "must be at least 1".into());
        let r = &self.scenes.room;
        for (name, (a, b)) in [("length_m", r.length_m), ("width_m", r.width_m), ("height_m", r.height_m), ("eyring_rt60_s", r.eyring_rt60_s)] {
            check(a > 0.0 && a <= b, &format!("scenes.room.{name}"), format!("range ({a}, {b}) must be positive and ordered"));
        }
        check(
            self.corpus.synthetic_duration_s >= 2.0,
            "corpus.synthetic_duration_s",
            "must cover at least one 2 s segment".into(),
        );
        for (field, p) in [("corpus.targets", &self.corpus.targets), ("corpus.noise", &self.corpus.noise)] {
            if let Some(p) = p {
                check(p.exists(), field, format!("{} does not exist", p.display()));
            }
        }
        if let Err(e) = self.model.validate() {
            errs.push(FieldError::new("model", e.to_string()));
        }
        if let Err(e) = self.train.validate() {
            errs.push(FieldError::new("train", e.to_string()));
        }
        let task_ok = ["direction", "azimuth8", "target_class"].contains(&self.eval.task.as_str());
        errs.extend((!task_ok).then(|| FieldError::new("eval.task", format!("unknown task {:?}", self.eval.task))));
        let kind_ok = (self.eval.task == "direction") == (self.eval.probe.kind == ProbeKind::RegressionUnitSphere);
        errs.extend((!kind_ok).then(|| FieldError::new("eval.probe.kind", "direction task needs the unit-sphere probe and only it".to_string())));
        errs.extend((self.eval.folds < 2).then(|| FieldError::new("eval.folds", "must be at least 2".to_string())));
        errs.extend((!(self.eval.fdr_q > 0.0 && self.eval.fdr_q < 1.0)).then(|| FieldError::new("eval.fdr_q", "must lie in (0, 1)".to_string())));
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(errs))
        }
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.out.join(stage)
    }

    pub fn input(&self, chosen: &Option<PathBuf>, stage: &str) -> PathBuf {
        chosen.clone().unwrap_or_else(|| self.stage_dir(stage))
    }
}
