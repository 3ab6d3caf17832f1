//! Pipeline stages. Each reads its inputs, writes into `out/<stage>/` and
//! freezes the effective configuration there as `config.json`.

use std::path::{Path, PathBuf};

use gram_core::audio_io::{self, read_wav, write_wav, Label, Manifest, ManifestEntry, WavEncoding, Waveform, SAMPLE_RATE};
use gram_core::brir::{export_brir, import_brir, measure_rt60, render_scene_brirs, sample_scene, BrirSidecar, RoomSpec, SceneBrirs, ScenePose};
use gram_core::corpus::{colored_noise, target_clip, NoiseColor, TargetKind};
use gram_core::eval::{self, cross_validate, doa_summary, Targets, TaskResult, ItemOutcome};
use gram_core::features::{logmel, BinauralSpectrogram};
use gram_core::mixer::{direction_vector, mix_scene, SceneMeta, SceneSpec};
use gram_core::model::embed::extract_embedding;
use gram_core::model::train::{pretrain, PretrainReport, Trainer};
use gram_core::model::{Model, ModelConfig};
use gram_core::nn::checkpoint;
use gram_core::seed::{item_seed, rng, stage_seed};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;

/// Scene mixes are scaled down when needed so the PCM16 peak stays at or below this.
pub const PEAK_LIMIT: f64 = 0.9;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io { path: path.to_path_buf(), detail: e.to_string() }
}

fn audio_err(e: audio_io::AudioError) -> CliError {
    match e {
        audio_io::AudioError::Missing(p) => CliError::MissingInput(p),
        other => CliError::stage("io", other),
    }
}

/// Creates `out/<stage>` and writes the frozen config into it.
fn prepare(cfg: &RunConfig, stage: &str) -> Result<PathBuf, CliError> {
    let dir = cfg.stage_dir(stage);
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    audio_io::write_json(dir.join("config.json"), cfg).map_err(audio_err)?;
    Ok(dir)
}

fn require(path: PathBuf) -> Result<PathBuf, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingInput(path))
    }
}

/// Maps `f` over `0..n` on `workers` threads; results come back in index order.
pub fn par_map<T: Send>(workers: usize, n: usize, f: impl Fn(usize) -> Result<T, CliError> + Sync) -> Result<Vec<T>, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::stage("pool", e))?;
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}

// ---------------------------------------------------------------- brir-gen

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrirRecord {
    pub id: String,
    pub seed: u64,
    pub room: RoomSpec,
    pub pose: ScenePose,
    pub source: String,
    pub noises: Vec<String>,
    pub rt60_s: Option<f64>,
}

pub fn brir_gen(cfg: &RunConfig) -> Result<Vec<BrirRecord>, CliError> {
    let dir = prepare(cfg, "brir-gen")?;
    let stage = stage_seed(cfg.master_seed, "brir");
    let records = par_map(cfg.workers, cfg.scenes.rooms, |i| {
        let seed = item_seed(stage, i as u64);
        let room = cfg.scenes.room.sample(seed);
        let pose = sample_scene(seed, &room).map_err(|e| CliError::stage("brir-gen", e))?;
        let set = render_scene_brirs(&room, &pose).map_err(|e| CliError::stage("brir-gen", e))?;
        let id = format!("room{i:05}");
        let write = |name: String, b| -> Result<String, CliError> {
            export_brir(&dir.join(&name), b, &BrirSidecar::from_brir(b, Some(room.clone()), Some(seed)))
                .map_err(|e| CliError::stage("brir-gen", e))?;
            Ok(name)
        };
        let source = write(format!("{id}_source.wav"), &set.source)?;
        let noises = set.noises.iter().enumerate().map(|(k, b)| write(format!("{id}_noise{k}.wav"), b)).collect::<Result<_, _>>()?;
        Ok(BrirRecord { id, seed, rt60_s: set.source.meta.rt60_s, room, pose, source, noises })
    })?;
    audio_io::write_jsonl(dir.join("index.jsonl"), &records).map_err(audio_err)?;
    Ok(records)
}

fn load_brirs(dir: &Path) -> Result<Vec<(BrirRecord, SceneBrirs)>, CliError> {
    let index = require(dir.join("index.jsonl"))?;
    let records: Vec<BrirRecord> = audio_io::read_jsonl(&index).map_err(audio_err)?;
    records
        .into_iter()
        .map(|r| {
            let load = |name: &str| import_brir(&require(dir.join(name))?).map_err(|e| CliError::stage("brir", e));
            let set = SceneBrirs { source: load(&r.source)?, noises: r.noises.iter().map(|n| load(n)).collect::<Result<_, _>>()? };
            Ok((r, set))
        })
        .collect()
}

// ---------------------------------------------------------------- scene-mix

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: String,
    pub brir: String,
    /// Target class name: a synthetic kind or the manifest label.
    pub target_class: String,
    /// Gain applied after mixing to keep the peak at or below [`PEAK_LIMIT`].
    pub output_gain: f64,
    pub duration_s: f64,
    pub meta: SceneMeta,
}

struct ClipSource {
    manifest: Option<Manifest>,
}

impl ClipSource {
    fn load(path: &Option<PathBuf>) -> Result<Self, CliError> {
        let manifest = match path {
            Some(p) => Some(Manifest::load(require(p.clone())?).map_err(audio_err)?),
            None => None,
        };
        if manifest.as_ref().is_some_and(|m| m.entries.is_empty()) {
            return Err(CliError::stage("scene-mix", "empty clip manifest"));
        }
        Ok(Self { manifest })
    }

    /// `(clip id, class, mono waveform)` for a draw from `r`.
    fn draw(&self, r: &mut ChaCha8Rng, synth: impl FnOnce(&mut ChaCha8Rng) -> Result<(String, String, Waveform), CliError>) -> Result<(String, String, Waveform), CliError> {
        match &self.manifest {
            None => synth(r),
            Some(m) => {
                let e = &m.entries[r.gen_range(0..m.entries.len())];
                let w = read_wav(m.resolve(e)).map_err(audio_err)?;
                let class = match &e.label {
                    Label::Class(c) => c.clone(),
                    Label::Vector(_) => String::new(),
                };
                Ok((e.id.clone(), class, w))
            }
        }
    }
}

pub fn scene_mix(cfg: &RunConfig) -> Result<Vec<SceneRecord>, CliError> {
    let brir_dir = cfg.input(&cfg.inputs.brirs, "brir-gen");
    let brirs = load_brirs(&brir_dir)?;
    if brirs.is_empty() {
        return Err(CliError::stage("scene-mix", "no BRIRs in the index"));
    }
    let targets = ClipSource::load(&cfg.corpus.targets)?;
    let noises = ClipSource::load(&cfg.corpus.noise)?;
    let mut frozen = cfg.clone();
    frozen.inputs.brirs = Some(brir_dir);
    let dir = prepare(&frozen, "scene-mix")?;
    let stage = stage_seed(cfg.master_seed, "scene");
    let dur = cfg.corpus.synthetic_duration_s;
    let (lo, hi) = cfg.scenes.snr_range_db;
    let records = par_map(cfg.workers, cfg.scenes.count, |i| {
        let seed = item_seed(stage, i as u64);
        let mut r = rng(seed);
        let (brec, set) = &brirs[i % brirs.len()];
        let (tid, class, target) = targets.draw(&mut r, |r| {
            let kind = TargetKind::ALL[r.gen_range(0..TargetKind::ALL.len())];
            let w = target_clip(kind, dur, r.gen()).map_err(audio_err)?;
            Ok((format!("synthetic_{}", kind.name()), kind.name().to_string(), w))
        })?;
        let (nid, _, noise) = noises.draw(&mut r, |r| {
            let color = NoiseColor::ALL[r.gen_range(0..NoiseColor::ALL.len())];
            let w = colored_noise(color, dur, r.gen()).map_err(audio_err)?;
            Ok((format!("synthetic_{}", color.name()), String::new(), w))
        })?;
        let snr_db = if hi > lo { r.gen_range(lo..=hi) } else { lo };
        let spec = SceneSpec {
            scene_id: format!("scene{i:05}"),
            target_clip: tid,
            noise_clip: nid,
            brir_set: set.clone(),
            snr_db,
            seed,
            noise_gain: None,
        };
        let mixed = mix_scene(&spec, &target, &noise).map_err(|e| CliError::stage("scene-mix", e))?;
        let peak = mixed.audio.channels().iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        let gain = if peak > PEAK_LIMIT { PEAK_LIMIT / peak } else { 1.0 };
        let scaled: Vec<Vec<f64>> = mixed.audio.channels().iter().map(|c| c.iter().map(|v| v * gain).collect()).collect();
        let audio = Waveform::new(scaled, SAMPLE_RATE).map_err(audio_err)?;
        let path = dir.join(format!("{}.wav", spec.scene_id));
        write_wav(&path, &audio, WavEncoding::Pcm16).map_err(audio_err)?;
        Ok(SceneRecord { id: spec.scene_id, brir: brec.id.clone(), target_class: class, output_gain: gain, duration_s: audio.duration_s(), meta: mixed.meta })
    })?;
    let manifest: Vec<ManifestEntry> = records
        .iter()
        .map(|s| ManifestEntry {
            id: s.id.clone(),
            audio_path: format!("{}.wav", s.id),
            label: Label::Vector(s.meta.source_unit_vector.to_vec()),
            duration_s: s.duration_s,
        })
        .collect();
    audio_io::write_jsonl(dir.join("manifest.jsonl"), &manifest).map_err(audio_err)?;
    audio_io::write_jsonl(dir.join("scenes.jsonl"), &records).map_err(audio_err)?;
    Ok(records)
}

// ---------------------------------------------------------------- featurize

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: String,
    pub path: String,
    pub label: Label,
    /// Class name carried over from `scenes.jsonl` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    pub frames: usize,
}

/// Resolves a stage input that may be a directory holding `file` or the file itself.
fn file_in(path: PathBuf, file: &str) -> Result<PathBuf, CliError> {
    let p = if path.is_dir() || (!path.exists() && path.extension().is_none()) { path.join(file) } else { path };
    require(p)
}

pub fn featurize(cfg: &RunConfig) -> Result<Vec<FeatureRecord>, CliError> {
    let src = cfg.input(&cfg.inputs.scenes, "scene-mix");
    let manifest_path = file_in(src.clone(), "manifest.jsonl")?;
    let manifest = Manifest::load(&manifest_path).map_err(audio_err)?;
    let scenes_path = manifest_path.with_file_name("scenes.jsonl");
    let classes: Vec<SceneRecord> = if scenes_path.exists() { audio_io::read_jsonl(&scenes_path).map_err(audio_err)? } else { vec![] };
    let mut frozen = cfg.clone();
    frozen.inputs.scenes = Some(src);
    let dir = prepare(&frozen, "featurize")?;
    let records = par_map(cfg.workers, manifest.entries.len(), |i| {
        let e = &manifest.entries[i];
        let audio = read_wav(manifest.resolve(e)).map_err(audio_err)?;
        let spec = logmel(&audio).map_err(|err| CliError::stage("featurize", format!("{}: {err}", e.id)))?;
        let name = format!("{}.bsf", e.id);
        audio_io::write_feature(dir.join(&name), &spec).map_err(audio_err)?;
        let class = classes.iter().find(|s| s.id == e.id).map(|s| s.target_class.clone()).filter(|c| !c.is_empty());
        Ok(FeatureRecord { id: e.id.clone(), path: name, label: e.label.clone(), class, frames: spec.frames() })
    })?;
    audio_io::write_jsonl(dir.join("features.jsonl"), &records).map_err(audio_err)?;
    Ok(records)
}

pub fn load_features(src: &Path, workers: usize) -> Result<(Vec<FeatureRecord>, Vec<BinauralSpectrogram>), CliError> {
    let index = file_in(src.to_path_buf(), "features.jsonl")?;
    let base = index.parent().map(Path::to_path_buf).unwrap_or_default();
    let records: Vec<FeatureRecord> = audio_io::read_jsonl(&index).map_err(audio_err)?;
    let specs = par_map(workers, records.len(), |i| audio_io::read_feature(require(base.join(&records[i].path))?).map_err(audio_err))?;
    Ok((records, specs))
}

// ---------------------------------------------------------------- pretrain

pub fn pretrain_stage(cfg: &RunConfig) -> Result<PretrainReport, CliError> {
    let src = cfg.input(&cfg.inputs.features, "featurize");
    let (_, corpus) = load_features(&src, cfg.workers)?;
    let mut frozen = cfg.clone();
    frozen.inputs.features = Some(src);
    let dir = prepare(&frozen, "pretrain")?;
    let fail = |e| CliError::stage("pretrain", e);
    let model = Model::init(cfg.model.clone(), stage_seed(cfg.master_seed, "init")).map_err(fail)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), stage_seed(cfg.master_seed, "train")).map_err(fail)?;
    let report = pretrain(&mut trainer, &corpus, |_| {}).map_err(fail)?;
    let meta = json!({"model": trainer.model.config, "train": cfg.train, "steps_done": trainer.step});
    checkpoint::save(&dir.join("checkpoint.json"), &trainer.model.params, Some(&trainer.optimizer), meta).map_err(|e| CliError::stage("pretrain", e))?;
    audio_io::write_jsonl(dir.join("train_log.jsonl"), &report.log).map_err(audio_err)?;
    let summary = json!({
        "initial_eval_loss": report.initial_eval_loss,
        "final_eval_loss": report.final_eval_loss,
        "eval_target_variance": report.eval_target_variance,
        "ratio": report.final_eval_loss / report.initial_eval_loss,
        "steps": report.log.len(),
    });
    audio_io::write_json(dir.join("report.json"), &summary).map_err(audio_err)?;
    Ok(report)
}

/// Loads a checkpoint written by `pretrain`; the model config comes from its metadata.
pub fn load_model(path: &Path) -> Result<Model, CliError> {
    let index = file_in(path.to_path_buf(), "checkpoint.json")?;
    let ck = checkpoint::load(&index).map_err(|e| CliError::stage("checkpoint", e))?;
    let config: ModelConfig = serde_json::from_value(ck.meta["model"].clone()).map_err(|e| CliError::stage("checkpoint", e))?;
    Ok(Model { config, params: ck.params })
}

// ---------------------------------------------------------------- embed

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    pub embedding: Vec<f64>,
}

pub fn embed(cfg: &RunConfig) -> Result<Vec<EmbeddingRecord>, CliError> {
    let ck = cfg.input(&cfg.inputs.checkpoint, "pretrain");
    let src = cfg.input(&cfg.inputs.features, "featurize");
    let model = load_model(&ck)?;
    let (records, specs) = load_features(&src, cfg.workers)?;
    let mut frozen = cfg.clone();
    frozen.inputs.checkpoint = Some(ck);
    frozen.inputs.features = Some(src);
    let dir = prepare(&frozen, "embed")?;
    let out = par_map(cfg.workers, records.len(), |i| {
        let r = &records[i];
        let embedding = extract_embedding(&model, &specs[i], cfg.eval.embedding_mode).map_err(|e| CliError::stage("embed", e))?;
        Ok(EmbeddingRecord { id: r.id.clone(), label: r.label.clone(), class: r.class.clone(), embedding })
    })?;
    audio_io::write_jsonl(dir.join("embeddings.jsonl"), &out).map_err(audio_err)?;
    Ok(out)
}

// ---------------------------------------------------------------- probe

/// Class index of the nearest of eight 45° azimuth sectors, 0 facing front.
pub fn azimuth_class(v: [f64; 3]) -> usize {
    let az = v[1].atan2(v[0]).to_degrees().rem_euclid(360.0);
    (az / 45.0).round() as usize % 8
}

pub fn azimuth_class_vector(class: usize) -> [f64; 3] {
    direction_vector(class as f64 * 45.0, 0.0)
}

fn label_vector(r: &EmbeddingRecord) -> Result<[f64; 3], CliError> {
    match &r.label {
        Label::Vector(v) if v.len() == 3 => Ok([v[0], v[1], v[2]]),
        _ => Err(CliError::stage("probe", format!("{}: label is not a 3-vector", r.id))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<[f64; 3]>,
}

pub fn probe(cfg: &RunConfig) -> Result<TaskResult, CliError> {
    let src = cfg.input(&cfg.inputs.embeddings, "embed");
    let index = file_in(src.clone(), "embeddings.jsonl")?;
    let records: Vec<EmbeddingRecord> = audio_io::read_jsonl(&index).map_err(audio_err)?;
    if records.is_empty() {
        return Err(CliError::stage("probe", "no embeddings"));
    }
    let width = records[0].embedding.len();
    if records.iter().any(|r| r.embedding.len() != width) {
        return Err(CliError::stage("probe", "embeddings differ in width"));
    }
    let x = Array2::from_shape_vec((records.len(), width), records.iter().flat_map(|r| r.embedding.iter().copied()).collect())
        .map_err(|e| CliError::stage("probe", e))?;
    let task = cfg.eval.task.as_str();
    let truth: Option<Vec<[f64; 3]>> = match task {
        "target_class" => None,
        _ => Some(records.iter().map(label_vector).collect::<Result<_, _>>()?),
    };
    let targets = match task {
        "direction" => Targets::Vectors(truth.clone().unwrap()),
        "azimuth8" => Targets::Classes { labels: truth.as_ref().unwrap().iter().map(|&v| azimuth_class(v)).collect(), n_classes: 8 },
        _ => {
            let names: Vec<String> = records.iter().map(|r| r.class.clone().unwrap_or_default()).collect();
            let mut vocab = names.clone();
            vocab.sort();
            vocab.dedup();
            Targets::Classes { labels: names.iter().map(|n| vocab.binary_search(n).unwrap()).collect(), n_classes: vocab.len() }
        }
    };
    let cv = cross_validate(&x, &targets, &cfg.eval.probe, cfg.eval.folds).map_err(|e| CliError::stage("probe", e))?;
    let mut frozen = cfg.clone();
    frozen.inputs.embeddings = Some(src);
    let dir = prepare(&frozen, "probe")?;
    let predicted: Option<Vec<[f64; 3]>> = match task {
        "direction" => cv.vectors.clone(),
        "azimuth8" => cv.classes.as_ref().map(|c| c.iter().map(|&k| azimuth_class_vector(k)).collect()),
        _ => None,
    };
    let preds: Vec<Prediction> = (0..records.len())
        .map(|i| Prediction {
            id: records[i].id.clone(),
            correct: cv.correct[i],
            class: cv.classes.as_ref().map(|c| c[i]),
            truth: truth.as_ref().map(|t| t[i]),
            predicted: predicted.as_ref().map(|p| p[i]),
        })
        .collect();
    let items: Vec<ItemOutcome> = preds
        .iter()
        .map(|p| ItemOutcome {
            id: p.id.clone(),
            correct: p.correct,
            error_deg: p.truth.zip(p.predicted).and_then(|(t, v)| eval::doa_error(t, v).ok()),
        })
        .collect();
    let (metric, value) = match task {
        "direction" => ("median_doa_error_deg", eval::median(&cv.errors_deg.clone().unwrap_or_default())),
        _ => ("accuracy", cv.correct.iter().filter(|&&c| c).count() as f64 / cv.correct.len() as f64),
    };
    let result = TaskResult { task: task.to_string(), metric: metric.into(), value, n: records.len(), fold_values: cv.fold_values, items };
    audio_io::write_json(dir.join("results.json"), &vec![result.clone()]).map_err(audio_err)?;
    audio_io::write_jsonl(dir.join("predictions.jsonl"), &preds).map_err(audio_err)?;
    Ok(result)
}

// ---------------------------------------------------------------- doa-eval

pub fn doa_eval(cfg: &RunConfig) -> Result<eval::DoaResult, CliError> {
    let src = cfg.input(&cfg.inputs.predictions, "probe");
    let path = file_in(src.clone(), "predictions.jsonl")?;
    let preds: Vec<Prediction> = audio_io::read_jsonl(&path).map_err(audio_err)?;
    let pairs: Vec<([f64; 3], [f64; 3])> = preds.iter().filter_map(|p| p.truth.zip(p.predicted)).collect();
    if pairs.is_empty() {
        return Err(CliError::stage("doa-eval", format!("{} has no direction predictions", path.display())));
    }
    let (t, p): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let res = doa_summary(&t, &p).map_err(|e| CliError::stage("doa-eval", e))?;
    let mut frozen = cfg.clone();
    frozen.inputs.predictions = Some(src);
    let dir = prepare(&frozen, "doa-eval")?;
    audio_io::write_json(dir.join("doa.json"), &json!({"source": path, "result": res})).map_err(audio_err)?;
    Ok(res)
}

// ---------------------------------------------------------------- stats

#[derive(Debug, Clone, PartialEq)]
pub enum StatsQuery {
    /// Paired comparison of two `results.json` files, task by task.
    McNemar { a: PathBuf, b: PathBuf },
    Bh { p: Vec<f64> },
    SamplesSeen { batch: u64, steps_per_epoch: u64, epochs: u64 },
}

fn load_results(path: &Path) -> Result<Vec<TaskResult>, CliError> {
    let p = file_in(path.to_path_buf(), "results.json")?;
    audio_io::read_json(&p).map_err(audio_err)
}

fn label_of(path: &Path) -> String {
    path.display().to_string()
}

pub fn stats(cfg: &RunConfig, query: &StatsQuery) -> Result<serde_json::Value, CliError> {
    fn fail(e: impl std::fmt::Display) -> CliError {
        CliError::stage("stats", e)
    }
    let report = match query {
        StatsQuery::McNemar { a, b } => {
            let (ra, rb) = (load_results(a)?, load_results(b)?);
            let mut pairs = vec![];
            for ta in &ra {
                let Some(tb) = rb.iter().find(|t| t.task == ta.task) else { continue };
                let mut ca = vec![];
                let mut cb = vec![];
                for item in &ta.items {
                    let other = tb.items.iter().find(|o| o.id == item.id).ok_or_else(|| CliError::stage("stats", format!("item {} missing from {}", item.id, b.display())))?;
                    ca.push(item.correct);
                    cb.push(other.correct);
                }
                pairs.push((ta.task.clone(), label_of(a), label_of(b), ca, cb));
            }
            if pairs.is_empty() {
                return Err(CliError::stage("stats", "no task appears in both result files"));
            }
            serde_json::to_value(eval::compare(&pairs, cfg.eval.fdr_q).map_err(fail)?).map_err(fail)?
        }
        StatsQuery::Bh { p } => {
            let r = eval::fdr_bh(p, cfg.eval.fdr_q).map_err(fail)?;
            json!({"q": cfg.eval.fdr_q, "raw": p, "adjusted": r.adjusted, "rejected": r.rejected})
        }
        StatsQuery::SamplesSeen { batch, steps_per_epoch, epochs } => json!({
            "batch_size": batch,
            "steps_per_epoch": steps_per_epoch,
            "epochs": epochs,
            "samples_seen": eval::samples_seen(*batch, *steps_per_epoch, *epochs),
        }),
    };
    let dir = prepare(cfg, "stats")?;
    audio_io::write_json(dir.join("report.json"), &report).map_err(audio_err)?;
    Ok(report)
}

// ---------------------------------------------------------------- rt60

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rt60Record {
    pub file: String,
    pub rt60_s: Option<f64>,
}

pub fn rt60(cfg: &RunConfig) -> Result<Vec<Rt60Record>, CliError> {
    let src = cfg.input(&cfg.inputs.brirs, "brir-gen");
    let src = require(src)?;
    let files: Vec<PathBuf> = if src.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(&src)
            .map_err(|e| io_err(&src, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "wav"))
            .collect();
        v.sort();
        v
    } else {
        vec![src.clone()]
    };
    let mut frozen = cfg.clone();
    frozen.inputs.brirs = Some(src);
    let dir = prepare(&frozen, "rt60")?;
    let out = par_map(cfg.workers, files.len(), |i| {
        let b = import_brir(&files[i]).map_err(|e| CliError::stage("rt60", e))?;
        let file = files[i].file_name().unwrap_or_default().to_string_lossy().into_owned();
        Ok(Rt60Record { file, rt60_s: measure_rt60(&b).ok() })
    })?;
    audio_io::write_jsonl(dir.join("rt60.jsonl"), &out).map_err(audio_err)?;
    Ok(out)
}

/// brir-gen → scene-mix → featurize → pretrain → embed → probe, then DoA
/// scoring when the task yields directions.
pub fn pipeline(cfg: &RunConfig) -> Result<TaskResult, CliError> {
    let mut cfg = cfg.clone();
    cfg.inputs = Default::default();
    brir_gen(&cfg)?;
    scene_mix(&cfg)?;
    featurize(&cfg)?;
    pretrain_stage(&cfg)?;
    embed(&cfg)?;
    let res = probe(&cfg)?;
    if cfg.eval.task != "target_class" {
        doa_eval(&cfg)?;
    }
    Ok(res)
}
