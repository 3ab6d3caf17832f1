//! Audio, feature and manifest file formats.
//!
//! Everything in the pipeline runs at [`SAMPLE_RATE`]. WAV files are read as
//! PCM16 or float32; feature files use a small fixed binary layout:
//!
//! ```text
//! offset  size  field
//! 0       8     magic "GRAMBSF1"
//! 8       4     channels (u32 LE)
//! 12      4     frames   (u32 LE)
//! 16      4     mels     (u32 LE)
//! 20      4·n   payload, f32 LE, channel-major then frame rows
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::BinauralSpectrogram;

/// Internal processing rate for every stage.
pub const SAMPLE_RATE: u32 = 32_000;

pub const FEATURE_MAGIC: &[u8; 8] = b"GRAMBSF1";
const FEATURE_HEADER_LEN: usize = 8 + 12;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("file not found: {0}")]
    Missing(PathBuf),
    #[error("unsupported encoding in {path}: {detail}")]
    UnsupportedEncoding { path: PathBuf, detail: String },
    #[error("corrupt header in {path}: {detail}")]
    CorruptHeader { path: PathBuf, detail: String },
    #[error("corrupt payload in {path}: {detail}")]
    CorruptPayload { path: PathBuf, detail: String },
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("expected sample rate {expected} Hz, got {found} Hz")]
    UnsupportedRate { expected: u32, found: u32 },
    #[error("duplicate manifest id {0:?}")]
    DuplicateId(String),
    #[error("manifest {path} line {line}: {detail}")]
    Manifest { path: PathBuf, line: usize, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl AudioError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            AudioError::Missing(path.to_path_buf())
        } else {
            AudioError::Io { path: path.to_path_buf(), source }
        }
    }
}

/// Multi-channel audio with equal-length channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    rate_hz: u32,
    channels: Vec<Vec<f64>>,
}

impl Waveform {
    pub fn new(channels: Vec<Vec<f64>>, rate_hz: u32) -> Result<Self, AudioError> {
        if rate_hz == 0 {
            return Err(AudioError::InvalidWaveform("rate must be positive".into()));
        }
        if channels.is_empty() || channels.len() > 2 {
            return Err(AudioError::InvalidWaveform(format!(
                "expected 1 or 2 channels, got {}",
                channels.len()
            )));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(AudioError::InvalidWaveform("channel lengths differ".into()));
        }
        if channels.iter().flatten().any(|x| !x.is_finite()) {
            return Err(AudioError::InvalidWaveform("non-finite sample".into()));
        }
        Ok(Self { rate_hz, channels })
    }

    pub fn mono(samples: Vec<f64>, rate_hz: u32) -> Result<Self, AudioError> {
        Self::new(vec![samples], rate_hz)
    }

    pub fn stereo(left: Vec<f64>, right: Vec<f64>, rate_hz: u32) -> Result<Self, AudioError> {
        Self::new(vec![left, right], rate_hz)
    }

    pub fn rate_hz(&self) -> u32 {
        self.rate_hz
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn samples_per_channel(&self) -> usize {
        self.channels[0].len()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples_per_channel() as f64 / self.rate_hz as f64
    }

    pub fn channel(&self, idx: usize) -> &[f64] {
        &self.channels[idx]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    pub fn require_rate(&self, expected: u32) -> Result<(), AudioError> {
        if self.rate_hz != expected {
            return Err(AudioError::UnsupportedRate { expected, found: self.rate_hz });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform, AudioError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(AudioError::Missing(path.to_path_buf()));
    }
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    if n_ch == 0 || n_ch > 2 {
        return Err(AudioError::UnsupportedEncoding {
            path: path.to_path_buf(),
            detail: format!("{n_ch} channels"),
        });
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (fmt, bits) => {
            return Err(AudioError::UnsupportedEncoding {
                path: path.to_path_buf(),
                detail: format!("{fmt:?} {bits}-bit"),
            })
        }
    };
    if interleaved.len() % n_ch != 0 {
        return Err(AudioError::CorruptPayload {
            path: path.to_path_buf(),
            detail: "sample count not a multiple of channel count".into(),
        });
    }
    let mut channels = vec![Vec::with_capacity(interleaved.len() / n_ch); n_ch];
    for frame in interleaved.chunks_exact(n_ch) {
        for (c, &v) in frame.iter().enumerate() {
            channels[c].push(v);
        }
    }
    Waveform::new(channels, spec.sample_rate)
}

fn map_hound(path: &Path, err: hound::Error) -> AudioError {
    match err {
        hound::Error::IoError(e) if e.kind() == std::io::ErrorKind::NotFound => {
            AudioError::Missing(path.to_path_buf())
        }
        hound::Error::IoError(e) => AudioError::CorruptHeader {
            path: path.to_path_buf(),
            detail: e.to_string(),
        },
        hound::Error::FormatError(msg) => AudioError::CorruptHeader {
            path: path.to_path_buf(),
            detail: msg.to_string(),
        },
        hound::Error::Unsupported => AudioError::UnsupportedEncoding {
            path: path.to_path_buf(),
            detail: "unsupported WAV format".into(),
        },
        other => AudioError::UnsupportedEncoding {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    }
}

/// Writes a WAV file. PCM16 output clamps to [-1, 1) and rounds.
pub fn write_wav(
    path: impl AsRef<Path>,
    wave: &Waveform,
    encoding: WavEncoding,
) -> Result<(), AudioError> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: wave.n_channels() as u16,
        sample_rate: wave.rate_hz(),
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => hound::SampleFormat::Int,
            WavEncoding::Float32 => hound::SampleFormat::Float,
        },
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(io) => AudioError::io(path, io),
        other => AudioError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(other.to_string()),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_io)?;
    for i in 0..wave.samples_per_channel() {
        for ch in wave.channels() {
            match encoding {
                WavEncoding::Pcm16 => {
                    let v = (ch[i] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(v).map_err(to_io)?;
                }
                WavEncoding::Float32 => writer.write_sample(ch[i] as f32).map_err(to_io)?,
            }
        }
    }
    writer.finalize().map_err(to_io)
}

pub fn write_feature(path: impl AsRef<Path>, spec: &BinauralSpectrogram) -> Result<(), AudioError> {
    let path = path.as_ref();
    let (c, f, m) = spec.values().dim();
    let mut buf = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * c * f * m);
    buf.extend_from_slice(FEATURE_MAGIC);
    for dim in [c, f, m] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in spec.values().iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| AudioError::io(path, e))
}

pub fn read_feature(path: impl AsRef<Path>) -> Result<BinauralSpectrogram, AudioError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| AudioError::io(path, e))?;
    let corrupt_header = |detail: &str| AudioError::CorruptHeader {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(corrupt_header("file shorter than header"));
    }
    if &bytes[..8] != FEATURE_MAGIC {
        return Err(corrupt_header("bad magic"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (c, f, m) = (dim(0), dim(1), dim(2));
    let expected = c
        .checked_mul(f)
        .and_then(|n| n.checked_mul(m))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| corrupt_header("header dimensions overflow"))?;
    let payload = &bytes[FEATURE_HEADER_LEN..];
    if payload.len() != expected {
        return Err(AudioError::CorruptPayload {
            path: path.to_path_buf(),
            detail: format!("expected {expected} payload bytes, found {}", payload.len()),
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let arr = Array3::from_shape_vec((c, f, m), values).map_err(|e| AudioError::CorruptPayload {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    BinauralSpectrogram::from_array(arr).map_err(|e| AudioError::CorruptPayload {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Label attached to a corpus item: a class name or a unit-sphere direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(String),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub audio_path: String,
    pub label: Label,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory used to resolve relative `audio_path`s.
    pub base_dir: PathBuf,
}

impl Manifest {
    /// Loads a JSONL manifest, rejecting duplicate ids and unresolvable paths.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, AudioError> {
        let path = path.as_ref();
        let entries: Vec<ManifestEntry> = read_jsonl(path)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self { entries, base_dir };
        let mut seen = HashSet::new();
        for e in &manifest.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(AudioError::DuplicateId(e.id.clone()));
            }
        }
        for e in &manifest.entries {
            let p = manifest.resolve(e);
            if !p.exists() {
                return Err(AudioError::Missing(p));
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AudioError> {
        write_jsonl(path, &self.entries)
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.audio_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, AudioError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| AudioError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| AudioError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| AudioError::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<(), AudioError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| AudioError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| AudioError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        })?;
        writeln!(w, "{line}").map_err(|e| AudioError::io(path, e))?;
    }
    w.flush().map_err(|e| AudioError::io(path, e))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<(), AudioError> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| AudioError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })?;
    std::fs::write(path, text + "\n").map_err(|e| AudioError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T, AudioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| AudioError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| AudioError::Manifest {
        path: path.to_path_buf(),
        line: e.line(),
        detail: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn silence_pcm16_reads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("silence.wav");
        let w = Waveform::mono(vec![0.0; 32000], SAMPLE_RATE).unwrap();
        write_wav(&p, &w, WavEncoding::Pcm16).unwrap();
        let r = read_wav(&p).unwrap();
        assert_eq!(r.n_channels(), 1);
        assert_eq!(r.samples_per_channel(), 32000);
        assert_eq!(r.rate_hz(), 32000);
        assert!(r.channel(0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn negative_full_scale_is_minus_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("fs.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 32000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        w.write_sample(-32768i16).unwrap();
        w.write_sample(16384i16).unwrap();
        w.finalize().unwrap();
        let r = read_wav(&p).unwrap();
        assert_eq!(r.channel(0), &[-1.0, 0.5]);
    }

    #[test]
    fn float32_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("noise.wav");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ch = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..4000).map(|_| rng.gen_range(-1.0f32..1.0) as f64).collect()
        };
        let w = Waveform::stereo(ch(&mut rng), ch(&mut rng), SAMPLE_RATE).unwrap();
        write_wav(&p, &w, WavEncoding::Float32).unwrap();
        let r = read_wav(&p).unwrap();
        for c in 0..2 {
            let a: Vec<u64> = w.channel(c).iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = r.channel(c).iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn wav_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_wav(dir.path().join("nope.wav")), Err(AudioError::Missing(_))));

        let garbage = dir.path().join("garbage.wav");
        std::fs::write(&garbage, b"RIFF\x00\x00not a wave file").unwrap();
        assert!(matches!(read_wav(&garbage), Err(AudioError::CorruptHeader { .. })));

        let pcm24 = dir.path().join("pcm24.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 32000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&pcm24, spec).unwrap();
        w.write_sample(1i32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&pcm24), Err(AudioError::UnsupportedEncoding { .. })));
    }

    #[test]
    fn feature_file_size_matches_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("zeros.bsf");
        let spec = BinauralSpectrogram::from_array(Array3::zeros((2, 200, 128))).unwrap();
        write_feature(&p, &spec).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 204_820);
        assert_eq!(read_feature(&p).unwrap(), spec);
    }

    #[test]
    fn truncated_feature_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trunc.bsf");
        let spec = BinauralSpectrogram::from_array(Array3::zeros((2, 200, 128))).unwrap();
        write_feature(&p, &spec).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 100]).unwrap();
        assert!(matches!(read_feature(&p), Err(AudioError::CorruptPayload { .. })));
        std::fs::write(&p, b"NOTMAGIC").unwrap();
        assert!(matches!(read_feature(&p), Err(AudioError::CorruptHeader { .. })));
    }

    #[test]
    fn duplicate_manifest_id_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let wav = dir.path().join("a.wav");
        write_wav(&wav, &Waveform::mono(vec![0.0; 10], SAMPLE_RATE).unwrap(), WavEncoding::Pcm16)
            .unwrap();
        let entry = |id: &str| ManifestEntry {
            id: id.into(),
            audio_path: "a.wav".into(),
            label: Label::Class("x".into()),
            duration_s: 0.1,
        };
        let mpath = dir.path().join("m.jsonl");
        write_jsonl(&mpath, &[entry("one"), entry("two"), entry("one")]).unwrap();
        match Manifest::load(&mpath) {
            Err(AudioError::DuplicateId(id)) => assert_eq!(id, "one"),
            other => panic!("expected duplicate id error, got {other:?}"),
        }
        write_jsonl(&mpath, &[entry("one"), entry("two")]).unwrap();
        let m = Manifest::load(&mpath).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.resolve(&m.entries[0]), wav);
    }

    #[test]
    fn vector_labels_round_trip_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.jsonl");
        let e = ManifestEntry {
            id: "s0".into(),
            audio_path: "x.wav".into(),
            label: Label::Vector(vec![0.0, 1.0, 0.0]),
            duration_s: 10.0,
        };
        write_jsonl(&p, std::slice::from_ref(&e)).unwrap();
        let back: Vec<ManifestEntry> = read_jsonl(&p).unwrap();
        assert_eq!(back, vec![e]);
    }
}
