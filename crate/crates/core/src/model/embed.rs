//! Frozen-model embeddings for downstream probes.

use ndarray::{s, Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::{embed_patches, encode, patch_values, Backbone, MaskPlan, Model, ModelError};
use crate::features::{BinauralSpectrogram, LOG_EPS};
use crate::nn::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// Time-mean of patch latents, one `dim` block per frequency patch.
    ClipLevel,
    /// CLS latent (transformer) or mean patch latent (mamba).
    Localization,
}

/// Chunk start frames: consecutive non-overlapping chunks, plus one ending at
/// the last frame when a tail remains. Clips shorter than a chunk yield one
/// padded chunk at 0.
pub fn chunk_offsets(frames: usize, chunk: usize) -> Vec<usize> {
    if frames <= chunk {
        return vec![0];
    }
    let mut offs: Vec<usize> = (0..frames / chunk).map(|i| i * chunk).collect();
    if frames % chunk != 0 {
        offs.push(frames - chunk);
    }
    offs
}

fn chunk(values: &Array3<f64>, off: usize, len: usize) -> Array3<f64> {
    let (c, t, f) = values.dim();
    let mut out = Array3::from_elem((c, len, f), LOG_EPS.ln());
    let end = (off + len).min(t);
    out.slice_mut(s![.., ..end - off, ..]).assign(&values.slice(s![.., off..end, ..]));
    out
}

/// Encoder output for one chunk with every patch visible, CLS first when enabled.
pub fn encode_chunk(model: &Model, chunk: &Array3<f64>) -> Result<Array2<f64>, ModelError> {
    let cfg = &model.config;
    let patches = patch_values(chunk.view(), &cfg.patch)?;
    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let tokens = embed_patches(&mut g, &p, cfg, &patches)?;
    let out = encode(&mut g, &p, cfg, tokens, &MaskPlan::none(cfg.patch.n_tokens()))?;
    Ok(g.value(out).clone().into_dimensionality().expect("encoder output is 2-D"))
}

pub fn embedding_width(model: &Model, mode: EmbeddingMode) -> usize {
    match mode {
        EmbeddingMode::ClipLevel => model.config.encoder.dim * model.config.patch.freq_patches(),
        EmbeddingMode::Localization => model.config.encoder.dim,
    }
}

/// Fixed-width embedding of a whole clip, independent of its duration.
pub fn extract_embedding(model: &Model, spec: &BinauralSpectrogram, mode: EmbeddingMode) -> Result<Vec<f64>, ModelError> {
    embed_array(model, &spec.to_f64(), mode)
}

/// [`extract_embedding`] on a raw `channels × frames × mels` array.
pub fn embed_array(model: &Model, values: &Array3<f64>, mode: EmbeddingMode) -> Result<Vec<f64>, ModelError> {
    let cfg = &model.config;
    let [c, t, f] = cfg.patch.input;
    let (sc, frames, sf) = values.dim();
    if sc != c || sf != f {
        return Err(ModelError::Input { expected: cfg.patch.input, found: vec![sc, frames, sf] });
    }
    let offs = chunk_offsets(frames, t);
    let (nt, nf, dim) = (cfg.patch.time_patches(), cfg.patch.freq_patches(), cfg.encoder.dim);
    let skip = usize::from(cfg.encoder.cls_token);
    let use_cls = cfg.encoder.cls_token && cfg.encoder.backbone == Backbone::Transformer;
    let mut acc = Array1::<f64>::zeros(embedding_width(model, mode));
    for &off in &offs {
        let out = encode_chunk(model, &chunk(values, off, t))?;
        let patches = out.slice(s![skip.., ..]);
        let v = match mode {
            EmbeddingMode::ClipLevel => {
                let grid = patches.to_owned().into_shape_with_order((nt, nf, dim)).expect("token grid");
                grid.mean_axis(Axis(0)).unwrap().into_shape_with_order(nf * dim).unwrap()
            }
            EmbeddingMode::Localization if use_cls => out.row(0).to_owned(),
            EmbeddingMode::Localization => patches.mean_axis(Axis(0)).unwrap(),
        };
        acc += &v;
    }
    Ok((acc / offs.len() as f64).to_vec())
}
