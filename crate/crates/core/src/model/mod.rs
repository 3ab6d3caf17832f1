//! Masked-autoencoder model over binaural log-mel segments.
//!
//! Segments are cut into patches, 80% of them are masked, the encoder sees only
//! the visible patches (plus a CLS token), and a windowed-attention decoder
//! reconstructs every patch from the encoder latents and learned mask tokens.

pub mod blocks;
pub mod check;
pub mod embed;
pub mod train;

use ndarray::{Array2, Array3, ArrayView3, IxDyn};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::params::{Bound, ParamSet};
use crate::nn::{Graph, NnError, Tensor, Var};

pub use blocks::{attention, Backbone};

pub const LN_EPS: f64 = 1e-5;
pub const MASK_RATIO: f64 = 0.8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("input shape {found:?} does not match configured {expected:?}")]
    Input { expected: [usize; 3], found: Vec<usize> },
    #[error("window {window} does not divide sequence length {len}")]
    Window { window: usize, len: usize },
    #[error("mask selects no patches")]
    EmptyMask,
    #[error("non-finite loss {loss} at step {step}: {detail}")]
    NonFiniteLoss { step: u64, loss: f64, detail: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    PatchBased,
    TimeBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub strategy: Strategy,
    /// Segment shape `(channels, frames, mels)`.
    pub input: [usize; 3],
    /// Patch shape `(channels, frames, mels)`.
    pub patch: [usize; 3],
}

impl PatchConfig {
    pub fn new(strategy: Strategy) -> Self {
        let patch = match strategy {
            Strategy::PatchBased => [2, 8, 16],
            Strategy::TimeBased => [2, 2, 128],
        };
        Self { strategy, input: [2, 200, 128], patch }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.input.iter().zip(&self.patch).all(|(&i, &p)| p > 0 && i % p == 0);
        if !ok {
            return Err(ModelError::Config(format!("patch {:?} does not divide input {:?}", self.patch, self.input)));
        }
        if self.patch[0] != self.input[0] {
            return Err(ModelError::Config("patches must span all channels".into()));
        }
        if self.strategy == Strategy::TimeBased && self.patch[2] != self.input[2] {
            return Err(ModelError::Config("time-based patches must span all mel bands".into()));
        }
        Ok(())
    }

    pub fn time_patches(&self) -> usize {
        self.input[1] / self.patch[1]
    }

    pub fn freq_patches(&self) -> usize {
        self.input[2] / self.patch[2]
    }

    pub fn n_tokens(&self) -> usize {
        self.time_patches() * self.freq_patches()
    }

    pub fn patch_len(&self) -> usize {
        self.patch.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub backbone: Backbone,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub state_dim: usize,
    pub expand: usize,
    pub conv_kernel: usize,
    pub cls_token: bool,
    /// Exact zero-order hold for the input matrix instead of `Δ·B`.
    pub exact_zoh: bool,
}

impl EncoderConfig {
    pub fn dt_rank(&self) -> usize {
        self.dim.div_ceil(16)
    }

    pub fn inner_dim(&self) -> usize {
        self.expand * self.dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// One window per layer; 0 means global attention.
    pub window_sizes: Vec<usize>,
}

impl DecoderConfig {
    pub fn default_windows(strategy: Strategy) -> Vec<usize> {
        match strategy {
            Strategy::PatchBased => vec![2, 5, 10, 25, 50, 100, 0, 0],
            Strategy::TimeBased => vec![2, 5, 10, 25, 50, 0, 0, 0],
        }
    }
}

/// Fixed global affine map between log-mel units and model units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardize {
    pub mean: f64,
    pub std: f64,
}

impl Standardize {
    pub const IDENTITY: Self = Self { mean: 0.0, std: 1.0 };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch: PatchConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub mask_ratio: f64,
    pub init_std: f64,
    /// Estimate `standardize` from the pretraining corpus before the first step.
    pub fit_standardize: bool,
    /// Applied to patch values before embedding and inverted after the head.
    pub standardize: Standardize,
}

impl ModelConfig {
    /// Desk-scale default: encoder dim 64 depth 2, decoder dim 32 depth 8.
    pub fn toy(strategy: Strategy, backbone: Backbone) -> Self {
        Self {
            patch: PatchConfig::new(strategy),
            encoder: EncoderConfig {
                backbone,
                depth: 2,
                dim: 64,
                heads: 4,
                mlp_ratio: 4,
                state_dim: 16,
                expand: 2,
                conv_kernel: 4,
                cls_token: true,
                exact_zoh: false,
            },
            decoder: DecoderConfig {
                depth: 8,
                dim: 32,
                heads: 4,
                mlp_ratio: 4,
                window_sizes: DecoderConfig::default_windows(strategy),
            },
            mask_ratio: MASK_RATIO,
            init_std: 0.02,
            fit_standardize: true,
            standardize: Standardize::IDENTITY,
        }
    }

    /// Minimal model for finite-difference checks: 2×16×32 input, dim 8, depth 1.
    pub fn tiny(strategy: Strategy, backbone: Backbone) -> Self {
        let patch = match strategy {
            Strategy::PatchBased => [2, 2, 8],
            Strategy::TimeBased => [2, 2, 32],
        };
        Self {
            patch: PatchConfig { strategy, input: [2, 16, 32], patch },
            encoder: EncoderConfig {
                backbone,
                depth: 1,
                dim: 8,
                heads: 2,
                mlp_ratio: 2,
                state_dim: 4,
                expand: 2,
                conv_kernel: 3,
                cls_token: true,
                exact_zoh: false,
            },
            decoder: DecoderConfig { depth: 2, dim: 4, heads: 2, mlp_ratio: 2, window_sizes: vec![2, 0] },
            mask_ratio: MASK_RATIO,
            init_std: 0.3,
            fit_standardize: false,
            standardize: Standardize::IDENTITY,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.patch.validate()?;
        let e = &self.encoder;
        let d = &self.decoder;
        if e.dim == 0 || e.dim % 4 != 0 || d.dim == 0 || d.dim % 4 != 0 {
            return Err(ModelError::Config("model widths must be nonzero multiples of 4".into()));
        }
        if e.backbone == Backbone::Transformer && (e.heads == 0 || e.dim % e.heads != 0) {
            return Err(ModelError::Config(format!("encoder dim {} not divisible by {} heads", e.dim, e.heads)));
        }
        if e.backbone == Backbone::Mamba && (e.state_dim == 0 || e.expand == 0 || e.conv_kernel == 0) {
            return Err(ModelError::Config("mamba state, expansion and kernel must be nonzero".into()));
        }
        if d.heads == 0 || d.dim % d.heads != 0 {
            return Err(ModelError::Config(format!("decoder dim {} not divisible by {} heads", d.dim, d.heads)));
        }
        if d.window_sizes.len() != d.depth {
            return Err(ModelError::Config(format!("{} windows for {} decoder layers", d.window_sizes.len(), d.depth)));
        }
        let n = self.patch.n_tokens();
        if let Some(&w) = d.window_sizes.iter().find(|&&w| w != 0 && n % w != 0) {
            return Err(ModelError::Window { window: w, len: n });
        }
        let st = self.standardize;
        if !(st.mean.is_finite() && st.std.is_finite() && st.std > 0.0) {
            return Err(ModelError::Config(format!("standardization {st:?}")));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(ModelError::Config(format!("mask ratio {}", self.mask_ratio)));
        }
        Ok(())
    }
}

/// Patch vectors `[n_tokens, patch_len]`, tokens time-major then frequency,
/// each patch flattened channel, frame, mel.
pub fn patch_values(spec: ArrayView3<f64>, cfg: &PatchConfig) -> Result<Array2<f64>, ModelError> {
    if spec.shape() != cfg.input {
        return Err(ModelError::Input { expected: cfg.input, found: spec.shape().to_vec() });
    }
    cfg.validate()?;
    let [pc, pt, pf] = cfg.patch;
    let nf = cfg.freq_patches();
    let mut out = Array2::zeros((cfg.n_tokens(), cfg.patch_len()));
    for tp in 0..cfg.time_patches() {
        for fp in 0..nf {
            let mut row = out.row_mut(tp * nf + fp);
            let mut k = 0;
            for c in 0..pc {
                for t in 0..pt {
                    for f in 0..pf {
                        row[k] = spec[[c, tp * pt + t, fp * pf + f]];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patch_values`].
pub fn unpatchify(patches: &Array2<f64>, cfg: &PatchConfig) -> Array3<f64> {
    let [pc, pt, pf] = cfg.patch;
    let nf = cfg.freq_patches();
    let mut out = Array3::zeros((cfg.input[0], cfg.input[1], cfg.input[2]));
    for tp in 0..cfg.time_patches() {
        for fp in 0..nf {
            let row = patches.row(tp * nf + fp);
            let mut k = 0;
            for c in 0..pc {
                for t in 0..pt {
                    for f in 0..pf {
                        out[[c, tp * pt + t, fp * pf + f]] = row[k];
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub n_patches: usize,
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
    pub seed: u64,
}

impl MaskPlan {
    /// Everything visible, used at inference.
    pub fn none(n_patches: usize) -> Self {
        Self { n_patches, masked: vec![], visible: (0..n_patches).collect(), seed: 0 }
    }
}

pub fn masked_count(n_patches: usize, ratio: f64) -> usize {
    (ratio * n_patches as f64).round() as usize
}

/// Uniform subset of `round(ratio·n)` patches without replacement.
pub fn make_mask(n_patches: usize, ratio: f64, seed: u64) -> MaskPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = masked_count(n_patches, ratio).min(n_patches);
    let mut masked = sample(&mut rng, n_patches, k).into_vec();
    masked.sort_unstable();
    let mut is_masked = vec![false; n_patches];
    for &i in &masked {
        is_masked[i] = true;
    }
    let visible = (0..n_patches).filter(|&i| !is_masked[i]).collect();
    MaskPlan { n_patches, masked, visible, seed }
}

/// Fixed sin/cos table `[n, dim]`: sines in the first half, cosines in the second.
pub fn positional_table(n: usize, dim: usize) -> Result<Array2<f64>, ModelError> {
    if dim == 0 || dim % 2 != 0 {
        return Err(ModelError::Config(format!("positional width {dim} must be even")));
    }
    let half = dim / 2;
    let mut t = Array2::zeros((n, dim));
    for p in 0..n {
        for i in 0..half {
            let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            let a = p as f64 * freq;
            t[[p, i]] = a.sin();
            t[[p, half + i]] = a.cos();
        }
    }
    Ok(t)
}

/// Positions for a time-major token grid: the first half of each row encodes the
/// time index and the second half the frequency index. A grid with one frequency
/// patch uses the plain table over time.
pub fn positional_grid(cfg: &PatchConfig, dim: usize) -> Result<Array2<f64>, ModelError> {
    let (nt, nf) = (cfg.time_patches(), cfg.freq_patches());
    if nf == 1 {
        return positional_table(nt, dim);
    }
    if dim % 4 != 0 {
        return Err(ModelError::Config(format!("grid positional width {dim} must be a multiple of 4")));
    }
    let (tt, ft) = (positional_table(nt, dim / 2)?, positional_table(nf, dim / 2)?);
    let mut out = Array2::zeros((nt * nf, dim));
    for t in 0..nt {
        for f in 0..nf {
            let mut row = out.row_mut(t * nf + f);
            row.slice_mut(ndarray::s![..dim / 2]).assign(&tt.row(t));
            row.slice_mut(ndarray::s![dim / 2..]).assign(&ft.row(f));
        }
    }
    Ok(out)
}

fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).unwrap();
    Tensor::from_shape_vec(IxDyn(shape), (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}

fn ln_params(ps: &mut ParamSet, prefix: &str, dim: usize) {
    ps.insert(format!("{prefix}.gamma"), Tensor::ones(IxDyn(&[dim])));
    ps.insert(format!("{prefix}.beta"), Tensor::zeros(IxDyn(&[dim])));
}

/// Weights `[fan_in, fan_out]` and a zero bias.
fn linear_params(ps: &mut ParamSet, prefix: &str, fan_in: usize, fan_out: usize, std: f64, bias: bool, rng: &mut ChaCha8Rng) {
    ps.insert(format!("{prefix}.w"), normal(&[fan_in, fan_out], std, rng));
    if bias {
        ps.insert(format!("{prefix}.b"), Tensor::zeros(IxDyn(&[fan_out])));
    }
}

/// Model configuration plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let std = config.init_std;
        let e = &config.encoder;
        let d = &config.decoder;
        let p = config.patch.patch_len();
        linear_params(&mut ps, "patch_embed", p, e.dim, std, true, &mut rng);
        if e.cls_token {
            ps.insert("cls_token", normal(&[1, e.dim], std, &mut rng));
        }
        for l in 0..e.depth {
            blocks::init_encoder_block(&mut ps, &format!("enc.{l}"), e, std, &mut rng);
        }
        ln_params(&mut ps, "enc.norm", e.dim);
        linear_params(&mut ps, "dec.embed", e.dim, d.dim, std, true, &mut rng);
        ps.insert("mask_token", normal(&[1, d.dim], std, &mut rng));
        for l in 0..d.depth {
            blocks::init_attention_block(&mut ps, &format!("dec.{l}"), d.dim, d.mlp_ratio, std, &mut rng);
        }
        ln_params(&mut ps, "dec.norm", d.dim);
        linear_params(&mut ps, "head", d.dim, p, std, true, &mut rng);
        Ok(Self { config, params: ps })
    }

}

pub(crate) fn layer_norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let n = g.layer_norm(x, LN_EPS)?;
    let s = g.mul(n, p.get(&format!("{prefix}.gamma"))?)?;
    Ok(g.add(s, p.get(&format!("{prefix}.beta"))?)?)
}

pub(crate) fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var, bias: bool) -> Result<Var, ModelError> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = if bias { Some(p.get(&format!("{prefix}.b"))?) } else { None };
    Ok(g.linear(x, w, b)?)
}

/// Graph handles produced by one forward pass.
pub struct Forward {
    /// Encoder output after the final norm, CLS first when enabled.
    pub latents: Var,
    /// Reconstructed patches `[n_tokens, patch_len]`, present when decoding ran.
    pub reconstruction: Option<Var>,
}

/// Embeds all patches and adds positions; returns `[n_tokens, dim]`.
pub fn embed_patches(g: &mut Graph, p: &Bound, cfg: &ModelConfig, patches: &Array2<f64>) -> Result<Var, ModelError> {
    let st = cfg.standardize;
    let x = g.constant(patches.mapv(|v| (v - st.mean) / st.std).into_dyn());
    let emb = linear(g, p, "patch_embed", x, true)?;
    let pos = g.constant(positional_grid(&cfg.patch, cfg.encoder.dim)?.into_dyn());
    Ok(g.add(emb, pos)?)
}

/// Encoder over the visible tokens of `tokens` (already embedded), CLS prepended.
pub fn encode(g: &mut Graph, p: &Bound, cfg: &ModelConfig, tokens: Var, mask: &MaskPlan) -> Result<Var, ModelError> {
    let e = &cfg.encoder;
    let mut x = g.gather(tokens, 0, &mask.visible)?;
    if e.cls_token {
        let cls = p.get("cls_token")?;
        x = g.concat(&[cls, x], 0)?;
    }
    if g.shape(x)[0] == 0 {
        return Err(ModelError::EmptyMask);
    }
    for l in 0..e.depth {
        x = blocks::encoder_block(g, p, &format!("enc.{l}"), e, x)?;
    }
    if e.depth == 0 {
        return Ok(x);
    }
    layer_norm(g, p, "enc.norm", x)
}

/// Decoder: projects latents, fills masked slots with the mask token, adds
/// fresh positions and runs the windowed attention stack and the linear head.
pub fn decode(g: &mut Graph, p: &Bound, cfg: &ModelConfig, latents: Var, mask: &MaskPlan) -> Result<Var, ModelError> {
    let d = &cfg.decoder;
    let n = cfg.patch.n_tokens();
    let mut z = linear(g, p, "dec.embed", latents, true)?;
    if cfg.encoder.cls_token {
        let rows = g.shape(z)[0];
        z = g.narrow(z, 0, 1, rows - 1)?;
    }
    let zeros = g.constant(Tensor::zeros(IxDyn(&[n, d.dim])));
    let filled = g.add(zeros, p.get("mask_token")?)?;
    let mut x = g.scatter(filled, z, 0, &mask.visible)?;
    let pos = g.constant(positional_grid(&cfg.patch, d.dim)?.into_dyn());
    x = g.add(x, pos)?;
    for (l, &w) in d.window_sizes.iter().enumerate() {
        x = blocks::attention_block(g, p, &format!("dec.{l}"), d.heads, w, x)?;
    }
    x = layer_norm(g, p, "dec.norm", x)?;
    let y = linear(g, p, "head", x, true)?;
    let st = cfg.standardize;
    let y = g.scale(y, st.std);
    Ok(g.add_scalar(y, st.mean))
}

/// Mean squared error over the masked patches only.
pub fn masked_mse(g: &mut Graph, pred: Var, target: &Array2<f64>, mask: &MaskPlan) -> Result<Var, ModelError> {
    if g.shape(pred) != target.shape() {
        return Err(NnError::Shape { op: "masked_mse", left: g.shape(pred).to_vec(), right: target.shape().to_vec() }.into());
    }
    if mask.masked.is_empty() {
        return Err(ModelError::EmptyMask);
    }
    let pm = g.gather(pred, 0, &mask.masked)?;
    let tm = g.constant(target.select(ndarray::Axis(0), &mask.masked).into_dyn());
    let diff = g.sub(pm, tm)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

/// Full masked-reconstruction loss for one segment.
pub fn segment_loss(g: &mut Graph, p: &Bound, cfg: &ModelConfig, patches: &Array2<f64>, mask: &MaskPlan) -> Result<(Var, Forward), ModelError> {
    let tokens = embed_patches(g, p, cfg, patches)?;
    let latents = encode(g, p, cfg, tokens, mask)?;
    let rec = decode(g, p, cfg, latents, mask)?;
    let loss = masked_mse(g, rec, patches, mask)?;
    Ok((loss, Forward { latents, reconstruction: Some(rec) }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::random_tensor;
    use ndarray::Axis;

    #[test]
    fn token_counts() {
        let p = PatchConfig::new(Strategy::PatchBased);
        assert_eq!((p.n_tokens(), p.time_patches(), p.freq_patches(), p.patch_len()), (200, 25, 8, 256));
        let t = PatchConfig::new(Strategy::TimeBased);
        assert_eq!((t.n_tokens(), t.patch_len()), (100, 512));
        assert_eq!(make_mask(200, MASK_RATIO, 1).masked.len(), 160);
        assert_eq!(make_mask(200, MASK_RATIO, 1).visible.len(), 40);
        assert_eq!(make_mask(100, MASK_RATIO, 1).masked.len(), 80);
    }

    #[test]
    fn masks_partition_and_vary() {
        let mut seen = std::collections::HashSet::new();
        for s in 0..100 {
            let m = make_mask(200, MASK_RATIO, s);
            let mut all: Vec<usize> = m.masked.iter().chain(&m.visible).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..200).collect::<Vec<_>>());
            seen.insert(m.masked);
        }
        assert!(seen.len() >= 99);
        assert_eq!(make_mask(50, MASK_RATIO, 4), make_mask(50, MASK_RATIO, 4));
    }

    #[test]
    fn positional_table_properties() {
        let t = positional_table(1024, 64).unwrap();
        assert!(t.row(0).iter().take(32).all(|&v| v == 0.0));
        assert!(t.row(0).iter().skip(32).all(|&v| v == 1.0));
        assert_eq!(t, positional_table(1024, 64).unwrap());
        let mut min = f64::INFINITY;
        for i in 0..1024 {
            for j in 0..i {
                let d: f64 = t.row(i).iter().zip(t.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                min = min.min(d);
            }
        }
        assert!(min > 0.0);
        assert!(positional_table(4, 7).is_err());
        let cfg = PatchConfig::new(Strategy::PatchBased);
        let grid = positional_grid(&cfg, 64).unwrap();
        assert_eq!(grid.dim(), (200, 64));
        let rows: std::collections::HashSet<Vec<u64>> = grid.rows().into_iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        assert_eq!(rows.len(), 200);
        // tokens 3 and 11 share a frequency patch
        assert_eq!(grid.slice(ndarray::s![3, 32..]), grid.slice(ndarray::s![11, 32..]));
        assert_eq!(positional_grid(&PatchConfig::new(Strategy::TimeBased), 64).unwrap(), positional_table(100, 64).unwrap());
    }

    /// Unfold with stride equal to the kernel, then multiply, written independently
    /// of `patch_values`.
    fn unfold_reference(x: &Array3<f64>, w: &Array2<f64>, b: &[f64], patch: [usize; 3]) -> Array2<f64> {
        let [pc, pt, pf] = patch;
        let (nt, nf) = (x.shape()[1] / pt, x.shape()[2] / pf);
        let dim = w.shape()[1];
        let mut out = Array2::zeros((nt * nf, dim));
        for i in 0..nt {
            for j in 0..nf {
                for o in 0..dim {
                    let mut acc = b[o];
                    for c in 0..pc {
                        for t in 0..pt {
                            for f in 0..pf {
                                let k = (c * pt + t) * pf + f;
                                acc += x[[c, i * pt + t, j * pf + f]] * w[[k, o]];
                            }
                        }
                    }
                    out[[i * nf + j, o]] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn patch_embedding_matches_unfold_reference() {
        for strategy in [Strategy::PatchBased, Strategy::TimeBased] {
            let cfg = PatchConfig::new(strategy);
            let ints = |n: usize, m: i64| (0..n).map(move |i| ((i as i64 * 7919) % m - m / 2) as f64);
            let x = Array3::from_shape_vec((2, 200, 128), ints(2 * 200 * 128, 17).collect()).unwrap();
            let w = Array2::from_shape_vec((cfg.patch_len(), 8), ints(cfg.patch_len() * 8, 5).collect()).unwrap();
            let b: Vec<f64> = ints(8, 3).collect();
            let mut g = Graph::new();
            let pv = patch_values(x.view(), &cfg).unwrap();
            let xv = g.constant(pv.into_dyn());
            let wv = g.constant(w.clone().into_dyn());
            let bv = g.constant(Tensor::from_shape_vec(IxDyn(&[8]), b.clone()).unwrap());
            let y = g.linear(xv, wv, Some(bv)).unwrap();
            assert_eq!(g.value(y), &unfold_reference(&x, &w, &b, cfg.patch).into_dyn());
            assert_eq!(g.shape(y)[0], cfg.n_tokens());
        }
    }

    #[test]
    fn patches_round_trip_and_order() {
        let cfg = PatchConfig::new(Strategy::PatchBased);
        let x = Array3::from_shape_fn((2, 200, 128), |(c, t, f)| (c * 100_000 + t * 1000 + f) as f64);
        let pv = patch_values(x.view(), &cfg).unwrap();
        assert_eq!(unpatchify(&pv, &cfg), x);
        // token 1 is the second frequency block of the first time block
        assert_eq!(pv[[1, 0]], 16.0);
        assert_eq!(pv[[8, 0]], 8000.0);
        let bad = Array3::<f64>::zeros((2, 199, 128));
        assert!(matches!(patch_values(bad.view(), &cfg), Err(ModelError::Input { .. })));
    }

    fn tiny_input(cfg: &ModelConfig, seed: u64) -> Array2<f64> {
        let [c, t, f] = cfg.patch.input;
        let x = random_tensor(&[c, t, f], seed).into_dimensionality().unwrap();
        patch_values(x.view(), &cfg.patch).unwrap()
    }

    #[test]
    fn depth_zero_encoder_is_identity() {
        let mut cfg = ModelConfig::tiny(Strategy::PatchBased, Backbone::Transformer);
        cfg.encoder.depth = 0;
        let model = Model::init(cfg.clone(), 1).unwrap();
        let patches = tiny_input(&cfg, 2);
        let mask = make_mask(cfg.patch.n_tokens(), MASK_RATIO, 3);
        let mut g = Graph::new();
        let p = model.params.bind_frozen(&mut g);
        let tokens = embed_patches(&mut g, &p, &cfg, &patches).unwrap();
        let out = encode(&mut g, &p, &cfg, tokens, &mask).unwrap();
        let vis = g.value(tokens).select(Axis(0), &mask.visible);
        assert_eq!(g.value(out).slice_axis(Axis(0), (1..).into()), vis.view());
    }

    #[test]
    fn masked_mse_closed_forms() {
        let target = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64);
        let mask = MaskPlan { n_patches: 4, masked: vec![2], visible: vec![0, 1, 3], seed: 0 };
        let mut g = Graph::new();
        let same = g.param(target.clone().into_dyn());
        let l0 = masked_mse(&mut g, same, &target, &mask).unwrap();
        assert_eq!(g.value(l0)[[]], 0.0);
        let shifted = g.param((target.clone() + 0.5).into_dyn());
        let l1 = masked_mse(&mut g, shifted, &target, &mask).unwrap();
        assert_eq!(g.value(l1)[[]], 0.25);
        let mut poked = target.clone() + 0.5;
        poked[[0, 1]] += 10.0;
        let p2 = g.param(poked.into_dyn());
        let l2 = masked_mse(&mut g, p2, &target, &mask).unwrap();
        assert_eq!(g.value(l2)[[]], 0.25);
        let grads = g.backward(l2).unwrap();
        let gp = grads.get(p2).unwrap();
        for &v in &mask.visible {
            assert!(gp.index_axis(Axis(0), v).iter().all(|&x| x == 0.0));
        }
        let empty = MaskPlan::none(4);
        assert!(matches!(masked_mse(&mut g, same, &target, &empty), Err(ModelError::EmptyMask)));
    }

    #[test]
    fn end_to_end_gradients_all_variants() {
        for strategy in [Strategy::PatchBased, Strategy::TimeBased] {
            for backbone in [Backbone::Transformer, Backbone::Mamba] {
                let (err, name) = check::end_to_end(strategy, backbone).unwrap();
                assert!(err < 1e-4, "{strategy:?}/{backbone:?}: {name} {err}");
            }
        }
    }

    #[test]
    fn encoder_ignores_masked_values() {
        for backbone in [Backbone::Transformer, Backbone::Mamba] {
            let cfg = ModelConfig::tiny(Strategy::PatchBased, backbone);
            let model = Model::init(cfg.clone(), 5).unwrap();
            let a = tiny_input(&cfg, 6);
            let mask = make_mask(cfg.patch.n_tokens(), MASK_RATIO, 7);
            let mut b = a.clone();
            for &m in &mask.masked {
                b.row_mut(m).mapv_inplace(|v| v * -3.0 + 1.0);
            }
            let run = |x: &Array2<f64>| {
                let mut g = Graph::new();
                let p = model.params.bind_frozen(&mut g);
                let t = embed_patches(&mut g, &p, &cfg, x).unwrap();
                let out = encode(&mut g, &p, &cfg, t, &mask).unwrap();
                g.value(out).clone()
            };
            assert_eq!(run(&a), run(&b));
        }
    }

    #[test]
    fn decoder_head_width() {
        let cfg = ModelConfig::toy(Strategy::PatchBased, Backbone::Transformer);
        let model = Model::init(cfg.clone(), 1).unwrap();
        assert_eq!(model.params.get("head.w").unwrap().shape(), &[32, 256]);
        let cfg = ModelConfig::toy(Strategy::TimeBased, Backbone::Mamba);
        cfg.validate().unwrap();
        let mut bad = cfg.clone();
        bad.decoder.window_sizes[0] = 3;
        assert!(matches!(bad.validate(), Err(ModelError::Window { window: 3, len: 100 })));
    }
}
