//! Encoder and decoder layers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{layer_norm, linear, linear_params, ln_params, normal, EncoderConfig, ModelError};
use crate::nn::params::{Bound, ParamSet};
use crate::nn::{Graph, Tensor, Var};
use ndarray::IxDyn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Transformer,
    Mamba,
}

/// Multi-head attention on `[L, dim]` projections. `window` 0 is global,
/// otherwise tokens attend only inside consecutive non-overlapping groups.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize, window: usize) -> Result<Var, ModelError> {
    let l = g.shape(q)[0];
    let w = if window == 0 || window > l { l } else { window };
    if l % w != 0 {
        return Err(ModelError::Window { window, len: l });
    }
    Ok(g.attention(q, k, v, heads, w)?)
}

pub(crate) fn init_attention_block(ps: &mut ParamSet, prefix: &str, dim: usize, mlp_ratio: usize, std: f64, rng: &mut ChaCha8Rng) {
    ln_params(ps, &format!("{prefix}.norm1"), dim);
    for name in ["q", "k", "v", "o"] {
        linear_params(ps, &format!("{prefix}.attn.{name}"), dim, dim, std, true, rng);
    }
    ln_params(ps, &format!("{prefix}.norm2"), dim);
    linear_params(ps, &format!("{prefix}.mlp.fc1"), dim, dim * mlp_ratio, std, true, rng);
    linear_params(ps, &format!("{prefix}.mlp.fc2"), dim * mlp_ratio, dim, std, true, rng);
}

/// Pre-norm attention plus GELU MLP, both residual.
pub fn attention_block(g: &mut Graph, p: &Bound, prefix: &str, heads: usize, window: usize, x: Var) -> Result<Var, ModelError> {
    let h = layer_norm(g, p, &format!("{prefix}.norm1"), x)?;
    let q = linear(g, p, &format!("{prefix}.attn.q"), h, true)?;
    let k = linear(g, p, &format!("{prefix}.attn.k"), h, true)?;
    let v = linear(g, p, &format!("{prefix}.attn.v"), h, true)?;
    let a = attention(g, q, k, v, heads, window)?;
    let o = linear(g, p, &format!("{prefix}.attn.o"), a, true)?;
    let x = g.add(x, o)?;
    let h = layer_norm(g, p, &format!("{prefix}.norm2"), x)?;
    let h = linear(g, p, &format!("{prefix}.mlp.fc1"), h, true)?;
    let h = g.gelu(h);
    let h = linear(g, p, &format!("{prefix}.mlp.fc2"), h, true)?;
    Ok(g.add(x, h)?)
}

pub(crate) fn init_encoder_block(ps: &mut ParamSet, prefix: &str, cfg: &EncoderConfig, std: f64, rng: &mut ChaCha8Rng) {
    match cfg.backbone {
        Backbone::Transformer => init_attention_block(ps, prefix, cfg.dim, cfg.mlp_ratio, std, rng),
        Backbone::Mamba => init_mamba_block(ps, prefix, cfg, std, rng),
    }
}

pub fn encoder_block(g: &mut Graph, p: &Bound, prefix: &str, cfg: &EncoderConfig, x: Var) -> Result<Var, ModelError> {
    match cfg.backbone {
        Backbone::Transformer => attention_block(g, p, prefix, cfg.heads, 0, x),
        Backbone::Mamba => mamba_block(g, p, prefix, cfg, x),
    }
}

const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 0.1;

fn init_mamba_block(ps: &mut ParamSet, prefix: &str, cfg: &EncoderConfig, std: f64, rng: &mut ChaCha8Rng) {
    let (d, e, n, r) = (cfg.dim, cfg.inner_dim(), cfg.state_dim, cfg.dt_rank());
    ln_params(ps, &format!("{prefix}.norm"), d);
    linear_params(ps, &format!("{prefix}.in_proj"), d, 2 * e, std, false, rng);
    ps.insert(format!("{prefix}.conv.w"), normal(&[e, cfg.conv_kernel], std.max(1.0 / cfg.conv_kernel as f64), rng));
    ps.insert(format!("{prefix}.conv.b"), Tensor::zeros(IxDyn(&[e])));
    linear_params(ps, &format!("{prefix}.x_proj"), e, r + 2 * n, std, false, rng);
    linear_params(ps, &format!("{prefix}.dt_proj"), r, e, std, false, rng);
    // softplus(bias) log-uniform over [DT_MIN, DT_MAX]
    let bias: Vec<f64> = (0..e)
        .map(|_| {
            let dt = (rng.gen::<f64>() * (DT_MAX.ln() - DT_MIN.ln()) + DT_MIN.ln()).exp();
            dt + (-(-dt).exp_m1()).ln()
        })
        .collect();
    ps.insert(format!("{prefix}.dt_proj.b"), Tensor::from_shape_vec(IxDyn(&[e]), bias).unwrap());
    let a_log = Tensor::from_shape_fn(IxDyn(&[e, n]), |i| ((i[1] + 1) as f64).ln());
    ps.insert(format!("{prefix}.a_log"), a_log);
    ps.insert(format!("{prefix}.skip"), Tensor::ones(IxDyn(&[e])));
    linear_params(ps, &format!("{prefix}.out_proj"), e, d, std, false, rng);
}

/// Selective state-space block with gating, residual around the whole block.
pub fn mamba_block(g: &mut Graph, p: &Bound, prefix: &str, cfg: &EncoderConfig, x: Var) -> Result<Var, ModelError> {
    let (e, n, r) = (cfg.inner_dim(), cfg.state_dim, cfg.dt_rank());
    let h = layer_norm(g, p, &format!("{prefix}.norm"), x)?;
    let xz = linear(g, p, &format!("{prefix}.in_proj"), h, false)?;
    let u = g.narrow(xz, 1, 0, e)?;
    let z = g.narrow(xz, 1, e, e)?;
    let u = g.causal_conv(u, p.get(&format!("{prefix}.conv.w"))?)?;
    let u = g.add(u, p.get(&format!("{prefix}.conv.b"))?)?;
    let u = g.silu(u);
    let dbc = linear(g, p, &format!("{prefix}.x_proj"), u, false)?;
    let dt = g.narrow(dbc, 1, 0, r)?;
    let b = g.narrow(dbc, 1, r, n)?;
    let c = g.narrow(dbc, 1, r + n, n)?;
    let dt = linear(g, p, &format!("{prefix}.dt_proj"), dt, true)?;
    let delta = g.softplus(dt);
    let a = g.exp(p.get(&format!("{prefix}.a_log"))?);
    let a = g.scale(a, -1.0);
    let y = g.selective_scan(u, delta, a, b, c, cfg.exact_zoh)?;
    let skip = g.mul(u, p.get(&format!("{prefix}.skip"))?)?;
    let y = g.add(y, skip)?;
    let gate = g.silu(z);
    let y = g.mul(y, gate)?;
    let out = linear(g, p, &format!("{prefix}.out_proj"), y, false)?;
    Ok(g.add(x, out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::random_tensor;
    use ndarray::{s, Array2, Axis};

    /// Direct per-head softmax attention, looping over queries.
    fn reference(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, heads: usize, window: usize) -> Array2<f64> {
        let (l, dim) = q.dim();
        let dh = dim / heads;
        let w = if window == 0 { l } else { window };
        let mut out = Array2::zeros((l, dim));
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let (qh, kh, vh) = (q.slice(cols), k.slice(cols), v.slice(cols));
            for i in 0..l {
                let lo = i / w * w;
                let scores: Vec<f64> = (lo..lo + w).map(|j| qh.row(i).dot(&kh.row(j)) / (dh as f64).sqrt()).collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = ex.iter().sum();
                for (jj, e) in ex.iter().enumerate() {
                    for c in 0..dh {
                        out[[i, h * dh + c]] += e / z * vh[[lo + jj, c]];
                    }
                }
            }
        }
        out
    }

    fn qkv(l: usize, dim: usize) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let t = |s| random_tensor(&[l, dim], s).into_dimensionality().unwrap();
        (t(1), t(2), t(3))
    }

    fn run(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, heads: usize, window: usize) -> Array2<f64> {
        let mut g = Graph::new();
        let (a, b, c) = (g.constant(q.clone().into_dyn()), g.constant(k.clone().into_dyn()), g.constant(v.clone().into_dyn()));
        let y = attention(&mut g, a, b, c, heads, window).unwrap();
        g.value(y).clone().into_dimensionality().unwrap()
    }

    #[test]
    fn windowed_attention_matches_reference() {
        let (q, k, v) = qkv(20, 8);
        for w in [0, 1, 2, 5, 10, 20] {
            let diff = (&run(&q, &k, &v, 2, w) - &reference(&q, &k, &v, 2, w)).mapv(f64::abs);
            assert!(diff.iter().all(|&d| d < 1e-12), "window {w}");
        }
    }

    #[test]
    fn full_window_equals_global() {
        let (q, k, v) = qkv(200, 32);
        let diff = (&run(&q, &k, &v, 4, 200) - &run(&q, &k, &v, 4, 0)).mapv(f64::abs);
        assert!(diff.iter().all(|&d| d < 1e-6));
    }

    #[test]
    fn unit_window_returns_values() {
        let (q, k, v) = qkv(12, 8);
        let diff = (&run(&q, &k, &v, 2, 1) - &v).mapv(f64::abs);
        assert!(diff.iter().all(|&d| d < 1e-12));
    }

    #[test]
    fn indivisible_window_rejected() {
        let (q, k, v) = qkv(10, 4);
        let mut g = Graph::new();
        let (a, b, c) = (g.constant(q.into_dyn()), g.constant(k.into_dyn()), g.constant(v.into_dyn()));
        assert!(matches!(attention(&mut g, a, b, c, 2, 3), Err(ModelError::Window { window: 3, len: 10 })));
    }

    #[test]
    fn global_attention_block_is_permutation_equivariant() {
        let mut rng = crate::seed::rng(4);
        let mut ps = ParamSet::new();
        init_attention_block(&mut ps, "b", 8, 2, 0.3, &mut rng);
        let x: Array2<f64> = random_tensor(&[9, 8], 5).into_dimensionality().unwrap();
        let perm = [3, 0, 8, 1, 7, 2, 6, 4, 5];
        let fwd = |x: &Array2<f64>| {
            let mut g = Graph::new();
            let p = ps.bind_frozen(&mut g);
            let xv = g.constant(x.clone().into_dyn());
            let y = attention_block(&mut g, &p, "b", 2, 0, xv).unwrap();
            g.value(y).clone().into_dimensionality::<ndarray::Ix2>().unwrap()
        };
        let y = fwd(&x);
        let yp = fwd(&x.select(Axis(0), &perm));
        let diff = (&y.select(Axis(0), &perm) - &yp).mapv(f64::abs);
        assert!(diff.iter().all(|&d| d < 1e-12));
    }

    #[test]
    fn mamba_block_is_causal() {
        let cfg = super::super::ModelConfig::tiny(super::super::Strategy::PatchBased, Backbone::Mamba).encoder;
        let mut rng = crate::seed::rng(8);
        let mut ps = ParamSet::new();
        init_mamba_block(&mut ps, "m", &cfg, 0.3, &mut rng);
        let x: Array2<f64> = random_tensor(&[10, cfg.dim], 9).into_dimensionality().unwrap();
        let mut x2 = x.clone();
        x2.row_mut(6).mapv_inplace(|v| v + 1.0);
        let fwd = |x: &Array2<f64>| {
            let mut g = Graph::new();
            let p = ps.bind_frozen(&mut g);
            let xv = g.constant(x.clone().into_dyn());
            let y = mamba_block(&mut g, &p, "m", &cfg, xv).unwrap();
            g.value(y).clone()
        };
        let (a, b) = (fwd(&x), fwd(&x2));
        assert_eq!(a.slice(s![..6, ..]), b.slice(s![..6, ..]));
        assert_ne!(a.slice(s![6.., ..]), b.slice(s![6.., ..]));
        let dt = ps.get("m.dt_proj.b").unwrap().mapv(crate::nn::softplus);
        assert!(dt.iter().all(|&d| (DT_MIN * 0.999..=DT_MAX * 1.001).contains(&d)));
    }
}
