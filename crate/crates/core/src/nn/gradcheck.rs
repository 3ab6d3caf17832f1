//! Central finite-difference gradient checking.

use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NnError, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// Uniform values in `[-1, 1)` from a fixed seed.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Scalar probe `Σ f(x) ⊙ R` with a fixed random `R`, so every output
/// coordinate contributes with a distinct weight.
fn probe(inputs: &[Tensor], f: &impl Fn(&mut Graph, &[Var]) -> Result<Var, NnError>) -> Result<(Graph, Vec<Var>, Var), NnError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    let weights = random_tensor(g.shape(y), 0x5eed);
    let w = g.constant(weights);
    let yw = g.mul(y, w)?;
    let loss = g.sum(yw);
    Ok((g, vars, loss))
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).iter().next().copied().unwrap_or(0.0)
}

/// Largest relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`
/// over all inputs.
pub fn check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var, NnError>) -> Result<f64, NnError> {
    let (g, vars, loss) = probe(inputs, &f)?;
    let grads = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.raw_dim()));
        let mut numeric = Tensor::zeros(input.raw_dim());
        let mut shifted: Vec<Tensor> = inputs.to_vec();
        for i in 0..input.len() {
            let orig = input.as_slice().unwrap()[i];
            shifted[k].as_slice_mut().unwrap()[i] = orig + FD_STEP;
            let (gp, _, lp) = probe(&shifted, &f)?;
            shifted[k].as_slice_mut().unwrap()[i] = orig - FD_STEP;
            let (gm, _, lm) = probe(&shifted, &f)?;
            shifted[k].as_slice_mut().unwrap()[i] = orig;
            numeric.as_slice_mut().unwrap()[i] = (scalar(&gp, lp) - scalar(&gm, lm)) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, NnError>>);

fn cases() -> Vec<Case> {
    let a = random_tensor(&[3, 4], 1);
    let b = random_tensor(&[4], 2);
    let a3 = random_tensor(&[2, 3, 4], 7);
    let qkv: Vec<Tensor> = (0..3).map(|i| random_tensor(&[6, 4], 40 + i)).collect();
    let r = random_tensor(&[3, 5], 10);
    let (l, d, n) = (6, 3, 4);
    let u = random_tensor(&[l, d], 11);
    let delta = random_tensor(&[l, d], 12).mapv(|x| 0.1 + x.abs());
    let decay = random_tensor(&[d, n], 13).mapv(|x| -(0.2 + x.abs()));
    let (sb, sc) = (random_tensor(&[l, n], 14), random_tensor(&[l, n], 15));
    let scan = vec![u, delta, decay, sb, sc];
    vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![a.clone(), b.clone()], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("scale", vec![a.clone()], Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        ("add_scalar", vec![a.clone()], Box::new(|g, v| Ok(g.add_scalar(v[0], 0.3)))),
        ("gelu", vec![a.clone()], Box::new(|g, v| Ok(g.gelu(v[0])))),
        ("silu", vec![a.clone()], Box::new(|g, v| Ok(g.silu(v[0])))),
        ("sigmoid", vec![a.clone()], Box::new(|g, v| Ok(g.sigmoid(v[0])))),
        ("exp", vec![a.clone()], Box::new(|g, v| Ok(g.exp(v[0])))),
        ("softplus", vec![a.clone()], Box::new(|g, v| Ok(g.softplus(v[0])))),
        ("powf", vec![a.mapv(|x| x.abs() + 0.5)], Box::new(|g, v| Ok(g.powf(v[0], 1.5)))),
        ("matmul_shared", vec![random_tensor(&[2, 3, 4], 1), random_tensor(&[4, 5], 2)], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("matmul_batched", vec![random_tensor(&[2, 3, 4], 3), random_tensor(&[2, 4, 5], 4)], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("matmul", vec![random_tensor(&[3, 4], 5), random_tensor(&[4, 2], 6)], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("linear", vec![random_tensor(&[5, 4], 20), random_tensor(&[4, 3], 21), random_tensor(&[3], 22)], Box::new(|g, v| g.linear(v[0], v[1], Some(v[2])))),
        ("permute", vec![a3.clone()], Box::new(|g, v| g.permute(v[0], &[2, 0, 1]))),
        ("transpose", vec![a3.clone()], Box::new(|g, v| g.transpose(v[0]))),
        ("reshape", vec![a3.clone()], Box::new(|g, v| g.reshape(v[0], &[6, 4]))),
        ("narrow", vec![a3.clone()], Box::new(|g, v| g.narrow(v[0], 2, 1, 2))),
        ("concat", vec![a3.clone(), random_tensor(&[2, 1, 4], 8)], Box::new(|g, v| g.concat(&[v[0], v[1]], 1))),
        ("gather", vec![a3.clone()], Box::new(|g, v| g.gather(v[0], 1, &[2, 0, 2]))),
        ("scatter", vec![a3.clone(), random_tensor(&[2, 2, 4], 9)], Box::new(|g, v| g.scatter(v[0], v[1], 1, &[2, 0]))),
        ("sum", vec![r.clone()], Box::new(|g, v| Ok(g.sum(v[0])))),
        ("mean", vec![r.clone()], Box::new(|g, v| Ok(g.mean(v[0])))),
        ("sum_axis", vec![r.clone()], Box::new(|g, v| g.sum_axis(v[0], 0))),
        ("mean_axis", vec![r.clone()], Box::new(|g, v| g.mean_axis(v[0], 1))),
        ("softmax", vec![r.clone()], Box::new(|g, v| g.softmax(v[0]))),
        ("log_softmax", vec![r.clone()], Box::new(|g, v| g.log_softmax(v[0]))),
        ("attention_windowed", qkv.clone(), Box::new(|g, v| g.attention(v[0], v[1], v[2], 2, 3))),
        ("attention_global", qkv, Box::new(|g, v| g.attention(v[0], v[1], v[2], 2, 6))),
        ("layer_norm", vec![r.clone()], Box::new(|g, v| g.layer_norm(v[0], 1e-5))),
        ("selective_scan", scan.clone(), Box::new(|g, v| g.selective_scan(v[0], v[1], v[2], v[3], v[4], false))),
        ("selective_scan_zoh", scan, Box::new(|g, v| g.selective_scan(v[0], v[1], v[2], v[3], v[4], true))),
        ("causal_conv", vec![random_tensor(&[7, 3], 16), random_tensor(&[3, 4], 17)], Box::new(|g, v| g.causal_conv(v[0], v[1]))),
    ]
}

/// Worst relative error of every differentiable primitive, by name.
pub fn primitive_suite() -> Result<Vec<(&'static str, f64)>, NnError> {
    cases().into_iter().map(|(name, inputs, f)| Ok((name, check(&inputs, f)?))).collect()
}

/// Norm-relative difference. Below `1e-8` both norms are at finite-difference
/// resolution, so the absolute difference is returned.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-8 {
        diff
    } else {
        diff / denom
    }
}
