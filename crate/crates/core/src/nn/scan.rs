//! Diagonal selective state-space scan: sequential recurrence, its adjoint, and a
//! chunked evaluation used as an independent cross-check.

use ndarray::{Array2, ArrayView2};

fn input_coef(delta: f64, a: f64, zoh: bool) -> f64 {
    if zoh {
        (delta * a).exp_m1() / a
    } else {
        delta
    }
}

/// Returns the outputs `[L, D]` and the post-update states `h_t`, flattened `[L, D, N]`.
pub fn forward(
    u: ArrayView2<f64>,
    delta: ArrayView2<f64>,
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    c: ArrayView2<f64>,
    zoh: bool,
) -> (Array2<f64>, Vec<f64>) {
    let (l, d) = u.dim();
    let n = a.dim().1;
    let mut h = vec![0.0; d * n];
    let mut states = Vec::with_capacity(l * d * n);
    let mut y = Array2::zeros((l, d));
    for t in 0..l {
        for ch in 0..d {
            let dt = delta[[t, ch]];
            let ut = u[[t, ch]];
            let mut acc = 0.0;
            for s in 0..n {
                let av = a[[ch, s]];
                let hs = &mut h[ch * n + s];
                *hs = (dt * av).exp() * *hs + input_coef(dt, av, zoh) * b[[t, s]] * ut;
                acc += c[[t, s]] * *hs;
            }
            y[[t, ch]] = acc;
        }
        states.extend_from_slice(&h);
    }
    (y, states)
}

pub struct ScanGrads {
    pub du: Array2<f64>,
    pub ddelta: Array2<f64>,
    pub da: Array2<f64>,
    pub db: Array2<f64>,
    pub dc: Array2<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn backward(
    u: ArrayView2<f64>,
    delta: ArrayView2<f64>,
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    c: ArrayView2<f64>,
    zoh: bool,
    states: &[f64],
    dy: ArrayView2<f64>,
) -> ScanGrads {
    let (l, d) = u.dim();
    let n = a.dim().1;
    let mut g = ScanGrads {
        du: Array2::zeros((l, d)),
        ddelta: Array2::zeros((l, d)),
        da: Array2::zeros((d, n)),
        db: Array2::zeros((l, n)),
        dc: Array2::zeros((l, n)),
    };
    let mut carry = vec![0.0; d * n];
    for t in (0..l).rev() {
        let h = &states[t * d * n..(t + 1) * d * n];
        for ch in 0..d {
            let dt = delta[[t, ch]];
            let ut = u[[t, ch]];
            let gy = dy[[t, ch]];
            let (mut gdelta, mut gu) = (0.0, 0.0);
            for s in 0..n {
                let k = ch * n + s;
                let av = a[[ch, s]];
                let bs = b[[t, s]];
                g.dc[[t, s]] += gy * h[k];
                let gh = carry[k] + gy * c[[t, s]];
                let abar = (dt * av).exp();
                let prev = if t > 0 { states[(t - 1) * d * n + k] } else { 0.0 };
                let coef = input_coef(dt, av, zoh);
                let (dcoef_ddelta, dcoef_da) = if zoh {
                    (abar, (dt * av * abar - (dt * av).exp_m1()) / (av * av))
                } else {
                    (1.0, 0.0)
                };
                gdelta += gh * (av * abar * prev + dcoef_ddelta * bs * ut);
                g.da[[ch, s]] += gh * (dt * abar * prev + dcoef_da * bs * ut);
                g.db[[t, s]] += gh * coef * ut;
                gu += gh * coef * bs;
                carry[k] = gh * abar;
            }
            g.ddelta[[t, ch]] = gdelta;
            g.du[[t, ch]] = gu;
        }
    }
    g
}

/// Same outputs as [`forward`], evaluated chunk by chunk.
///
/// Inside a chunk each state is the decayed carry plus a sum of decayed inputs,
/// with decays taken from cumulative log-decay differences; only the final state
/// of each chunk is passed on.
pub fn forward_chunked(
    u: ArrayView2<f64>,
    delta: ArrayView2<f64>,
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    c: ArrayView2<f64>,
    zoh: bool,
    chunk: usize,
) -> Array2<f64> {
    let (l, d) = u.dim();
    let n = a.dim().1;
    let chunk = chunk.max(1);
    let mut carry = vec![0.0; d * n];
    let mut y = Array2::zeros((l, d));
    let mut logdecay = vec![0.0; chunk];
    let mut start = 0;
    while start < l {
        let len = chunk.min(l - start);
        for ch in 0..d {
            for s in 0..n {
                let av = a[[ch, s]];
                let mut cum = 0.0;
                for i in 0..len {
                    cum += delta[[start + i, ch]] * av;
                    logdecay[i] = cum;
                }
                let h0 = carry[ch * n + s];
                let mut last = 0.0;
                for i in 0..len {
                    let t = start + i;
                    let mut h = logdecay[i].exp() * h0;
                    for j in 0..=i {
                        let tj = start + j;
                        let inp = input_coef(delta[[tj, ch]], av, zoh) * b[[tj, s]] * u[[tj, ch]];
                        h += (logdecay[i] - logdecay[j]).exp() * inp;
                    }
                    y[[t, ch]] += c[[t, s]] * h;
                    last = h;
                }
                carry[ch * n + s] = last;
            }
        }
        start += len;
    }
    y
}
