//! Downstream probes, direction-of-arrival error and paired significance tests.

use ndarray::{Array1, Array2, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::optim::{AdamW, AdamWConfig};
use crate::nn::params::{Bound, ParamSet};
use crate::nn::{Graph, NnError, Tensor, Var};
use crate::seed;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("zero-length direction vector")]
    ZeroVector,
    #[error("p-value {0} outside [0, 1]")]
    PValue(f64),
    #[error("{embeddings} embeddings but {labels} labels")]
    Mismatch { embeddings: usize, labels: usize },
    #[error("invalid probe setup: {0}")]
    Probe(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Angle in degrees between unit `v` and the direction of `v_hat`.
pub fn doa_error(v: [f64; 3], v_hat: [f64; 3]) -> Result<f64, EvalError> {
    let n = v_hat.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(EvalError::ZeroVector);
    }
    let dot = v.iter().zip(&v_hat).map(|(a, b)| a * b).sum::<f64>() / n;
    Ok(dot.clamp(-1.0, 1.0).acos().to_degrees())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoaResult {
    pub errors_deg: Vec<f64>,
    pub median_deg: f64,
    pub mean_deg: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn doa_summary(truth: &[[f64; 3]], predicted: &[[f64; 3]]) -> Result<DoaResult, EvalError> {
    if truth.len() != predicted.len() {
        return Err(EvalError::Mismatch { embeddings: predicted.len(), labels: truth.len() });
    }
    let errors_deg = truth.iter().zip(predicted).map(|(v, p)| doa_error(*v, *p)).collect::<Result<Vec<_>, _>>()?;
    let mean_deg = errors_deg.iter().sum::<f64>() / errors_deg.len().max(1) as f64;
    Ok(DoaResult { median_deg: median(&errors_deg), mean_deg, errors_deg })
}

/// Contingency counts for two systems scored on the same items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedOutcomes {
    pub n11: u64,
    pub n10: u64,
    pub n01: u64,
    pub n00: u64,
}

impl PairedOutcomes {
    pub fn from_correct(a: &[bool], b: &[bool]) -> Result<Self, EvalError> {
        if a.len() != b.len() {
            return Err(EvalError::Mismatch { embeddings: a.len(), labels: b.len() });
        }
        let mut o = Self { n11: 0, n10: 0, n01: 0, n00: 0 };
        for (&x, &y) in a.iter().zip(b) {
            match (x, y) {
                (true, true) => o.n11 += 1,
                (true, false) => o.n10 += 1,
                (false, true) => o.n01 += 1,
                (false, false) => o.n00 += 1,
            }
        }
        Ok(o)
    }

    pub fn discordant(&self) -> u64 {
        self.n10 + self.n01
    }
}

pub const MCNEMAR_EXACT_BELOW: u64 = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McNemarMethod {
    Exact,
    ChiSquared,
    /// No discordant pairs; p is 1 by convention.
    NoDiscordance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemar {
    pub p_value: f64,
    pub method: McNemarMethod,
    pub statistic: Option<f64>,
}

/// Two-sided `2·P(X ≤ k)` for `X ~ Binomial(n, 1/2)`, capped at 1.
pub fn binomial_two_sided(k: u64, n: u64) -> f64 {
    let k = k.min(n - k);
    // log-space terms keep large n finite
    let ln_half_n = n as f64 * 0.5f64.ln();
    let mut ln_c = 0.0;
    let mut tail = 0.0;
    for i in 0..=k {
        if i > 0 {
            ln_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        tail += (ln_c + ln_half_n).exp();
    }
    (2.0 * tail).min(1.0)
}

/// Exact binomial test below 25 discordant pairs, continuity-corrected
/// chi-squared otherwise.
pub fn mcnemar(o: &PairedOutcomes) -> McNemar {
    let n = o.discordant();
    if n == 0 {
        return McNemar { p_value: 1.0, method: McNemarMethod::NoDiscordance, statistic: None };
    }
    if n < MCNEMAR_EXACT_BELOW {
        return McNemar { p_value: binomial_two_sided(o.n10.min(o.n01), n), method: McNemarMethod::Exact, statistic: None };
    }
    let d = (o.n10 as f64 - o.n01 as f64).abs() - 1.0;
    let stat = d.max(0.0).powi(2) / n as f64;
    // chi-squared with one degree of freedom: P(Z² > s) = erfc(√(s/2))
    let p = libm::erfc((stat / 2.0).sqrt());
    McNemar { p_value: p.min(1.0), method: McNemarMethod::ChiSquared, statistic: Some(stat) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BhResult {
    pub adjusted: Vec<f64>,
    pub rejected: Vec<bool>,
}

/// Benjamini-Hochberg adjusted p-values in input order, and rejections at `q`.
pub fn fdr_bh(p: &[f64], q: f64) -> Result<BhResult, EvalError> {
    if let Some(&bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(EvalError::PValue(bad));
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        // the product can round one ulp below p[i]
        running = running.min(p[i] * m as f64 / (rank + 1) as f64).max(p[i]);
        adjusted[i] = running;
    }
    let rejected = adjusted.iter().map(|&a| a <= q).collect();
    Ok(BhResult { adjusted, rejected })
}

/// Total training examples: `batch × steps_per_epoch × epochs`.
pub fn samples_seen(batch_size: u64, steps_per_epoch: u64, epochs: u64) -> u64 {
    batch_size * steps_per_epoch * epochs
}

pub fn samples_seen_steps(batch_size: u64, total_steps: u64) -> u64 {
    batch_size * total_steps
}

/// Marks: § for p < 0.001, ‡ for p < 0.01, † for p < 0.05.
pub fn significance_mark(p: f64) -> &'static str {
    if p < 0.001 {
        "§"
    } else if p < 0.01 {
        "‡"
    } else if p < 0.05 {
        "†"
    } else {
        ""
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Classification,
    RegressionUnitSphere,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SphereLoss {
    /// `1 − cos(v, v̂)`.
    Cosine,
    /// Squared error on the normalized coordinates.
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    /// Hidden units; 0 gives a linear probe.
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    pub sphere_loss: SphereLoss,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            kind: ProbeKind::Classification,
            hidden: 256,
            epochs: 200,
            lr: 1e-3,
            weight_decay: 0.0,
            patience: 20,
            val_fraction: 0.2,
            sphere_loss: SphereLoss::Cosine,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, n_classes: usize },
    Vectors(Vec<[f64; 3]>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Self::Classes { labels, .. } => labels.len(),
            Self::Vectors(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn subset(&self, idx: &[usize]) -> Self {
        match self {
            Self::Classes { labels, n_classes } => {
                Self::Classes { labels: idx.iter().map(|&i| labels[i]).collect(), n_classes: *n_classes }
            }
            Self::Vectors(v) => Self::Vectors(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Trained probe with its input standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub config: ProbeConfig,
    pub params: ParamSet,
    pub feature_mean: Array1<f64>,
    pub feature_std: Array1<f64>,
    pub epochs_run: usize,
}

fn probe_forward(g: &mut Graph, p: &Bound, x: Var, hidden: bool) -> Result<Var, NnError> {
    let mut h = g.linear(x, p.get("l1.w")?, Some(p.get("l1.b")?))?;
    if hidden {
        h = g.gelu(h);
        h = g.linear(h, p.get("l2.w")?, Some(p.get("l2.b")?))?;
    }
    Ok(h)
}

/// Row-normalized 3-vectors.
fn unit_rows(g: &mut Graph, y: Var) -> Result<Var, NnError> {
    let sq = g.mul(y, y)?;
    let n2 = g.sum_axis(sq, 1)?;
    let rows = g.shape(n2)[0];
    let n2 = g.reshape(n2, &[rows, 1])?;
    let n2 = g.add_scalar(n2, 1e-12);
    let inv = g.powf(n2, -0.5);
    g.mul(y, inv)
}

fn probe_loss(g: &mut Graph, out: Var, targets: &Targets, sphere: SphereLoss) -> Result<Var, NnError> {
    match targets {
        Targets::Classes { labels, n_classes } => {
            let lp = g.log_softmax(out)?;
            let mut onehot = Tensor::zeros(IxDyn(&[labels.len(), *n_classes]));
            for (i, &l) in labels.iter().enumerate() {
                onehot[[i, l]] = 1.0;
            }
            let oh = g.constant(onehot);
            let picked = g.mul(lp, oh)?;
            let s = g.sum(picked);
            Ok(g.scale(s, -1.0 / labels.len() as f64))
        }
        Targets::Vectors(v) => {
            let u = unit_rows(g, out)?;
            let t = g.constant(Tensor::from_shape_vec(IxDyn(&[v.len(), 3]), v.iter().flatten().copied().collect()).unwrap());
            match sphere {
                SphereLoss::Cosine => {
                    let d = g.mul(u, t)?;
                    let cos = g.mean(d);
                    // mean over rows of 1 − cos: the element mean is cos_sum / 3n
                    let c = g.scale(cos, -3.0);
                    Ok(g.add_scalar(c, 1.0))
                }
                SphereLoss::Mse => {
                    let d = g.sub(u, t)?;
                    let sq = g.mul(d, d)?;
                    Ok(g.mean(sq))
                }
            }
        }
    }
}

impl Probe {
    fn standardize(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.feature_mean) / &self.feature_std
    }

    /// Raw outputs: logits or unnormalized 3-vectors.
    pub fn outputs(&self, x: &Array2<f64>) -> Result<Array2<f64>, EvalError> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let xv = g.constant(self.standardize(x).into_dyn());
        let y = probe_forward(&mut g, &p, xv, self.config.hidden > 0)?;
        Ok(g.value(y).clone().into_dimensionality().expect("2-D"))
    }

    pub fn predict_classes(&self, x: &Array2<f64>) -> Result<Vec<usize>, EvalError> {
        let out = self.outputs(x)?;
        Ok(out
            .rows()
            .into_iter()
            .map(|r| r.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0)
            .collect())
    }

    pub fn predict_vectors(&self, x: &Array2<f64>) -> Result<Vec<[f64; 3]>, EvalError> {
        let out = self.outputs(x)?;
        Ok(out.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect())
    }
}

fn init_probe(dim_in: usize, hidden: usize, dim_out: usize, rng: &mut rand_chacha::ChaCha8Rng) -> ParamSet {
    let mut ps = ParamSet::new();
    let mut layer = |name: &str, fi: usize, fo: usize, ps: &mut ParamSet| {
        let d = Normal::new(0.0, (2.0 / (fi + fo) as f64).sqrt()).unwrap();
        ps.insert(format!("{name}.w"), Tensor::from_shape_fn(IxDyn(&[fi, fo]), |_| d.sample(rng)));
        ps.insert(format!("{name}.b"), Tensor::zeros(IxDyn(&[fo])));
    };
    if hidden > 0 {
        layer("l1", dim_in, hidden, &mut ps);
        layer("l2", hidden, dim_out, &mut ps);
    } else {
        layer("l1", dim_in, dim_out, &mut ps);
    }
    ps
}

/// Full-batch training with early stopping on a seeded validation split; the
/// parameters with the best validation loss are kept.
pub fn train_probe(x: &Array2<f64>, targets: &Targets, cfg: &ProbeConfig) -> Result<Probe, EvalError> {
    let n = x.nrows();
    if n != targets.len() {
        return Err(EvalError::Mismatch { embeddings: n, labels: targets.len() });
    }
    if n < 2 {
        return Err(EvalError::Probe("need at least two examples".into()));
    }
    let dim_out = match (targets, cfg.kind) {
        (Targets::Classes { n_classes, labels }, ProbeKind::Classification) => {
            if labels.iter().any(|&l| l >= *n_classes) {
                return Err(EvalError::Probe("label index out of range".into()));
            }
            *n_classes
        }
        (Targets::Vectors(_), ProbeKind::RegressionUnitSphere) => 3,
        _ => return Err(EvalError::Probe("probe kind does not match label type".into())),
    };
    let mut rng = seed::rng(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((n as f64 * cfg.val_fraction).round() as usize).min(n - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();
    let mut val_idx = val_idx.to_vec();
    val_idx.sort_unstable();

    let xt = x.select(Axis(0), &train_idx);
    let mean = xt.mean_axis(Axis(0)).unwrap();
    let std = xt.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let mut probe = Probe {
        config: cfg.clone(),
        params: init_probe(x.ncols(), cfg.hidden, dim_out, &mut rng),
        feature_mean: mean,
        feature_std: std,
        epochs_run: 0,
    };
    let xt = probe.standardize(&xt);
    let xv = probe.standardize(&x.select(Axis(0), &val_idx));
    let (tt, tv) = (targets.subset(&train_idx), targets.subset(&val_idx));
    let opt_cfg = AdamWConfig { weight_decay: cfg.weight_decay, clip_norm: None, ..AdamWConfig::default() };
    let mut opt = AdamW::new(&probe.params, opt_cfg);
    let mut best = (f64::INFINITY, probe.params.clone());
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        let mut g = Graph::new();
        let p = probe.params.bind(&mut g);
        let xin = g.constant(xt.clone().into_dyn());
        let out = probe_forward(&mut g, &p, xin, cfg.hidden > 0)?;
        let loss = probe_loss(&mut g, out, &tt, cfg.sphere_loss)?;
        let grads = p.gradients(&g, &g.backward(loss)?);
        opt.step(&mut probe.params, &grads, cfg.lr)?;
        probe.epochs_run = epoch + 1;
        if val_idx.is_empty() {
            best.1 = probe.params.clone();
            continue;
        }
        let mut g = Graph::new();
        let p = probe.params.bind_frozen(&mut g);
        let xin = g.constant(xv.clone().into_dyn());
        let out = probe_forward(&mut g, &p, xin, cfg.hidden > 0)?;
        let vloss = probe_loss(&mut g, out, &tv, cfg.sphere_loss)?;
        let vl = g.value(vloss)[[]];
        if vl < best.0 {
            best = (vl, probe.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    probe.params = best.1;
    Ok(probe)
}

/// Per-task result record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub fold_values: Vec<f64>,
    /// Item ids with per-item correctness, for paired tests.
    #[serde(default)]
    pub items: Vec<ItemOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub id: String,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_deg: Option<f64>,
}

/// Held-out predictions from [`cross_validate`], in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidation {
    /// Accuracy per fold, or median DoA error for direction targets.
    pub fold_values: Vec<f64>,
    pub correct: Vec<bool>,
    pub classes: Option<Vec<usize>>,
    pub vectors: Option<Vec<[f64; 3]>>,
    pub errors_deg: Option<Vec<f64>>,
}

/// `k`-fold evaluation with a seeded permutation; every item is scored once
/// while held out.
pub fn cross_validate(x: &Array2<f64>, targets: &Targets, cfg: &ProbeConfig, folds: usize) -> Result<CrossValidation, EvalError> {
    let n = x.nrows();
    if folds < 2 || folds > n {
        return Err(EvalError::Probe(format!("{folds} folds for {n} items")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::item_seed(cfg.seed, 0xF01D)));
    let mut correct = vec![false; n];
    let mut errors = matches!(targets, Targets::Vectors(_)).then(|| vec![0.0; n]);
    let mut classes = matches!(targets, Targets::Classes { .. }).then(|| vec![0; n]);
    let mut vectors = errors.as_ref().map(|_| vec![[0.0; 3]; n]);
    let mut fold_values = Vec::with_capacity(folds);
    for k in 0..folds {
        let mut test: Vec<usize> = order.iter().enumerate().filter(|(i, _)| i % folds == k).map(|(_, &v)| v).collect();
        test.sort_unstable();
        let mut train: Vec<usize> = order.iter().enumerate().filter(|(i, _)| i % folds != k).map(|(_, &v)| v).collect();
        train.sort_unstable();
        let fold_cfg = ProbeConfig { seed: seed::item_seed(cfg.seed, k as u64), ..cfg.clone() };
        let probe = train_probe(&x.select(Axis(0), &train), &targets.subset(&train), &fold_cfg)?;
        let xs = x.select(Axis(0), &test);
        match targets {
            Targets::Classes { labels, .. } => {
                let pred = probe.predict_classes(&xs)?;
                let mut hits = 0;
                for (&i, p) in test.iter().zip(pred) {
                    correct[i] = p == labels[i];
                    classes.as_mut().unwrap()[i] = p;
                    hits += usize::from(correct[i]);
                }
                fold_values.push(hits as f64 / test.len() as f64);
            }
            Targets::Vectors(v) => {
                let pred = probe.predict_vectors(&xs)?;
                let mut errs = vec![];
                for (&i, p) in test.iter().zip(pred) {
                    let e = doa_error(v[i], p)?;
                    errors.as_mut().unwrap()[i] = e;
                    vectors.as_mut().unwrap()[i] = p;
                    correct[i] = e < 45.0;
                    errs.push(e);
                }
                fold_values.push(median(&errs));
            }
        }
    }
    Ok(CrossValidation { fold_values, correct, classes, vectors, errors_deg: errors })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub task: String,
    pub a: String,
    pub b: String,
    pub outcomes: PairedOutcomes,
    pub method: McNemarMethod,
    pub raw_p: f64,
    pub adjusted_p: f64,
    pub significant: bool,
    pub mark: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub q: f64,
    pub pairs: Vec<PairReport>,
}

/// McNemar on each pair of aligned item outcomes, then BH across pairs.
pub fn compare(pairs: &[(String, String, String, Vec<bool>, Vec<bool>)], q: f64) -> Result<ComparisonReport, EvalError> {
    let mut reports = Vec::with_capacity(pairs.len());
    for (task, a, b, ca, cb) in pairs {
        let outcomes = PairedOutcomes::from_correct(ca, cb)?;
        let m = mcnemar(&outcomes);
        reports.push(PairReport {
            task: task.clone(),
            a: a.clone(),
            b: b.clone(),
            outcomes,
            method: m.method,
            raw_p: m.p_value,
            adjusted_p: m.p_value,
            significant: false,
            mark: String::new(),
        });
    }
    let bh = fdr_bh(&reports.iter().map(|r| r.raw_p).collect::<Vec<_>>(), q)?;
    for (r, (adj, rej)) in reports.iter_mut().zip(bh.adjusted.iter().zip(&bh.rejected)) {
        r.adjusted_p = *adj;
        r.significant = *rej;
        r.mark = significance_mark(*adj).to_string();
    }
    Ok(ComparisonReport { q, pairs: reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::Rng;

    fn choose(n: u64, k: u64) -> u64 {
        (0..k).fold(1u64, |c, i| c * (n - i) / (i + 1))
    }

    #[test]
    fn doa_analytic_cases() {
        assert_eq!(doa_error([1.0, 0.0, 0.0], [1.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(doa_error([1.0, 0.0, 0.0], [0.0, 2.0, 0.0]).unwrap(), 90.0);
        assert_eq!(doa_error([0.0, 0.0, 1.0], [0.0, 0.0, -3.0]).unwrap(), 180.0);
        assert!(matches!(doa_error([1.0, 0.0, 0.0], [0.0; 3]), Err(EvalError::ZeroVector)));
    }

    #[test]
    fn mcnemar_oracles() {
        let exact = mcnemar(&PairedOutcomes { n11: 40, n10: 5, n01: 15, n00: 7 });
        let oracle = 2.0 * (0..=5).map(|k| choose(20, k)).sum::<u64>() as f64 / (1u64 << 20) as f64;
        assert_eq!(exact.method, McNemarMethod::Exact);
        assert!((exact.p_value - oracle).abs() < 1e-12);
        assert!((exact.p_value - 0.0414).abs() < 1e-4);
        let sym = mcnemar(&PairedOutcomes { n11: 3, n10: 9, n01: 9, n00: 1 });
        assert_eq!(sym.p_value, 1.0);
        let big = mcnemar(&PairedOutcomes { n11: 0, n10: 0, n01: 30, n00: 0 });
        assert_eq!(big.method, McNemarMethod::ChiSquared);
        assert!(big.p_value < 1e-6);
        let sym_big = mcnemar(&PairedOutcomes { n11: 0, n10: 20, n01: 20, n00: 0 });
        assert_eq!(sym_big.p_value, 1.0);
        let none = mcnemar(&PairedOutcomes { n11: 5, n10: 0, n01: 0, n00: 5 });
        assert_eq!((none.p_value, none.method), (1.0, McNemarMethod::NoDiscordance));
    }

    #[test]
    fn bh_oracles() {
        let r = fdr_bh(&[0.005, 0.01, 0.03, 0.04], 0.05).unwrap();
        let expect = [0.02, 0.02, 0.04, 0.04];
        assert!(r.adjusted.iter().zip(expect).all(|(a, e)| (a - e).abs() < 1e-15));
        assert_eq!(r.rejected, vec![true; 4]);
        assert_eq!(fdr_bh(&[0.3; 5], 0.05).unwrap().adjusted, vec![0.3; 5]);
        assert_eq!(fdr_bh(&[0.7], 0.05).unwrap().adjusted, vec![0.7]);
        // input order preserved
        let r = fdr_bh(&[0.04, 0.005, 0.03, 0.01], 0.05).unwrap();
        assert!(r.adjusted.iter().zip([0.04, 0.02, 0.04, 0.02]).all(|(a, e)| (a - e).abs() < 1e-15));
        assert!(matches!(fdr_bh(&[1.2], 0.05), Err(EvalError::PValue(_))));
    }

    #[test]
    fn sample_counts() {
        assert_eq!(samples_seen_steps(32, 180_000), 5_760_000);
        assert_eq!(samples_seen_steps(32, 100_000), 3_200_000);
        assert_eq!(samples_seen(1024, 1985, 100), 203_264_000);
    }

    #[test]
    fn marks() {
        assert_eq!(significance_mark(0.0005), "§");
        assert_eq!(significance_mark(0.005), "‡");
        assert_eq!(significance_mark(0.02), "†");
        assert_eq!(significance_mark(0.05), "");
    }

    fn blobs(n_per: usize, seed: u64, shuffle: bool) -> (Array2<f64>, Targets) {
        let mut rng = crate::seed::rng(seed);
        let mut x = Array2::zeros((2 * n_per, 6));
        let mut labels = vec![];
        for i in 0..2 * n_per {
            let c = i % 2;
            for j in 0..6 {
                x[[i, j]] = rng.gen_range(-1.0..1.0) + if j == 0 { 4.0 * c as f64 - 2.0 } else { 0.0 };
            }
            labels.push(c);
        }
        if shuffle {
            labels.shuffle(&mut rng);
        }
        (x, Targets::Classes { labels, n_classes: 2 })
    }

    #[test]
    fn separable_classes_are_learned() {
        let (x, t) = blobs(40, 1, false);
        let cfg = ProbeConfig { hidden: 0, lr: 1e-2, ..ProbeConfig::default() };
        let cv = cross_validate(&x, &t, &cfg, 4).unwrap();
        let (folds, correct) = (cv.fold_values, cv.correct);
        assert!(correct.iter().all(|&c| c), "{folds:?}");
        let probe = train_probe(&x, &t, &ProbeConfig { lr: 1e-2, ..ProbeConfig::default() }).unwrap();
        let Targets::Classes { labels, .. } = &t else { unreachable!() };
        assert_eq!(&probe.predict_classes(&x).unwrap(), labels);
    }

    #[test]
    fn shuffled_labels_give_chance() {
        let (x, t) = blobs(100, 2, true);
        let cfg = ProbeConfig { hidden: 0, lr: 1e-2, ..ProbeConfig::default() };
        let correct = cross_validate(&x, &t, &cfg, 5).unwrap().correct;
        let acc = correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64;
        // three binomial standard deviations around 1/2 at n = 200
        assert!((acc - 0.5).abs() < 3.0 * (0.25f64 / 200.0).sqrt(), "{acc}");
    }

    #[test]
    fn planted_direction_is_recovered() {
        let mut rng = crate::seed::rng(3);
        let n = 120;
        let mut x = Array2::zeros((n, 8));
        let mut v = vec![];
        for i in 0..n {
            let az: f64 = rng.gen_range(0.0..360.0);
            let el: f64 = rng.gen_range(-40.0..40.0);
            let d = crate::mixer::direction_vector(az, el);
            for j in 0..3 {
                x[[i, j]] = d[j];
            }
            for j in 3..8 {
                x[[i, j]] = rng.gen_range(-1.0..1.0);
            }
            v.push(d);
        }
        let cfg = ProbeConfig { kind: ProbeKind::RegressionUnitSphere, lr: 3e-3, ..ProbeConfig::default() };
        let cv = cross_validate(&x, &Targets::Vectors(v), &cfg, 4).unwrap();
        let (folds, errors) = (cv.fold_values, cv.errors_deg);
        let med = median(&errors.unwrap());
        assert!(med < 5.0, "{med} {folds:?}");
    }

    #[test]
    fn probe_is_deterministic_and_checks_inputs() {
        let (x, t) = blobs(10, 4, false);
        let cfg = ProbeConfig { epochs: 20, ..ProbeConfig::default() };
        assert_eq!(train_probe(&x, &t, &cfg).unwrap(), train_probe(&x, &t, &cfg).unwrap());
        let short = Targets::Classes { labels: vec![0; 3], n_classes: 2 };
        assert!(matches!(train_probe(&x, &short, &cfg), Err(EvalError::Mismatch { .. })));
        let wrong = ProbeConfig { kind: ProbeKind::RegressionUnitSphere, ..cfg };
        assert!(matches!(train_probe(&x, &t, &wrong), Err(EvalError::Probe(_))));
    }

    #[test]
    fn comparison_report() {
        let a: Vec<bool> = (0..60).map(|i| i % 3 != 0).collect();
        let b: Vec<bool> = (0..60).map(|i| i % 2 == 0).collect();
        let r = compare(&[("t".into(), "x".into(), "y".into(), a.clone(), b), ("u".into(), "x".into(), "y".into(), a.clone(), a)], 0.05).unwrap();
        assert_eq!(r.pairs.len(), 2);
        assert_eq!(r.pairs[1].raw_p, 1.0);
        assert!(r.pairs.iter().all(|p| p.adjusted_p >= p.raw_p));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn doa_symmetric_and_scale_invariant(a in proptest::array::uniform3(-1.0f64..1.0), b in proptest::array::uniform3(-1.0f64..1.0), s in 0.01f64..100.0) {
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            proptest::prop_assume!(na > 1e-3 && nb > 1e-3);
            let ua = a.map(|x| x / na);
            let ub = b.map(|x| x / nb);
            let e = doa_error(ua, ub).unwrap();
            prop_assert!((e - doa_error(ub, ua).unwrap()).abs() < 1e-9);
            prop_assert!((e - doa_error(ua, b.map(|x| x * s)).unwrap()).abs() < 1e-9);
            prop_assert!((0.0..=180.0).contains(&e));
        }

        #[test]
        fn mcnemar_swaps(n11 in 0u64..50, n10 in 0u64..60, n01 in 0u64..60, n00 in 0u64..50) {
            let o = PairedOutcomes { n11, n10, n01, n00 };
            let p = mcnemar(&o).p_value;
            prop_assert_eq!(p, mcnemar(&PairedOutcomes { n11: n00, n00: n11, ..o }).p_value);
            prop_assert_eq!(p, mcnemar(&PairedOutcomes { n10: n01, n01: n10, ..o }).p_value);
            prop_assert!((0.0..=1.0).contains(&p));
        }

        #[test]
        fn bh_monotone_and_dominating(p in proptest::collection::vec(0.0f64..=1.0, 1..30)) {
            let r = fdr_bh(&p, 0.05).unwrap();
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
            for w in idx.windows(2) {
                prop_assert!(r.adjusted[w[0]] <= r.adjusted[w[1]]);
            }
            for (a, raw) in r.adjusted.iter().zip(&p) {
                prop_assert!(a >= raw && *a <= 1.0);
            }
        }
    }
}
