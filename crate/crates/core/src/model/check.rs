//! Finite-difference verification of the full model gradient.

use super::{make_mask, patch_values, segment_loss, Backbone, Model, ModelConfig, ModelError, Strategy};
use crate::nn::gradcheck::{random_tensor, relative_error, FD_STEP};
use crate::nn::params::ParamSet;
use crate::nn::{Graph, Tensor};

fn loss_value(ps: &ParamSet, cfg: &ModelConfig, patches: &ndarray::Array2<f64>, mask: &super::MaskPlan) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let p = ps.bind_frozen(&mut g);
    let (l, _) = segment_loss(&mut g, &p, cfg, patches, mask)?;
    Ok(g.value(l)[[]])
}

/// Central differences against backprop for every parameter of the tiny model.
/// Returns the worst per-tensor relative error and the tensor's name.
pub fn end_to_end(strategy: Strategy, backbone: Backbone) -> Result<(f64, String), ModelError> {
    let cfg = ModelConfig::tiny(strategy, backbone);
    let mut model = Model::init(cfg.clone(), 11)?;
    // larger steps so the state-decay gradients sit well above finite-difference noise
    for (name, t) in model.params.clone().iter() {
        if name.ends_with("dt_proj.b") {
            model.params.get_mut(name).expect("listed").assign(&t.mapv(|v| v + 2.0));
        }
    }
    let [c, t, f] = cfg.patch.input;
    let x = random_tensor(&[c, t, f], 12).into_dimensionality().expect("3-D");
    let patches = patch_values(x.view(), &cfg.patch)?;
    let mask = make_mask(cfg.patch.n_tokens(), cfg.mask_ratio, 13);

    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let (l, _) = segment_loss(&mut g, &p, &cfg, &patches, &mask)?;
    let grads = p.gradients(&g, &g.backward(l)?);

    let names: Vec<String> = model.params.names().cloned().collect();
    let mut worst = (0.0, String::new());
    let mut ps = model.params.clone();
    for (k, name) in names.iter().enumerate() {
        let mut numeric = Tensor::zeros(grads[k].raw_dim());
        for i in 0..numeric.len() {
            let orig = model.params.get(name).expect("listed").as_slice().expect("contiguous")[i];
            let set = |ps: &mut ParamSet, v: f64| ps.get_mut(name).expect("listed").as_slice_mut().expect("contiguous")[i] = v;
            set(&mut ps, orig + FD_STEP);
            let lp = loss_value(&ps, &cfg, &patches, &mask)?;
            set(&mut ps, orig - FD_STEP);
            let lm = loss_value(&ps, &cfg, &patches, &mask)?;
            set(&mut ps, orig);
            numeric.as_slice_mut().expect("contiguous")[i] = (lp - lm) / (2.0 * FD_STEP);
        }
        let err = relative_error(&grads[k], &numeric);
        if !(err <= worst.0) {
            worst = (err, name.clone());
        }
    }
    Ok(worst)
}
