use crate::emoe::{Router, SelectionPolicy};
use crate::error::{Error, Result};

use super::data::Sample;
use super::model::{softmax_cross_entropy, Gradients, ToyModel};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Trainable scalars compared.
    pub checked: usize,
    /// Smallest |pre-activation| and selected/unselected gate gap seen in the
    /// unperturbed forward passes.
    pub kink_margin: f64,
    pub gate_margin: f64,
}

fn batch_loss(
    model: &ToyModel<f64>,
    batch: &[Sample<f64>],
    policy: SelectionPolicy,
    k: Option<usize>,
) -> Result<f64> {
    let mut total = 0.0;
    for s in batch {
        let mut router = Router::new(policy);
        let (logits, _) = model.forward(&s.x, &mut router, k)?;
        total += softmax_cross_entropy(&logits, s.label)?.0;
    }
    Ok(total / batch.len() as f64)
}

fn analytic(
    model: &ToyModel<f64>,
    batch: &[Sample<f64>],
    policy: SelectionPolicy,
    k: Option<usize>,
) -> Result<(Gradients<f64>, f64, f64)> {
    let mut grads = Gradients::zeros_like(model);
    let (mut kink, mut gap) = (f64::INFINITY, f64::INFINITY);
    for s in batch {
        let mut router = Router::new(policy);
        let (logits, cache) = model.forward(&s.x, &mut router, k)?;
        let (_, dl) = softmax_cross_entropy(&logits, s.label)?;
        model.backward_into(&cache, &dl, &mut grads)?;
        let (a, b) = cache.margins();
        kink = kink.min(a);
        gap = gap.min(b);
    }
    grads.scale(1.0 / batch.len() as f64);
    Ok((grads, kink, gap))
}

/// Central differences `(f(θ+ε) − f(θ−ε)) / 2ε` over every trainable scalar
/// against the analytic gradient of the mean batch loss. Relative error is
/// `|a − n| / max(|a|, |n|, 1e-12)`. Random routing restarts from its seed on
/// every evaluation so selection stays fixed across perturbations.
pub fn finite_diff_check(
    model: &ToyModel<f64>,
    batch: &[Sample<f64>],
    policy: SelectionPolicy,
    k: Option<usize>,
    epsilon: f64,
) -> Result<GradCheck> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::argument("epsilon must be positive and finite"));
    }
    if batch.is_empty() {
        return Err(Error::argument("empty batch"));
    }
    let (grads, kink_margin, gate_margin) = analytic(model, batch, policy, k)?;
    let grad_slices: Vec<Vec<f64>> = grads
        .slices()
        .into_iter()
        .map(|(_, s)| s.to_vec())
        .collect();
    let groups: Vec<_> = model
        .param_slices()
        .into_iter()
        .map(|(g, s)| (g, s.len()))
        .collect();

    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (slice_idx, &(group, len)) in groups.iter().enumerate() {
        if !model.trainable.allows(group) {
            continue;
        }
        for i in 0..len {
            let original = probe.param_slices()[slice_idx].1[i];
            let eval_at = |v: f64, m: &mut ToyModel<f64>| -> Result<f64> {
                m.param_slices_mut()[slice_idx].1[i] = v;
                m.retie_gates();
                batch_loss(m, batch, policy, k)
            };
            let plus = eval_at(original + epsilon, &mut probe)?;
            let minus = eval_at(original - epsilon, &mut probe)?;
            eval_at(original, &mut probe)?;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad_slices[slice_idx][i];
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max((a - numeric).abs() / denom);
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_relative_error: worst,
        checked,
        kink_margin,
        gate_margin,
    })
}
