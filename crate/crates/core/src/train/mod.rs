//! Deterministic toy fine-tuning harness with hand-written gradients.

mod convert;
mod data;
mod experiment;
mod gradcheck;
mod model;
mod optim;

use std::fmt::Write as _;

pub use convert::{convert_emoe2lora, convert_lora2emoe};
pub use data::{make_toy_dataset, Dataset, Sample, ToyTaskSpec};
pub use experiment::{
    cluster_partitions, run_toy, Construction, ToyExperiment, ToyOutcome, TuneMode,
};
pub use gradcheck::{finite_diff_check, GradCheck};
pub use model::{
    argmax, softmax_cross_entropy, Adapter, Block, BlockLayer, Cache, Gradients, ModelSpec,
    ParamGroup, ToyModel, Trainable,
};
pub use optim::{Optimizer, OptimizerKind};

use crate::emoe::{Router, SelectionPolicy};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Scalar};
use crate::stats::UsageHistogram;

/// Fraction of the dataset held out for testing.
pub const HELD_OUT: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub policy: SelectionPolicy,
    /// Overrides each split block's stored top-k when set.
    pub k: Option<usize>,
    /// Steps per usage-histogram window.
    pub log_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 16,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            policy: SelectionPolicy::TopK,
            k: None,
            log_window: 100,
        }
    }
}

/// Record of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    /// Mean minibatch loss per step.
    pub losses: Vec<f64>,
    /// Per split block, one histogram per window of `log_window` steps.
    pub usage: Vec<Vec<UsageHistogram>>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

impl TrainLog {
    /// `step,loss` lines.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(out, "{i},{l}");
        }
        out
    }

    /// `block,window,expert_0,...` lines of raw selection counts.
    pub fn usage_csv(&self) -> String {
        let n = self
            .usage
            .iter()
            .flatten()
            .map(|h| h.n_experts())
            .max()
            .unwrap_or(0);
        let mut out = String::from("block,window");
        for i in 0..n {
            let _ = write!(out, ",expert_{i}");
        }
        out.push('\n');
        for (b, windows) in self.usage.iter().enumerate() {
            for (w, hist) in windows.iter().enumerate() {
                let _ = write!(out, "{b},{w}");
                for c in &hist.counts {
                    let _ = write!(out, ",{c}");
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Mean loss and gradients over a batch, accumulated in sample order.
pub fn batch_gradients<T: Scalar>(
    model: &ToyModel<T>,
    samples: &[&Sample<T>],
    router: &mut Router,
    k: Option<usize>,
    mut on_selection: impl FnMut(&[Vec<usize>]),
) -> Result<(T, Gradients<T>)> {
    if samples.is_empty() {
        return Err(Error::argument("empty batch"));
    }
    let mut grads = Gradients::zeros_like(model);
    let mut loss = T::zero();
    for s in samples {
        let (logits, cache) = model.forward(&s.x, router, k)?;
        let (l, dl) = softmax_cross_entropy(&logits, s.label)?;
        loss = loss + l;
        model.backward_into(&cache, &dl, &mut grads)?;
        on_selection(&cache.selected());
    }
    let inv = T::one() / T::from_count(samples.len());
    grads.scale(inv);
    Ok((loss * inv, grads))
}

/// Fraction of samples whose argmax logit matches the label.
pub fn evaluate<T: Scalar>(
    model: &ToyModel<T>,
    data: &Dataset<T>,
    policy: SelectionPolicy,
    k: Option<usize>,
) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut router = Router::new(policy);
    let mut correct = 0usize;
    for s in &data.samples {
        let (logits, _) = model.forward(&s.x, &mut router, k)?;
        if argmax(&logits) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Minibatch training on 80% of `dataset`; accuracies are reported on both
/// parts with the training policy.
pub fn train<T: Scalar>(
    mut model: ToyModel<T>,
    dataset: &Dataset<T>,
    config: &TrainConfig,
) -> Result<(ToyModel<T>, TrainLog)> {
    if config.batch_size == 0 || config.log_window == 0 {
        return Err(Error::argument(
            "batch_size and log_window must be positive",
        ));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate >= 0.0) {
        return Err(Error::argument(
            "learning_rate must be finite and non-negative",
        ));
    }
    let (train_set, test_set) = dataset.split(HELD_OUT, config.seed);
    if train_set.is_empty() {
        return Err(Error::argument("training split is empty"));
    }
    let root = Rng::new(config.seed);
    let mut order_rng = root.derive(1);
    let mut router = Router::new(config.policy);
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);

    let moe_blocks: Vec<usize> = model
        .blocks
        .iter()
        .enumerate()
        .filter(|(_, b)| b.is_emoe())
        .map(|(i, _)| i)
        .collect();
    let n_experts: Vec<usize> = moe_blocks
        .iter()
        .map(|&i| match &model.blocks[i].layer {
            BlockLayer::Emoe(e) => e.n_experts(),
            BlockLayer::Dense(_) => 0,
        })
        .collect();
    let mut usage: Vec<Vec<UsageHistogram>> = vec![Vec::new(); moe_blocks.len()];

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let window = step / config.log_window;
        for (b, hists) in usage.iter_mut().enumerate() {
            if hists.len() <= window {
                hists.push(UsageHistogram::new(n_experts[b]).with_window(window));
            }
        }
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order_rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(&train_set.samples[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads) = batch_gradients(&model, &batch, &mut router, config.k, |sel| {
            for (b, &blk) in moe_blocks.iter().enumerate() {
                usage[b][window].record(&sel[blk]);
            }
        })
        .map_err(|e| match e {
            Error::Training { .. } => e,
            other => Error::Training {
                step,
                message: other.to_string(),
            },
        })?;
        let loss = loss.as_f64();
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                message: format!("loss is {loss}"),
            });
        }
        losses.push(loss);
        optimizer.step(&mut model, &grads);
        if model
            .param_slices()
            .iter()
            .any(|(_, s)| s.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Training {
                step,
                message: "non-finite parameter after update".into(),
            });
        }
    }
    let train_accuracy = evaluate(&model, &train_set, config.policy, config.k)?;
    let test_accuracy = evaluate(&model, &test_set, config.policy, config.k)?;
    Ok((
        model,
        TrainLog {
            losses,
            usage,
            train_accuracy,
            test_accuracy,
        },
    ))
}
