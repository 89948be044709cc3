//! Activation ratios, expert usage histograms and heatmaps, and per-token
//! multiply-accumulate accounting.

use std::fmt::Write as _;

use crate::clustering::Partition;
use crate::emoe::{EmoeLayer, Router, SelectionPolicy};
use crate::error::{Error, Result};
use crate::ffn::FfnLayer;
use crate::numerics::Scalar;

/// How much of a token's activation falls inside the selected experts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationRatios {
    /// activated_selected / activated_total, or 0 when nothing fired.
    pub plain: f64,
    /// Share of post-σ activation mass carried by the selected experts.
    pub weighted: f64,
    pub activated_total: usize,
    pub activated_selected: usize,
}

/// A neuron counts as activated when its pre-activation is strictly positive.
pub fn activation_ratios<T: Scalar>(
    layer: &FfnLayer<T>,
    partition: &Partition,
    x: &[T],
    selected: &[usize],
) -> Result<ActivationRatios> {
    if partition.d() != layer.d() {
        return Err(Error::shape(format!(
            "partition covers {} neurons, layer has d = {}",
            partition.d(),
            layer.d()
        )));
    }
    let mut in_selection = vec![false; partition.n_experts()];
    for &e in selected {
        *in_selection
            .get_mut(e)
            .ok_or_else(|| Error::argument(format!("expert {e} out of range")))? = true;
    }
    let pre = layer.pre_activations(x)?;
    let (mut total, mut chosen) = (0usize, 0usize);
    let (mut mass_total, mut mass_chosen) = (0.0f64, 0.0f64);
    for (&a, &e) in pre.iter().zip(partition.assignment()) {
        if a > T::zero() {
            let mass = layer.activation().apply(a).as_f64();
            total += 1;
            mass_total += mass;
            if in_selection[e] {
                chosen += 1;
                mass_chosen += mass;
            }
        }
    }
    Ok(ActivationRatios {
        plain: if total > 0 {
            chosen as f64 / total as f64
        } else {
            0.0
        },
        weighted: if mass_total > 0.0 {
            mass_chosen / mass_total
        } else {
            0.0
        },
        activated_total: total,
        activated_selected: chosen,
    })
}

/// Selection counts per expert over a run of tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageHistogram {
    pub counts: Vec<usize>,
    pub tokens_seen: usize,
    /// Training-step window this histogram covers, if any.
    pub window: Option<usize>,
}

impl UsageHistogram {
    pub fn new(n_experts: usize) -> Self {
        Self {
            counts: vec![0; n_experts],
            tokens_seen: 0,
            window: None,
        }
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = Some(window);
        self
    }

    pub fn n_experts(&self) -> usize {
        self.counts.len()
    }

    pub fn record(&mut self, selected: &[usize]) {
        self.tokens_seen += 1;
        for &e in selected {
            self.counts[e] += 1;
        }
    }

    /// Sums another histogram into this one (sharded accumulation).
    pub fn absorb(&mut self, other: &UsageHistogram) -> Result<()> {
        if other.n_experts() != self.n_experts() {
            return Err(Error::constraint("histograms disagree on N"));
        }
        self.tokens_seen += other.tokens_seen;
        for (c, o) in self.counts.iter_mut().zip(&other.counts) {
            *c += o;
        }
        Ok(())
    }

    /// Counts divided by tokens; zeros for an empty histogram.
    pub fn frequencies(&self) -> Vec<f64> {
        if self.tokens_seen == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts
            .iter()
            .map(|&c| c as f64 / self.tokens_seen as f64)
            .collect()
    }

    /// The `n_keep` most frequently selected experts (ties to the lower id),
    /// ascending. This is the keep set for frequency-based pruning.
    pub fn most_used(&self, n_keep: usize) -> Result<Vec<usize>> {
        if n_keep == 0 || n_keep > self.n_experts() {
            return Err(Error::argument(format!(
                "n_keep = {n_keep} must lie in 1..={}",
                self.n_experts()
            )));
        }
        let mut order: Vec<usize> = (0..self.n_experts()).collect();
        order.sort_by(|&a, &b| self.counts[b].cmp(&self.counts[a]).then(a.cmp(&b)));
        order.truncate(n_keep);
        order.sort_unstable();
        Ok(order)
    }
}

/// Routes every input through `emoe` and counts expert selections.
pub fn usage_histogram<T: Scalar>(
    emoe: &EmoeLayer<T>,
    inputs: &[Vec<T>],
    policy: SelectionPolicy,
    k: usize,
) -> Result<UsageHistogram> {
    if inputs.is_empty() {
        return Err(Error::argument("usage histogram needs at least one input"));
    }
    let mut router = Router::new(policy);
    let mut hist = UsageHistogram::new(emoe.n_experts());
    for x in inputs {
        let scores = emoe.gate_scores(x)?;
        hist.record(&router.select(&scores, k)?);
    }
    Ok(hist)
}

/// Task × expert table of selection frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub tasks: Vec<String>,
    pub n_experts: usize,
    /// Per-row counts / tokens; a row sums to the experts selected per token.
    pub frequencies: Vec<Vec<f64>>,
    pub counts: Vec<Vec<usize>>,
}

pub fn export_heatmap(histograms: &[(String, UsageHistogram)]) -> Result<Heatmap> {
    let n = histograms.first().map_or(0, |(_, h)| h.n_experts());
    let mut out = Heatmap {
        tasks: Vec::with_capacity(histograms.len()),
        n_experts: n,
        frequencies: Vec::with_capacity(histograms.len()),
        counts: Vec::with_capacity(histograms.len()),
    };
    for (name, hist) in histograms {
        if hist.n_experts() != n {
            return Err(Error::constraint(format!(
                "task '{name}' has {} experts, expected {n}",
                hist.n_experts()
            )));
        }
        if name.contains([',', '\n', '\r']) {
            return Err(Error::argument(format!(
                "task name {name:?} contains a delimiter"
            )));
        }
        out.tasks.push(name.clone());
        out.frequencies.push(hist.frequencies());
        out.counts.push(hist.counts.clone());
    }
    Ok(out)
}

impl Heatmap {
    fn header(&self) -> String {
        let mut line = String::from("task");
        for e in 0..self.n_experts {
            let _ = write!(line, ",expert_{e}");
        }
        line
    }

    /// Comma-separated frequencies with a `task,expert_0,...` header.
    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for (task, row) in self.tasks.iter().zip(&self.frequencies) {
            out.push_str(task);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Same layout with raw selection counts.
    pub fn counts_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for (task, row) in self.tasks.iter().zip(&self.counts) {
            out.push_str(task);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Per-token multiply-accumulate counts for dense vs. sparse execution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopsReport {
    /// 2·h·d: x·K plus σ(·)·V.
    pub dense_macs: u64,
    /// 2·h·(d/N)·k + h·N.
    pub sparse_macs: u64,
    /// h·N for x·G.
    pub gate_macs: u64,
    pub ratio: f64,
}

pub fn flops_report(h: usize, d: usize, n_experts: usize, k: usize) -> Result<FlopsReport> {
    if h == 0 || d == 0 || n_experts == 0 || k == 0 {
        return Err(Error::argument("h, d, N and k must be positive"));
    }
    if k > n_experts {
        return Err(Error::argument(format!("k = {k} exceeds N = {n_experts}")));
    }
    if !d.is_multiple_of(n_experts) {
        return Err(Error::argument(format!(
            "d = {d} is not divisible by N = {n_experts}"
        )));
    }
    let (h, d, n, k) = (h as u64, d as u64, n_experts as u64, k as u64);
    let dense = 2 * h * d;
    let gate = h * n;
    let sparse = 2 * h * (d / n) * k + gate;
    Ok(FlopsReport {
        dense_macs: dense,
        sparse_macs: sparse,
        gate_macs: gate,
        ratio: sparse as f64 / dense as f64,
    })
}
