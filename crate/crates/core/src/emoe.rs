//! Sparse mixture-of-experts view of a dense feed-forward layer.
//!
//! Splitting groups the neurons of an [`FfnLayer`] by a [`Partition`]; each
//! group becomes an expert sub-layer. The avg-k gate scores expert `i` with
//! the mean of its key columns, which equals `N/d` times the sum of the
//! expert's pre-activations, so selecting the top-scoring experts keeps the
//! neurons most likely to fire. No parameters are added: the gate is derived
//! from the keys and must be re-derived whenever they change.

use std::fmt::Display;
use std::str::FromStr;

use crate::clustering::Partition;
use crate::error::{Error, Result};
use crate::ffn::FfnLayer;
use crate::numerics::{bottomk_indices, topk_indices, ActivationKind, Matrix, Rng, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GateMode {
    /// Gate column = mean of the expert's key columns, binary unit weights.
    AvgK,
    /// Free gate matrix (initialised from avg-k), softmax weights over the
    /// selected experts.
    Learned,
}

impl GateMode {
    pub fn code(self) -> u32 {
        match self {
            GateMode::AvgK => 0,
            GateMode::Learned => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(GateMode::AvgK),
            1 => Some(GateMode::Learned),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SelectionPolicy {
    TopK,
    BottomK,
    /// Every expert except the top k.
    NotTopK,
    /// k experts uniformly without replacement from a seeded stream.
    Random {
        seed: u64,
    },
    All,
}

impl Display for SelectionPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SelectionPolicy::TopK => f.write_str("top"),
            SelectionPolicy::BottomK => f.write_str("bottom"),
            SelectionPolicy::NotTopK => f.write_str("nottop"),
            SelectionPolicy::Random { seed } => write!(f, "random({seed})"),
            SelectionPolicy::All => f.write_str("all"),
        }
    }
}

impl FromStr for SelectionPolicy {
    type Err = Error;

    /// Parses `top`, `bottom`, `nottop`, `all`, `random` (seed 0) or
    /// `random:<seed>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(SelectionPolicy::TopK),
            "bottom" => Ok(SelectionPolicy::BottomK),
            "nottop" => Ok(SelectionPolicy::NotTopK),
            "all" => Ok(SelectionPolicy::All),
            "random" => Ok(SelectionPolicy::Random { seed: 0 }),
            other => other
                .strip_prefix("random:")
                .and_then(|seed| seed.parse().ok())
                .map(|seed| SelectionPolicy::Random { seed })
                .ok_or_else(|| Error::argument(format!("unknown selection policy '{other}'"))),
        }
    }
}

impl SelectionPolicy {
    /// Number of experts selected per token.
    pub fn selected_count(self, n_experts: usize, k: usize) -> usize {
        match self {
            SelectionPolicy::TopK | SelectionPolicy::BottomK | SelectionPolicy::Random { .. } => k,
            SelectionPolicy::NotTopK => n_experts - k,
            SelectionPolicy::All => n_experts,
        }
    }
}

/// Stateful expert selector. Only `Random` carries state: its stream advances
/// on every call, so consecutive tokens draw different expert sets.
#[derive(Debug, Clone)]
pub struct Router {
    policy: SelectionPolicy,
    rng: Option<Rng>,
}

impl Router {
    pub fn new(policy: SelectionPolicy) -> Self {
        let rng = match policy {
            SelectionPolicy::Random { seed } => Some(Rng::new(seed)),
            _ => None,
        };
        Self { policy, rng }
    }

    pub fn policy(&self) -> SelectionPolicy {
        self.policy
    }

    /// Selected expert ids in ascending order.
    pub fn select<T: Scalar>(&mut self, scores: &[T], k: usize) -> Result<Vec<usize>> {
        let n = scores.len();
        if k == 0 || k > n {
            return Err(Error::argument(format!("k = {k} must lie in 1..={n}")));
        }
        match self.policy {
            SelectionPolicy::TopK => topk_indices(scores, k),
            SelectionPolicy::BottomK => bottomk_indices(scores, k),
            SelectionPolicy::NotTopK => {
                if k == n {
                    return Err(Error::argument(format!(
                        "not-top-k needs k < N, got k = N = {n}"
                    )));
                }
                let top = topk_indices(scores, k)?;
                Ok((0..n).filter(|i| top.binary_search(i).is_err()).collect())
            }
            SelectionPolicy::Random { .. } => {
                let rng = self.rng.as_mut().expect("random router owns a generator");
                Ok(rng.sample_distinct(n, k))
            }
            SelectionPolicy::All => Ok((0..n).collect()),
        }
    }
}

/// Stateless selection; `Random` starts a fresh stream from its seed.
pub fn select_experts<T: Scalar>(
    scores: &[T],
    policy: SelectionPolicy,
    k: usize,
) -> Result<Vec<usize>> {
    Router::new(policy).select(scores, k)
}

/// One expert: a sub-layer over a subset of the original neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert<T> {
    /// Original neuron indices, ascending.
    pub neuron_indices: Vec<usize>,
    /// h × m key columns.
    pub keys: Matrix<T>,
    /// m × h value rows.
    pub values: Matrix<T>,
    pub key_bias: Option<Vec<T>>,
}

impl<T: Scalar> Expert<T> {
    pub fn size(&self) -> usize {
        self.neuron_indices.len()
    }

    pub fn pre_activations(&self, x: &[T]) -> Result<Vec<T>> {
        let mut pre = self.keys.vecmat(x)?;
        if let Some(b) = &self.key_bias {
            for (p, &bv) in pre.iter_mut().zip(b) {
                *p = *p + bv;
            }
        }
        Ok(pre)
    }

    pub fn forward(&self, x: &[T], activation: ActivationKind) -> Result<Vec<T>> {
        let hidden: Vec<T> = self
            .pre_activations(x)?
            .into_iter()
            .map(|a| activation.apply(a))
            .collect();
        self.values.vecmat(&hidden)
    }

    /// Mean key column (and mean key bias), the avg-k gate entry.
    fn mean_key(&self) -> (Vec<T>, Option<T>) {
        let m = T::from_count(self.size());
        let col: Vec<T> = (0..self.keys.rows())
            .map(|r| self.keys.row(r).iter().copied().sum::<T>() / m)
            .collect();
        let bias = self
            .key_bias
            .as_ref()
            .map(|b| b.iter().copied().sum::<T>() / m);
        (col, bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmoeLayer<T> {
    experts: Vec<Expert<T>>,
    /// h × N.
    gate: Matrix<T>,
    /// Per-expert mean key bias; present iff the experts carry key biases.
    gate_bias: Option<Vec<T>>,
    value_bias: Option<Vec<T>>,
    activation: ActivationKind,
    top_k: usize,
    gate_mode: GateMode,
}

fn softmax<T: Scalar>(scores: &[T]) -> Vec<T> {
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl<T: Scalar> EmoeLayer<T> {
    /// Splits `layer` into `partition.n_experts()` experts. Expert `i` holds
    /// the neurons of group `i` in ascending original order; the gate starts
    /// as the avg-k gate in both modes.
    pub fn split(
        layer: &FfnLayer<T>,
        partition: &Partition,
        top_k: usize,
        gate_mode: GateMode,
    ) -> Result<Self> {
        if partition.d() != layer.d() {
            return Err(Error::constraint(format!(
                "partition covers {} neurons, layer has d = {}",
                partition.d(),
                layer.d()
            )));
        }
        let n = partition.n_experts();
        if top_k == 0 || top_k > n {
            return Err(Error::argument(format!(
                "top_k = {top_k} must lie in 1..={n}"
            )));
        }
        let experts = partition
            .groups()
            .into_iter()
            .map(|idx| Expert {
                keys: layer.keys().select_columns(&idx),
                values: layer.values().select_rows(&idx),
                key_bias: layer
                    .key_bias()
                    .map(|b| idx.iter().map(|&j| b[j]).collect()),
                neuron_indices: idx,
            })
            .collect();
        let mut out = Self {
            experts,
            gate: Matrix::zeros(layer.h(), n),
            gate_bias: None,
            value_bias: layer.value_bias().map(<[T]>::to_vec),
            activation: layer.activation(),
            top_k,
            gate_mode,
        };
        out.derive_avgk_gate();
        Ok(out)
    }

    /// Assembles a layer from parts (used by deserialisation). The gate is
    /// taken as given; callers in avg-k mode should pass the derived gate.
    pub fn from_parts(
        experts: Vec<Expert<T>>,
        gate: Matrix<T>,
        gate_bias: Option<Vec<T>>,
        value_bias: Option<Vec<T>>,
        activation: ActivationKind,
        top_k: usize,
        gate_mode: GateMode,
    ) -> Result<Self> {
        let n = experts.len();
        if n == 0 {
            return Err(Error::argument("layer needs at least one expert"));
        }
        let h = gate.rows();
        if gate.cols() != n {
            return Err(Error::shape(format!(
                "gate has {} columns for {n} experts",
                gate.cols()
            )));
        }
        for (i, e) in experts.iter().enumerate() {
            let m = e.size();
            if e.keys.shape() != (h, m) || e.values.shape() != (m, h) {
                return Err(Error::shape(format!(
                    "expert {i} matrices do not match h = {h}, size {m}"
                )));
            }
            if e.key_bias.as_ref().is_some_and(|b| b.len() != m) {
                return Err(Error::shape(format!("expert {i} key bias length mismatch")));
            }
            if e.key_bias.is_some() != experts[0].key_bias.is_some() {
                return Err(Error::shape(
                    "key biases must be present on all experts or none",
                ));
            }
        }
        if gate_bias.as_ref().is_some_and(|b| b.len() != n)
            || value_bias.as_ref().is_some_and(|b| b.len() != h)
        {
            return Err(Error::shape("bias length mismatch"));
        }
        if top_k == 0 || top_k > n {
            return Err(Error::argument(format!(
                "top_k = {top_k} must lie in 1..={n}"
            )));
        }
        let out = Self {
            experts,
            gate,
            gate_bias,
            value_bias,
            activation,
            top_k,
            gate_mode,
        };
        out.partition()?;
        Ok(out)
    }

    fn derive_avgk_gate(&mut self) {
        let has_bias = self.experts[0].key_bias.is_some();
        let mut gate_bias = has_bias.then(|| Vec::with_capacity(self.experts.len()));
        for (i, expert) in self.experts.iter().enumerate() {
            let (col, bias) = expert.mean_key();
            for (r, v) in col.into_iter().enumerate() {
                self.gate.set(r, i, v);
            }
            if let (Some(gb), Some(b)) = (gate_bias.as_mut(), bias) {
                gb.push(b);
            }
        }
        self.gate_bias = gate_bias;
    }

    /// Re-derives the avg-k gate from the current expert keys. Must follow any
    /// key update in avg-k mode; a learned gate is left untouched.
    pub fn retie_gate(&mut self) {
        if self.gate_mode == GateMode::AvgK {
            self.derive_avgk_gate();
        }
    }

    pub fn h(&self) -> usize {
        self.gate.rows()
    }

    pub fn d(&self) -> usize {
        self.experts.iter().map(Expert::size).sum()
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn set_top_k(&mut self, k: usize) -> Result<()> {
        if k == 0 || k > self.n_experts() {
            return Err(Error::argument(format!(
                "top_k = {k} must lie in 1..={}",
                self.n_experts()
            )));
        }
        self.top_k = k;
        Ok(())
    }

    pub fn gate_mode(&self) -> GateMode {
        self.gate_mode
    }

    pub fn activation(&self) -> ActivationKind {
        self.activation
    }

    pub fn experts(&self) -> &[Expert<T>] {
        &self.experts
    }

    /// Direct access for in-place weight updates. In avg-k mode call
    /// [`retie_gate`](Self::retie_gate) after changing keys.
    pub fn experts_mut(&mut self) -> &mut [Expert<T>] {
        &mut self.experts
    }

    pub fn gate(&self) -> &Matrix<T> {
        &self.gate
    }

    pub fn gate_mut(&mut self) -> &mut Matrix<T> {
        &mut self.gate
    }

    pub fn gate_bias(&self) -> Option<&[T]> {
        self.gate_bias.as_deref()
    }

    pub fn value_bias(&self) -> Option<&[T]> {
        self.value_bias.as_deref()
    }

    pub fn value_bias_mut(&mut self) -> Option<&mut Vec<T>> {
        self.value_bias.as_mut()
    }

    /// Simultaneous mutable access to experts, gate and value bias.
    pub fn parts_mut(&mut self) -> (&mut [Expert<T>], &mut Matrix<T>, Option<&mut Vec<T>>) {
        (&mut self.experts, &mut self.gate, self.value_bias.as_mut())
    }

    /// Neuron-to-expert assignment recovered from the experts' index sets.
    pub fn partition(&self) -> Result<Partition> {
        let d = self.d();
        let mut assignment = vec![usize::MAX; d];
        for (e, expert) in self.experts.iter().enumerate() {
            for &j in &expert.neuron_indices {
                if j >= d || assignment[j] != usize::MAX {
                    return Err(Error::constraint(format!(
                        "neuron index {j} of expert {e} is out of range or duplicated"
                    )));
                }
                assignment[j] = e;
            }
        }
        Partition::new(assignment, self.n_experts())
    }

    /// `x·G` plus the mean key bias per expert.
    pub fn gate_scores(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.h() {
            return Err(Error::shape(format!(
                "input length {} != h = {}",
                x.len(),
                self.h()
            )));
        }
        let mut scores = self.gate.vecmat(x)?;
        if let Some(b) = &self.gate_bias {
            for (s, &bv) in scores.iter_mut().zip(b) {
                *s = *s + bv;
            }
        }
        Ok(scores)
    }

    /// Weight of each selected expert: 1 in avg-k mode, softmax over the
    /// selected scores in learned mode.
    pub fn expert_weights(&self, scores: &[T], selected: &[usize]) -> Vec<T> {
        match self.gate_mode {
            GateMode::AvgK => vec![T::one(); selected.len()],
            GateMode::Learned => softmax(&selected.iter().map(|&i| scores[i]).collect::<Vec<_>>()),
        }
    }

    /// Stateless forward; `k` overrides the stored `top_k`.
    pub fn forward(
        &self,
        x: &[T],
        policy: SelectionPolicy,
        k: Option<usize>,
    ) -> Result<(Vec<T>, Vec<usize>)> {
        self.forward_routed(x, &mut Router::new(policy), k)
    }

    /// Forward pass selecting experts through `router`. Selected experts are
    /// summed in ascending expert order.
    pub fn forward_routed(
        &self,
        x: &[T],
        router: &mut Router,
        k: Option<usize>,
    ) -> Result<(Vec<T>, Vec<usize>)> {
        let scores = self.gate_scores(x)?;
        let selected = router.select(&scores, k.unwrap_or(self.top_k))?;
        let weights = self.expert_weights(&scores, &selected);
        let mut y = vec![T::zero(); self.h()];
        for (&i, &w) in selected.iter().zip(&weights) {
            let out = self.experts[i].forward(x, self.activation)?;
            for (o, v) in y.iter_mut().zip(out) {
                *o = *o + w * v;
            }
        }
        if let Some(b) = &self.value_bias {
            for (o, &bv) in y.iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        Ok((y, selected))
    }

    /// Writes every expert's columns and rows back to their original indices.
    pub fn merge(&self) -> Result<FfnLayer<T>> {
        self.partition()?;
        let (h, d) = (self.h(), self.d());
        let mut keys = Matrix::zeros(h, d);
        let mut values = Matrix::zeros(d, h);
        let mut key_bias = self.experts[0]
            .key_bias
            .as_ref()
            .map(|_| vec![T::zero(); d]);
        for e in &self.experts {
            if e.keys.shape() != (h, e.size()) || e.values.shape() != (e.size(), h) {
                return Err(Error::constraint(
                    "expert matrices do not match its index set",
                ));
            }
            for (c, &j) in e.neuron_indices.iter().enumerate() {
                for r in 0..h {
                    keys.set(r, j, e.keys.get(r, c));
                }
                values.row_mut(j).copy_from_slice(e.values.row(c));
                if let (Some(kb), Some(eb)) = (key_bias.as_mut(), e.key_bias.as_ref()) {
                    kb[j] = eb[c];
                }
            }
        }
        FfnLayer::new(keys, values, self.activation)?.with_biases(key_bias, self.value_bias.clone())
    }

    /// Keeps only the experts in `keep`. Surviving neurons are renumbered by
    /// their rank among the kept original indices, so the pruned layer merges
    /// into a dense layer of size `|keep| · d/N`.
    pub fn prune(&self, keep: &[usize]) -> Result<Self> {
        let mut keep = keep.to_vec();
        keep.sort_unstable();
        keep.dedup();
        if keep.is_empty() {
            return Err(Error::argument("prune needs at least one expert to keep"));
        }
        if let Some(&bad) = keep.iter().find(|&&i| i >= self.n_experts()) {
            return Err(Error::argument(format!(
                "expert {bad} out of range for N = {}",
                self.n_experts()
            )));
        }
        let mut kept_neurons: Vec<usize> = keep
            .iter()
            .flat_map(|&i| self.experts[i].neuron_indices.iter().copied())
            .collect();
        kept_neurons.sort_unstable();
        let rank = |j: usize| kept_neurons.binary_search(&j).expect("kept neuron");
        let experts = keep
            .iter()
            .map(|&i| {
                let mut e = self.experts[i].clone();
                e.neuron_indices = e.neuron_indices.iter().map(|&j| rank(j)).collect();
                e
            })
            .collect::<Vec<_>>();
        let n_kept = experts.len();
        Ok(Self {
            experts,
            gate: self.gate.select_columns(&keep),
            gate_bias: self
                .gate_bias
                .as_ref()
                .map(|b| keep.iter().map(|&i| b[i]).collect()),
            value_bias: self.value_bias.clone(),
            activation: self.activation,
            top_k: self.top_k.min(n_kept),
            gate_mode: self.gate_mode,
        })
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        fn vec_eq<T: Scalar>(a: Option<&Vec<T>>, b: Option<&Vec<T>>) -> bool {
            match (a, b) {
                (None, None) => true,
                (Some(a), Some(b)) => {
                    a.len() == b.len()
                        && a.iter()
                            .zip(b)
                            .all(|(x, y)| x.to_bits_u64() == y.to_bits_u64())
                }
                _ => false,
            }
        }
        self.activation == other.activation
            && self.top_k == other.top_k
            && self.gate_mode == other.gate_mode
            && self.gate.bitwise_eq(&other.gate)
            && vec_eq(self.gate_bias.as_ref(), other.gate_bias.as_ref())
            && vec_eq(self.value_bias.as_ref(), other.value_bias.as_ref())
            && self.experts.len() == other.experts.len()
            && self.experts.iter().zip(&other.experts).all(|(a, b)| {
                a.neuron_indices == b.neuron_indices
                    && a.keys.bitwise_eq(&b.keys)
                    && a.values.bitwise_eq(&b.values)
                    && vec_eq(a.key_bias.as_ref(), b.key_bias.as_ref())
            })
    }
}
