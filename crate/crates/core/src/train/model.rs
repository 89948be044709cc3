//! Toy classifier: input projection (optionally with a low-rank adapter), a
//! stack of feed-forward blocks (dense or split), and a linear head. Forward
//! keeps everything backward needs; backward is written out by hand.

use crate::emoe::{EmoeLayer, GateMode, Router};
use crate::error::{Error, Result};
use crate::ffn::FfnLayer;
use crate::numerics::{ActivationKind, Matrix, Rng, Scalar};

/// Low-rank update of the input projection: effective weight is
/// `W + (alpha / r)·B·A`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter<T> {
    /// r × h_in.
    pub a: Matrix<T>,
    /// h × r, zero at initialisation.
    pub b: Matrix<T>,
    pub alpha: T,
}

impl<T: Scalar> Adapter<T> {
    pub fn new(h: usize, h_in: usize, rank: usize, alpha: f64, rng: &mut Rng) -> Self {
        Self {
            a: Matrix::random_normal(rank, h_in, 1.0 / (h_in as f64).sqrt(), rng),
            b: Matrix::zeros(h, rank),
            alpha: T::lit(alpha),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn scale(&self) -> T {
        self.alpha / T::from_count(self.rank())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockLayer<T> {
    Dense(FfnLayer<T>),
    Emoe(EmoeLayer<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub layer: BlockLayer<T>,
    /// Adds the block input to its output.
    pub residual: bool,
}

impl<T: Scalar> Block<T> {
    pub fn is_emoe(&self) -> bool {
        matches!(self.layer, BlockLayer::Emoe(_))
    }
}

/// Which parameter groups the optimiser may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub input_proj: bool,
    pub adapter: bool,
    /// Keys, values and biases of every block.
    pub ffn: bool,
    /// Learned gates only; avg-k gates are always derived from the keys.
    pub gate: bool,
    pub head: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        input_proj: true,
        adapter: true,
        ffn: true,
        gate: true,
        head: true,
    };

    /// Frozen backbone: only the adapter, learned gates and head move.
    pub const ADAPTER: Trainable = Trainable {
        input_proj: false,
        adapter: true,
        ffn: false,
        gate: true,
        head: true,
    };

    pub fn allows(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::InputProj => self.input_proj,
            ParamGroup::Adapter => self.adapter,
            ParamGroup::Ffn => self.ffn,
            ParamGroup::Gate => self.gate,
            ParamGroup::Head => self.head,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    InputProj,
    Adapter,
    Ffn,
    Gate,
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<T> {
    /// h × h_in.
    pub input_proj: Matrix<T>,
    pub adapter: Option<Adapter<T>>,
    pub blocks: Vec<Block<T>>,
    /// n_classes × h.
    pub head: Matrix<T>,
    pub trainable: Trainable,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub h_in: usize,
    pub h: usize,
    pub d: usize,
    pub n_blocks: usize,
    pub n_classes: usize,
    pub activation: ActivationKind,
    pub residual: bool,
}

#[derive(Debug, Clone)]
enum BlockCache<T> {
    Dense {
        pre: Vec<T>,
    },
    Emoe {
        scores: Vec<T>,
        selected: Vec<usize>,
        weights: Vec<T>,
        /// Pre-activations and raw outputs of each selected expert.
        pre: Vec<Vec<T>>,
        out: Vec<Vec<T>>,
    },
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct Cache<T> {
    fingerprint: u64,
    input: Vec<T>,
    /// `A·x` when an adapter is attached.
    adapter_mid: Option<Vec<T>>,
    /// Block inputs; the last entry is the head input.
    activations: Vec<Vec<T>>,
    blocks: Vec<BlockCache<T>>,
    pub logits: Vec<T>,
}

impl<T: Scalar> Cache<T> {
    /// Experts selected in each split block (empty for dense blocks).
    pub fn selected(&self) -> Vec<Vec<usize>> {
        self.blocks
            .iter()
            .map(|b| match b {
                BlockCache::Dense { .. } => Vec::new(),
                BlockCache::Emoe { selected, .. } => selected.clone(),
            })
            .collect()
    }

    /// Smallest |pre-activation| over every neuron evaluated, and smallest gap
    /// between a selected and an unselected gate score. Finite-difference
    /// checks reject inputs where either is tiny.
    pub fn margins(&self) -> (f64, f64) {
        let mut kink = f64::INFINITY;
        let mut gap = f64::INFINITY;
        for b in &self.blocks {
            match b {
                BlockCache::Dense { pre } => {
                    kink = pre.iter().fold(kink, |m, v| m.min(v.as_f64().abs()));
                }
                BlockCache::Emoe {
                    scores,
                    selected,
                    pre,
                    ..
                } => {
                    kink = pre
                        .iter()
                        .flatten()
                        .fold(kink, |m, v| m.min(v.as_f64().abs()));
                    for (i, s) in scores.iter().enumerate() {
                        if selected.contains(&i) {
                            continue;
                        }
                        for &j in selected {
                            gap = gap.min((scores[j].as_f64() - s.as_f64()).abs());
                        }
                    }
                }
            }
        }
        (kink, gap)
    }
}

fn axpy<T: Scalar>(y: &mut [T], alpha: T, x: &[T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o = *o + alpha * v;
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Gradient buffers with the same structure as the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    inner: ToyModel<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(model: &ToyModel<T>) -> Self {
        let mut inner = model.clone();
        for (_, s) in inner.param_slices_mut() {
            s.iter_mut().for_each(|v| *v = T::zero());
        }
        Self { inner }
    }

    /// Gradient buffers laid out like the model's parameters.
    pub fn as_model(&self) -> &ToyModel<T> {
        &self.inner
    }

    pub fn slices(&self) -> Vec<(ParamGroup, &[T])> {
        self.inner.param_slices()
    }

    pub fn scale(&mut self, alpha: T) {
        for (_, s) in self.inner.param_slices_mut() {
            s.iter_mut().for_each(|v| *v = *v * alpha);
        }
    }

    pub fn add(&mut self, other: &Gradients<T>) {
        for ((_, dst), (_, src)) in self
            .inner
            .param_slices_mut()
            .into_iter()
            .zip(other.inner.param_slices())
        {
            axpy(dst, T::one(), src);
        }
    }
}

impl<T: Scalar> ToyModel<T> {
    /// Random dense model with every group trainable and no adapter.
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        if spec.h_in == 0 || spec.h == 0 || spec.d == 0 || spec.n_classes == 0 {
            return Err(Error::argument("model dimensions must be positive"));
        }
        let mut rng = Rng::new(seed);
        let input_proj =
            Matrix::random_normal(spec.h, spec.h_in, 1.0 / (spec.h_in as f64).sqrt(), &mut rng);
        let blocks = (0..spec.n_blocks)
            .map(|_| Block {
                layer: BlockLayer::Dense(FfnLayer::random(
                    spec.h,
                    spec.d,
                    spec.activation,
                    &mut rng,
                )),
                residual: spec.residual,
            })
            .collect();
        let head = Matrix::random_normal(
            spec.n_classes,
            spec.h,
            1.0 / (spec.h as f64).sqrt(),
            &mut rng,
        );
        Ok(Self {
            input_proj,
            adapter: None,
            blocks,
            head,
            trainable: Trainable::ALL,
        })
    }

    pub fn h(&self) -> usize {
        self.input_proj.rows()
    }

    pub fn h_in(&self) -> usize {
        self.input_proj.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.head.rows()
    }

    /// `W + (alpha/r)·B·A`, or `W` without an adapter.
    pub fn effective_input_proj(&self) -> Result<Matrix<T>> {
        match &self.adapter {
            None => Ok(self.input_proj.clone()),
            Some(ad) => self.input_proj.add(&ad.b.matmul(&ad.a)?.scale(ad.scale())),
        }
    }

    /// Every parameter buffer in a fixed order, tagged with its group. Avg-k
    /// gates are derived from keys and are not listed.
    pub fn param_slices(&self) -> Vec<(ParamGroup, &[T])> {
        let mut out: Vec<(ParamGroup, &[T])> =
            vec![(ParamGroup::InputProj, self.input_proj.data())];
        if let Some(ad) = &self.adapter {
            out.push((ParamGroup::Adapter, ad.a.data()));
            out.push((ParamGroup::Adapter, ad.b.data()));
        }
        for block in &self.blocks {
            match &block.layer {
                BlockLayer::Dense(f) => {
                    out.push((ParamGroup::Ffn, f.keys().data()));
                    out.push((ParamGroup::Ffn, f.values().data()));
                    if let Some(b) = f.key_bias() {
                        out.push((ParamGroup::Ffn, b));
                    }
                    if let Some(b) = f.value_bias() {
                        out.push((ParamGroup::Ffn, b));
                    }
                }
                BlockLayer::Emoe(e) => {
                    for ex in e.experts() {
                        out.push((ParamGroup::Ffn, ex.keys.data()));
                        out.push((ParamGroup::Ffn, ex.values.data()));
                        if let Some(b) = &ex.key_bias {
                            out.push((ParamGroup::Ffn, b));
                        }
                    }
                    if let Some(b) = e.value_bias() {
                        out.push((ParamGroup::Ffn, b));
                    }
                    if e.gate_mode() == GateMode::Learned {
                        out.push((ParamGroup::Gate, e.gate().data()));
                    }
                }
            }
        }
        out.push((ParamGroup::Head, self.head.data()));
        out
    }

    /// Mutable counterpart of [`param_slices`](Self::param_slices), same order.
    pub fn param_slices_mut(&mut self) -> Vec<(ParamGroup, &mut [T])> {
        let mut out: Vec<(ParamGroup, &mut [T])> =
            vec![(ParamGroup::InputProj, self.input_proj.data_mut())];
        if let Some(ad) = &mut self.adapter {
            out.push((ParamGroup::Adapter, ad.a.data_mut()));
            out.push((ParamGroup::Adapter, ad.b.data_mut()));
        }
        for block in &mut self.blocks {
            match &mut block.layer {
                BlockLayer::Dense(f) => {
                    let (keys, values, kb, vb) = f.parts_mut();
                    out.push((ParamGroup::Ffn, keys.data_mut()));
                    out.push((ParamGroup::Ffn, values.data_mut()));
                    if let Some(b) = kb {
                        out.push((ParamGroup::Ffn, b.as_mut_slice()));
                    }
                    if let Some(b) = vb {
                        out.push((ParamGroup::Ffn, b.as_mut_slice()));
                    }
                }
                BlockLayer::Emoe(e) => {
                    let learned = e.gate_mode() == GateMode::Learned;
                    let (experts, gate, vb) = e.parts_mut();
                    for ex in experts.iter_mut() {
                        out.push((ParamGroup::Ffn, ex.keys.data_mut()));
                        out.push((ParamGroup::Ffn, ex.values.data_mut()));
                        if let Some(b) = &mut ex.key_bias {
                            out.push((ParamGroup::Ffn, b.as_mut_slice()));
                        }
                    }
                    if let Some(b) = vb {
                        out.push((ParamGroup::Ffn, b.as_mut_slice()));
                    }
                    if learned {
                        out.push((ParamGroup::Gate, gate.data_mut()));
                    }
                }
            }
        }
        out.push((ParamGroup::Head, self.head.data_mut()));
        out
    }

    /// Re-derives every avg-k gate from the current keys.
    pub fn retie_gates(&mut self) {
        for block in &mut self.blocks {
            if let BlockLayer::Emoe(e) = &mut block.layer {
                e.retie_gate();
            }
        }
    }

    /// Hash of every parameter bit pattern plus the trainable flags.
    pub fn fingerprint(&self) -> u64 {
        // FNV-1a over 64-bit words.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |w: u64| {
            h ^= w;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for (group, s) in self.param_slices() {
            feed(group as u64);
            feed(s.len() as u64);
            s.iter().for_each(|v| feed(v.to_bits_u64()));
        }
        for block in &self.blocks {
            if let BlockLayer::Emoe(e) = &block.layer {
                e.gate().data().iter().for_each(|v| feed(v.to_bits_u64()));
                for ex in e.experts() {
                    ex.neuron_indices.iter().for_each(|&j| feed(j as u64));
                }
            }
        }
        h
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        let a = self.param_slices();
        let b = other.param_slices();
        self.trainable == other.trainable
            && self.blocks.len() == other.blocks.len()
            && self.adapter.as_ref().map(|x| x.alpha.to_bits_u64())
                == other.adapter.as_ref().map(|x| x.alpha.to_bits_u64())
            && self.blocks.iter().zip(&other.blocks).all(|(x, y)| {
                x.residual == y.residual
                    && match (&x.layer, &y.layer) {
                        (BlockLayer::Dense(p), BlockLayer::Dense(q)) => p.bitwise_eq(q),
                        (BlockLayer::Emoe(p), BlockLayer::Emoe(q)) => p.bitwise_eq(q),
                        _ => false,
                    }
            })
            && a.len() == b.len()
            && a.iter().zip(&b).all(|((ga, sa), (gb, sb))| {
                ga == gb
                    && sa.len() == sb.len()
                    && sa
                        .iter()
                        .zip(sb.iter())
                        .all(|(x, y)| x.to_bits_u64() == y.to_bits_u64())
            })
    }

    /// Logits for one input. `k` overrides each split block's stored top-k.
    pub fn forward(
        &self,
        x: &[T],
        router: &mut Router,
        k: Option<usize>,
    ) -> Result<(Vec<T>, Cache<T>)> {
        if x.len() != self.h_in() {
            return Err(Error::shape(format!(
                "input length {} != h_in = {}",
                x.len(),
                self.h_in()
            )));
        }
        let mut z = self.input_proj.matvec(x)?;
        let adapter_mid = match &self.adapter {
            None => None,
            Some(ad) => {
                let mid = ad.a.matvec(x)?;
                axpy(&mut z, ad.scale(), &ad.b.matvec(&mid)?);
                Some(mid)
            }
        };
        let mut activations = Vec::with_capacity(self.blocks.len() + 1);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (mut out, cache) = match &block.layer {
                BlockLayer::Dense(f) => {
                    let pre = f.pre_activations(&z)?;
                    (f.forward(&z)?, BlockCache::Dense { pre })
                }
                BlockLayer::Emoe(e) => {
                    let scores = e.gate_scores(&z)?;
                    let selected = router.select(&scores, k.unwrap_or(e.top_k()))?;
                    let weights = e.expert_weights(&scores, &selected);
                    let mut y = vec![T::zero(); e.h()];
                    let mut pre = Vec::with_capacity(selected.len());
                    let mut outs = Vec::with_capacity(selected.len());
                    for (&i, &w) in selected.iter().zip(&weights) {
                        let ex = &e.experts()[i];
                        let p = ex.pre_activations(&z)?;
                        let hidden: Vec<T> = p.iter().map(|&a| e.activation().apply(a)).collect();
                        let o = ex.values.vecmat(&hidden)?;
                        axpy(&mut y, w, &o);
                        pre.push(p);
                        outs.push(o);
                    }
                    if let Some(b) = e.value_bias() {
                        axpy(&mut y, T::one(), b);
                    }
                    (
                        y,
                        BlockCache::Emoe {
                            scores,
                            selected,
                            weights,
                            pre,
                            out: outs,
                        },
                    )
                }
            };
            if block.residual {
                axpy(&mut out, T::one(), &z);
            }
            activations.push(std::mem::replace(&mut z, out));
            caches.push(cache);
        }
        let logits = self.head.matvec(&z)?;
        activations.push(z);
        let cache = Cache {
            fingerprint: self.fingerprint(),
            input: x.to_vec(),
            adapter_mid,
            activations,
            blocks: caches,
            logits: logits.clone(),
        };
        Ok((logits, cache))
    }

    /// Gradients of a scalar loss given `dlogits`; selection is held fixed.
    pub fn backward(&self, cache: &Cache<T>, dlogits: &[T]) -> Result<Gradients<T>> {
        let mut grads = Gradients::zeros_like(self);
        self.backward_into(cache, dlogits, &mut grads)?;
        Ok(grads)
    }

    /// Accumulates gradients into `grads`. Frozen groups are left at zero but
    /// still pass gradient through to earlier layers.
    pub fn backward_into(
        &self,
        cache: &Cache<T>,
        dlogits: &[T],
        grads: &mut Gradients<T>,
    ) -> Result<()> {
        if cache.fingerprint != self.fingerprint() || cache.blocks.len() != self.blocks.len() {
            return Err(Error::StaleCache(
                "cache was produced by different parameters".into(),
            ));
        }
        if dlogits.len() != self.n_classes() {
            return Err(Error::shape(format!(
                "dlogits length {} != classes {}",
                dlogits.len(),
                self.n_classes()
            )));
        }
        let tr = self.trainable;
        let g = &mut grads.inner;
        let top = cache.activations.last().expect("head input");
        if tr.head {
            for (c, &dl) in dlogits.iter().enumerate() {
                axpy(g.head.row_mut(c), dl, top);
            }
        }
        let mut dz = vec![T::zero(); self.h()];
        for (c, &dl) in dlogits.iter().enumerate() {
            axpy(&mut dz, dl, self.head.row(c));
        }

        for (l, block) in self.blocks.iter().enumerate().rev() {
            let z = &cache.activations[l];
            let dout = dz;
            let mut dz_in = if block.residual {
                dout.clone()
            } else {
                vec![T::zero(); self.h()]
            };
            match (&block.layer, &cache.blocks[l], &mut g.blocks[l].layer) {
                (BlockLayer::Dense(f), BlockCache::Dense { pre }, BlockLayer::Dense(gf)) => {
                    let (gk, gv, gkb, gvb) = gf.parts_mut();
                    neurons_backward(
                        f.keys(),
                        f.values(),
                        f.activation(),
                        pre,
                        z,
                        &dout,
                        &mut dz_in,
                        tr.ffn.then_some((gk, gv, gkb)),
                    );
                    if let (true, Some(b)) = (tr.ffn, gvb) {
                        axpy(b, T::one(), &dout);
                    }
                }
                (
                    BlockLayer::Emoe(e),
                    BlockCache::Emoe {
                        scores: _,
                        selected,
                        weights,
                        pre,
                        out,
                    },
                    BlockLayer::Emoe(ge),
                ) => {
                    let learned = e.gate_mode() == GateMode::Learned;
                    let (gexperts, ggate, gvb) = ge.parts_mut();
                    for (p, &i) in selected.iter().enumerate() {
                        let ex = &e.experts()[i];
                        let dex: Vec<T> = dout.iter().map(|&v| weights[p] * v).collect();
                        let gx = &mut gexperts[i];
                        neurons_backward(
                            &ex.keys,
                            &ex.values,
                            e.activation(),
                            &pre[p],
                            z,
                            &dex,
                            &mut dz_in,
                            tr.ffn
                                .then_some((&mut gx.keys, &mut gx.values, gx.key_bias.as_mut())),
                        );
                    }
                    if learned {
                        // Softmax over the selected scores: ds_p = w_p (dw_p − Σ_q w_q dw_q).
                        let dw: Vec<T> = out.iter().map(|o| dot(o, &dout)).collect();
                        let mean = dot(weights, &dw);
                        for (p, &i) in selected.iter().enumerate() {
                            let ds = weights[p] * (dw[p] - mean);
                            for r in 0..self.h() {
                                dz_in[r] = dz_in[r] + e.gate().get(r, i) * ds;
                                if tr.gate {
                                    ggate.add_at(r, i, z[r] * ds);
                                }
                            }
                        }
                    }
                    if let (true, Some(b)) = (tr.ffn, gvb) {
                        axpy(b, T::one(), &dout);
                    }
                }
                _ => {
                    return Err(Error::StaleCache(
                        "block kinds changed since forward".into(),
                    ))
                }
            }
            dz = dz_in;
        }

        // z0 = W·x + s·B·(A·x)
        let x = &cache.input;
        if tr.input_proj {
            for (r, &d) in dz.iter().enumerate() {
                axpy(g.input_proj.row_mut(r), d, x);
            }
        }
        if let (true, Some(ad), Some(gad), Some(mid)) = (
            tr.adapter,
            &self.adapter,
            g.adapter.as_mut(),
            cache.adapter_mid.as_ref(),
        ) {
            let s = ad.scale();
            for (r, &d) in dz.iter().enumerate() {
                axpy(gad.b.row_mut(r), s * d, mid);
            }
            let bt_dz = ad.b.vecmat(&dz)?;
            for (q, &v) in bt_dz.iter().enumerate() {
                axpy(gad.a.row_mut(q), s * v, x);
            }
        }
        Ok(())
    }
}

/// Backward through `y = σ(z·K + b)·V` for one neuron group, adding the
/// input gradient into `dz` and, when `grads` is given, parameter gradients.
#[allow(clippy::too_many_arguments)]
fn neurons_backward<T: Scalar>(
    keys: &Matrix<T>,
    values: &Matrix<T>,
    activation: ActivationKind,
    pre: &[T],
    z: &[T],
    dout: &[T],
    dz: &mut [T],
    mut grads: Option<(&mut Matrix<T>, &mut Matrix<T>, Option<&mut Vec<T>>)>,
) {
    let h = keys.rows();
    for (j, &a) in pre.iter().enumerate() {
        let dact = dot(values.row(j), dout);
        let dpre = dact * activation.derivative(a);
        if let Some((gk, gv, gkb)) = grads.as_mut() {
            axpy(gv.row_mut(j), activation.apply(a), dout);
            for r in 0..h {
                gk.add_at(r, j, z[r] * dpre);
            }
            if let Some(b) = gkb.as_mut() {
                b[j] = b[j] + dpre;
            }
        }
        if dpre != T::zero() {
            for r in 0..h {
                dz[r] = dz[r] + keys.get(r, j) * dpre;
            }
        }
    }
}

/// Softmax cross-entropy of one example and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= logits.len() {
        return Err(Error::argument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    let loss = total.ln() - (logits[label] - max);
    let mut grad: Vec<T> = exps.into_iter().map(|e| e / total).collect();
    grad[label] = grad[label] - T::one();
    Ok((loss, grad))
}

pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
