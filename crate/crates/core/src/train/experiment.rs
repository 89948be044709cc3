//! End-to-end toy pipeline: pretrain a dense model on cluster identity, then
//! tune a low-rank adapter and new head on a coarser labelling, optionally
//! with the frozen feed-forward blocks split into experts.

use std::fmt;
use std::str::FromStr;

use crate::clustering::{balanced_kmeans, random_partition, KMeansConfig, Partition};
use crate::emoe::{GateMode, SelectionPolicy};
use crate::error::{Error, Result};
use crate::numerics::{ActivationKind, Matrix, Rng, Scalar};

use super::convert::convert_lora2emoe;
use super::data::{make_toy_dataset, ToyTaskSpec};
use super::model::{Adapter, BlockLayer, ModelSpec, ToyModel, Trainable};
use super::{train, TrainConfig, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TuneMode {
    Dense,
    /// Avg-k gate.
    Emoe,
    /// Gate initialised to avg-k, then trained.
    EmoeLearn,
}

impl fmt::Display for TuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TuneMode::Dense => "dense",
            TuneMode::Emoe => "emoe",
            TuneMode::EmoeLearn => "emoe-learn",
        })
    }
}

impl FromStr for TuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(TuneMode::Dense),
            "emoe" => Ok(TuneMode::Emoe),
            "emoe-learn" => Ok(TuneMode::EmoeLearn),
            other => Err(Error::argument(format!("unknown mode '{other}'"))),
        }
    }
}

/// How neurons are grouped into experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Construction {
    /// Balanced k-means on the key vectors.
    Cluster,
    Random,
}

impl fmt::Display for Construction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Construction::Cluster => "cluster",
            Construction::Random => "random",
        })
    }
}

impl FromStr for Construction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cluster" => Ok(Construction::Cluster),
            "random" => Ok(Construction::Random),
            other => Err(Error::argument(format!("unknown construction '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyExperiment {
    pub task: ToyTaskSpec,
    pub model: ModelSpec,
    pub model_seed: u64,
    /// Dense pretraining on cluster-id labels; `policy`, `k` and `seed` are
    /// ignored. Both phases share the fine-tuning seed so the held-out split
    /// is never seen during pretraining.
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub mode: TuneMode,
    pub construction: Construction,
    pub n_experts: usize,
    pub top_k: usize,
    pub adapter_rank: usize,
    pub adapter_alpha: f64,
}

impl ToyExperiment {
    /// The reference configuration: 8 latent clusters, h = 16, d = 64, 8
    /// experts, top-2. Every seed is derived from `seed`.
    pub fn reference(seed: u64) -> Self {
        Self {
            task: ToyTaskSpec {
                n_clusters: 8,
                h_in: 4,
                n_classes: 2,
                noise_sigma: 0.5,
                samples_per_cluster: 60,
                seed,
            },
            model: ModelSpec {
                h_in: 4,
                h: 16,
                d: 64,
                n_blocks: 1,
                n_classes: 2,
                activation: ActivationKind::Relu,
                residual: true,
            },
            model_seed: seed.wrapping_add(1000),
            pretrain: TrainConfig {
                steps: 600,
                batch_size: 16,
                learning_rate: 1e-2,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                steps: 400,
                batch_size: 16,
                learning_rate: 1e-2,
                seed: seed.wrapping_add(3000),
                k: Some(2),
                ..TrainConfig::default()
            },
            mode: TuneMode::Emoe,
            construction: Construction::Cluster,
            n_experts: 8,
            top_k: 2,
            adapter_rank: 1,
            adapter_alpha: 1.0,
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::argument(format!("invalid value '{value}' for {key}")))
        }
        match key {
            "n_clusters" => self.task.n_clusters = parse(key, value)?,
            "h_in" => {
                self.task.h_in = parse(key, value)?;
                self.model.h_in = self.task.h_in;
            }
            "n_classes" => {
                self.task.n_classes = parse(key, value)?;
                self.model.n_classes = self.task.n_classes;
            }
            "noise_sigma" => self.task.noise_sigma = parse(key, value)?,
            "samples_per_cluster" => self.task.samples_per_cluster = parse(key, value)?,
            "data_seed" => self.task.seed = parse(key, value)?,
            "h" => self.model.h = parse(key, value)?,
            "d" => self.model.d = parse(key, value)?,
            "n_blocks" => self.model.n_blocks = parse(key, value)?,
            "activation" => {
                self.model.activation = match value {
                    "relu" => ActivationKind::Relu,
                    "gelu" => ActivationKind::GeluTanh,
                    _ => return Err(Error::argument(format!("invalid activation '{value}'"))),
                }
            }
            "residual" => self.model.residual = parse(key, value)?,
            "model_seed" => self.model_seed = parse(key, value)?,
            "pretrain_steps" => self.pretrain.steps = parse(key, value)?,
            "pretrain_lr" => self.pretrain.learning_rate = parse(key, value)?,
            "steps" => self.finetune.steps = parse(key, value)?,
            "batch_size" => {
                self.finetune.batch_size = parse(key, value)?;
                self.pretrain.batch_size = self.finetune.batch_size;
            }
            "learning_rate" => self.finetune.learning_rate = parse(key, value)?,
            "optimizer" => {
                self.finetune.optimizer = parse(key, value)?;
                self.pretrain.optimizer = self.finetune.optimizer;
            }
            "seed" => self.finetune.seed = parse(key, value)?,
            "policy" => self.finetune.policy = parse(key, value)?,
            "log_window" => self.finetune.log_window = parse(key, value)?,
            "mode" => self.mode = parse(key, value)?,
            "construction" => self.construction = parse(key, value)?,
            "experts" => self.n_experts = parse(key, value)?,
            "topk" => {
                self.top_k = parse(key, value)?;
                self.finetune.k = Some(self.top_k);
            }
            "adapter_rank" => self.adapter_rank = parse(key, value)?,
            "adapter_alpha" => self.adapter_alpha = parse(key, value)?,
            other => return Err(Error::argument(format!("unknown setting '{other}'"))),
        }
        Ok(())
    }

    /// Every setting as `(key, value)`, in the order `set` understands them.
    pub fn settings(&self) -> Vec<(&'static str, String)> {
        let act = match self.model.activation {
            ActivationKind::Relu => "relu",
            ActivationKind::GeluTanh => "gelu",
        };
        vec![
            ("n_clusters", self.task.n_clusters.to_string()),
            ("h_in", self.task.h_in.to_string()),
            ("n_classes", self.task.n_classes.to_string()),
            ("noise_sigma", self.task.noise_sigma.to_string()),
            (
                "samples_per_cluster",
                self.task.samples_per_cluster.to_string(),
            ),
            ("data_seed", self.task.seed.to_string()),
            ("h", self.model.h.to_string()),
            ("d", self.model.d.to_string()),
            ("n_blocks", self.model.n_blocks.to_string()),
            ("activation", act.to_string()),
            ("residual", self.model.residual.to_string()),
            ("model_seed", self.model_seed.to_string()),
            ("pretrain_steps", self.pretrain.steps.to_string()),
            ("pretrain_lr", self.pretrain.learning_rate.to_string()),
            ("steps", self.finetune.steps.to_string()),
            ("batch_size", self.finetune.batch_size.to_string()),
            ("learning_rate", self.finetune.learning_rate.to_string()),
            ("optimizer", self.finetune.optimizer.to_string()),
            ("seed", self.finetune.seed.to_string()),
            ("policy", self.finetune.policy.to_string()),
            ("log_window", self.finetune.log_window.to_string()),
            ("mode", self.mode.to_string()),
            ("construction", self.construction.to_string()),
            ("experts", self.n_experts.to_string()),
            ("topk", self.top_k.to_string()),
            ("adapter_rank", self.adapter_rank.to_string()),
            ("adapter_alpha", self.adapter_alpha.to_string()),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct ToyOutcome<T> {
    pub pretrain_log: TrainLog,
    pub finetune_log: TrainLog,
    /// Fine-tuned model, split when the mode is not dense.
    pub model: ToyModel<T>,
    pub partitions: Vec<Partition>,
}

/// One balanced k-means partition of the key vectors of every block.
pub fn cluster_partitions<T: Scalar>(
    model: &ToyModel<T>,
    n_experts: usize,
    seed: u64,
) -> Result<Vec<Partition>> {
    model
        .blocks
        .iter()
        .enumerate()
        .map(|(l, b)| match &b.layer {
            BlockLayer::Dense(f) => {
                let cfg = KMeansConfig::new(n_experts, seed.wrapping_add(l as u64));
                balanced_kmeans(&f.key_points(), &cfg).map(|(p, _)| p)
            }
            BlockLayer::Emoe(e) => e.partition(),
        })
        .collect()
}

pub fn run_toy<T: Scalar>(exp: &ToyExperiment) -> Result<ToyOutcome<T>> {
    if exp.model.h_in != exp.task.h_in || exp.model.n_classes != exp.task.n_classes {
        return Err(Error::argument("model and task dimensions disagree"));
    }
    let data = make_toy_dataset::<T>(&exp.task)?;

    let pre_spec = ModelSpec {
        n_classes: exp.task.n_clusters,
        ..exp.model
    };
    let base = ToyModel::<T>::new(&pre_spec, exp.model_seed)?;
    let pretrain = TrainConfig {
        seed: exp.finetune.seed,
        policy: SelectionPolicy::All,
        k: None,
        ..exp.pretrain
    };
    let (mut model, pretrain_log) = train(
        base,
        &data.with_cluster_labels(exp.task.n_clusters),
        &pretrain,
    )?;

    let mut rng = Rng::new(exp.model_seed).derive(7);
    model.head = Matrix::random_normal(
        exp.model.n_classes,
        exp.model.h,
        1.0 / (exp.model.h as f64).sqrt(),
        &mut rng,
    );
    model.adapter = Some(Adapter::new(
        exp.model.h,
        exp.model.h_in,
        exp.adapter_rank,
        exp.adapter_alpha,
        &mut rng,
    ));
    model.trainable = Trainable::ADAPTER;

    let partitions = match exp.mode {
        TuneMode::Dense => Vec::new(),
        _ => match exp.construction {
            Construction::Cluster => cluster_partitions(&model, exp.n_experts, exp.model_seed)?,
            Construction::Random => (0..model.blocks.len())
                .map(|l| {
                    random_partition(
                        exp.model.d,
                        exp.n_experts,
                        exp.model_seed.wrapping_add(l as u64),
                    )
                })
                .collect::<Result<_>>()?,
        },
    };
    let (model, finetune) = match exp.mode {
        TuneMode::Dense => (
            model,
            TrainConfig {
                policy: SelectionPolicy::All,
                k: None,
                ..exp.finetune
            },
        ),
        TuneMode::Emoe => (
            convert_lora2emoe(&model, &partitions, exp.top_k, GateMode::AvgK)?,
            exp.finetune,
        ),
        TuneMode::EmoeLearn => (
            convert_lora2emoe(&model, &partitions, exp.top_k, GateMode::Learned)?,
            exp.finetune,
        ),
    };
    let (model, finetune_log) = train(model, &data, &finetune)?;
    Ok(ToyOutcome {
        pretrain_log,
        finetune_log,
        model,
        partitions,
    })
}
