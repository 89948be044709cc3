//! Synthetic clustered classification task.

use crate::error::{Error, Result};
use crate::numerics::{Rng, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyTaskSpec {
    pub n_clusters: usize,
    pub h_in: usize,
    pub n_classes: usize,
    pub noise_sigma: f64,
    pub samples_per_cluster: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub x: Vec<T>,
    pub label: usize,
    /// Latent cluster the sample was drawn from.
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub samples: Vec<Sample<T>>,
    pub n_classes: usize,
}

impl ToyTaskSpec {
    /// Label of every sample drawn from `cluster`.
    pub fn label_of(&self, cluster: usize) -> usize {
        cluster % self.n_classes
    }
}

/// Centroids are uniform directions on the unit sphere scaled by
/// `4·noise_sigma`; samples add isotropic N(0, noise_sigma²) noise. Samples are
/// ordered cluster by cluster.
pub fn make_toy_dataset<T: Scalar>(spec: &ToyTaskSpec) -> Result<Dataset<T>> {
    if spec.n_clusters == 0
        || spec.h_in == 0
        || spec.n_classes == 0
        || spec.samples_per_cluster == 0
    {
        return Err(Error::argument("toy task counts must be positive"));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(Error::argument(
            "noise_sigma must be finite and non-negative",
        ));
    }
    let mut rng = Rng::new(spec.seed);
    let radius = 4.0 * spec.noise_sigma;
    let centroids: Vec<Vec<f64>> = (0..spec.n_clusters)
        .map(|_| {
            let dir: Vec<f64> = (0..spec.h_in).map(|_| rng.normal()).collect();
            let norm = dir
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            dir.into_iter().map(|v| radius * v / norm).collect()
        })
        .collect();
    let mut samples = Vec::with_capacity(spec.n_clusters * spec.samples_per_cluster);
    for (cluster, c) in centroids.iter().enumerate() {
        for _ in 0..spec.samples_per_cluster {
            let x = c
                .iter()
                .map(|&m| T::lit(m + spec.noise_sigma * rng.normal()))
                .collect();
            samples.push(Sample {
                x,
                label: spec.label_of(cluster),
                cluster,
            });
        }
    }
    Ok(Dataset {
        samples,
        n_classes: spec.n_classes,
    })
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Deterministic shuffle-and-cut into (train, held-out) with the given
    /// held-out fraction.
    pub fn split(&self, held_out: f64, seed: u64) -> (Dataset<T>, Dataset<T>) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        Rng::new(seed).derive(0x5EED).shuffle(&mut order);
        let n_test = ((self.len() as f64) * held_out).round() as usize;
        let pick = |idx: &[usize]| Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            n_classes: self.n_classes,
        };
        (pick(&order[n_test..]), pick(&order[..n_test]))
    }

    /// Same inputs, relabelled by latent cluster id.
    pub fn with_cluster_labels(&self, n_clusters: usize) -> Dataset<T> {
        Dataset {
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    label: s.cluster,
                    ..s.clone()
                })
                .collect(),
            n_classes: n_clusters,
        }
    }
}
