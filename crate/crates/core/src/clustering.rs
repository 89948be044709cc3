//! Balanced partitioning of neuron keys into equal-size experts.
//!
//! `balanced_kmeans` alternates a capacity-constrained assignment with a
//! centroid update. The assignment sorts every (point, centroid) squared
//! distance ascending and hands points out greedily while clusters still have
//! room, so every cluster ends with exactly `d / N` members.

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Assignment of each of `d` neurons to one of `n_experts` equal-size groups.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Partition {
    assignment: Vec<usize>,
    n_experts: usize,
}

impl Partition {
    /// Validates range and balance before constructing.
    pub fn new(assignment: Vec<usize>, n_experts: usize) -> Result<Self> {
        let d = assignment.len();
        if n_experts == 0 {
            return Err(Error::argument("partition needs at least one expert"));
        }
        if n_experts > d {
            return Err(Error::argument(format!(
                "{n_experts} experts for only {d} neurons"
            )));
        }
        if !d.is_multiple_of(n_experts) {
            return Err(Error::constraint(format!(
                "d = {d} is not divisible by N = {n_experts}"
            )));
        }
        let size = d / n_experts;
        let mut counts = vec![0usize; n_experts];
        for (j, &e) in assignment.iter().enumerate() {
            if e >= n_experts {
                return Err(Error::constraint(format!(
                    "neuron {j} assigned to expert {e} >= N = {n_experts}"
                )));
            }
            counts[e] += 1;
        }
        if let Some((e, &c)) = counts.iter().enumerate().find(|(_, &c)| c != size) {
            return Err(Error::constraint(format!(
                "expert {e} has {c} neurons, balanced size is {size}"
            )));
        }
        Ok(Self {
            assignment,
            n_experts,
        })
    }

    /// Builds a partition from explicit groups; group `i` becomes expert `i`.
    pub fn from_groups(groups: &[Vec<usize>]) -> Result<Self> {
        let d: usize = groups.iter().map(Vec::len).sum();
        let mut assignment = vec![usize::MAX; d];
        for (e, group) in groups.iter().enumerate() {
            for &j in group {
                if j >= d || assignment[j] != usize::MAX {
                    return Err(Error::constraint(format!(
                        "neuron {j} missing, duplicated or out of range"
                    )));
                }
                assignment[j] = e;
            }
        }
        Self::new(assignment, groups.len())
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn d(&self) -> usize {
        self.assignment.len()
    }

    pub fn expert_size(&self) -> usize {
        self.d() / self.n_experts
    }

    /// Neuron indices per expert, each in ascending order.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::with_capacity(self.expert_size()); self.n_experts];
        for (j, &e) in self.assignment.iter().enumerate() {
            groups[e].push(j);
        }
        groups
    }

    /// Expert ids renamed by `perm` (`new_id = perm[old_id]`).
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n_experts {
            return Err(Error::argument("permutation length must equal N"));
        }
        Self::new(
            self.assignment.iter().map(|&e| perm[e]).collect(),
            self.n_experts,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringReport {
    pub iterations: usize,
    /// Sum of squared distances to the assigned cluster mean, after each update.
    pub objective_per_iteration: Vec<f64>,
    pub converged: bool,
    /// Restart (0-based) whose result was kept.
    pub restart: usize,
}

impl ClusteringReport {
    pub fn final_objective(&self) -> f64 {
        self.objective_per_iteration
            .last()
            .copied()
            .unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansConfig {
    pub n_experts: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Independent k-means++ restarts; the lowest final objective wins.
    pub restarts: usize,
}

impl KMeansConfig {
    pub const DEFAULT_MAX_ITER: usize = 100;
    pub const DEFAULT_RESTARTS: usize = 4;

    pub fn new(n_experts: usize, seed: u64) -> Self {
        Self {
            n_experts,
            seed,
            max_iter: Self::DEFAULT_MAX_ITER,
            restarts: Self::DEFAULT_RESTARTS,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    let dim = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::shape("points have differing dimensions"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite coordinate".into()));
    }
    Ok(dim)
}

fn centroids_of(points: &[Vec<f64>], assignment: &[usize], n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; n];
    let mut counts = vec![0usize; n];
    for (p, &e) in points.iter().zip(assignment) {
        counts[e] += 1;
        for (s, v) in sums[e].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            let inv = 1.0 / c as f64;
            s.iter_mut().for_each(|v| *v *= inv);
        }
    }
    sums
}

fn assignment_cost(points: &[Vec<f64>], assignment: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &e)| sq_dist(p, &centroids[e]))
        .sum()
}

/// k-means++ seeding: first centre uniform, then proportional to squared
/// distance from the nearest chosen centre.
fn kmeanspp_init(points: &[Vec<f64>], n: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut centres = vec![points[rng.below(points.len())].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centres[0])).collect();
    while centres.len() < n {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = points.len() - 1;
            for (i, &w) in nearest.iter().enumerate() {
                acc += w;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All remaining points coincide with a centre.
            rng.below(points.len())
        };
        let c = points[pick].clone();
        for (w, p) in nearest.iter_mut().zip(points) {
            *w = w.min(sq_dist(p, &c));
        }
        centres.push(c);
    }
    centres
}

/// Greedy capacity-constrained assignment. Pairs are taken in ascending order
/// of (distance, point index, cluster index).
fn greedy_assign(points: &[Vec<f64>], centroids: &[Vec<f64>], capacity: usize) -> Vec<usize> {
    let n = centroids.len();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(points.len() * n);
    for (i, p) in points.iter().enumerate() {
        for (c, centre) in centroids.iter().enumerate() {
            pairs.push((sq_dist(p, centre), i, c));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut assignment = vec![usize::MAX; points.len()];
    let mut room = vec![capacity; n];
    let mut left = points.len();
    for (_, i, c) in pairs {
        if left == 0 {
            break;
        }
        if assignment[i] == usize::MAX && room[c] > 0 {
            assignment[i] = c;
            room[c] -= 1;
            left -= 1;
        }
    }
    assignment
}

fn run_once(
    points: &[Vec<f64>],
    n: usize,
    dim: usize,
    max_iter: usize,
    rng: &mut Rng,
) -> (Vec<usize>, ClusteringReport) {
    let capacity = points.len() / n;
    let mut centroids = kmeanspp_init(points, n, rng);
    let mut assignment = greedy_assign(points, &centroids, capacity);
    centroids = centroids_of(points, &assignment, n, dim);
    let mut objective = vec![assignment_cost(points, &assignment, &centroids)];
    let mut converged = false;
    let mut iterations = 1;
    while iterations < max_iter {
        let candidate = greedy_assign(points, &centroids, capacity);
        // Greedy assignment is not optimal, so only accept strict improvements
        // under the current centroids; this keeps the objective non-increasing.
        if candidate == assignment
            || assignment_cost(points, &candidate, &centroids)
                >= assignment_cost(points, &assignment, &centroids)
        {
            converged = true;
            break;
        }
        assignment = candidate;
        centroids = centroids_of(points, &assignment, n, dim);
        objective.push(assignment_cost(points, &assignment, &centroids));
        iterations += 1;
    }
    let report = ClusteringReport {
        iterations,
        objective_per_iteration: objective,
        converged,
        restart: 0,
    };
    (assignment, report)
}

/// Clusters `points` (one per neuron) into `config.n_experts` groups of equal
/// size.
pub fn balanced_kmeans(
    points: &[Vec<f64>],
    config: &KMeansConfig,
) -> Result<(Partition, ClusteringReport)> {
    let d = points.len();
    let n = config.n_experts;
    if n == 0 || n > d {
        return Err(Error::argument(format!("N = {n} must lie in 1..={d}")));
    }
    if !d.is_multiple_of(n) {
        return Err(Error::constraint(format!(
            "d = {d} is not divisible by N = {n}"
        )));
    }
    if config.max_iter == 0 {
        return Err(Error::argument("max_iter must be at least 1"));
    }
    let dim = check_points(points)?;
    let root = Rng::new(config.seed);
    let mut best: Option<(Vec<usize>, ClusteringReport)> = None;
    for restart in 0..config.restarts.max(1) {
        let mut rng = root.derive(restart as u64);
        let (assignment, mut report) = run_once(points, n, dim, config.max_iter, &mut rng);
        report.restart = restart;
        log::debug!(
            "k-means restart {restart}: objective {:.6} after {} iterations",
            report.final_objective(),
            report.iterations
        );
        let better = best
            .as_ref()
            .is_none_or(|(_, b)| report.final_objective() < b.final_objective());
        if better {
            best = Some((assignment, report));
        }
    }
    let (assignment, report) = best.expect("at least one restart");
    Ok((Partition::new(assignment, n)?, report))
}

/// Uniformly random balanced partition.
pub fn random_partition(d: usize, n_experts: usize, seed: u64) -> Result<Partition> {
    if n_experts == 0 || n_experts > d {
        return Err(Error::argument(format!(
            "N = {n_experts} must lie in 1..={d}"
        )));
    }
    if !d.is_multiple_of(n_experts) {
        return Err(Error::constraint(format!(
            "d = {d} is not divisible by N = {n_experts}"
        )));
    }
    let size = d / n_experts;
    let mut order: Vec<usize> = (0..d).collect();
    Rng::new(seed).shuffle(&mut order);
    let mut assignment = vec![0; d];
    for (slot, &j) in order.iter().enumerate() {
        assignment[j] = slot / size;
    }
    Partition::new(assignment, n_experts)
}

/// Σ over clusters of Σ ‖p − mean(cluster)‖².
pub fn partition_objective(points: &[Vec<f64>], partition: &Partition) -> Result<f64> {
    if partition.d() != points.len() {
        return Err(Error::constraint(format!(
            "partition covers {} neurons but {} points were given",
            partition.d(),
            points.len()
        )));
    }
    let dim = check_points(points)?;
    let centroids = centroids_of(points, partition.assignment(), partition.n_experts(), dim);
    Ok(assignment_cost(points, partition.assignment(), &centroids))
}
