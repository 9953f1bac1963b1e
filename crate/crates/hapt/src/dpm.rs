//! Dirichlet-process clustering of samples with the hierarchical tree model
//! as the mixing kernel.
//!
//! Conditional on a partition of the samples, the model is a set of
//! independent fits, so the DP mixture is sampled with a conjugate-style
//! Pólya-urn Gibbs sweep: each sample is removed and reassigned with
//! probability proportional to `n_c * f(X_i | X_c)` for existing clusters and
//! `alpha * f(X_i)` for a fresh one, where every `f` is an exact marginal
//! likelihood. Marginal likelihoods are cached per sample subset, since the
//! urn revisits the same subsets constantly.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HaptError, Result};
use crate::partition::{CountTable, PartitionTree};
use crate::quad::log_sum_exp;
use crate::sis::SisConfig;
use crate::tree_hmm::{fit, FitOptions};

/// Chain controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    /// DP concentration.
    pub alpha: f64,
    pub burnin: usize,
    pub draws: usize,
    pub seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig { alpha: 1.0, burnin: 500, draws: 1000, seed: 0 }
    }
}

/// Current state of the Gibbs chain.
#[derive(Debug, Clone)]
pub struct ClusterState {
    /// Cluster label per sample, compacted by first appearance.
    pub assignment: Vec<usize>,
    pub alpha: f64,
    pub rng: ChaCha8Rng,
}

impl ClusterState {
    /// All-singletons initialization.
    pub fn init(k: usize, alpha: f64, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(HaptError::invalid("need at least one sample".into()));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(HaptError::invalid(format!("alpha must be positive, got {alpha}")));
        }
        Ok(ClusterState {
            assignment: (0..k).collect(),
            alpha,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

/// Posterior summaries of a finished chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    /// Pairwise same-cluster frequency over retained draws; diagonal one.
    pub coclustering: Vec<Vec<f64>>,
    /// Histogram of cluster counts, indexed by count.
    pub n_clusters_hist: Vec<u64>,
    /// Retained canonical assignments, one per post-burn-in sweep.
    pub draws: Vec<Vec<usize>>,
    /// Most frequently visited partition among retained draws.
    pub modal_partition: Vec<usize>,
}

/// Marginal-likelihood evaluator with a bounded cache, shared by a chain.
pub struct DpmEngine {
    tree: PartitionTree,
    counts: CountTable,
    sis_tau: SisConfig,
    sis_nu: SisConfig,
    options: FitOptions,
    cache: HashMap<Vec<usize>, (f64, u64)>,
    cache_capacity: usize,
    clock: u64,
}

impl DpmEngine {
    pub fn new(
        tree: &PartitionTree,
        counts: &CountTable,
        sis_tau: &SisConfig,
        sis_nu: &SisConfig,
        options: FitOptions,
    ) -> Self {
        DpmEngine {
            tree: tree.clone(),
            counts: counts.clone(),
            sis_tau: sis_tau.clone(),
            sis_nu: sis_nu.clone(),
            options,
            cache: HashMap::new(),
            cache_capacity: 10_000,
            clock: 0,
        }
    }

    pub fn with_cache_capacity(mut self, capacity: usize) -> Self {
        self.cache_capacity = capacity.max(1);
        self
    }

    pub fn k(&self) -> usize {
        self.counts.k()
    }

    /// Fresh (uncached) marginal likelihood of a sample subset.
    pub fn cluster_log_ml_uncached(&self, set: &[usize]) -> Result<f64> {
        let mut key: Vec<usize> = set.to_vec();
        key.sort_unstable();
        key.dedup();
        let sub = self.counts.subset(&key)?;
        let fit = fit(&self.tree, &sub, &self.sis_tau, &self.sis_nu, &self.options)?;
        Ok(fit.log_ml())
    }

    /// Marginal likelihood of a sample subset under one shared fit,
    /// cached by the sorted index set.
    pub fn cluster_log_ml(&mut self, set: &[usize]) -> Result<f64> {
        let mut key: Vec<usize> = set.to_vec();
        key.sort_unstable();
        key.dedup();
        if key.is_empty() {
            return Err(HaptError::invalid("empty sample set".into()));
        }
        self.clock += 1;
        if let Some(entry) = self.cache.get_mut(&key) {
            entry.1 = self.clock;
            return Ok(entry.0);
        }
        let value = self.cluster_log_ml_uncached(&key)?;
        if self.cache.len() >= self.cache_capacity {
            if let Some(oldest) =
                self.cache.iter().min_by_key(|(_, (_, stamp))| *stamp).map(|(k, _)| k.clone())
            {
                self.cache.remove(&oldest);
            }
        }
        self.cache.insert(key, (value, self.clock));
        Ok(value)
    }

    /// Predictive log marginal `log f(X_i | X_cluster)`, the ratio of two
    /// joint fits; reduces to the singleton marginal for an empty cluster.
    pub fn predictive_log_ml(&mut self, i: usize, cluster: &[usize]) -> Result<f64> {
        if cluster.contains(&i) {
            return Err(HaptError::invalid(format!("sample {i} already in the cluster")));
        }
        if cluster.is_empty() {
            return self.cluster_log_ml(&[i]);
        }
        let mut joint = cluster.to_vec();
        joint.push(i);
        Ok(self.cluster_log_ml(&joint)? - self.cluster_log_ml(cluster)?)
    }

    /// One Gibbs sweep over all samples in a randomized order.
    pub fn gibbs_sweep(&mut self, state: &mut ClusterState) -> Result<()> {
        let k = self.k();
        if state.assignment.len() != k {
            return Err(HaptError::invalid("assignment length does not match sample count".into()));
        }
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut state.rng);
        for &i in &order {
            // Clusters without i, in label order.
            let mut members: Vec<Vec<usize>> = Vec::new();
            let mut label_of: HashMap<usize, usize> = HashMap::new();
            for (j, &lab) in state.assignment.iter().enumerate() {
                if j == i {
                    continue;
                }
                let idx = *label_of.entry(lab).or_insert_with(|| {
                    members.push(Vec::new());
                    members.len() - 1
                });
                members[idx].push(j);
            }
            let mut log_w: Vec<f64> = Vec::with_capacity(members.len() + 1);
            for cluster in &members {
                let lw = (cluster.len() as f64).ln() + self.predictive_log_ml(i, cluster)?;
                log_w.push(lw);
            }
            log_w.push(state.alpha.ln() + self.cluster_log_ml(&[i])?);
            let norm = log_sum_exp(&log_w);
            let u: f64 = state.rng.random();
            let mut cum = 0.0;
            let mut chosen = log_w.len() - 1;
            for (c, lw) in log_w.iter().enumerate() {
                cum += (lw - norm).exp();
                if u < cum {
                    chosen = c;
                    break;
                }
            }
            if chosen < members.len() {
                state.assignment[i] = state.assignment[members[chosen][0]];
            } else {
                let fresh = (0..=k).find(|l| !state.assignment.iter().enumerate().any(
                    |(j, &lab)| j != i && lab == *l,
                ));
                state.assignment[i] = fresh.expect("a free label always exists");
            }
        }
        canonicalize(&mut state.assignment);
        Ok(())
    }

    /// Runs a full chain from the all-singletons state and summarizes it.
    pub fn run_chain(&mut self, config: &ChainConfig) -> Result<ChainSummary> {
        let k = self.k();
        let mut state = ClusterState::init(k, config.alpha, config.seed)?;
        for _ in 0..config.burnin {
            self.gibbs_sweep(&mut state)?;
        }
        let mut draws = Vec::with_capacity(config.draws);
        for _ in 0..config.draws {
            self.gibbs_sweep(&mut state)?;
            draws.push(state.assignment.clone());
        }
        Ok(summarize(k, draws))
    }
}

fn canonicalize(assignment: &mut [usize]) {
    let mut map: HashMap<usize, usize> = HashMap::new();
    let mut next = 0;
    for lab in assignment.iter_mut() {
        let canon = *map.entry(*lab).or_insert_with(|| {
            let c = next;
            next += 1;
            c
        });
        *lab = canon;
    }
}

fn summarize(k: usize, draws: Vec<Vec<usize>>) -> ChainSummary {
    let mut coclustering = vec![vec![0.0; k]; k];
    let mut n_clusters_hist = vec![0u64; k + 1];
    let mut partition_counts: HashMap<Vec<usize>, u64> = HashMap::new();
    for draw in &draws {
        let n_clusters = draw.iter().copied().max().map_or(0, |m| m + 1);
        n_clusters_hist[n_clusters] += 1;
        for a in 0..k {
            for b in a..k {
                if draw[a] == draw[b] {
                    coclustering[a][b] += 1.0;
                    coclustering[b][a] += if a == b { 0.0 } else { 1.0 };
                }
            }
        }
        *partition_counts.entry(draw.clone()).or_insert(0) += 1;
    }
    if draws.is_empty() {
        for (a, row) in coclustering.iter_mut().enumerate() {
            row[a] = 1.0;
        }
    } else {
        let n = draws.len() as f64;
        for row in &mut coclustering {
            for p in row.iter_mut() {
                *p /= n;
            }
        }
    }
    let modal_partition = partition_counts
        .iter()
        .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
        .map(|(p, _)| p.clone())
        .unwrap_or_default();
    ChainSummary { coclustering, n_clusters_hist, draws, modal_partition }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same items");
    let n = a.len();
    if n <= 1 {
        return 1.0;
    }
    let choose2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&la, &lb) in a.iter().zip(b) {
        *table.entry((la, lb)).or_insert(0) += 1;
        *rows.entry(la).or_insert(0) += 1;
        *cols.entry(lb).or_insert(0) += 1;
    }
    let sum_cells: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_rows: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_cols: f64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(n as u64);
    let expected = sum_rows * sum_cols / total;
    let max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index - expected).abs() < 1e-15 {
        return 1.0;
    }
    (sum_cells - expected) / (max_index - expected)
}
