//! Synthetic sequence-classification corpus and label-skewed client sharding.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability that a position carries a class topic token rather than noise.
pub const DEFAULT_SIGNAL: f64 = 0.25;
/// Upper bound on Dirichlet re-draws when a shard falls below `min_shard`.
pub const MAX_PARTITION_DRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub sequences: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(sequences: Vec<Vec<usize>>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if sequences.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} sequences but {} labels",
                sequences.len(),
                labels.len()
            )));
        }
        if class_count == 0 {
            return Err(Error::invalid("class_count must be positive"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Self {
            sequences,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Examples at `indices`, in that order. Panics on out-of-range indices.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// Split off the trailing `fraction` of examples as a held-out set.
    pub fn split(&self, fraction: f64) -> Result<(LabeledDataset, LabeledDataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::invalid(format!("split fraction {fraction} not in [0, 1)")));
        }
        let held = ((self.len() as f64) * fraction).round() as usize;
        let cut = self.len() - held;
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.len()).collect();
        Ok((self.subset(&head), self.subset(&tail)))
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Label proportions; all zeros for an empty dataset.
    pub fn label_histogram(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        self.label_counts().into_iter().map(|c| c as f64 / n).collect()
    }
}

/// Balanced synthetic task with the default signal strength.
pub fn make_synthetic_task(
    vocab: usize,
    classes: usize,
    seq_len: usize,
    size: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    make_synthetic_task_with(vocab, classes, seq_len, size, DEFAULT_SIGNAL, seed)
}

/// Each class owns a disjoint set of topic tokens. Every position independently
/// draws a topic token of its class with probability `signal`, else a uniform token.
/// Labels are balanced (sizes differ by at most one) and shuffled.
pub fn make_synthetic_task_with(
    vocab: usize,
    classes: usize,
    seq_len: usize,
    size: usize,
    signal: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {classes}")));
    }
    if size < classes {
        return Err(Error::invalid(format!(
            "size {size} is smaller than class count {classes}"
        )));
    }
    if vocab < classes {
        return Err(Error::invalid(format!(
            "vocab {vocab} cannot hold {classes} disjoint topics"
        )));
    }
    if seq_len == 0 {
        return Err(Error::invalid("seq_len must be positive"));
    }
    if !(0.0..=1.0).contains(&signal) {
        return Err(Error::invalid(format!("signal {signal} not in [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens: Vec<usize> = (0..vocab).collect();
    tokens.shuffle(&mut rng);
    let per_topic = (vocab / (2 * classes)).max(1);
    let topics: Vec<&[usize]> = (0..classes)
        .map(|c| &tokens[c * per_topic..(c + 1) * per_topic])
        .collect();

    let mut labels: Vec<usize> = (0..size).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let sequences = labels
        .iter()
        .map(|&y| {
            (0..seq_len)
                .map(|_| {
                    if rng.random::<f64>() < signal {
                        topics[y][rng.random_range(0..per_topic)]
                    } else {
                        rng.random_range(0..vocab)
                    }
                })
                .collect()
        })
        .collect();
    LabeledDataset::new(sequences, labels, classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub n_clients: usize,
    pub beta: f64,
    pub seed: u64,
    pub min_shard: usize,
}

/// Example indices per client, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    beta: f64,
    n_clients: usize,
    clients: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    client: usize,
    indices: Vec<usize>,
}

impl Partition {
    pub fn materialize(&self, data: &LabeledDataset) -> Vec<LabeledDataset> {
        self.shards.iter().map(|s| data.subset(s)).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }

    pub fn manifest_json(&self, spec: &PartitionSpec) -> Result<String> {
        let m = Manifest {
            seed: spec.seed,
            beta: spec.beta,
            n_clients: spec.n_clients,
            clients: self
                .shards
                .iter()
                .enumerate()
                .map(|(client, s)| ManifestEntry {
                    client,
                    indices: s.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&m)?)
    }

    pub fn write_manifest(&self, spec: &PartitionSpec, path: &Path) -> Result<()> {
        std::fs::write(path, self.manifest_json(spec)?)?;
        Ok(())
    }

    pub fn read_manifest(path: &Path) -> Result<Partition> {
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok(Partition {
            shards: m.clients.into_iter().map(|e| e.indices).collect(),
        })
    }
}

/// For every class, draw client proportions from Dirichlet(beta, ..., beta) and
/// hand out that class's examples accordingly. Re-draws the whole partition
/// (bounded by [`MAX_PARTITION_DRAWS`]) while any shard is below `min_shard`.
pub fn dirichlet_partition(data: &LabeledDataset, spec: &PartitionSpec) -> Result<Partition> {
    let n = spec.n_clients;
    if n == 0 {
        return Err(Error::invalid("n_clients must be at least 1"));
    }
    if !spec.beta.is_finite() || spec.beta <= 0.0 {
        return Err(Error::invalid(format!("beta must be positive, got {}", spec.beta)));
    }
    if n.saturating_mul(spec.min_shard) > data.len() {
        return Err(Error::invalid(format!(
            "infeasible min_shard: {n} clients x {} > {} examples",
            spec.min_shard,
            data.len()
        )));
    }
    let gamma = Gamma::new(spec.beta, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.class_count];
    for (i, &y) in data.labels.iter().enumerate() {
        by_class[y].push(i);
    }

    for _ in 0..MAX_PARTITION_DRAWS {
        let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let props = dirichlet(&gamma, n, &mut rng);
            let total = members.len();
            let mut start = 0;
            let mut cum = 0.0;
            for (client, p) in props.iter().enumerate() {
                cum += p;
                let end = if client + 1 == n {
                    total
                } else {
                    ((cum * total as f64).round() as usize).clamp(start, total)
                };
                shards[client].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if shards.iter().all(|s| s.len() >= spec.min_shard) {
            for s in &mut shards {
                s.sort_unstable();
            }
            return Ok(Partition { shards });
        }
    }
    Err(Error::invalid(format!(
        "no partition with every shard >= {} found in {MAX_PARTITION_DRAWS} draws (beta {})",
        spec.min_shard, spec.beta
    )))
}

fn dirichlet<R: Rng + ?Sized>(gamma: &Gamma<f64>, n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        // Tiny concentrations can underflow every draw to zero.
        if sum > 0.0 && sum.is_finite() {
            return draws.into_iter().map(|g| g / sum).collect();
        }
    }
}

/// Half the L1 distance between two histograms.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
