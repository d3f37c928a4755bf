//! Evaluation metrics, cross-client statistics and report writers.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::client::ClientState;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamSet;

/// Examples per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub examples: usize,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict(config: &ModelConfig, params: &ParamSet, sequences: &[Vec<usize>]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(sequences.len());
    for chunk in sequences.chunks(EVAL_CHUNK) {
        let logits = config.forward(params, chunk)?;
        let c = config.num_classes;
        out.extend(logits.data().chunks(c).map(argmax));
    }
    Ok(out)
}

pub fn evaluate(params: &ParamSet, config: &ModelConfig, dataset: &LabeledDataset) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    if dataset.class_count != config.num_classes {
        return Err(Error::shape(
            "evaluate",
            format!(
                "dataset has {} classes, model has {}",
                dataset.class_count, config.num_classes
            ),
        ));
    }
    let preds = predict(config, params, &dataset.sequences)?;
    let correct = preds.iter().zip(&dataset.labels).filter(|(p, y)| p == y).count();
    Ok(Evaluation {
        accuracy: correct as f64 / dataset.len() as f64,
        macro_precision: macro_precision(&preds, &dataset.labels, dataset.class_count),
        examples: dataset.len(),
    })
}

/// Mean per-class precision over classes that occur as a label or a prediction.
/// A class that occurs only as a label contributes 0.
pub fn macro_precision(preds: &[usize], labels: &[usize], classes: usize) -> f64 {
    let mut tp = vec![0usize; classes];
    let mut predicted = vec![0usize; classes];
    let mut present = vec![false; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        predicted[p] += 1;
        present[p] = true;
        present[y] = true;
        if p == y {
            tp[p] += 1;
        }
    }
    let used: Vec<usize> = (0..classes).filter(|&c| present[c]).collect();
    if used.is_empty() {
        return 0.0;
    }
    used.iter()
        .map(|&c| {
            if predicted[c] == 0 {
                0.0
            } else {
                tp[c] as f64 / predicted[c] as f64
            }
        })
        .sum::<f64>()
        / used.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientStats {
    pub mean: f64,
    /// Population standard deviation (divisor n).
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

pub fn cross_client_stats(values: &[f64]) -> Result<ClientStats> {
    if values.is_empty() {
        return Err(Error::invalid("no per-client values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(ClientStats {
        mean: mean.clamp(min, max),
        std: var.sqrt(),
        min,
        max,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub values: Vec<Vec<f64>>,
    /// Indices whose vector has zero norm; their rows and columns are 0.
    pub zero_norm: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_off_diagonal(&self) -> Option<f64> {
        let n = self.len();
        (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.values[i][j])
            .reduce(f64::max)
    }

    pub fn to_csv(&self) -> String {
        let n = self.len();
        let mut out = String::from("client");
        for j in 0..n {
            out.push_str(&format!(",{j}"));
        }
        out.push('\n');
        for (i, row) in self.values.iter().enumerate() {
            out.push_str(&i.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Pairwise cosine similarity. Symmetric by construction, unit diagonal for
/// nonzero vectors, and clamped to [-1, 1].
pub fn cosine_similarity_matrix(vectors: &[Vec<f64>]) -> Result<SimilarityMatrix> {
    let n = vectors.len();
    if let Some(v) = vectors.iter().find(|v| v.len() != vectors[0].len()) {
        return Err(Error::shape(
            "similarity",
            format!("vector of length {} vs {}", v.len(), vectors[0].len()),
        ));
    }
    let norms: Vec<f64> = vectors
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let zero_norm: Vec<usize> = (0..n).filter(|&i| norms[i] == 0.0).collect();
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        if norms[i] == 0.0 {
            continue;
        }
        values[i][i] = 1.0;
        for j in i + 1..n {
            if norms[j] == 0.0 {
                continue;
            }
            let dot: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum();
            let s = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            values[i][j] = s;
            values[j][i] = s;
        }
    }
    Ok(SimilarityMatrix { values, zero_norm })
}

/// Cosine similarity of the flattened intermediate models.
pub fn intermediate_similarity(clients: &[ClientState]) -> Result<SimilarityMatrix> {
    let mut vectors = Vec::with_capacity(clients.len());
    let mut first: Option<&ParamSet> = None;
    for c in clients {
        let p = c
            .inter_params()
            .ok_or_else(|| Error::Phase(format!("client {} has no intermediate model", c.id())))?;
        if let Some(f) = first {
            if !f.same_layout(p) {
                return Err(Error::shape(
                    "similarity",
                    format!("client {} intermediate layout differs", c.id()),
                ));
            }
        } else {
            first = Some(p);
        }
        vectors.push(p.flatten());
    }
    cosine_similarity_matrix(&vectors)
}

/// One row of the per-round metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    /// Client id, or `mean` / `std` for cross-client aggregates.
    pub client: String,
    pub metric: String,
    pub value: f64,
}

impl MetricsRecord {
    pub fn new(round: usize, client: impl ToString, metric: &str, value: f64) -> Self {
        Self {
            round,
            client: client.to_string(),
            metric: metric.to_string(),
            value,
        }
    }
}

/// Per-client rows plus `mean` and `std` rows for one metric in one round.
pub fn summarize_round(round: usize, metric: &str, per_client: &[(usize, f64)]) -> Result<Vec<MetricsRecord>> {
    let values: Vec<f64> = per_client.iter().map(|&(_, v)| v).collect();
    let stats = cross_client_stats(&values)?;
    let mut rows: Vec<MetricsRecord> = per_client
        .iter()
        .map(|&(c, v)| MetricsRecord::new(round, c, metric, v))
        .collect();
    rows.push(MetricsRecord::new(round, "mean", metric, stats.mean));
    rows.push(MetricsRecord::new(round, "std", metric, stats.std));
    Ok(rows)
}

pub fn records_to_csv(records: &[MetricsRecord]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["round", "client", "metric", "value"])?;
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
}

pub fn records_from_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    Ok(r.deserialize()
        .collect::<std::result::Result<Vec<MetricsRecord>, _>>()?)
}

/// Comment lines identifying the run that produced a file.
pub fn provenance_header(seed: u64, config_hash: &str) -> String {
    format!("# seed={seed}\n# config_sha256={config_hash}\n# std=population\n")
}

pub fn write_with_header(path: &Path, header: &str, body: &str) -> Result<()> {
    fs::write(path, format!("{header}{body}"))?;
    Ok(())
}
