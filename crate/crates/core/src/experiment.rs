//! End-to-end runs: data, clients, rounds, evaluation and the artifact bundle.
//!
//! Bundle layout under the output directory:
//!
//! ```text
//! config.json        normalized configuration
//! shards.json        client id -> training example indices
//! metrics.csv        round, client, metric, value
//! ledger.csv         round, client, upload_params, download_params, loss
//! similarity.csv     intermediate-model cosine similarity (growth presets)
//! summary.json       final metrics, traffic and parameter accounting
//! timings.json       wall-clock seconds (not reproducible, kept apart)
//! checkpoints/       one directory per client
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{ClientSetup, ClientState, FullModelClient};
use crate::config::{count_report, match_fedavg_config, ExperimentConfig, Preset, ResolvedModels};
use crate::data::{dirichlet_partition, make_synthetic_task_with, LabeledDataset, Partition, PartitionSpec};
use crate::error::{Error, Result};
use crate::ligo::count_operator_params;
use crate::metrics::{
    cross_client_stats, evaluate, intermediate_similarity, provenance_header, records_to_csv, summarize_round,
    write_with_header, ClientStats, Evaluation, MetricsRecord, SimilarityMatrix,
};
use crate::model::ModelConfig;
use crate::params::ParamSet;
use crate::server::{
    comm_cost_report, run_fedavg, run_rounds, AggregationMode, CommReport, RoundLedger, RoundSettings,
};

const TAG_PARTITION: u64 = 1;
const TAG_GLOBAL_OPERATOR: u64 = 2;
const TAG_FULL_MODEL: u64 = 3;
const TAG_CLIENT: u64 = 1000;

/// Independent sub-seed for a labelled purpose.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng.next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySummary {
    pub max_off_diagonal: f64,
    pub mean_off_diagonal: f64,
    pub zero_norm: Vec<usize>,
}

impl SimilaritySummary {
    fn of(m: &SimilarityMatrix) -> Self {
        let n = m.len();
        let off: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.values[i][j])
            .collect();
        Self {
            max_off_diagonal: m.max_off_diagonal().unwrap_or(0.0),
            mean_off_diagonal: if off.is_empty() {
                0.0
            } else {
                off.iter().sum::<f64>() / off.len() as f64
            },
            zero_norm: m.zero_norm.clone(),
        }
    }
}

/// Everything in `summary.json`. Contains no timing data, so it is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub preset: String,
    pub seed: u64,
    pub config_sha256: String,
    pub n_clients: usize,
    pub rounds: usize,
    pub test_examples: usize,
    pub shard_sizes: Vec<usize>,
    /// Shape trained by each client (small model for growth presets).
    pub client_models: Vec<String>,
    /// Shape of the model being evaluated at the end.
    pub final_model: ModelConfig,
    pub final_accuracy: Vec<f64>,
    pub accuracy: ClientStats,
    pub final_precision: Vec<f64>,
    pub precision: ClientStats,
    pub std_divisor: String,
    pub trainable_params: f64,
    pub comm: CommReport,
    pub similarity: Option<SimilaritySummary>,
}

/// Data shared by every preset.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub models: ResolvedModels,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub partition: Partition,
    pub partition_spec: PartitionSpec,
}

/// Normalize the config, generate the task and shard it.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let config = config.normalized()?;
    let t = &config.task;
    let data = make_synthetic_task_with(t.vocab, t.classes, t.seq_len, t.size, t.signal, config.seed)?;
    let (train, test) = balanced_split(&data, t.test_fraction);
    let partition_spec = PartitionSpec {
        n_clients: config.n_clients,
        beta: config.beta,
        seed: derive_seed(config.seed, TAG_PARTITION),
        min_shard: config.min_shard,
    };
    let partition = dirichlet_partition(&train, &partition_spec)?;
    let models = config.resolved_models();
    Ok(Prepared {
        config,
        models,
        train,
        test,
        partition,
        partition_spec,
    })
}

/// Hold out `fraction` of every class so the test set stays balanced.
fn balanced_split(data: &LabeledDataset, fraction: f64) -> (LabeledDataset, LabeledDataset) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..data.class_count {
        let members: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == c).collect();
        let held = ((members.len() as f64) * fraction).round() as usize;
        let cut = members.len() - held;
        train.extend_from_slice(&members[..cut]);
        test.extend_from_slice(&members[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (data.subset(&train), data.subset(&test))
}

fn round_settings(cfg: &ExperimentConfig, mode: AggregationMode) -> RoundSettings {
    RoundSettings {
        rounds: cfg.training.rounds,
        epochs: cfg.training.e_g,
        optimizer: cfg.training.global_settings(),
        mode,
    }
}

fn client_setups(p: &Prepared) -> Vec<ClientSetup> {
    let cfg = &p.config;
    (0..cfg.n_clients)
        .map(|id| ClientSetup {
            id,
            small: p.models.small_for(id),
            intermediate: p.models.intermediate,
            large: p.models.large,
            width_maps: cfg.width_maps,
            init_scheme: cfg.init_scheme,
            seed: derive_seed(cfg.seed, TAG_CLIENT + id as u64),
            global_seed: derive_seed(cfg.seed, TAG_GLOBAL_OPERATOR),
        })
        .collect()
}

fn shape_label(c: &ModelConfig) -> String {
    format!(
        "D={} L={} H={} ffn={}",
        c.hidden_dim, c.num_layers, c.num_heads, c.ffn_multiplier
    )
}

fn eval_all(models: &[(usize, &ModelConfig, ParamSet)], test: &LabeledDataset) -> Result<Vec<(usize, Evaluation)>> {
    models
        .par_iter()
        .map(|(id, cfg, p)| Ok((*id, evaluate(p, cfg, test)?)))
        .collect()
}

fn metric_rows(round: usize, evals: &[(usize, Evaluation)], prefix: &str) -> Result<Vec<MetricsRecord>> {
    let acc: Vec<(usize, f64)> = evals.iter().map(|(i, e)| (*i, e.accuracy)).collect();
    let prec: Vec<(usize, f64)> = evals.iter().map(|(i, e)| (*i, e.macro_precision)).collect();
    let mut rows = summarize_round(round, &format!("{prefix}accuracy"), &acc)?;
    rows.extend(summarize_round(round, &format!("{prefix}precision"), &prec)?);
    Ok(rows)
}

/// Deferred writer for the per-client checkpoint directories.
type CheckpointWriter = Box<dyn FnOnce(&Path) -> Result<()>>;

/// Output of one run, before it is written to disk.
struct Outcome {
    records: Vec<MetricsRecord>,
    ledger: RoundLedger,
    similarity: Option<SimilarityMatrix>,
    summary: RunSummary,
    checkpoint: CheckpointWriter,
}

/// Run the configured preset and write the artifact bundle into `out`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let started = Instant::now();
    let p = prepare(config)?;
    let outcome = if p.config.preset.grows() {
        run_growth(&p)?
    } else {
        run_full_model(&p)?
    };
    write_bundle(&p, outcome, out, started)
}

fn run_growth(p: &Prepared) -> Result<Outcome> {
    let cfg = &p.config;
    let shards = p.partition.materialize(&p.train);
    let mut clients = client_setups(p)
        .iter()
        .zip(shards)
        .map(|(s, shard)| ClientState::new(s, shard))
        .collect::<Result<Vec<_>>>()?;

    let pre = cfg.training.pretrain_settings();
    let loc = cfg.training.local_settings();
    let (e_pre, e_l) = (cfg.training.e_pre, cfg.training.e_l);
    let losses = clients
        .par_iter_mut()
        .map(|c| {
            let a = c.pretrain_small(e_pre, &pre)?;
            let b = c.train_local_ligo(e_l, &loc)?;
            Ok((a.last().copied(), b.last().copied()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    for (c, (a, b)) in clients.iter().zip(&losses) {
        if let Some(a) = a {
            records.push(MetricsRecord::new(0, c.id(), "pretrain_loss", *a));
        }
        if let Some(b) = b {
            records.push(MetricsRecord::new(0, c.id(), "local_ligo_loss", *b));
        }
    }
    let small: Vec<_> = clients
        .iter()
        .map(|c| (c.id(), c.small_config(), c.small_params().clone()))
        .collect();
    records.extend(metric_rows(0, &eval_all(&small, &p.test)?, "small_")?);
    let inter: Vec<_> = clients
        .iter()
        .map(|c| {
            let inter = c
                .inter_params()
                .cloned()
                .ok_or_else(|| Error::Phase("intermediate model missing".into()))?;
            Ok((c.id(), &p.models.intermediate, inter))
        })
        .collect::<Result<Vec<_>>>()?;
    records.extend(metric_rows(0, &eval_all(&inter, &p.test)?, "inter_")?);
    let similarity = intermediate_similarity(&clients)?;

    let large_cfg = p.models.large;
    let test = &p.test;
    let round_eval = |round: usize, cs: &[ClientState]| -> Result<Vec<MetricsRecord>> {
        let large = cs
            .iter()
            .map(|c| Ok((c.id(), &large_cfg, c.current_large()?)))
            .collect::<Result<Vec<_>>>()?;
        metric_rows(round, &eval_all(&large, test)?, "")
    };
    records.extend(round_eval(0, &clients)?);

    let mode = if cfg.preset == Preset::Agg {
        AggregationMode::WeightedAverage
    } else {
        AggregationMode::Identity
    };
    let mut round_records = Vec::new();
    let ledger = run_rounds(&mut clients, &round_settings(cfg, mode), |r, cs| {
        round_records.extend(round_eval(r, cs)?);
        Ok(())
    })?;
    records.extend(round_records);

    let finals = clients
        .iter_mut()
        .map(|c| Ok((c.id(), &large_cfg, c.finalize_large()?)))
        .collect::<Result<Vec<_>>>()?;
    let evals = eval_all(&finals, &p.test)?;

    let counts = count_report(cfg)?;
    let client_models = clients.iter().map(|c| shape_label(c.small_config())).collect();
    let summary = build_summary(
        p,
        &ledger,
        &evals,
        client_models,
        large_cfg,
        counts.dual_trainable,
        Some(&similarity),
    )?;
    Ok(Outcome {
        records,
        ledger,
        similarity: Some(similarity),
        summary,
        checkpoint: Box::new(move |dir| {
            for c in &clients {
                c.save(&dir.join(format!("client_{}", c.id())))?;
            }
            Ok(())
        }),
    })
}

/// Model trained by the full-model baselines.
pub fn full_model_config(p: &Prepared) -> Result<ModelConfig> {
    match p.config.preset {
        Preset::FedavgMatched => {
            let target = 2 * count_operator_params(&p.models.intermediate, &p.models.large, p.config.width_maps).total;
            Ok(match_fedavg_config(&p.models.large, target)?.0)
        }
        _ => Ok(p.models.large),
    }
}

fn run_full_model(p: &Prepared) -> Result<Outcome> {
    let cfg = &p.config;
    let model = full_model_config(p)?;
    let init = model.init_params(derive_seed(cfg.seed, TAG_FULL_MODEL))?;
    let shards = p.partition.materialize(&p.train);
    let mut clients = shards
        .into_iter()
        .enumerate()
        .map(|(id, shard)| {
            FullModelClient::new(
                id,
                model,
                init.clone(),
                shard,
                derive_seed(cfg.seed, TAG_CLIENT + id as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let test = &p.test;
    let round_eval = |round: usize, cs: &[FullModelClient]| -> Result<Vec<MetricsRecord>> {
        let models: Vec<_> = cs.iter().map(|c| (c.id(), c.config(), c.params().clone())).collect();
        metric_rows(round, &eval_all(&models, test)?, "")
    };
    let mut records = round_eval(0, &clients)?;
    let mut round_records = Vec::new();
    let ledger = run_fedavg(
        &mut clients,
        &round_settings(cfg, AggregationMode::WeightedAverage),
        |r, cs| {
            round_records.extend(round_eval(r, cs)?);
            Ok(())
        },
    )?;
    records.extend(round_records);
    let finals: Vec<_> = clients
        .iter()
        .map(|c| (c.id(), c.config(), c.params().clone()))
        .collect();
    let evals = eval_all(&finals, &p.test)?;
    let client_models = clients.iter().map(|c| shape_label(c.config())).collect();
    let summary = build_summary(
        p,
        &ledger,
        &evals,
        client_models,
        model,
        model.count_params().total as f64,
        None,
    )?;
    Ok(Outcome {
        records,
        ledger,
        similarity: None,
        summary,
        checkpoint: Box::new(move |dir| {
            for c in &clients {
                let d = dir.join(format!("client_{}", c.id()));
                fs::create_dir_all(&d)?;
                fs::write(
                    d.join("model.bin"),
                    c.params().encode(&serde_json::to_string(c.config())?),
                )?;
            }
            Ok(())
        }),
    })
}

fn build_summary(
    p: &Prepared,
    ledger: &RoundLedger,
    evals: &[(usize, Evaluation)],
    client_models: Vec<String>,
    final_model: ModelConfig,
    trainable_params: f64,
    similarity: Option<&SimilarityMatrix>,
) -> Result<RunSummary> {
    let acc: Vec<f64> = evals.iter().map(|(_, e)| e.accuracy).collect();
    let prec: Vec<f64> = evals.iter().map(|(_, e)| e.macro_precision).collect();
    Ok(RunSummary {
        preset: p.config.preset.as_str().to_string(),
        seed: p.config.seed,
        config_sha256: p.config.hash(),
        n_clients: p.config.n_clients,
        rounds: p.config.training.rounds,
        test_examples: p.test.len(),
        shard_sizes: p.partition.sizes(),
        client_models,
        final_model,
        accuracy: cross_client_stats(&acc)?,
        final_accuracy: acc,
        precision: cross_client_stats(&prec)?,
        final_precision: prec,
        std_divisor: "population".into(),
        trainable_params,
        comm: comm_cost_report(ledger, &p.models.large)?,
        similarity: similarity.map(SimilaritySummary::of),
    })
}

fn write_bundle(p: &Prepared, outcome: Outcome, out: &Path, started: Instant) -> Result<RunSummary> {
    fs::create_dir_all(out)?;
    let header = provenance_header(p.config.seed, &p.config.hash());
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&p.config)?)?;
    p.partition
        .write_manifest(&p.partition_spec, &out.join("shards.json"))?;
    write_with_header(&out.join("metrics.csv"), &header, &records_to_csv(&outcome.records)?)?;
    write_with_header(&out.join("ledger.csv"), &header, &outcome.ledger.to_csv()?)?;
    if let Some(sim) = &outcome.similarity {
        write_with_header(&out.join("similarity.csv"), &header, &sim.to_csv())?;
    }
    fs::write(out.join("summary.json"), summary_json(&outcome.summary)?)?;
    let ckpt = out.join("checkpoints");
    (outcome.checkpoint)(&ckpt)?;
    let timings = serde_json::json!({
        "total_seconds": started.elapsed().as_secs_f64(),
        "round_seconds": outcome.ledger.round_seconds,
    });
    fs::write(out.join("timings.json"), serde_json::to_string_pretty(&timings)?)?;
    Ok(outcome.summary)
}

pub fn summary_json(s: &RunSummary) -> Result<String> {
    Ok(serde_json::to_string_pretty(s)? + "\n")
}

/// Rebuild the summary of a finished run from its checkpoints and ledger.
pub fn report(out: &Path) -> Result<RunSummary> {
    let config: ExperimentConfig = serde_json::from_str(&fs::read_to_string(out.join("config.json"))?)?;
    let p = prepare(&config)?;
    let ledger = RoundLedger::from_csv(&fs::read_to_string(out.join("ledger.csv"))?)?;
    let ckpt = out.join("checkpoints");
    let dir = |id: usize| -> PathBuf { ckpt.join(format!("client_{id}")) };
    if p.config.preset.grows() {
        let clients = (0..p.config.n_clients)
            .map(|id| ClientState::load(&dir(id)))
            .collect::<Result<Vec<_>>>()?;
        let large_cfg = p.models.large;
        let finals = clients
            .iter()
            .map(|c| Ok((c.id(), &large_cfg, c.current_large()?)))
            .collect::<Result<Vec<_>>>()?;
        let evals = eval_all(&finals, &p.test)?;
        let sim = intermediate_similarity(&clients)?;
        let labels = clients.iter().map(|c| shape_label(c.small_config())).collect();
        let trainable = count_report(&p.config)?.dual_trainable;
        build_summary(&p, &ledger, &evals, labels, large_cfg, trainable, Some(&sim))
    } else {
        let model = full_model_config(&p)?;
        let finals = (0..p.config.n_clients)
            .map(|id| {
                let (params, meta) = ParamSet::decode(&fs::read(dir(id).join("model.bin"))?)?;
                let cfg: ModelConfig = serde_json::from_str(&meta)?;
                if cfg != model {
                    return Err(Error::Codec(format!(
                        "client {id} checkpoint shape differs from config"
                    )));
                }
                Ok((id, &model, params))
            })
            .collect::<Result<Vec<_>>>()?;
        let evals = eval_all(&finals, &p.test)?;
        let labels = vec![shape_label(&model); p.config.n_clients];
        build_summary(
            &p,
            &ledger,
            &evals,
            labels,
            model,
            model.count_params().total as f64,
            None,
        )
    }
}
