//! Parameter server: weighted operator averaging, synchronous rounds and
//! communication accounting.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{ClientState, FullModelClient, Phase};
use crate::error::{Error, Result};
use crate::ligo::GrowthOperator;
use crate::model::ModelConfig;
use crate::optim::OptimizerSettings;
use crate::params::ParamSet;

/// What the server does with the uploaded shared operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Size-weighted average, broadcast back to every client.
    WeightedAverage,
    /// No exchange: each client keeps its own operator.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundSettings {
    pub rounds: usize,
    pub epochs: usize,
    pub optimizer: OptimizerSettings,
    pub mode: AggregationMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub client: usize,
    pub upload_params: usize,
    pub download_params: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundLedger {
    pub records: Vec<RoundRecord>,
    /// Seconds per round; informational and never part of deterministic outputs.
    #[serde(skip)]
    pub round_seconds: Vec<f64>,
}

impl RoundLedger {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn rounds(&self) -> usize {
        self.records.iter().map(|r| r.round).max().unwrap_or(0)
    }

    pub fn clients(&self) -> usize {
        let mut ids: Vec<usize> = self.records.iter().map(|r| r.client).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    /// Upload plus download over every client and round.
    pub fn total_comm(&self) -> usize {
        self.records.iter().map(|r| r.upload_params + r.download_params).sum()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let records = r.deserialize().collect::<std::result::Result<Vec<RoundRecord>, _>>()?;
        Ok(Self {
            records,
            round_seconds: Vec::new(),
        })
    }
}

/// An in-process message; every exchange goes through the binary codec.
#[derive(Debug, Clone)]
pub struct Message {
    pub from: Endpoint,
    pub round: usize,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    Server,
    Client(usize),
}

impl Message {
    pub fn operator(from: Endpoint, round: usize, op: &GrowthOperator) -> Self {
        Self {
            from,
            round,
            payload: op.encode(),
        }
    }

    pub fn open_operator(&self) -> Result<GrowthOperator> {
        GrowthOperator::decode(&self.payload)
    }

    pub fn model(from: Endpoint, round: usize, params: &ParamSet) -> Self {
        Self {
            from,
            round,
            payload: params.encode(""),
        }
    }

    pub fn open_model(&self) -> Result<ParamSet> {
        Ok(ParamSet::decode(&self.payload)?.0)
    }
}

fn check_weights(weights: &[f64], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("nothing to aggregate"));
    }
    if weights.len() != n {
        return Err(Error::invalid(format!("{n} items but {} weights", weights.len())));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w <= 0.0) {
        return Err(Error::invalid(format!("aggregation weights must be positive, got {w}")));
    }
    Ok(weights.iter().sum())
}

/// Element-wise `sum_i (w_i / sum_j w_j) * x_i` over identically laid out sets.
pub fn weighted_average(sets: &[&ParamSet], weights: &[f64]) -> Result<ParamSet> {
    let total = check_weights(weights, sets.len())?;
    if let Some(bad) = sets.iter().position(|s| !s.same_layout(sets[0])) {
        return Err(Error::shape(
            "aggregate",
            format!("item {bad} has a different layout from item 0"),
        ));
    }
    let mut acc = sets[0].scale(0.0);
    for (s, w) in sets.iter().zip(weights) {
        acc.axpy(w / total, s)?;
    }
    Ok(acc)
}

/// Size-weighted average of shared operators.
pub fn aggregate(ops: &[GrowthOperator], weights: &[f64]) -> Result<GrowthOperator> {
    check_weights(weights, ops.len())?;
    if let Some(bad) = ops.iter().position(|o| !o.compatible_with(&ops[0])) {
        return Err(Error::shape(
            "aggregate",
            format!("operator {bad} is incompatible with operator 0"),
        ));
    }
    let sets: Vec<&ParamSet> = ops.iter().map(GrowthOperator::tensors).collect();
    let avg = weighted_average(&sets, weights)?;
    GrowthOperator::from_tensors(*ops[0].src(), *ops[0].dst(), ops[0].width_maps(), avg)
}

fn id_order<T>(items: &[T], id: impl Fn(&T) -> usize) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by_key(|&i| id(&items[i]));
    if order.windows(2).any(|w| id(&items[w[0]]) == id(&items[w[1]])) {
        return Err(Error::invalid("client ids must be unique"));
    }
    Ok(order)
}

/// Synchronous shared-operator rounds. Clients train concurrently; the server
/// waits for every upload, aggregates in client-id order and broadcasts.
/// `on_round(r, clients)` runs after each round's broadcast.
pub fn run_rounds<F>(clients: &mut [ClientState], settings: &RoundSettings, mut on_round: F) -> Result<RoundLedger>
where
    F: FnMut(usize, &[ClientState]) -> Result<()>,
{
    let mut ledger = RoundLedger::default();
    if settings.rounds == 0 {
        return Ok(ledger);
    }
    if let Some(c) = clients
        .iter()
        .find(|c| !matches!(c.phase(), Phase::LocalTrained | Phase::InRounds))
    {
        return Err(Error::Phase(format!(
            "client {} is in phase {:?}; rounds need the intermediate model",
            c.id(),
            c.phase()
        )));
    }
    let order = id_order(clients, ClientState::id)?;
    let weights: Vec<f64> = order.iter().map(|&i| clients[i].shard().len() as f64).collect();

    for round in 1..=settings.rounds {
        let started = Instant::now();
        let results: Vec<Result<Vec<f64>>> = clients
            .par_iter_mut()
            .map(|c| c.train_global_ligo(settings.epochs, &settings.optimizer))
            .collect();
        let mut losses = vec![f64::NAN; clients.len()];
        for &i in &order {
            match &results[i] {
                Ok(l) => losses[i] = l.last().copied().unwrap_or(f64::NAN),
                Err(_) => {
                    let err = results.into_iter().nth(i).and_then(|r| r.err()).expect("error present");
                    return Err(Error::Round {
                        round,
                        client: clients[i].id(),
                        source: Box::new(err),
                    });
                }
            }
        }

        let (upload, download) = match settings.mode {
            AggregationMode::WeightedAverage => {
                let uploads = order
                    .iter()
                    .map(|&i| {
                        Message::operator(Endpoint::Client(clients[i].id()), round, clients[i].global_ligo())
                            .open_operator()
                    })
                    .collect::<Result<Vec<_>>>()?;
                let aggregated = aggregate(&uploads, &weights)?;
                let broadcast = Message::operator(Endpoint::Server, round, &aggregated);
                for &i in &order {
                    clients[i].install_aggregate(broadcast.open_operator()?, round)?;
                }
                let n = aggregated.count().total;
                (n, n)
            }
            AggregationMode::Identity => (0, 0),
        };

        for &i in &order {
            ledger.records.push(RoundRecord {
                round,
                client: clients[i].id(),
                upload_params: upload,
                download_params: download,
                loss: losses[i],
            });
        }
        ledger.round_seconds.push(started.elapsed().as_secs_f64());
        on_round(round, clients)?;
    }
    Ok(ledger)
}

/// Full-model federated averaging rounds (the from-scratch baselines).
pub fn run_fedavg<F>(clients: &mut [FullModelClient], settings: &RoundSettings, mut on_round: F) -> Result<RoundLedger>
where
    F: FnMut(usize, &[FullModelClient]) -> Result<()>,
{
    let mut ledger = RoundLedger::default();
    if settings.rounds == 0 {
        return Ok(ledger);
    }
    let order = id_order(clients, FullModelClient::id)?;
    let weights: Vec<f64> = order.iter().map(|&i| clients[i].shard().len() as f64).collect();
    for round in 1..=settings.rounds {
        let started = Instant::now();
        let results: Vec<Result<Vec<f64>>> = clients
            .par_iter_mut()
            .map(|c| c.train(settings.epochs, &settings.optimizer))
            .collect();
        let mut losses = vec![f64::NAN; clients.len()];
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(l) => losses[i] = l.last().copied().unwrap_or(f64::NAN),
                Err(e) => {
                    return Err(Error::Round {
                        round,
                        client: clients[i].id(),
                        source: Box::new(e),
                    })
                }
            }
        }
        let (upload, download) = match settings.mode {
            AggregationMode::WeightedAverage => {
                let uploads = order
                    .iter()
                    .map(|&i| {
                        Message::model(Endpoint::Client(clients[i].id()), round, clients[i].params()).open_model()
                    })
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&ParamSet> = uploads.iter().collect();
                let avg = weighted_average(&refs, &weights)?;
                let broadcast = Message::model(Endpoint::Server, round, &avg);
                for &i in &order {
                    clients[i].install(broadcast.open_model()?)?;
                }
                let n = avg.numel();
                (n, n)
            }
            AggregationMode::Identity => (0, 0),
        };
        for &i in &order {
            ledger.records.push(RoundRecord {
                round,
                client: clients[i].id(),
                upload_params: upload,
                download_params: download,
                loss: losses[i],
            });
        }
        ledger.round_seconds.push(started.elapsed().as_secs_f64());
        on_round(round, clients)?;
    }
    Ok(ledger)
}

/// Shared-operator traffic against a baseline that ships `alternative` whole.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommReport {
    pub rounds: usize,
    pub clients: usize,
    /// Upload plus download per client per round.
    pub per_client_round: usize,
    pub alternative_per_client_round: usize,
    pub total: usize,
    pub alternative_total: usize,
    pub reduction_pct: f64,
    /// Same traffic in bytes at 8 bytes per parameter.
    pub total_bytes: usize,
    pub alternative_total_bytes: usize,
}

pub fn comm_cost_report(ledger: &RoundLedger, alternative: &ModelConfig) -> Result<CommReport> {
    if ledger.is_empty() {
        return Err(Error::invalid("ledger is empty"));
    }
    let rounds = ledger.rounds();
    let clients = ledger.clients();
    let total = ledger.total_comm();
    let alt_per = 2 * alternative.count_params().total;
    let alternative_total = alt_per * rounds * clients;
    Ok(CommReport {
        rounds,
        clients,
        per_client_round: total / (rounds * clients),
        alternative_per_client_round: alt_per,
        total,
        alternative_total,
        reduction_pct: 100.0 * (1.0 - total as f64 / alternative_total as f64),
        total_bytes: total * 8,
        alternative_total_bytes: alternative_total * 8,
    })
}
