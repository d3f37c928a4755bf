//! Per-client pipeline: pre-train a small model, learn a private growth operator
//! to the shared intermediate shape, then train the shared operator to the large
//! shape in server rounds.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::ligo::{GrowthOperator, InitScheme, WidthMaps};
use crate::model::ModelConfig;
use crate::optim::{Optimizer, OptimizerSettings};
use crate::params::ParamSet;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Fresh,
    Pretrained,
    LocalTrained,
    InRounds,
    Done,
}

/// Where the current shared operator came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    Initial,
    LocalUpdate { round: usize },
    Aggregated { round: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientSetup {
    pub id: usize,
    pub small: ModelConfig,
    pub intermediate: ModelConfig,
    pub large: ModelConfig,
    pub width_maps: WidthMaps,
    pub init_scheme: InitScheme,
    /// Seeds the small model, the private operator and minibatch order.
    pub seed: u64,
    /// Seeds the shared operator; equal across clients so rounds start from a common point.
    pub global_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    id: usize,
    small_config: ModelConfig,
    small_params: ParamSet,
    local_ligo: GrowthOperator,
    global_ligo: GrowthOperator,
    inter_params: Option<ParamSet>,
    shard: LabeledDataset,
    phase: Phase,
    seed: u64,
    epochs_run: u64,
    rounds: usize,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    id: usize,
    phase: Phase,
    small_config: ModelConfig,
    seed: u64,
    epochs_run: u64,
    rounds: usize,
    provenance: Provenance,
    shard: LabeledDataset,
}

impl ClientState {
    pub fn new(setup: &ClientSetup, shard: LabeledDataset) -> Result<Self> {
        let small_params = setup.small.init_params(setup.seed)?;
        let local_ligo = GrowthOperator::init(
            setup.small,
            setup.intermediate,
            setup.width_maps,
            setup.init_scheme,
            setup.seed ^ 0x4c4f_4341_4c00_0000,
        )?;
        let global_ligo = GrowthOperator::init(
            setup.intermediate,
            setup.large,
            setup.width_maps,
            setup.init_scheme,
            setup.global_seed,
        )?;
        if shard.class_count != setup.small.num_classes {
            return Err(Error::invalid(format!(
                "shard has {} classes, model has {}",
                shard.class_count, setup.small.num_classes
            )));
        }
        Ok(Self {
            id: setup.id,
            small_config: setup.small,
            small_params,
            local_ligo,
            global_ligo,
            inter_params: None,
            shard,
            phase: Phase::Fresh,
            seed: setup.seed,
            epochs_run: 0,
            rounds: 0,
            provenance: Provenance::Initial,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn small_config(&self) -> &ModelConfig {
        &self.small_config
    }

    pub fn small_params(&self) -> &ParamSet {
        &self.small_params
    }

    pub fn local_ligo(&self) -> &GrowthOperator {
        &self.local_ligo
    }

    pub fn global_ligo(&self) -> &GrowthOperator {
        &self.global_ligo
    }

    pub fn inter_params(&self) -> Option<&ParamSet> {
        self.inter_params.as_ref()
    }

    pub fn shard(&self) -> &LabeledDataset {
        &self.shard
    }

    /// Replace the small model before pre-training (e.g. with a model trained elsewhere).
    pub fn set_small_params(&mut self, params: ParamSet) -> Result<()> {
        self.expect(&[Phase::Fresh], "set_small_params")?;
        self.small_config.audit(&params)?;
        self.small_params = params;
        Ok(())
    }

    pub fn pretrain_small(&mut self, epochs: usize, settings: &OptimizerSettings) -> Result<Vec<f64>> {
        self.expect(&[Phase::Fresh], "pretrain_small")?;
        if self.shard.is_empty() {
            return Err(Error::invalid(format!("client {} has an empty shard", self.id)));
        }
        let mut opt = Optimizer::new(*settings)?;
        let cfg = self.small_config;
        let params = &mut self.small_params;
        let losses = run_epochs(
            &self.shard,
            epochs,
            settings.batch_size,
            self.seed,
            &mut self.epochs_run,
            |x, y| {
                let (loss, grads) = model_loss_and_grad(&cfg, params, x, y)?;
                opt.step(params, &grads)?;
                Ok(loss)
            },
        )?;
        self.phase = Phase::Pretrained;
        Ok(losses)
    }

    pub fn train_local_ligo(&mut self, epochs: usize, settings: &OptimizerSettings) -> Result<Vec<f64>> {
        self.expect(&[Phase::Pretrained], "train_local_ligo")?;
        if *self.local_ligo.src() != self.small_config {
            return Err(Error::invalid(format!(
                "private operator source {:?} does not match small model {:?}",
                self.local_ligo.src(),
                self.small_config
            )));
        }
        let mut opt = Optimizer::new(*settings)?;
        let op = &mut self.local_ligo;
        let small = &self.small_params;
        let losses = run_epochs(
            &self.shard,
            epochs,
            settings.batch_size,
            self.seed,
            &mut self.epochs_run,
            |x, y| {
                let (loss, grads) = operator_loss_and_grad(op, small, x, y)?;
                opt.step(op.tensors_mut(), &grads)?;
                Ok(loss)
            },
        )?;
        self.inter_params = Some(self.local_ligo.apply(&self.small_params)?);
        self.phase = Phase::LocalTrained;
        Ok(losses)
    }

    pub fn train_global_ligo(&mut self, epochs: usize, settings: &OptimizerSettings) -> Result<Vec<f64>> {
        self.expect(&[Phase::LocalTrained, Phase::InRounds], "train_global_ligo")?;
        let inter = self
            .inter_params
            .as_ref()
            .ok_or_else(|| Error::Phase("intermediate model not materialized".into()))?;
        let mut opt = Optimizer::new(*settings)?;
        let op = &mut self.global_ligo;
        let losses = run_epochs(
            &self.shard,
            epochs,
            settings.batch_size,
            self.seed,
            &mut self.epochs_run,
            |x, y| {
                let (loss, grads) = operator_loss_and_grad(op, inter, x, y)?;
                opt.step(op.tensors_mut(), &grads)?;
                Ok(loss)
            },
        )?;
        self.rounds += 1;
        self.provenance = Provenance::LocalUpdate { round: self.rounds };
        self.phase = Phase::InRounds;
        Ok(losses)
    }

    /// Replace the shared operator wholesale with the server's broadcast.
    pub fn install_aggregate(&mut self, aggregated: GrowthOperator, round: usize) -> Result<()> {
        self.expect(&[Phase::LocalTrained, Phase::InRounds], "install_aggregate")?;
        if !self.global_ligo.compatible_with(&aggregated) {
            return Err(Error::shape(
                "install_aggregate",
                format!(
                    "operator {:?} -> {:?} does not match the client's",
                    aggregated.src(),
                    aggregated.dst()
                ),
            ));
        }
        self.global_ligo = aggregated;
        self.provenance = Provenance::Aggregated { round };
        Ok(())
    }

    /// The large model implied by the current shared operator, without changing phase.
    pub fn current_large(&self) -> Result<ParamSet> {
        let inter = self
            .inter_params
            .as_ref()
            .ok_or_else(|| Error::Phase("intermediate model not materialized".into()))?;
        self.global_ligo.apply(inter)
    }

    pub fn finalize_large(&mut self) -> Result<ParamSet> {
        self.expect(&[Phase::InRounds], "finalize_large")?;
        let large = self.current_large()?;
        self.phase = Phase::Done;
        Ok(large)
    }

    fn expect(&self, allowed: &[Phase], op: &str) -> Result<()> {
        if allowed.contains(&self.phase) {
            Ok(())
        } else {
            Err(Error::Phase(format!(
                "client {}: {op} not allowed in phase {:?} (needs one of {allowed:?})",
                self.id, self.phase
            )))
        }
    }

    /// Write `state.json` plus binary tensors into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let meta = CheckpointMeta {
            id: self.id,
            phase: self.phase,
            small_config: self.small_config,
            seed: self.seed,
            epochs_run: self.epochs_run,
            rounds: self.rounds,
            provenance: self.provenance,
            shard: self.shard.clone(),
        };
        fs::write(dir.join("state.json"), serde_json::to_string_pretty(&meta)?)?;
        fs::write(dir.join("small.bin"), self.small_params.encode(""))?;
        fs::write(dir.join("local_ligo.bin"), self.local_ligo.encode())?;
        fs::write(dir.join("global_ligo.bin"), self.global_ligo.encode())?;
        let inter_path = dir.join("inter.bin");
        match &self.inter_params {
            Some(p) => fs::write(inter_path, p.encode(""))?,
            None if inter_path.exists() => fs::remove_file(inter_path)?,
            None => {}
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(dir.join("state.json"))?)?;
        let (small_params, _) = ParamSet::decode(&fs::read(dir.join("small.bin"))?)?;
        meta.small_config.audit(&small_params)?;
        let local_ligo = GrowthOperator::decode(&fs::read(dir.join("local_ligo.bin"))?)?;
        let global_ligo = GrowthOperator::decode(&fs::read(dir.join("global_ligo.bin"))?)?;
        let inter_path = dir.join("inter.bin");
        let inter_params = if inter_path.exists() {
            let (p, _) = ParamSet::decode(&fs::read(inter_path)?)?;
            local_ligo.dst().audit(&p)?;
            Some(p)
        } else {
            None
        };
        if inter_params.is_some() != (meta.phase >= Phase::LocalTrained) {
            return Err(Error::Codec(format!(
                "checkpoint phase {:?} inconsistent with intermediate model presence",
                meta.phase
            )));
        }
        Ok(Self {
            id: meta.id,
            small_config: meta.small_config,
            small_params,
            local_ligo,
            global_ligo,
            inter_params,
            shard: meta.shard,
            phase: meta.phase,
            seed: meta.seed,
            epochs_run: meta.epochs_run,
            rounds: meta.rounds,
            provenance: meta.provenance,
        })
    }
}

/// A client that trains and exchanges a whole model (the full-model averaging baselines).
#[derive(Debug, Clone, PartialEq)]
pub struct FullModelClient {
    id: usize,
    config: ModelConfig,
    params: ParamSet,
    shard: LabeledDataset,
    seed: u64,
    epochs_run: u64,
}

impl FullModelClient {
    pub fn new(id: usize, config: ModelConfig, params: ParamSet, shard: LabeledDataset, seed: u64) -> Result<Self> {
        config.audit(&params)?;
        Ok(Self {
            id,
            config,
            params,
            shard,
            seed,
            epochs_run: 0,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn shard(&self) -> &LabeledDataset {
        &self.shard
    }

    pub fn train(&mut self, epochs: usize, settings: &OptimizerSettings) -> Result<Vec<f64>> {
        if self.shard.is_empty() {
            return Err(Error::invalid(format!("client {} has an empty shard", self.id)));
        }
        let mut opt = Optimizer::new(*settings)?;
        let cfg = self.config;
        let params = &mut self.params;
        run_epochs(
            &self.shard,
            epochs,
            settings.batch_size,
            self.seed,
            &mut self.epochs_run,
            |x, y| {
                let (loss, grads) = model_loss_and_grad(&cfg, params, x, y)?;
                opt.step(params, &grads)?;
                Ok(loss)
            },
        )
    }

    pub fn install(&mut self, params: ParamSet) -> Result<()> {
        if !self.params.same_layout(&params) {
            return Err(Error::shape("install", "broadcast model layout differs"));
        }
        self.params = params;
        Ok(())
    }
}

/// Mean cross-entropy of the model on a batch and its gradient for every parameter.
pub fn model_loss_and_grad(
    config: &ModelConfig,
    params: &ParamSet,
    seqs: &[Vec<usize>],
    labels: &[usize],
) -> Result<(f64, IndexMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let logits = config.forward_bound(&mut tape, &bound, seqs)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let grads = tape.backward(loss)?;
    Ok((scalar(&tape, loss), bound.gradients(&grads)))
}

/// Mean cross-entropy of the grown model `op(src)` on a batch, differentiated
/// with respect to the operator matrices only.
pub fn operator_loss_and_grad(
    op: &GrowthOperator,
    src: &ParamSet,
    seqs: &[Vec<usize>],
    labels: &[usize],
) -> Result<(f64, IndexMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let ob = op.tensors().bind(&mut tape, true);
    let sb = src.bind(&mut tape, false);
    let grown = op.apply_bound(&mut tape, &ob, &sb)?;
    let logits = op.dst().forward_bound(&mut tape, &grown, seqs)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let grads = tape.backward(loss)?;
    Ok((scalar(&tape, loss), ob.gradients(&grads)))
}

fn scalar(tape: &Tape, v: crate::tape::Var) -> f64 {
    tape.value(v).data()[0]
}

/// Run `epochs` shuffled passes over `shard`, calling `step` per minibatch.
/// Returns the mean minibatch loss of each epoch. Each epoch's order comes from
/// an independent ChaCha stream keyed by `seed` and the running epoch counter.
fn run_epochs<F>(
    shard: &LabeledDataset,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    counter: &mut u64,
    mut step: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[Vec<usize>], &[usize]) -> Result<f64>,
{
    if epochs > 0 && shard.is_empty() {
        return Err(Error::invalid("cannot train on an empty shard"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(*counter);
        *counter += 1;
        let mut order: Vec<usize> = (0..shard.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let seqs: Vec<Vec<usize>> = chunk.iter().map(|&i| shard.sequences[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| shard.labels[i]).collect();
            let loss = step(&seqs, &labels)?;
            if !loss.is_finite() {
                return Err(Error::invalid(format!("non-finite training loss {loss}")));
            }
            total += loss;
            batches += 1;
        }
        losses.push(total / batches as f64);
    }
    Ok(losses)
}
