//! Experiment configuration: TOML schema, model presets, validation and
//! parameter/communication accounting.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ConfigIssue, Error, Result};
use crate::ligo::{check_compatible, count_operator_params, InitScheme, OperatorCount, WidthMaps};
use crate::model::{ModelConfig, DEFAULT_FFN_MULTIPLIER};
use crate::optim::{OptimizerKind, OptimizerSettings};

pub const ENV_SEED: &str = "FEDGROW_SEED";
pub const ENV_OUT: &str = "FEDGROW_OUT";

/// Relative tolerance when sizing the communication-matched baseline.
pub const FEDAVG_MATCH_TOLERANCE: f64 = 0.10;

/// A model spec together with its config path, for dominance diagnostics.
type Named<'a> = (String, &'a ModelSpec);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Full pipeline with server averaging of the shared operator.
    Agg,
    /// Same pipeline, every client keeps its own shared operator.
    Noagg,
    /// Random large model trained with full-model averaging.
    Scratch,
    /// Full-model averaging on a model resized to the operator's traffic.
    FedavgMatched,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Agg => "agg",
            Preset::Noagg => "noagg",
            Preset::Scratch => "scratch",
            Preset::FedavgMatched => "fedavg_matched",
        }
    }

    pub fn grows(self) -> bool {
        matches!(self, Preset::Agg | Preset::Noagg)
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "agg" => Ok(Preset::Agg),
            "noagg" => Ok(Preset::Noagg),
            "scratch" => Ok(Preset::Scratch),
            "fedavg_matched" => Ok(Preset::FedavgMatched),
            other => Err(Error::Config(vec![ConfigIssue::new(
                "preset",
                format!("unknown preset '{other}' (agg, noagg, scratch, fedavg_matched)"),
            )])),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeteroCase {
    /// One width, depths 2..=4.
    #[default]
    Base,
    /// Two widths and several depths.
    Case1,
    /// One width, depths 2..=6, deeper intermediate and large models.
    Case2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Small models that train in minutes on one core.
    #[default]
    Desk,
    /// Full-size widths (256/320/384) for accounting runs.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn_multiplier: Option<usize>,
}

impl ModelSpec {
    pub const fn new(hidden_dim: usize, num_layers: usize, num_heads: usize) -> Self {
        Self {
            hidden_dim,
            num_layers,
            num_heads,
            ffn_multiplier: None,
        }
    }

    const fn ffn(mut self, m: usize) -> Self {
        self.ffn_multiplier = Some(m);
        self
    }

    pub fn resolve(&self, task: &TaskConfig) -> ModelConfig {
        ModelConfig::new(self.hidden_dim, self.num_layers, self.num_heads)
            .with_ffn_multiplier(self.ffn_multiplier.unwrap_or(DEFAULT_FFN_MULTIPLIER))
            .with_task(task.vocab, task.classes, task.seq_len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSet {
    /// Small-model shapes, assigned to clients cyclically by id.
    pub small: Vec<ModelSpec>,
    pub intermediate: ModelSpec,
    pub large: ModelSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub vocab: usize,
    pub classes: usize,
    pub seq_len: usize,
    /// Examples before the held-out split.
    pub size: usize,
    pub signal: f64,
    /// Fraction held out as the shared balanced test set.
    pub test_fraction: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            vocab: 128,
            classes: 8,
            seq_len: 8,
            size: 1600,
            signal: 0.3,
            test_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerChoice {
    Sgd,
    #[default]
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub optimizer: OptimizerChoice,
    pub batch_size: usize,
    /// Small-model pre-training epochs.
    pub e_pre: usize,
    /// Private-operator epochs.
    pub e_l: usize,
    /// Shared-operator epochs per round.
    pub e_g: usize,
    pub rounds: usize,
    pub lr_pre: f64,
    pub lr_local: f64,
    pub lr_global: f64,
    pub weight_decay: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerChoice::Adamw,
            batch_size: 16,
            e_pre: 30,
            e_l: 2,
            e_g: 2,
            rounds: 10,
            lr_pre: 1e-2,
            lr_local: 3e-3,
            lr_global: 3e-3,
            weight_decay: 0.01,
        }
    }
}

impl TrainingConfig {
    fn settings(&self, lr: f64) -> OptimizerSettings {
        let kind = match self.optimizer {
            OptimizerChoice::Sgd => OptimizerKind::Sgd,
            OptimizerChoice::Adamw => match OptimizerKind::adamw_default() {
                OptimizerKind::AdamW { beta1, beta2, eps, .. } => OptimizerKind::AdamW {
                    beta1,
                    beta2,
                    eps,
                    weight_decay: self.weight_decay,
                },
                k => k,
            },
        };
        OptimizerSettings {
            kind,
            lr,
            batch_size: self.batch_size,
        }
    }

    pub fn pretrain_settings(&self) -> OptimizerSettings {
        self.settings(self.lr_pre)
    }

    pub fn local_settings(&self) -> OptimizerSettings {
        self.settings(self.lr_local)
    }

    pub fn global_settings(&self) -> OptimizerSettings {
        self.settings(self.lr_global)
    }
}

fn default_preset() -> Preset {
    Preset::Agg
}
fn default_n_clients() -> usize {
    4
}
fn default_beta() -> f64 {
    0.5
}
fn default_min_shard() -> usize {
    16
}
fn default_width_maps() -> WidthMaps {
    WidthMaps::PerFamily
}
fn default_init_scheme() -> InitScheme {
    InitScheme::IdentityPreserving
}

/// Every field has a default, so an empty file is a valid agg run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_preset")]
    pub preset: Preset,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_clients")]
    pub n_clients: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_min_shard")]
    pub min_shard: usize,
    #[serde(default)]
    pub hetero_case: HeteroCase,
    #[serde(default)]
    pub scale: Scale,
    #[serde(default = "default_width_maps")]
    pub width_maps: WidthMaps,
    #[serde(default = "default_init_scheme")]
    pub init_scheme: InitScheme,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    /// Explicit shapes; when absent the `hetero_case` / `scale` preset is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub models: Option<ModelSet>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config deserializes")
    }
}

/// Concrete shapes after defaulting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedModels {
    pub small: Vec<ModelConfig>,
    pub intermediate: ModelConfig,
    pub large: ModelConfig,
}

impl ResolvedModels {
    /// Small shape used by client `id`.
    pub fn small_for(&self, id: usize) -> ModelConfig {
        self.small[id % self.small.len()]
    }
}

/// Shapes for a heterogeneity case at a given scale.
pub fn preset_models(case: HeteroCase, scale: Scale) -> ModelSet {
    #[allow(non_snake_case)]
    fn D(d: usize, l: usize) -> ModelSpec {
        ModelSpec::new(d, l, 2)
    }
    #[allow(non_snake_case)]
    fn L(d: usize, l: usize) -> ModelSpec {
        ModelSpec::new(d, l, 8).ffn(3)
    }
    match (scale, case) {
        (Scale::Desk, HeteroCase::Base) => ModelSet {
            small: vec![D(16, 2), D(16, 3), D(16, 4)],
            intermediate: D(20, 4),
            large: D(24, 6),
        },
        (Scale::Desk, HeteroCase::Case1) => ModelSet {
            small: vec![D(16, 2), D(12, 3), D(16, 4), D(12, 2)],
            intermediate: D(20, 4),
            large: D(24, 6),
        },
        (Scale::Desk, HeteroCase::Case2) => ModelSet {
            small: (2..=6).map(|l| D(16, l)).collect(),
            intermediate: D(20, 7),
            large: D(24, 8),
        },
        (Scale::Literal, HeteroCase::Base) => ModelSet {
            small: vec![L(256, 2), L(256, 3), L(256, 4)],
            intermediate: L(320, 4),
            large: L(384, 6),
        },
        (Scale::Literal, HeteroCase::Case1) => ModelSet {
            small: vec![L(256, 2), L(192, 3), L(256, 4), L(192, 2)],
            intermediate: L(320, 4),
            large: L(384, 6),
        },
        (Scale::Literal, HeteroCase::Case2) => ModelSet {
            small: (2..=6).map(|l| L(256, l)).collect(),
            intermediate: L(320, 7),
            large: L(384, 8),
        },
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            Error::Config(vec![ConfigIssue::new(
                "<parse>",
                e.to_string().trim().replace('\n', " "),
            )])
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(vec![ConfigIssue::new(
                "<file>",
                format!("{} does not exist", path.display()),
            )]));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(e.to_string()))
    }

    /// Fill defaults (model shapes, FFN multipliers) and run every check.
    /// Returns all issues at once.
    pub fn normalized(&self) -> Result<ExperimentConfig> {
        let mut cfg = self.clone();
        let mut models = cfg
            .models
            .take()
            .unwrap_or_else(|| preset_models(cfg.hetero_case, cfg.scale));
        for spec in models
            .small
            .iter_mut()
            .chain([&mut models.intermediate, &mut models.large])
        {
            spec.ffn_multiplier.get_or_insert(DEFAULT_FFN_MULTIPLIER);
        }
        cfg.models = Some(models);
        let issues = cfg.issues();
        if issues.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(issues))
        }
    }

    /// Shapes with task fields filled in. Call on a normalized config.
    pub fn resolved_models(&self) -> ResolvedModels {
        let set = self
            .models
            .clone()
            .unwrap_or_else(|| preset_models(self.hetero_case, self.scale));
        ResolvedModels {
            small: set.small.iter().map(|s| s.resolve(&self.task)).collect(),
            intermediate: set.intermediate.resolve(&self.task),
            large: set.large.resolve(&self.task),
        }
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Apply `FEDGROW_SEED`; return the `FEDGROW_OUT` directory if set.
    pub fn apply_env(&mut self) -> Result<Option<std::path::PathBuf>> {
        if let Ok(v) = std::env::var(ENV_SEED) {
            self.seed = v.trim().parse().map_err(|_| {
                Error::Config(vec![ConfigIssue::new(
                    ENV_SEED,
                    format!("'{v}' is not an unsigned integer"),
                )])
            })?;
        }
        Ok(std::env::var_os(ENV_OUT).map(Into::into))
    }

    fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut bad = |field: &str, msg: String| out.push(ConfigIssue::new(field, msg));
        let t = &self.task;
        let tr = &self.training;

        if self.n_clients == 0 {
            bad("n_clients", "must be at least 1".into());
        }
        if !self.beta.is_finite() || self.beta <= 0.0 {
            bad("beta", format!("must be positive, got {}", self.beta));
        }
        if t.classes < 2 {
            bad("task.classes", format!("need at least 2 classes, got {}", t.classes));
        }
        if t.vocab < t.classes {
            bad(
                "task.vocab",
                format!("{} cannot hold {} class topics", t.vocab, t.classes),
            );
        }
        if t.seq_len == 0 {
            bad("task.seq_len", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&t.signal) {
            bad("task.signal", format!("must be in [0, 1], got {}", t.signal));
        }
        if !(t.test_fraction > 0.0 && t.test_fraction < 1.0) {
            bad(
                "task.test_fraction",
                format!("must be in (0, 1), got {}", t.test_fraction),
            );
        }
        let held = ((t.size as f64) * t.test_fraction).round() as usize;
        let train = t.size.saturating_sub(held);
        if t.size < t.classes || held < t.classes {
            bad(
                "task.size",
                format!("{} examples leave too few for {} classes", t.size, t.classes),
            );
        }
        if self.n_clients.saturating_mul(self.min_shard) > train {
            bad(
                "min_shard",
                format!(
                    "{} clients x {} exceeds {train} training examples",
                    self.n_clients, self.min_shard
                ),
            );
        }
        if tr.batch_size == 0 {
            bad("training.batch_size", "must be positive".into());
        }
        if tr.rounds == 0 {
            bad("training.rounds", "must be at least 1".into());
        }
        for (f, v) in [
            ("training.lr_pre", tr.lr_pre),
            ("training.lr_local", tr.lr_local),
            ("training.lr_global", tr.lr_global),
        ] {
            if !v.is_finite() || v <= 0.0 {
                bad(f, format!("learning rate must be positive, got {v}"));
            }
        }
        if tr.weight_decay.is_nan() || tr.weight_decay < 0.0 {
            bad(
                "training.weight_decay",
                format!("must be non-negative, got {}", tr.weight_decay),
            );
        }

        let Some(models) = &self.models else {
            return out;
        };
        if models.small.is_empty() {
            bad("models.small", "at least one small model is required".into());
        }
        let named: Vec<(String, &ModelSpec)> = models
            .small
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("models.small[{i}]"), s))
            .chain([
                ("models.intermediate".to_string(), &models.intermediate),
                ("models.large".to_string(), &models.large),
            ])
            .collect();
        let mut shapes_ok = true;
        for (path, s) in &named {
            for (f, v) in [
                ("hidden_dim", s.hidden_dim),
                ("num_layers", s.num_layers),
                ("num_heads", s.num_heads),
                ("ffn_multiplier", s.ffn_multiplier.unwrap_or(DEFAULT_FFN_MULTIPLIER)),
            ] {
                if v == 0 {
                    bad(&format!("{path}.{f}"), "must be positive".into());
                    shapes_ok = false;
                }
            }
            if s.num_heads > 0 && s.hidden_dim % s.num_heads != 0 {
                bad(
                    &format!("{path}.num_heads"),
                    format!("{} does not divide hidden_dim {}", s.num_heads, s.hidden_dim),
                );
                shapes_ok = false;
            }
        }
        if !shapes_ok {
            return out;
        }
        let inter = ("models.intermediate", &models.intermediate);
        let mut pairs: Vec<(Named, Named)> = models
            .small
            .iter()
            .enumerate()
            .map(|(i, s)| ((format!("models.small[{i}]"), s), (inter.0.to_string(), inter.1)))
            .collect();
        pairs.push((
            (inter.0.to_string(), inter.1),
            ("models.large".to_string(), &models.large),
        ));
        for ((lo_path, lo), (hi_path, hi)) in pairs {
            for (f, a, b) in [
                ("hidden_dim", lo.hidden_dim, hi.hidden_dim),
                ("num_layers", lo.num_layers, hi.num_layers),
            ] {
                if a > b {
                    bad(
                        &format!("{hi_path}.{f}"),
                        format!("{hi_path}.{f} = {b} is smaller than {lo_path}.{f} = {a}"),
                    );
                }
            }
            let (lc, hc) = (lo.resolve(&self.task), hi.resolve(&self.task));
            if lc.hidden_dim <= hc.hidden_dim && lc.num_layers <= hc.num_layers {
                if let Err(e) = check_compatible(&lc, &hc, self.width_maps) {
                    bad(
                        &format!("{hi_path}.ffn_multiplier"),
                        format!("cannot grow from {lo_path}: {e}"),
                    );
                }
            }
        }
        out
    }
}

/// Parameter counts of one model shape.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelCount {
    pub label: String,
    pub config: ModelConfig,
    pub params: usize,
}

/// Trainable-parameter and per-round traffic comparison against full-model training.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountReport {
    pub width_maps: WidthMaps,
    pub small: Vec<ModelCount>,
    pub intermediate: ModelCount,
    pub large: ModelCount,
    /// Private operator size for each distinct small shape.
    pub local_operators: Vec<usize>,
    pub local_operator_mean: f64,
    pub global_operator: OperatorCount,
    /// Mean private operator plus the shared operator.
    pub dual_trainable: f64,
    /// Shared operator up and down.
    pub dual_comm_per_round: usize,
    pub scratch_trainable: usize,
    pub scratch_comm_per_round: usize,
    pub trainable_reduction_pct: f64,
    pub comm_reduction_pct: f64,
}

pub fn count_report(cfg: &ExperimentConfig) -> Result<CountReport> {
    let cfg = cfg.normalized()?;
    let m = cfg.resolved_models();
    let mut distinct: Vec<ModelConfig> = Vec::new();
    for s in &m.small {
        if !distinct.contains(s) {
            distinct.push(*s);
        }
    }
    let local: Vec<usize> = distinct
        .iter()
        .map(|s| count_operator_params(s, &m.intermediate, cfg.width_maps).total)
        .collect();
    let local_mean = local.iter().sum::<usize>() as f64 / local.len() as f64;
    let global = count_operator_params(&m.intermediate, &m.large, cfg.width_maps);
    let large = m.large.count_params().total;
    let dual_trainable = local_mean + global.total as f64;
    let label = |c: &ModelConfig| format!("D={} L={}", c.hidden_dim, c.num_layers);
    Ok(CountReport {
        width_maps: cfg.width_maps,
        small: distinct
            .iter()
            .map(|c| ModelCount {
                label: label(c),
                config: *c,
                params: c.count_params().total,
            })
            .collect(),
        intermediate: ModelCount {
            label: label(&m.intermediate),
            config: m.intermediate,
            params: m.intermediate.count_params().total,
        },
        large: ModelCount {
            label: label(&m.large),
            config: m.large,
            params: large,
        },
        local_operators: local,
        local_operator_mean: local_mean,
        dual_comm_per_round: 2 * global.total,
        global_operator: global.clone(),
        dual_trainable,
        scratch_trainable: large,
        scratch_comm_per_round: 2 * large,
        trainable_reduction_pct: 100.0 * (1.0 - dual_trainable / large as f64),
        comm_reduction_pct: 100.0 * (1.0 - global.total as f64 / large as f64),
    })
}

/// Shape whose full-model traffic (`2 * params`) is closest to `target_comm`,
/// searched over widths (multiples of the head count), depths and FFN
/// multipliers no larger than `large`. Ties prefer wider, then deeper.
pub fn match_fedavg_config(large: &ModelConfig, target_comm: usize) -> Result<(ModelConfig, f64)> {
    let mut best: Option<(ModelConfig, f64)> = None;
    let heads = large.num_heads;
    for d in (heads..=large.hidden_dim).step_by(heads) {
        for l in 1..=large.num_layers {
            for m in 1..=large.ffn_multiplier {
                let mut c = *large;
                c.hidden_dim = d;
                c.num_layers = l;
                c.ffn_multiplier = m;
                let comm = 2 * c.count_params().total;
                let rel = (comm as f64 - target_comm as f64).abs() / target_comm as f64;
                if best.is_none_or(|(_, b)| rel <= b) {
                    best = Some((c, rel));
                }
            }
        }
    }
    let (c, rel) = best.ok_or_else(|| Error::invalid("no candidate shapes"))?;
    if rel > FEDAVG_MATCH_TOLERANCE {
        return Err(Error::Config(vec![ConfigIssue::new(
            "preset",
            format!(
                "no full model within {:.0}% of {target_comm} parameters per round; nearest is D={} L={} ffn x{} at {} ({:+.1}%)",
                FEDAVG_MATCH_TOLERANCE * 100.0,
                c.hidden_dim,
                c.num_layers,
                c.ffn_multiplier,
                2 * c.count_params().total,
                100.0 * (2 * c.count_params().total) as f64 / target_comm as f64 - 100.0
            ),
        )]));
    }
    Ok((c, rel))
}
