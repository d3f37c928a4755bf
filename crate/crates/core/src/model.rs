//! Tiny pre-LN transformer encoders with a mean-pooled classification head.
//!
//! Linear weights are stored `[out, in]` and applied as `x W^T + b`. The
//! canonical parameter order is the order of [`ModelConfig::layout`].

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamSet};
use crate::tape::{Axis, Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

pub const DEFAULT_FFN_MULTIPLIER: usize = 4;
pub const DEFAULT_VOCAB_SIZE: usize = 128;
pub const DEFAULT_MAX_SEQ_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_multiplier: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub max_seq_len: usize,
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    TokenEmbedding,
    PositionalEmbedding,
    Query,
    Key,
    Value,
    AttnOut,
    FfnIn,
    FfnOut,
    LayerNorm,
    Bias,
    Head,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::TokenEmbedding => "token_embedding",
            Family::PositionalEmbedding => "positional_embedding",
            Family::Query => "wq",
            Family::Key => "wk",
            Family::Value => "wv",
            Family::AttnOut => "wo",
            Family::FfnIn => "ffn_in",
            Family::FfnOut => "ffn_out",
            Family::LayerNorm => "layer_norm",
            Family::Bias => "bias",
            Family::Head => "head",
        }
    }
}

/// One entry of the canonical layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub family: Family,
    /// Encoder block index, `None` for embeddings, final norm and head.
    pub layer: Option<usize>,
}

/// Itemized scalar count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub by_family: IndexMap<String, usize>,
}

impl ModelConfig {
    pub fn new(hidden_dim: usize, num_layers: usize, num_heads: usize) -> Self {
        Self {
            hidden_dim,
            num_layers,
            num_heads,
            ffn_multiplier: DEFAULT_FFN_MULTIPLIER,
            vocab_size: DEFAULT_VOCAB_SIZE,
            num_classes: 2,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
        }
    }

    pub fn with_task(mut self, vocab_size: usize, num_classes: usize, max_seq_len: usize) -> Self {
        self.vocab_size = vocab_size;
        self.num_classes = num_classes;
        self.max_seq_len = max_seq_len;
        self
    }

    pub fn with_ffn_multiplier(mut self, m: usize) -> Self {
        self.ffn_multiplier = m;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.hidden_dim * self.ffn_multiplier
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_multiplier", self.ffn_multiplier),
            ("vocab_size", self.vocab_size),
            ("num_classes", self.num_classes),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model config {name} must be positive")));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::invalid(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Canonical parameter table.
    pub fn layout(&self) -> Vec<ParamSpec> {
        let d = self.hidden_dim;
        let f = self.ffn_dim();
        let spec = |name: String, shape: Vec<usize>, family, layer| ParamSpec {
            name,
            shape,
            family,
            layer,
        };
        let mut out = vec![
            spec(
                "embed.token".into(),
                vec![self.vocab_size, d],
                Family::TokenEmbedding,
                None,
            ),
            spec(
                "embed.pos".into(),
                vec![self.max_seq_len, d],
                Family::PositionalEmbedding,
                None,
            ),
        ];
        for l in 0..self.num_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            let lyr = Some(l);
            out.extend([
                spec(p("ln1.gamma"), vec![d], Family::LayerNorm, lyr),
                spec(p("ln1.beta"), vec![d], Family::LayerNorm, lyr),
                spec(p("attn.wq"), vec![d, d], Family::Query, lyr),
                spec(p("attn.bq"), vec![d], Family::Bias, lyr),
                spec(p("attn.wk"), vec![d, d], Family::Key, lyr),
                spec(p("attn.bk"), vec![d], Family::Bias, lyr),
                spec(p("attn.wv"), vec![d, d], Family::Value, lyr),
                spec(p("attn.bv"), vec![d], Family::Bias, lyr),
                spec(p("attn.wo"), vec![d, d], Family::AttnOut, lyr),
                spec(p("attn.bo"), vec![d], Family::Bias, lyr),
                spec(p("ln2.gamma"), vec![d], Family::LayerNorm, lyr),
                spec(p("ln2.beta"), vec![d], Family::LayerNorm, lyr),
                spec(p("ffn.w_in"), vec![f, d], Family::FfnIn, lyr),
                spec(p("ffn.b_in"), vec![f], Family::Bias, lyr),
                spec(p("ffn.w_out"), vec![d, f], Family::FfnOut, lyr),
                spec(p("ffn.b_out"), vec![d], Family::Bias, lyr),
            ]);
        }
        out.extend([
            spec("final_ln.gamma".into(), vec![d], Family::LayerNorm, None),
            spec("final_ln.beta".into(), vec![d], Family::LayerNorm, None),
            spec("head.weight".into(), vec![self.num_classes, d], Family::Head, None),
            spec("head.bias".into(), vec![self.num_classes], Family::Head, None),
        ]);
        out
    }

    /// Closed-form itemized parameter count.
    pub fn count_params(&self) -> ParamCount {
        let (d, f, l) = (self.hidden_dim, self.ffn_dim(), self.num_layers);
        let items = [
            (Family::TokenEmbedding, self.vocab_size * d),
            (Family::PositionalEmbedding, self.max_seq_len * d),
            (Family::Query, l * d * d),
            (Family::Key, l * d * d),
            (Family::Value, l * d * d),
            (Family::AttnOut, l * d * d),
            (Family::FfnIn, l * f * d),
            (Family::FfnOut, l * d * f),
            (Family::LayerNorm, (4 * l + 2) * d),
            (Family::Bias, l * (5 * d + f)),
            (Family::Head, self.num_classes * (d + 1)),
        ];
        let by_family: IndexMap<String, usize> = items.iter().map(|(k, v)| (k.as_str().to_string(), *v)).collect();
        ParamCount {
            total: by_family.values().sum(),
            by_family,
        }
    }

    /// Check that `params` has exactly this config's layout, in order.
    pub fn audit(&self, params: &ParamSet) -> Result<()> {
        let layout = self.layout();
        if layout.len() != params.len() {
            return Err(Error::shape(
                "audit",
                format!("expected {} entries, found {}", layout.len(), params.len()),
            ));
        }
        for (spec, (name, t)) in layout.iter().zip(params.iter()) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::shape(
                    "audit",
                    format!(
                        "expected '{}' {:?}, found '{}' {:?}",
                        spec.name,
                        spec.shape,
                        name,
                        t.shape()
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Random initialization: truncated normal (std 0.02) weights, zero biases, unit gammas.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self
            .layout()
            .into_iter()
            .map(|spec| {
                let t = if spec.name.ends_with(".gamma") {
                    Tensor::ones(&spec.shape)
                } else if spec.shape.len() == 1 {
                    Tensor::zeros(&spec.shape)
                } else {
                    Tensor::trunc_normal(&spec.shape, INIT_STD, &mut rng)
                };
                (spec.name, t)
            })
            .collect())
    }

    fn check_batch(&self, batch: &[Vec<usize>]) -> Result<usize> {
        let first = batch.first().ok_or_else(|| Error::invalid("empty token batch"))?;
        let len = first.len();
        if len == 0 || len > self.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence length {len} outside 1..={}",
                self.max_seq_len
            )));
        }
        for (i, seq) in batch.iter().enumerate() {
            if seq.len() != len {
                return Err(Error::shape(
                    "forward",
                    format!("sequence {i} has length {}, expected {len}", seq.len()),
                ));
            }
            if let Some(&t) = seq.iter().find(|&&t| t >= self.vocab_size) {
                return Err(Error::invalid(format!(
                    "token id {t} out of range for vocab {}",
                    self.vocab_size
                )));
            }
        }
        Ok(len)
    }

    /// Encoder stack up to and including the final layer norm: `[batch * seq, D]`.
    pub fn encode(&self, tape: &mut Tape, p: &BoundParams, batch: &[Vec<usize>]) -> Result<Var> {
        let seq = self.check_batch(batch)?;
        let ids: Vec<usize> = batch.iter().flatten().copied().collect();
        let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..seq).collect();
        let tok = tape.embedding(p.get("embed.token")?, &ids)?;
        let pos = tape.embedding(p.get("embed.pos")?, &positions)?;
        let mut h = tape.add(tok, pos)?;
        for l in 0..self.num_layers {
            h = self.block(tape, p, l, h, batch.len(), seq)?;
        }
        tape.layer_norm(h, p.get("final_ln.gamma")?, p.get("final_ln.beta")?, LAYER_NORM_EPS)
    }

    fn block(&self, tape: &mut Tape, p: &BoundParams, l: usize, h: Var, b: usize, s: usize) -> Result<Var> {
        let n = |s: &str| format!("layers.{l}.{s}");
        let a = tape.layer_norm(h, p.get(&n("ln1.gamma"))?, p.get(&n("ln1.beta"))?, LAYER_NORM_EPS)?;
        let q = linear(tape, a, p.get(&n("attn.wq"))?, p.get(&n("attn.bq"))?)?;
        let k = linear(tape, a, p.get(&n("attn.wk"))?, p.get(&n("attn.bk"))?)?;
        let v = linear(tape, a, p.get(&n("attn.wv"))?, p.get(&n("attn.bv"))?)?;
        let ctx = self.attention(tape, q, k, v, b, s)?;
        let o = linear(tape, ctx, p.get(&n("attn.wo"))?, p.get(&n("attn.bo"))?)?;
        let h = tape.add(h, o)?;

        let f = tape.layer_norm(h, p.get(&n("ln2.gamma"))?, p.get(&n("ln2.beta"))?, LAYER_NORM_EPS)?;
        let u = linear(tape, f, p.get(&n("ffn.w_in"))?, p.get(&n("ffn.b_in"))?)?;
        let u = tape.gelu(u);
        let y = linear(tape, u, p.get(&n("ffn.w_out"))?, p.get(&n("ffn.b_out"))?)?;
        tape.add(h, y)
    }

    /// Multi-head scaled dot-product attention, one sequence and head at a time.
    fn attention(&self, tape: &mut Tape, q: Var, k: Var, v: Var, b: usize, s: usize) -> Result<Var> {
        let dh = self.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut rows = Vec::with_capacity(b);
        for bi in 0..b {
            let mut heads = Vec::with_capacity(self.num_heads);
            for hi in 0..self.num_heads {
                let qh = tape.slice(q, bi * s, s, hi * dh, dh)?;
                let kh = tape.slice(k, bi * s, s, hi * dh, dh)?;
                let vh = tape.slice(v, bi * s, s, hi * dh, dh)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, inv_sqrt);
                let probs = tape.softmax(scores)?;
                heads.push(tape.matmul(probs, vh)?);
            }
            rows.push(if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat(&heads, Axis::Cols)?
            });
        }
        if rows.len() == 1 {
            Ok(rows[0])
        } else {
            tape.concat(&rows, Axis::Rows)
        }
    }

    /// Sequence classification logits `[batch, num_classes]`.
    pub fn forward_bound(&self, tape: &mut Tape, p: &BoundParams, batch: &[Vec<usize>]) -> Result<Var> {
        let h = self.encode(tape, p, batch)?;
        let pooled = tape.mean_pool(h, batch[0].len())?;
        linear(tape, pooled, p.get("head.weight")?, p.get("head.bias")?)
    }

    /// Per-position logits `[batch * seq, num_classes]`, for tagging-style tasks.
    pub fn forward_per_position(&self, tape: &mut Tape, p: &BoundParams, batch: &[Vec<usize>]) -> Result<Var> {
        let h = self.encode(tape, p, batch)?;
        linear(tape, h, p.get("head.weight")?, p.get("head.bias")?)
    }

    /// Evaluate classification logits without keeping the tape.
    pub fn forward(&self, params: &ParamSet, batch: &[Vec<usize>]) -> Result<Tensor> {
        self.audit(params)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let logits = self.forward_bound(&mut tape, &bound, batch)?;
        Ok(tape.value(logits).clone())
    }
}

/// `x W^T + b` with `W` stored `[out, in]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let wt = tape.transpose(w)?;
    let y = tape.matmul(x, wt)?;
    tape.add_row(y, b)
}
