//! Learned linear growth operators.
//!
//! A [`GrowthOperator`] maps the parameters of a source encoder to those of a
//! wider and deeper target encoder. It factorizes into width maps (one per
//! residual stream / weight family, depending on [`WidthMaps`]), a depth
//! matrix mixing source layers into target layers, and a class-space head map.
//!
//! For target layer `l` and a source weight `W_k` of layer `k`:
//!
//! ```text
//! W_dst[l] = sum_k depth[l, k] * B_out(k) * W_k * B_in(k)^T
//! v_dst[l] = sum_k depth[l, k] * B_out(k) * v_k
//! ```
//!
//! Embedding tables grow along the feature axis only (`E * B_res^T`), and the
//! classifier grows as `H * W_head * B_res^T`. The whole map is linear in the
//! source parameters and is recorded on the tape, so gradients reach every
//! operator matrix.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamSpec};
use crate::params::{BoundParams, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Standard deviation of the noise rows of identity-preserving width maps.
pub const IDENTITY_NOISE_STD: f64 = 1e-3;
/// Standard deviation of every matrix under the random scheme.
pub const RANDOM_INIT_STD: f64 = 0.02;

/// How width-expansion matrices are shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthMaps {
    /// One residual-stream map reused for every weight; the FFN inner space uses `B ⊗ I_m`.
    Shared,
    /// A residual map plus one output-side map per weight family.
    PerFamily,
    /// Like `PerFamily`, but the family maps are separate for every source layer.
    PerLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    IdentityPreserving,
    Random,
}

/// Output-side space of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Slot {
    Res,
    Query,
    Key,
    Value,
    AttnOut,
    FfnInner,
    FfnOut,
}

const FAMILY_SLOTS: [(Slot, &str); 6] = [
    (Slot::Query, "wq"),
    (Slot::Key, "wk"),
    (Slot::Value, "wv"),
    (Slot::AttnOut, "wo"),
    (Slot::FfnInner, "ffn_in"),
    (Slot::FfnOut, "ffn_out"),
];

/// Output and input spaces of a layer parameter, keyed by its suffix.
fn layer_slots(suffix: &str) -> Option<(Slot, Option<Slot>)> {
    Some(match suffix {
        "ln1.gamma" | "ln1.beta" | "ln2.gamma" | "ln2.beta" => (Slot::Res, None),
        "attn.wq" => (Slot::Query, Some(Slot::Res)),
        "attn.bq" => (Slot::Query, None),
        "attn.wk" => (Slot::Key, Some(Slot::Res)),
        "attn.bk" => (Slot::Key, None),
        "attn.wv" => (Slot::Value, Some(Slot::Res)),
        "attn.bv" => (Slot::Value, None),
        "attn.wo" => (Slot::AttnOut, Some(Slot::Value)),
        "attn.bo" => (Slot::AttnOut, None),
        "ffn.w_in" => (Slot::FfnInner, Some(Slot::Res)),
        "ffn.b_in" => (Slot::FfnInner, None),
        "ffn.w_out" => (Slot::FfnOut, Some(Slot::FfnInner)),
        "ffn.b_out" => (Slot::FfnOut, None),
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrowthOperator {
    src: ModelConfig,
    dst: ModelConfig,
    width_maps: WidthMaps,
    tensors: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct OperatorMeta {
    src: ModelConfig,
    dst: ModelConfig,
    width_maps: WidthMaps,
}

/// Itemized operator size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OperatorCount {
    pub total: usize,
    pub width: usize,
    pub depth: usize,
    pub head: usize,
    pub by_matrix: IndexMap<String, usize>,
}

impl GrowthOperator {
    pub fn init(
        src: ModelConfig,
        dst: ModelConfig,
        width_maps: WidthMaps,
        scheme: InitScheme,
        seed: u64,
    ) -> Result<Self> {
        check_compatible(&src, &dst, width_maps)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = matrix_shapes(&src, &dst, width_maps)
            .into_iter()
            .map(|(name, shape)| {
                let t = match scheme {
                    InitScheme::Random => Tensor::trunc_normal(&shape, RANDOM_INIT_STD, &mut rng),
                    InitScheme::IdentityPreserving if name == "depth" => depth_identity(&src, &dst),
                    InitScheme::IdentityPreserving => identity_with_noise(shape[0], shape[1], &mut rng),
                };
                (name, t)
            })
            .collect();
        Ok(Self {
            src,
            dst,
            width_maps,
            tensors,
        })
    }

    /// Wrap explicit matrices; names and shapes must match the layout for `width_maps`.
    pub fn from_tensors(src: ModelConfig, dst: ModelConfig, width_maps: WidthMaps, tensors: ParamSet) -> Result<Self> {
        check_compatible(&src, &dst, width_maps)?;
        let expected = matrix_shapes(&src, &dst, width_maps);
        let ok = expected.len() == tensors.len()
            && expected
                .iter()
                .zip(tensors.iter())
                .all(|((n, s), (m, t))| n == m && s.as_slice() == t.shape());
        if !ok {
            return Err(Error::shape(
                "growth_operator",
                format!("matrices do not match the {width_maps:?} layout for {src:?} -> {dst:?}"),
            ));
        }
        if !tensors.is_finite() {
            return Err(Error::invalid("growth operator contains non-finite values"));
        }
        Ok(Self {
            src,
            dst,
            width_maps,
            tensors,
        })
    }

    pub fn src(&self) -> &ModelConfig {
        &self.src
    }

    pub fn dst(&self) -> &ModelConfig {
        &self.dst
    }

    pub fn width_maps(&self) -> WidthMaps {
        self.width_maps
    }

    pub fn tensors(&self) -> &ParamSet {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut ParamSet {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> ParamSet {
        self.tensors
    }

    /// Same configs, map layout and matrix shapes.
    pub fn compatible_with(&self, other: &GrowthOperator) -> bool {
        self.src == other.src
            && self.dst == other.dst
            && self.width_maps == other.width_maps
            && self.tensors.same_layout(&other.tensors)
    }

    pub fn count(&self) -> OperatorCount {
        count_operator_params(&self.src, &self.dst, self.width_maps)
    }

    /// Value-level application (no gradients kept).
    pub fn apply(&self, src_params: &ParamSet) -> Result<ParamSet> {
        let mut tape = Tape::new();
        let op = self.tensors.bind(&mut tape, false);
        let src = src_params.bind(&mut tape, false);
        let out = self.apply_bound(&mut tape, &op, &src)?;
        Ok(out.values(&tape))
    }

    /// Record the application on `tape`. `op` must come from binding [`Self::tensors`].
    pub fn apply_bound(&self, tape: &mut Tape, op: &BoundParams, src: &BoundParams) -> Result<BoundParams> {
        for spec in self.src.layout() {
            let v = src.get(&spec.name)?;
            if tape.value(v).shape() != spec.shape.as_slice() {
                return Err(Error::shape(
                    "apply",
                    format!(
                        "source '{}' is {:?}, operator expects {:?}",
                        spec.name,
                        tape.value(v).shape(),
                        spec.shape
                    ),
                ));
            }
        }
        let mut maps = MapCache::new(self, op);
        let res = maps.map(tape, Slot::Res, 0)?;
        let res_t = maps.transposed(tape, Slot::Res, 0)?;

        let src_layout = self.src.layout();
        // Width-expanded source parameters, grouped by layer suffix.
        let mut expanded: IndexMap<String, Vec<Var>> = IndexMap::new();
        let mut generated: HashMap<String, Var> = HashMap::new();

        for spec in &src_layout {
            let x = src.get(&spec.name)?;
            match spec.layer {
                Some(k) => {
                    let suffix = layer_suffix(spec, k);
                    let (out_slot, in_slot) = layer_slots(suffix)
                        .ok_or_else(|| Error::invalid(format!("no growth rule for parameter '{}'", spec.name)))?;
                    let b_out = maps.map(tape, out_slot, k)?;
                    let y = match in_slot {
                        Some(s) => {
                            let b_in_t = maps.transposed(tape, s, k)?;
                            let left = tape.matmul(b_out, x)?;
                            tape.matmul(left, b_in_t)?
                        }
                        None => expand_vector(tape, b_out, x)?,
                    };
                    expanded.entry(suffix.to_string()).or_default().push(y);
                }
                None => {
                    let y = match spec.name.as_str() {
                        "embed.token" | "embed.pos" => tape.matmul(x, res_t)?,
                        "final_ln.gamma" | "final_ln.beta" => expand_vector(tape, res, x)?,
                        "head.weight" => {
                            let h = op.get("head")?;
                            let left = tape.matmul(h, x)?;
                            tape.matmul(left, res_t)?
                        }
                        "head.bias" => expand_vector(tape, op.get("head")?, x)?,
                        other => return Err(Error::invalid(format!("no growth rule for parameter '{other}'"))),
                    };
                    generated.insert(spec.name.clone(), y);
                }
            }
        }

        let depth = op.get("depth")?;
        for (suffix, parts) in &expanded {
            for l in 0..self.dst.num_layers {
                let y = tape.combine(depth, l, parts)?;
                generated.insert(format!("layers.{l}.{suffix}"), y);
            }
        }

        let mut out = BoundParams::new();
        for spec in self.dst.layout() {
            let v = generated
                .get(&spec.name)
                .copied()
                .ok_or_else(|| Error::invalid(format!("generated model lacks '{}'", spec.name)))?;
            if tape.value(v).shape() != spec.shape.as_slice() {
                return Err(Error::shape(
                    "apply",
                    format!(
                        "generated '{}' is {:?}, expected {:?}",
                        spec.name,
                        tape.value(v).shape(),
                        spec.shape
                    ),
                ));
            }
            out.insert(spec.name, v);
        }
        Ok(out)
    }

    /// Metadata string stored alongside the matrices in the binary format.
    fn meta(&self) -> String {
        serde_json::to_string(&OperatorMeta {
            src: self.src,
            dst: self.dst,
            width_maps: self.width_maps,
        })
        .expect("operator metadata serializes")
    }

    pub fn encode(&self) -> Vec<u8> {
        self.tensors.encode(&self.meta())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (tensors, meta) = ParamSet::decode(bytes)?;
        let meta: OperatorMeta =
            serde_json::from_str(&meta).map_err(|e| Error::Codec(format!("operator metadata: {e}")))?;
        Self::from_tensors(meta.src, meta.dst, meta.width_maps, tensors)
    }
}

fn layer_suffix(spec: &ParamSpec, k: usize) -> &str {
    let prefix_len = format!("layers.{k}.").len();
    &spec.name[prefix_len..]
}

fn expand_vector(tape: &mut Tape, b: Var, v: Var) -> Result<Var> {
    let n = tape.value(v).numel();
    let col = tape.reshape(v, &[n, 1])?;
    let y = tape.matmul(b, col)?;
    let m = tape.value(y).numel();
    tape.reshape(y, &[m])
}

/// Resolves (slot, source layer) to a width-map node, materializing transposes
/// and the shared-mode Kronecker expansion once per tape.
struct MapCache<'a> {
    op: &'a GrowthOperator,
    bound: &'a BoundParams,
    maps: HashMap<(Slot, usize), Var>,
    transposes: HashMap<(Slot, usize), Var>,
}

impl<'a> MapCache<'a> {
    fn new(op: &'a GrowthOperator, bound: &'a BoundParams) -> Self {
        Self {
            op,
            bound,
            maps: HashMap::new(),
            transposes: HashMap::new(),
        }
    }

    fn key(&self, slot: Slot, layer: usize) -> (Slot, usize) {
        match (self.op.width_maps, slot) {
            (WidthMaps::PerLayer, s) if s != Slot::Res => (s, layer),
            (WidthMaps::Shared, Slot::FfnInner) => (Slot::FfnInner, 0),
            (WidthMaps::Shared, _) => (Slot::Res, 0),
            (_, s) => (s, 0),
        }
    }

    fn map(&mut self, tape: &mut Tape, slot: Slot, layer: usize) -> Result<Var> {
        let key = self.key(slot, layer);
        if let Some(&v) = self.maps.get(&key) {
            return Ok(v);
        }
        let v = match (self.op.width_maps, key.0) {
            (_, Slot::Res) => self.bound.get("width.res")?,
            (WidthMaps::Shared, _) => {
                let res = self.bound.get("width.res")?;
                tape.kron_identity(res, self.op.src.ffn_multiplier)?
            }
            (WidthMaps::PerFamily, s) => self.bound.get(&format!("width.{}", slot_name(s)))?,
            (WidthMaps::PerLayer, s) => self.bound.get(&format!("width.{}.{}", key.1, slot_name(s)))?,
        };
        self.maps.insert(key, v);
        Ok(v)
    }

    fn transposed(&mut self, tape: &mut Tape, slot: Slot, layer: usize) -> Result<Var> {
        let key = self.key(slot, layer);
        if let Some(&v) = self.transposes.get(&key) {
            return Ok(v);
        }
        let m = self.map(tape, slot, layer)?;
        let t = tape.transpose(m)?;
        self.transposes.insert(key, t);
        Ok(t)
    }
}

fn slot_name(slot: Slot) -> &'static str {
    FAMILY_SLOTS.iter().find(|(s, _)| *s == slot).map_or("res", |(_, n)| n)
}

/// Reject pairs the growth operator cannot map between.
pub fn check_compatible(src: &ModelConfig, dst: &ModelConfig, width_maps: WidthMaps) -> Result<()> {
    src.validate()?;
    dst.validate()?;
    if src.hidden_dim > dst.hidden_dim || src.num_layers > dst.num_layers {
        return Err(Error::invalid(format!(
            "source (D={}, L={}) exceeds target (D={}, L={})",
            src.hidden_dim, src.num_layers, dst.hidden_dim, dst.num_layers
        )));
    }
    if src.ffn_dim() > dst.ffn_dim() {
        return Err(Error::invalid(format!(
            "source FFN width {} exceeds target FFN width {}",
            src.ffn_dim(),
            dst.ffn_dim()
        )));
    }
    if width_maps == WidthMaps::Shared && src.ffn_multiplier != dst.ffn_multiplier {
        return Err(Error::invalid(
            "shared width maps need equal ffn_multiplier on both sides",
        ));
    }
    for (name, a, b) in [
        ("vocab_size", src.vocab_size, dst.vocab_size),
        ("num_classes", src.num_classes, dst.num_classes),
        ("max_seq_len", src.max_seq_len, dst.max_seq_len),
    ] {
        if a != b {
            return Err(Error::invalid(format!("{name} differs: {a} vs {b}")));
        }
    }
    Ok(())
}

/// Ordered (name, shape) table of operator matrices.
fn matrix_shapes(src: &ModelConfig, dst: &ModelConfig, width_maps: WidthMaps) -> Vec<(String, Vec<usize>)> {
    let res = vec![dst.hidden_dim, src.hidden_dim];
    let family_shape = |s: Slot| match s {
        Slot::FfnInner => vec![dst.ffn_dim(), src.ffn_dim()],
        _ => res.clone(),
    };
    let mut out = vec![("width.res".to_string(), res.clone())];
    match width_maps {
        WidthMaps::Shared => {}
        WidthMaps::PerFamily => {
            for (s, n) in FAMILY_SLOTS {
                out.push((format!("width.{n}"), family_shape(s)));
            }
        }
        WidthMaps::PerLayer => {
            for k in 0..src.num_layers {
                for (s, n) in FAMILY_SLOTS {
                    out.push((format!("width.{k}.{n}"), family_shape(s)));
                }
            }
        }
    }
    out.push(("depth".to_string(), vec![dst.num_layers, src.num_layers]));
    out.push(("head".to_string(), vec![dst.num_classes, src.num_classes]));
    out
}

/// Closed-form trainable scalar count of an operator between two configs.
///
/// With `D`, `F` the hidden and FFN widths, `L` the depths and `C` the class count:
///
/// * shared: `D2*D1 + L2*L1 + C^2`
/// * per-family: `6*D2*D1 + F2*F1 + L2*L1 + C^2`
/// * per-layer: `D2*D1 + L1*(5*D2*D1 + F2*F1) + L2*L1 + C^2`
pub fn count_operator_params(src: &ModelConfig, dst: &ModelConfig, width_maps: WidthMaps) -> OperatorCount {
    let by_matrix: IndexMap<String, usize> = matrix_shapes(src, dst, width_maps)
        .into_iter()
        .map(|(n, s)| (n, s.iter().product()))
        .collect();
    let (d1, d2) = (src.hidden_dim, dst.hidden_dim);
    let (f1, f2) = (src.ffn_dim(), dst.ffn_dim());
    let width = match width_maps {
        WidthMaps::Shared => d2 * d1,
        WidthMaps::PerFamily => 6 * d2 * d1 + f2 * f1,
        WidthMaps::PerLayer => d2 * d1 + src.num_layers * (5 * d2 * d1 + f2 * f1),
    };
    let depth = dst.num_layers * src.num_layers;
    let head = dst.num_classes * src.num_classes;
    OperatorCount {
        total: width + depth + head,
        width,
        depth,
        head,
        by_matrix,
    }
}

fn identity_with_noise(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::eye(rows, cols);
    if rows > cols {
        let noise = Tensor::trunc_normal(&[rows - cols, cols], IDENTITY_NOISE_STD, rng);
        t.data_mut()[cols * cols..].copy_from_slice(noise.data());
    }
    t
}

/// Target layer `l` copies source layer `min(l, L1 - 1)`.
fn depth_identity(src: &ModelConfig, dst: &ModelConfig) -> Tensor {
    let mut t = Tensor::zeros(&[dst.num_layers, src.num_layers]);
    for l in 0..dst.num_layers {
        let k = l.min(src.num_layers - 1);
        t.data_mut()[l * src.num_layers + k] = 1.0;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d: usize, l: usize) -> ModelConfig {
        ModelConfig::new(d, l, 1).with_task(3, 2, 2).with_ffn_multiplier(2)
    }

    #[test]
    fn identity_operator_on_equal_configs_reproduces_source() {
        let c = ModelConfig::new(6, 2, 2).with_task(7, 3, 4);
        for maps in [WidthMaps::Shared, WidthMaps::PerFamily, WidthMaps::PerLayer] {
            let op = GrowthOperator::init(c, c, maps, InitScheme::IdentityPreserving, 9).unwrap();
            let src = c.init_params(4).unwrap();
            let out = op.apply(&src).unwrap();
            assert_eq!(out, src, "{maps:?}");
        }
    }

    #[test]
    fn identity_block_is_exact() {
        let op = GrowthOperator::init(
            cfg(2, 1),
            cfg(3, 2),
            WidthMaps::Shared,
            InitScheme::IdentityPreserving,
            1,
        )
        .unwrap();
        let b = op.tensors().get("width.res").unwrap();
        assert_eq!(&b.data()[..4], &[1.0, 0.0, 0.0, 1.0]);
        assert!(b.data()[4..].iter().all(|v| v.abs() <= 2.0 * IDENTITY_NOISE_STD));
        let w = op.tensors().get("depth").unwrap();
        assert_eq!(w.data(), &[1.0, 1.0]);
    }

    #[test]
    fn random_scheme_is_deterministic() {
        let a = GrowthOperator::init(cfg(2, 1), cfg(4, 3), WidthMaps::PerFamily, InitScheme::Random, 5).unwrap();
        let b = GrowthOperator::init(cfg(2, 1), cfg(4, 3), WidthMaps::PerFamily, InitScheme::Random, 5).unwrap();
        let c = GrowthOperator::init(cfg(2, 1), cfg(4, 3), WidthMaps::PerFamily, InitScheme::Random, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_shrinking() {
        for maps in [WidthMaps::Shared, WidthMaps::PerFamily] {
            assert!(GrowthOperator::init(cfg(4, 1), cfg(2, 2), maps, InitScheme::Random, 0).is_err());
            assert!(GrowthOperator::init(cfg(2, 3), cfg(4, 2), maps, InitScheme::Random, 0).is_err());
        }
    }

    #[test]
    fn count_matches_enumeration_and_formula() {
        let (s, d) = (cfg(2, 1), cfg(3, 2));
        let shared = count_operator_params(&s, &d, WidthMaps::Shared);
        // D2*D1 + L2*L1 + C^2
        assert_eq!(shared.total, 3 * 2 + 2 + 2 * 2);
        for maps in [WidthMaps::Shared, WidthMaps::PerFamily, WidthMaps::PerLayer] {
            let op = GrowthOperator::init(s, d, maps, InitScheme::Random, 2).unwrap();
            assert_eq!(op.count().total, op.tensors().numel(), "{maps:?}");
            assert_eq!(op.count().by_matrix.values().sum::<usize>(), op.count().total);
        }
    }

    #[test]
    fn count_grows_with_target_width() {
        let s = cfg(4, 2);
        for maps in [WidthMaps::Shared, WidthMaps::PerFamily, WidthMaps::PerLayer] {
            let counts: Vec<usize> = (4..12)
                .map(|d| count_operator_params(&s, &cfg(d, 3), maps).total)
                .collect();
            assert!(counts.windows(2).all(|w| w[0] < w[1]), "{maps:?}: {counts:?}");
        }
    }

    #[test]
    fn codec_roundtrip() {
        let op = GrowthOperator::init(cfg(2, 1), cfg(4, 2), WidthMaps::PerLayer, InitScheme::Random, 3).unwrap();
        let back = GrowthOperator::decode(&op.encode()).unwrap();
        assert_eq!(back, op);
    }

    #[test]
    fn from_tensors_rejects_wrong_layout() {
        let op = GrowthOperator::init(cfg(2, 1), cfg(4, 2), WidthMaps::Shared, InitScheme::Random, 3).unwrap();
        let tensors = op.tensors().clone();
        assert!(GrowthOperator::from_tensors(cfg(2, 1), cfg(4, 2), WidthMaps::PerFamily, tensors).is_err());
    }
}
