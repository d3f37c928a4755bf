//! Named, ordered parameter collections and their binary codec.
//!
//! Layout of the binary format (all integers little-endian):
//!
//! ```text
//! magic  "FGPS"            4 bytes
//! version u32              currently 1
//! meta_len u32, meta       UTF-8 metadata (JSON or empty)
//! count u32
//! count x { name_len u32, name, ndim u32, ndim x u64 extent }
//! values                   f64 little-endian, entries in table order
//! ```

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FGPS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// All values concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamSet {
        ParamSet {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.map(&f))).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> ParamSet {
        self.map(|v| v * c)
    }

    /// `self += c * other`, requiring an identical layout.
    pub fn axpy(&mut self, c: f64, other: &ParamSet) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::shape("param_axpy", "parameter layouts differ"));
        }
        for (a, b) in self.entries.values_mut().zip(other.entries.values()) {
            a.axpy(c, b)?;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> Option<f64> {
        if !self.same_layout(other) {
            return None;
        }
        self.entries
            .values()
            .zip(other.entries.values())
            .map(|(a, b)| a.max_abs_diff(b))
            .try_fold(0.0, |acc: f64, d| d.map(|d| acc.max(d)))
    }

    /// Put every entry on the tape, either as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        BoundParams { vars }
    }

    pub fn encode(&self, meta: &str) -> Vec<u8> {
        let mut buf = Vec::with_capacity(64 + self.numel() * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut buf, meta.as_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            put_bytes(&mut buf, name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for t in self.entries.values() {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    /// Decode a buffer produced by [`ParamSet::encode`], returning the metadata string too.
    pub fn decode(bytes: &[u8]) -> Result<(ParamSet, String)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Codec("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Codec(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|e| Error::Codec(format!("metadata not UTF-8: {e}")))?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name =
                String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Codec(format!("name not UTF-8: {e}")))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            table.push((name, shape));
        }
        let mut out = ParamSet::new();
        for (name, shape) in table {
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Codec(e.to_string()))?;
            if out.entries.insert(name.clone(), t).is_some() {
                return Err(Error::Codec(format!("duplicate entry '{name}'")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Codec(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok((out, meta))
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet {
            entries: iter.into_iter().collect(),
        }
    }
}

fn put_bytes(buf: &mut Vec<u8>, b: &[u8]) {
    buf.extend_from_slice(&(b.len() as u32).to_le_bytes());
    buf.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Codec("truncated buffer".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// A [`ParamSet`] placed on a tape: the same names, mapped to nodes.
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Read the current node values back into a [`ParamSet`].
    pub fn values(&self, tape: &Tape) -> ParamSet {
        self.vars
            .iter()
            .map(|(k, &v)| (k.clone(), tape.value(v).clone()))
            .collect()
    }

    /// Collect gradients by name; entries without a gradient are omitted.
    pub fn gradients(&self, grads: &Gradients) -> IndexMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| grads.get(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}
