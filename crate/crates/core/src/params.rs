//! Named parameter storage and the checkpoint container.
//!
//! A checkpoint is a text header followed by raw little-endian data:
//!
//! ```text
//! ESNET-CHECKPOINT 1
//! params <count>
//! <name> <dtype> <batch>,<channels>,<height>,<width> <byte offset> <byte length>
//! ...
//! end
//! <payload>
//! ```
//!
//! Offsets are relative to the first payload byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Shape, Tensor};

const MAGIC: &str = "ESNET-CHECKPOINT 1";

/// Stable handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Insertion-ordered collection of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!("invalid parameter name {name:?}")));
        }
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let (idx, _) = self.params.insert_full(name, value);
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.params.values()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.values_mut()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Registers every parameter as a gradient-receiving leaf. The returned
    /// handles are indexed by [`ParamId`].
    pub fn bind(&self, g: &mut Graph<T>) -> Result<BoundParams> {
        let vars = self
            .params
            .values()
            .map(|t| g.param(t.clone()))
            .collect::<Result<_>>()?;
        Ok(BoundParams { vars })
    }

    /// Registers every parameter as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Result<BoundParams> {
        let vars = self
            .params
            .values()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<_>>()?;
        Ok(BoundParams { vars })
    }

    /// Gradients of every bound parameter after `backward`, zeros where a
    /// parameter was not reached.
    pub fn gradients(&self, g: &Graph<T>, bound: &BoundParams) -> Vec<Tensor<T>> {
        self.params
            .values()
            .zip(&bound.vars)
            .map(|(t, &v)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC}\nparams {}\n", self.params.len());
        let mut payload = Vec::new();
        for (name, t) in &self.params {
            let s = t.shape();
            let offset = payload.len();
            for &v in t.data() {
                v.write_le(&mut payload);
            }
            header.push_str(&format!(
                "{name} {} {},{},{},{} {offset} {}\n",
                T::DTYPE,
                s.batch,
                s.channels,
                s.height,
                s.width,
                payload.len() - offset
            ));
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |detail: String| Error::format(origin, detail);
        let mut pos = 0usize;
        let mut next_line = |bytes: &[u8]| -> Result<String> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header".into()))?;
            let line = std::str::from_utf8(&rest[..nl])
                .map_err(|_| bad("header is not UTF-8".into()))?
                .to_string();
            pos += nl + 1;
            Ok(line)
        };
        if next_line(bytes)? != MAGIC {
            return Err(bad("missing checkpoint magic".into()));
        }
        let count_line = next_line(bytes)?;
        let count: usize = count_line
            .strip_prefix("params ")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| bad(format!("bad count line {count_line:?}")))?;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next_line(bytes)?;
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() != 5 {
                return Err(bad(format!("bad entry {line:?}")));
            }
            if fields[1] != T::DTYPE {
                return Err(bad(format!(
                    "parameter {} has dtype {}, expected {}",
                    fields[0],
                    fields[1],
                    T::DTYPE
                )));
            }
            let dims: Vec<usize> = fields[2]
                .split(',')
                .map(|d| d.parse().map_err(|_| bad(format!("bad shape in {line:?}"))))
                .collect::<Result<_>>()?;
            if dims.len() != 4 {
                return Err(bad(format!("shape must have 4 dims in {line:?}")));
            }
            let offset: usize = fields[3].parse().map_err(|_| bad(format!("bad offset in {line:?}")))?;
            let len: usize = fields[4].parse().map_err(|_| bad(format!("bad length in {line:?}")))?;
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            if len != shape.numel() * T::BYTES {
                return Err(bad(format!("length {len} inconsistent with shape in {line:?}")));
            }
            entries.push((fields[0].to_string(), shape, offset, len));
        }
        if next_line(bytes)? != "end" {
            return Err(bad("missing header terminator".into()));
        }
        let payload = &bytes[pos..];
        let mut store = ParamStore::new();
        for (name, shape, offset, len) in entries {
            let chunk = payload
                .get(offset..offset + len)
                .ok_or_else(|| bad(format!("payload truncated for {name}")))?;
            let data = chunk.chunks_exact(T::BYTES).map(T::read_le).collect();
            store.insert(name, Tensor::from_vec(shape, data)?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        // write-then-rename so an interrupted save never clobbers the last
        // good checkpoint
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn checkpoint_round_trips_bit_exactly(
            values in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..40),
            extra in proptest::collection::vec(any::<f32>(), 1..8),
        ) {
            let mut store = ParamStore::<f32>::new();
            let n = values.len();
            store.insert("layer.weight", Tensor::from_vec([1, 1, 1, n], values).unwrap()).unwrap();
            let m = extra.len();
            // NaN payloads are carried verbatim too
            store.insert("layer.bias", Tensor::from_vec([m, 1, 1, 1], extra).unwrap()).unwrap();
            let bytes = store.to_bytes();
            let back = ParamStore::<f32>::from_bytes(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(back.len(), 2);
            for ((na, a), (nb, b)) in store.iter().zip(back.iter()) {
                prop_assert_eq!(na, nb);
                prop_assert_eq!(a.shape(), b.shape());
                let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(ab, bb);
            }
        }
    }

    #[test]
    fn rejects_dtype_mismatch_and_truncation() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::ones([1, 1, 2, 2])).unwrap();
        let bytes = store.to_bytes();
        assert!(ParamStore::<f32>::from_bytes(&bytes, Path::new("mem")).is_err());
        assert!(ParamStore::<f64>::from_bytes(&bytes[..bytes.len() - 3], Path::new("mem")).is_err());
        assert!(ParamStore::<f64>::from_bytes(b"garbage\n", Path::new("mem")).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.insert("a", Tensor::ones([1, 1, 1, 1])).unwrap();
        assert!(store.insert("a", Tensor::ones([1, 1, 1, 1])).is_err());
        assert!(store.insert("has space", Tensor::ones([1, 1, 1, 1])).is_err());
    }
}
