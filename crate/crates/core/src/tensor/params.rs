//! Named parameter storage and its on-disk form.
//!
//! Parameters serialize as one flat blob of little-endian `f64` values plus
//! a text manifest with one line per tensor:
//!
//! ```text
//! # mdfce-params v1
//! <name> <d0>x<d1>x... <byte offset>
//! ```

use std::fmt::Write as _;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const PARAMS_MAGIC_LINE: &str = "# mdfce-params v1";

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate parameter {name}"
        );
        self.entries.push((name, value));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every parameter as a leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundParams {
        BoundParams(
            self.entries
                .iter()
                .map(|(_, t)| graph.leaf(t.clone(), trainable))
                .collect(),
        )
    }

    /// Serializes to `(manifest, blob)`.
    pub fn to_bytes(&self) -> (String, Vec<u8>) {
        let mut manifest = String::from(PARAMS_MAGIC_LINE);
        manifest.push('\n');
        let mut blob = Vec::with_capacity(self.numel() * 8);
        for (name, t) in &self.entries {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(manifest, "{name} {} {}", dims.join("x"), blob.len());
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        (manifest, blob)
    }

    pub fn from_bytes(manifest: &str, blob: &[u8]) -> Result<Self> {
        let mut lines = manifest.lines();
        if lines.next() != Some(PARAMS_MAGIC_LINE) {
            return Err(Error::Format {
                offset: 0,
                reason: "parameter manifest has an unknown header".into(),
            });
        }
        let mut store = ParamStore::new();
        for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |reason: &str| Error::Format {
                offset: 0,
                reason: format!("manifest line {}: {reason}", lineno + 2),
            };
            let mut parts = line.split_whitespace();
            let (Some(name), Some(dims), Some(offset), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad("expected `name shape offset`"));
            };
            let shape = dims
                .split('x')
                .map(str::parse::<usize>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad("bad shape"))?;
            let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
            let n: usize = shape.iter().product();
            let end = offset + n * 8;
            if end > blob.len() {
                return Err(Error::Format {
                    offset: blob.len() as u64,
                    reason: format!("parameter {name} runs past the end of the blob"),
                });
            }
            let data = blob[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            store.add(name, Tensor::new(&shape, data)?);
        }
        Ok(store)
    }
}

/// Graph handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct BoundParams(Vec<Var>);

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    /// Gradients of all parameters after `graph.backward`, zero when a
    /// parameter did not influence the loss.
    pub fn grads(&self, graph: &Graph, store: &ParamStore) -> Vec<Tensor> {
        self.0
            .iter()
            .zip(store.ids())
            .map(|(&v, id)| {
                graph
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }
}
