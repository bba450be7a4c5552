//! Flat parameter storage with named tensors, masks and serialization.
//!
//! All trainable state of a network lives in one contiguous `Vec<f64>`.
//! Tensors are registered with a name and a `(rows, cols)` shape and views
//! are cut out of the flat buffer on demand; gradients use an equally sized
//! flat buffer, which keeps the optimizer, finite-difference checks and
//! serialization trivial.
//!
//! Checkpoints are written as a small binary container: an 8-byte magic,
//! a JSON header (shapes, masks, variant flag, config hash plus arbitrary
//! caller metadata) and the raw little-endian `f64` values. Round-trips are
//! bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use base64::Engine;
use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::CpeError;

const MAGIC: &[u8; 8] = b"CPEPARMS";

/// Handle to a registered tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
struct TensorInfo {
    name: String,
    offset: usize,
    rows: usize,
    cols: usize,
    trainable: bool,
    /// 0/1 multiplier per entry; `None` means fully dense.
    mask: Option<Vec<f64>>,
}

/// Contiguous parameter buffer with a tensor registry.
#[derive(Debug, Clone)]
pub struct ParamStore {
    values: Vec<f64>,
    tensors: Vec<TensorInfo>,
    by_name: BTreeMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    /// Empty store.
    pub fn new() -> Self {
        ParamStore { values: Vec::new(), tensors: Vec::new(), by_name: BTreeMap::new() }
    }

    /// Register a `(rows, cols)` tensor initialized to zero. Names must be
    /// unique; vectors are registered with `cols == 1`.
    pub fn add_tensor(&mut self, name: &str, rows: usize, cols: usize, trainable: bool) -> TensorId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate tensor name `{name}`"
        );
        let offset = self.values.len();
        self.values.resize(offset + rows * cols, 0.0);
        let id = TensorId(self.tensors.len());
        self.tensors.push(TensorInfo {
            name: name.to_string(),
            offset,
            rows,
            cols,
            trainable,
            mask: None,
        });
        self.by_name.insert(name.to_string(), id.0);
        id
    }

    /// Attach a 0/1 mask (row-major, same shape as the tensor) and zero the
    /// masked entries immediately.
    pub fn set_mask(&mut self, id: TensorId, mask: Vec<f64>) {
        let info = &mut self.tensors[id.0];
        assert_eq!(mask.len(), info.rows * info.cols, "mask shape mismatch");
        assert!(
            mask.iter().all(|&m| m == 0.0 || m == 1.0),
            "mask entries must be 0 or 1"
        );
        info.mask = Some(mask);
        let (offset, len) = (info.offset, info.rows * info.cols);
        let mask = self.tensors[id.0].mask.as_ref().unwrap().clone();
        for (v, m) in self.values[offset..offset + len].iter_mut().zip(mask.iter()) {
            *v *= m;
        }
    }

    /// Number of scalar parameters.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    /// True when no tensors are registered.
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Flat view of all values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable flat view of all values.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Look up a tensor id by name.
    pub fn id(&self, name: &str) -> Option<TensorId> {
        self.by_name.get(name).map(|&i| TensorId(i))
    }

    /// Tensor name.
    pub fn name(&self, id: TensorId) -> &str {
        &self.tensors[id.0].name
    }

    /// Tensor shape.
    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        (self.tensors[id.0].rows, self.tensors[id.0].cols)
    }

    /// Flat value range occupied by a tensor.
    pub fn range(&self, id: TensorId) -> std::ops::Range<usize> {
        let info = &self.tensors[id.0];
        info.offset..info.offset + info.rows * info.cols
    }

    /// Whether the tensor receives gradient updates.
    pub fn trainable(&self, id: TensorId) -> bool {
        self.tensors[id.0].trainable
    }

    /// Mask attached to a tensor, if any.
    pub fn mask(&self, id: TensorId) -> Option<&[f64]> {
        self.tensors[id.0].mask.as_deref()
    }

    /// All tensor ids in registration order.
    pub fn ids(&self) -> impl Iterator<Item = TensorId> {
        (0..self.tensors.len()).map(TensorId)
    }

    /// Matrix view of a tensor.
    pub fn matrix(&self, id: TensorId) -> ArrayView2<'_, f64> {
        let info = &self.tensors[id.0];
        ArrayView2::from_shape(
            (info.rows, info.cols),
            &self.values[info.offset..info.offset + info.rows * info.cols],
        )
        .expect("registered shape is consistent")
    }

    /// Mutable matrix view of a tensor.
    pub fn matrix_mut(&mut self, id: TensorId) -> ArrayViewMut2<'_, f64> {
        let info = &self.tensors[id.0];
        let (offset, rows, cols) = (info.offset, info.rows, info.cols);
        ArrayViewMut2::from_shape((rows, cols), &mut self.values[offset..offset + rows * cols])
            .expect("registered shape is consistent")
    }

    /// Vector view of a `(n, 1)` tensor.
    pub fn vector(&self, id: TensorId) -> ArrayView1<'_, f64> {
        let info = &self.tensors[id.0];
        assert_eq!(info.cols, 1, "tensor `{}` is not a vector", info.name);
        ArrayView1::from(&self.values[info.offset..info.offset + info.rows])
    }

    /// Mutable vector view of a `(n, 1)` tensor.
    pub fn vector_mut(&mut self, id: TensorId) -> ArrayViewMut1<'_, f64> {
        let info = &self.tensors[id.0];
        assert_eq!(info.cols, 1, "tensor `{}` is not a vector", info.name);
        let (offset, rows) = (info.offset, info.rows);
        ArrayViewMut1::from(&mut self.values[offset..offset + rows])
    }

    /// Multiply every masked tensor by its mask, forcing masked entries to
    /// exactly zero. Called after initialization and after every optimizer
    /// step.
    pub fn apply_masks(&mut self) {
        for t in 0..self.tensors.len() {
            if let Some(mask) = self.tensors[t].mask.clone() {
                let info = &self.tensors[t];
                let (offset, len) = (info.offset, info.rows * info.cols);
                for (v, m) in self.values[offset..offset + len].iter_mut().zip(mask.iter()) {
                    *v *= m;
                }
            }
        }
    }

    /// Per-value trainability flags (non-trainable tensors and masked-out
    /// entries are false).
    pub fn trainable_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.values.len()];
        for info in &self.tensors {
            if !info.trainable {
                continue;
            }
            let len = info.rows * info.cols;
            match &info.mask {
                Some(mask) => {
                    for (k, &m) in mask.iter().enumerate() {
                        flags[info.offset + k] = m != 0.0;
                    }
                }
                None => flags[info.offset..info.offset + len].fill(true),
            }
        }
        flags
    }

    /// Grad-buffer view with the same layout as a tensor.
    pub fn grad_matrix<'g>(&self, grads: &'g [f64], id: TensorId) -> ArrayView2<'g, f64> {
        let info = &self.tensors[id.0];
        ArrayView2::from_shape(
            (info.rows, info.cols),
            &grads[info.offset..info.offset + info.rows * info.cols],
        )
        .expect("grad buffer matches store length")
    }

    /// Mutable grad-buffer view with the same layout as a tensor.
    pub fn grad_matrix_mut<'g>(&self, grads: &'g mut [f64], id: TensorId) -> ArrayViewMut2<'g, f64> {
        let info = &self.tensors[id.0];
        ArrayViewMut2::from_shape(
            (info.rows, info.cols),
            &mut grads[info.offset..info.offset + info.rows * info.cols],
        )
        .expect("grad buffer matches store length")
    }

    /// Serialize to the binary checkpoint format.
    pub fn save(&self, path: &Path, header: &CheckpointHeader) -> Result<(), CpeError> {
        let mut doc = HeaderJson {
            format: "cpe-params-v1".to_string(),
            variant: header.variant.clone(),
            config_hash: header.config_hash.clone(),
            meta: header.meta.clone(),
            tensors: Vec::new(),
        };
        for info in &self.tensors {
            doc.tensors.push(TensorJson {
                name: info.name.clone(),
                rows: info.rows,
                cols: info.cols,
                trainable: info.trainable,
                mask: info.mask.as_ref().map(|m| pack_mask(m)),
            });
        }
        let header_bytes = serde_json::to_vec(&doc)?;
        let mut out = Vec::with_capacity(16 + header_bytes.len() + self.values.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&out)?;
        Ok(())
    }

    /// Load a checkpoint written by [`ParamStore::save`].
    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader), CpeError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| CpeError::Data(format!("cannot open checkpoint `{}`: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        let corrupt = |why: &str| {
            CpeError::Data(format!("corrupt checkpoint `{}`: {why}", path.display()))
        };
        if bytes.len() < 16 || &bytes[0..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + hlen {
            return Err(corrupt("truncated header"));
        }
        let doc: HeaderJson = serde_json::from_slice(&bytes[16..16 + hlen])
            .map_err(|e| corrupt(&format!("unreadable header: {e}")))?;
        let mut store = ParamStore::new();
        for t in &doc.tensors {
            let id = store.add_tensor(&t.name, t.rows, t.cols, t.trainable);
            if let Some(packed) = &t.mask {
                let mask = unpack_mask(packed, t.rows * t.cols)
                    .ok_or_else(|| corrupt("bad mask encoding"))?;
                store.set_mask(id, mask);
            }
        }
        let data = &bytes[16 + hlen..];
        if data.len() != store.len() * 8 {
            return Err(corrupt("value section length mismatch"));
        }
        for (i, chunk) in data.chunks_exact(8).enumerate() {
            store.values[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok((
            store,
            CheckpointHeader {
                variant: doc.variant,
                config_hash: doc.config_hash,
                meta: doc.meta,
            },
        ))
    }
}

/// Caller-side checkpoint metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    /// Flow variant tag: `"continuous"` or `"discrete"`.
    pub variant: String,
    /// Hash of the resolved run configuration.
    pub config_hash: String,
    /// Arbitrary JSON payload (model config, graph, standardizer).
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct HeaderJson {
    format: String,
    variant: String,
    config_hash: String,
    meta: serde_json::Value,
    tensors: Vec<TensorJson>,
}

#[derive(Serialize, Deserialize)]
struct TensorJson {
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
    #[serde(default)]
    mask: Option<String>,
}

fn pack_mask(mask: &[f64]) -> String {
    let mut packed = vec![0u8; mask.len().div_ceil(8)];
    for (i, &m) in mask.iter().enumerate() {
        if m != 0.0 {
            packed[i / 8] |= 1 << (i % 8);
        }
    }
    base64::engine::general_purpose::STANDARD.encode(packed)
}

fn unpack_mask(text: &str, len: usize) -> Option<Vec<f64>> {
    let packed = base64::engine::general_purpose::STANDARD.decode(text).ok()?;
    if packed.len() != len.div_ceil(8) {
        return None;
    }
    Some(
        (0..len)
            .map(|i| if packed[i / 8] & (1 << (i % 8)) != 0 { 1.0 } else { 0.0 })
            .collect(),
    )
}
