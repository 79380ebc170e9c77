//! `VITW` single-file weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VITW" | u32 version (=1) | u64 header_len | header JSON (UTF-8)
//!        | zero padding to a 64-byte file offset
//!        | f32 blobs, contiguous, in header order
//!        | u32 CRC-32 (IEEE) of the blob region
//! ```
//!
//! The header is `{"spec": ModelSpec, "tensors": [{name, dtype, shape,
//! offset, length}]}` where `offset` is relative to the start of the blob
//! region and `length` is in bytes. See `docs/weights-format.md`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, WeightFormatError};
use crate::model::ModelSpec;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"VITW";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    tensors: Vec<TensorEntry>,
}

/// Canonical tensor names for a model of the given depth, in file order.
pub fn canonical_names(depth: usize) -> Vec<String> {
    let mut names: Vec<String> = ["patch_embed.w", "patch_embed.b", "cls_token", "pos_embed"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for i in 0..depth {
        for part in [
            "ln1.g",
            "ln1.b",
            "attn.qkv.w",
            "attn.qkv.b",
            "attn.proj.w",
            "attn.proj.b",
            "ln2.g",
            "ln2.b",
            "mlp.fc1.w",
            "mlp.fc1.b",
            "mlp.fc2.w",
            "mlp.fc2.b",
        ] {
            names.push(format!("blocks.{i}.{part}"));
        }
    }
    names.extend(["ln_final.g", "ln_final.b", "head.w", "head.b"].map(String::from));
    names
}

/// Declared shape of a canonical tensor; `None` for names outside the schema.
pub fn expected_shape(name: &str, spec: &ModelSpec) -> Option<Vec<usize>> {
    let d = spec.dim;
    let hidden = spec.mlp_hidden();
    let shape = match name {
        "patch_embed.w" => vec![d, spec.patch_dim()],
        "patch_embed.b" | "ln_final.g" | "ln_final.b" => vec![d],
        "cls_token" => vec![1, d],
        "pos_embed" => vec![spec.num_patches() + 1, d],
        "head.w" => vec![spec.num_classes, d],
        "head.b" => vec![spec.num_classes],
        _ => {
            let rest = name.strip_prefix("blocks.")?;
            let (idx, part) = rest.split_once('.')?;
            let idx: usize = idx.parse().ok()?;
            if idx >= spec.depth {
                return None;
            }
            match part {
                "ln1.g" | "ln1.b" | "ln2.g" | "ln2.b" | "attn.proj.b" | "mlp.fc2.b" => vec![d],
                "attn.qkv.w" => vec![3 * d, d],
                "attn.qkv.b" => vec![3 * d],
                "attn.proj.w" => vec![d, d],
                "mlp.fc1.w" => vec![hidden, d],
                "mlp.fc1.b" => vec![hidden],
                "mlp.fc2.w" => vec![d, hidden],
                _ => return None,
            }
        }
    };
    Some(shape)
}

fn shape_of(m: &Matrix<f32>, declared: &[usize]) -> Vec<usize> {
    if declared.len() == 1 && m.rows() == 1 {
        vec![m.cols()]
    } else {
        vec![m.rows(), m.cols()]
    }
}

/// Architecture plus validated named weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    spec: ModelSpec,
    tensors: BTreeMap<String, Matrix<f32>>,
}

impl ModelBundle {
    /// Checks that `tensors` covers the canonical schema exactly. Rank-1
    /// tensors are stored as `1 × n` matrices.
    pub fn new(spec: ModelSpec, tensors: BTreeMap<String, Matrix<f32>>) -> Result<Self> {
        spec.validate()?;
        for (name, m) in &tensors {
            let expected = expected_shape(name, &spec)
                .ok_or_else(|| WeightFormatError::UnexpectedTensor(name.clone()))?;
            let found = shape_of(m, &expected);
            if found != expected {
                return Err(WeightFormatError::ShapeMismatch {
                    name: name.clone(),
                    expected,
                    found,
                }
                .into());
            }
        }
        for name in canonical_names(spec.depth) {
            if !tensors.contains_key(&name) {
                return Err(WeightFormatError::MissingTensor(name).into());
            }
        }
        Ok(Self { spec, tensors })
    }

    /// Seeded random weights with LayerNorm at identity, for tests and the
    /// in-tree tiny preset.
    pub fn random(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for name in canonical_names(spec.depth) {
            let shape = expected_shape(&name, &spec).expect("canonical name");
            let (rows, cols) = match shape[..] {
                [n] => (1, n),
                [r, c] => (r, c),
                _ => unreachable!("tensors are rank 1 or 2"),
            };
            let data: Vec<f32> = if name.ends_with(".g") {
                vec![1.0; rows * cols]
            } else if name.starts_with("ln") || name.contains(".ln") {
                vec![0.0; rows * cols]
            } else {
                let bound = if shape.len() == 2 && name.ends_with(".w") {
                    1.0 / (cols as f32).sqrt()
                } else {
                    0.5
                };
                (0..rows * cols)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect()
            };
            tensors.insert(name, Matrix::new(rows, cols, data)?);
        }
        Self::new(spec, tensors)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn tensor_count(&self) -> usize {
        self.tensors.len()
    }

    pub fn tensors(&self) -> &BTreeMap<String, Matrix<f32>> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&Matrix<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| WeightFormatError::MissingTensor(name.to_string()).into())
    }

    /// A rank-1 tensor as a slice.
    pub fn vector(&self, name: &str) -> Result<&[f32]> {
        Ok(self.get(name)?.data())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let names = canonical_names(self.spec.depth);
        let mut entries = Vec::with_capacity(names.len());
        let mut offset = 0;
        for name in &names {
            let m = &self.tensors[name];
            let expected = expected_shape(name, &self.spec).expect("canonical name");
            let length = m.data().len() * 4;
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: shape_of(m, &expected),
                offset,
                length,
            });
            offset += length;
        }
        let header = serde_json::to_vec(&Header {
            spec: self.spec.clone(),
            tensors: entries,
        })
        .expect("header serializes");

        let pad = (ALIGN - (PREAMBLE + header.len()) % ALIGN) % ALIGN;
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + pad + offset + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.resize(out.len() + pad, 0);
        let blob_start = out.len();
        for name in &names {
            for v in self.tensors[name].data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[blob_start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        use WeightFormatError as E;
        if bytes.len() < PREAMBLE {
            return Err(E::BadHeader(format!("file is only {} bytes", bytes.len())).into());
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(E::BadMagic { found: magic }.into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(E::UnsupportedVersion(version).into());
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|h| PREAMBLE.checked_add(h))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| E::BadHeader(format!("header length {header_len} exceeds file")))?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| E::BadHeader(e.to_string()))?;
        header
            .spec
            .validate()
            .map_err(|e| E::BadHeader(format!("invalid model spec: {e}")))?;

        let blob_start = header_end.div_ceil(ALIGN) * ALIGN;
        let available = bytes.len().saturating_sub(4).saturating_sub(blob_start);

        let mut tensors = BTreeMap::new();
        let mut running = 0usize;
        for t in &header.tensors {
            if t.dtype != "f32" {
                return Err(E::UnknownDtype {
                    name: t.name.clone(),
                    dtype: t.dtype.clone(),
                }
                .into());
            }
            let elems: usize = t.shape.iter().product();
            if t.shape.is_empty() || t.shape.len() > 2 {
                return Err(E::BadHeader(format!(
                    "tensor `{}` has rank {}",
                    t.name,
                    t.shape.len()
                ))
                .into());
            }
            if t.length != elems * 4 {
                return Err(E::LengthMismatch {
                    name: t.name.clone(),
                    expected: elems * 4,
                    found: t.length,
                }
                .into());
            }
            if t.offset != running {
                return Err(E::BadOffset {
                    name: t.name.clone(),
                    expected: running,
                    offset: t.offset,
                }
                .into());
            }
            if running + t.length > available {
                return Err(E::Truncated {
                    name: t.name.clone(),
                    needed: t.length,
                    available: available.saturating_sub(running),
                }
                .into());
            }
            let blob = &bytes[blob_start + running..blob_start + running + t.length];
            let data: Vec<f32> = blob
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let (rows, cols) = match t.shape[..] {
                [n] => (1, n),
                [r, c] => (r, c),
                _ => unreachable!("rank checked above"),
            };
            if let Some(expected) = expected_shape(&t.name, &header.spec) {
                if expected != t.shape {
                    return Err(E::ShapeMismatch {
                        name: t.name.clone(),
                        expected,
                        found: t.shape.clone(),
                    }
                    .into());
                }
            } else {
                return Err(E::UnexpectedTensor(t.name.clone()).into());
            }
            if tensors
                .insert(t.name.clone(), Matrix::new(rows, cols, data)?)
                .is_some()
            {
                return Err(E::DuplicateTensor(t.name.clone()).into());
            }
            running += t.length;
        }
        if bytes.len() < blob_start + running + 4 {
            return Err(E::BadHeader("missing checksum trailer".into()).into());
        }
        let extra = bytes.len() - (blob_start + running + 4);
        if extra != 0 {
            return Err(E::TrailingBytes(extra).into());
        }
        let stored = u32::from_le_bytes(
            bytes[blob_start + running..]
                .try_into()
                .expect("4-byte trailer"),
        );
        let computed = crc32fast::hash(&bytes[blob_start..blob_start + running]);
        if stored != computed {
            return Err(E::ChecksumMismatch { stored, computed }.into());
        }
        Self::new(header.spec, tensors)
    }
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelBundle::from_bytes(&bytes)
}

pub fn write_bundle(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, bundle.to_bytes()).map_err(|e| Error::io(path, e))
}
