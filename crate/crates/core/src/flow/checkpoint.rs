//! Binary checkpoint: magic, u64 LE header length, JSON header, then every
//! weight tensor as LE f64 in the order listed by the header.

use serde::{Deserialize, Serialize};

use super::made::MadeLayer;
use super::{DimTransform, FlowArch, FlowBlock, FlowModel, Standardizer};
use crate::datagen::{read_f64s, split_header};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"T1DNPE1\n";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorSpec {
    block: usize,
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    arch: FlowArch,
    seed: u64,
    transforms: Vec<DimTransform>,
    standardizer: Option<Standardizer>,
    permutations: Vec<Vec<usize>>,
    tensors: Vec<TensorSpec>,
    extra: serde_json::Value,
}

fn shapes(layer: &MadeLayer) -> Vec<Vec<usize>> {
    let w = &layer.weights;
    let mut v = Vec::new();
    for h in &w.hidden {
        v.push(h.w.shape().to_vec());
        v.push(h.c.shape().to_vec());
        v.push(h.b.shape().to_vec());
    }
    v.push(w.out_w.shape().to_vec());
    v.push(w.out_b.shape().to_vec());
    v
}

fn is_permutation(p: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    p.len() == n && p.iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
}

impl FlowModel {
    /// Serializes the model with caller-supplied JSON metadata.
    pub fn to_checkpoint(&self, extra: &serde_json::Value) -> Vec<u8> {
        let mut tensors = Vec::new();
        for (k, b) in self.blocks.iter().enumerate() {
            for (name, shape) in b.made.weights.tensor_names().into_iter().zip(shapes(&b.made)) {
                tensors.push(TensorSpec { block: k, name, shape });
            }
        }
        let header = Header {
            arch: self.arch,
            seed: self.seed,
            transforms: self.transforms.clone(),
            standardizer: self.standardizer.clone(),
            permutations: self.blocks.iter().map(|b| b.perm.clone()).collect(),
            tensors,
            extra: extra.clone(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + json.len() + 8 * self.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for b in &self.blocks {
            for t in b.made.weights.tensors() {
                for v in t {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    /// Inverse of [`FlowModel::to_checkpoint`].
    pub fn from_checkpoint(bytes: &[u8]) -> Result<(FlowModel, serde_json::Value)> {
        let (h, body) = split_header::<Header>(bytes, CHECKPOINT_MAGIC)?;
        h.arch.validate().map_err(|e| Error::Format(e.to_string()))?;
        if h.transforms.len() != h.arch.dim || h.permutations.len() != h.arch.blocks {
            return Err(Error::Format("checkpoint header is inconsistent with its architecture".into()));
        }
        if let Some(st) = &h.standardizer {
            st.validate().map_err(|e| Error::Format(e.to_string()))?;
            if st.theta_mean.len() != h.arch.dim || st.ctx_mean.len() != h.arch.ctx_dim {
                return Err(Error::Format("standardizer dimensions do not match".into()));
            }
        }
        let mut blocks = Vec::with_capacity(h.arch.blocks);
        for (k, perm) in h.permutations.iter().enumerate() {
            if !is_permutation(perm, h.arch.dim) {
                return Err(Error::Format(format!("block {k} permutation is not a bijection")));
            }
            blocks.push(FlowBlock {
                perm: perm.clone(),
                made: MadeLayer::zeros(h.arch.made()),
            });
        }
        let expected: Vec<(usize, String, Vec<usize>)> = blocks
            .iter()
            .enumerate()
            .flat_map(|(k, b)| {
                b.made
                    .weights
                    .tensor_names()
                    .into_iter()
                    .zip(shapes(&b.made))
                    .map(move |(n, s)| (k, n, s))
            })
            .collect();
        if expected.len() != h.tensors.len()
            || expected
                .iter()
                .zip(&h.tensors)
                .any(|((k, n, s), t)| *k != t.block || *n != t.name || *s != t.shape)
        {
            return Err(Error::Format("checkpoint tensor list does not match the architecture".into()));
        }
        let total: usize = blocks.iter().map(|b| b.made.param_count()).sum();
        if body.len() != 8 * total {
            return Err(Error::Format(format!(
                "checkpoint body has {} bytes, expected {}",
                body.len(),
                8 * total
            )));
        }
        let values = read_f64s(body);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("checkpoint contains non-finite weights".into()));
        }
        let mut pos = 0;
        for (k, b) in blocks.iter_mut().enumerate() {
            let masks: Vec<Option<Vec<f64>>> = b.made.tensor_masks().into_iter().map(|m| m.map(<[f64]>::to_vec)).collect();
            for (t, mask) in b.made.weights.tensors_mut().into_iter().zip(masks) {
                t.copy_from_slice(&values[pos..pos + t.len()]);
                pos += t.len();
                if let Some(m) = mask {
                    if t.iter().zip(&m).any(|(w, m)| *m == 0.0 && *w != 0.0) {
                        return Err(Error::Format(format!("block {k} has a nonzero masked weight")));
                    }
                }
            }
        }
        Ok((
            FlowModel {
                arch: h.arch,
                blocks,
                transforms: h.transforms,
                standardizer: h.standardizer,
                seed: h.seed,
            },
            h.extra,
        ))
    }
}
