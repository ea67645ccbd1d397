//! `ALTCKPT1` checkpoint files: architecture, training metadata and every
//! parameter tensor by name.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cell::CellParams;
use crate::error::{Error, Result};
use crate::format::{decode, encode, read_all, write_atomic};
use crate::network::{Model, ModelKind, NetSpec};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ALTCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainMeta {
    pub epoch: usize,
    /// Validation loss at `epoch`, meters; `None` for untrained models.
    pub loss: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    kind: ModelKind,
    spec: NetSpec,
    meta: TrainMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: TrainMeta,
}

impl Checkpoint {
    pub fn new(model: Model, meta: TrainMeta) -> Self {
        Self { model, meta }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named = self.model.named_tensors();
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            kind: self.model.kind(),
            spec: self.model.spec().clone(),
            meta: self.meta,
            tensors: named
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let payload: Vec<f64> = named.iter().flat_map(|(_, t)| t.data().iter().copied()).collect();
        encode(CHECKPOINT_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload): (Header, Vec<f64>) = decode(CHECKPOINT_MAGIC, bytes, |h: &Header| {
            if h.format_version != CHECKPOINT_VERSION {
                return Err(Error::Format(format!(
                    "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                    h.format_version
                )));
            }
            Ok(h.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum())
        })?;
        let Header {
            kind,
            spec,
            meta,
            tensors,
            ..
        } = header;
        spec.validate(true)
            .map_err(|e| Error::Format(format!("invalid architecture: {e}")))?;

        let per_layer = if kind.has_peephole() { 15 } else { 12 };
        let layers = spec.num_layers();
        if tensors.len() != layers * per_layer {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                layers * per_layer,
                tensors.len()
            )));
        }
        let mut offset = 0;
        let mut params = Vec::with_capacity(layers);
        for (l, entries) in tensors.chunks(per_layer).enumerate() {
            let mut ts = Vec::with_capacity(per_layer);
            for e in entries {
                let n: usize = e.shape.iter().product();
                ts.push(Tensor::new(e.shape.clone(), payload[offset..offset + n].to_vec())?);
                offset += n;
            }
            let p = CellParams::from_tensors(ts, kind.has_peephole())?;
            for ((want, _), got) in p.named().iter().zip(entries) {
                if got.name != format!("layer{l}.{want}") {
                    return Err(Error::Format(format!(
                        "unexpected tensor name '{}' (expected 'layer{l}.{want}')",
                        got.name
                    )));
                }
            }
            params.push(p);
        }
        let model = Model::from_parts(spec, kind, params)?;
        if !model.is_finite() {
            return Err(Error::Format("checkpoint holds non-finite parameters".into()));
        }
        Ok(Self { model, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_all(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(kind: ModelKind) -> Checkpoint {
        Checkpoint::new(
            Model::new(NetSpec::desk(), kind, 3),
            TrainMeta {
                epoch: 7,
                loss: Some(0.1 + 0.2),
                seed: u64::MAX,
            },
        )
    }

    fn find(hay: &[u8], needle: &[u8]) -> usize {
        hay.windows(needle.len()).position(|w| w == needle).unwrap()
    }

    #[test]
    fn bytes_round_trip_every_kind() {
        for kind in ModelKind::all() {
            let ck = sample(kind);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn version_and_truncation() {
        let bytes = sample(ModelKind::Alt).to_bytes().unwrap();
        for cut in [0, 10, 100, bytes.len() - 8, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(Error::Format(_))
            ));
        }
        let at = find(&bytes, b"\"format_version\":1") + b"\"format_version\":".len();
        let mut bumped = bytes.clone();
        bumped[at] = b'9';
        let err = Checkpoint::from_bytes(&bumped).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }

    #[test]
    fn rejects_bad_names() {
        let bytes = sample(ModelKind::Alt).to_bytes().unwrap();
        let at = find(&bytes, b"layer0.w_xi");
        let mut bad = bytes.clone();
        bad[at + 5] = b'1';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
