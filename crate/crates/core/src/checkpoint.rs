//! Model persistence.
//!
//! Layout:
//!
//! ```text
//! "QCFSCKPT"          8-byte magic
//! version             u32 LE
//! header length       u64 LE
//! header              UTF-8 JSON
//! payload             f64 LE, tensors back to back
//! ```
//!
//! The header records the layer list, per-tensor name/shape/offset/length,
//! activation or neuron scalars, training metadata and the SHA-256 of the
//! payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{ActivationKind, AnnModel, IfParams, Layer, LayerSpec, LinearOp, SnnLayer, SnnModel};
use crate::qcfs::QcfsParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"QCFSCKPT";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub seed: Option<u64>,
    /// Digest of the configuration that produced the model.
    pub config_digest: Option<String>,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Ann(AnnModel),
    Snn(SnnModel),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Ann(_) => "ann",
            Model::Snn(_) => "snn",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub metadata: Metadata,
}

impl Checkpoint {
    pub fn ann(model: AnnModel, metadata: Metadata) -> Self {
        Checkpoint {
            model: Model::Ann(model),
            metadata,
        }
    }

    pub fn snn(model: SnnModel, metadata: Metadata) -> Self {
        Checkpoint {
            model: Model::Snn(model),
            metadata,
        }
    }

    pub fn into_ann(self) -> Result<AnnModel> {
        match self.model {
            Model::Ann(m) => Ok(m),
            other => Err(Error::ModelKind {
                expected: "ann",
                found: other.kind().into(),
            }),
        }
    }

    pub fn into_snn(self) -> Result<SnnModel> {
        match self.model {
            Model::Snn(m) => Ok(m),
            other => Err(Error::ModelKind {
                expected: "snn",
                found: other.kind().into(),
            }),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in bytes.
    offset: u64,
    /// Length in bytes.
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    spec: LayerSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    qcfs: Option<QcfsParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    neuron: Option<IfParams>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerEntry>,
    tensors: Vec<TensorEntry>,
    metadata: Metadata,
    payload_sha256: String,
}

#[derive(Default)]
struct PayloadWriter {
    bytes: Vec<u8>,
    entries: Vec<TensorEntry>,
}

impl PayloadWriter {
    fn push(&mut self, name: String, t: &Tensor) {
        let data = t.to_le_bytes();
        self.entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: self.bytes.len() as u64,
            len: data.len() as u64,
        });
        self.bytes.extend(data);
    }

    fn push_op(&mut self, index: usize, op: &LinearOp) {
        if let Some((w, b)) = op.weights() {
            self.push(format!("layer{index}.weight"), w);
            self.push(format!("layer{index}.bias"), b);
        }
    }
}

/// Serializes a checkpoint to bytes.
pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut payload = PayloadWriter::default();
    let (input_shape, layers) = match &ckpt.model {
        Model::Ann(m) => {
            let layers = m
                .layers()
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    if let Layer::Linear(op) = l {
                        payload.push_op(i, op);
                    }
                    LayerEntry {
                        spec: l.spec(),
                        qcfs: match l {
                            Layer::Activation { params, .. } => Some(*params),
                            _ => None,
                        },
                        neuron: None,
                    }
                })
                .collect();
            (m.input_shape().to_vec(), layers)
        }
        Model::Snn(m) => {
            let layers = m
                .layers()
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    if let SnnLayer::Linear(op) = l {
                        payload.push_op(i, op);
                    }
                    LayerEntry {
                        spec: l.spec(),
                        qcfs: None,
                        neuron: match l {
                            SnnLayer::Spiking(p) => Some(*p),
                            _ => None,
                        },
                    }
                })
                .collect();
            (m.input_shape().to_vec(), layers)
        }
    };
    let header = Header {
        kind: ckpt.model.kind().into(),
        input_shape,
        layers,
        tensors: payload.entries,
        metadata: ckpt.metadata.clone(),
        payload_sha256: hex::encode(Sha256::digest(&payload.bytes)),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.bytes.len());
    out.extend_from_slice(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(json);
    out.extend(payload.bytes);
    Ok(out)
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

struct PayloadReader<'a> {
    payload: &'a [u8],
    entries: BTreeMap<String, &'a TensorEntry>,
}

impl PayloadReader<'_> {
    fn tensor(&self, name: &str) -> Result<Tensor> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} missing")))?;
        let (start, len) = (e.offset as usize, e.len as usize);
        let bytes = self
            .payload
            .get(start..start + len)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} lies outside the payload")))?;
        if len % 8 != 0 {
            return Err(Error::Checkpoint(format!(
                "tensor {name} length {len} is not a multiple of 8"
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(e.shape.clone(), data)
    }

    fn linear(&self, index: usize, spec: &LayerSpec) -> Result<LinearOp> {
        let weights = || -> Result<(Tensor, Tensor)> {
            Ok((
                self.tensor(&format!("layer{index}.weight"))?,
                self.tensor(&format!("layer{index}.bias"))?,
            ))
        };
        let op = match *spec {
            LayerSpec::Dense { .. } => {
                let (w, b) = weights()?;
                LinearOp::dense(w, b)?
            }
            LayerSpec::Conv2d { stride, pad, .. } => {
                let (w, b) = weights()?;
                LinearOp::conv2d(w, b, stride, pad)?
            }
            LayerSpec::AvgPool2d { size } => LinearOp::AvgPool2d { size },
            LayerSpec::MaxPool2d { size } => LinearOp::MaxPool2d { size },
            LayerSpec::Flatten => LinearOp::Flatten,
            LayerSpec::Activation { .. } => unreachable!("handled by caller"),
        };
        if op.spec() != *spec {
            return Err(Error::Checkpoint(format!(
                "layer {index}: tensors describe {} but header says {spec}",
                op.spec()
            )));
        }
        Ok(op)
    }
}

/// Parses a checkpoint from bytes, verifying magic, version and checksum.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREAMBLE {
        return Err(format_err(bytes.len(), "file shorter than the checkpoint preamble"));
    }
    if &bytes[..8] != MAGIC {
        return Err(format_err(0, "not a QCFS checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = PREAMBLE
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| format_err(12, "header length exceeds file size"))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| format_err(PREAMBLE, format!("malformed header: {e}")))?;
    let payload = &bytes[header_end..];
    let digest = hex::encode(Sha256::digest(payload));
    if digest != header.payload_sha256 {
        return Err(Error::Checkpoint(format!(
            "payload checksum mismatch: header {} vs computed {digest}",
            header.payload_sha256
        )));
    }
    let reader = PayloadReader {
        payload,
        entries: header.tensors.iter().map(|e| (e.name.clone(), e)).collect(),
    };
    let model = match header.kind.as_str() {
        "ann" => {
            let layers = header
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| match l.spec {
                    LayerSpec::Activation { activation } => Ok(Layer::Activation {
                        kind: activation,
                        params: l
                            .qcfs
                            .ok_or_else(|| Error::Checkpoint(format!("layer {i}: activation parameters missing")))?,
                    }),
                    ref spec => Ok(Layer::Linear(reader.linear(i, spec)?)),
                })
                .collect::<Result<Vec<_>>>()?;
            Model::Ann(AnnModel::new(header.input_shape, layers)?)
        }
        "snn" => {
            let layers = header
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| match l.spec {
                    LayerSpec::Activation {
                        activation: ActivationKind::IfNeuron,
                    } => Ok(SnnLayer::Spiking(l.neuron.ok_or_else(|| {
                        Error::Checkpoint(format!("layer {i}: neuron parameters missing"))
                    })?)),
                    LayerSpec::Activation { activation } => Err(Error::Checkpoint(format!(
                        "layer {i}: {activation} activation inside an SNN checkpoint"
                    ))),
                    ref spec => Ok(SnnLayer::Linear(reader.linear(i, spec)?)),
                })
                .collect::<Result<Vec<_>>>()?;
            Model::Snn(SnnModel::new(header.input_shape, layers)?)
        }
        other => return Err(Error::Checkpoint(format!("unknown model kind {other:?}"))),
    };
    Ok(Checkpoint {
        model,
        metadata: header.metadata,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Architecture;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_ann() -> AnnModel {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Architecture::ConvSmall
            .build(
                &[1, 8, 8],
                3,
                ActivationKind::Qcfs,
                QcfsParams::new(4, 1.37, 0.5).unwrap(),
                &mut rng,
            )
            .unwrap()
    }

    #[test]
    fn ann_round_trip_is_exact() {
        let ckpt = Checkpoint::ann(
            sample_ann(),
            Metadata {
                seed: Some(42),
                config_digest: Some("abc".into()),
                ..Metadata::default()
            },
        );
        let back = from_bytes(&to_bytes(&ckpt).unwrap()).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn snn_round_trip_is_exact() {
        let snn = crate::converter::convert(&sample_ann(), Some(0.1)).unwrap();
        let ckpt = Checkpoint::snn(snn, Metadata::default());
        let back = from_bytes(&to_bytes(&ckpt).unwrap()).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = to_bytes(&Checkpoint::ann(sample_ann(), Metadata::default())).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        let err = from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn wrong_kind_names_the_model() {
        let bytes = to_bytes(&Checkpoint::ann(sample_ann(), Metadata::default())).unwrap();
        let err = from_bytes(&bytes).unwrap().into_snn().unwrap_err();
        assert!(matches!(err, Error::ModelKind { expected: "snn", .. }));
        assert!(err.to_string().contains("ann"));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = to_bytes(&Checkpoint::ann(sample_ann(), Metadata::default())).unwrap();
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(from_bytes(&wrong_version).unwrap_err().to_string().contains("version"));
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(from_bytes(&[]), Err(Error::Format { .. })));
    }
}
