//! Single-file weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"GATEKIT1"
//! u64            manifest byte length
//! [u8]           UTF-8 JSON manifest
//! per array, in manifest `arrays` order:
//!   u64          payload byte length
//!   [f32|f64]    row-major values
//! ```
//!
//! The manifest names each array once under `arrays` (with its shape) and
//! refers to arrays by name from `stages` and `heads`. A `batchnorm` stage is
//! folded into the affine or conv stage before it while loading, so loaded
//! networks never contain one.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};

use super::batchnorm::{fold_batchnorm, BatchNorm};
use crate::error::{Error, Result};
use crate::network::{Affine, Conv, MaxPool, Network, Normalization, Shape, Stage};

pub const MAGIC: &[u8; 8] = b"GATEKIT1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER: u64 = 16;
const STAGE_KINDS: [&str; 5] = ["affine", "conv", "maxpool", "gate", "batchnorm"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StageEntry {
    Affine {
        weight: String,
        bias: String,
        #[serde(default)]
        linear_output: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        output_shape: Option<[usize; 3]>,
    },
    Conv {
        kernel: String,
        bias: String,
        stride: usize,
        padding: usize,
        #[serde(default)]
        linear_output: bool,
    },
    Maxpool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Gate {
        layer: usize,
    },
    Batchnorm {
        gamma: String,
        beta: String,
        mean: String,
        var: String,
        eps: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: Dtype,
    /// `[channels, height, width]`.
    pub input_shape: [usize; 3],
    #[serde(default)]
    pub normalization: Option<Normalization>,
    pub stages: Vec<StageEntry>,
    pub heads: String,
    pub arrays: Vec<ArrayEntry>,
}

/// Serializes a manifest and its arrays (given in `manifest.arrays` order).
pub fn write_container(manifest: &Manifest, arrays: &[&[f64]]) -> Result<Vec<u8>> {
    if arrays.len() != manifest.arrays.len() {
        return Err(Error::Shape {
            what: "container arrays".into(),
            expected: manifest.arrays.len(),
            found: arrays.len(),
        });
    }
    let json = serde_json::to_vec(manifest).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(HEADER as usize + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (entry, data) in manifest.arrays.iter().zip(arrays) {
        let numel: usize = entry.shape.iter().product();
        if numel != data.len() {
            return Err(Error::ArrayShape {
                name: entry.name.clone(),
                expected: numel,
                found: data.len(),
            });
        }
        out.extend_from_slice(&((numel * manifest.dtype.size()) as u64).to_le_bytes());
        for v in data.iter() {
            match manifest.dtype {
                Dtype::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

/// Arrays of a parsed container, keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub manifest: Manifest,
    pub arrays: HashMap<String, (Vec<usize>, Vec<f64>)>,
}

fn json_offset(text: &[u8], line: usize, column: usize) -> u64 {
    let mut start = 0;
    for _ in 1..line {
        match text[start..].iter().position(|b| *b == b'\n') {
            Some(p) => start += p + 1,
            None => break,
        }
    }
    HEADER + (start + column.saturating_sub(1)) as u64
}

fn read_u64(bytes: &[u8], at: usize) -> Option<u64> {
    bytes
        .get(at..at + 8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
}

/// Parses the byte layout without interpreting stages.
pub fn read_container(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "missing GATEKIT1 magic".into(),
        });
    }
    let len = read_u64(bytes, 8).ok_or(Error::Parse {
        offset: 8,
        message: "truncated manifest length".into(),
    })?;
    let end = HEADER
        .checked_add(len)
        .filter(|e| *e <= bytes.len() as u64)
        .ok_or(Error::Parse {
            offset: 8,
            message: format!("manifest length {len} exceeds file size {}", bytes.len()),
        })? as usize;
    let text = &bytes[HEADER as usize..end];
    let value: serde_json::Value = serde_json::from_slice(text).map_err(|e| Error::Parse {
        offset: json_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    if let Some(stages) = value.get("stages").and_then(|s| s.as_array()) {
        for s in stages {
            let kind = s
                .get("kind")
                .and_then(|k| k.as_str())
                .unwrap_or("<missing>");
            if !STAGE_KINDS.contains(&kind) {
                return Err(Error::UnsupportedStage(kind.to_string()));
            }
        }
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| Error::Parse {
        offset: HEADER,
        message: format!("manifest: {e}"),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Parse {
            offset: HEADER,
            message: format!("unsupported format version {}", manifest.format_version),
        });
    }
    let size = manifest.dtype.size();
    let mut pos = end;
    let mut arrays = HashMap::new();
    for entry in &manifest.arrays {
        let declared = read_u64(bytes, pos).ok_or(Error::PayloadLength {
            name: entry.name.clone(),
            declared: 8,
            available: (bytes.len() - pos) as u64,
        })?;
        pos += 8;
        let available = (bytes.len() - pos) as u64;
        if declared > available {
            return Err(Error::PayloadLength {
                name: entry.name.clone(),
                declared,
                available,
            });
        }
        let numel: usize = entry.shape.iter().product();
        if declared % size as u64 != 0 || declared / size as u64 != numel as u64 {
            return Err(Error::ArrayShape {
                name: entry.name.clone(),
                expected: numel,
                found: (declared / size as u64) as usize,
            });
        }
        let raw = &bytes[pos..pos + declared as usize];
        let data: Vec<f64> = match manifest.dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        pos += declared as usize;
        if arrays
            .insert(entry.name.clone(), (entry.shape.clone(), data))
            .is_some()
        {
            return Err(Error::Parse {
                offset: HEADER,
                message: format!("array `{}` declared twice", entry.name),
            });
        }
    }
    if pos != bytes.len() {
        return Err(Error::Parse {
            offset: pos as u64,
            message: format!("{} trailing bytes after the last array", bytes.len() - pos),
        });
    }
    Ok(Container { manifest, arrays })
}

impl Container {
    fn get(&self, name: &str, rank: usize) -> Result<(&[usize], &[f64])> {
        let (shape, data) = self
            .arrays
            .get(name)
            .ok_or_else(|| Error::Config(format!("manifest references unknown array `{name}`")))?;
        if shape.len() != rank {
            return Err(Error::Shape {
                what: format!("rank of array `{name}`"),
                expected: rank,
                found: shape.len(),
            });
        }
        Ok((shape, data))
    }

    fn vector(&self, name: &str) -> Result<Array1<f64>> {
        Ok(Array1::from_vec(self.get(name, 1)?.1.to_vec()))
    }

    fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        let (s, d) = self.get(name, 2)?;
        Ok(Array2::from_shape_vec((s[0], s[1]), d.to_vec()).unwrap())
    }

    fn kernel(&self, name: &str) -> Result<Array4<f64>> {
        let (s, d) = self.get(name, 4)?;
        Ok(Array4::from_shape_vec((s[0], s[1], s[2], s[3]), d.to_vec()).unwrap())
    }

    /// Builds the validated network, folding batchnorm stages.
    pub fn to_network(&self) -> Result<Network> {
        let m = &self.manifest;
        let mut stages: Vec<Stage> = Vec::with_capacity(m.stages.len());
        for (k, entry) in m.stages.iter().enumerate() {
            let stage = match entry {
                StageEntry::Affine {
                    weight,
                    bias,
                    linear_output,
                    output_shape,
                } => Stage::Affine(Affine {
                    weight: self.matrix(weight)?,
                    bias: self.vector(bias)?,
                    linear_output: *linear_output,
                    output_shape: output_shape.map(|[c, h, w]| Shape::new(c, h, w)),
                }),
                StageEntry::Conv {
                    kernel,
                    bias,
                    stride,
                    padding,
                    linear_output,
                } => Stage::Conv(Conv {
                    kernel: self.kernel(kernel)?,
                    bias: self.vector(bias)?,
                    stride: *stride,
                    padding: *padding,
                    linear_output: *linear_output,
                }),
                StageEntry::Maxpool {
                    kernel,
                    stride,
                    padding,
                } => Stage::MaxPool(MaxPool {
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                }),
                StageEntry::Gate { layer } => Stage::Gate { layer: *layer },
                StageEntry::Batchnorm {
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                } => {
                    let bn = BatchNorm {
                        gamma: self.vector(gamma)?,
                        beta: self.vector(beta)?,
                        mean: self.vector(mean)?,
                        var: self.vector(var)?,
                        eps: *eps,
                    };
                    let prev = stages.pop().ok_or_else(|| {
                        Error::Config(format!(
                            "batchnorm at manifest stage {k} has no preceding stage"
                        ))
                    })?;
                    stages.push(fold_batchnorm(&prev, &bn)?);
                    continue;
                }
            };
            stages.push(stage);
        }
        let [c, h, w] = m.input_shape;
        let net = Network::new(stages, self.matrix(&m.heads)?, Shape::new(c, h, w))?;
        match &m.normalization {
            Some(n) => net.with_normalization(n.clone()),
            None => Ok(net),
        }
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<Network> {
    read_container(bytes)?.to_network()
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    decode_model(&fs::read(path)?)
}

/// Manifest and array list describing `net`, with arrays named by stage index.
pub fn describe(net: &Network, dtype: Dtype) -> (Manifest, Vec<Vec<f64>>) {
    let mut entries = Vec::new();
    let mut data = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, values: Vec<f64>| {
        entries.push(ArrayEntry {
            name: name.clone(),
            shape,
        });
        data.push(values);
        name
    };
    let mut stages = Vec::with_capacity(net.stages.len());
    for (k, stage) in net.stages.iter().enumerate() {
        stages.push(match stage {
            Stage::Affine(a) => StageEntry::Affine {
                weight: push(
                    format!("stage{k}.weight"),
                    a.weight.shape().to_vec(),
                    a.weight.iter().copied().collect(),
                ),
                bias: push(
                    format!("stage{k}.bias"),
                    vec![a.bias.len()],
                    a.bias.to_vec(),
                ),
                linear_output: a.linear_output,
                output_shape: a.output_shape.map(|s| [s.channels, s.height, s.width]),
            },
            Stage::Conv(c) => StageEntry::Conv {
                kernel: push(
                    format!("stage{k}.kernel"),
                    c.kernel.shape().to_vec(),
                    c.kernel.iter().copied().collect(),
                ),
                bias: push(
                    format!("stage{k}.bias"),
                    vec![c.bias.len()],
                    c.bias.to_vec(),
                ),
                stride: c.stride,
                padding: c.padding,
                linear_output: c.linear_output,
            },
            Stage::MaxPool(p) => StageEntry::Maxpool {
                kernel: p.kernel,
                stride: p.stride,
                padding: p.padding,
            },
            Stage::Gate { layer } => StageEntry::Gate { layer: *layer },
        });
    }
    let heads = push(
        "heads".into(),
        net.heads.shape().to_vec(),
        net.heads.iter().copied().collect(),
    );
    let s = net.input_shape;
    (
        Manifest {
            format_version: FORMAT_VERSION,
            dtype,
            input_shape: [s.channels, s.height, s.width],
            normalization: net.normalization.clone(),
            stages,
            heads,
            arrays: entries,
        },
        data,
    )
}

pub fn encode_model(net: &Network, dtype: Dtype) -> Result<Vec<u8>> {
    net.ensure_valid()?;
    let (manifest, data) = describe(net, dtype);
    let refs: Vec<&[f64]> = data.iter().map(|d| d.as_slice()).collect();
    write_container(&manifest, &refs)
}

pub fn save_model(net: &Network, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    fs::write(path, encode_model(net, dtype)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    fn one_neuron() -> Network {
        Network::dense(vec![(arr2(&[[2.0]]), arr1(&[-1.0]))], arr2(&[[3.0]])).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let net = one_neuron();
        let bytes = encode_model(&net, Dtype::F64).unwrap();
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(encode_model(&back, Dtype::F64).unwrap(), bytes);
    }

    #[test]
    fn truncated_payload_is_a_length_error() {
        let bytes = encode_model(&one_neuron(), Dtype::F64).unwrap();
        let err = decode_model(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(
            matches!(err, Error::PayloadLength { ref name, declared: 8, available: 5 } if name == "heads")
        );
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        assert!(matches!(
            decode_model(b"NOTAMODEL......."),
            Err(Error::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn json_error_offset_points_into_manifest() {
        let json = b"{\"format_version\": 1,\n  oops}";
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(json);
        match decode_model(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 16 + 24),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_stage_kind_is_named() {
        let (manifest, _) = describe(&one_neuron(), Dtype::F64);
        let mut value = serde_json::to_value(&manifest).unwrap();
        value["stages"] = serde_json::json!([{ "kind": "softplus" }]);
        let json = serde_json::to_vec(&value).unwrap();
        let mut raw = MAGIC.to_vec();
        raw.extend_from_slice(&(json.len() as u64).to_le_bytes());
        raw.extend_from_slice(&json);
        match read_container(&raw) {
            Err(Error::UnsupportedStage(kind)) => assert_eq!(kind, "softplus"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shape_product_must_match_payload() {
        let (mut manifest, data) = describe(&one_neuron(), Dtype::F64);
        let refs: Vec<&[f64]> = data.iter().map(|d| d.as_slice()).collect();
        manifest.arrays[0].shape = vec![1, 2];
        assert!(matches!(
            write_container(&manifest, &refs),
            Err(Error::ArrayShape { .. })
        ));
    }

    #[test]
    fn f32_container_quantizes() {
        let net = Network::dense(vec![(arr2(&[[0.1]]), arr1(&[0.2]))], arr2(&[[0.3]])).unwrap();
        let back = decode_model(&encode_model(&net, Dtype::F32).unwrap()).unwrap();
        assert_eq!(back.heads[[0, 0]], 0.3f32 as f64);
    }
}
