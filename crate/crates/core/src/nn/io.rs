//! Model file format.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "ATTRIBM\0"
//! 8       4     format version, u32 little-endian (currently 1)
//! 12      4     header length N, u32 little-endian
//! 16      N     UTF-8 JSON header:
//!               {"name", "dtype": "f32"|"f64", "input_shape": [c, h, w],
//!                "class_names": [...], "layers": [{"kind": ..., ...}, ...]}
//! 16+N    ...   for every parameterized layer in declaration order: the
//!               weight tensor then the bias tensor, row-major, little-endian
//!               floats of the header's dtype (4 bytes for f32, 8 for f64)
//! ```
//!
//! Nothing may follow the last blob.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerSpec, ModelGraph, Params};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"ATTRIBM\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    name: String,
    dtype: Precision,
    input_shape: [usize; 3],
    class_names: Vec<String>,
    layers: Vec<LayerSpec>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::ModelFormat(msg.into())
}

/// Serializes a model in its own precision.
pub fn write_model<T: Scalar>(model: &ModelGraph<T>) -> Vec<u8> {
    let header = Header {
        name: model.name().to_string(),
        dtype: T::PRECISION,
        input_shape: model.input_shape(),
        class_names: model.class_names().to_vec(),
        layers: model.layers().to_vec(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out =
        Vec::with_capacity(16 + json.len() + model.parameter_count() * T::PRECISION.byte_width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params().iter().flatten() {
        for &v in p.weight.data().iter().chain(p.bias.data()) {
            v.write_le(&mut out);
        }
    }
    out
}

fn read_u32(bytes: &[u8], at: usize, field: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| bad(format!("file truncated in {field}")))
}

fn read_blob<S: Scalar, T: Scalar>(
    bytes: &[u8],
    pos: &mut usize,
    shape: &[usize],
    what: &str,
) -> Result<Tensor<T>> {
    let width = S::PRECISION.byte_width();
    let n: usize = shape.iter().product();
    let end = *pos + n * width;
    let slice = bytes.get(*pos..end).ok_or_else(|| {
        bad(format!(
            "{what}: file truncated ({} of {} bytes)",
            bytes.len().saturating_sub(*pos),
            n * width
        ))
    })?;
    *pos = end;
    let data = slice
        .chunks_exact(width)
        .map(|c| T::of(S::read_le(c).as_f64()))
        .collect();
    Tensor::new(shape.to_vec(), data).map_err(|e| bad(format!("{what}: {e}")))
}

/// Parses a model, converting weights to `T` when the file holds the other
/// precision.
pub fn read_model<T: Scalar>(bytes: &[u8]) -> Result<ModelGraph<T>> {
    if bytes.get(..8) != Some(&MAGIC[..]) {
        return Err(bad("magic: not a model file"));
    }
    let version = read_u32(bytes, 8, "version")?;
    if version != FORMAT_VERSION {
        return Err(bad(format!(
            "version: unsupported format version {version}"
        )));
    }
    let header_len = read_u32(bytes, 12, "header length")? as usize;
    let json = bytes
        .get(16..16 + header_len)
        .ok_or_else(|| bad("header: file truncated"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
    let mut pos = 16 + header_len;
    let mut params = Vec::with_capacity(header.layers.len());
    for (i, layer) in header.layers.iter().enumerate() {
        params.push(match layer.param_shapes() {
            None => None,
            Some((ws, bs)) => {
                let (w, b) = match header.dtype {
                    Precision::F32 => (
                        read_blob::<f32, T>(
                            bytes,
                            &mut pos,
                            &ws,
                            &format!("weights of layer {i}"),
                        )?,
                        read_blob::<f32, T>(bytes, &mut pos, &bs, &format!("bias of layer {i}"))?,
                    ),
                    Precision::F64 => (
                        read_blob::<f64, T>(
                            bytes,
                            &mut pos,
                            &ws,
                            &format!("weights of layer {i}"),
                        )?,
                        read_blob::<f64, T>(bytes, &mut pos, &bs, &format!("bias of layer {i}"))?,
                    ),
                };
                Some(Params { weight: w, bias: b })
            }
        });
    }
    if pos != bytes.len() {
        return Err(bad(format!(
            "trailing data: {} unexpected bytes",
            bytes.len() - pos
        )));
    }
    ModelGraph::new(
        header.name,
        header.input_shape,
        header.class_names,
        header.layers,
        params,
    )
    .map_err(|e| bad(format!("layers: {e}")))
}

pub fn save_model<T: Scalar>(model: &ModelGraph<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelGraph<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_model(&bytes)
}

/// Precision recorded in a model file's header.
pub fn model_precision(bytes: &[u8]) -> Result<Precision> {
    let header_len = read_u32(bytes, 12, "header length")? as usize;
    let json = bytes
        .get(16..16 + header_len)
        .ok_or_else(|| bad("header: file truncated"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
    Ok(header.dtype)
}
