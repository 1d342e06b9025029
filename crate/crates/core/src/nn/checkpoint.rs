//! Checkpoint container:
//!
//! ```text
//! magic   8 bytes  "ALBSEQCK"
//! hlen    u32 LE   length of the JSON header in bytes
//! header  hlen     UTF-8 JSON (format_version, hyperparameters, scaler,
//!                  training metadata, block names and shapes)
//! blocks           f32 LE values of every parameter block, declared order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::model::{Hyperparams, OrderingModel, TrainingMeta};
use super::params::{ParamBlock, ParamStore};
use crate::error::{Error, Result};
use crate::ingest::FeatureScaler;

pub const MAGIC: &[u8; 8] = b"ALBSEQCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct BlockShape {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    hyperparams: Hyperparams,
    scaler: FeatureScaler,
    meta: TrainingMeta,
    blocks: Vec<BlockShape>,
}

pub fn to_bytes(model: &OrderingModel) -> Result<Vec<u8>> {
    let header = Header {
        format_version: FORMAT_VERSION,
        hyperparams: *model.hyper(),
        scaler: model.scaler.clone(),
        meta: model.meta.clone(),
        blocks: model
            .params
            .blocks
            .iter()
            .map(|b| BlockShape {
                name: b.name.clone(),
                rows: b.value.rows,
                cols: b.value.cols,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let hlen = u32::try_from(json.len())
        .map_err(|_| Error::Checkpoint("header larger than 4 GiB".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + model.params.scalar_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&hlen.to_le_bytes());
    out.extend_from_slice(&json);
    for b in &model.params.blocks {
        for &v in &b.value.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<OrderingModel> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(
            "not a checkpoint (bad magic bytes)".into(),
        ));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let data = &body[hlen..];
    let expected: usize = header.blocks.iter().map(|b| b.rows * b.cols * 4).sum();
    if data.len() != expected {
        return Err(Error::Checkpoint(format!(
            "parameter section has {} bytes, header declares {expected}",
            data.len()
        )));
    }
    let mut offset = 0;
    let mut store = ParamStore::default();
    for shape in header.blocks {
        let n = shape.rows * shape.cols;
        let values = data[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        offset += 4 * n;
        store.blocks.push(ParamBlock {
            name: shape.name,
            value: Matrix::from_vec(shape.rows, shape.cols, values),
        });
    }
    OrderingModel::from_parts(header.hyperparams, store, header.scaler, header.meta)
}

pub fn save_checkpoint(model: &OrderingModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<OrderingModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
