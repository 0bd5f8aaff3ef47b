//! Tensor and tile files: one JSON header line, then a raw payload.
//!
//! Tensor header: `{"dtype":"f16"|"f32","shape":[..],"layer":".."}`, payload
//! little-endian values in row-major order. Tile header carries the tile
//! shape and column exponents; the payload packs cell bits (LSB first within
//! each byte) row-major over physical columns, then sign bits row-major over
//! logical columns.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crossbar::{CrossbarTile, RowMask};
use crate::error::{Error, Result};
use crate::fpcodec::Fp16Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F16,
    F32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F16 => 2,
            Dtype::F32 => 4,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "f16" => Some(Dtype::F16),
            "f32" => Some(Dtype::F32),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tensor {
    pub values: Vec<Fp16Value>,
    pub shape: Vec<usize>,
    pub layer: Option<String>,
    /// Payload type of the file it was loaded from.
    pub dtype: Dtype,
}

impl Tensor {
    pub fn new(values: Vec<Fp16Value>) -> Self {
        let shape = vec![values.len()];
        Self {
            values,
            shape,
            layer: None,
            dtype: Dtype::F16,
        }
    }

    pub fn with_layer(mut self, layer: impl Into<String>) -> Self {
        self.layer = Some(layer.into());
        self
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHeader {
    dtype: String,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layer: Option<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn split_header<'a>(path: &Path, bytes: &'a [u8]) -> Result<(&'a [u8], &'a [u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: "no newline-terminated header line".into(),
        })?;
    Ok((&bytes[..nl], &bytes[nl + 1..]))
}

fn parse_header<T: for<'de> Deserialize<'de>>(path: &Path, line: &[u8]) -> Result<T> {
    serde_json::from_slice(line).map_err(|e| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn check_len(path: &Path, expected: Option<usize>, actual: usize) -> Result<()> {
    match expected {
        Some(expected) if expected == actual => Ok(()),
        Some(expected) => Err(Error::PayloadLength {
            path: path.to_path_buf(),
            expected,
            actual,
        }),
        None => Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: "shape overflows".into(),
        }),
    }
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (line, payload) = split_header(path, &bytes)?;
    let header: RawHeader = parse_header(path, line)?;
    let dtype = Dtype::parse(&header.dtype).ok_or_else(|| Error::UnknownDtype {
        path: path.to_path_buf(),
        dtype: header.dtype.clone(),
    })?;
    let count = header.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    check_len(path, count.and_then(|n| n.checked_mul(dtype.size())), payload.len())?;
    let values = match dtype {
        Dtype::F16 => payload
            .chunks_exact(2)
            .map(|c| Fp16Value::from_bits(u16::from_le_bytes([c[0], c[1]])))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| Fp16Value::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect(),
    };
    Ok(Tensor {
        values,
        shape: header.shape,
        layer: header.layer,
        dtype,
    })
}

fn encode_tensor(tensor: &Tensor, dtype: Dtype) -> Result<Vec<u8>> {
    let count = tensor.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    if count != Some(tensor.values.len()) {
        return Err(Error::config(format!(
            "shape {:?} does not hold {} values",
            tensor.shape,
            tensor.values.len()
        )));
    }
    let header = RawHeader {
        dtype: match dtype {
            Dtype::F16 => "f16".into(),
            Dtype::F32 => "f32".into(),
        },
        shape: tensor.shape.clone(),
        layer: tensor.layer.clone(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(tensor.values.len() * dtype.size());
    for v in &tensor.values {
        match dtype {
            Dtype::F16 => out.extend_from_slice(&v.to_bits().to_le_bytes()),
            Dtype::F32 => out.extend_from_slice(&v.to_f32().to_le_bytes()),
        }
    }
    Ok(out)
}

pub fn save_tensor(tensor: &Tensor, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(tensor, dtype)?;
    fs::write(path, bytes).map_err(io_err(path))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TileHeader {
    kind: String,
    rows: usize,
    cols: usize,
    w_s: u32,
    col_shared_exp: Vec<u8>,
}

const TILE_KIND: &str = "tile";

fn pack_bits(bits: impl Iterator<Item = bool>, out: &mut Vec<u8>) {
    let mut byte = 0u8;
    let mut n = 0;
    for b in bits {
        byte |= u8::from(b) << n;
        n += 1;
        if n == 8 {
            out.push(byte);
            byte = 0;
            n = 0;
        }
    }
    if n > 0 {
        out.push(byte);
    }
}

pub fn save_tile(tile: &CrossbarTile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = TileHeader {
        kind: TILE_KIND.into(),
        rows: tile.rows(),
        cols: tile.logical_cols(),
        w_s: tile.w_s(),
        col_shared_exp: tile.col_shared_exps().to_vec(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    let rows = tile.rows();
    let cells = tile.cells();
    let signs = tile.signs();
    let bits = (0..rows)
        .flat_map(|r| cells.iter().map(move |m| m.contains(r)))
        .chain((0..rows).flat_map(|r| signs.iter().map(move |m| m.contains(r))));
    pack_bits(bits, &mut out);
    fs::write(path, out).map_err(io_err(path))
}

pub fn load_tile(path: impl AsRef<Path>) -> Result<CrossbarTile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (line, payload) = split_header(path, &bytes)?;
    let h: TileHeader = parse_header(path, line)?;
    if h.kind != TILE_KIND {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("kind {:?} is not a tile", h.kind),
        });
    }
    let physical = h.cols.checked_mul(h.w_s as usize);
    let nbits = physical
        .and_then(|p| p.checked_add(h.cols))
        .and_then(|c| c.checked_mul(h.rows));
    check_len(path, nbits.map(|n| n.div_ceil(8)), payload.len())?;
    let physical = physical.unwrap_or(0);
    let bit = |i: usize| payload[i / 8] >> (i % 8) & 1 == 1;
    let mut cells = vec![RowMask::EMPTY; physical];
    let mut signs = vec![RowMask::EMPTY; h.cols];
    for r in 0..h.rows {
        for (c, m) in cells.iter_mut().enumerate() {
            if bit(r * physical + c) {
                m.insert(r);
            }
        }
        for (c, m) in signs.iter_mut().enumerate() {
            if bit(h.rows * physical + r * h.cols + c) {
                m.insert(r);
            }
        }
    }
    CrossbarTile::from_parts(h.rows, h.cols, h.w_s, cells, signs, h.col_shared_exp)
}
