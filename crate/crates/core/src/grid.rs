//! Dense 3D grids and the `LVOL1` container format.
//!
//! Layout is row-major with x fastest: `index = x + nx * (y + ny * z)`.
//! A file is the 5-byte magic `LVOL1`, a little-endian `u32` header length,
//! a compact JSON header and the raw little-endian payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseErrorKind, Result};

pub const MAGIC: &[u8; 5] = b"LVOL1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::InvalidDims([nx, ny, nz]));
        }
        Ok(Self { nx, ny, nz })
    }

    pub fn cube(n: usize) -> Result<Self> {
        Self::new(n, n, n)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn min_extent(&self) -> usize {
        self.nx.min(self.ny).min(self.nz)
    }

    /// Linear index of `(x, y, z)`, checked against every axis.
    pub fn linear_index(&self, x: usize, y: usize, z: usize) -> Result<usize> {
        for (axis, value, extent) in [('x', x, self.nx), ('y', y, self.ny), ('z', z, self.nz)] {
            if value >= extent {
                return Err(Error::OutOfBounds {
                    axis,
                    value,
                    extent,
                });
            }
        }
        Ok(self.index_unchecked(x, y, z))
    }

    #[inline]
    pub fn index_unchecked(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let x = index % self.nx;
        let rest = index / self.nx;
        (x, rest % self.ny, rest / self.ny)
    }

    pub(crate) fn ensure_same(&self, other: &Dims) -> Result<()> {
        if self != other {
            return Err(Error::DimsMismatch {
                left: self.as_array(),
                right: other.as_array(),
            });
        }
        Ok(())
    }
}

/// Free-function form of [`Dims::linear_index`].
pub fn linear_index(dims: Dims, x: usize, y: usize, z: usize) -> Result<usize> {
    dims.linear_index(x, y, z)
}

/// A dense f32 scalar field: intensities, probabilities or weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::ShapeMismatch {
                expected: dims.len(),
                found: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: Dims, value: f32) -> Self {
        Self {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> Result<f32> {
        Ok(self.data[self.dims.linear_index(x, y, z)?])
    }
}

/// A binary mask with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    dims: Dims,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::ShapeMismatch {
                expected: dims.len(),
                found: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|&v| v > 1) {
            return Err(Error::InvalidMaskValue {
                index,
                value: data[index],
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![0; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize) -> bool) -> Self {
        let data = (0..dims.len()).map(|i| f(i) as u8).collect();
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

/// Either payload type of an `LVOL1` file.
#[derive(Debug, Clone, PartialEq)]
pub enum Grid {
    F32(Volume),
    U8(Mask),
}

impl Grid {
    pub fn dims(&self) -> Dims {
        match self {
            Grid::F32(v) => v.dims(),
            Grid::U8(m) => m.dims(),
        }
    }

    fn dtype(&self) -> &'static str {
        match self {
            Grid::F32(_) => "f32",
            Grid::U8(_) => "u8",
        }
    }
}

impl From<Volume> for Grid {
    fn from(v: Volume) -> Self {
        Grid::F32(v)
    }
}

impl From<Mask> for Grid {
    fn from(m: Mask) -> Self {
        Grid::U8(m)
    }
}

#[derive(Debug, Deserialize)]
struct Header {
    dims: [usize; 3],
    dtype: String,
    order: String,
}

fn header_json(dims: Dims, dtype: &str) -> String {
    format!(
        r#"{{"dims":[{},{},{}],"dtype":"{}","order":"x-fastest"}}"#,
        dims.nx, dims.ny, dims.nz, dtype
    )
}

/// Serializes a grid to the in-memory `LVOL1` byte layout.
pub fn encode(grid: &Grid) -> Result<Vec<u8>> {
    let dims = grid.dims();
    let payload_len = match grid {
        Grid::F32(v) => v.data.len(),
        Grid::U8(m) => m.data.len(),
    };
    if dims.len() != payload_len {
        return Err(Error::ShapeMismatch {
            expected: dims.len(),
            found: payload_len,
        });
    }
    let header = header_json(dims, grid.dtype());
    let elem = if matches!(grid, Grid::F32(_)) { 4 } else { 1 };
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + payload_len * elem);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    match grid {
        Grid::F32(v) => {
            for x in &v.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Grid::U8(m) => out.extend_from_slice(&m.data),
    }
    Ok(out)
}

fn parse_err(offset: usize, kind: ParseErrorKind) -> Error {
    Error::Parse { offset, kind }
}

/// Parses `LVOL1` bytes.
pub fn decode(bytes: &[u8]) -> Result<Grid> {
    if bytes.len() < MAGIC.len() {
        return Err(parse_err(bytes.len(), ParseErrorKind::Truncated));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(parse_err(0, ParseErrorKind::BadMagic));
    }
    let mut pos = MAGIC.len();
    let len_bytes: [u8; 4] = bytes
        .get(pos..pos + 4)
        .ok_or_else(|| parse_err(bytes.len(), ParseErrorKind::Truncated))?
        .try_into()
        .expect("slice of length 4");
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    pos += 4;
    let header_bytes = bytes
        .get(pos..pos + header_len)
        .ok_or_else(|| parse_err(bytes.len(), ParseErrorKind::Truncated))?;
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| parse_err(pos, ParseErrorKind::BadHeader(e.to_string())))?;
    if header.order != "x-fastest" {
        return Err(parse_err(
            pos,
            ParseErrorKind::BadHeader(format!("unsupported order {:?}", header.order)),
        ));
    }
    let [nx, ny, nz] = header.dims;
    let dims = Dims::new(nx, ny, nz)
        .map_err(|e| parse_err(pos, ParseErrorKind::BadHeader(e.to_string())))?;
    pos += header_len;
    let payload = &bytes[pos..];
    let n = dims.len();
    match header.dtype.as_str() {
        "f32" => {
            let need = n * 4;
            if payload.len() < need {
                return Err(parse_err(bytes.len(), ParseErrorKind::Truncated));
            }
            if payload.len() > need {
                return Err(parse_err(pos + need, ParseErrorKind::TrailingBytes));
            }
            let mut data = Vec::with_capacity(n);
            for (i, chunk) in payload.chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
                if !v.is_finite() {
                    return Err(parse_err(pos + 4 * i, ParseErrorKind::NonFinite));
                }
                data.push(v);
            }
            Ok(Grid::F32(Volume { dims, data }))
        }
        "u8" => {
            if payload.len() < n {
                return Err(parse_err(bytes.len(), ParseErrorKind::Truncated));
            }
            if payload.len() > n {
                return Err(parse_err(pos + n, ParseErrorKind::TrailingBytes));
            }
            if let Some(i) = payload.iter().position(|&v| v > 1) {
                return Err(parse_err(
                    pos + i,
                    ParseErrorKind::InvalidMaskValue(payload[i]),
                ));
            }
            Ok(Grid::U8(Mask {
                dims,
                data: payload.to_vec(),
            }))
        }
        other => Err(parse_err(
            pos - header_len,
            ParseErrorKind::BadHeader(format!("unknown dtype {other:?}")),
        )),
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Reads a file that must hold an f32 volume.
pub fn read_f32(path: impl AsRef<Path>) -> Result<Volume> {
    match read_volume(path)? {
        Grid::F32(v) => Ok(v),
        Grid::U8(_) => Err(parse_err(
            MAGIC.len() + 4,
            ParseErrorKind::DtypeMismatch {
                expected: "f32",
                found: "u8".into(),
            },
        )),
    }
}

/// Reads a file that must hold a u8 mask.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    match read_volume(path)? {
        Grid::U8(m) => Ok(m),
        Grid::F32(_) => Err(parse_err(
            MAGIC.len() + 4,
            ParseErrorKind::DtypeMismatch {
                expected: "u8",
                found: "f32".into(),
            },
        )),
    }
}

pub fn write_volume(path: impl AsRef<Path>, grid: &Grid) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(grid)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
