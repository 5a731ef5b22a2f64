//! Binary field files.
//!
//! Layout (all little-endian):
//!
//! | offset | size | content                                  |
//! |--------|------|------------------------------------------|
//! | 0      | 4    | magic `RFSF`                             |
//! | 4      | 4    | format version (u32, currently 1)        |
//! | 8      | 4    | kind (u32): 1 = scalar, 2 = vector       |
//! | 12     | 4    | nx (u32)                                 |
//! | 16     | 4    | ny (u32)                                 |
//! | 20     | 8    | dx (f64)                                 |
//! | 28     | 8    | dy (f64)                                 |
//! | 36     | 28   | reserved, zero                           |
//! | 64     | ...  | f32 payload, row-major, x fastest        |
//!
//! Vector fields store the easting block followed by the northing block.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fields::{Grid, ScalarField, VectorField};

pub const MAGIC: &[u8; 4] = b"RFSF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 64;

const KIND_SCALAR: u32 = 1;
const KIND_VECTOR: u32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Field {
    Scalar(ScalarField),
    Vector(VectorField),
}

impl Field {
    pub fn grid(&self) -> &Grid {
        match self {
            Field::Scalar(f) => f.grid(),
            Field::Vector(f) => f.grid(),
        }
    }

    pub fn into_scalar(self) -> Result<ScalarField> {
        match self {
            Field::Scalar(f) => Ok(f),
            Field::Vector(_) => Err(Error::shape("expected a scalar field, found a vector field")),
        }
    }

    pub fn into_vector(self) -> Result<VectorField> {
        match self {
            Field::Vector(f) => Ok(f),
            Field::Scalar(_) => Err(Error::shape("expected a vector field, found a scalar field")),
        }
    }
}

impl From<ScalarField> for Field {
    fn from(f: ScalarField) -> Self {
        Field::Scalar(f)
    }
}

impl From<VectorField> for Field {
    fn from(f: VectorField) -> Self {
        Field::Vector(f)
    }
}

fn header(kind: u32, grid: &Grid) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[0..4].copy_from_slice(MAGIC);
    h[4..8].copy_from_slice(&VERSION.to_le_bytes());
    h[8..12].copy_from_slice(&kind.to_le_bytes());
    h[12..16].copy_from_slice(&(grid.nx as u32).to_le_bytes());
    h[16..20].copy_from_slice(&(grid.ny as u32).to_le_bytes());
    h[20..28].copy_from_slice(&grid.dx.to_le_bytes());
    h[28..36].copy_from_slice(&grid.dy.to_le_bytes());
    h
}

pub fn encode(field: &Field) -> Vec<u8> {
    let (kind, grid, blocks): (u32, &Grid, Vec<&[f64]>) = match field {
        Field::Scalar(f) => (KIND_SCALAR, f.grid(), vec![f.values()]),
        Field::Vector(f) => (KIND_VECTOR, f.grid(), vec![f.easting(), f.northing()]),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * grid.len() * blocks.len());
    out.extend_from_slice(&header(kind, grid));
    for block in blocks {
        for v in block {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], origin: &str) -> Result<Field> {
    let corrupt = |reason: String| Error::CorruptFile { path: origin.to_string(), reason };
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let kind = u32_at(8);
    let grid = Grid::new(u32_at(12) as usize, u32_at(16) as usize, f64_at(20), f64_at(28))
        .map_err(|e| corrupt(format!("bad grid in header: {e}")))?;
    let blocks = match kind {
        KIND_SCALAR => 1,
        KIND_VECTOR => 2,
        k => return Err(corrupt(format!("unknown kind {k}"))),
    };
    let expected = HEADER_LEN + 4 * blocks * grid.len();
    if bytes.len() != expected {
        return Err(corrupt(format!(
            "payload length mismatch: header implies {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let bad = |e: Error| corrupt(e.to_string());
    match kind {
        KIND_SCALAR => Ok(Field::Scalar(ScalarField::new(grid, values).map_err(bad)?)),
        _ => {
            let n = grid.len();
            let northing = values[n..].to_vec();
            let mut easting = values;
            easting.truncate(n);
            Ok(Field::Vector(VectorField::new(grid, easting, northing).map_err(bad)?))
        }
    }
}

/// Writes via a temporary sibling and rename so readers never observe a
/// partially written file.
pub fn write_field(path: impl AsRef<Path>, field: &Field) -> Result<()> {
    write_atomic(path.as_ref(), &encode(field))
}

pub fn read_field(path: impl AsRef<Path>) -> Result<Field> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode(&bytes, &path.display().to_string())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
