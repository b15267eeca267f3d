//! Single-file NIfTI-1 (`.nii`) reader and writer.
//!
//! Only little-endian, rank-3 volumes are accepted. Orientation fields are
//! parsed but only `pixdim[1..=3]` is kept; every input volume is assumed to
//! already live in a common template space.

use thiserror::Error;

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const DATA_OFFSET: usize = 352;
pub const MAGIC: [u8; 4] = *b"n+1\0";

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_INT32: i16 = 8;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;

const NIFTI_UNITS_MM: u8 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NiftiError {
    #[error("bad magic {0:?}, expected \"n+1\\0\"")]
    BadMagic([u8; 4]),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated data: need {expected} bytes, got {actual}")]
    TruncatedData { expected: usize, actual: usize },
    #[error("unsupported rank {0}, only 3-D volumes are accepted")]
    UnsupportedRank(i16),
    #[error("big-endian NIfTI files are not supported")]
    BigEndian,
    #[error("sizeof_hdr is {0}, expected 348")]
    BadHeaderSize(i32),
    #[error("invalid dimensions {0:?}")]
    InvalidDims([i16; 3]),
    #[error("invalid voxel spacing {0:?}")]
    InvalidSpacing([f32; 3]),
    #[error("vox_offset {0} lies inside the header")]
    BadVoxOffset(f32),
    #[error("label value {value} at voxel {index} is not an integer")]
    NonIntegerLabel { index: usize, value: f64 },
    #[error("label value {value} at voxel {index} is negative")]
    NegativeLabel { index: usize, value: f64 },
    #[error("data length {actual} does not match dims {dims:?}")]
    LengthMismatch { dims: [usize; 3], actual: usize },
}

/// The subset of the 348-byte header this crate interprets.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub sizeof_hdr: i32,
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    pub magic: [u8; 4],
}

impl NiftiHeader {
    pub fn parse(bytes: &[u8]) -> Result<Self, NiftiError> {
        if bytes.len() < HEADER_SIZE {
            return Err(NiftiError::TruncatedData {
                expected: HEADER_SIZE,
                actual: bytes.len(),
            });
        }
        let sizeof_hdr = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
        if sizeof_hdr != HEADER_SIZE as i32 {
            if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
                return Err(NiftiError::BigEndian);
            }
            return Err(NiftiError::BadHeaderSize(sizeof_hdr));
        }
        let magic: [u8; 4] = bytes[344..348].try_into().unwrap();
        if magic != MAGIC {
            return Err(NiftiError::BadMagic(magic));
        }
        let mut dim = [0i16; 8];
        for (i, d) in dim.iter_mut().enumerate() {
            *d = read_i16(bytes, 40 + 2 * i);
        }
        let mut pixdim = [0f32; 8];
        for (i, p) in pixdim.iter_mut().enumerate() {
            *p = read_f32(bytes, 76 + 4 * i);
        }
        Ok(Self {
            sizeof_hdr,
            dim,
            datatype: read_i16(bytes, 70),
            bitpix: read_i16(bytes, 72),
            pixdim,
            vox_offset: read_f32(bytes, 108),
            scl_slope: read_f32(bytes, 112),
            scl_inter: read_f32(bytes, 116),
            qform_code: read_i16(bytes, 252),
            sform_code: read_i16(bytes, 254),
            magic,
        })
    }

    fn validate(&self) -> Result<(), NiftiError> {
        if self.dim[0] != 3 {
            return Err(NiftiError::UnsupportedRank(self.dim[0]));
        }
        let d = [self.dim[1], self.dim[2], self.dim[3]];
        if d.iter().any(|&v| v < 1) {
            return Err(NiftiError::InvalidDims(d));
        }
        let s = [self.pixdim[1], self.pixdim[2], self.pixdim[3]];
        if s.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(NiftiError::InvalidSpacing(s));
        }
        bytes_per_voxel(self.datatype)?;
        if !(self.vox_offset.is_finite() && self.vox_offset >= HEADER_SIZE as f32) {
            return Err(NiftiError::BadVoxOffset(self.vox_offset));
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        [
            self.dim[1] as usize,
            self.dim[2] as usize,
            self.dim[3] as usize,
        ]
    }

    pub fn spacing(&self) -> [f64; 3] {
        [
            self.pixdim[1] as f64,
            self.pixdim[2] as f64,
            self.pixdim[3] as f64,
        ]
    }

    /// `(slope, inter)` after applying the "slope 0 means identity" rule.
    pub fn rescale(&self) -> (f64, f64) {
        if self.scl_slope == 0.0 || !self.scl_slope.is_finite() {
            (1.0, 0.0)
        } else {
            let inter = if self.scl_inter.is_finite() {
                self.scl_inter
            } else {
                0.0
            };
            (self.scl_slope as f64, inter as f64)
        }
    }
}

fn read_i16(b: &[u8], at: usize) -> i16 {
    i16::from_le_bytes([b[at], b[at + 1]])
}

fn read_f32(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn bytes_per_voxel(datatype: i16) -> Result<usize, NiftiError> {
    match datatype {
        DT_UINT8 => Ok(1),
        DT_INT16 => Ok(2),
        DT_INT32 | DT_FLOAT32 => Ok(4),
        DT_FLOAT64 => Ok(8),
        other => Err(NiftiError::UnsupportedDatatype(other)),
    }
}

/// A dense scalar grid, x varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<f64>,
}

impl Volume3D {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f64>) -> Result<Self, NiftiError> {
        check_grid(dims, spacing, data.len())?;
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: f64) -> Result<Self, NiftiError> {
        Self::new(dims, spacing, vec![value; dims.iter().product()])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn same_grid(&self, other: &Volume3D) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }
}

/// Integer label map; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub labels: Vec<u32>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], labels: Vec<u32>) -> Result<Self, NiftiError> {
        check_grid(dims, spacing, labels.len())?;
        Ok(Self {
            dims,
            spacing,
            labels,
        })
    }

    pub fn to_volume(&self) -> Volume3D {
        Volume3D {
            dims: self.dims,
            spacing: self.spacing,
            data: self.labels.iter().map(|&l| l as f64).collect(),
        }
    }
}

fn check_grid(dims: [usize; 3], spacing: [f64; 3], len: usize) -> Result<(), NiftiError> {
    if dims.iter().any(|&d| d == 0 || d > i16::MAX as usize) {
        let clamp = |d: usize| d.min(i16::MAX as usize) as i16;
        return Err(NiftiError::InvalidDims([
            clamp(dims[0]),
            clamp(dims[1]),
            clamp(dims[2]),
        ]));
    }
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(NiftiError::InvalidSpacing(spacing.map(|s| s as f32)));
    }
    if len != dims.iter().product::<usize>() {
        return Err(NiftiError::LengthMismatch { dims, actual: len });
    }
    Ok(())
}

/// Parses a complete single-file NIfTI-1 payload into real-valued voxels,
/// applying `scl_slope`/`scl_inter` when the slope is non-zero.
pub fn read_volume(bytes: &[u8]) -> Result<Volume3D, NiftiError> {
    let header = NiftiHeader::parse(bytes)?;
    header.validate()?;
    let dims = header.dims();
    let n: usize = dims.iter().product();
    let bpv = bytes_per_voxel(header.datatype)?;
    let start = header.vox_offset as usize;
    // absurd headers can overflow; report them as unsatisfiable lengths
    let expected = n
        .checked_mul(bpv)
        .and_then(|b| b.checked_add(start))
        .unwrap_or(usize::MAX);
    if bytes.len() < expected {
        return Err(NiftiError::TruncatedData {
            expected,
            actual: bytes.len(),
        });
    }
    let raw = &bytes[start..expected];
    let mut data: Vec<f64> = match header.datatype {
        DT_UINT8 => raw.iter().map(|&b| b as f64).collect(),
        DT_INT16 => raw
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        DT_INT32 => raw
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DT_FLOAT32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DT_FLOAT64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        other => return Err(NiftiError::UnsupportedDatatype(other)),
    };
    let (slope, inter) = header.rescale();
    if (slope, inter) != (1.0, 0.0) {
        for v in &mut data {
            *v = slope * *v + inter;
        }
    }
    Volume3D::new(dims, header.spacing(), data)
}

/// Reads a segmentation; every voxel must hold a non-negative integer after
/// rescaling (tolerance 1e-6).
pub fn read_labels(bytes: &[u8]) -> Result<LabelVolume, NiftiError> {
    let vol = read_volume(bytes)?;
    let mut labels = Vec::with_capacity(vol.data.len());
    for (index, &value) in vol.data.iter().enumerate() {
        let rounded = value.round();
        if !value.is_finite() || (value - rounded).abs() > 1e-6 {
            return Err(NiftiError::NonIntegerLabel { index, value });
        }
        if rounded < 0.0 {
            return Err(NiftiError::NegativeLabel { index, value });
        }
        labels.push(rounded as u32);
    }
    LabelVolume::new(vol.dims, vol.spacing, labels)
}

/// Emits a float32 (`16`) or float64 (`64`) single-file image with
/// `vox_offset = 352` and no intensity rescale.
pub fn write_volume(vol: &Volume3D, datatype: i16) -> Result<Vec<u8>, NiftiError> {
    let bitpix: i16 = match datatype {
        DT_FLOAT32 => 32,
        DT_FLOAT64 => 64,
        other => return Err(NiftiError::UnsupportedDatatype(other)),
    };
    check_grid(vol.dims, vol.spacing, vol.data.len())?;
    let bpv = bitpix as usize / 8;
    let mut out = vec![0u8; DATA_OFFSET + vol.data.len() * bpv];
    write_header(&mut out, vol.dims, vol.spacing, datatype, bitpix);
    let body = &mut out[DATA_OFFSET..];
    match datatype {
        DT_FLOAT32 => {
            for (chunk, &v) in body.chunks_exact_mut(4).zip(&vol.data) {
                chunk.copy_from_slice(&(v as f32).to_le_bytes());
            }
        }
        _ => {
            for (chunk, &v) in body.chunks_exact_mut(8).zip(&vol.data) {
                chunk.copy_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Label maps are written as int32 so they round-trip through `read_labels`.
pub fn write_labels(labels: &LabelVolume) -> Result<Vec<u8>, NiftiError> {
    check_grid(labels.dims, labels.spacing, labels.labels.len())?;
    let mut out = vec![0u8; DATA_OFFSET + labels.labels.len() * 4];
    write_header(&mut out, labels.dims, labels.spacing, DT_INT32, 32);
    for (chunk, &l) in out[DATA_OFFSET..].chunks_exact_mut(4).zip(&labels.labels) {
        chunk.copy_from_slice(&(l as i32).to_le_bytes());
    }
    Ok(out)
}

fn write_header(out: &mut [u8], dims: [usize; 3], spacing: [f64; 3], datatype: i16, bitpix: i16) {
    let put_i16 =
        |out: &mut [u8], at: usize, v: i16| out[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 =
        |out: &mut [u8], at: usize, v: f32| out[at..at + 4].copy_from_slice(&v.to_le_bytes());

    out[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let dim: [i16; 8] = [
        3,
        dims[0] as i16,
        dims[1] as i16,
        dims[2] as i16,
        1,
        1,
        1,
        1,
    ];
    for (i, &d) in dim.iter().enumerate() {
        put_i16(out, 40 + 2 * i, d);
    }
    put_i16(out, 70, datatype);
    put_i16(out, 72, bitpix);
    let pixdim: [f32; 8] = [
        1.0,
        spacing[0] as f32,
        spacing[1] as f32,
        spacing[2] as f32,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    for (i, &p) in pixdim.iter().enumerate() {
        put_f32(out, 76 + 4 * i, p);
    }
    put_f32(out, 108, DATA_OFFSET as f32);
    // scl_slope / scl_inter stay zero: no rescale.
    out[123] = NIFTI_UNITS_MM;
    let descrip = b"wmage";
    out[148..148 + descrip.len()].copy_from_slice(descrip);
    // sform: scaled identity so viewers show the right voxel size.
    put_i16(out, 254, 1);
    put_f32(out, 280, spacing[0] as f32);
    put_f32(out, 296 + 4, spacing[1] as f32);
    put_f32(out, 312 + 8, spacing[2] as f32);
    out[344..348].copy_from_slice(&MAGIC);
}
