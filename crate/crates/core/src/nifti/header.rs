//! The 348-byte NIfTI-1 header: field offsets, parsing with endianness
//! detection, and canonical serialization.

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use super::NiftiError;

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const CANONICAL_VOX_OFFSET: usize = 352;

pub const MAGIC_SINGLE: [u8; 4] = *b"n+1\0";
pub const MAGIC_PAIR: [u8; 4] = *b"ni1\0";

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

const DESCRIP_LEN: usize = 80;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endianness {
    Little,
    Big,
}

/// Voxel storage types this reader accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(i16)]
pub enum DataType {
    UInt8 = 2,
    Int16 = 4,
    Float32 = 16,
    Float64 = 64,
}

impl DataType {
    pub fn from_code(code: i16) -> Result<Self, NiftiError> {
        match code {
            2 => Ok(Self::UInt8),
            4 => Ok(Self::Int16),
            16 => Ok(Self::Float32),
            64 => Ok(Self::Float64),
            _ => Err(NiftiError::UnsupportedDatatype { code }),
        }
    }

    pub fn code(self) -> i16 {
        self as i16
    }

    pub fn bitpix(self) -> i16 {
        match self {
            Self::UInt8 => 8,
            Self::Int16 => 16,
            Self::Float32 => 32,
            Self::Float64 => 64,
        }
    }

    pub fn size(self) -> usize {
        self.bitpix() as usize / 8
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::UInt8 => "uint8",
            Self::Int16 => "int16",
            Self::Float32 => "float32",
            Self::Float64 => "float64",
        }
    }
}

/// The header fields the pipeline consumes. Orientation fields are kept
/// for inspection but never applied.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: DataType,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub descrip: String,
    pub qform_code: i16,
    pub sform_code: i16,
    pub srow: [[f32; 4]; 3],
    pub magic: [u8; 4],
    pub endianness: Endianness,
}

impl NiftiHeader {
    /// Canonical header for a new file: little-endian, `vox_offset = 352`,
    /// identity intensity scaling, millimeter units.
    pub fn canonical(dims: &[usize], spacing: [f64; 3], datatype: DataType) -> Self {
        let mut dim = [1i16; 8];
        dim[0] = dims.len() as i16;
        for (i, &d) in dims.iter().enumerate() {
            dim[i + 1] = d as i16;
        }
        let mut pixdim = [1.0f32; 8];
        for i in 0..3 {
            pixdim[i + 1] = spacing[i] as f32;
        }
        let mut srow = [[0.0f32; 4]; 3];
        for i in 0..3 {
            srow[i][i] = spacing[i] as f32;
        }
        Self {
            dim,
            datatype,
            bitpix: datatype.bitpix(),
            pixdim,
            vox_offset: CANONICAL_VOX_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            // NIFTI_UNITS_MM
            xyzt_units: 2,
            descrip: String::new(),
            qform_code: 0,
            sform_code: 0,
            srow,
            magic: MAGIC_SINGLE,
            endianness: Endianness::Little,
        }
    }

    /// Number of used dimensions, `dim[0]`.
    pub fn ndim(&self) -> usize {
        self.dim[0] as usize
    }

    pub fn shape(&self) -> Vec<usize> {
        (1..=self.ndim()).map(|i| self.dim[i] as usize).collect()
    }

    pub fn voxel_count(&self) -> usize {
        self.shape().iter().product()
    }

    /// Spacing from `pixdim[1..=3]`.
    pub fn spacing(&self) -> [f64; 3] {
        [
            self.pixdim[1] as f64,
            self.pixdim[2] as f64,
            self.pixdim[3] as f64,
        ]
    }

    /// Scaling applies only when the slope is nonzero and finite.
    pub fn scaling(&self) -> Option<(f64, f64)> {
        if self.scl_slope != 0.0 && self.scl_slope.is_finite() {
            let inter = if self.scl_inter.is_finite() {
                self.scl_inter as f64
            } else {
                0.0
            };
            Some((self.scl_slope as f64, inter))
        } else {
            None
        }
    }

    pub fn data_offset(&self) -> usize {
        self.vox_offset as usize
    }

    pub fn data_len(&self) -> usize {
        self.voxel_count() * self.datatype.size()
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, NiftiError> {
        if bytes.len() < HEADER_SIZE {
            return Err(NiftiError::corrupt(
                "sizeof_hdr",
                format!("file holds {} bytes, header needs 348", bytes.len()),
            ));
        }
        let valid_ndim = |d: i16| (1..=7).contains(&d);
        let endianness = if valid_ndim(LittleEndian::read_i16(&bytes[offsets::DIM..])) {
            Endianness::Little
        } else if valid_ndim(BigEndian::read_i16(&bytes[offsets::DIM..])) {
            Endianness::Big
        } else {
            return Err(NiftiError::corrupt(
                "dim[0]",
                "not in 1..=7 under either byte order",
            ));
        };
        match endianness {
            Endianness::Little => parse_with::<LittleEndian>(bytes, endianness),
            Endianness::Big => parse_with::<BigEndian>(bytes, endianness),
        }
    }

    /// Serializes 348 header bytes followed by the zero extension flag.
    pub fn to_bytes(&self) -> Vec<u8> {
        match self.endianness {
            Endianness::Little => write_with::<LittleEndian>(self),
            Endianness::Big => write_with::<BigEndian>(self),
        }
    }
}

fn parse_with<E: ByteOrder>(bytes: &[u8], endianness: Endianness) -> Result<NiftiHeader, NiftiError> {
    let sizeof_hdr = E::read_i32(&bytes[offsets::SIZEOF_HDR..]);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(NiftiError::corrupt(
            "sizeof_hdr",
            format!("expected 348, found {sizeof_hdr}"),
        ));
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[offsets::MAGIC..offsets::MAGIC + 4]);
    if magic == MAGIC_PAIR {
        return Err(NiftiError::corrupt(
            "magic",
            "two-file (.hdr/.img) variant \"ni1\" is not supported",
        ));
    }
    if magic != MAGIC_SINGLE {
        return Err(NiftiError::corrupt(
            "magic",
            format!("expected \"n+1\\0\", found {magic:?}"),
        ));
    }

    let mut dim = [0i16; 8];
    E::read_i16_into(&bytes[offsets::DIM..offsets::DIM + 16], &mut dim);
    let ndim = dim[0];
    if !(3..=4).contains(&ndim) {
        return Err(NiftiError::mismatch(
            "dim[0]",
            format!("only 3D or 4D images are supported, found {ndim}"),
        ));
    }
    for (i, &d) in dim.iter().enumerate().take(ndim as usize + 1).skip(1) {
        if d < 1 {
            return Err(NiftiError::mismatch(
                dim_name(i),
                format!("must be at least 1, found {d}"),
            ));
        }
    }

    let datatype = DataType::from_code(E::read_i16(&bytes[offsets::DATATYPE..]))?;
    let bitpix = E::read_i16(&bytes[offsets::BITPIX..]);
    if bitpix != datatype.bitpix() {
        return Err(NiftiError::corrupt(
            "bitpix",
            format!(
                "{bitpix} does not match {} ({} bits)",
                datatype.name(),
                datatype.bitpix()
            ),
        ));
    }

    let mut pixdim = [0f32; 8];
    E::read_f32_into(&bytes[offsets::PIXDIM..offsets::PIXDIM + 32], &mut pixdim);
    for (i, &p) in pixdim.iter().enumerate().take(4).skip(1) {
        if !(p.is_finite() && p > 0.0) {
            return Err(NiftiError::corrupt(
                pixdim_name(i),
                format!("spacing must be positive and finite, found {p}"),
            ));
        }
    }

    let vox_offset = E::read_f32(&bytes[offsets::VOX_OFFSET..]);
    if !(vox_offset.is_finite() && vox_offset >= CANONICAL_VOX_OFFSET as f32) {
        return Err(NiftiError::corrupt(
            "vox_offset",
            format!("must be at least 352 for single-file images, found {vox_offset}"),
        ));
    }

    let descrip_raw = &bytes[offsets::DESCRIP..offsets::DESCRIP + DESCRIP_LEN];
    let end = descrip_raw.iter().position(|&b| b == 0).unwrap_or(DESCRIP_LEN);
    let descrip = String::from_utf8_lossy(&descrip_raw[..end]).into_owned();

    let mut srow = [[0f32; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        let at = offsets::SROW_X + 16 * r;
        E::read_f32_into(&bytes[at..at + 16], row);
    }

    Ok(NiftiHeader {
        dim,
        datatype,
        bitpix,
        pixdim,
        vox_offset,
        scl_slope: E::read_f32(&bytes[offsets::SCL_SLOPE..]),
        scl_inter: E::read_f32(&bytes[offsets::SCL_INTER..]),
        xyzt_units: bytes[offsets::XYZT_UNITS],
        descrip,
        qform_code: E::read_i16(&bytes[offsets::QFORM_CODE..]),
        sform_code: E::read_i16(&bytes[offsets::SFORM_CODE..]),
        srow,
        magic,
        endianness,
    })
}

fn write_with<E: ByteOrder>(h: &NiftiHeader) -> Vec<u8> {
    let mut buf = vec![0u8; CANONICAL_VOX_OFFSET];
    E::write_i32(&mut buf[offsets::SIZEOF_HDR..], HEADER_SIZE as i32);
    E::write_i16_into(&h.dim, &mut buf[offsets::DIM..offsets::DIM + 16]);
    E::write_i16(&mut buf[offsets::DATATYPE..], h.datatype.code());
    E::write_i16(&mut buf[offsets::BITPIX..], h.bitpix);
    E::write_f32_into(&h.pixdim, &mut buf[offsets::PIXDIM..offsets::PIXDIM + 32]);
    E::write_f32(&mut buf[offsets::VOX_OFFSET..], h.vox_offset);
    E::write_f32(&mut buf[offsets::SCL_SLOPE..], h.scl_slope);
    E::write_f32(&mut buf[offsets::SCL_INTER..], h.scl_inter);
    buf[offsets::XYZT_UNITS] = h.xyzt_units;
    let descrip = h.descrip.as_bytes();
    let n = descrip.len().min(DESCRIP_LEN - 1);
    buf[offsets::DESCRIP..offsets::DESCRIP + n].copy_from_slice(&descrip[..n]);
    E::write_i16(&mut buf[offsets::QFORM_CODE..], h.qform_code);
    E::write_i16(&mut buf[offsets::SFORM_CODE..], h.sform_code);
    for (r, row) in h.srow.iter().enumerate() {
        let at = offsets::SROW_X + 16 * r;
        E::write_f32_into(row, &mut buf[at..at + 16]);
    }
    buf[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(&h.magic);
    buf
}

fn dim_name(i: usize) -> &'static str {
    ["dim[0]", "dim[1]", "dim[2]", "dim[3]", "dim[4]", "dim[5]", "dim[6]", "dim[7]"][i]
}

fn pixdim_name(i: usize) -> &'static str {
    ["pixdim[0]", "pixdim[1]", "pixdim[2]", "pixdim[3]"][i]
}
