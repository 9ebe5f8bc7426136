//! NIfTI-1 single-file I/O (`.nii`, `.nii.gz`) for volumes, label masks and
//! 4D probability maps.
//!
//! Reading accepts either byte order and gzip or plain files. Writing always
//! produces a canonical header (`vox_offset = 352`, `scl_slope = 1`,
//! `scl_inter = 0`). Orientation (qform/sform) is read but not applied.

mod header;

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

pub use header::{DataType, Endianness, NiftiHeader, CANONICAL_VOX_OFFSET, HEADER_SIZE};

use crate::types::{Dims, LabelMask, ProbabilityMap, Spacing, TypeError, Volume};

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("unsupported datatype code {code} (supported: 2, 4, 16, 64)")]
    UnsupportedDatatype { code: i16 },
    #[error("corrupt header field {field}: {reason}")]
    CorruptHeader { field: &'static str, reason: String },
    #[error("dimension mismatch in {field}: {reason}")]
    DimensionMismatch { field: &'static str, reason: String },
    #[error("I/O failure on {}: {source}", path.display())]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("value {value} at index {index} is not representable as {datatype}")]
    UnrepresentableValue {
        index: usize,
        value: f64,
        datatype: &'static str,
    },
    #[error("probabilities at voxel {voxel} sum to {sum}, expected 1 within 1e-3")]
    NotProbabilistic { voxel: usize, sum: f64 },
    #[error("label value {value} at index {index} is not an integer class below {num_classes}")]
    InvalidLabel {
        index: usize,
        value: f64,
        num_classes: usize,
    },
    #[error("invalid image content: {0}")]
    Content(#[source] TypeError),
}

impl NiftiError {
    pub(crate) fn corrupt(field: &'static str, reason: impl Into<String>) -> Self {
        Self::CorruptHeader {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn mismatch(field: &'static str, reason: impl Into<String>) -> Self {
        Self::DimensionMismatch {
            field,
            reason: reason.into(),
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::IoFailure {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<TypeError> for NiftiError {
    fn from(e: TypeError) -> Self {
        match e {
            TypeError::NotProbabilistic { voxel, sum } => Self::NotProbabilistic { voxel, sum },
            other => Self::Content(other),
        }
    }
}

/// A decoded image: header plus scaled voxel values in file order
/// (`x` fastest, then `y`, `z`, and the fourth axis slowest).
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    pub header: NiftiHeader,
    pub data: Vec<f64>,
}

impl NiftiImage {
    pub fn spatial_dims(&self) -> Result<Dims, NiftiError> {
        let s = self.header.shape();
        Dims::new(s[0], s[1], s[2]).map_err(NiftiError::from)
    }

    pub fn spacing(&self) -> Result<Spacing, NiftiError> {
        let [dx, dy, dz] = self.header.spacing();
        Spacing::new(dx, dy, dz).map_err(NiftiError::from)
    }

    /// Length of the fourth axis (1 for 3D images).
    pub fn channels(&self) -> usize {
        if self.header.ndim() == 4 {
            self.header.dim[4] as usize
        } else {
            1
        }
    }
}

/// Options for writing. Defaults: little-endian, clamp integers, gzip when
/// the path ends in `.gz`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteOptions {
    pub endianness: Endianness,
    pub clamp: bool,
    pub gzip: Option<bool>,
}

impl Default for WriteOptions {
    fn default() -> Self {
        Self {
            endianness: Endianness::Little,
            clamp: true,
            gzip: None,
        }
    }
}

fn is_gz_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

/// File name without `.nii` / `.nii.gz`.
pub fn stem(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    for suffix in [".nii.gz", ".nii", ".gz"] {
        if let Some(s) = name.strip_suffix(suffix) {
            return s.to_string();
        }
    }
    name
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, NiftiError> {
    let raw = fs::read(path).map_err(|e| NiftiError::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::with_capacity(raw.len() * 4);
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| NiftiError::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn write_bytes(path: &Path, bytes: &[u8], gzip: bool) -> Result<(), NiftiError> {
    let file = fs::File::create(path).map_err(|e| NiftiError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let result = if gzip {
        let mut enc = GzEncoder::new(&mut w, Compression::default());
        enc.write_all(bytes).and_then(|_| enc.finish().map(|_| ()))
    } else {
        w.write_all(bytes)
    };
    result
        .and_then(|_| w.flush())
        .map_err(|e| NiftiError::io(path, e))
}

/// Parses an uncompressed in-memory NIfTI-1 file.
pub fn decode(bytes: &[u8]) -> Result<NiftiImage, NiftiError> {
    let header = NiftiHeader::parse(bytes)?;
    let offset = header.data_offset();
    let len = header.data_len();
    let available = bytes.len().saturating_sub(offset);
    if available < len {
        return Err(NiftiError::mismatch(
            "data",
            format!(
                "dims require {len} bytes after vox_offset {offset}, file provides {available}"
            ),
        ));
    }
    let section = &bytes[offset..offset + len];
    let mut data = match header.endianness {
        Endianness::Little => decode_section::<LittleEndian>(section, header.datatype),
        Endianness::Big => decode_section::<BigEndian>(section, header.datatype),
    };
    if let Some((slope, inter)) = header.scaling() {
        if slope != 1.0 || inter != 0.0 {
            for v in &mut data {
                *v = *v * slope + inter;
            }
        }
    }
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(NiftiError::Content(TypeError::NonFinite { index }));
    }
    Ok(NiftiImage { header, data })
}

fn decode_section<E: ByteOrder>(section: &[u8], datatype: DataType) -> Vec<f64> {
    match datatype {
        DataType::UInt8 => section.iter().map(|&b| b as f64).collect(),
        DataType::Int16 => section.chunks_exact(2).map(|c| E::read_i16(c) as f64).collect(),
        DataType::Float32 => section.chunks_exact(4).map(|c| E::read_f32(c) as f64).collect(),
        DataType::Float64 => section.chunks_exact(8).map(E::read_f64).collect(),
    }
}

/// Serializes header and data. Integer types are rounded half-to-even and
/// clamped to their range unless `clamp` is off.
pub fn encode(
    header: &NiftiHeader,
    data: &[f64],
    clamp: bool,
) -> Result<Vec<u8>, NiftiError> {
    let mut bytes = header.to_bytes();
    bytes.resize(header.data_offset(), 0);
    bytes.reserve(header.data_len());
    match header.endianness {
        Endianness::Little => encode_section::<LittleEndian>(&mut bytes, data, header.datatype, clamp)?,
        Endianness::Big => encode_section::<BigEndian>(&mut bytes, data, header.datatype, clamp)?,
    }
    Ok(bytes)
}

fn to_integer(index: usize, value: f64, lo: f64, hi: f64, clamp: bool, name: &'static str) -> Result<f64, NiftiError> {
    let r = value.round_ties_even();
    if r < lo || r > hi {
        if clamp {
            return Ok(r.clamp(lo, hi));
        }
        return Err(NiftiError::UnrepresentableValue {
            index,
            value,
            datatype: name,
        });
    }
    Ok(r)
}

fn encode_section<E: ByteOrder>(
    out: &mut Vec<u8>,
    data: &[f64],
    datatype: DataType,
    clamp: bool,
) -> Result<(), NiftiError> {
    let mut buf = [0u8; 8];
    for (index, &value) in data.iter().enumerate() {
        match datatype {
            DataType::UInt8 => {
                let v = to_integer(index, value, 0.0, 255.0, clamp, "uint8")?;
                out.push(v as u8);
            }
            DataType::Int16 => {
                let v = to_integer(index, value, i16::MIN as f64, i16::MAX as f64, clamp, "int16")?;
                E::write_i16(&mut buf, v as i16);
                out.extend_from_slice(&buf[..2]);
            }
            DataType::Float32 => {
                let v = value as f32;
                if !v.is_finite() {
                    return Err(NiftiError::UnrepresentableValue {
                        index,
                        value,
                        datatype: "float32",
                    });
                }
                E::write_f32(&mut buf, v);
                out.extend_from_slice(&buf[..4]);
            }
            DataType::Float64 => {
                E::write_f64(&mut buf, value);
                out.extend_from_slice(&buf[..8]);
            }
        }
    }
    Ok(())
}

/// Reads a file into a [`NiftiImage`].
pub fn read_image(path: impl AsRef<Path>) -> Result<NiftiImage, NiftiError> {
    decode(&read_bytes(path.as_ref())?)
}

fn volume_from_image(image: NiftiImage, id: String) -> Result<Volume, NiftiError> {
    if image.channels() != 1 {
        return Err(NiftiError::mismatch(
            "dim[4]",
            format!("expected a single 3D volume, found {} channels", image.channels()),
        ));
    }
    let dims = image.spatial_dims()?;
    let spacing = image.spacing()?;
    Ok(Volume::new(id, dims, spacing, image.data)?)
}

/// Reads a 3D scalar volume; its id is the file stem.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume, NiftiError> {
    let path = path.as_ref();
    volume_from_image(read_image(path)?, stem(path))
}

pub fn write_volume(v: &Volume, datatype: DataType, path: impl AsRef<Path>) -> Result<(), NiftiError> {
    write_volume_with(v, datatype, path, WriteOptions::default())
}

pub fn write_volume_with(
    v: &Volume,
    datatype: DataType,
    path: impl AsRef<Path>,
    opts: WriteOptions,
) -> Result<(), NiftiError> {
    let path = path.as_ref();
    let mut header = NiftiHeader::canonical(&v.dims().0, v.spacing().as_array(), datatype);
    header.endianness = opts.endianness;
    let bytes = encode(&header, v.data(), opts.clamp)?;
    write_bytes(path, &bytes, opts.gzip.unwrap_or_else(|| is_gz_path(path)))
}

/// Reads an integer label image as a mask with `num_classes` classes.
pub fn read_label_mask(path: impl AsRef<Path>, num_classes: usize) -> Result<LabelMask, NiftiError> {
    let image = read_image(path)?;
    if image.channels() != 1 {
        return Err(NiftiError::mismatch(
            "dim[4]",
            format!("expected a single 3D label map, found {} channels", image.channels()),
        ));
    }
    let dims = image.spatial_dims()?;
    let mut labels = Vec::with_capacity(image.data.len());
    for (index, &value) in image.data.iter().enumerate() {
        if value.fract() != 0.0 || value < 0.0 || value >= num_classes.min(256) as f64 {
            return Err(NiftiError::InvalidLabel {
                index,
                value,
                num_classes,
            });
        }
        labels.push(value as u8);
    }
    Ok(LabelMask::new(dims, num_classes, labels)?)
}

/// Writes a mask as uint8.
pub fn write_label_mask(
    mask: &LabelMask,
    spacing: Spacing,
    path: impl AsRef<Path>,
) -> Result<(), NiftiError> {
    let path = path.as_ref();
    let header = NiftiHeader::canonical(&mask.dims().0, spacing.as_array(), DataType::UInt8);
    let mut bytes = header.to_bytes();
    bytes.extend_from_slice(mask.labels());
    write_bytes(path, &bytes, is_gz_path(path))
}

/// Reads a 4D float32 image with `dim[4] = C` as a probability map. The
/// source tag is taken from the header description field.
pub fn read_probability_map(path: impl AsRef<Path>) -> Result<ProbabilityMap, NiftiError> {
    let image = read_image(path)?;
    probability_map_from_image(image)
}

pub fn probability_map_from_image(image: NiftiImage) -> Result<ProbabilityMap, NiftiError> {
    if image.header.ndim() != 4 {
        return Err(NiftiError::mismatch(
            "dim[0]",
            format!("probability maps are 4D, found {}D", image.header.ndim()),
        ));
    }
    if image.header.datatype != DataType::Float32 {
        return Err(NiftiError::UnsupportedDatatype {
            code: image.header.datatype.code(),
        });
    }
    let dims = image.spatial_dims()?;
    let c = image.channels();
    let n = dims.len();
    // File order is channel-major; stored order is voxel-major.
    let mut probs = vec![0.0; n * c];
    for class in 0..c {
        for voxel in 0..n {
            probs[voxel * c + class] = image.data[class * n + voxel];
        }
    }
    Ok(ProbabilityMap::new(dims, c, probs, image.header.descrip.clone())?)
}

pub fn write_probability_map(p: &ProbabilityMap, path: impl AsRef<Path>) -> Result<(), NiftiError> {
    write_probability_map_with(p, Spacing::isotropic(), path, WriteOptions::default())
}

pub fn write_probability_map_with(
    p: &ProbabilityMap,
    spacing: Spacing,
    path: impl AsRef<Path>,
    opts: WriteOptions,
) -> Result<(), NiftiError> {
    let path = path.as_ref();
    let dims = p.dims();
    let c = p.num_classes();
    let n = dims.len();
    let mut header = NiftiHeader::canonical(
        &[dims.nx(), dims.ny(), dims.nz(), c],
        spacing.as_array(),
        DataType::Float32,
    );
    header.endianness = opts.endianness;
    header.descrip = p.source_tag().to_string();
    let mut data = vec![0.0; n * c];
    for voxel in 0..n {
        for class in 0..c {
            data[class * n + voxel] = p.probs()[voxel * c + class];
        }
    }
    let bytes = encode(&header, &data, opts.clamp)?;
    write_bytes(path, &bytes, opts.gzip.unwrap_or_else(|| is_gz_path(path)))
}
