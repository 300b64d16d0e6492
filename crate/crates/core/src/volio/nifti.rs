//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) subset: 3D images stored as
//! uint8, int16 or float32, identity orientation in the sform.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{BinaryMask3D, ConfidenceMap, Dims, Grid3, Volume3D};
use crate::error::{Error, Result};

pub const NIFTI1_HEADER_SIZE: usize = 348;
pub const NIFTI1_VOX_OFFSET: usize = 352;
pub const NIFTI1_MAGIC: &[u8; 4] = b"n+1\0";

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_CAL_MAX: usize = 124;
const OFF_CAL_MIN: usize = 128;
const OFF_DESCRIP: usize = 148;
const OFF_QFORM_CODE: usize = 252;
const OFF_SFORM_CODE: usize = 254;
const OFF_SROW_X: usize = 280;
const OFF_MAGIC: usize = 344;

const UNITS_MM: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiDatatype {
    Uint8,
    Int16,
    Float32,
}

impl NiftiDatatype {
    fn code(self) -> i16 {
        match self {
            NiftiDatatype::Uint8 => 2,
            NiftiDatatype::Int16 => 4,
            NiftiDatatype::Float32 => 16,
        }
    }

    fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(NiftiDatatype::Uint8),
            4 => Some(NiftiDatatype::Int16),
            16 => Some(NiftiDatatype::Float32),
            _ => None,
        }
    }

    fn bytes(self) -> usize {
        match self {
            NiftiDatatype::Uint8 => 1,
            NiftiDatatype::Int16 => 2,
            NiftiDatatype::Float32 => 4,
        }
    }
}

/// Decoded image with scaling already applied.
#[derive(Debug, Clone)]
pub struct NiftiData {
    pub dims: Dims,
    pub spacing: [f32; 3],
    pub datatype: NiftiDatatype,
    pub cal_max: f32,
    pub values: Vec<f32>,
}

struct HeaderReader<'a> {
    buf: &'a [u8],
    big_endian: bool,
}

impl HeaderReader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.buf[off], self.buf[off + 1]];
        if self.big_endian { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }
    }

    fn f32(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.buf[off..off + 4].try_into().unwrap();
        if self.big_endian { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) }
    }
}

fn is_gz_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses a NIfTI-1 byte stream (already decompressed).
pub(crate) fn decode(bytes: &[u8]) -> Result<NiftiData> {
    if bytes.len() < NIFTI1_HEADER_SIZE {
        return Err(Error::Format(format!("file too short for a header ({} bytes)", bytes.len())));
    }
    let size_le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let size_be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let big_endian = match (size_le, size_be) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(Error::Format(format!("sizeof_hdr is {size_le}, expected 348"))),
    };
    if &bytes[OFF_MAGIC..OFF_MAGIC + 4] != NIFTI1_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[OFF_MAGIC..OFF_MAGIC + 4])));
    }
    let h = HeaderReader { buf: bytes, big_endian };

    let ndim = h.i16(OFF_DIM);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Format(format!("dim[0] = {ndim} out of range")));
    }
    let dim: Vec<i64> = (1..=7).map(|i| h.i16(OFF_DIM + 2 * i) as i64).collect();
    if ndim < 3 || dim[3..ndim as usize].iter().any(|&d| d != 1) {
        return Err(Error::Unsupported(format!("only 3D images are supported (dim[0] = {ndim})")));
    }
    if dim[..3].iter().any(|&d| d <= 0) {
        return Err(Error::Format(format!("nonpositive extent in {:?}", &dim[..3])));
    }
    let dims = [dim[0] as usize, dim[1] as usize, dim[2] as usize];

    let code = h.i16(OFF_DATATYPE);
    let datatype = NiftiDatatype::from_code(code)
        .ok_or_else(|| Error::Unsupported(format!("datatype code {code}")))?;

    let spacing = [1, 2, 3].map(|i| {
        let p = h.f32(OFF_PIXDIM + 4 * i).abs();
        if p.is_finite() && p > 0.0 { p } else { 1.0 }
    });

    let vox_offset = h.f32(OFF_VOX_OFFSET);
    if !(vox_offset >= NIFTI1_VOX_OFFSET as f32) {
        return Err(Error::Format(format!("vox_offset {vox_offset} < 352")));
    }
    let vox_offset = vox_offset as usize;

    let slope = h.f32(OFF_SCL_SLOPE);
    let inter = h.f32(OFF_SCL_INTER);
    let scaled = slope != 0.0 && slope.is_finite();
    let inter = if scaled && inter.is_finite() { inter } else { 0.0 };

    let n = dims[0] * dims[1] * dims[2];
    let need = vox_offset + n * datatype.bytes();
    if bytes.len() < need {
        return Err(Error::Format(format!("truncated data: need {need} bytes, have {}", bytes.len())));
    }
    let payload = &bytes[vox_offset..need];
    let mut values: Vec<f32> = match datatype {
        NiftiDatatype::Uint8 => payload.iter().map(|&b| b as f32).collect(),
        NiftiDatatype::Int16 => payload
            .chunks_exact(2)
            .map(|c| {
                let b = [c[0], c[1]];
                (if big_endian { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }) as f32
            })
            .collect(),
        NiftiDatatype::Float32 => payload
            .chunks_exact(4)
            .map(|c| {
                let b = [c[0], c[1], c[2], c[3]];
                if big_endian { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) }
            })
            .collect(),
    };
    // the identity scaling is skipped so float payloads (-0.0, NaN bits) survive exactly
    if scaled && (slope != 1.0 || inter != 0.0) {
        for v in &mut values {
            *v = *v * slope + inter;
        }
    }
    Ok(NiftiData { dims, spacing, datatype, cal_max: h.f32(OFF_CAL_MAX), values })
}

/// Reads a NIfTI-1 file; `.gz` content is detected by its magic bytes.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiData> {
    decode(&read_all(path.as_ref())?)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let d = read_nifti(path)?;
    Grid3::with_spacing(d.dims, d.spacing, d.values)
}

/// Reads a mask and checks that every voxel is 0 or 1.
pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask3D> {
    let d = read_nifti(path)?;
    let mut data = Vec::with_capacity(d.values.len());
    for (i, &v) in d.values.iter().enumerate() {
        data.push(match v {
            0.0 => false,
            1.0 => true,
            _ => return Err(Error::Format(format!("mask value {v} at voxel {i} is not 0 or 1"))),
        });
    }
    Grid3::with_spacing(d.dims, d.spacing, data)
}

/// Reads a confidence map; the vote count is stored in `cal_max`.
pub fn read_confidence(path: impl AsRef<Path>) -> Result<ConfidenceMap> {
    let d = read_nifti(path)?;
    if d.datatype != NiftiDatatype::Uint8 {
        return Err(Error::Format("confidence maps are stored as uint8".into()));
    }
    let n_votes = d.cal_max;
    if !(n_votes >= 1.0 && n_votes <= 255.0 && n_votes.fract() == 0.0) {
        return Err(Error::Format(format!("cal_max {n_votes} is not a valid vote count")));
    }
    let counts = Grid3::with_spacing(d.dims, d.spacing, d.values.iter().map(|&v| v as u16).collect())?;
    ConfidenceMap::from_counts(counts, n_votes as u16)
}

/// Builds the 348-byte header plus the 4-byte empty extension block.
pub(crate) fn encode_header(
    dims: Dims,
    spacing: [f32; 3],
    datatype: NiftiDatatype,
    cal: (f32, f32),
    descrip: &str,
) -> Vec<u8> {
    let mut h = vec![0u8; NIFTI1_VOX_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    h[0..4].copy_from_slice(&(NIFTI1_HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    let dim: [i16; 8] = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        put_i16(&mut h, OFF_DIM + 2 * i, *d);
    }
    put_i16(&mut h, OFF_DATATYPE, datatype.code());
    put_i16(&mut h, OFF_BITPIX, (datatype.bytes() * 8) as i16);
    let pixdim = [1.0, spacing[0], spacing[1], spacing[2], 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        put_f32(&mut h, OFF_PIXDIM + 4 * i, *p);
    }
    put_f32(&mut h, OFF_VOX_OFFSET, NIFTI1_VOX_OFFSET as f32);
    put_f32(&mut h, OFF_SCL_SLOPE, 1.0);
    put_f32(&mut h, OFF_SCL_INTER, 0.0);
    h[OFF_XYZT_UNITS] = UNITS_MM;
    put_f32(&mut h, OFF_CAL_MAX, cal.1);
    put_f32(&mut h, OFF_CAL_MIN, cal.0);
    let d = descrip.as_bytes();
    let n = d.len().min(79);
    h[OFF_DESCRIP..OFF_DESCRIP + n].copy_from_slice(&d[..n]);
    put_i16(&mut h, OFF_QFORM_CODE, 0);
    put_i16(&mut h, OFF_SFORM_CODE, 1);
    for row in 0..3 {
        put_f32(&mut h, OFF_SROW_X + 16 * row + 4 * row, spacing[row]);
    }
    h[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(NIFTI1_MAGIC);
    h
}

fn write_bytes(path: &Path, header: &[u8], payload: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Param(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        if is_gz_path(path) {
            let mut gz = GzEncoder::new(w, Compression::fast());
            gz.write_all(header)?;
            gz.write_all(payload)?;
            w = gz.finish()?;
        } else {
            w.write_all(header)?;
            w.write_all(payload)?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes a float32 volume; gzip-compressed when the path ends in `.gz`.
pub fn write_volume(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let (lo, hi) = vol
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let header = encode_header(vol.dims(), vol.spacing(), NiftiDatatype::Float32, (lo, hi), "volume");
    let payload: Vec<u8> = vol.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_bytes(path.as_ref(), &header, &payload)
}

pub fn write_mask(mask: &BinaryMask3D, path: impl AsRef<Path>) -> Result<()> {
    let header = encode_header(mask.dims(), mask.spacing(), NiftiDatatype::Uint8, (0.0, 1.0), "binary mask");
    let payload: Vec<u8> = mask.data().iter().map(|&b| b as u8).collect();
    write_bytes(path.as_ref(), &header, &payload)
}

pub fn write_confidence(conf: &ConfidenceMap, path: impl AsRef<Path>) -> Result<()> {
    let n = conf.n_votes();
    if n > 255 {
        return Err(Error::Param(format!("{n} votes do not fit a uint8 confidence map")));
    }
    let header = encode_header(
        conf.dims(),
        conf.counts().spacing(),
        NiftiDatatype::Uint8,
        (0.0, n as f32),
        &format!("confidence map n_votes={n}"),
    );
    let payload: Vec<u8> = conf.counts().data().iter().map(|&c| c as u8).collect();
    write_bytes(path.as_ref(), &header, &payload)
}
