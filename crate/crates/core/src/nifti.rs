//! Minimal NIfTI-1 single-file reader/writer.
//!
//! Supports little-endian `.nii` and `.nii.gz` images with 3 or 4 dimensions
//! stored as int16 or float32. Header bytes that the codec does not interpret
//! (orientation, description, intent, ...) are kept verbatim and written back.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{Dims, Volume4D};

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const DEFAULT_VOX_OFFSET: usize = 352;

const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

mod offset {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const MAGIC: usize = 344;
}

/// Raw header of the file a volume was read from.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiMeta {
    pub(crate) header: Vec<u8>,
    pub(crate) datatype: i16,
}

impl NiftiMeta {
    pub fn header_bytes(&self) -> &[u8] {
        &self.header
    }

    fn bytes_per_sample(&self) -> usize {
        match self.datatype {
            DT_INT16 => 2,
            _ => 4,
        }
    }
}

fn read_i16(b: &[u8], at: usize) -> i16 {
    i16::from_le_bytes([b[at], b[at + 1]])
}

fn read_i32(b: &[u8], at: usize) -> i32 {
    i32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn read_f32(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn put_i16(b: &mut [u8], at: usize, v: i16) {
    b[at..at + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(b: &mut [u8], at: usize, v: i32) {
    b[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(b: &mut [u8], at: usize, v: f32) {
    b[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

pub fn read_nifti(path: &Path) -> Result<Volume4D> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if is_gzip(&raw) {
        raw = gunzip(&raw).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    decode_nifti(&raw)
}

fn gunzip(raw: &[u8]) -> std::result::Result<Vec<u8>, String> {
    let mut out = Vec::new();
    MultiGzDecoder::new(raw)
        .read_to_end(&mut out)
        .map_err(|e| format!("bad gzip stream: {e}"))?;
    Ok(out)
}

/// Parses an in-memory NIfTI-1 file, gzip-wrapped or not.
pub fn decode_nifti(bytes: &[u8]) -> Result<Volume4D> {
    if is_gzip(bytes) {
        return decode_nifti(&gunzip(bytes).map_err(Error::Format)?);
    }
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Format(format!(
            "{} bytes is shorter than a NIfTI-1 header",
            bytes.len()
        )));
    }
    let hdr = &bytes[..HEADER_SIZE];
    match read_i32(hdr, offset::SIZEOF_HDR) {
        348 => {}
        v if v.swap_bytes() == 348 => {
            return Err(Error::Unsupported("big-endian NIfTI".into()));
        }
        v => return Err(Error::Format(format!("sizeof_hdr is {v}, expected 348"))),
    }
    match &hdr[offset::MAGIC..offset::MAGIC + 4] {
        b"n+1\0" => {}
        b"ni1\0" => return Err(Error::Unsupported("two-file (.hdr/.img) NIfTI".into())),
        m => return Err(Error::Format(format!("bad magic {m:?}"))),
    }

    let ndim = read_i16(hdr, offset::DIM);
    if !(3..=4).contains(&ndim) {
        return Err(Error::Unsupported(format!("{ndim}-dimensional image")));
    }
    let mut extent = [1usize; 4];
    for (k, e) in extent.iter_mut().enumerate().take(ndim as usize) {
        let d = read_i16(hdr, offset::DIM + 2 * (k + 1));
        if d < 1 {
            return Err(Error::Format(format!("dim[{}] = {d}", k + 1)));
        }
        *e = d as usize;
    }
    let dims = Dims::new(extent[0], extent[1], extent[2], extent[3]);

    let datatype = read_i16(hdr, offset::DATATYPE);
    let width = match datatype {
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(Error::Unsupported(format!("NIfTI datatype code {other}"))),
    };

    let vox_offset = read_f32(hdr, offset::VOX_OFFSET);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::Format(format!("vox_offset {vox_offset}")));
    }
    let start = vox_offset as usize;
    let end = start + dims.len() * width;
    if bytes.len() < end {
        return Err(Error::Format(format!(
            "image data truncated: need {end} bytes, have {}",
            bytes.len()
        )));
    }
    let body = &bytes[start..end];

    let slope = read_f32(hdr, offset::SCL_SLOPE);
    let inter = read_f32(hdr, offset::SCL_INTER);
    let (slope, inter) = if slope == 0.0 || !slope.is_finite() {
        (1.0, 0.0)
    } else {
        (
            f64::from(slope),
            if inter.is_finite() {
                f64::from(inter)
            } else {
                0.0
            },
        )
    };

    let data: Vec<f64> = match datatype {
        DT_INT16 => body
            .chunks_exact(2)
            .map(|c| f64::from(i16::from_le_bytes([c[0], c[1]])) * slope + inter)
            .collect(),
        _ => body
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())) * slope + inter)
            .collect(),
    };

    let voxel_size = [1, 2, 3].map(|k| f64::from(read_f32(hdr, offset::PIXDIM + 4 * k)).abs());
    let mut v = Volume4D::new(dims, voxel_size, data)?;
    v.nifti = Some(NiftiMeta {
        header: hdr.to_vec(),
        datatype,
    });
    Ok(v)
}

/// Serializes as float32 NIfTI-1, reusing the source header when available.
pub fn encode_nifti(v: &Volume4D) -> Vec<u8> {
    let dims = v.dims();
    let mut hdr = match &v.nifti {
        Some(meta) => meta.header.clone(),
        None => fresh_header(),
    };
    let ndim: i16 = if dims.m > 1 { 4 } else { 3 };
    put_i16(&mut hdr, offset::DIM, ndim);
    for (k, n) in [dims.nx, dims.ny, dims.nz, dims.m].into_iter().enumerate() {
        put_i16(&mut hdr, offset::DIM + 2 * (k + 1), n as i16);
    }
    for k in 5..8 {
        put_i16(&mut hdr, offset::DIM + 2 * k, 1);
    }
    put_i16(&mut hdr, offset::DATATYPE, DT_FLOAT32);
    put_i16(&mut hdr, offset::BITPIX, 32);
    for (k, s) in v.voxel_size.iter().enumerate() {
        put_f32(&mut hdr, offset::PIXDIM + 4 * (k + 1), *s as f32);
    }
    put_f32(&mut hdr, offset::VOX_OFFSET, DEFAULT_VOX_OFFSET as f32);
    put_f32(&mut hdr, offset::SCL_SLOPE, 1.0);
    put_f32(&mut hdr, offset::SCL_INTER, 0.0);
    hdr[offset::MAGIC..offset::MAGIC + 4].copy_from_slice(b"n+1\0");

    let mut out = Vec::with_capacity(DEFAULT_VOX_OFFSET + 4 * dims.len());
    out.extend_from_slice(&hdr);
    out.extend_from_slice(&[0u8; 4]);
    for &s in v.data() {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    out
}

fn fresh_header() -> Vec<u8> {
    let mut hdr = vec![0u8; HEADER_SIZE];
    put_i32(&mut hdr, offset::SIZEOF_HDR, HEADER_SIZE as i32);
    // qfac
    put_f32(&mut hdr, offset::PIXDIM, 1.0);
    put_f32(&mut hdr, offset::PIXDIM + 16, 1.0);
    // mm + seconds
    hdr[offset::XYZT_UNITS] = 2 | 8;
    hdr
}

/// Writes float32 NIfTI-1; a `.gz` extension selects gzip wrapping.
pub fn write_nifti(v: &Volume4D, path: &Path) -> Result<()> {
    let bytes = encode_nifti(v);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let gz = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("gz"));
    let res = if gz {
        let mut enc = GzEncoder::new(w, Compression::default());
        enc.write_all(&bytes)
            .and_then(|_| enc.finish())
            .and_then(|mut w| w.flush())
    } else {
        w.write_all(&bytes).and_then(|_| w.flush())
    };
    res.map_err(|e| Error::io(path, e))
}

/// Size of `v` as an uncompressed single-file NIfTI in its source datatype
/// (float32 when the volume was not read from disk).
pub fn uncompressed_nifti_size(v: &Volume4D) -> u64 {
    let width = v.nifti.as_ref().map_or(4, NiftiMeta::bytes_per_sample);
    let offset = v.nifti.as_ref().map_or(DEFAULT_VOX_OFFSET, |m| {
        read_f32(&m.header, offset::VOX_OFFSET) as usize
    });
    (offset + width * v.dims().len()) as u64
}
