//! The compressed container: quantized network parameters behind a lossless
//! byte-stream stage, with a self-describing header.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! offset size  field
//!      0    4  magic "NRVC"
//!      4    1  version (1)
//!      5    1  mode (0 = per-slice 2D, 1 = whole-volume 3D)
//!      6    1  variant code
//!      7    1  quantization (0 = f16, 1 = f32)
//!      8    1  lossless back-end (0 = stored, 1 = LZMA/xz, 2 = DEFLATE)
//!      9    4  omega0 f32
//!     13    1  in_dim u8
//!     14    1  hidden_layers u8
//!     15    2  hidden_units u16
//!     17    4  out_dim u32
//!     21   16  dims nx, ny, nz, m (u32 each)
//!     37   12  voxel size (f32 x 3)
//!     49   16  normalization min, max (f64 x 2)
//!     65    8  seed u64
//!     73    4  n_networks u32
//!     77    4  CRC-32 of the payload bytes
//!     81    8  payload length u64
//!     89    -  payload
//! ```
//!
//! The payload decompresses to one block per network (slice order), each
//! block holding layers in order with the weight matrix row-major followed by
//! the bias vector. Version 1 grids span [-1, 1] on every axis.

use std::io::{Read, Write};
use std::path::Path;

use half::f16;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{forward, NetworkParams, NetworkSpec, Variant};
use crate::sampling::{make_grid, scatter_slice, scatter_volume, GridMode};
use crate::volume::{Dims, NormBounds, Volume4D};

pub const MAGIC: [u8; 4] = *b"NRVC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 89;
const F16_MAX: f64 = 65504.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quantization {
    F16,
    F32,
}

impl Quantization {
    pub fn code(self) -> u8 {
        match self {
            Quantization::F16 => 0,
            Quantization::F32 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Quantization::F16),
            1 => Some(Quantization::F32),
            _ => None,
        }
    }

    pub fn bytes_per_param(self) -> usize {
        match self {
            Quantization::F16 => 2,
            Quantization::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LosslessBackend {
    Stored,
    Lzma,
    Deflate,
}

impl LosslessBackend {
    pub fn code(self) -> u8 {
        match self {
            LosslessBackend::Stored => 0,
            LosslessBackend::Lzma => 1,
            LosslessBackend::Deflate => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(LosslessBackend::Stored),
            1 => Some(LosslessBackend::Lzma),
            2 => Some(LosslessBackend::Deflate),
            _ => None,
        }
    }

    pub fn compress(self, raw: &[u8]) -> Vec<u8> {
        match self {
            LosslessBackend::Stored => raw.to_vec(),
            LosslessBackend::Lzma => {
                let mut enc = xz2::write::XzEncoder::new(Vec::new(), 9);
                enc.write_all(raw).expect("in-memory write");
                enc.finish().expect("in-memory write")
            }
            LosslessBackend::Deflate => {
                let mut enc =
                    flate2::write::DeflateEncoder::new(Vec::new(), flate2::Compression::best());
                enc.write_all(raw).expect("in-memory write");
                enc.finish().expect("in-memory write")
            }
        }
    }

    pub fn decompress(self, bytes: &[u8], expected_len: usize) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(expected_len);
        let res = match self {
            LosslessBackend::Stored => {
                out.extend_from_slice(bytes);
                Ok(0)
            }
            LosslessBackend::Lzma => xz2::read::XzDecoder::new(bytes).read_to_end(&mut out),
            LosslessBackend::Deflate => {
                flate2::read::DeflateDecoder::new(bytes).read_to_end(&mut out)
            }
        };
        res.map_err(|e| Error::Corruption(format!("lossless stage: {e}")))?;
        if out.len() != expected_len {
            return Err(Error::Corruption(format!(
                "payload decompressed to {} bytes, expected {expected_len}",
                out.len()
            )));
        }
        Ok(out)
    }
}

/// Serializes parameters in storage order at the requested precision.
pub fn quantize(params: &NetworkParams, code: Quantization) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(params.scalar_count() * code.bytes_per_param());
    for &v in params.iter() {
        if !v.is_finite() {
            return Err(Error::QuantizationOverflow { value: v });
        }
        match code {
            Quantization::F16 => {
                if v.abs() > F16_MAX {
                    return Err(Error::QuantizationOverflow { value: v });
                }
                out.extend_from_slice(&f16::from_f64(v).to_le_bytes());
            }
            Quantization::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
    Ok(out)
}

pub fn dequantize(bytes: &[u8], spec: &NetworkSpec, code: Quantization) -> Result<NetworkParams> {
    let flat: Vec<f64> = match code {
        Quantization::F16 => bytes
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f64())
            .collect(),
        Quantization::F32 => bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect(),
    };
    if !bytes.len().is_multiple_of(code.bytes_per_param()) {
        return Err(Error::Corruption(
            "parameter block is not a whole number of values".into(),
        ));
    }
    NetworkParams::from_flat(spec, &flat)
}

/// Everything besides the parameters that decode needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub version: u8,
    pub mode: GridMode,
    pub spec: NetworkSpec,
    pub dims: Dims,
    pub voxel_size: [f32; 3],
    pub norm_bounds: NormBounds,
    pub quantization: Quantization,
    pub backend: LosslessBackend,
    pub seed: u64,
    pub n_networks: u32,
}

impl ContainerHeader {
    pub fn raw_payload_len(&self) -> usize {
        self.spec.param_count() * self.quantization.bytes_per_param() * self.n_networks as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedArtifact {
    pub header: ContainerHeader,
    pub checksum: u32,
    /// Output of the lossless stage.
    pub payload: Vec<u8>,
}

/// Inputs to [`pack`] other than the parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PackMeta {
    pub mode: GridMode,
    pub spec: NetworkSpec,
    pub dims: Dims,
    pub voxel_size: [f64; 3],
    pub norm_bounds: NormBounds,
    pub seed: u64,
    pub quantization: Quantization,
    pub backend: LosslessBackend,
}

fn check_header_ranges(meta: &PackMeta) -> Result<()> {
    let s = &meta.spec;
    let fits = |v: usize, max: u64| v as u64 <= max;
    if !fits(s.in_dim, u8::MAX.into())
        || !fits(s.hidden_layers, u8::MAX.into())
        || !fits(s.hidden_units, u16::MAX.into())
        || !fits(s.out_dim, u32::MAX.into())
        || [meta.dims.nx, meta.dims.ny, meta.dims.nz, meta.dims.m]
            .iter()
            .any(|&d| !fits(d, u32::MAX.into()))
    {
        return Err(Error::Consistency(format!(
            "spec or dims exceed container field widths: {s:?}, {:?}",
            meta.dims
        )));
    }
    if f64::from(s.omega0 as f32) != s.omega0 {
        return Err(Error::Consistency(format!(
            "omega0 {} is not representable as f32",
            s.omega0
        )));
    }
    if s.in_dim != meta.mode.in_dim() || s.out_dim != meta.dims.m {
        return Err(Error::Consistency(format!(
            "spec {}->{} does not fit {:?} over {:?}",
            s.in_dim, s.out_dim, meta.mode, meta.dims
        )));
    }
    Ok(())
}

/// Quantizes every network and runs the concatenated blocks through the
/// lossless back-end.
pub fn pack(networks: &[NetworkParams], meta: &PackMeta) -> Result<CompressedArtifact> {
    meta.spec.validate()?;
    check_header_ranges(meta)?;
    let expected = meta.mode.n_networks(meta.dims);
    if networks.len() != expected {
        return Err(Error::Consistency(format!(
            "{:?} over {:?} needs {expected} networks, got {}",
            meta.mode,
            meta.dims,
            networks.len()
        )));
    }
    let mut raw = Vec::with_capacity(
        meta.spec.param_count() * meta.quantization.bytes_per_param() * networks.len(),
    );
    for (i, p) in networks.iter().enumerate() {
        if !p.matches(&meta.spec) {
            return Err(Error::Consistency(format!(
                "network {i} does not match the shared spec {:?}",
                meta.spec
            )));
        }
        raw.extend(quantize(p, meta.quantization)?);
    }
    let payload = meta.backend.compress(&raw);
    Ok(CompressedArtifact {
        header: ContainerHeader {
            version: VERSION,
            mode: meta.mode,
            spec: meta.spec,
            dims: meta.dims,
            voxel_size: meta.voxel_size.map(|v| v as f32),
            norm_bounds: meta.norm_bounds,
            quantization: meta.quantization,
            backend: meta.backend,
            seed: meta.seed,
            n_networks: networks.len() as u32,
        },
        checksum: crc32fast::hash(&payload),
        payload,
    })
}

impl CompressedArtifact {
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut b = Vec::with_capacity(HEADER_LEN + self.payload.len());
        b.extend_from_slice(&MAGIC);
        b.push(h.version);
        b.push(h.mode.code());
        b.push(h.spec.variant.code());
        b.push(h.quantization.code());
        b.push(h.backend.code());
        b.extend_from_slice(&(h.spec.omega0 as f32).to_le_bytes());
        b.push(h.spec.in_dim as u8);
        b.push(h.spec.hidden_layers as u8);
        b.extend_from_slice(&(h.spec.hidden_units as u16).to_le_bytes());
        b.extend_from_slice(&(h.spec.out_dim as u32).to_le_bytes());
        for d in [h.dims.nx, h.dims.ny, h.dims.nz, h.dims.m] {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in h.voxel_size {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&h.norm_bounds.min.to_le_bytes());
        b.extend_from_slice(&h.norm_bounds.max.to_le_bytes());
        b.extend_from_slice(&h.seed.to_le_bytes());
        b.extend_from_slice(&h.n_networks.to_le_bytes());
        b.extend_from_slice(&self.checksum.to_le_bytes());
        b.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        debug_assert_eq!(b.len(), HEADER_LEN);
        b.extend_from_slice(&self.payload);
        b
    }

    /// Parses and integrity-checks a container. The payload is not
    /// decompressed here.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || bytes[..4] != MAGIC {
            return Err(Error::Format("not an NRVC container (bad magic)".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {}",
                bytes[4]
            )));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Corruption(format!(
                "header truncated: {} of {HEADER_LEN} bytes",
                bytes.len()
            )));
        }
        let mut r = Cursor { bytes, pos: 5 };
        let mode = GridMode::from_code(r.u8())
            .ok_or_else(|| Error::Format(format!("unknown mode code {}", bytes[5])))?;
        let variant = Variant::from_code(r.u8())
            .ok_or_else(|| Error::Format(format!("unknown variant code {}", bytes[6])))?;
        let quantization = Quantization::from_code(r.u8())
            .ok_or_else(|| Error::Format(format!("unknown quantization code {}", bytes[7])))?;
        let backend = LosslessBackend::from_code(r.u8())
            .ok_or_else(|| Error::Format(format!("unknown back-end code {}", bytes[8])))?;
        let omega0 = f64::from(r.f32());
        let in_dim = r.u8() as usize;
        let hidden_layers = r.u8() as usize;
        let hidden_units = r.u16() as usize;
        let out_dim = r.u32() as usize;
        let dims = Dims::new(
            r.u32() as usize,
            r.u32() as usize,
            r.u32() as usize,
            r.u32() as usize,
        );
        let voxel_size = [r.f32(), r.f32(), r.f32()];
        let norm_bounds = NormBounds {
            min: r.f64(),
            max: r.f64(),
        };
        let seed = r.u64();
        let n_networks = r.u32();
        let checksum = r.u32();
        let payload_len = r.u64();
        let spec = NetworkSpec {
            in_dim,
            out_dim,
            hidden_layers,
            hidden_units,
            variant,
            omega0,
        };
        spec.validate().map_err(|e| Error::Format(e.to_string()))?;

        let rest = &bytes[HEADER_LEN..];
        if (rest.len() as u64) < payload_len {
            return Err(Error::Corruption(format!(
                "payload truncated: {} of {payload_len} bytes",
                rest.len()
            )));
        }
        if (rest.len() as u64) > payload_len {
            return Err(Error::Corruption(format!(
                "{} trailing bytes after payload",
                rest.len() as u64 - payload_len
            )));
        }
        if crc32fast::hash(rest) != checksum {
            return Err(Error::Corruption("payload checksum mismatch".into()));
        }
        Ok(Self {
            header: ContainerHeader {
                version: VERSION,
                mode,
                spec,
                dims,
                voxel_size,
                norm_bounds,
                quantization,
                backend,
                seed,
                n_networks,
            },
            checksum,
            payload: rest.to_vec(),
        })
    }

    pub fn byte_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.bytes[self.pos..self.pos + N].try_into().unwrap();
        self.pos += N;
        out
    }
    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }
    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

#[derive(Debug, Clone)]
pub struct Unpacked {
    pub header: ContainerHeader,
    pub networks: Vec<NetworkParams>,
}

/// Decompresses the payload and dequantizes every network block.
pub fn unpack(artifact: &CompressedArtifact) -> Result<Unpacked> {
    let h = &artifact.header;
    if h.n_networks as usize != h.mode.n_networks(h.dims) {
        return Err(Error::Corruption(format!(
            "{} networks recorded for {:?} over {:?}",
            h.n_networks, h.mode, h.dims
        )));
    }
    let raw = h
        .backend
        .decompress(&artifact.payload, h.raw_payload_len())?;
    let block = h.spec.param_count() * h.quantization.bytes_per_param();
    let networks = raw
        .chunks_exact(block)
        .map(|c| dequantize(c, &h.spec, h.quantization))
        .collect::<Result<Vec<_>>>()?;
    Ok(Unpacked {
        header: *h,
        networks,
    })
}

/// Reconstruction on the normalized scale, with the stored bounds attached.
pub fn decode_normalized(artifact: &CompressedArtifact) -> Result<Volume4D> {
    let Unpacked {
        header: h,
        networks,
    } = unpack(artifact)?;
    let d = h.dims;
    let grid = make_grid(d, h.mode);
    let outputs: Vec<Array2<f64>> = networks
        .par_iter()
        .map(|p| forward(&h.spec, p, grid.coords().view()))
        .collect::<Result<_>>()?;
    let voxel_size = h.voxel_size.map(f64::from);
    let mut v = Volume4D::zeros(d, voxel_size)?;
    match h.mode {
        GridMode::Slice2D => {
            for (z, out) in outputs.iter().enumerate() {
                scatter_slice(&mut v, z, out)?;
            }
        }
        GridMode::Volume3D => scatter_volume(&mut v, &outputs[0])?,
    }
    v.norm_bounds = Some(h.norm_bounds);
    Ok(v)
}

/// Reconstruction in native units.
pub fn decode(artifact: &CompressedArtifact) -> Result<Volume4D> {
    decode_normalized(artifact).map(|v| v.denormalize())
}

pub fn compression_ratio(original_bytes: u64, artifact_bytes: u64) -> Result<f64> {
    if original_bytes == 0 || artifact_bytes == 0 {
        return Err(Error::Domain(format!(
            "sizes must be positive: {original_bytes} / {artifact_bytes}"
        )));
    }
    Ok(original_bytes as f64 / artifact_bytes as f64)
}
