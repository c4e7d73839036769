use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nrvc_core::codec::{LosslessBackend, Quantization};
use nrvc_core::{GridMode, Variant};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "nrvc",
    version,
    about = "Neural-representation codec for diffusion MRI volumes"
)]
pub struct Cli {
    /// Worker threads for slice-parallel work (0 = all cores).
    #[arg(long, global = true, env = "NRVC_JOBS", default_value_t = 0)]
    pub jobs: usize,

    /// Manifest path; defaults to `<primary output>.manifest.json`.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit networks to a 4D NIfTI volume and write a compressed container.
    Encode(EncodeArgs),
    /// Reconstruct a NIfTI volume from a container.
    Decode(DecodeArgs),
    /// Image-fidelity report of a reconstruction against its ground truth.
    Metrics(MetricsArgs),
    /// Tensor and SH relative-error table of a reconstruction.
    EvalDwi(EvalDwiArgs),
    /// Write a synthetic phantom with its scheme, mask and ground-truth maps.
    Phantom(PhantomArgs),
    /// Gaussian-smoothing reference baseline.
    Smooth(SmoothArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    #[value(name = "2d")]
    #[serde(rename = "2d")]
    TwoD,
    #[value(name = "3d")]
    #[serde(rename = "3d")]
    ThreeD,
}

impl From<ModeArg> for GridMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::TwoD => GridMode::Slice2D,
            ModeArg::ThreeD => GridMode::Volume3D,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantArg {
    Siren,
    SirenRelu,
    MlpRelu,
    MlpTanh,
    MlpSiren,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Siren => Variant::SirenPure,
            VariantArg::SirenRelu => Variant::SirenReluLast,
            VariantArg::MlpRelu => Variant::MlpRelu,
            VariantArg::MlpTanh => Variant::MlpTanh,
            VariantArg::MlpSiren => Variant::HybridSirenFirst,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantArg {
    F16,
    F32,
}

impl From<QuantArg> for Quantization {
    fn from(q: QuantArg) -> Self {
        match q {
            QuantArg::F16 => Quantization::F16,
            QuantArg::F32 => Quantization::F32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendArg {
    Lzma,
    Deflate,
    Stored,
}

impl From<BackendArg> for LosslessBackend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Lzma => LosslessBackend::Lzma,
            BackendArg::Deflate => LosslessBackend::Deflate,
            BackendArg::Stored => LosslessBackend::Stored,
        }
    }
}

fn positive_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be a positive number, got {s}"))
    }
}

fn non_negative_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be >= 0, got {s}"))
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EncodeArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    #[arg(long, value_enum, default_value = "2d")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(1..))]
    pub layers: u8,
    #[arg(long, default_value_t = 256, value_parser = clap::value_parser!(u16).range(1..))]
    pub units: u16,
    #[arg(long, value_enum, default_value = "siren")]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: u64,
    /// Defaults to 3e-4 in 2d mode and 2e-4 in 3d mode.
    #[arg(long, value_parser = positive_f64)]
    pub lr: Option<f64>,
    /// Rounded to the nearest f32, the precision stored in the container.
    #[arg(long, default_value_t = 30.0, value_parser = positive_f64)]
    pub omega0: f64,
    #[arg(long, value_enum, default_value = "f16")]
    pub quant: QuantArg,
    #[arg(long, value_enum, default_value = "lzma")]
    pub backend: BackendArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Tissue-label NIfTI; the loss only sees non-background voxels.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Training trace CSV; defaults to `<output>.trace.csv`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Loss is logged every this many epochs (and at the last one).
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub log_every: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct DecodeArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    /// Keep the normalized [0, 1] scale instead of restoring native units.
    #[arg(long)]
    pub normalized: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct MetricsArgs {
    pub truth: PathBuf,
    pub test: PathBuf,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Container whose size is reported as a compression ratio.
    #[arg(long)]
    pub artifact: Option<PathBuf>,
    /// Relative-error denominator floor, in normalized units.
    #[arg(long, default_value_t = nrvc_core::metrics::DEFAULT_REL_FLOOR, value_parser = positive_f64)]
    pub floor: f64,
    /// Writes `<out>.csv`, `<out>_slices.csv` and `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalDwiArgs {
    pub truth: PathBuf,
    pub test: PathBuf,
    #[arg(long)]
    pub bvals: PathBuf,
    #[arg(long)]
    pub bvecs: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long, default_value_t = 1000.0, value_parser = positive_f64)]
    pub b_tensor: f64,
    #[arg(long, default_value_t = 5000.0, value_parser = positive_f64)]
    pub b_sh: f64,
    #[arg(long, default_value_t = 100.0, value_parser = non_negative_f64)]
    pub b_tol: f64,
    #[arg(long, default_value_t = 4)]
    pub sh_order: usize,
    /// Laplace-Beltrami weight of the SH fit (0 = plain least squares).
    #[arg(long, default_value_t = 0.0, value_parser = non_negative_f64)]
    pub sh_lambda: f64,
    /// Method label written in the first CSV column.
    #[arg(long, default_value = "test")]
    pub method: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write FA/MD/RISH maps of both volumes as `<prefix>_{truth,test}_<metric>.nii.gz`.
    #[arg(long)]
    pub maps: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct PhantomArgs {
    /// Spatial size as NX,NY,NZ.
    #[arg(long, value_parser = parse_dims, default_value = "32,32,4")]
    pub dims: [usize; 3],
    #[arg(long, default_value_t = 1)]
    pub b0: usize,
    /// Diffusion-weighted shell as B:N, repeatable.
    #[arg(long = "shell", value_parser = parse_shell, default_values = ["1000:15"])]
    pub shells: Vec<(f64, usize)>,
    /// Rician SNR of the b=0 signal; omit for noise-free data.
    #[arg(long, value_parser = positive_f64)]
    pub snr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Writes `<prefix>.nii.gz`, `.bval`, `.bvec`, `_mask.nii.gz`, `_fa.nii.gz`, `_md.nii.gz`.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{e}")))
        .collect::<Result<_, _>>()?;
    match parts.as_slice() {
        &[x, y, z] if x > 0 && y > 0 && z > 0 => Ok([x, y, z]),
        _ => Err(format!("expected three positive sizes NX,NY,NZ, got {s}")),
    }
}

fn parse_shell(s: &str) -> Result<(f64, usize), String> {
    let (b, n) = s
        .split_once(':')
        .ok_or_else(|| format!("expected B:N, got {s}"))?;
    let b = positive_f64(b)?;
    let n: usize = n.parse().map_err(|e| format!("{e}"))?;
    if n == 0 {
        return Err("shell needs at least one direction".into());
    }
    Ok((b, n))
}

#[derive(Debug, Args, Serialize)]
pub struct SmoothArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    /// Full width at half maximum, in voxels.
    #[arg(long, default_value_t = nrvc_core::dwi::DEFAULT_FWHM_VOXELS, value_parser = positive_f64)]
    pub fwhm: f64,
}
