//! In-memory volumes, tissue masks and the normalization contract.
//!
//! Samples are stored with x varying fastest, then y, z and finally the
//! measurement index, which is also the NIfTI on-disk order. Logical indexing
//! is always `[x][y][z][measurement]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradient::GradientTable;
use crate::nifti::NiftiMeta;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub m: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize, m: usize) -> Self {
        Self { nx, ny, nz, m }
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn n_voxels(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn len(&self) -> usize {
        self.n_voxels() * self.m
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn voxel_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize, m: usize) -> usize {
        self.voxel_index(x, y, z) + self.n_voxels() * m
    }
}

/// Native-unit range recorded when a volume is mapped onto [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBounds {
    pub min: f64,
    pub max: f64,
}

impl NormBounds {
    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    #[inline]
    pub fn to_native(&self, s: f64) -> f64 {
        s * self.range() + self.min
    }

    /// Maps a native sample onto the normalized scale. Degenerate bounds map
    /// everything to zero.
    #[inline]
    pub fn to_normalized(&self, s: f64) -> f64 {
        let range = self.range();
        if range > 0.0 {
            (s - self.min) / range
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume4D {
    dims: Dims,
    pub voxel_size: [f64; 3],
    data: Vec<f64>,
    /// Set while samples are on the normalized [0, 1] scale.
    pub norm_bounds: Option<NormBounds>,
    /// Header bytes carried over from a NIfTI source for write-back.
    pub(crate) nifti: Option<NiftiMeta>,
}

impl Volume4D {
    pub fn new(dims: Dims, voxel_size: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if dims.nx == 0 || dims.ny == 0 || dims.nz == 0 || dims.m == 0 {
            return Err(Error::Shape(format!(
                "dimensions must be positive, got {dims:?}"
            )));
        }
        if data.len() != dims.len() {
            return Err(Error::Shape(format!(
                "{dims:?} needs {} samples, got {}",
                dims.len(),
                data.len()
            )));
        }
        Ok(Self {
            dims,
            voxel_size,
            data,
            norm_bounds: None,
            nifti: None,
        })
    }

    pub fn zeros(dims: Dims, voxel_size: [f64; 3]) -> Result<Self> {
        Self::new(dims, voxel_size, vec![0.0; dims.len()])
    }

    /// Same geometry and header passthrough, different samples.
    pub fn with_data(&self, dims: Dims, data: Vec<f64>) -> Result<Self> {
        let mut v = Self::new(dims, self.voxel_size, data)?;
        v.nifti = self.nifti.clone();
        Ok(v)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize, m: usize) -> f64 {
        self.data[self.dims.index(x, y, z, m)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, m: usize, value: f64) {
        let i = self.dims.index(x, y, z, m);
        self.data[i] = value;
    }

    /// One 3D frame, contiguous in memory.
    pub fn frame(&self, m: usize) -> &[f64] {
        let n = self.dims.n_voxels();
        &self.data[m * n..(m + 1) * n]
    }

    pub fn frame_mut(&mut self, m: usize) -> &mut [f64] {
        let n = self.dims.n_voxels();
        &mut self.data[m * n..(m + 1) * n]
    }

    /// The M-vector of one voxel, gathered across frames.
    pub fn voxel_signal(&self, voxel: usize) -> Vec<f64> {
        let n = self.dims.n_voxels();
        (0..self.dims.m).map(|m| self.data[voxel + n * m]).collect()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
                (lo.min(s), hi.max(s))
            })
    }

    /// Global min/max normalization over every sample of every frame.
    ///
    /// Re-normalizing composes the new bounds with the recorded ones, so
    /// `denormalize` always returns to the original native units.
    pub fn normalize(&self) -> Volume4D {
        let (lo, hi) = self.min_max();
        let fresh = NormBounds { min: lo, max: hi };
        let data = self.data.iter().map(|&s| fresh.to_normalized(s)).collect();
        let bounds = match self.norm_bounds {
            Some(prev) => NormBounds {
                min: if lo == 0.0 {
                    prev.min
                } else {
                    prev.to_native(lo)
                },
                max: if hi == 1.0 {
                    prev.max
                } else {
                    prev.to_native(hi)
                },
            },
            None => fresh,
        };
        Volume4D {
            dims: self.dims,
            voxel_size: self.voxel_size,
            data,
            norm_bounds: Some(bounds),
            nifti: self.nifti.clone(),
        }
    }

    /// Maps normalized samples back to native units. A volume without bounds
    /// is returned unchanged.
    pub fn denormalize(&self) -> Volume4D {
        let mut out = self.clone();
        if let Some(b) = out.norm_bounds.take() {
            out.data.iter_mut().for_each(|s| *s = b.to_native(*s));
        }
        out
    }

    /// Applies externally chosen bounds (e.g. a ground truth's) to this volume.
    pub fn normalize_with(&self, bounds: NormBounds) -> Volume4D {
        let mut out = self.clone();
        out.data
            .iter_mut()
            .for_each(|s| *s = bounds.to_normalized(*s));
        out.norm_bounds = Some(bounds);
        out
    }

    /// Keeps the listed measurements, in the listed order.
    pub fn select_measurements(&self, indices: &[usize]) -> Result<Volume4D> {
        let mut data = Vec::with_capacity(self.dims.n_voxels() * indices.len());
        for &m in indices {
            if m >= self.dims.m {
                return Err(Error::Index {
                    index: m,
                    len: self.dims.m,
                });
            }
            data.extend_from_slice(self.frame(m));
        }
        let dims = Dims {
            m: indices.len(),
            ..self.dims
        };
        let mut v = Volume4D::new(dims, self.voxel_size, data)?;
        v.norm_bounds = self.norm_bounds;
        v.nifti = self.nifti.clone();
        Ok(v)
    }

    pub fn check_same_dims(&self, other: &Volume4D) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(())
    }
}

/// Measurements whose b-value lies within `tol` of `b_target`.
pub fn select_shell(
    v: &Volume4D,
    g: &GradientTable,
    b_target: f64,
    tol: f64,
) -> Result<(Volume4D, GradientTable)> {
    if tol < 0.0 {
        return Err(Error::Config(format!(
            "shell tolerance must be >= 0, got {tol}"
        )));
    }
    if g.len() != v.dims().m {
        return Err(Error::Shape(format!(
            "gradient table has {} rows, volume has {} measurements",
            g.len(),
            v.dims().m
        )));
    }
    let picked = g.shell_indices(b_target, tol);
    if picked.is_empty() {
        return Err(Error::EmptyShell { b_target, tol });
    }
    Ok((v.select_measurements(&picked)?, g.subset(&picked)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TissueLabel {
    Background = 0,
    Wm = 1,
    Gm = 2,
    Csf = 3,
}

impl TissueLabel {
    pub const ALL: [TissueLabel; 4] = [
        TissueLabel::Background,
        TissueLabel::Wm,
        TissueLabel::Gm,
        TissueLabel::Csf,
    ];
    pub const TISSUES: [TissueLabel; 3] = [TissueLabel::Wm, TissueLabel::Gm, TissueLabel::Csf];

    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            0 => Some(Self::Background),
            1 => Some(Self::Wm),
            2 => Some(Self::Gm),
            3 => Some(Self::Csf),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Background => "background",
            Self::Wm => "WM",
            Self::Gm => "GM",
            Self::Csf => "CSF",
        }
    }
}

impl std::fmt::Display for TissueLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TissueMask {
    dims: [usize; 3],
    labels: Vec<TissueLabel>,
}

impl TissueMask {
    pub fn new(dims: [usize; 3], labels: Vec<TissueLabel>) -> Result<Self> {
        if labels.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "mask {dims:?} needs {} labels, got {}",
                dims.iter().product::<usize>(),
                labels.len()
            )));
        }
        Ok(Self { dims, labels })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[TissueLabel] {
        &self.labels
    }

    pub fn count(&self, label: TissueLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn is_foreground(&self, voxel: usize) -> bool {
        self.labels[voxel] != TissueLabel::Background
    }

    /// Reads labels from the first frame of a label image (codes 0..=3,
    /// rounded). Any other nonzero code is an error.
    pub fn from_volume(v: &Volume4D) -> Result<Self> {
        let labels = v
            .frame(0)
            .iter()
            .map(|&s| {
                TissueLabel::from_code(s.round() as i64)
                    .ok_or_else(|| Error::Format(format!("invalid tissue label {s}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(v.dims().spatial(), labels)
    }

    pub fn to_volume(&self, voxel_size: [f64; 3]) -> Volume4D {
        let [nx, ny, nz] = self.dims;
        let data = self.labels.iter().map(|&l| l as u8 as f64).collect();
        Volume4D::new(Dims::new(nx, ny, nz, 1), voxel_size, data).expect("mask dims are consistent")
    }

    pub fn check_matches(&self, v: &Volume4D) -> Result<()> {
        if self.dims != v.dims().spatial() {
            return Err(Error::Shape(format!(
                "mask {:?} vs volume {:?}",
                self.dims,
                v.dims().spatial()
            )));
        }
        Ok(())
    }
}
