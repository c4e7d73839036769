//! Fidelity metrics between a ground truth and a reconstruction, both on the
//! normalized [0, 1] scale.

use std::io::Write;

use ndarray::{Array2, ArrayView2};
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::volume::{Dims, NormBounds, TissueLabel, TissueMask, Volume4D};

pub const SSIM_WINDOW: usize = 7;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
pub const DEFAULT_REL_FLOOR: f64 = 1e-6;

/// `-10 log10(mse)` without validation; zero maps to +inf.
#[inline]
pub fn psnr_db(mse: f64) -> f64 {
    -10.0 * mse.log10()
}

/// Peak signal-to-noise ratio for unit-peak signals.
pub fn psnr(mse: f64) -> Result<f64> {
    if mse.is_nan() || mse < 0.0 {
        return Err(Error::Domain(format!("MSE must be >= 0, got {mse}")));
    }
    Ok(psnr_db(mse))
}

fn check_image_pair(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            window: SSIM_WINDOW,
        });
    }
    Ok(())
}

/// SSIM with a uniform 7x7 window at every fully-contained window centre,
/// sample-covariance normalization and constants for a data range of 1.
/// The output has shape `(h - 6, w - 6)`.
pub fn ssim_map(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_image_pair(&a, &b)?;
    let (h, w) = a.dim();
    let np = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let cov_norm = np / (np - 1.0);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let out_h = h - SSIM_WINDOW + 1;
    let out_w = w - SSIM_WINDOW + 1;
    let mut out = Array2::zeros((out_h, out_w));
    for i in 0..out_h {
        for j in 0..out_w {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for di in 0..SSIM_WINDOW {
                for dj in 0..SSIM_WINDOW {
                    let x = a[[i + di, j + dj]];
                    let y = b[[i + di, j + dj]];
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (ua, ub) = (sa / np, sb / np);
            let va = cov_norm * (saa / np - ua * ua);
            let vb = cov_norm * (sbb / np - ub * ub);
            let vab = cov_norm * (sab / np - ua * ub);
            let num = (2.0 * ua * ub + c1) * (2.0 * vab + c2);
            let den = (ua * ua + ub * ub + c1) * (va + vb + c2);
            out[[i, j]] = num / den;
        }
    }
    Ok(out)
}

pub fn ssim(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    ssim_map(a, b).map(|m| m.mean().expect("non-empty map"))
}

fn plane(v: &Volume4D, z: usize, m: usize) -> Array2<f64> {
    let d = v.dims();
    let frame = v.frame(m);
    let off = z * d.nx * d.ny;
    // rows = y, cols = x
    Array2::from_shape_fn((d.ny, d.nx), |(y, x)| frame[off + x + d.nx * y])
}

/// Mean SSIM over every (slice, measurement) plane.
pub fn ssim_volume(truth: &Volume4D, test: &Volume4D) -> Result<f64> {
    truth.check_same_dims(test)?;
    let d = truth.dims();
    let mut total = 0.0;
    for z in 0..d.nz {
        for m in 0..d.m {
            total += ssim(plane(truth, z, m).view(), plane(test, z, m).view())?;
        }
    }
    Ok(total / (d.nz * d.m) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorSign {
    Signed,
    Absolute,
}

/// Per-voxel percentage error `100 (test - truth) / max(|truth|, floor)`,
/// averaged over measurements. Returns a single-frame volume.
pub fn relative_error_map(
    truth: &Volume4D,
    test: &Volume4D,
    floor: f64,
    sign: ErrorSign,
) -> Result<Volume4D> {
    truth.check_same_dims(test)?;
    let d = truth.dims();
    let n = d.n_voxels();
    let mut out = vec![0.0; n];
    for m in 0..d.m {
        for ((o, &t), &s) in out.iter_mut().zip(truth.frame(m)).zip(test.frame(m)) {
            let e = 100.0 * (s - t) / t.abs().max(floor);
            *o += match sign {
                ErrorSign::Signed => e,
                ErrorSign::Absolute => e.abs(),
            };
        }
    }
    out.iter_mut().for_each(|o| *o /= d.m as f64);
    Volume4D::new(Dims { m: 1, ..d }, truth.voxel_size, out)
}

/// Mean and population standard deviation of a single-frame map over the
/// voxels carrying `label`.
pub fn masked_stats(map: &Volume4D, mask: &TissueMask, label: TissueLabel) -> Result<(f64, f64)> {
    mask.check_matches(map)?;
    let values: Vec<f64> = map
        .frame(0)
        .iter()
        .zip(mask.labels())
        .filter(|(_, &l)| l == label)
        .map(|(&v, _)| v)
        .collect();
    if values.is_empty() {
        return Err(Error::EmptySelection(label.to_string()));
    }
    Ok(mean_std(&values))
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// MSE over every sample, optionally restricted to foreground voxels.
pub fn volume_mse(truth: &Volume4D, test: &Volume4D, mask: Option<&TissueMask>) -> Result<f64> {
    truth.check_same_dims(test)?;
    if let Some(m) = mask {
        m.check_matches(truth)?;
    }
    let d = truth.dims();
    let mut sum = 0.0;
    let mut count = 0usize;
    for m in 0..d.m {
        for (i, (&a, &b)) in truth.frame(m).iter().zip(test.frame(m)).enumerate() {
            if mask.is_some_and(|k| !k.is_foreground(i)) {
                continue;
            }
            sum += (a - b) * (a - b);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptySelection("foreground".into()));
    }
    Ok(sum / count as f64)
}

/// MSE of each z-slice across all measurements.
pub fn per_slice_mse(truth: &Volume4D, test: &Volume4D) -> Result<Vec<f64>> {
    truth.check_same_dims(test)?;
    let d = truth.dims();
    let plane = d.nx * d.ny;
    let mut sums = vec![0.0; d.nz];
    for m in 0..d.m {
        let (a, b) = (truth.frame(m), test.frame(m));
        for (z, s) in sums.iter_mut().enumerate() {
            for i in z * plane..(z + 1) * plane {
                *s += (a[i] - b[i]) * (a[i] - b[i]);
            }
        }
    }
    Ok(sums.into_iter().map(|s| s / (plane * d.m) as f64).collect())
}

/// Both volumes on the truth's normalized scale: native units are restored
/// first, then the truth's min/max bounds are applied to both.
pub fn normalize_pair(truth: &Volume4D, test: &Volume4D) -> (Volume4D, Volume4D) {
    let truth = truth.denormalize();
    let (min, max) = truth.min_max();
    let bounds = NormBounds { min, max };
    (
        truth.normalize_with(bounds),
        test.denormalize().normalize_with(bounds),
    )
}

/// Decibel value that serializes `+inf` as the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Db(pub f64);

impl Serialize for Db {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str(&self.0.to_string())
        }
    }
}

impl std::fmt::Display for Db {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelStats {
    pub label: TissueLabel,
    pub voxels: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub mse: f64,
    /// From the MSE over the whole 4D array.
    pub psnr_global: Db,
    /// Average of the per-slice PSNRs.
    pub psnr_slice_mean: Db,
    pub per_slice_psnr: Vec<Db>,
    pub ssim_mean: f64,
    /// Foreground-only MSE/PSNR when a mask was supplied.
    pub mse_masked: Option<f64>,
    pub psnr_masked: Option<Db>,
    /// Signed relative error (%) per tissue label present in the mask.
    pub relative_error: Vec<LabelStats>,
    pub compression_ratio: Option<f64>,
    pub payload_ratio: Option<f64>,
}

impl MetricsReport {
    /// Both volumes must already be on the same normalized scale.
    pub fn compute(
        truth: &Volume4D,
        test: &Volume4D,
        mask: Option<&TissueMask>,
        floor: f64,
    ) -> Result<Self> {
        let mse = volume_mse(truth, test, None)?;
        let per_slice: Vec<f64> = per_slice_mse(truth, test)?
            .into_iter()
            .map(psnr_db)
            .collect();
        let psnr_slice_mean = per_slice.iter().sum::<f64>() / per_slice.len() as f64;
        let (mse_masked, psnr_masked, relative_error) = match mask {
            Some(m) => {
                let mm = volume_mse(truth, test, Some(m))?;
                let map = relative_error_map(truth, test, floor, ErrorSign::Signed)?;
                let stats = TissueLabel::TISSUES
                    .into_iter()
                    .filter(|&l| m.count(l) > 0)
                    .map(|l| {
                        let (mean, std) = masked_stats(&map, m, l)?;
                        Ok(LabelStats {
                            label: l,
                            voxels: m.count(l),
                            mean,
                            std,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                (Some(mm), Some(Db(psnr(mm)?)), stats)
            }
            None => (None, None, Vec::new()),
        };
        Ok(Self {
            mse,
            psnr_global: Db(psnr(mse)?),
            psnr_slice_mean: Db(psnr_slice_mean),
            per_slice_psnr: per_slice.into_iter().map(Db).collect(),
            ssim_mean: ssim_volume(truth, test)?,
            mse_masked,
            psnr_masked,
            relative_error,
            compression_ratio: None,
            payload_ratio: None,
        })
    }

    /// `metric,mask,value` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "metric,mask,value")?;
        writeln!(w, "mse,all,{:e}", self.mse)?;
        writeln!(w, "psnr_global,all,{}", self.psnr_global)?;
        writeln!(w, "psnr_slice_mean,all,{}", self.psnr_slice_mean)?;
        writeln!(w, "ssim_mean,all,{}", self.ssim_mean)?;
        if let (Some(m), Some(p)) = (self.mse_masked, self.psnr_masked) {
            writeln!(w, "mse,foreground,{m:e}")?;
            writeln!(w, "psnr_global,foreground,{p}")?;
        }
        for s in &self.relative_error {
            writeln!(w, "relerr_mean,{},{}", s.label, s.mean)?;
            writeln!(w, "relerr_std,{},{}", s.label, s.std)?;
        }
        if let Some(r) = self.compression_ratio {
            writeln!(w, "compression_ratio,all,{r}")?;
        }
        if let Some(r) = self.payload_ratio {
            writeln!(w, "payload_ratio,all,{r}")?;
        }
        Ok(())
    }

    /// `slice,psnr` rows.
    pub fn write_slice_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "slice,psnr")?;
        for (z, p) in self.per_slice_psnr.iter().enumerate() {
            writeln!(w, "{z},{p}")?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
