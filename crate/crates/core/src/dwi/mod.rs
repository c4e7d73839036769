//! Diffusion-model fidelity: tensor and spherical-harmonic fits, their
//! rotation invariants, a Gaussian-smoothing baseline and a synthetic phantom.
//!
//! [`evaluate`] compares a reconstructed volume against its ground truth the
//! same way for every method: FA and MD from a tensor fit on the b=0 rows
//! plus one shell, RISH0 and RISH2 from an order-4 SH fit on a second shell,
//! then per-tissue relative-error statistics.

pub mod phantom;
pub mod sh;
pub mod smooth;
pub mod tensor;

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gradient::GradientTable;
use crate::metrics::{mean_std, relative_error_map, ErrorSign, DEFAULT_REL_FLOOR};
use crate::volume::{NormBounds, TissueLabel, TissueMask, Volume4D};

pub use phantom::{make_phantom, Phantom};
pub use sh::{fit_sh, rish, ShFit, ShModel, SH_CONVENTION};
pub use smooth::{gaussian_smooth, DEFAULT_FWHM_VOXELS};
pub use tensor::{fa_md, fit_tensor, TensorFit, TensorMaps, TensorModel, B0_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum DwiMetric {
    #[serde(rename = "MD")]
    Md,
    #[serde(rename = "FA")]
    Fa,
    #[serde(rename = "RISH0")]
    Rish0,
    #[serde(rename = "RISH2")]
    Rish2,
}

impl DwiMetric {
    pub const ALL: [DwiMetric; 4] = [Self::Md, Self::Fa, Self::Rish0, Self::Rish2];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Md => "MD",
            Self::Fa => "FA",
            Self::Rish0 => "RISH0",
            Self::Rish2 => "RISH2",
        }
    }
}

impl std::fmt::Display for DwiMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DwiEvalConfig {
    pub b_tensor: f64,
    pub b_sh: f64,
    /// Half-width of the b-value window that defines a shell.
    pub b_tol: f64,
    pub sh_order: usize,
    pub sh_lambda: f64,
    /// Denominator floor of the relative error, in map units.
    pub error_floor: f64,
    /// Clamp applied to normalized signals before the tensor log.
    pub signal_floor: f64,
}

impl Default for DwiEvalConfig {
    fn default() -> Self {
        Self {
            b_tensor: 1000.0,
            b_sh: 5000.0,
            b_tol: 100.0,
            sh_order: sh::DEFAULT_SH_ORDER,
            sh_lambda: 0.0,
            error_floor: DEFAULT_REL_FLOOR,
            signal_floor: tensor::DEFAULT_SIGNAL_FLOOR,
        }
    }
}

/// Scalar maps derived from one volume. RISH maps are absent when the
/// scheme has no rows on the SH shell.
#[derive(Debug, Clone)]
pub struct DwiMaps {
    pub maps: Vec<(DwiMetric, Volume4D)>,
    pub negative_eigenvalues: usize,
}

impl DwiMaps {
    pub fn get(&self, metric: DwiMetric) -> Option<&Volume4D> {
        self.maps.iter().find(|(m, _)| *m == metric).map(|(_, v)| v)
    }
}

/// Computes FA, MD and (when available) RISH0/RISH2 maps of `v`.
pub fn dwi_maps(v: &Volume4D, g: &GradientTable, cfg: &DwiEvalConfig) -> Result<DwiMaps> {
    if g.len() != v.dims().m {
        return Err(Error::Shape(format!(
            "gradient table has {} rows, volume has {} measurements",
            g.len(),
            v.dims().m
        )));
    }
    let tensor_rows: Vec<usize> = (0..g.len())
        .filter(|&i| {
            let b = g.b_values()[i];
            b <= B0_THRESHOLD || (b - cfg.b_tensor).abs() <= cfg.b_tol
        })
        .collect();
    if g.shell_indices(cfg.b_tensor, cfg.b_tol).is_empty() {
        return Err(Error::EmptyShell {
            b_target: cfg.b_tensor,
            tol: cfg.b_tol,
        });
    }
    let mut model = TensorModel::new(&g.subset(&tensor_rows))?;
    model.signal_floor = cfg.signal_floor;
    let tensors = model.fit_volume(&v.select_measurements(&tensor_rows)?)?;
    let mut maps = vec![(DwiMetric::Md, tensors.md()), (DwiMetric::Fa, tensors.fa())];

    let sh_rows = g.shell_indices(cfg.b_sh, cfg.b_tol);
    if !sh_rows.is_empty() {
        let shell = g.subset(&sh_rows);
        let model = ShModel::new(shell.directions(), cfg.sh_order, cfg.sh_lambda)?;
        let mut rish = model
            .rish_maps(&v.select_measurements(&sh_rows)?)?
            .into_iter();
        maps.push((DwiMetric::Rish0, rish.next().expect("band 0")));
        if let Some(r2) = rish.next() {
            maps.push((DwiMetric::Rish2, r2));
        }
    }
    Ok(DwiMaps {
        maps,
        negative_eigenvalues: tensors.negative_eigenvalue_count(),
    })
}

/// One row of the summary table: relative error (percent) of one metric of
/// one method over one tissue.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DwiTableRow {
    pub method: String,
    pub metric: DwiMetric,
    pub mask: TissueLabel,
    pub voxels: usize,
    pub mean: f64,
    pub std: f64,
    pub mean_abs: f64,
}

/// Relative-error rows for every metric present in both map sets and every
/// non-empty tissue of `mask`.
pub fn compare_maps(
    truth: &DwiMaps,
    test: &DwiMaps,
    mask: &TissueMask,
    method: &str,
    floor: f64,
) -> Result<Vec<DwiTableRow>> {
    let mut rows = Vec::new();
    for (metric, t) in &truth.maps {
        let Some(s) = test.get(*metric) else { continue };
        mask.check_matches(t)?;
        let err = relative_error_map(t, s, floor, ErrorSign::Signed)?;
        for label in TissueLabel::TISSUES {
            let values: Vec<f64> = err
                .frame(0)
                .iter()
                .zip(mask.labels())
                .filter(|(_, &l)| l == label)
                .map(|(&e, _)| e)
                .collect();
            if values.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&values);
            let mean_abs = values.iter().map(|e| e.abs()).sum::<f64>() / values.len() as f64;
            rows.push(DwiTableRow {
                method: method.to_string(),
                metric: *metric,
                mask: label,
                voxels: values.len(),
                mean,
                std,
                mean_abs,
            });
        }
    }
    Ok(rows)
}

/// Fits both volumes in native units and tabulates relative errors of
/// `test` against `truth`. The signal floor is taken in the truth's
/// normalized units and converted to native ones.
pub fn evaluate(
    truth: &Volume4D,
    test: &Volume4D,
    g: &GradientTable,
    mask: &TissueMask,
    method: &str,
    cfg: &DwiEvalConfig,
) -> Result<Vec<DwiTableRow>> {
    truth.check_same_dims(test)?;
    let truth = truth.denormalize();
    let test = test.denormalize();
    let cfg = native_config(&truth, cfg);
    let a = dwi_maps(&truth, g, &cfg)?;
    let b = dwi_maps(&test, g, &cfg)?;
    compare_maps(&a, &b, mask, method, cfg.error_floor)
}

/// Copy of `cfg` whose signal floor is expressed in the native units of `truth`.
pub fn native_config(truth: &Volume4D, cfg: &DwiEvalConfig) -> DwiEvalConfig {
    let (min, max) = truth.denormalize().min_max();
    let range = NormBounds { min, max }.range();
    DwiEvalConfig {
        signal_floor: if range > 0.0 {
            cfg.signal_floor * range
        } else {
            cfg.signal_floor
        },
        ..cfg.clone()
    }
}

/// Writes `method,metric,mask,voxels,mean,std,mean_abs`.
pub fn write_table_csv<W: Write>(rows: &[DwiTableRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "method,metric,mask,voxels,mean,std,mean_abs")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.method, r.metric, r.mask, r.voxels, r.mean, r.std, r.mean_abs
        )?;
    }
    Ok(())
}

/// Mean |relative error| of one metric over one tissue, if tabulated.
pub fn lookup_mean_abs(rows: &[DwiTableRow], metric: DwiMetric, mask: TissueLabel) -> Option<f64> {
    rows.iter()
        .find(|r| r.metric == metric && r.mask == mask)
        .map(|r| r.mean_abs)
}
