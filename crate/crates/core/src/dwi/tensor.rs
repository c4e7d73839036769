//! Log-linear least-squares diffusion tensor fit.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gradient::GradientTable;
use crate::volume::{Dims, Volume4D};

/// b-values at or below this count as unweighted.
pub const B0_THRESHOLD: f64 = 50.0;
/// Signals are clamped to this before the logarithm (normalized units).
pub const DEFAULT_SIGNAL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TensorFit {
    pub s0: f64,
    /// Dxx, Dyy, Dzz, Dxy, Dxz, Dyz in mm^2/s.
    pub d: [f64; 6],
    /// Descending.
    pub eigenvalues: [f64; 3],
    /// Unit eigenvector of the largest eigenvalue.
    pub principal: [f64; 3],
}

impl TensorFit {
    pub fn from_components(s0: f64, d: [f64; 6]) -> Self {
        let [xx, yy, zz, xy, xz, yz] = d;
        let m = Matrix3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz);
        let eig = SymmetricEigen::new(m);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let eigenvalues = order.map(|i| eig.eigenvalues[i]);
        let v = eig.eigenvectors.column(order[0]);
        Self {
            s0,
            d,
            eigenvalues,
            principal: [v[0], v[1], v[2]],
        }
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let [xx, yy, zz, xy, xz, yz] = self.d;
        [[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]]
    }

    /// Signal predicted for one acquisition row.
    pub fn signal(&self, b: f64, g: &[f64; 3]) -> f64 {
        let m = self.matrix();
        let mut q = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                q += g[i] * m[i][j] * g[j];
            }
        }
        self.s0 * (-b * q).exp()
    }

    pub fn has_negative_eigenvalue(&self) -> bool {
        self.eigenvalues[2] < 0.0
    }

    pub fn fa_md(&self) -> (f64, f64) {
        fa_md(self.eigenvalues)
    }
}

/// Fractional anisotropy and mean diffusivity of an eigenvalue triple. The
/// zero tensor has FA 0.
pub fn fa_md(l: [f64; 3]) -> (f64, f64) {
    let md = (l[0] + l[1] + l[2]) / 3.0;
    let norm = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
    if norm == 0.0 {
        return (0.0, md);
    }
    let dev = ((l[0] - md).powi(2) + (l[1] - md).powi(2) + (l[2] - md).powi(2)).sqrt();
    ((1.5f64).sqrt() * dev / norm, md)
}

/// Precomputed pseudo-inverse for one acquisition scheme.
#[derive(Debug, Clone)]
pub struct TensorModel {
    pinv: DMatrix<f64>,
    n_meas: usize,
    pub signal_floor: f64,
}

impl TensorModel {
    pub fn new(g: &GradientTable) -> Result<Self> {
        let n = g.len();
        if !g.b_values().iter().any(|&b| b <= B0_THRESHOLD) {
            return Err(Error::DegenerateScheme(
                "no unweighted (b=0) measurement".into(),
            ));
        }
        if n < 7 {
            return Err(Error::DegenerateScheme(format!(
                "{n} measurements cannot determine 7 unknowns"
            )));
        }
        let mut x = DMatrix::zeros(n, 7);
        for (r, (&b, d)) in g.b_values().iter().zip(g.directions()).enumerate() {
            let [gx, gy, gz] = *d;
            let row = [
                1.0,
                -b * gx * gx,
                -b * gy * gy,
                -b * gz * gz,
                -2.0 * b * gx * gy,
                -2.0 * b * gx * gz,
                -2.0 * b * gy * gz,
            ];
            for (c, v) in row.into_iter().enumerate() {
                x[(r, c)] = v;
            }
        }
        // Column scaling keeps the rank test independent of b-value units.
        let scales: Vec<f64> = (0..7)
            .map(|c| {
                let n = x.column(c).norm();
                if n > 0.0 {
                    n
                } else {
                    1.0
                }
            })
            .collect();
        let mut xs = x.clone();
        for (c, s) in scales.iter().enumerate() {
            xs.column_mut(c).scale_mut(1.0 / s);
        }
        let svd = xs.svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smin > 1e-10 * smax) {
            return Err(Error::DegenerateScheme(
                "directions do not determine a tensor (need 6 non-collinear b>0 directions)".into(),
            ));
        }
        let mut pinv = svd
            .pseudo_inverse(0.0)
            .map_err(|e| Error::DegenerateScheme(e.to_string()))?;
        for (c, s) in scales.iter().enumerate() {
            pinv.row_mut(c).scale_mut(1.0 / s);
        }
        Ok(Self {
            pinv,
            n_meas: n,
            signal_floor: DEFAULT_SIGNAL_FLOOR,
        })
    }

    pub fn fit(&self, signals: &[f64]) -> Result<TensorFit> {
        if signals.len() != self.n_meas {
            return Err(Error::Shape(format!(
                "{} signals for a {}-row scheme",
                signals.len(),
                self.n_meas
            )));
        }
        let y = DVector::from_iterator(
            self.n_meas,
            signals.iter().map(|&s| s.max(self.signal_floor).ln()),
        );
        let beta = &self.pinv * y;
        Ok(TensorFit::from_components(
            beta[0].exp(),
            [beta[1], beta[2], beta[3], beta[4], beta[5], beta[6]],
        ))
    }

    /// Fits every voxel of a volume whose measurements follow the scheme.
    pub fn fit_volume(&self, v: &Volume4D) -> Result<TensorMaps> {
        if v.dims().m != self.n_meas {
            return Err(Error::Shape(format!(
                "volume has {} measurements, scheme has {}",
                v.dims().m,
                self.n_meas
            )));
        }
        let fits = (0..v.dims().n_voxels())
            .into_par_iter()
            .map(|i| self.fit(&v.voxel_signal(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(TensorMaps {
            dims: v.dims(),
            voxel_size: v.voxel_size,
            fits,
        })
    }
}

/// One-shot fit of a single voxel.
pub fn fit_tensor(signals: &[f64], g: &GradientTable) -> Result<TensorFit> {
    TensorModel::new(g)?.fit(signals)
}

#[derive(Debug, Clone)]
pub struct TensorMaps {
    dims: Dims,
    voxel_size: [f64; 3],
    pub fits: Vec<TensorFit>,
}

impl TensorMaps {
    fn scalar_map(&self, f: impl Fn(&TensorFit) -> f64) -> Volume4D {
        let data = self.fits.iter().map(f).collect();
        Volume4D::new(Dims { m: 1, ..self.dims }, self.voxel_size, data)
            .expect("one value per voxel")
    }

    pub fn fa(&self) -> Volume4D {
        self.scalar_map(|t| t.fa_md().0)
    }

    pub fn md(&self) -> Volume4D {
        self.scalar_map(|t| t.fa_md().1)
    }

    pub fn negative_eigenvalue_count(&self) -> usize {
        self.fits
            .iter()
            .filter(|t| t.has_negative_eigenvalue())
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scheme(n_dirs: usize) -> GradientTable {
        GradientTable::multi_shell(1, &[(1000.0, n_dirs)])
    }

    #[test]
    fn recovers_anisotropic_tensor() {
        let g = scheme(30);
        let truth = TensorFit::from_components(1.0, [1.7e-3, 0.3e-3, 0.3e-3, 0.0, 0.0, 0.0]);
        let s: Vec<f64> = g
            .b_values()
            .iter()
            .zip(g.directions())
            .map(|(&b, d)| truth.signal(b, d))
            .collect();
        let fit = fit_tensor(&s, &g).unwrap();
        for k in 0..6 {
            assert!((fit.d[k] - truth.d[k]).abs() < 1e-9);
        }
        assert!((fit.s0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn isotropic_signal_gives_scaled_identity() {
        let g = scheme(20);
        let d = 0.9e-3;
        let s: Vec<f64> = g
            .b_values()
            .iter()
            .map(|&b| 500.0 * (-b * d).exp())
            .collect();
        let fit = fit_tensor(&s, &g).unwrap();
        for k in 0..3 {
            assert!((fit.d[k] - d).abs() < 1e-12);
            assert!(fit.d[k + 3].abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_directions() {
        let g = scheme(5);
        assert!(matches!(
            TensorModel::new(&g),
            Err(Error::DegenerateScheme(_))
        ));
        // enough rows but all along one axis
        let g = GradientTable::new(
            vec![0.0, 1000.0, 1000.0, 1000.0, 1000.0, 1000.0, 1000.0, 1000.0],
            {
                let mut d = vec![[0.0; 3]];
                d.extend(std::iter::repeat_n([1.0, 0.0, 0.0], 7));
                d
            },
        )
        .unwrap();
        assert!(matches!(
            TensorModel::new(&g),
            Err(Error::DegenerateScheme(_))
        ));
    }

    #[test]
    fn fa_md_reference_values() {
        let (fa, md) = fa_md([1e-3, 1e-3, 1e-3]);
        assert!(fa.abs() < 1e-12);
        assert!((md - 1e-3).abs() < 1e-18);
        let (fa, md) = fa_md([1.0, 0.0, 0.0]);
        assert!((fa - 1.0).abs() < 1e-15);
        assert!((md - 1.0 / 3.0).abs() < 1e-15);
        let (fa, md) = fa_md([2.0, 1.0, 1.0]);
        assert!((fa - (1.0f64 / 6.0).sqrt()).abs() < 1e-15);
        assert!((md - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(fa_md([0.0; 3]), (0.0, 0.0));
    }

    #[test]
    fn eigenvalues_sorted_and_principal_direction() {
        let t = TensorFit::from_components(1.0, [0.3e-3, 1.7e-3, 0.5e-3, 0.0, 0.0, 0.0]);
        assert!(t.eigenvalues[0] >= t.eigenvalues[1] && t.eigenvalues[1] >= t.eigenvalues[2]);
        assert!((t.principal[1].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fa_in_unit_interval_for_nonnegative_eigenvalues() {
        let mut state = 12345u64;
        for _ in 0..1000 {
            let mut next = || {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64
            };
            let l = [next(), next(), next()];
            let (fa, md) = fa_md(l);
            assert!((0.0..=1.0 + 1e-15).contains(&fa));
            assert_eq!(md, (l[0] + l[1] + l[2]) / 3.0);
        }
    }
}
