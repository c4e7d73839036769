//! Real, antipodally symmetric spherical harmonics fit and RISH features.
//!
//! Coefficients use the MRtrix3 layout: for even `l` and `-l <= m <= l` the
//! index is `l(l+1)/2 + m`. Basis functions are orthonormal on the sphere
//! with no Condon-Shortley phase:
//!
//! ```text
//! m < 0:  sqrt(2) N(l,|m|) P(l,|m|)(cos t) sin(|m| p)
//! m = 0:          N(l,0)   P(l,0)(cos t)
//! m > 0:  sqrt(2) N(l,m)   P(l,m)(cos t)   cos(m p)
//! ```

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gradient::GradientTable;
use crate::volume::{Dims, Volume4D};

pub const SH_CONVENTION: &str = "mrtrix3-real-even";
pub const DEFAULT_SH_ORDER: usize = 4;

pub fn n_coeffs(order: usize) -> usize {
    (order + 1) * (order + 2) / 2
}

/// Position of `(l, m)` in the coefficient vector.
pub fn sh_index(l: usize, m: i64) -> usize {
    debug_assert!(l.is_multiple_of(2) && m.unsigned_abs() as usize <= l);
    ((l * (l + 1) / 2) as i64 + m) as usize
}

/// Associated Legendre function without the Condon-Shortley phase.
fn legendre(l: usize, m: usize, x: f64) -> f64 {
    let s = (1.0 - x * x).max(0.0).sqrt();
    let mut pmm = 1.0;
    for k in 1..=m {
        pmm *= (2 * k - 1) as f64 * s;
    }
    if l == m {
        return pmm;
    }
    let mut p_prev = pmm;
    let mut p = x * (2 * m + 1) as f64 * pmm;
    for ll in (m + 2)..=l {
        let next = ((2 * ll - 1) as f64 * x * p - (ll + m - 1) as f64 * p_prev) / (ll - m) as f64;
        p_prev = p;
        p = next;
    }
    p
}

fn norm_factor(l: usize, m: usize) -> f64 {
    // (l-m)!/(l+m)! as a running product to avoid overflow
    let mut ratio = 1.0;
    for k in (l - m + 1)..=(l + m) {
        ratio /= k as f64;
    }
    ((2 * l + 1) as f64 / (4.0 * PI) * ratio).sqrt()
}

/// Real SH basis value for a unit direction.
pub fn real_sh(l: usize, m: i64, dir: &[f64; 3]) -> f64 {
    let theta = dir[2].clamp(-1.0, 1.0).acos();
    let phi = dir[1].atan2(dir[0]);
    let am = m.unsigned_abs() as usize;
    let base = norm_factor(l, am) * legendre(l, am, theta.cos());
    match m.cmp(&0) {
        std::cmp::Ordering::Equal => base,
        std::cmp::Ordering::Greater => 2f64.sqrt() * base * (am as f64 * phi).cos(),
        std::cmp::Ordering::Less => 2f64.sqrt() * base * (am as f64 * phi).sin(),
    }
}

/// Basis matrix with one row per direction.
pub fn sh_basis(dirs: &[[f64; 3]], order: usize) -> DMatrix<f64> {
    let k = n_coeffs(order);
    let mut b = DMatrix::zeros(dirs.len(), k);
    for (r, d) in dirs.iter().enumerate() {
        for l in (0..=order).step_by(2) {
            for m in -(l as i64)..=(l as i64) {
                b[(r, sh_index(l, m))] = real_sh(l, m, d);
            }
        }
    }
    b
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShFit {
    pub order: usize,
    pub coeffs: Vec<f64>,
    pub convention: &'static str,
}

impl ShFit {
    pub fn coeff(&self, l: usize, m: i64) -> f64 {
        self.coeffs[sh_index(l, m)]
    }

    /// Sum of squared coefficients of band `l`.
    pub fn rish(&self, l: usize) -> f64 {
        rish(self, l)
    }

    /// Signal synthesized at the given directions.
    pub fn evaluate(&self, dirs: &[[f64; 3]]) -> Vec<f64> {
        let b = sh_basis(dirs, self.order);
        (0..dirs.len())
            .map(|r| b.row(r).iter().zip(&self.coeffs).map(|(x, c)| x * c).sum())
            .collect()
    }
}

/// RISH feature of band `l`. Panics unless `l` is even and within the fit order.
pub fn rish(fit: &ShFit, l: usize) -> f64 {
    assert!(
        l.is_multiple_of(2) && l <= fit.order,
        "RISH band {l} not in fit of order {}",
        fit.order
    );
    (-(l as i64)..=(l as i64))
        .map(|m| fit.coeff(l, m).powi(2))
        .sum()
}

/// Precomputed least-squares projector for one direction set.
#[derive(Debug, Clone)]
pub struct ShModel {
    order: usize,
    projector: DMatrix<f64>,
}

impl ShModel {
    /// `lambda` is a Laplace-Beltrami penalty weight; 0 gives plain least squares.
    pub fn new(dirs: &[[f64; 3]], order: usize, lambda: f64) -> Result<Self> {
        if !order.is_multiple_of(2) {
            return Err(Error::Config(format!("SH order must be even, got {order}")));
        }
        if !(lambda >= 0.0) {
            return Err(Error::Config(format!(
                "SH regularization must be >= 0, got {lambda}"
            )));
        }
        let k = n_coeffs(order);
        if dirs.len() < k {
            return Err(Error::Underdetermined {
                directions: dirs.len(),
                coefficients: k,
            });
        }
        let b = sh_basis(dirs, order);
        let mut normal = b.transpose() * &b;
        if lambda > 0.0 {
            for l in (0..=order).step_by(2) {
                let pen = lambda * ((l * (l + 1)) as f64).powi(2);
                for m in -(l as i64)..=(l as i64) {
                    let i = sh_index(l, m);
                    normal[(i, i)] += pen;
                }
            }
        }
        let eig = normal.clone().symmetric_eigen();
        let (lo, hi) = eig
            .eigenvalues
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| {
                (lo.min(e), hi.max(e))
            });
        if !(lo > 1e-12 * hi) {
            return Err(Error::Underdetermined {
                directions: dirs.len(),
                coefficients: k,
            });
        }
        let inv = normal.try_inverse().ok_or(Error::Underdetermined {
            directions: dirs.len(),
            coefficients: k,
        })?;
        Ok(Self {
            order,
            projector: inv * b.transpose(),
        })
    }

    pub fn n_dirs(&self) -> usize {
        self.projector.ncols()
    }

    pub fn fit(&self, signals: &[f64]) -> Result<ShFit> {
        if signals.len() != self.n_dirs() {
            return Err(Error::Shape(format!(
                "{} signals for {} directions",
                signals.len(),
                self.n_dirs()
            )));
        }
        let coeffs = (0..self.projector.nrows())
            .map(|r| {
                self.projector
                    .row(r)
                    .iter()
                    .zip(signals)
                    .map(|(p, s)| p * s)
                    .sum()
            })
            .collect();
        Ok(ShFit {
            order: self.order,
            coeffs,
            convention: SH_CONVENTION,
        })
    }

    /// Per-voxel RISH maps (one m=1 volume per even band) of a volume whose
    /// measurements match the model's directions.
    pub fn rish_maps(&self, v: &Volume4D) -> Result<Vec<Volume4D>> {
        let dims = v.dims();
        if dims.m != self.n_dirs() {
            return Err(Error::Shape(format!(
                "volume has {} measurements, SH model has {} directions",
                dims.m,
                self.n_dirs()
            )));
        }
        let fits = (0..dims.n_voxels())
            .into_par_iter()
            .map(|i| self.fit(&v.voxel_signal(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..=self.order)
            .step_by(2)
            .map(|l| {
                let data = fits.iter().map(|f| f.rish(l)).collect();
                Volume4D::new(Dims { m: 1, ..dims }, v.voxel_size, data)
                    .expect("one value per voxel")
            })
            .collect())
    }
}

/// One-shot SH fit using the directions of every row of `g`.
pub fn fit_sh(signals: &[f64], g: &GradientTable, order: usize) -> Result<ShFit> {
    ShModel::new(g.directions(), order, 0.0)?.fit(signals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradient::hemisphere_directions;
    use proptest::prelude::*;

    fn shell(n: usize) -> GradientTable {
        GradientTable::new(vec![5000.0; n], hemisphere_directions(n)).unwrap()
    }

    #[test]
    fn layout_indices() {
        assert_eq!(n_coeffs(4), 15);
        assert_eq!(sh_index(0, 0), 0);
        assert_eq!(sh_index(2, -2), 1);
        assert_eq!(sh_index(2, 0), 3);
        assert_eq!(sh_index(2, 2), 5);
        assert_eq!(sh_index(4, -4), 6);
        assert_eq!(sh_index(4, 4), 14);
    }

    #[test]
    fn closed_forms() {
        let d = [0.6, 0.0, 0.8];
        let y00 = 1.0 / (4.0 * PI).sqrt();
        assert!((real_sh(0, 0, &d) - y00).abs() < 1e-15);
        let y20 = (5.0 / (16.0 * PI)).sqrt() * (3.0 * 0.64 - 1.0);
        assert!((real_sh(2, 0, &d) - y20).abs() < 1e-14);
        // sqrt(2) * sqrt(15/(32 pi)) sin^2(t) cos(2p) at p = 0
        let y22 = 2f64.sqrt() * (15.0 / (32.0 * PI)).sqrt() * 0.36;
        assert!((real_sh(2, 2, &d) - y22).abs() < 1e-14);
    }

    #[test]
    fn basis_is_orthonormal_under_quadrature() {
        // Gauss-Legendre in cos(t) would be tidier; a dense Fibonacci sphere is enough here.
        let n = 20000;
        let mut dirs = hemisphere_directions(n);
        dirs.extend(
            hemisphere_directions(n)
                .into_iter()
                .map(|d| [-d[0], -d[1], -d[2]]),
        );
        let b = sh_basis(&dirs, 4);
        let gram = b.transpose() * &b * (4.0 * PI / dirs.len() as f64);
        for i in 0..15 {
            for j in 0..15 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (gram[(i, j)] - want).abs() < 2e-3,
                    "({i},{j}) = {}",
                    gram[(i, j)]
                );
            }
        }
    }

    #[test]
    fn constant_signal() {
        let g = shell(30);
        let fit = fit_sh(&vec![1.0; 30], &g, 4).unwrap();
        assert!((fit.coeff(0, 0) - (4.0 * PI).sqrt()).abs() < 1e-12);
        for c in &fit.coeffs[1..] {
            assert!(c.abs() < 1e-10);
        }
        assert!((fit.rish(0) - 4.0 * PI).abs() < 1e-10);
        assert!(fit.rish(2) < 1e-20);
        assert_eq!(fit.convention, SH_CONVENTION);
    }

    #[test]
    fn pure_y20_round_trip() {
        let g = shell(40);
        let s: Vec<f64> = g.directions().iter().map(|d| real_sh(2, 0, d)).collect();
        let fit = fit_sh(&s, &g, 4).unwrap();
        for (i, c) in fit.coeffs.iter().enumerate() {
            let want = if i == sh_index(2, 0) { 1.0 } else { 0.0 };
            assert!((c - want).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_coefficients_give_zero_rish() {
        let fit = ShFit {
            order: 4,
            coeffs: vec![0.0; 15],
            convention: SH_CONVENTION,
        };
        for l in [0, 2, 4] {
            assert_eq!(rish(&fit, l), 0.0);
        }
    }

    #[test]
    fn too_few_directions() {
        let g = shell(10);
        assert!(matches!(
            fit_sh(&[1.0; 10], &g, 4),
            Err(Error::Underdetermined {
                directions: 10,
                coefficients: 15
            })
        ));
    }

    #[test]
    fn regularization_shrinks_high_bands() {
        let dirs = hemisphere_directions(30);
        let s: Vec<f64> = dirs.iter().map(|d| 1.0 + real_sh(4, 1, d)).collect();
        let plain = ShModel::new(&dirs, 4, 0.0).unwrap().fit(&s).unwrap();
        let reg = ShModel::new(&dirs, 4, 1e-3).unwrap().fit(&s).unwrap();
        assert!(reg.rish(4) < plain.rish(4));
    }

    fn rotation(a: f64, b: f64, c: f64) -> [[f64; 3]; 3] {
        let (sa, ca) = a.sin_cos();
        let (sb, cb) = b.sin_cos();
        let (sc, cc) = c.sin_cos();
        let rz1 = [[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]];
        let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
        let rz2 = [[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]];
        let mul = |p: [[f64; 3]; 3], q: [[f64; 3]; 3]| {
            let mut r = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    r[i][j] = (0..3).map(|k| p[i][k] * q[k][j]).sum();
                }
            }
            r
        };
        mul(mul(rz1, ry), rz2)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn rish_is_rotation_invariant(
            a in 0.0..std::f64::consts::TAU, b in 0.0..std::f64::consts::PI, c in 0.0..std::f64::consts::TAU,
            coeffs in prop::collection::vec(-1.0..1.0f64, 15),
            n in 20usize..60,
        ) {
            let g = shell(n);
            let truth = ShFit { order: 4, coeffs, convention: SH_CONVENTION };
            let s = truth.evaluate(g.directions());
            let fit = fit_sh(&s, &g, 4).unwrap();
            let rotated = g.rotated(&rotation(a, b, c));
            let fit_r = fit_sh(&s, &rotated, 4).unwrap();
            for l in [0, 2, 4] {
                prop_assert!((fit.rish(l) - fit_r.rish(l)).abs() < 1e-8);
            }
            // band-limited signals are reproduced at the fit directions
            for (x, y) in fit.evaluate(g.directions()).iter().zip(&s) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
