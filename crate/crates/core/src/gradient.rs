//! Diffusion acquisition scheme in the FSL bvals/bvecs convention.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientTable {
    b_values: Vec<f64>,
    directions: Vec<[f64; 3]>,
}

fn norm(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

impl GradientTable {
    /// Validating constructor: every b > 0 row must carry a unit direction.
    pub fn new(b_values: Vec<f64>, directions: Vec<[f64; 3]>) -> Result<Self> {
        if b_values.len() != directions.len() {
            return Err(Error::Format(format!(
                "{} b-values but {} directions",
                b_values.len(),
                directions.len()
            )));
        }
        for (i, (b, d)) in b_values.iter().zip(&directions).enumerate() {
            if !b.is_finite() || *b < 0.0 {
                return Err(Error::Format(format!("row {i}: invalid b-value {b}")));
            }
            if *b > 0.0 && (norm(d) - 1.0).abs() > UNIT_TOL {
                return Err(Error::Format(format!(
                    "row {i}: direction {d:?} is not unit length"
                )));
            }
        }
        Ok(Self {
            b_values,
            directions,
        })
    }

    pub fn len(&self) -> usize {
        self.b_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b_values.is_empty()
    }

    pub fn b_values(&self) -> &[f64] {
        &self.b_values
    }

    pub fn directions(&self) -> &[[f64; 3]] {
        &self.directions
    }

    pub fn shell_indices(&self, b_target: f64, tol: f64) -> Vec<usize> {
        self.b_values
            .iter()
            .enumerate()
            .filter(|(_, &b)| (b - b_target).abs() <= tol)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> GradientTable {
        GradientTable {
            b_values: indices.iter().map(|&i| self.b_values[i]).collect(),
            directions: indices.iter().map(|&i| self.directions[i]).collect(),
        }
    }

    /// Concatenates rows of `other` after ours.
    pub fn concat(&self, other: &GradientTable) -> GradientTable {
        let mut out = self.clone();
        out.b_values.extend_from_slice(&other.b_values);
        out.directions.extend_from_slice(&other.directions);
        out
    }

    /// Applies a rotation matrix (row-major) to every direction.
    pub fn rotated(&self, r: &[[f64; 3]; 3]) -> GradientTable {
        let directions = self
            .directions
            .iter()
            .map(|d| {
                let mut out = [0.0; 3];
                for (i, row) in r.iter().enumerate() {
                    out[i] = row[0] * d[0] + row[1] * d[1] + row[2] * d[2];
                }
                out
            })
            .collect();
        GradientTable {
            b_values: self.b_values.clone(),
            directions,
        }
    }

    /// `n_b0` unweighted rows followed by one block per `(b, n_dirs)` shell,
    /// each shell using [`hemisphere_directions`].
    pub fn multi_shell(n_b0: usize, shells: &[(f64, usize)]) -> GradientTable {
        let mut b_values = vec![0.0; n_b0];
        let mut directions = vec![[0.0; 3]; n_b0];
        for &(b, n) in shells {
            b_values.extend(std::iter::repeat_n(b, n));
            directions.extend(hemisphere_directions(n));
        }
        GradientTable {
            b_values,
            directions,
        }
    }

    /// Parses FSL text files: one row of M b-values and three rows of M
    /// direction components. Nonzero direction columns are rescaled to unit
    /// length.
    pub fn read_fsl(bvals: &Path, bvecs: &Path) -> Result<Self> {
        let bt = fs::read_to_string(bvals).map_err(|e| Error::io(bvals, e))?;
        let vt = fs::read_to_string(bvecs).map_err(|e| Error::io(bvecs, e))?;
        Self::parse_fsl(&bt, &vt)
    }

    pub fn parse_fsl(bvals: &str, bvecs: &str) -> Result<Self> {
        let b_values: Vec<f64> = parse_numbers(bvals)?;
        let rows = bvecs
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(parse_numbers)
            .collect::<Result<Vec<_>>>()?;
        if rows.len() != 3 {
            return Err(Error::Format(format!(
                "bvecs must have 3 rows, found {}",
                rows.len()
            )));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != b_values.len() {
                return Err(Error::Format(format!(
                    "bvecs row {i} has {} columns, bvals has {}",
                    row.len(),
                    b_values.len()
                )));
            }
        }
        let directions = (0..b_values.len())
            .map(|j| {
                let d = [rows[0][j], rows[1][j], rows[2][j]];
                let n = norm(&d);
                if n > 0.0 {
                    [d[0] / n, d[1] / n, d[2] / n]
                } else {
                    d
                }
            })
            .collect();
        Self::new(b_values, directions)
    }

    pub fn to_fsl(&self) -> (String, String) {
        let join = |it: &mut dyn Iterator<Item = f64>| {
            it.map(|v| v.to_string()).collect::<Vec<_>>().join(" ") + "\n"
        };
        let bvals = join(&mut self.b_values.iter().copied());
        let bvecs = (0..3)
            .map(|k| join(&mut self.directions.iter().map(|d| d[k])))
            .collect::<String>();
        (bvals, bvecs)
    }

    pub fn write_fsl(&self, bvals: &Path, bvecs: &Path) -> Result<()> {
        let (b, v) = self.to_fsl();
        fs::write(bvals, b).map_err(|e| Error::io(bvals, e))?;
        fs::write(bvecs, v).map_err(|e| Error::io(bvecs, e))
    }
}

fn parse_numbers(line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::Format(format!("not a number: {t:?}")))
        })
        .collect()
}

/// `n` well-spread unit vectors on the upper hemisphere (Fibonacci spiral).
/// Diffusion signals are antipodally symmetric, so one hemisphere suffices.
pub fn hemisphere_directions(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_columns() {
        let g = GradientTable::parse_fsl("0 1000 1000\n", "1 0 0\n0 1 0\n0 0 1\n").unwrap();
        assert_eq!(g.b_values(), &[0.0, 1000.0, 1000.0]);
        assert_eq!(
            g.directions(),
            &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
        );
    }

    #[test]
    fn renormalizes_columns() {
        let g = GradientTable::parse_fsl("1000", "2\n0\n0").unwrap();
        assert_eq!(g.directions()[0], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn column_count_mismatch() {
        let err = GradientTable::parse_fsl("0 1000 1000", "1 0 0 1\n0 1 0 0\n0 0 1 0").unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn rejects_non_unit_direction() {
        assert!(GradientTable::new(vec![1000.0], vec![[0.5, 0.0, 0.0]]).is_err());
        // b = 0 rows may be zero vectors
        assert!(GradientTable::new(vec![0.0], vec![[0.0; 3]]).is_ok());
    }

    #[test]
    fn fsl_text_roundtrip() {
        let g = GradientTable::multi_shell(2, &[(1000.0, 10), (3000.0, 5)]);
        let (b, v) = g.to_fsl();
        let back = GradientTable::parse_fsl(&b, &v).unwrap();
        assert_eq!(back.b_values(), g.b_values());
        for (a, b) in back.directions().iter().zip(g.directions()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hemisphere_points_are_unit_and_distinct() {
        let d = hemisphere_directions(30);
        assert!(d
            .iter()
            .all(|v| (norm(v) - 1.0).abs() < 1e-12 && v[2] > 0.0));
        for i in 0..d.len() {
            for j in 0..i {
                let dot: f64 = (0..3).map(|k| d[i][k] * d[j][k]).sum();
                assert!(dot.abs() < 0.999);
            }
        }
    }
}
