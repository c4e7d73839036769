//! Coordinate grids fed to the networks, and the mapping between grid rows and
//! volume samples.
//!
//! Rows are flattened with x fastest, then y, then z. Every axis is mapped
//! onto [-1, 1] by index alone; voxel spacing does not enter.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, Volume4D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridMode {
    /// One network per z-slice over (x, y).
    Slice2D,
    /// One network over (x, y, z).
    Volume3D,
}

impl GridMode {
    pub fn in_dim(self) -> usize {
        match self {
            GridMode::Slice2D => 2,
            GridMode::Volume3D => 3,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            GridMode::Slice2D => 0,
            GridMode::Volume3D => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(GridMode::Slice2D),
            1 => Some(GridMode::Volume3D),
            _ => None,
        }
    }

    /// Number of networks needed for a volume of these dims.
    pub fn n_networks(self, dims: Dims) -> usize {
        match self {
            GridMode::Slice2D => dims.nz,
            GridMode::Volume3D => 1,
        }
    }
}

/// Evenly spaced positions on [-1, 1]; a single-sample axis sits at 0.
///
/// Computed as `(2i - (n-1)) / (n-1)` so that mirrored indices give exactly
/// negated values.
pub fn axis_coords(n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![0.0; n];
    }
    let span = (n - 1) as f64;
    (0..n).map(|i| (2.0 * i as f64 - span) / span).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateGrid {
    mode: GridMode,
    shape: Vec<usize>,
    coords: Array2<f64>,
}

impl CoordinateGrid {
    pub fn mode(&self) -> GridMode {
        self.mode
    }

    /// Lengths of the gridded axes, x first.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn coords(&self) -> &Array2<f64> {
        &self.coords
    }

    pub fn rows(&self) -> usize {
        self.coords.nrows()
    }

    /// Grid position (x, y[, z]) to flat row.
    pub fn encode(&self, pos: &[usize]) -> usize {
        debug_assert_eq!(pos.len(), self.shape.len());
        pos.iter()
            .zip(&self.shape)
            .rev()
            .fold(0, |acc, (&p, &n)| acc * n + p)
    }

    /// Flat row to grid position.
    pub fn decode(&self, mut row: usize) -> Vec<usize> {
        self.shape
            .iter()
            .map(|&n| {
                let p = row % n;
                row /= n;
                p
            })
            .collect()
    }
}

pub fn make_grid(dims: Dims, mode: GridMode) -> CoordinateGrid {
    let shape = match mode {
        GridMode::Slice2D => vec![dims.nx, dims.ny],
        GridMode::Volume3D => vec![dims.nx, dims.ny, dims.nz],
    };
    let axes: Vec<Vec<f64>> = shape.iter().map(|&n| axis_coords(n)).collect();
    let rows: usize = shape.iter().product();
    let mut coords = Array2::zeros((rows, shape.len()));
    let mut grid = CoordinateGrid {
        mode,
        shape,
        coords: Array2::zeros((0, 0)),
    };
    for r in 0..rows {
        for (k, p) in grid.decode(r).into_iter().enumerate() {
            coords[[r, k]] = axes[k][p];
        }
    }
    grid.coords = coords;
    grid
}

/// The (nx*ny) x m target matrix for slice `z`, rows in grid order.
pub fn slice_targets(v: &Volume4D, z: usize) -> Result<Array2<f64>> {
    let d = v.dims();
    if z >= d.nz {
        return Err(Error::Index {
            index: z,
            len: d.nz,
        });
    }
    let plane = d.nx * d.ny;
    let offset = z * plane;
    let mut t = Array2::zeros((plane, d.m));
    for m in 0..d.m {
        let frame = &v.frame(m)[offset..offset + plane];
        t.column_mut(m)
            .iter_mut()
            .zip(frame)
            .for_each(|(o, &s)| *o = s);
    }
    Ok(t)
}

/// The (nx*ny*nz) x m target matrix for the whole volume.
pub fn volume_targets(v: &Volume4D) -> Array2<f64> {
    let d = v.dims();
    let mut t = Array2::zeros((d.n_voxels(), d.m));
    for m in 0..d.m {
        t.column_mut(m)
            .iter_mut()
            .zip(v.frame(m))
            .for_each(|(o, &s)| *o = s);
    }
    t
}

/// Inverse of [`slice_targets`]: writes rows back into slice `z`.
pub fn scatter_slice(v: &mut Volume4D, z: usize, rows: &Array2<f64>) -> Result<()> {
    let d = v.dims();
    let plane = d.nx * d.ny;
    if z >= d.nz {
        return Err(Error::Index {
            index: z,
            len: d.nz,
        });
    }
    if rows.dim() != (plane, d.m) {
        return Err(Error::Shape(format!(
            "slice output {:?}, expected {:?}",
            rows.dim(),
            (plane, d.m)
        )));
    }
    for m in 0..d.m {
        let frame = &mut v.frame_mut(m)[z * plane..(z + 1) * plane];
        frame
            .iter_mut()
            .zip(rows.column(m))
            .for_each(|(o, &s)| *o = s);
    }
    Ok(())
}

/// Inverse of [`volume_targets`].
pub fn scatter_volume(v: &mut Volume4D, rows: &Array2<f64>) -> Result<()> {
    let d = v.dims();
    if rows.dim() != (d.n_voxels(), d.m) {
        return Err(Error::Shape(format!(
            "volume output {:?}, expected {:?}",
            rows.dim(),
            (d.n_voxels(), d.m)
        )));
    }
    for m in 0..d.m {
        v.frame_mut(m)
            .iter_mut()
            .zip(rows.column(m))
            .for_each(|(o, &s)| *o = s);
    }
    Ok(())
}
