//! Lossy compression of multidimensional volumes by overfitting coordinate
//! networks with sinusoidal activations.
//!
//! The encoder trains one network per slice (or one per volume) to map grid
//! coordinates to the normalized signal, quantizes the parameters and stores
//! them in an LZMA-compressed container. Decoding evaluates the network on the
//! grid. Fidelity is measured with image metrics and with diffusion-MRI model
//! fits (tensor FA/MD, spherical-harmonic RISH features).

pub mod codec;
pub mod dwi;
pub mod error;
pub mod gradient;
pub mod metrics;
pub mod network;
pub mod nifti;
pub mod sampling;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use gradient::GradientTable;
pub use network::{init_params, NetworkParams, NetworkSpec, Variant};
pub use sampling::{make_grid, CoordinateGrid, GridMode};
pub use volume::{select_shell, Dims, NormBounds, TissueLabel, TissueMask, Volume4D};
