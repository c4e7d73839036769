//! Synthetic diffusion phantom with known tensors.
//!
//! Each slice holds a disc of tissue on a dim background. A small elliptical
//! CSF region sits near the center, WM fills a core whose boundary is folded
//! into a seeded number of gyri, and GM forms the outer ribbon. WM fibres run
//! circumferentially around the center with a slow tilt through z.
//!
//! Tissue boundaries are soft: every voxel carries a single tensor and S0
//! blended from the tissue values with logistic weights about one voxel wide,
//! and its label is the tissue with the largest weight.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::TensorFit;
use crate::error::{Error, Result};
use crate::gradient::GradientTable;
use crate::volume::{Dims, TissueLabel, TissueMask, Volume4D};

/// Reference b=0 intensity of CSF.
pub const PHANTOM_S0: f64 = 1000.0;
pub const PHANTOM_VOXEL_MM: f64 = 1.25;

pub const WM_EIGENVALUES: [f64; 3] = [1.7e-3, 0.3e-3, 0.3e-3];
pub const GM_DIFFUSIVITY: f64 = 0.8e-3;
pub const CSF_DIFFUSIVITY: f64 = 3.0e-3;
const BACKGROUND_DIFFUSIVITY: f64 = 1.0e-3;

const HEAD_RADIUS: f64 = 0.85;
const WM_RADIUS: f64 = 0.55;
const FOLD_DEPTH: f64 = 0.12;
const MIN_FOLDS: u32 = 5;
const MAX_FOLDS: u32 = 8;
const EDGE_VOXELS: f64 = 0.75;
const NOISE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: Volume4D,
    pub mask: TissueMask,
    /// Ground-truth tensor per voxel, x fastest.
    pub truth: Vec<TensorFit>,
    /// Rician sigma in native units, if noise was added.
    pub noise_sigma: Option<f64>,
}

impl Phantom {
    /// Ground-truth FA and MD as single-frame volumes.
    pub fn truth_fa_md(&self) -> (Volume4D, Volume4D) {
        let d = Dims {
            m: 1,
            ..self.volume.dims()
        };
        let (fa, md): (Vec<f64>, Vec<f64>) = self.truth.iter().map(|t| t.fa_md()).unzip();
        (
            Volume4D::new(d, self.volume.voxel_size, fa).expect("one value per voxel"),
            Volume4D::new(d, self.volume.voxel_size, md).expect("one value per voxel"),
        )
    }
}

fn axis(i: usize, n: usize) -> f64 {
    if n < 2 {
        0.0
    } else {
        (2.0 * i as f64 - (n - 1) as f64) / (n - 1) as f64
    }
}

struct Layout {
    csf_center: [f64; 2],
    folds: f64,
    phase: f64,
}

impl Layout {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let csf_center = [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)];
        let folds = rng.random_range(MIN_FOLDS..=MAX_FOLDS) as f64;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        Self {
            csf_center,
            folds,
            phase,
        }
    }

    /// Radius of the folded WM/GM boundary at polar angle `theta`.
    fn wm_radius(&self, theta: f64) -> f64 {
        WM_RADIUS + FOLD_DEPTH * (self.folds * theta + self.phase).sin()
    }

    /// Weights of background, WM, GM and CSF, summing to one.
    fn weights(&self, u: f64, v: f64, edge: f64) -> [f64; 4] {
        let logistic = |t: f64| 1.0 / (1.0 + (-t / edge).exp());
        let head = logistic(HEAD_RADIUS - (u * u + v * v).sqrt());
        let (du, dv) = (u - self.csf_center[0], v - self.csf_center[1]);
        // radial distance to the ellipse boundary, in units of its short axis
        let csf = logistic(0.14 * (1.0 - ((du / 0.22).powi(2) + (dv / 0.14).powi(2)).sqrt()));
        let r = (u * u + v * v).sqrt();
        let wm = logistic(self.wm_radius(v.atan2(u)) - r);
        [
            1.0 - head,
            head * (1.0 - csf) * wm,
            head * (1.0 - csf) * (1.0 - wm),
            head * csf,
        ]
    }
}

fn wm_tensor(u: f64, v: f64, w: f64) -> [f64; 6] {
    let alpha = v.atan2(u);
    let e = [-alpha.sin(), alpha.cos(), 0.3 * w];
    let n = (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
    let e = e.map(|c| c / n);
    let [l1, l2, _] = WM_EIGENVALUES;
    let a = l1 - l2;
    [
        l2 + a * e[0] * e[0],
        l2 + a * e[1] * e[1],
        l2 + a * e[2] * e[2],
        a * e[0] * e[1],
        a * e[0] * e[2],
        a * e[1] * e[2],
    ]
}

fn iso(d: f64) -> [f64; 6] {
    [d, d, d, 0.0, 0.0, 0.0]
}

/// Builds a phantom sampled with `scheme`. `snr` is the mean foreground b=0
/// signal over the Rician noise sigma; `None` gives noise-free data.
pub fn make_phantom(
    spatial: [usize; 3],
    scheme: &GradientTable,
    seed: u64,
    snr: Option<f64>,
) -> Result<Phantom> {
    let [nx, ny, nz] = spatial;
    if nx == 0 || ny == 0 || nz == 0 || scheme.is_empty() {
        return Err(Error::Shape(format!(
            "phantom needs non-empty dims and scheme, got {nx}x{ny}x{nz} with {} measurements",
            scheme.len()
        )));
    }
    if let Some(s) = snr {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Config(format!(
                "SNR must be positive and finite, got {s}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = Layout::new(&mut rng);
    let dims = Dims::new(nx, ny, nz, scheme.len());
    // about one voxel in normalized in-plane coordinates
    let edge = EDGE_VOXELS * 2.0 / (nx.max(ny).max(2) - 1) as f64;

    let mut labels = Vec::with_capacity(dims.n_voxels());
    let mut truth = Vec::with_capacity(dims.n_voxels());
    for z in 0..nz {
        let w = axis(z, nz);
        for y in 0..ny {
            let v = axis(y, ny);
            for x in 0..nx {
                let u = axis(x, nx);
                let w_t = layout.weights(u, v, edge);
                let shade = 1.0 + 0.1 * u - 0.05 * v;
                let tissue = [
                    (0.05, iso(BACKGROUND_DIFFUSIVITY)),
                    (0.7 * shade, wm_tensor(u, v, w)),
                    (0.85 * shade, iso(GM_DIFFUSIVITY)),
                    (shade, iso(CSF_DIFFUSIVITY)),
                ];
                let mut s0 = 0.0;
                let mut d = [0.0; 6];
                for (wt, (rel, dt)) in w_t.iter().zip(&tissue) {
                    s0 += wt * rel;
                    for k in 0..6 {
                        d[k] += wt * dt[k];
                    }
                }
                let best = (0..4).fold(0, |b, k| if w_t[k] > w_t[b] { k } else { b });
                labels.push(TissueLabel::ALL[best]);
                truth.push(TensorFit::from_components(PHANTOM_S0 * s0, d));
            }
        }
    }

    let mut volume = Volume4D::zeros(dims, [PHANTOM_VOXEL_MM; 3])?;
    for (m, (&b, g)) in scheme
        .b_values()
        .iter()
        .zip(scheme.directions())
        .enumerate()
    {
        for (s, t) in volume.frame_mut(m).iter_mut().zip(&truth) {
            *s = t.signal(b, g);
        }
    }

    let noise_sigma = snr.map(|snr| {
        let fg: Vec<f64> = truth
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l != TissueLabel::Background)
            .map(|(t, _)| t.s0)
            .collect();
        let mean = if fg.is_empty() {
            truth.iter().map(|t| t.s0).sum::<f64>() / truth.len() as f64
        } else {
            fg.iter().sum::<f64>() / fg.len() as f64
        };
        mean / snr
    });
    if let Some(sigma) = noise_sigma {
        let mut noise = ChaCha8Rng::seed_from_u64(seed ^ NOISE_STREAM);
        for s in volume.data_mut() {
            let re: f64 = noise.sample(StandardNormal);
            let im: f64 = noise.sample(StandardNormal);
            *s = ((*s + sigma * re).powi(2) + (sigma * im).powi(2)).sqrt();
        }
    }

    Ok(Phantom {
        volume,
        mask: TissueMask::new([nx, ny, nz], labels)?,
        truth,
        noise_sigma,
    })
}
