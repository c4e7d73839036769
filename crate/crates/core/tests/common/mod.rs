#![allow(dead_code)]

use ndarray::Array2;
use nrvc_core::dwi::make_phantom;
use nrvc_core::network::forward;
use nrvc_core::training::{backward, mse_loss};
use nrvc_core::{init_params, GradientTable, NetworkParams, NetworkSpec, Variant, Volume4D};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VARIANTS: [Variant; 5] = [
    Variant::SirenPure,
    Variant::SirenReluLast,
    Variant::MlpRelu,
    Variant::MlpTanh,
    Variant::HybridSirenFirst,
];

pub fn phantom(spatial: [usize; 3], shells: &[(f64, usize)], snr: Option<f64>) -> Volume4D {
    let g = GradientTable::multi_shell(1, shells);
    make_phantom(spatial, &g, 42, snr)
        .unwrap()
        .volume
        .normalize()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

/// Largest relative gap between the analytic gradient and central differences.
pub fn fd_gap(spec: &NetworkSpec, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.random_range(3..9);
    let x = random_matrix(&mut rng, rows, spec.in_dim, -1.0, 1.0);
    let t = random_matrix(&mut rng, rows, spec.out_dim, -0.5, 1.0);
    // zero biases can park ReLU pre-activations exactly on the kink
    let mut params = init_params(spec, seed);
    for layer in &mut params.layers {
        layer
            .bias
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-0.5..0.5));
    }
    let grads = backward(spec, &params, x.view(), t.view())
        .unwrap()
        .to_flat();
    let flat = params.to_flat();
    let loss = |p: &[f64]| {
        let p = NetworkParams::from_flat(spec, p).unwrap();
        mse_loss(forward(spec, &p, x.view()).unwrap().view(), t.view()).unwrap()
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut probe = flat.clone();
    for i in 0..flat.len() {
        probe[i] = flat[i] + h;
        let up = loss(&probe);
        probe[i] = flat[i] - h;
        let down = loss(&probe);
        probe[i] = flat[i];
        let fd = (up - down) / (2.0 * h);
        // absolute floor keeps vanishing entries from dominating
        let gap = (grads[i] - fd).abs() / grads[i].abs().max(fd.abs()).max(1e-6);
        worst = worst.max(gap);
    }
    worst
}
