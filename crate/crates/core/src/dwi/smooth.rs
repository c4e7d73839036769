//! Separable Gaussian smoothing baseline.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::Volume4D;

pub const DEFAULT_FWHM_VOXELS: f64 = 1.5;

pub fn fwhm_to_sigma(fwhm: f64) -> f64 {
    fwhm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt())
}

/// Normalized kernel truncated at 4 sigma. Index `radius` is the center.
pub fn gaussian_kernel(fwhm: f64) -> Result<Vec<f64>> {
    if !(fwhm > 0.0 && fwhm.is_finite()) {
        return Err(Error::Config(format!("FWHM must be positive, got {fwhm}")));
    }
    let sigma = fwhm_to_sigma(fwhm);
    let radius = (4.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    Ok(k)
}

fn convolve_line(line: &[f64], kernel: &[f64], out: &mut [f64]) {
    let r = (kernel.len() / 2) as i64;
    let n = line.len() as i64;
    for (i, o) in out.iter_mut().enumerate() {
        let i = i as i64;
        let lo = (i - r).max(0);
        let hi = (i + r).min(n - 1);
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for j in lo..=hi {
            let w = kernel[(j - i + r) as usize];
            acc += w * line[j as usize];
            wsum += w;
        }
        *o = acc / wsum;
    }
}

fn line_starts(axis: usize, nx: usize, ny: usize, nz: usize) -> Vec<usize> {
    match axis {
        0 => (0..ny * nz).map(|yz| yz * nx).collect(),
        1 => (0..nz)
            .flat_map(|z| (0..nx).map(move |x| x + z * nx * ny))
            .collect(),
        _ => (0..nx * ny).collect(),
    }
}

/// Smooths every measurement frame along x, y and z. Taps falling outside
/// the volume are dropped and the remaining weights renormalized.
pub fn gaussian_smooth(v: &Volume4D, fwhm: f64) -> Result<Volume4D> {
    let kernel = gaussian_kernel(fwhm)?;
    let d = v.dims();
    let (nx, ny, nz) = (d.nx, d.ny, d.nz);
    let axes = [(nx, 1), (ny, nx), (nz, nx * ny)];
    let mut out = v.clone();
    out.data_mut()
        .par_chunks_mut(d.n_voxels())
        .for_each(|frame| {
            for (axis, &(n, stride)) in axes.iter().enumerate() {
                if n == 1 {
                    continue;
                }
                let mut line = vec![0.0; n];
                let mut buf = vec![0.0; n];
                for start in line_starts(axis, nx, ny, nz) {
                    for (i, l) in line.iter_mut().enumerate() {
                        *l = frame[start + i * stride];
                    }
                    convolve_line(&line, &kernel, &mut buf);
                    for (i, b) in buf.iter().enumerate() {
                        frame[start + i * stride] = *b;
                    }
                }
            }
        });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;
    use proptest::prelude::*;

    fn vol(nx: usize, ny: usize, nz: usize, m: usize, f: impl Fn(usize) -> f64) -> Volume4D {
        let d = Dims::new(nx, ny, nz, m);
        Volume4D::new(d, [1.0; 3], (0..d.len()).map(f).collect()).unwrap()
    }

    #[test]
    fn kernel_shape() {
        let k = gaussian_kernel(1.5).unwrap();
        let sigma = 1.5 / (2.0 * (2.0 * 2f64.ln()).sqrt());
        assert!((sigma - 0.637_000).abs() < 1e-5);
        assert_eq!(k.len(), 2 * 3 + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..3 {
            assert_eq!(k[i], k[6 - i]);
            assert!(k[i] < k[i + 1]);
        }
        assert!(gaussian_kernel(0.0).is_err());
        assert!(gaussian_kernel(-1.0).is_err());
    }

    #[test]
    fn constant_unchanged() {
        let v = vol(7, 5, 4, 2, |_| 3.25);
        let s = gaussian_smooth(&v, 1.5).unwrap();
        for x in s.data() {
            assert!((x - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_response() {
        let (nx, ny, nz) = (15, 15, 15);
        let d = Dims::new(nx, ny, nz, 1);
        let c = d.voxel_index(7, 7, 7);
        let v = vol(nx, ny, nz, 1, |i| if i == c { 1.0 } else { 0.0 });
        let s = gaussian_smooth(&v, 1.5).unwrap();
        let k = gaussian_kernel(1.5).unwrap();
        let r = k.len() / 2;
        assert!((s.data()[c] - k[r].powi(3)).abs() < 1e-15);
        assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // separable: value at offset (1, 2, 0) is the kernel product
        let off = d.voxel_index(8, 9, 7);
        assert!((s.data()[off] - k[r + 1] * k[r + 2] * k[r]).abs() < 1e-15);
    }

    #[test]
    fn edge_taps_renormalized() {
        let v = vol(4, 1, 1, 1, |i| [1.0, 0.0, 0.0, 0.0][i]);
        let s = gaussian_smooth(&v, 1.5).unwrap();
        let k = gaussian_kernel(1.5).unwrap();
        let r = k.len() / 2;
        let w0: f64 = k[r..r + 4].iter().sum();
        assert!((s.data()[0] - k[r] / w0).abs() < 1e-15);
    }

    #[test]
    fn frames_independent() {
        let v = vol(6, 6, 3, 2, |i| if i < 108 { 0.0 } else { (i % 7) as f64 });
        let s = gaussian_smooth(&v, 2.0).unwrap();
        assert!(s.frame(0).iter().all(|&x| x == 0.0));
    }

    fn variance(x: &[f64]) -> f64 {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn commutes_with_constant_and_reduces_variance(
            data in prop::collection::vec(-5.0..5.0f64, 6 * 5 * 3),
            c in -10.0..10.0f64,
        ) {
            let v = vol(6, 5, 3, 1, |i| data[i]);
            let shifted = vol(6, 5, 3, 1, |i| data[i] + c);
            let a = gaussian_smooth(&v, 1.5).unwrap();
            let b = gaussian_smooth(&shifted, 1.5).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x + c - y).abs() < 1e-9);
            }
            for z in 0..3 {
                let slice = vol(6, 5, 1, 1, |i| data[z * 30 + i]);
                let after = gaussian_smooth(&slice, 1.5).unwrap();
                prop_assert!(variance(after.data()) < variance(slice.data()));
            }
        }

        #[test]
        fn interior_mean_preserved(
            blob in prop::collection::vec(0.0..1.0f64, 27),
        ) {
            // support well inside the volume, so no mass reaches the edges
            let (n, lo) = (13usize, 5usize);
            let d = Dims::new(n, n, n, 1);
            let mut data = vec![0.0; d.len()];
            for (k, b) in blob.iter().enumerate() {
                let (x, y, z) = (lo + k % 3, lo + (k / 3) % 3, lo + k / 9);
                data[d.voxel_index(x, y, z)] = *b;
            }
            let v = Volume4D::new(d, [1.0; 3], data).unwrap();
            let s = gaussian_smooth(&v, 1.5).unwrap();
            let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
            prop_assert!((mean(s.data()) - mean(v.data())).abs() < 1e-6);
        }
    }
}
