//! Self-supervised overfitting: full-batch ADAM on the mean squared error.
//!
//! Each epoch evaluates every grid row once and applies a single ADAM update,
//! so `epochs` equals the number of parameter updates. The parameters returned
//! are those after the final update.

use std::io::Write;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::psnr_db;
use crate::network::{
    forward, forward_cached, init_params, Activation, NetworkParams, NetworkSpec,
};
use crate::sampling::{make_grid, slice_targets, volume_targets, CoordinateGrid, GridMode};
use crate::volume::{TissueMask, Volume4D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam: AdamParams,
    pub seed: u64,
    /// Record a trace point every this many epochs (the last epoch is always
    /// recorded).
    pub loss_log_stride: usize,
}

impl TrainConfig {
    pub fn new(epochs: usize, learning_rate: f64, seed: u64) -> Result<Self> {
        let cfg = Self {
            epochs,
            learning_rate,
            adam: AdamParams::default(),
            seed,
            loss_log_stride: 10,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 2000 epochs at 3e-4 (per-slice) or 2e-4 (whole-volume).
    pub fn defaults_for(mode: GridMode, seed: u64) -> Self {
        let lr = match mode {
            GridMode::Slice2D => 3e-4,
            GridMode::Volume3D => 2e-4,
        };
        Self::new(2000, lr, seed).expect("defaults are valid")
    }

    pub fn validate(&self) -> Result<()> {
        let AdamParams { beta1, beta2, eps } = self.adam;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::Config(format!(
                "ADAM betas must lie in [0, 1): {beta1}, {beta2}"
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::Config(format!(
                "ADAM epsilon must be > 0, got {eps}"
            )));
        }
        if self.loss_log_stride == 0 {
            return Err(Error::Config("loss_log_stride must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    /// 1-based; the loss is that of the parameters entering this epoch.
    pub epoch: usize,
    pub mse: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainTrace {
    pub points: Vec<TracePoint>,
    /// Loss of the returned (post-final-update) parameters.
    pub final_mse: f64,
    pub final_psnr: f64,
    pub wall_time_s: f64,
}

impl PartialEq for TrainTrace {
    /// Wall time is excluded.
    fn eq(&self, other: &Self) -> bool {
        self.points == other.points
            && self.final_mse.to_bits() == other.final_mse.to_bits()
            && self.final_psnr.to_bits() == other.final_psnr.to_bits()
    }
}

/// Writes `network,epoch,mse,psnr` rows for a set of traces. Wall time is
/// deliberately absent so the output is reproducible.
pub fn write_trace_csv<W: Write>(mut w: W, traces: &[TrainTrace]) -> std::io::Result<()> {
    writeln!(w, "network,epoch,mse,psnr")?;
    for (n, t) in traces.iter().enumerate() {
        for p in &t.points {
            writeln!(w, "{n},{},{:e},{}", p.epoch, p.mse, p.psnr)?;
        }
    }
    Ok(())
}

fn check_same_shape(pred: &ArrayView2<f64>, target: &ArrayView2<f64>) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    Ok(())
}

/// Mean of squared differences over every entry.
pub fn mse_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    check_same_shape(&pred, &target)?;
    masked_mse(&pred, &target, None)
}

fn masked_mse(
    pred: &ArrayView2<f64>,
    target: &ArrayView2<f64>,
    rows: Option<&[bool]>,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (r, (p, t)) in pred.outer_iter().zip(target.outer_iter()).enumerate() {
        if rows.is_some_and(|m| !m[r]) {
            continue;
        }
        for (a, b) in p.iter().zip(t.iter()) {
            let d = a - b;
            sum += d * d;
        }
        count += p.len();
    }
    if count == 0 {
        return Err(Error::EmptySelection(
            "no rows selected for the loss".into(),
        ));
    }
    Ok(sum / count as f64)
}

/// Loss and its gradient with respect to every parameter, from one forward
/// pass. `rows` restricts the loss to selected rows.
pub(crate) fn loss_and_grad(
    spec: &NetworkSpec,
    params: &NetworkParams,
    inputs: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    rows: Option<&[bool]>,
) -> Result<(f64, NetworkParams)> {
    if inputs.nrows() != targets.nrows() || targets.ncols() != spec.out_dim {
        return Err(Error::Shape(format!(
            "inputs {:?}, targets {:?}, network out_dim {}",
            inputs.dim(),
            targets.dim(),
            spec.out_dim
        )));
    }
    if let Some(m) = rows {
        if m.len() != inputs.nrows() {
            return Err(Error::Shape(format!(
                "row mask of {} for {} rows",
                m.len(),
                inputs.nrows()
            )));
        }
    }
    let cache = forward_cached(spec, params, inputs)?;
    let last = params.layers.len() - 1;
    let pred = cache.post[last].view();
    let loss = masked_mse(&pred, &targets, rows)?;

    let n_rows = rows.map_or(inputs.nrows(), |m| m.iter().filter(|&&b| b).count());
    let scale = 2.0 / (n_rows * spec.out_dim) as f64;
    let mut delta = Array2::zeros(pred.dim());
    Zip::from(delta.rows_mut())
        .and(pred.rows())
        .and(targets.rows())
        .and(cache.pre[last].rows())
        .for_each(|mut d, p, t, z| {
            for k in 0..d.len() {
                d[k] = scale * (p[k] - t[k]);
            }
            let act = spec.activation(last);
            if act != Activation::Identity {
                for k in 0..d.len() {
                    d[k] *= act.derivative(z[k], p[k]);
                }
            }
        });
    if let Some(m) = rows {
        for (r, mut d) in delta.outer_iter_mut().enumerate() {
            if !m[r] {
                d.fill(0.0);
            }
        }
    }

    let mut grads = NetworkParams::zeros(spec);
    for i in (0..=last).rev() {
        let input = if i == 0 {
            inputs
        } else {
            cache.post[i - 1].view()
        };
        grads.layers[i].weight = delta.t().dot(&input);
        grads.layers[i].bias = delta.sum_axis(Axis(0));
        if i > 0 {
            let mut back = delta.dot(&params.layers[i].weight);
            let act = spec.activation(i - 1);
            Zip::from(&mut back)
                .and(&cache.pre[i - 1])
                .and(&cache.post[i - 1])
                .for_each(|b, &z, &a| *b *= act.derivative(z, a));
            delta = back;
        }
    }
    Ok((loss, grads))
}

/// Analytic gradient of `mse_loss(forward(inputs), targets)`.
pub fn backward(
    spec: &NetworkSpec,
    params: &NetworkParams,
    inputs: ArrayView2<f64>,
    targets: ArrayView2<f64>,
) -> Result<NetworkParams> {
    loss_and_grad(spec, params, inputs, targets, None).map(|(_, g)| g)
}

/// First and second moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: NetworkParams,
    pub v: NetworkParams,
}

impl AdamState {
    pub fn new(spec: &NetworkSpec) -> Self {
        Self {
            m: NetworkParams::zeros(spec),
            v: NetworkParams::zeros(spec),
        }
    }
}

/// One bias-corrected ADAM update at step `t` (1-based), in place.
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &NetworkParams,
    state: &mut AdamState,
    adam: &AdamParams,
    learning_rate: f64,
    t: usize,
) {
    assert!(t >= 1, "ADAM steps are 1-based");
    let AdamParams { beta1, beta2, eps } = *adam;
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Overfits a freshly initialized network to `targets` on `grid`.
pub fn encode_slice(
    targets: ArrayView2<f64>,
    grid: &CoordinateGrid,
    spec: &NetworkSpec,
    config: &TrainConfig,
) -> Result<(NetworkParams, TrainTrace)> {
    encode_rows(targets, grid, spec, config, None)
}

/// As [`encode_slice`], with the loss restricted to rows where `rows` is true.
pub fn encode_rows(
    targets: ArrayView2<f64>,
    grid: &CoordinateGrid,
    spec: &NetworkSpec,
    config: &TrainConfig,
    rows: Option<&[bool]>,
) -> Result<(NetworkParams, TrainTrace)> {
    spec.validate()?;
    config.validate()?;
    if grid.rows() != targets.nrows() {
        return Err(Error::Shape(format!(
            "grid has {} rows, targets have {}",
            grid.rows(),
            targets.nrows()
        )));
    }
    if grid.coords().ncols() != spec.in_dim {
        return Err(Error::Shape(format!(
            "grid is {}-dimensional, network expects {}",
            grid.coords().ncols(),
            spec.in_dim
        )));
    }
    let start = Instant::now();
    let inputs = grid.coords().view();
    let mut params = init_params(spec, config.seed);
    let mut state = AdamState::new(spec);
    let mut points = Vec::with_capacity(config.epochs / config.loss_log_stride + 2);

    for epoch in 1..=config.epochs {
        let (loss, grads) = loss_and_grad(spec, &params, inputs, targets, rows)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch, slice: None });
        }
        if (epoch - 1) % config.loss_log_stride == 0 || epoch == config.epochs {
            points.push(TracePoint {
                epoch,
                mse: loss,
                psnr: psnr_db(loss),
            });
        }
        adam_step(
            &mut params,
            &grads,
            &mut state,
            &config.adam,
            config.learning_rate,
            epoch,
        );
    }

    let pred = forward(spec, &params, inputs)?;
    let final_mse = masked_mse(&pred.view(), &targets, rows)?;
    if !final_mse.is_finite() || !params.is_finite() {
        return Err(Error::Divergence {
            epoch: config.epochs,
            slice: None,
        });
    }
    let trace = TrainTrace {
        points,
        final_mse,
        final_psnr: psnr_db(final_mse),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok((params, trace))
}

/// Seed of network `index` in a multi-network encode.
pub fn derived_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(index as u64)
}

#[derive(Debug, Clone)]
pub struct EncodedVolume {
    pub mode: GridMode,
    pub spec: NetworkSpec,
    /// One network per slice (Slice2D) or a single one (Volume3D).
    pub networks: Vec<NetworkParams>,
    pub traces: Vec<TrainTrace>,
}

impl EncodedVolume {
    /// Mean of the per-network final losses. Without a mask every network
    /// sees the same number of rows, so this is the global MSE of the
    /// unquantized reconstruction.
    pub fn final_mse(&self) -> f64 {
        self.traces.iter().map(|t| t.final_mse).sum::<f64>() / self.traces.len() as f64
    }
}

/// Encodes a normalized volume. In Slice2D mode the slices are independent
/// jobs on the rayon pool, slice `z` seeded with `seed + z`.
///
/// With a mask, only foreground voxels contribute to the loss.
pub fn encode_volume(
    v: &Volume4D,
    spec: &NetworkSpec,
    config: &TrainConfig,
    mode: GridMode,
    mask: Option<&TissueMask>,
) -> Result<EncodedVolume> {
    if v.norm_bounds.is_none() {
        return Err(Error::Config(
            "volume must be normalized before encoding".into(),
        ));
    }
    let d = v.dims();
    if spec.in_dim != mode.in_dim() || spec.out_dim != d.m {
        return Err(Error::Shape(format!(
            "spec maps {} -> {}, {mode:?} encode of {d:?} needs {} -> {}",
            spec.in_dim,
            spec.out_dim,
            mode.in_dim(),
            d.m
        )));
    }
    if let Some(m) = mask {
        m.check_matches(v)?;
    }
    let grid = make_grid(d, mode);
    let results: Vec<(NetworkParams, TrainTrace)> = match mode {
        GridMode::Slice2D => (0..d.nz)
            .into_par_iter()
            .map(|z| {
                let targets = slice_targets(v, z)?;
                let plane = d.nx * d.ny;
                let rows: Option<Vec<bool>> =
                    mask.map(|m| (0..plane).map(|r| m.is_foreground(z * plane + r)).collect());
                if rows.as_ref().is_some_and(|r| !r.contains(&true)) {
                    // Nothing to fit; keep the initialization.
                    let params = init_params(spec, derived_seed(config.seed, z));
                    return Ok((params, empty_trace()));
                }
                let cfg = TrainConfig {
                    seed: derived_seed(config.seed, z),
                    ..*config
                };
                encode_rows(targets.view(), &grid, spec, &cfg, rows.as_deref()).map_err(|e| match e
                {
                    Error::Divergence { epoch, .. } => Error::Divergence {
                        epoch,
                        slice: Some(z),
                    },
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?,
        GridMode::Volume3D => {
            let targets = volume_targets(v);
            let rows: Option<Vec<bool>> =
                mask.map(|m| (0..d.n_voxels()).map(|i| m.is_foreground(i)).collect());
            vec![encode_rows(
                targets.view(),
                &grid,
                spec,
                config,
                rows.as_deref(),
            )?]
        }
    };
    let (networks, traces) = results.into_iter().unzip();
    Ok(EncodedVolume {
        mode,
        spec: *spec,
        networks,
        traces,
    })
}

fn empty_trace() -> TrainTrace {
    TrainTrace {
        points: Vec::new(),
        final_mse: 0.0,
        final_psnr: f64::INFINITY,
        wall_time_s: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Variant;
    use crate::volume::Dims;
    use ndarray::array;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(
        variant: Variant,
        in_dim: usize,
        layers: usize,
        units: usize,
        out: usize,
    ) -> NetworkSpec {
        NetworkSpec {
            in_dim,
            out_dim: out,
            hidden_layers: layers,
            hidden_units: units,
            variant,
            omega0: 30.0,
        }
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn mse_basics() {
        let a = array![[0.2, 0.4], [0.6, 0.8]];
        assert_eq!(mse_loss(a.view(), a.view()).unwrap(), 0.0);
        let b = a.mapv(|v| v + 0.1);
        assert!((mse_loss(a.view(), b.view()).unwrap() - 0.01).abs() < 1e-15);
        assert!(matches!(
            mse_loss(a.view(), array![[1.0]].view()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn mse_matches_elementwise_sum() {
        let a = random_matrix(3, 4, 1);
        let b = random_matrix(3, 4, 2);
        let mut sum = 0.0;
        for i in 0..3 {
            for j in 0..4 {
                sum += (a[[i, j]] - b[[i, j]]).powi(2);
            }
        }
        assert!((mse_loss(a.view(), b.view()).unwrap() - sum / 12.0).abs() < 1e-15);
    }

    #[test]
    fn zero_relu_net_has_zero_gradient_at_zero() {
        let s = spec(Variant::MlpRelu, 2, 2, 5, 3);
        let p = NetworkParams::zeros(&s);
        let g = backward(
            &s,
            &p,
            Array2::zeros((4, 2)).view(),
            Array2::zeros((4, 3)).view(),
        )
        .unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_is_linear_in_residual() {
        let s = spec(Variant::SirenPure, 2, 1, 8, 3);
        let p = init_params(&s, 3);
        let x = random_matrix(6, 2, 4);
        let t = random_matrix(6, 3, 5);
        let pred = forward(&s, &p, x.view()).unwrap();
        let g = backward(&s, &p, x.view(), t.view()).unwrap();
        // residual pred - t' = t - pred: gradient flips sign
        let flipped = &pred * 2.0 - &t;
        let gf = backward(&s, &p, x.view(), flipped.view()).unwrap();
        // residual pred - t'' = 2 (pred - t): gradient doubles
        let doubled = &t * 2.0 - &pred;
        let gd = backward(&s, &p, x.view(), doubled.view()).unwrap();
        for ((a, b), c) in g.iter().zip(gf.iter()).zip(gd.iter()) {
            assert!((a + b).abs() <= 1e-12 * a.abs().max(1.0));
            assert!((2.0 * a - c).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn masked_rows_do_not_contribute() {
        let s = spec(Variant::MlpTanh, 2, 1, 4, 2);
        let p = init_params(&s, 8);
        let x = random_matrix(5, 2, 1);
        let t = random_matrix(5, 2, 2);
        let keep = [true, false, true, false, true];
        let (l, g) = loss_and_grad(&s, &p, x.view(), t.view(), Some(&keep)).unwrap();
        let idx = [0, 2, 4];
        let xs = x.select(Axis(0), &idx);
        let ts = t.select(Axis(0), &idx);
        let (l2, g2) = loss_and_grad(&s, &p, xs.view(), ts.view(), None).unwrap();
        assert!((l - l2).abs() < 1e-15);
        for (a, b) in g.iter().zip(g2.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let s = spec(Variant::MlpRelu, 1, 1, 1, 1);
        let mut p = NetworkParams::zeros(&s);
        let mut g = NetworkParams::zeros(&s);
        let vals = [0.5, -2.0, 1e-3, 7.0, -0.01];
        g.iter_mut().zip(vals).for_each(|(d, v)| *d = v);
        let mut st = AdamState::new(&s);
        let adam = AdamParams::default();
        adam_step(&mut p, &g, &mut st, &adam, 0.1, 1);
        for (&pv, gv) in p.iter().zip(vals) {
            let want = -0.1 * gv.signum();
            assert!((pv - want).abs() <= 0.1 * adam.eps / gv.abs() + 1e-15);
        }
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let s = spec(Variant::MlpRelu, 2, 1, 3, 1);
        let mut p = init_params(&s, 1);
        let before = p.clone();
        let mut st = AdamState::new(&s);
        adam_step(
            &mut p,
            &NetworkParams::zeros(&s),
            &mut st,
            &AdamParams::default(),
            0.1,
            1,
        );
        assert_eq!(p, before);
    }

    #[test]
    fn config_validation() {
        assert!(matches!(
            TrainConfig::new(0, 1e-3, 0),
            Err(Error::Config(_))
        ));
        assert!(TrainConfig::new(1, 0.0, 0).is_err());
        let mut c = TrainConfig::new(10, 1e-3, 0).unwrap();
        c.adam.beta1 = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn constant_target_converges() {
        // ADAM moves each parameter by about lr per update, so at lr 3e-4 the
        // output bias alone needs well over 1000 updates to travel 0.5.
        let s = spec(Variant::SirenPure, 2, 1, 16, 1);
        let grid = make_grid(Dims::new(8, 8, 1, 1), GridMode::Slice2D);
        let t = Array2::from_elem((64, 1), 0.5);
        let cfg = TrainConfig::new(8000, 3e-4, 0).unwrap();
        let (_, trace) = encode_slice(t.view(), &grid, &s, &cfg).unwrap();
        assert!(trace.final_mse < 1e-6, "final mse {}", trace.final_mse);
    }

    #[test]
    fn trace_is_deterministic_and_consistent() {
        let s = spec(Variant::SirenPure, 2, 2, 8, 2);
        let grid = make_grid(Dims::new(5, 4, 1, 1), GridMode::Slice2D);
        let t = random_matrix(20, 2, 3).mapv(f64::abs);
        let mut cfg = TrainConfig::new(25, 1e-3, 42).unwrap();
        cfg.loss_log_stride = 4;
        let (p1, t1) = encode_slice(t.view(), &grid, &s, &cfg).unwrap();
        let (p2, t2) = encode_slice(t.view(), &grid, &s, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(t1, t2);
        let epochs: Vec<_> = t1.points.iter().map(|p| p.epoch).collect();
        assert_eq!(epochs, vec![1, 5, 9, 13, 17, 21, 25]);
        for p in &t1.points {
            assert_eq!(p.psnr, -10.0 * p.mse.log10());
        }
    }

    #[test]
    fn divergence_is_reported() {
        let s = spec(Variant::MlpRelu, 2, 1, 4, 1);
        let grid = make_grid(Dims::new(3, 3, 1, 1), GridMode::Slice2D);
        let t = Array2::from_elem((9, 1), f64::NAN);
        let cfg = TrainConfig::new(5, 1e-3, 0).unwrap();
        let err = encode_slice(t.view(), &grid, &s, &cfg).unwrap_err();
        assert!(matches!(
            err,
            Error::Divergence {
                epoch: 1,
                slice: None
            }
        ));
    }

    #[test]
    fn csv_has_no_wall_time() {
        let trace = TrainTrace {
            points: vec![TracePoint {
                epoch: 1,
                mse: 0.01,
                psnr: 20.0,
            }],
            final_mse: 0.01,
            final_psnr: 20.0,
            wall_time_s: 3.5,
        };
        let mut out = Vec::new();
        write_trace_csv(&mut out, &[trace]).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "network,epoch,mse,psnr\n0,1,1e-2,20\n"
        );
    }
}
