use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nrvc_core::codec::{self, CompressedArtifact, PackMeta};
use nrvc_core::dwi::{self, DwiEvalConfig};
use nrvc_core::metrics::{normalize_pair, psnr_db, volume_mse, Db, MetricsReport};
use nrvc_core::nifti::{decode_nifti, uncompressed_nifti_size, write_nifti};
use nrvc_core::training::{encode_volume, write_trace_csv, TrainConfig};
use nrvc_core::{GradientTable, GridMode, NetworkSpec, TissueMask, Volume4D};
use serde_json::json;

use crate::args::*;
use crate::error::CliError;
use crate::manifest::{suffixed, RunManifest};

type Result<T> = std::result::Result<T, CliError>;

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let mut w = create(path)?;
    f(&mut w)
        .and_then(|_| std::io::Write::flush(&mut w))
        .map_err(|e| CliError::io(path, e))
}

fn read_volume(m: &mut RunManifest, path: &Path) -> Result<Volume4D> {
    Ok(decode_nifti(&m.read_input(path)?)?)
}

fn read_mask(m: &mut RunManifest, path: &Path, like: &Volume4D) -> Result<TissueMask> {
    let mask = TissueMask::from_volume(&read_volume(m, path)?)?;
    mask.check_matches(like)?;
    Ok(mask)
}

fn manifest_path(cli: &Cli, primary: &Path) -> PathBuf {
    cli.manifest
        .clone()
        .unwrap_or_else(|| suffixed(primary, ".manifest.json"))
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Encode(a) => encode(cli, a),
        Command::Decode(a) => decode(cli, a),
        Command::Metrics(a) => metrics(cli, a),
        Command::EvalDwi(a) => eval_dwi(cli, a),
        Command::Phantom(a) => phantom(cli, a),
        Command::Smooth(a) => smooth(cli, a),
    }
}

fn encode(cli: &Cli, a: &EncodeArgs) -> Result<()> {
    let mut m = RunManifest::start("encode", a, cli.jobs);
    m.seed = Some(a.seed);
    let native = read_volume(&mut m, &a.input)?;
    let mask = a
        .mask
        .as_ref()
        .map(|p| read_mask(&mut m, p, &native))
        .transpose()?;
    let v = native.normalize();
    let dims = v.dims();

    let mode = GridMode::from(a.mode);
    let spec = NetworkSpec {
        in_dim: mode.in_dim(),
        out_dim: dims.m,
        hidden_layers: a.layers.into(),
        hidden_units: a.units.into(),
        variant: a.variant.into(),
        omega0: f64::from(a.omega0 as f32),
    };
    spec.validate()?;
    let mut cfg = TrainConfig::defaults_for(mode, a.seed);
    cfg.epochs = a.epochs as usize;
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    cfg.loss_log_stride = a.log_every as usize;
    cfg.validate()?;

    let encoded = encode_volume(&v, &spec, &cfg, mode, mask.as_ref())?;
    let meta = PackMeta {
        mode,
        spec,
        dims,
        voxel_size: v.voxel_size,
        norm_bounds: v.norm_bounds.expect("normalized"),
        seed: a.seed,
        quantization: a.quant.into(),
        backend: a.backend.into(),
    };
    let artifact = codec::pack(&encoded.networks, &meta)?;
    artifact.write(&a.output)?;
    m.output(&a.output);

    let trace_path = a
        .trace
        .clone()
        .unwrap_or_else(|| suffixed(&a.output, ".trace.csv"));
    write_with(&trace_path, |w| write_trace_csv(w, &encoded.traces))?;
    m.output(&trace_path);

    let decoded = codec::decode_normalized(&artifact)?;
    let decoded_mse = volume_mse(&v, &decoded, None)?;
    let ratio =
        codec::compression_ratio(uncompressed_nifti_size(&native), artifact.byte_len() as u64)?;
    let payload_ratio = artifact.header.raw_payload_len() as f64 / artifact.payload.len() as f64;
    let train_psnr = psnr_db(encoded.final_mse());
    let decoded_psnr = psnr_db(decoded_mse);

    println!("final training PSNR: {train_psnr:.3} dB");
    println!("decoded PSNR:        {decoded_psnr:.3} dB");
    println!(
        "compression ratio:   {ratio:.3} ({} bytes)",
        artifact.byte_len()
    );

    m.config = json!({
        "args": m.config,
        "spec": spec,
        "train": cfg,
        "mask_semantics": mask.as_ref().map(|_| "loss restricted to non-background voxels"),
    });
    m.results = json!({
        "train_mse": encoded.final_mse(),
        "train_psnr_db": Db(train_psnr),
        "decoded_mse": decoded_mse,
        "decoded_psnr_db": Db(decoded_psnr),
        "compression_ratio": ratio,
        "payload_ratio": payload_ratio,
        "container_bytes": artifact.byte_len(),
        "parameter_count": spec.param_count() * encoded.networks.len(),
    });
    m.finish(&manifest_path(cli, &a.output))
}

fn read_artifact(m: &mut RunManifest, path: &Path) -> Result<CompressedArtifact> {
    Ok(CompressedArtifact::from_bytes(&m.read_input(path)?)?)
}

fn decode(cli: &Cli, a: &DecodeArgs) -> Result<()> {
    let mut m = RunManifest::start("decode", a, cli.jobs);
    let artifact = read_artifact(&mut m, &a.input)?;
    m.seed = Some(artifact.header.seed);
    let v = if a.normalized {
        codec::decode_normalized(&artifact)?
    } else {
        codec::decode(&artifact)?
    };
    write_nifti(&v, &a.output)?;
    m.output(&a.output);
    println!("decoded {:?} -> {}", v.dims(), a.output.display());
    m.finish(&manifest_path(cli, &a.output))
}

fn metrics(cli: &Cli, a: &MetricsArgs) -> Result<()> {
    let mut m = RunManifest::start("metrics", a, cli.jobs);
    let truth = read_volume(&mut m, &a.truth)?;
    let test = read_volume(&mut m, &a.test)?;
    truth.check_same_dims(&test)?;
    let mask = a
        .mask
        .as_ref()
        .map(|p| read_mask(&mut m, p, &truth))
        .transpose()?;
    let (t, s) = normalize_pair(&truth, &test);
    let mut report = MetricsReport::compute(&t, &s, mask.as_ref(), a.floor)?;
    if let Some(p) = &a.artifact {
        let artifact = read_artifact(&mut m, p)?;
        report.compression_ratio = Some(codec::compression_ratio(
            uncompressed_nifti_size(&truth),
            artifact.byte_len() as u64,
        )?);
        report.payload_ratio =
            Some(artifact.header.raw_payload_len() as f64 / artifact.payload.len() as f64);
    }

    let csv = suffixed(&a.out, ".csv");
    write_with(&csv, |w| report.write_csv(w))?;
    let slices = suffixed(&a.out, "_slices.csv");
    write_with(&slices, |w| report.write_slice_csv(w))?;
    let json_path = suffixed(&a.out, ".json");
    std::fs::write(&json_path, report.to_json() + "\n").map_err(|e| CliError::io(&json_path, e))?;
    for p in [&csv, &slices, &json_path] {
        m.output(p);
    }

    println!("PSNR: {} dB", report.psnr_global);
    println!("SSIM: {}", report.ssim_mean);
    if let Some(r) = report.compression_ratio {
        println!("compression ratio: {r:.3}");
    }
    m.results = serde_json::to_value(&report).expect("report serializes");
    m.finish(&manifest_path(cli, &csv))
}

fn eval_dwi(cli: &Cli, a: &EvalDwiArgs) -> Result<()> {
    let mut m = RunManifest::start("eval-dwi", a, cli.jobs);
    let truth = read_volume(&mut m, &a.truth)?;
    let test = read_volume(&mut m, &a.test)?;
    truth.check_same_dims(&test)?;
    let bvals = String::from_utf8_lossy(&m.read_input(&a.bvals)?).into_owned();
    let bvecs = String::from_utf8_lossy(&m.read_input(&a.bvecs)?).into_owned();
    let g = GradientTable::parse_fsl(&bvals, &bvecs)?;
    let mask = read_mask(&mut m, &a.mask, &truth)?;
    let cfg = DwiEvalConfig {
        b_tensor: a.b_tensor,
        b_sh: a.b_sh,
        b_tol: a.b_tol,
        sh_order: a.sh_order,
        sh_lambda: a.sh_lambda,
        ..Default::default()
    };

    let native = dwi::native_config(&truth, &cfg);
    let truth_maps = dwi::dwi_maps(&truth, &g, &native)?;
    let test_maps = dwi::dwi_maps(&test, &g, &native)?;
    let rows = dwi::compare_maps(&truth_maps, &test_maps, &mask, &a.method, cfg.error_floor)?;
    if truth_maps.get(dwi::DwiMetric::Rish0).is_none() {
        eprintln!("note: no b={} shell; RISH rows omitted", a.b_sh);
    }
    write_with(&a.out, |w| dwi::write_table_csv(&rows, w))?;
    m.output(&a.out);

    if let Some(prefix) = &a.maps {
        for (tag, maps) in [("truth", &truth_maps), ("test", &test_maps)] {
            for (metric, map) in &maps.maps {
                let p = suffixed(
                    prefix,
                    &format!("_{tag}_{}.nii.gz", metric.name().to_lowercase()),
                );
                write_nifti(map, &p)?;
                m.output(&p);
            }
        }
    }

    for r in &rows {
        println!(
            "{:<6} {:<4} mean {:>9.3}% std {:>9.3}% |mean| {:>9.3}%",
            r.metric.name(),
            r.mask.name(),
            r.mean,
            r.std,
            r.mean_abs
        );
    }
    m.config = json!({ "args": m.config, "eval": cfg, "sh_convention": dwi::SH_CONVENTION });
    m.results = json!({
        "rows": rows,
        "negative_eigenvalues": { "truth": truth_maps.negative_eigenvalues, "test": test_maps.negative_eigenvalues },
    });
    m.finish(&manifest_path(cli, &a.out))
}

fn phantom(cli: &Cli, a: &PhantomArgs) -> Result<()> {
    let mut m = RunManifest::start("phantom", a, cli.jobs);
    m.seed = Some(a.seed);
    let scheme = GradientTable::multi_shell(a.b0, &a.shells);
    let p = dwi::make_phantom(a.dims, &scheme, a.seed, a.snr)?;

    let vol = suffixed(&a.out, ".nii.gz");
    write_nifti(&p.volume, &vol)?;
    let (bval, bvec) = (suffixed(&a.out, ".bval"), suffixed(&a.out, ".bvec"));
    scheme.write_fsl(&bval, &bvec)?;
    let mask = suffixed(&a.out, "_mask.nii.gz");
    write_nifti(&p.mask.to_volume(p.volume.voxel_size), &mask)?;
    let (fa, md) = p.truth_fa_md();
    let (fa_path, md_path) = (
        suffixed(&a.out, "_fa.nii.gz"),
        suffixed(&a.out, "_md.nii.gz"),
    );
    write_nifti(&fa, &fa_path)?;
    write_nifti(&md, &md_path)?;
    for path in [&vol, &bval, &bvec, &mask, &fa_path, &md_path] {
        m.output(path);
    }

    println!("phantom {:?} -> {}", p.volume.dims(), vol.display());
    m.results = json!({
        "noise_sigma": p.noise_sigma,
        "voxels": nrvc_core::TissueLabel::ALL.map(|l| (l.name(), p.mask.count(l))),
    });
    m.finish(&manifest_path(cli, &vol))
}

fn smooth(cli: &Cli, a: &SmoothArgs) -> Result<()> {
    let mut m = RunManifest::start("smooth", a, cli.jobs);
    let v = read_volume(&mut m, &a.input)?;
    let s = dwi::gaussian_smooth(&v, a.fwhm)?;
    write_nifti(&s, &a.output)?;
    m.output(&a.output);
    println!(
        "smoothed with FWHM {} voxels -> {}",
        a.fwhm,
        a.output.display()
    );
    m.config = json!({ "args": m.config, "fwhm_units": "voxels" });
    m.finish(&manifest_path(cli, &a.output))
}
