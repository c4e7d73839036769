use nrvc_core::codec::{
    compression_ratio, decode, decode_normalized, pack, quantize, unpack, CompressedArtifact,
    LosslessBackend, PackMeta, Quantization,
};
use nrvc_core::dwi::make_phantom;
use nrvc_core::metrics::volume_mse;
use nrvc_core::nifti::{read_nifti, uncompressed_nifti_size, write_nifti};
use nrvc_core::training::{encode_volume, EncodedVolume, TrainConfig};
use nrvc_core::{Error, GradientTable, GridMode, NetworkSpec, Variant, Volume4D};

fn encoded(mode: GridMode) -> (Volume4D, NetworkSpec, EncodedVolume) {
    let g = GradientTable::multi_shell(1, &[(1000.0, 5)]);
    let v = make_phantom([12, 12, 3], &g, 4, Some(30.0))
        .unwrap()
        .volume
        .normalize();
    let spec = NetworkSpec {
        in_dim: mode.in_dim(),
        out_dim: 6,
        hidden_layers: 2,
        hidden_units: 16,
        variant: Variant::SirenPure,
        omega0: 30.0,
    };
    let cfg = TrainConfig::new(80, 1e-3, 3).unwrap();
    let enc = encode_volume(&v, &spec, &cfg, mode, None).unwrap();
    (v, spec, enc)
}

fn meta(
    v: &Volume4D,
    spec: NetworkSpec,
    mode: GridMode,
    q: Quantization,
    b: LosslessBackend,
) -> PackMeta {
    PackMeta {
        mode,
        spec,
        dims: v.dims(),
        voxel_size: v.voxel_size,
        norm_bounds: v.norm_bounds.unwrap(),
        seed: 3,
        quantization: q,
        backend: b,
    }
}

#[test]
fn every_container_flavour_survives_the_byte_roundtrip() {
    for mode in [GridMode::Slice2D, GridMode::Volume3D] {
        let (v, spec, enc) = encoded(mode);
        for q in [Quantization::F16, Quantization::F32] {
            for b in [
                LosslessBackend::Stored,
                LosslessBackend::Lzma,
                LosslessBackend::Deflate,
            ] {
                let art = pack(&enc.networks, &meta(&v, spec, mode, q, b)).unwrap();
                let back = CompressedArtifact::from_bytes(&art.to_bytes()).unwrap();
                assert_eq!(back, art);
                let nets = unpack(&back).unwrap().networks;
                assert_eq!(nets.len(), enc.networks.len());
                for (n, orig) in nets.iter().zip(&enc.networks) {
                    assert_eq!(quantize(n, q).unwrap(), quantize(orig, q).unwrap());
                }
            }
        }
    }
}

#[test]
fn decoded_fidelity_tracks_training_loss() {
    let (v, spec, enc) = encoded(GridMode::Slice2D);
    let art = pack(
        &enc.networks,
        &meta(
            &v,
            spec,
            GridMode::Slice2D,
            Quantization::F16,
            LosslessBackend::Lzma,
        ),
    )
    .unwrap();
    let dec = decode_normalized(&art).unwrap();
    assert_eq!(dec.dims(), v.dims());
    assert_eq!(dec.norm_bounds, v.norm_bounds);
    let mse = volume_mse(&v, &dec, None).unwrap();
    let train = enc.final_mse();
    assert!(
        (mse - train).abs() <= 0.05 * train,
        "decoded {mse} vs trained {train}"
    );

    let native = decode(&art).unwrap();
    let bounds = v.norm_bounds.unwrap();
    for (n, s) in native.data().iter().zip(dec.data()) {
        assert_eq!(*n, bounds.to_native(*s));
    }
}

#[test]
fn file_roundtrip_and_ratio() {
    let (v, spec, enc) = encoded(GridMode::Slice2D);
    let art = pack(
        &enc.networks,
        &meta(
            &v,
            spec,
            GridMode::Slice2D,
            Quantization::F16,
            LosslessBackend::Lzma,
        ),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.nrvc");
    art.write(&path).unwrap();
    let back = CompressedArtifact::read(&path).unwrap();
    assert_eq!(back, art);
    let size = std::fs::metadata(&path).unwrap().len();
    assert_eq!(size as usize, art.byte_len());

    let nii = dir.path().join("v.nii");
    write_nifti(&v.denormalize(), &nii).unwrap();
    let stored = read_nifti(&nii).unwrap();
    assert_eq!(
        std::fs::metadata(&nii).unwrap().len(),
        uncompressed_nifti_size(&stored)
    );
    let ratio = compression_ratio(uncompressed_nifti_size(&stored), size).unwrap();
    assert!(ratio > 0.0 && ratio.is_finite());
}

#[test]
fn any_flipped_payload_byte_is_caught() {
    let (v, spec, enc) = encoded(GridMode::Slice2D);
    let art = pack(
        &enc.networks,
        &meta(
            &v,
            spec,
            GridMode::Slice2D,
            Quantization::F16,
            LosslessBackend::Lzma,
        ),
    )
    .unwrap();
    let bytes = art.to_bytes();
    let header = bytes.len() - art.payload.len();
    for i in (header..bytes.len()).step_by(7) {
        let mut bad = bytes.clone();
        bad[i] ^= 0x01;
        match CompressedArtifact::from_bytes(&bad) {
            Err(Error::Corruption(_)) => {}
            other => panic!("flip at {i} gave {other:?}"),
        }
    }
}
