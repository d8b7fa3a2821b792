use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use ggnet::checkpoint::Checkpoint;
use ggnet::data::{generate_phantom, PhantomParams};
use ggnet::network::{Architecture, GgNet};
use ggnet::train::{TrainConfig, Trainer};
use ggnet_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(ggnet_last_error()) }.to_string_lossy().into_owned()
}

fn default_params() -> GgnetPhantomParams {
    let mut p = std::mem::MaybeUninit::uninit();
    assert_eq!(unsafe { ggnet_phantom_default_params(p.as_mut_ptr()) }, GgnetStatus::Ok);
    unsafe { p.assume_init() }
}

fn small_checkpoint(dir: &Path) -> PathBuf {
    let mut arch = Architecture::default();
    arch.encoder.stage_channels = [2, 3, 4, 4];
    arch.encoder.aspp_dilations = vec![1, 2];
    arch.encoder.aspp_out_channels = 4;
    arch.reduction = 2;
    let net = GgNet::new(arch, 4).unwrap();
    let tr = Trainer::new(net, TrainConfig::default(), Default::default(), 4).unwrap();
    let path = dir.join("model.ggnt");
    Checkpoint::from_trainer(&tr).save(&path).unwrap();
    path
}

#[test]
fn phantom_matches_library() {
    let mut p = default_params();
    p.seed = 9;
    let n = p.height * p.width;
    let (mut img, mut mask) = (vec![0.0; n], vec![0u8; n]);
    assert_eq!(unsafe { ggnet_phantom(&p, img.as_mut_ptr(), mask.as_mut_ptr()) }, GgnetStatus::Ok);
    let lib = generate_phantom(&PhantomParams { seed: 9, ..Default::default() }, "x").unwrap();
    assert_eq!(img, lib.image.data());
    assert_eq!(mask, lib.mask.data().iter().map(|&b| u8::from(b)).collect::<Vec<_>>());
}

#[test]
fn invalid_phantom_reports_config_error() {
    let mut p = default_params();
    p.axes_max = 1000.0;
    let mut img = vec![0.0; p.height * p.width];
    let mut mask = vec![0u8; p.height * p.width];
    assert_eq!(unsafe { ggnet_phantom(&p, img.as_mut_ptr(), mask.as_mut_ptr()) }, GgnetStatus::ConfigError);
    assert!(!last_error().is_empty());
}

#[test]
fn boundary_of_square() {
    let mask: Vec<u8> = (0..25).map(|i| u8::from((1..=3).contains(&(i / 5)) && (1..=3).contains(&(i % 5)))).collect();
    let mut out = vec![0u8; 25];
    assert_eq!(unsafe { ggnet_boundary(mask.as_ptr(), 5, 5, out.as_mut_ptr()) }, GgnetStatus::Ok);
    assert_eq!(out.iter().map(|&b| b as usize).sum::<usize>(), 8);
    assert_eq!(out[12], 0);
}

#[test]
fn metrics_with_empty_prediction() {
    let gt = [0u8, 1, 1, 0];
    let pred = [0u8; 4];
    let mut m = std::mem::MaybeUninit::uninit();
    assert_eq!(unsafe { ggnet_metrics(pred.as_ptr(), gt.as_ptr(), 2, 2, m.as_mut_ptr()) }, GgnetStatus::Ok);
    let m = unsafe { m.assume_init() };
    assert_eq!(m.dice, 0.0);
    assert_eq!(m.accuracy, 0.5);
    assert_eq!(m.has_distances, 0);
    assert!(m.hd.is_nan() && m.abd.is_nan());
}

#[test]
fn null_pointers_and_bad_extents() {
    let mut out = [0u8; 4];
    assert_eq!(unsafe { ggnet_boundary(ptr::null(), 2, 2, out.as_mut_ptr()) }, GgnetStatus::NullPointer);
    assert!(last_error().contains("mask"));
    let mask = [1u8; 4];
    assert_eq!(unsafe { ggnet_boundary(mask.as_ptr(), 0, 2, out.as_mut_ptr()) }, GgnetStatus::InvalidArgument);
    assert_eq!(unsafe { ggnet_boundary(mask.as_ptr(), usize::MAX, 2, out.as_mut_ptr()) }, GgnetStatus::InvalidArgument);
}

#[test]
fn model_round_trip_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = small_checkpoint(dir.path());
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { ggnet_model_load(c_path.as_ptr(), &mut model) }, GgnetStatus::Ok);
    assert!(!model.is_null());

    let sample = generate_phantom(&PhantomParams::default(), "x").unwrap();
    let (h, w) = sample.dims();
    let mut prob = vec![0.0; h * w];
    let status = unsafe { ggnet_model_predict_prob(model, sample.image.data().as_ptr(), h, w, prob.as_mut_ptr()) };
    assert_eq!(status, GgnetStatus::Ok);
    let lib = Checkpoint::load(&path).unwrap().net.predict_prob(&sample.image).unwrap();
    assert_eq!(prob, lib);

    let mut count = 0usize;
    assert_eq!(unsafe { ggnet_model_parameter_count(model, &mut count) }, GgnetStatus::Ok);
    assert!(count > 0);

    // Extents that do not survive four halvings are rejected, not a panic.
    let small = vec![0.5; 10 * 10];
    let mut out = vec![0u8; 100];
    let status = unsafe { ggnet_model_infer(model, small.as_ptr(), 10, 10, 0.5, out.as_mut_ptr()) };
    assert_ne!(status, GgnetStatus::Ok);
    assert_ne!(status, GgnetStatus::Panic, "{}", last_error());
    unsafe { ggnet_model_free(model) };
}

#[test]
fn corrupt_checkpoint_is_a_checkpoint_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ggnt");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { ggnet_model_load(c_path.as_ptr(), &mut model) }, GgnetStatus::CheckpointError);
    assert!(model.is_null());
}

/// Compiles `tests/c/smoke.c` against the generated header and the static
/// library produced by this build, then runs it.
#[test]
fn c_program_links_and_runs() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libggnet_ffi.a");
    assert!(lib.exists(), "static library not found at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Wextra", "-Werror", "-o"])
        .arg(&exe)
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .expect("C compiler available");
    assert!(status.success(), "compiling the C smoke test failed");
    let ckpt = small_checkpoint(dir.path());
    let out = Command::new(&exe).arg(&ckpt).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
