use std::path::Path;
use std::process::{Command, Output};

use terraindiff::denoiser::{checkpoint, ArchSpec, DenoiserModel};
use terraindiff::raster::{fgrid, Grid};

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_terraindiff"))
        .args(args)
        .current_dir(cwd)
        .env_remove("TERRAINDIFF_SEED")
        .output()
        .unwrap()
}

fn model(dir: &Path) -> String {
    let m = DenoiserModel::<f32>::new(ArchSpec::default(), 1).unwrap();
    let p = dir.join("m.fckp");
    checkpoint::save(&p, &m).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn estimate_only_prints_seconds() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["stitch", "--estimate-only", "--size", "1024x1024", "--tile", "256", "--stride", "256"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "9.6 s");
}

#[test]
fn missing_input_exits_66() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = model(dir.path());
    let out = bin(&["infer", "--dsm", "nope.fgrid", "--ckpt", &ckpt], dir.path());
    assert_eq!(out.status.code(), Some(66));
}

#[test]
fn indivisible_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = model(dir.path());
    fgrid::write(dir.path().join("odd.fgrid"), &Grid::from_fn(30, 30, |r, c| (r + c) as f64)).unwrap();
    let out = bin(&["infer", "--dsm", "odd.fgrid", "--ckpt", &ckpt], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("divisible"));
}

#[test]
fn tile_larger_than_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = model(dir.path());
    fgrid::write(dir.path().join("small.fgrid"), &Grid::filled(32, 32, 1.0)).unwrap();
    let out = bin(&["stitch", "--dsm", "small.fgrid", "--ckpt", &ckpt, "--tile", "64", "--stride", "32"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bin(&["synth", "--bogus"], dir.path()).status.code(), Some(2));
}

#[test]
fn synth_then_infer_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = model(dir.path());
    assert_eq!(bin(&["synth", "--seed", "1", "--size", "32", "--out", "data"], dir.path()).status.code(), Some(0));
    let out = bin(
        &["infer", "--dsm", "data/scene_00000_dsm.fgrid", "--ckpt", &ckpt, "--out", "pred", "--preview"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let dtm = fgrid::read(dir.path().join("pred/dtm.fgrid")).unwrap();
    assert_eq!((dtm.width(), dtm.height()), (32, 32));
    assert!(dir.path().join("pred/ground_prob.fgrid").exists());
    assert!(dir.path().join("pred/dtm.pgm").exists());
    assert!(dir.path().join("pred/infer.manifest.json").exists());
}

#[test]
fn schedule_dump_has_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["schedule-dump", "--timesteps", "10", "--out", "s.csv"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert_eq!(text.lines().count(), 11);
}
