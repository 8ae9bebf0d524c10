use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mcof::io;
use mcof::pixel::PixelClassifierParams;
use mcof::raster::IGNORE;
use mcof::region::RegionClassifierParams;
use mcof::superpixel::SuperpixelMap;

fn mcof(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcof"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

#[test]
fn gray_fixture_decodes_as_labels_and_scalars() {
    // Written by an independent encoder: one IDAT row of gray 0, 7, 255.
    let labels = io::load_labels(fixture("gray_3x1.png")).unwrap();
    assert_eq!(labels.dims(), (3, 1));
    assert_eq!(labels.data(), &[0, 7, IGNORE]);
    let scalar = io::load_scalar_raster(fixture("gray_3x1.png"), true).unwrap();
    assert_eq!(scalar.data(), &[0.0, 7.0 / 255.0, 1.0]);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(mcof(&["--version"]).status.code(), Some(0));
    assert_eq!(mcof(&["run", "--no-such-flag"]).status.code(), Some(2));

    let manifest = tmp.path().join("bad.txt");
    std::fs::write(&manifest, "img.png||hm.f32r\n").unwrap();
    let out = mcof(&["run", "--manifest", &s(&manifest), "--out", &s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let out = mcof(&[
        "overlay",
        "--image",
        &s(&tmp.path().join("missing.png")),
        "--mask",
        &s(&fixture("gray_3x1.png")),
        "--output",
        &s(&tmp.path().join("o.png")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn run_writes_the_checkpoint_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let out = mcof(&["synth", "--count", "6", "--size", "32", "--out", &s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = s(&data.join("manifest.txt"));
    let out = mcof(&["run", "--manifest", &manifest, "--iters", "2", "--out", &s(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    for t in 0..2 {
        let dir = run.join(format!("iter{t}"));
        for sub in ["seeds", "regions", "refined", "masks", "params", "metrics.csv"] {
            assert!(dir.join(sub).exists(), "missing iter{t}/{sub}");
        }
        RegionClassifierParams::load(dir.join("params/region.f32r")).unwrap();
        PixelClassifierParams::load(dir.join("params/pixel.f32r")).unwrap();
        let masks = std::fs::read_dir(dir.join("masks")).unwrap().count();
        assert_eq!(masks, 6);
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("iteration,stage,miou"));
    assert!(metrics.lines().any(|l| l.starts_with("1,pixelnet,")));

    // Superpixels are reproduced by the standalone command and reload intact.
    let sp_out = tmp.path().join("sp");
    let sp_dir = sp_out.join("superpixels");
    let out = mcof(&["superpixel", "--manifest", &manifest, "--out", &s(&sp_out)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let first = std::fs::read_dir(&sp_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "f32r"))
        .unwrap();
    assert!(SuperpixelMap::load(first).unwrap().region_count() > 1);
}

#[test]
fn direct_mode_skips_region_stages_after_the_first_pass() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    assert!(mcof(&["synth", "--count", "6", "--size", "32", "--out", &s(&data)]).status.success());
    let manifest = s(&data.join("manifest.txt"));
    let args = ["run", "--manifest", &manifest, "--iters", "2", "--mode", "direct", "--out", &s(&run)];
    assert!(mcof(&args).status.success());
    let stages = |t: usize| std::fs::read_to_string(run.join(format!("iter{t}/stages.txt"))).unwrap();
    assert!(stages(0).contains("train-region"));
    assert!(!stages(1).contains("train-region"));
    assert!(!run.join("iter1/regions").exists());
}
