//! Exit codes and file round trips through the `sword` binary.

use std::path::Path;
use std::process::{Command, Output};

use sword_core::io;
use sword_core::phantom::{self, GridSpec};

fn sword(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sword"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn sword")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn phantom_project_fbp_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for args in [
        &["phantom", "--kind", "shepp-logan", "--n", "32", "--out", "p.swim"][..],
        &["project", "--image", "p.swim", "--views", "60", "--detectors", "48", "--out", "s.swsn"],
        &["mask", "--total", "60", "--kept", "20", "--out", "m.txt"],
        &["fbp", "--sino", "s.swsn", "--n", "32", "--out", "full.swim"],
        &["fbp", "--sino", "s.swsn", "--mask", "m.txt", "--n", "32", "--out", "sparse.swim"],
    ] {
        let out = sword(dir, args);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }

    let expected = phantom::shepp_logan(GridSpec::new(32, 20.0).unwrap());
    assert_eq!(io::load_image(&dir.join("p.swim")).unwrap().data, expected.data);
    let sino = io::load_sinogram(&dir.join("s.swsn")).unwrap();
    assert_eq!(sino.data.dim(), (60, 48));
    let mask = io::load_mask(&dir.join("m.txt")).unwrap();
    assert_eq!(mask.kept_indices().len(), 20);

    let psnr = |name: &str| {
        let out = sword(dir, &["evaluate", "--recon", name, "--ref", "p.swim", "--json"]);
        assert_eq!(code(&out), 0);
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        v["psnr_db"].as_f64().unwrap()
    };
    assert!(psnr("full.swim") > psnr("sparse.swim"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("junk.swim"), b"NOPE0000000000000000").unwrap();
    std::fs::write(dir.join("bad.toml"), "not_a_key = 1\n").unwrap();

    assert_eq!(code(&sword(dir, &["fbp", "--sino", "missing.swsn", "--out", "x.swim"])), 2);
    assert_eq!(code(&sword(dir, &["evaluate", "--recon", "junk.swim", "--ref", "junk.swim"])), 4);
    assert_eq!(code(&sword(dir, &["mask", "--total", "10", "--kept", "0", "--out", "m.txt"])), 2);
    assert_eq!(code(&sword(dir, &["corpus", "--config", "bad.toml"])), 2);
    assert_eq!(code(&sword(dir, &["phantom", "--kind", "disk", "--radius", "50", "--out", "d.swim"])), 2);
}

#[test]
fn reconstruct_without_checkpoints_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&sword(dir, &["phantom", "--n", "32", "--out", "p.swim"])), 0);
    assert_eq!(code(&sword(dir, &["project", "--image", "p.swim", "--views", "48", "--detectors", "32", "--out", "s.swsn"])), 0);
    assert_eq!(code(&sword(dir, &["mask", "--total", "48", "--kept", "12", "--out", "m.txt"])), 0);
    let out = sword(dir, &["reconstruct", "--sino", "s.swsn", "--mask", "m.txt", "--model-full", "none.swsm", "--out", "r.swim"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("none.swsm"));
}
