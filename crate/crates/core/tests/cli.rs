use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_scalesplat"));
    c.env_remove("SCALESPLAT_PROVIDER");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn init_three_zooms_render_sweep_bench() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let view = d.join("view");
    ok(&["fixture", "--width", "96", "--height", "64", "--focal", "90", "--view-only", "--view-dir", p(&view)]);
    for f in ["image.png", "depth.bin", "camera.json"] {
        assert!(view.join(f).exists(), "{f}");
    }

    let s0 = d.join("s0.wzs");
    let count = ok(&[
        "init",
        "--image",
        p(&view.join("image.png")),
        "--depth",
        p(&view.join("depth.bin")),
        "--pose",
        p(&view.join("camera.json")),
        "--steps",
        "60",
        "--out",
        p(&s0),
    ]);
    assert_eq!(count.trim(), (96 * 64).to_string());

    let mut prev = s0;
    for layer in 0..3 {
        let next = d.join(format!("s{}.wzs", layer + 1));
        let center = if layer % 2 == 0 { "52,28" } else { "44,34" };
        let added = ok(&[
            "zoom", "--scene", p(&prev), "--layer", &layer.to_string(), "--center", center, "--factor", "4", "--prompt",
            "more", "--seed", "3", "--aux", "1", "--steps", "40", "--out", p(&next),
        ]);
        assert_eq!(added.trim(), (layer + 1).to_string());
        prev = next;
    }

    let png = d.join("r.png");
    let depth = d.join("r.bin");
    ok(&["render", "--scene", p(&prev), "--layer", "3", "--out", p(&png), "--depth-out", p(&depth)]);
    let img = image::open(&png).unwrap();
    assert_eq!((img.width(), img.height()), (96, 64));
    assert!(depth.exists());

    let sweep = d.join("sweep");
    let line = ok(&["sweep", "--scene", p(&prev), "--from-layer", "0", "--to-layer", "3", "--frames", "24", "--out", p(&sweep)]);
    assert!(line.starts_with("frames 24 "), "{line}");
    assert!(sweep.join("frame_0023.png").exists());
    let csv = std::fs::read_to_string(sweep.join("diffs.csv")).unwrap();
    assert_eq!(csv.lines().count(), 24);

    let bench = ok(&["bench", "--scene", p(&prev), "--repeat", "1"]);
    let lines: Vec<&str> = bench.lines().collect();
    assert_eq!(lines[0], "pose,modulation,visible_surfels,fragments,fps");
    assert_eq!(lines.len(), 1 + 4 * 2 + 1);
    assert!(lines.last().unwrap().starts_with("total visible on "));

    // an out-of-image zoom center is the caller's mistake
    assert_eq!(code(&["zoom", "--scene", p(&prev), "--layer", "0", "--center", "500,5", "--out", p(&d.join("x.wzs"))]), 1);
    assert_eq!(code(&["zoom", "--scene", p(&prev), "--layer", "9", "--center", "5,5", "--out", p(&d.join("x.wzs"))]), 1);
}

#[test]
fn command_provider_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let view = d.join("view");
    ok(&["fixture", "--width", "64", "--height", "48", "--focal", "60", "--view-only", "--view-dir", p(&view)]);
    let s0 = d.join("s0.wzs");
    ok(&[
        "init", "--image", p(&view.join("image.png")), "--depth", p(&view.join("depth.bin")), "--pose",
        p(&view.join("camera.json")), "--steps", "40", "--out", p(&s0),
    ]);
    let s1 = d.join("s1.wzs");
    // the external command sees its work directory as cwd; echoing the coarse
    // view back is a valid (if dull) detail image
    let out = bin()
        .args(["zoom", "--scene", p(&s0), "--layer", "0", "--center", "32,24", "--factor", "2", "--aux", "0", "--steps", "5"])
        .args(["--out", p(&s1)])
        .env("SCALESPLAT_PROVIDER", "cmd:test -f request.json && cp coarse.png fine.png")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(s1.exists());

    // a failing external command is not the caller's mistake
    let failing = bin()
        .args(["zoom", "--scene", p(&s0), "--layer", "0", "--center", "32,24", "--factor", "2", "--aux", "0"])
        .args(["--provider", "cmd:exit 3", "--out", p(&d.join("s2.wzs"))])
        .output()
        .unwrap();
    assert_eq!(failing.status.code(), Some(2));
    assert!(!d.join("s2.wzs").exists());
}

#[test]
fn user_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = d.join("missing.wzs");
    assert_eq!(code(&["render", "--scene", p(&missing), "--layer", "0", "--out", p(&d.join("o.png"))]), 1);

    let junk = d.join("junk.wzs");
    std::fs::write(&junk, b"WZSC\x09\x00\x00\x00").unwrap();
    let out = run(&["render", "--scene", p(&junk), "--layer", "0", "--out", p(&d.join("o.png"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));

    assert_eq!(code(&["render", "--scene", p(&junk)]), 1);
    assert_eq!(code(&["no-such-command"]), 1);
    assert_eq!(code(&["zoom", "--scene", p(&junk), "--layer", "0", "--center", "1;2", "--out", "x"]), 1);
    assert_eq!(code(&["zoom", "--scene", p(&junk), "--layer", "0", "--center", "1,2", "--provider", "magic", "--out", "x"]), 1);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
}
