use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use scalesplat_ffi::*;

fn camera(w: u32, h: u32, f: f64) -> ScalesplatCamera {
    let mut pose = [0.0; 16];
    for k in 0..4 {
        pose[5 * k] = 1.0;
    }
    ScalesplatCamera {
        pose,
        fx: f,
        fy: f,
        cx: f64::from(w) / 2.0,
        cy: f64::from(h) / 2.0,
        width: w,
        height: h,
    }
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    unsafe {
        scalesplat_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn root_scene(w: u32, h: u32) -> *mut ScalesplatScene {
    let n = (w * h) as usize;
    let rgb: Vec<f32> = (0..n)
        .flat_map(|k| {
            let t = (k % w as usize) as f32 / w as f32;
            [t, 0.5, 1.0 - t]
        })
        .collect();
    let depth = vec![2.0f32; n];
    let cam = camera(w, h, 60.0);
    let mut scene = ptr::null_mut();
    let status = unsafe { scalesplat_scene_create_root(rgb.as_ptr(), depth.as_ptr(), &cam, 20, 1, &mut scene) };
    assert_eq!(status, ScalesplatStatus::Ok, "{}", last_error());
    scene
}

#[test]
fn root_zoom_render_save_load() {
    let (w, h) = (48u32, 32u32);
    let scene = root_scene(w, h);
    unsafe {
        let mut layers = 0;
        assert_eq!(scalesplat_scene_layer_count(scene, &mut layers), ScalesplatStatus::Ok);
        assert_eq!(layers, 1);
        let mut count = 0;
        scalesplat_scene_surfel_count(scene, &mut count);
        assert_eq!(count, u64::from(w * h));

        let prompt = CString::new("detail").unwrap();
        let mut child = 0;
        let status = scalesplat_scene_zoom_procedural(scene, 0, 24.0, 16.0, 4.0, prompt.as_ptr(), 3, 50, 0, &mut child);
        assert_eq!(status, ScalesplatStatus::Ok, "{}", last_error());
        assert_eq!(child, 1);

        let mut cam = camera(1, 1, 1.0);
        assert_eq!(scalesplat_scene_layer_camera(scene, 1, &mut cam), ScalesplatStatus::Ok);
        assert!((cam.fx - 240.0).abs() < 1e-9);

        let n = (w * h) as usize;
        let mut rgb = vec![0f32; 3 * n];
        let mut depth = vec![0f32; n];
        let status = scalesplat_render(scene, &cam, true, rgb.as_mut_ptr(), rgb.len(), depth.as_mut_ptr(), depth.len());
        assert_eq!(status, ScalesplatStatus::Ok, "{}", last_error());
        assert!(rgb.iter().all(|v| (0.0..=1.0).contains(v)));
        let hit = depth.iter().filter(|d| **d > 0.0).count();
        assert!(hit > n / 2, "{hit} of {n}; {:?}", &depth[..8]);

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("s.wzs").to_str().unwrap()).unwrap();
        let mut bytes = 0;
        assert_eq!(scalesplat_scene_save(scene, path.as_ptr(), &mut bytes), ScalesplatStatus::Ok);
        assert!(bytes > 0);
        let mut loaded = ptr::null_mut();
        assert_eq!(scalesplat_scene_load(path.as_ptr(), &mut loaded), ScalesplatStatus::Ok);
        let mut again = vec![0f32; 3 * n];
        scalesplat_render(loaded, &cam, true, again.as_mut_ptr(), again.len(), ptr::null_mut(), 0);
        // the file stores f32 parameters
        let max = rgb.iter().zip(&again).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        assert!(max < 1e-3, "{max}");
        scalesplat_scene_free(loaded);
        scalesplat_scene_free(scene);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut n = 0u32;
        assert_eq!(scalesplat_scene_layer_count(ptr::null(), &mut n), ScalesplatStatus::NullArgument);
        assert!(last_error().contains("null"));

        let missing = CString::new("/nonexistent/dir/scene.wzs").unwrap();
        let mut s = ptr::null_mut();
        assert_eq!(scalesplat_scene_load(missing.as_ptr(), &mut s), ScalesplatStatus::Io);

        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk");
        std::fs::write(&junk, b"not a scene at all").unwrap();
        let junk = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(scalesplat_scene_load(junk.as_ptr(), &mut s), ScalesplatStatus::Format);

        let mut empty = ptr::null_mut();
        scalesplat_scene_new(&mut empty);
        let status = scalesplat_scene_zoom_procedural(empty, 0, 1.0, 1.0, 8.0, ptr::null(), 0, 1, 0, ptr::null_mut());
        assert_eq!(status, ScalesplatStatus::Synthesis);

        let cam = camera(8, 8, 10.0);
        let mut small = [0f32; 3];
        let status = scalesplat_render(empty, &cam, true, small.as_mut_ptr(), small.len(), ptr::null_mut(), 0);
        assert_eq!(status, ScalesplatStatus::BufferTooSmall);
        scalesplat_scene_free(empty);
        scalesplat_scene_free(ptr::null_mut());

        // a message longer than the buffer is truncated and still terminated
        let need = scalesplat_last_error(ptr::null_mut(), 0);
        let mut tiny = [1 as c_char; 4];
        assert_eq!(scalesplat_last_error(tiny.as_mut_ptr(), 4), need);
        assert_eq!(tiny[3], 0);
    }
}

#[test]
fn weight_helpers() {
    unsafe {
        let mut s = 0.0;
        assert_eq!(scalesplat_native_scale(2.0, 100.0, 400.0, &mut s), ScalesplatStatus::Ok);
        assert!((s - 0.01).abs() < 1e-15);
        let mut w = -1.0;
        scalesplat_opacity_weight(0.01, 0.01, f64::NAN, f64::NAN, &mut w);
        assert_eq!(w, 1.0);
        scalesplat_opacity_weight(0.08, 0.01, 0.08, f64::NAN, &mut w);
        assert_eq!(w, 0.0);
        assert_eq!(
            scalesplat_opacity_weight(0.0, 0.01, f64::NAN, f64::NAN, &mut w),
            ScalesplatStatus::InvalidArgument
        );
        let v = CStr::from_ptr(scalesplat_version()).to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
    }
}

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_header() {
    let lib = target_dir();
    if !lib.join("libscalesplat_ffi.so").exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no cdylib or C compiler");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "scalesplat.h"
int main(void) {
    double w = -1.0;
    if (scalesplat_opacity_weight(1.0, 1.0, NAN, NAN, &w) != SCALESPLAT_STATUS_OK || w != 1.0) return 2;
    ScalesplatScene *s = NULL;
    if (scalesplat_scene_new(&s) != SCALESPLAT_STATUS_OK) return 3;
    uint32_t n = 7;
    scalesplat_scene_layer_count(s, &n);
    scalesplat_scene_free(s);
    if (n != 0) return 4;
    if (scalesplat_scene_layer_count(NULL, &n) != SCALESPLAT_STATUS_NULL_ARGUMENT) return 5;
    char buf[64];
    scalesplat_last_error(buf, sizeof buf);
    printf("%s|%s\n", scalesplat_version(), buf);
    return 0;
}
"#
        .replace("NAN", "(0.0/0.0)"),
    )
    .unwrap();
    let bin = dir.path().join("main");
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg("-L")
        .arg(&lib)
        .arg("-lscalesplat_ffi")
        .arg(format!("-Wl,-rpath,{}", lib.display()))
        .arg("-o")
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with(env!("CARGO_PKG_VERSION")), "{text}");
    assert!(text.contains("null"), "{text}");
}
