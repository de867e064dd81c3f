use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use swin_align::config::ExperimentConfig;
use swin_align::data::{generate, SyntheticSpec};
use swin_align::model::ModelConfig;
use swin_align::train::{train_to_dir, RunDir};
use swin_align_ffi::*;

fn micro_run(dir: &Path) -> swin_align::data::Dataset {
    let mut cfg = ExperimentConfig {
        model: ModelConfig::micro(),
        ..ExperimentConfig::default()
    };
    cfg.train.epochs = 1;
    cfg.train.batch_size = 5;
    let data = generate(&SyntheticSpec {
        per_grade: 2,
        ..SyntheticSpec::for_size(16)
    })
    .unwrap();
    train_to_dir(&cfg, &data, None, dir).unwrap();
    data
}

fn open(dir: &Path) -> *mut SaModel {
    let path = CString::new(dir.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { sa_model_open(path.as_ptr(), &mut handle) }, SaStatus::Ok);
    assert!(!handle.is_null());
    handle
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(sa_last_error_message()) }.to_string_lossy().into_owned()
}

#[test]
fn version_matches_the_crate() {
    let v = unsafe { CStr::from_ptr(sa_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn predict_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let data = micro_run(dir.path());
    let handle = open(dir.path());
    let (mut h, mut w, mut c, mut k, mut width) = (0, 0, 0, 0, 0);
    unsafe {
        assert_eq!(sa_model_input_shape(handle, &mut h, &mut w, &mut c), SaStatus::Ok);
        assert_eq!(sa_model_output_shape(handle, &mut k, &mut width), SaStatus::Ok);
    }
    assert_eq!((h, w, c, k, width), (16, 16, 3, 5, 5));

    let (images, _) = data.batch(&[0, 3, 9]);
    let mut outputs = vec![0.0; 15];
    let mut grades = vec![usize::MAX; 3];
    let status = unsafe {
        sa_model_predict(handle, images.data().as_ptr(), 3, outputs.as_mut_ptr(), outputs.len(), grades.as_mut_ptr())
    };
    assert_eq!(status, SaStatus::Ok);

    let (_, model, store) = RunDir::new(dir.path()).load().unwrap();
    let (expected, expected_grades) = model.predict(&store, &images).unwrap();
    assert_eq!(outputs, expected.data());
    assert_eq!(grades, expected_grades);
    unsafe { sa_model_free(handle) };
}

#[test]
fn gradcam_fills_the_final_stage_grid() {
    let dir = tempfile::tempdir().unwrap();
    let data = micro_run(dir.path());
    let handle = open(dir.path());
    let mut side = 0;
    assert_eq!(unsafe { sa_model_map_side(handle, &mut side) }, SaStatus::Ok);
    assert_eq!(side, 2);
    let (image, _) = data.batch(&[4]);
    let mut map = vec![-1.0; 4];
    let status = unsafe { sa_model_gradcam(handle, image.data().as_ptr(), 1, map.as_mut_ptr(), 4) };
    assert_eq!(status, SaStatus::Ok);
    assert!(map.iter().all(|v| (0.0..=1.0).contains(v)));

    let status = unsafe { sa_model_gradcam(handle, image.data().as_ptr(), 9, map.as_mut_ptr(), 4) };
    assert_eq!(status, SaStatus::Contract);
    assert!(last_error().contains("out of range"), "{}", last_error());
    let status = unsafe { sa_model_gradcam(handle, image.data().as_ptr(), 1, map.as_mut_ptr(), 3) };
    assert_eq!(status, SaStatus::InvalidArgument);
    unsafe { sa_model_free(handle) };
}

#[test]
fn errors_set_codes_and_messages() {
    let mut handle = ptr::null_mut();
    let missing = CString::new("/nonexistent/run").unwrap();
    assert_eq!(unsafe { sa_model_open(missing.as_ptr(), &mut handle) }, SaStatus::Io);
    assert!(handle.is_null());
    assert!(last_error().contains("/nonexistent/run"), "{}", last_error());

    assert_eq!(unsafe { sa_model_open(ptr::null(), &mut handle) }, SaStatus::NullPointer);
    let mut side = 0;
    assert_eq!(unsafe { sa_model_map_side(ptr::null(), &mut side) }, SaStatus::NullPointer);
    unsafe { sa_model_free(ptr::null_mut()) };

    let dir = tempfile::tempdir().unwrap();
    micro_run(dir.path());
    std::fs::write(dir.path().join("checkpoint.kckp"), b"KCKPjunk").unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { sa_model_open(path.as_ptr(), &mut handle) }, SaStatus::Format);
}

#[test]
fn predict_rejects_short_output_buffers() {
    let dir = tempfile::tempdir().unwrap();
    let data = micro_run(dir.path());
    let handle = open(dir.path());
    let (images, _) = data.batch(&[0, 1]);
    let mut outputs = vec![0.0; 9];
    let status = unsafe {
        sa_model_predict(handle, images.data().as_ptr(), 2, outputs.as_mut_ptr(), outputs.len(), ptr::null_mut())
    };
    assert_eq!(status, SaStatus::InvalidArgument);
    assert!(last_error().contains("10 required"), "{}", last_error());
    unsafe { sa_model_free(handle) };
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("swin_align.h")
}

#[test]
fn header_declares_the_public_surface() {
    let text = std::fs::read_to_string(header()).unwrap();
    for name in [
        "sa_version",
        "sa_last_error_message",
        "sa_model_open",
        "sa_model_free",
        "sa_model_input_shape",
        "sa_model_output_shape",
        "sa_model_map_side",
        "sa_model_predict",
        "sa_model_gradcam",
        "typedef struct SaModel SaModel;",
        "SA_STATUS_PANIC = 9",
    ] {
        assert!(text.contains(name), "{name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(out) = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c"])
        .arg(header())
        .output()
    else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

const C_SMOKE: &str = r#"
#include <stdio.h>
#include <string.h>
#include "swin_align.h"

int main(int argc, char **argv) {
    SaModel *m = NULL;
    if (sa_model_open("/nonexistent", &m) != SA_STATUS_IO || m != NULL) return 10;
    if (strlen(sa_last_error_message()) == 0) return 11;
    if (sa_model_open(argv[1], &m) != SA_STATUS_OK) return 12;
    size_t h, w, c, k, width;
    sa_model_input_shape(m, &h, &w, &c);
    sa_model_output_shape(m, &k, &width);
    double image[16 * 16 * 3];
    for (size_t i = 0; i < h * w * c; i++) image[i] = (double)(i % 7) / 7.0;
    double out[5];
    size_t grade = 99;
    if (sa_model_predict(m, image, 1, out, width, &grade) != SA_STATUS_OK) return 13;
    if (grade >= k) return 14;
    double map[4];
    if (sa_model_gradcam(m, image, 0, map, 4) != SA_STATUS_OK) return 15;
    sa_model_free(m);
    printf("ok %zu\n", grade);
    return 0;
}
"#;

#[test]
fn c_program_links_against_the_static_library() {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libswin_align_ffi.a");
    if !lib.is_file() {
        eprintln!("static library not built at {}; skipping", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    let bin = dir.path().join("smoke");
    std::fs::write(&src, C_SMOKE).unwrap();
    let Ok(out) = std::process::Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&bin)
        .output()
    else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    micro_run(&run);
    let out = std::process::Command::new(&bin).arg(&run).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
