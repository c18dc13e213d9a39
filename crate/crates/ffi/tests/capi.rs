use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use hmrvit::body_model::{body_mesh, regress_joints, BodyTemplate};
use hmrvit::config::{Config, Preset};
use hmrvit::synthetic_data::generate_dataset;
use hmrvit::training::{train, Batch, TrainOptions};
use hmrvit_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(hmrvit_last_error()) }.to_string_lossy().into_owned()
}

fn body() -> *mut HmrvitBodyModel {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { hmrvit_body_model_procedural(4, 0, &mut h) }, HmrvitStatus::Ok);
    assert!(!h.is_null());
    h
}

#[test]
fn body_mesh_matches_library() {
    let h = body();
    let v = unsafe { hmrvit_body_model_num_vertices(h) };
    assert_eq!(v, 96);
    let theta: Vec<f64> = (0..72).map(|i| 0.01 * i as f64 - 0.3).collect();
    let beta = [0.5; 10];
    let mut verts = vec![0.0; 3 * v];
    let mut joints = vec![0.0; 72];
    unsafe {
        assert_eq!(hmrvit_body_mesh(h, theta.as_ptr(), beta.as_ptr(), verts.as_mut_ptr()), HmrvitStatus::Ok);
        assert_eq!(hmrvit_regress_joints(h, verts.as_ptr(), joints.as_mut_ptr()), HmrvitStatus::Ok);
        hmrvit_body_model_free(h);
    }
    let tmpl = BodyTemplate::procedural(4, 0).unwrap();
    let mesh = body_mesh(&tmpl, &theta, &beta).unwrap();
    assert_eq!(verts, mesh.as_slice());
    assert_eq!(joints, regress_joints(&tmpl, &mesh).unwrap().as_slice());
}

#[test]
fn null_pointers_and_bad_values_report_status() {
    let h = body();
    let mut out = vec![0.0; 3];
    unsafe {
        let st = hmrvit_body_mesh(h, ptr::null(), [0.0; 10].as_ptr(), out.as_mut_ptr());
        assert_eq!(st, HmrvitStatus::NullPointer);
        assert!(last_error().contains("theta"));
        let st = hmrvit_project([0.0; 3].as_ptr(), 1, -1.0, 0.0, 0.0, out.as_mut_ptr());
        assert_eq!(st, HmrvitStatus::InvalidArgument);
        assert!(last_error().contains("scale"));
        assert_eq!(hmrvit_body_model_num_vertices(ptr::null()), 0);
        hmrvit_body_model_free(h);
        hmrvit_body_model_free(ptr::null_mut());
        let mut none = ptr::null_mut();
        assert_eq!(hmrvit_body_model_procedural(0, 0, &mut none), HmrvitStatus::InvalidArgument);
        assert!(none.is_null());
        let missing = CString::new("/nonexistent/checkpoint").unwrap();
        let mut m = ptr::null_mut();
        let st = hmrvit_model_load(missing.as_ptr(), &mut m);
        assert!(matches!(st, HmrvitStatus::Io | HmrvitStatus::Archive), "{st:?}");
        assert!(m.is_null());
    }
}

#[test]
fn projection_and_metrics() {
    let pts = [0.1, 0.2, 0.3, -0.4, 0.5, 0.6];
    let mut k = [0.0; 4];
    unsafe {
        assert_eq!(hmrvit_project(pts.as_ptr(), 2, 2.0, 0.5, -0.5, k.as_mut_ptr()), HmrvitStatus::Ok);
    }
    for (a, b) in k.iter().zip([0.7, -0.1, -0.3, 0.5]) {
        assert!((a - b).abs() < 1e-15);
    }
    let target = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    // target rotated 90 degrees about z, scaled by 2 and shifted
    let pred = [5.0, 5.0, 5.0, 5.0, 7.0, 5.0, 3.0, 5.0, 5.0];
    let (mut e, mut pa) = (0.0, 0.0);
    unsafe {
        assert_eq!(hmrvit_mpjpe(pred.as_ptr(), target.as_ptr(), 3, &mut e), HmrvitStatus::Ok);
        assert_eq!(hmrvit_pa_mpjpe(pred.as_ptr(), target.as_ptr(), 3, &mut pa), HmrvitStatus::Ok);
    }
    let expect = 2.0 * 5f64.sqrt() / 3.0 * 1000.0;
    assert!((e - expect).abs() < 1e-9, "{e}");
    assert!(pa.abs() < 1e-9, "{pa}");
}

#[test]
fn crm_and_nearest_permutation() {
    let c = 4;
    let sigma = [2usize, 0, 3, 1];
    let mut logits = vec![0.0; c * c];
    for (i, &j) in sigma.iter().enumerate() {
        logits[i * c + j] = 50.0;
    }
    let mut crm = vec![0.0; c * c];
    let mut got = [0usize; 4];
    let mut dist = f64::NAN;
    unsafe {
        assert_eq!(hmrvit_make_crm(logits.as_ptr(), c, 1.0, crm.as_mut_ptr()), HmrvitStatus::Ok);
        assert_eq!(
            hmrvit_nearest_permutation(crm.as_ptr(), c, got.as_mut_ptr(), &mut dist),
            HmrvitStatus::Ok
        );
        assert_eq!(hmrvit_make_crm(logits.as_ptr(), c, 0.0, crm.as_mut_ptr()), HmrvitStatus::InvalidArgument);
    }
    assert_eq!(got, sigma);
    assert!(dist < 1e-6);
}

#[test]
fn checkpoint_inference_matches_library() {
    let cfg = Config {
        train_sequences: 4,
        val_sequences: 2,
        regressor_hidden: 32,
        batch_size: 2,
        epochs: 1,
        ..Config::preset(Preset::Toy)
    };
    let data = generate_dataset(&cfg.data_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let s = train(
        &cfg,
        &data,
        &TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            quiet: true,
        },
    )
    .unwrap();
    let batch = Batch::from_split(&data.val, &[0, 1]).unwrap();
    let expect = s.model.predict(&batch.features).unwrap();

    let path = CString::new(dir.path().join("checkpoint_last").to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(hmrvit_model_load(path.as_ptr(), &mut m), HmrvitStatus::Ok, "{}", last_error());
        let (mut t, mut c, mut v) = (0, 0, 0);
        assert_eq!(hmrvit_model_dims(m, &mut t, &mut c, &mut v), HmrvitStatus::Ok);
        assert_eq!((t, c, v), (15, 64, 96));
        let mut cam = vec![0.0; 6];
        let mut joints = vec![0.0; 144];
        let st = hmrvit_model_predict(
            m,
            batch.features.as_slice().as_ptr(),
            2,
            ptr::null_mut(),
            ptr::null_mut(),
            cam.as_mut_ptr(),
            ptr::null_mut(),
            joints.as_mut_ptr(),
        );
        assert_eq!(st, HmrvitStatus::Ok);
        assert_eq!(cam, expect.cam.as_slice());
        assert_eq!(joints, expect.joints.as_slice());
        assert!(cam[0] > 0.0);
        hmrvit_model_free(m);
    }
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(hmrvit_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/hmrvit.h")).unwrap();
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15, "{exports:?}");
    for e in exports {
        assert!(header.contains(&format!("{e}(")), "{e} missing from header");
    }
    assert!(header.contains("typedef struct HmrvitModel HmrvitModel;"));
}

#[test]
fn c_program_links_against_static_library() {
    let lib = target_dir().join("libhmrvit_ffi.a");
    if !lib.exists() {
        eprintln!("skipping: {} not built", lib.display());
        return;
    }
    let out = tempfile::tempdir().unwrap();
    let exe = out.path().join("smoke");
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let status = Command::new("cc")
        .arg(manifest.join("tests/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status();
    let Ok(status) = status else {
        eprintln!("skipping: no C compiler");
        return;
    };
    assert!(status.success());
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok 96");
}
