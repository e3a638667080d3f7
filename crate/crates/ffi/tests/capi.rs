use std::ffi::{c_char, CStr, CString};
use std::process::Command;
use std::ptr;

use mtlue_core::config::{DatasetSource, ExperimentConfig, Method};
use mtlue_core::data::SynthSpec;
use mtlue_core::models::{Arch, Block};
use mtlue_ffi::*;

fn tiny_json(method: Method) -> CString {
    let mut c = ExperimentConfig::default();
    c.dataset = DatasetSource::Classification(SynthSpec {
        class_counts: vec![2, 3],
        n_train: 32,
        n_test: 16,
        channels: 1,
        height: 8,
        width: 8,
        ..SynthSpec::default()
    });
    c.attack.method = method;
    let small = Arch {
        encoder: vec![Block { width: 4, stride: 2 }],
        decoder: vec![],
    };
    c.attack.surrogate.arch = small.clone();
    c.attack.surrogate_train.epochs = 1;
    c.attack.tap.steps = 2;
    c.attack.tap.checkpoints = 1;
    c.victims.arch = Some(small);
    c.victims.stl = false;
    c.victims.train.epochs = 1;
    c.victims.train.batch = 16;
    CString::new(c.to_json().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = mtlue_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

unsafe fn take(s: *mut c_char) -> String {
    let out = CStr::from_ptr(s).to_str().unwrap().to_string();
    mtlue_string_free(s);
    out
}

#[test]
fn version_is_static_string() {
    let v = unsafe { CStr::from_ptr(mtlue_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn config_roundtrip_and_hash() {
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(mtlue_config_from_json(tiny_json(Method::Tap).as_ptr(), &mut cfg), MtlueStatus::Ok);
        assert!(mtlue_last_error().is_null());

        let mut h = ptr::null_mut();
        assert_eq!(mtlue_config_hash(cfg, &mut h), MtlueStatus::Ok);
        let hash = take(h);
        assert_eq!(hash.len(), 64);

        // The output directory is not part of the hash; the seed is.
        let dir = CString::new("/tmp/elsewhere").unwrap();
        assert_eq!(mtlue_config_set_output_dir(cfg, dir.as_ptr()), MtlueStatus::Ok);
        assert_eq!(mtlue_config_hash(cfg, &mut h), MtlueStatus::Ok);
        assert_eq!(take(h), hash);
        assert_eq!(mtlue_config_set_seed(cfg, 99), MtlueStatus::Ok);
        assert_eq!(mtlue_config_hash(cfg, &mut h), MtlueStatus::Ok);
        assert_ne!(take(h), hash);

        let mut j = ptr::null_mut();
        assert_eq!(mtlue_config_to_json(cfg, &mut j), MtlueStatus::Ok);
        let back = ExperimentConfig::from_json(&take(j)).unwrap();
        assert_eq!(back.seed, 99);
        assert_eq!(back.attack.method, Method::Tap);
        mtlue_config_free(cfg);
    }
}

#[test]
fn invalid_input_sets_status_and_message() {
    unsafe {
        let mut cfg = ptr::null_mut();
        let bad = CString::new(r#"{"attack": {"ε": 2.0}}"#).unwrap();
        assert_eq!(mtlue_config_from_json(bad.as_ptr(), &mut cfg), MtlueStatus::InvalidInput);
        assert!(cfg.is_null());
        assert!(last_error().contains("ε"), "{}", last_error());

        let garbled = CString::new("{ nope").unwrap();
        assert_eq!(mtlue_config_from_json(garbled.as_ptr(), &mut cfg), MtlueStatus::InvalidInput);
        assert!(last_error().contains("line 1"), "{}", last_error());

        let invalid_utf8 = [0xffu8, 0xfe, 0];
        assert_eq!(mtlue_config_from_json(invalid_utf8.as_ptr().cast(), &mut cfg), MtlueStatus::InvalidUtf8);

        let missing = CString::new("/definitely/not/here.json").unwrap();
        assert_eq!(mtlue_config_from_file(missing.as_ptr(), &mut cfg), MtlueStatus::NotFound);

        let mut y = 0;
        assert_eq!(mtlue_target_label(3, 3, &mut y), MtlueStatus::InvalidInput);
        let mut g = MtluePatchGrid::default();
        assert_eq!(mtlue_patch_grid(0, 8, 8, &mut g), MtlueStatus::InvalidInput);
    }
}

#[test]
fn null_pointers_are_rejected() {
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(mtlue_config_from_json(ptr::null(), &mut cfg), MtlueStatus::NullPointer);
        assert_eq!(mtlue_config_from_json(tiny_json(Method::None).as_ptr(), ptr::null_mut()), MtlueStatus::NullPointer);
        assert_eq!(mtlue_config_set_seed(ptr::null_mut(), 1), MtlueStatus::NullPointer);
        let mut report = ptr::null_mut();
        assert_eq!(mtlue_run_experiment(ptr::null(), &mut report), MtlueStatus::NullPointer);
        assert_eq!(mtlue_target_label(0, 2, ptr::null_mut()), MtlueStatus::NullPointer);
        assert!(last_error().contains("null"));
        mtlue_config_free(ptr::null_mut());
        mtlue_report_free(ptr::null_mut());
        mtlue_string_free(ptr::null_mut());
    }
}

#[test]
fn formula_helpers() {
    unsafe {
        let mut g = MtluePatchGrid::default();
        assert_eq!(mtlue_patch_grid(40, 70, 70, &mut g), MtlueStatus::Ok);
        assert_eq!((g.n, g.patch_h, g.patch_w), (8, 8, 8));
        let mut y = 0;
        assert_eq!(mtlue_target_label(5, 13, &mut y), MtlueStatus::Ok);
        assert_eq!(y, 11);
    }
}

#[test]
fn gradcheck_passes() {
    let (mut total, mut passed) = (0, 0);
    assert_eq!(unsafe { mtlue_gradcheck(0, &mut total, &mut passed) }, MtlueStatus::Ok);
    assert!(total > 20);
    assert_eq!(passed, total);
}

#[test]
fn run_experiment_and_query_report() {
    let tmp = tempfile::tempdir().unwrap();
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(mtlue_config_from_json(tiny_json(Method::Tap).as_ptr(), &mut cfg), MtlueStatus::Ok);
        let dir = CString::new(tmp.path().join("run").to_str().unwrap()).unwrap();
        assert_eq!(mtlue_config_set_output_dir(cfg, dir.as_ptr()), MtlueStatus::Ok);

        let mut report = ptr::null_mut();
        assert_eq!(mtlue_run_experiment(cfg, &mut report), MtlueStatus::Ok, "{}", last_error());
        let victim = CString::new("mtl-ls").unwrap();
        let (mut acc, mut base) = (-1.0, -1.0);
        assert_eq!(mtlue_report_victim_accuracy(report, victim.as_ptr(), 0, &mut acc), MtlueStatus::Ok);
        assert_eq!(mtlue_report_victim_accuracy(report, victim.as_ptr(), 1, &mut base), MtlueStatus::Ok);
        assert!((0.0..=1.0).contains(&acc) && (0.0..=1.0).contains(&base));
        let mut delta = -1.0;
        assert_eq!(mtlue_report_max_abs_delta(report, &mut delta), MtlueStatus::Ok);
        assert!(delta > 0.0 && delta <= 8.0 / 255.0 + 1e-9);

        let other = CString::new("stl-task9").unwrap();
        assert_eq!(mtlue_report_victim_accuracy(report, other.as_ptr(), 0, &mut acc), MtlueStatus::NotFound);

        let mut j = ptr::null_mut();
        assert_eq!(mtlue_report_json(report, &mut j), MtlueStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(&take(j)).unwrap();
        assert_eq!(v["attack"]["method"], "tap");
        mtlue_report_free(report);

        // Runs never overwrite an existing report.
        let mut again = ptr::null_mut();
        assert_eq!(mtlue_run_experiment(cfg, &mut again), MtlueStatus::AlreadyExists);
        assert!(again.is_null());
        mtlue_config_free(cfg);
    }
}

const EXPORTS: [&str; 18] = [
    "mtlue_version",
    "mtlue_last_error",
    "mtlue_string_free",
    "mtlue_config_from_json",
    "mtlue_config_from_file",
    "mtlue_config_set_seed",
    "mtlue_config_set_output_dir",
    "mtlue_config_to_json",
    "mtlue_config_hash",
    "mtlue_config_free",
    "mtlue_run_experiment",
    "mtlue_report_json",
    "mtlue_report_victim_accuracy",
    "mtlue_report_max_abs_delta",
    "mtlue_report_free",
    "mtlue_patch_grid",
    "mtlue_target_label",
    "mtlue_gradcheck",
];

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/mtlue.h")).unwrap();
    for name in EXPORTS {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(header.contains("typedef struct MtlueConfig MtlueConfig;"));
    assert!(header.contains("MTLUE_STATUS_INVALID_INPUT = 3"));
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(cc.status.success());
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"mtlue.h\"\n\
         int main(void) {\n\
           MtlueConfig *cfg = NULL;\n\
           MtlueStatus s = mtlue_config_from_json(\"{}\", &cfg);\n\
           size_t y = 0;\n\
           mtlue_target_label(0, 2, &y);\n\
           mtlue_config_free(cfg);\n\
           return s == MTLUE_STATUS_OK ? 0 : 1;\n\
         }\n",
    )
    .unwrap();
    let out = Command::new("cc")
        .args(["-std=c11", "-Wall", "-Werror", "-fsyntax-only", "-I", concat!(env!("CARGO_MANIFEST_DIR"), "/include")])
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
