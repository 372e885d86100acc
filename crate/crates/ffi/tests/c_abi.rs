use std::ffi::{CStr, CString};
use std::ptr;

use clbench_ffi::*;

fn last_error() -> String {
    let p = clb_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(clb_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn metrics_from_raw_matrix() {
    let values = [0.9, f64::NAN, 0.8, 0.7];
    let mut m = ClbMetrics { last_acc: 0.0, avg_acc: 0.0, bwt: 0.0, forgetting: 0.0, has_transfer: false };
    let st = unsafe { clb_metrics_compute(values.as_ptr(), 2, &mut m) };
    assert_eq!(st, ClbStatus::Ok);
    assert!((m.last_acc - 0.75).abs() < 1e-12);
    assert!((m.avg_acc - 0.825).abs() < 1e-12);
    assert!((m.bwt - -0.1).abs() < 1e-12);
    assert!(m.has_transfer);

    let one = [0.5];
    assert_eq!(unsafe { clb_metrics_compute(one.as_ptr(), 1, &mut m) }, ClbStatus::Ok);
    assert!(!m.has_transfer && m.bwt.is_nan());
}

#[test]
fn metrics_errors() {
    let mut m = ClbMetrics { last_acc: 0.0, avg_acc: 0.0, bwt: 0.0, forgetting: 0.0, has_transfer: false };
    assert_eq!(unsafe { clb_metrics_compute(ptr::null(), 2, &mut m) }, ClbStatus::NullPointer);
    assert!(last_error().contains("null"));
    let empty: [f64; 0] = [];
    assert_eq!(unsafe { clb_metrics_compute(empty.as_ptr(), 0, &mut m) }, ClbStatus::Metric);
    assert_eq!(unsafe { clb_metrics_compute(empty.as_ptr(), 0, ptr::null_mut()) }, ClbStatus::Metric);
}

#[test]
fn success_clears_error() {
    assert_eq!(unsafe { clb_ledger_new(ptr::null_mut()) }, ClbStatus::NullPointer);
    assert!(!clb_last_error().is_null());
    let mut l = ptr::null_mut();
    assert_eq!(unsafe { clb_ledger_new(&mut l) }, ClbStatus::Ok);
    assert!(clb_last_error().is_null());
    unsafe { clb_ledger_free(l) };
}

#[test]
fn ledger_totals() {
    let mut l = ptr::null_mut();
    unsafe {
        assert_eq!(clb_ledger_new(&mut l), ClbStatus::Ok);
        assert_eq!(clb_ledger_push(l, ClbStorageKind::Image, 3072), ClbStatus::Ok);
        assert_eq!(clb_ledger_push(l, ClbStorageKind::Parameter, 10), ClbStatus::Ok);
        assert_eq!(clb_ledger_set_frozen(l, 1000), ClbStatus::Ok);
        let mut units = 0u64;
        assert_eq!(clb_ledger_total_units(l, false, &mut units), ClbStatus::Ok);
        assert_eq!(units, 3072 + 40);
        assert_eq!(clb_ledger_total_units(l, true, &mut units), ClbStatus::Ok);
        assert_eq!(units, 3072 + 40 + 1000);
        clb_ledger_free(l);
    }
}

#[test]
fn published_ledgers() {
    for (name, total) in [("icarl", 9_926_048u64), ("gpm", 50_172_928)] {
        let mut l = ptr::null_mut();
        let n = cstr(name);
        unsafe {
            assert_eq!(clb_ledger_published(n.as_ptr(), &mut l), ClbStatus::Ok);
            let mut units = 0u64;
            assert_eq!(clb_ledger_total_units(l, false, &mut units), ClbStatus::Ok);
            assert_eq!(units, total);
            clb_ledger_free(l);
        }
    }
    let mut l = ptr::null_mut();
    let n = cstr("nope");
    assert_eq!(unsafe { clb_ledger_published(n.as_ptr(), &mut l) }, ClbStatus::OutOfRange);
    assert!(l.is_null());
}

#[test]
fn config_roundtrip_and_set() {
    let mut c = ptr::null_mut();
    unsafe {
        assert_eq!(clb_config_default(&mut c), ClbStatus::Ok);
        let a = cstr("method=ewc");
        assert_eq!(clb_config_set(c, a.as_ptr()), ClbStatus::Ok);
        let bad = cstr("no_such_key=1");
        assert_eq!(clb_config_set(c, bad.as_ptr()), ClbStatus::Config);
        assert!(last_error().contains("no_such_key"));
        let mut s = ptr::null_mut();
        assert_eq!(clb_config_to_yaml(c, &mut s), ClbStatus::Ok);
        let yaml = CStr::from_ptr(s).to_str().unwrap().to_owned();
        assert!(yaml.contains("method: ewc"));
        clb_string_free(s);
        clb_config_free(c);

        let y = cstr(&yaml);
        let mut c2 = ptr::null_mut();
        assert_eq!(clb_config_from_yaml(y.as_ptr(), &mut c2), ClbStatus::Ok);
        clb_config_free(c2);
    }
}

#[test]
fn config_errors() {
    let mut c = ptr::null_mut();
    let y = cstr("method: [unclosed");
    assert_eq!(unsafe { clb_config_from_yaml(y.as_ptr(), &mut c) }, ClbStatus::Config);
    let missing = cstr("/definitely/not/here.yaml");
    assert_eq!(unsafe { clb_config_load(missing.as_ptr(), &mut c) }, ClbStatus::Config);
    assert!(c.is_null());
    let bad = [0xffu8, 0];
    assert_eq!(unsafe { clb_config_load(bad.as_ptr().cast(), &mut c) }, ClbStatus::InvalidUtf8);
}

#[test]
fn stub_method_fails_as_config() {
    let mut c = ptr::null_mut();
    let y = cstr("method: l2p");
    unsafe {
        assert_eq!(clb_config_from_yaml(y.as_ptr(), &mut c), ClbStatus::Ok);
        let mut r = ptr::null_mut();
        assert_eq!(clb_run(c, false, &mut r), ClbStatus::Config);
        assert!(r.is_null());
        assert!(last_error().contains("l2p"));
        clb_config_free(c);
    }
}

#[test]
fn small_run_and_record_access() {
    let dir = tempfile::tempdir().unwrap();
    let yaml = format!(
        "dataset_names: [synthetic]\ninit_cls_num: 0\ninc_cls_num: 2\ntask_num: 2\nonline: true\nbatch_size: 10\n\
         method: finetune\nbackbone: {{arch: mlp2, hidden: [16, 16], feature_dim: 16}}\n\
         synthetic: {{num_classes: 4, input_shape: [8], train_per_class: 20, test_per_class: 10, latent_dim: 4, class_sep: 1.0, noise: 1.0, data_seed: 0}}\n\
         output_dir: {}\n",
        dir.path().display()
    );
    let y = cstr(&yaml);
    unsafe {
        let mut c = ptr::null_mut();
        assert_eq!(clb_config_from_yaml(y.as_ptr(), &mut c), ClbStatus::Ok, "{}", last_error());
        let mut r = ptr::null_mut();
        assert_eq!(clb_run(c, true, &mut r), ClbStatus::Ok, "{}", last_error());

        let mut n = 0usize;
        assert_eq!(clb_record_num_tasks(r, &mut n), ClbStatus::Ok);
        assert_eq!(n, 2);
        let mut acc = -1.0;
        assert_eq!(clb_record_accuracy(r, 1, 0, &mut acc), ClbStatus::Ok);
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(clb_record_accuracy(r, 0, 1, &mut acc), ClbStatus::OutOfRange);

        let mut m = ClbMetrics { last_acc: 0.0, avg_acc: 0.0, bwt: 0.0, forgetting: 0.0, has_transfer: false };
        assert_eq!(clb_record_metrics(r, &mut m), ClbStatus::Ok);
        assert!(m.has_transfer);

        let mut l = ptr::null_mut();
        assert_eq!(clb_record_ledger(r, &mut l), ClbStatus::Ok);
        clb_ledger_free(l);

        let mut s = ptr::null_mut();
        assert_eq!(clb_record_to_json(r, &mut s), ClbStatus::Ok);
        assert!(CStr::from_ptr(s).to_str().unwrap().contains("\"matrix\""));
        clb_string_free(s);

        let path = cstr(&dir.path().join("record.json").display().to_string());
        let mut r2 = ptr::null_mut();
        assert_eq!(clb_record_load(path.as_ptr(), &mut r2), ClbStatus::Ok, "{}", last_error());
        let mut acc2 = -1.0;
        assert_eq!(clb_record_accuracy(r2, 1, 0, &mut acc2), ClbStatus::Ok);
        assert_eq!(acc.to_bits(), acc2.to_bits());

        clb_record_free(r2);
        clb_record_free(r);
        clb_config_free(c);
    }
}

#[test]
fn free_null_is_noop() {
    unsafe {
        clb_config_free(ptr::null_mut());
        clb_record_free(ptr::null_mut());
        clb_ledger_free(ptr::null_mut());
        clb_string_free(ptr::null_mut());
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/clbench.h");
    let Ok(out) = std::process::Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header]).output() else {
        eprintln!("no C compiler; header check skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
