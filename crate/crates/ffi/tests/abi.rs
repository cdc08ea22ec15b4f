use std::ffi::{CStr, CString};
use std::ptr;

use imexreg_ffi::*;

fn last_error() -> String {
    let p = imexreg_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn buffer_lifecycle() {
    unsafe {
        let mut b = ptr::null_mut();
        assert_eq!(imexreg_buffer_new(3, 2, 7, &mut b), ImexStatus::Ok);
        let (mut slots, mut labels, mut feats, mut n) = ([0usize; 4], [0usize; 4], [0f64; 8], 0usize);
        let status = imexreg_buffer_sample(b, 4, slots.as_mut_ptr(), labels.as_mut_ptr(), feats.as_mut_ptr(), &mut n);
        assert_eq!(status, ImexStatus::EmptyBuffer);
        assert!(last_error().contains("empty"));

        for i in 0..10 {
            let x = [i as f64, -(i as f64)];
            let mut slot = 0i64;
            assert_eq!(imexreg_buffer_insert(b, x.as_ptr(), i % 3, -1, &mut slot), ImexStatus::Ok);
            if i < 3 {
                assert_eq!(slot, i as i64);
            }
        }
        let (mut len, mut seen) = (0usize, 0u64);
        assert_eq!(imexreg_buffer_stats(b, &mut len, &mut seen), ImexStatus::Ok);
        assert_eq!((len, seen), (3, 10));

        let status = imexreg_buffer_sample(b, 4, slots.as_mut_ptr(), labels.as_mut_ptr(), feats.as_mut_ptr(), &mut n);
        assert_eq!((status, n), (ImexStatus::Ok, 3));
        for i in 0..n {
            let v = feats[2 * i];
            assert_eq!(feats[2 * i + 1], -v);
            assert_eq!(labels[i], v as usize % 3);
        }
        imexreg_buffer_free(b);
        imexreg_buffer_free(ptr::null_mut());
    }
}

#[test]
fn null_and_argument_errors() {
    unsafe {
        assert_eq!(imexreg_buffer_new(3, 2, 0, ptr::null_mut()), ImexStatus::NullPointer);
        assert!(last_error().contains("out"));
        let mut b = ptr::null_mut();
        assert_eq!(imexreg_buffer_new(3, 0, 0, &mut b), ImexStatus::InvalidArgument);
        let mut out = 0.0;
        let z = [1.0, 0.0];
        assert_eq!(imexreg_supcon_loss(z.as_ptr(), [0usize].as_ptr(), 1, 2, 0.5, &mut out), ImexStatus::InvalidArgument);
    }
}

#[test]
fn losses_match_closed_forms() {
    unsafe {
        let mut out = 0.0;
        let logits = [0.0, 0.0, 0.0, 0.0];
        assert_eq!(imexreg_er_loss(logits.as_ptr(), [0usize, 1].as_ptr(), 2, 2, &mut out), ImexStatus::Ok);
        assert!((out - 2f64.ln()).abs() < 1e-12);

        // Two tight pairs of orthogonal unit vectors at temperature 1.
        let z = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        let labels = [0usize, 0, 1, 1];
        assert_eq!(imexreg_supcon_loss(z.as_ptr(), labels.as_ptr(), 4, 2, 1.0, &mut out), ImexStatus::Ok);
        let expected = 4.0 * ((1f64.exp() + 2.0).ln() - 1.0);
        assert!((out - expected).abs() < 1e-12);

        let c = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
        assert_eq!(imexreg_ecr_loss(z.as_ptr(), c.as_ptr(), 4, 2, 2, &mut out), ImexStatus::Ok);
        assert!((out - 0.5).abs() < 1e-12);
    }
}

#[test]
fn metrics() {
    unsafe {
        let packed = [90.0, 60.0, 80.0];
        let mut f = 0.0;
        assert_eq!(imexreg_forgetting(packed.as_ptr(), 2, &mut f), ImexStatus::Ok);
        assert_eq!(f, 30.0);
        let mut d = 0usize;
        assert_eq!(imexreg_jl_bound_dim(0.5, 100, &mut d), ImexStatus::Ok);
        assert_eq!(d, 222);
        assert_eq!(imexreg_jl_bound_dim(1.5, 100, &mut d), ImexStatus::InvalidArgument);
    }
}

const CONFIG: &str = r#"{
  "schema_version": 1,
  "stream": {
    "dataset": {"mixture": {"classes": 4, "dim": 5, "train_per_class": 10, "test_per_class": 5,
                "separation": 3.0, "noise": 1.0, "seed": 2}},
    "scenario": "class-il", "tasks": 2, "classes_per_task": 2
  },
  "model": {"encoder_widths": [8, 6], "projection_widths": [6, 4], "classifier_projection_widths": [4, 3]},
  "train": {"preset": "desk", "epochs": 1, "batch_size": 8, "minibatch_size": 8},
  "methods": ["imex-reg"],
  "seeds": [0]
}"#;

#[test]
fn run_json_roundtrip() {
    unsafe {
        let cfg = CString::new(CONFIG).unwrap();
        let method = CString::new("imex-reg").unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(imexreg_run_json(cfg.as_ptr(), method.as_ptr(), 3, ptr::null(), &mut out), ImexStatus::Ok);
        let report: serde_json::Value = serde_json::from_str(CStr::from_ptr(out).to_str().unwrap()).unwrap();
        imexreg_string_free(out);
        assert_eq!(report["run_id"], "imex-reg-seed3");
        assert_eq!(report["class_il"]["rows"].as_array().unwrap().len(), 2);

        let bad = CString::new(CONFIG.replace("\"epochs\": 1", "\"epochs\": \"one\"")).unwrap();
        let status = imexreg_run_json(bad.as_ptr(), method.as_ptr(), 0, ptr::null(), &mut out);
        assert_eq!(status, ImexStatus::InvalidConfig);
        assert!(last_error().contains("train.epochs"));
        let nope = CString::new("nope").unwrap();
        assert_eq!(imexreg_run_json(cfg.as_ptr(), nope.as_ptr(), 0, ptr::null(), &mut out), ImexStatus::InvalidArgument);
    }
}

#[test]
fn version_is_set() {
    let v = unsafe { CStr::from_ptr(imexreg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
