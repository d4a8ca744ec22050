//! Drives the C surface the way a foreign client would: through raw
//! pointers and C strings only, covering the whole pipeline plus the
//! error paths that must come back as statuses rather than crashes.

use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use cadrec_ffi::*;
use tempfile::tempdir;

/// Mirrors the smallest model/data shape the library is known to train
/// and gradient-check cleanly. Unset keys keep their defaults.
const TINY: &str = "
[model]
channels = 8
queries = 5
decoder_blocks = 1
heads = 2
cade_depth = 1

[data]
image_height = 32
image_width = 32
count_min = 2
count_max = 3
min_separation = 4
margin = 4
scale_min = 2
scale_max = 4
max_expressions_per_scene = 2
scenes = 4
train_fraction = 0.5

[optimizer]
epochs = 1
decay_epoch = 1

[run]
seed = 5
";

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn cpath(p: &Path) -> CString {
    c(p.to_str().unwrap())
}

fn last_error() -> String {
    unsafe {
        CStr::from_ptr(cadrec_last_error())
            .to_string_lossy()
            .into_owned()
    }
}

unsafe fn tiny_config() -> *mut CadrecConfig {
    let text = c(TINY);
    let cfg = cadrec_config_parse(text.as_ptr());
    assert!(!cfg.is_null(), "{}", last_error());
    cfg
}

/// gen + train under `dir`, returning the val set and checkpoint paths.
unsafe fn train_tiny(cfg: *const CadrecConfig, dir: &Path) -> (CString, CString) {
    let out_dir = cpath(dir);
    let mut counts = CadrecGenCounts { n_train: 0, n_val: 0 };
    let st = cadrec_gen(cfg, out_dir.as_ptr(), &mut counts);
    assert_eq!(st, CadrecStatus::CadrecOk, "{}", last_error());
    assert_eq!(counts.n_train, 2);
    assert_eq!(counts.n_val, 2);
    let train = cpath(&dir.join("train.scenes"));
    let val = cpath(&dir.join("val.scenes"));
    let ckpt = cpath(&dir.join("model.ckpt"));
    let metrics = cpath(&dir.join("metrics.log"));
    let st = cadrec_train(cfg, train.as_ptr(), ckpt.as_ptr(), metrics.as_ptr());
    assert_eq!(st, CadrecStatus::CadrecOk, "{}", last_error());
    assert!(dir.join("model.ckpt").exists());
    assert!(dir.join("metrics.log").exists());
    (val, ckpt)
}

#[test]
fn version_matches_the_crate_and_errors_are_per_call() {
    unsafe {
        let v = CStr::from_ptr(cadrec_version()).to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
        assert_eq!(last_error(), "");

        // a failure leaves a message; the next successful call clears it
        let bad = c("[model\n");
        assert!(cadrec_config_parse(bad.as_ptr()).is_null());
        assert!(last_error().contains("line 1"), "{}", last_error());
        let cfg = cadrec_config_default();
        assert!(!cfg.is_null());
        assert_eq!(last_error(), "");
        cadrec_config_free(cfg);
    }
}

#[test]
fn canonical_text_round_trips_through_parse() {
    unsafe {
        let cfg = cadrec_config_default();
        let text = cadrec_config_canonical(cfg);
        assert!(!text.is_null());
        let reparsed = cadrec_config_parse(text);
        assert!(!reparsed.is_null(), "{}", last_error());
        let text2 = cadrec_config_canonical(reparsed);
        assert!(!text2.is_null());
        assert_eq!(CStr::from_ptr(text), CStr::from_ptr(text2));
        cadrec_string_free(text);
        cadrec_string_free(text2);
        cadrec_config_free(cfg);
        cadrec_config_free(reparsed);

        // freeing NULL is a no-op for every release function
        cadrec_string_free(ptr::null_mut());
        cadrec_config_free(ptr::null_mut());
        cadrec_model_free(ptr::null_mut());
    }
}

#[test]
fn null_and_non_utf8_arguments_come_back_as_statuses() {
    unsafe {
        let st = cadrec_config_set_seed(ptr::null_mut(), 1);
        assert_eq!(st, CadrecStatus::CadrecNullArgument);
        assert!(last_error().contains("cfg"));

        assert!(cadrec_config_parse(ptr::null()).is_null());
        assert!(last_error().contains("text"));

        let bad = [0xff_u8, 0xfe, 0x00];
        assert!(cadrec_config_load(bad.as_ptr() as *const c_char).is_null());
        assert!(last_error().contains("not valid UTF-8"));

        let cfg = cadrec_config_default();
        let st = cadrec_config_param_count(cfg, ptr::null_mut());
        assert_eq!(st, CadrecStatus::CadrecNullArgument);
        let mut n = 0_usize;
        let st = cadrec_config_param_count(ptr::null(), &mut n);
        assert_eq!(st, CadrecStatus::CadrecNullArgument);
        let st = cadrec_gen(cfg, ptr::null(), ptr::null_mut());
        assert_eq!(st, CadrecStatus::CadrecNullArgument);
        assert!(last_error().contains("out_dir"));
        cadrec_config_free(cfg);
    }
}

#[test]
fn missing_files_report_io_failures() {
    unsafe {
        let nowhere = c("/nonexistent/cadrec/config.cfg");
        assert!(cadrec_config_load(nowhere.as_ptr()).is_null());
        assert!(!last_error().is_empty());

        let cfg = tiny_config();
        let ckpt = c("/nonexistent/cadrec/model.ckpt");
        let data = c("/nonexistent/cadrec/val.scenes");
        let report = c("/nonexistent/cadrec/eval.report");
        let st = cadrec_eval(
            cfg,
            ckpt.as_ptr(),
            data.as_ptr(),
            ptr::null(),
            report.as_ptr(),
            ptr::null_mut(),
        );
        assert_eq!(st, CadrecStatus::CadrecIo, "{}", last_error());
        assert!(!last_error().is_empty());
        cadrec_config_free(cfg);
    }
}

#[test]
fn stage_presets_grow_the_parameter_set() {
    unsafe {
        let cfg = cadrec_config_default();
        let count = |cfg, row| {
            assert_eq!(cadrec_config_set_ablation(cfg, row), CadrecStatus::CadrecOk);
            let mut n = 0_usize;
            let st = cadrec_config_param_count(cfg, &mut n);
            assert_eq!(st, CadrecStatus::CadrecOk, "{}", last_error());
            n
        };
        let bare = count(cfg, 1);
        let full = count(cfg, 6);
        assert!(bare > 0);
        assert!(full > bare, "bare {bare}, full {full}");
        // the last stage only switches post-processing, never parameters
        assert_eq!(count(cfg, 7), full);

        assert_eq!(cadrec_config_set_ablation(cfg, 0), CadrecStatus::CadrecInvalid);
        assert!(last_error().contains("outside 1..=7"));
        assert_eq!(cadrec_config_set_ablation(cfg, 8), CadrecStatus::CadrecInvalid);
        cadrec_config_free(cfg);
    }
}

#[test]
fn the_whole_pipeline_runs_through_the_c_surface() {
    let dir = tempdir().unwrap();
    unsafe {
        let cfg = tiny_config();
        assert_eq!(cadrec_config_set_seed(cfg, 9), CadrecStatus::CadrecOk);
        let (val, ckpt) = train_tiny(cfg, dir.path());

        let report = cpath(&dir.path().join("eval.report"));
        let mut m = CadrecMetrics {
            mae: -1.0,
            rmse: -1.0,
            precision: -1.0,
            recall: -1.0,
            f1: -1.0,
        };
        let st = cadrec_eval(
            cfg,
            ckpt.as_ptr(),
            val.as_ptr(),
            ptr::null(),
            report.as_ptr(),
            &mut m,
        );
        assert_eq!(st, CadrecStatus::CadrecOk, "{}", last_error());
        assert!(dir.path().join("eval.report").exists());
        assert!(m.mae >= 0.0);
        assert!(m.rmse >= m.mae - 1e-12);
        for v in [m.precision, m.recall, m.f1] {
            assert!((0.0..=1.0).contains(&v), "metric {v} outside [0, 1]");
        }

        let report2 = cpath(&dir.path().join("eval2.report"));
        let threshold = c("threshold");
        let st = cadrec_eval(
            cfg,
            ckpt.as_ptr(),
            val.as_ptr(),
            threshold.as_ptr(),
            report2.as_ptr(),
            ptr::null_mut(),
        );
        assert_eq!(st, CadrecStatus::CadrecOk, "{}", last_error());

        let model = cadrec_model_load(cfg, ckpt.as_ptr());
        assert!(!model.is_null(), "{}", last_error());
        let mut by_switch = -1.0_f64;
        let mut by_name = -1.0_f64;
        let st = cadrec_model_count(model, val.as_ptr(), 0, 0, ptr::null(), &mut by_switch);
        assert_eq!(st, CadrecStatus::CadrecOk, "{}", last_error());
        // this configuration's own switch is the threshold strategy
        let threshold = c("threshold");
        let st = cadrec_model_count(model, val.as_ptr(), 0, 0, threshold.as_ptr(), &mut by_name);
        assert_eq!(st, CadrecStatus::CadrecOk, "{}", last_error());
        assert_eq!(by_switch, by_name);
        assert!(by_switch >= 0.0);
        assert_eq!(by_switch.fract(), 0.0, "counts are whole numbers");
        // the estimator is present, so the density strategy works too
        let density = c("density");
        let mut by_density = -1.0_f64;
        let st = cadrec_model_count(model, val.as_ptr(), 0, 0, density.as_ptr(), &mut by_density);
        assert_eq!(st, CadrecStatus::CadrecOk, "{}", last_error());
        assert!(by_density >= 0.0);
        assert_eq!(by_density.fract(), 0.0);

        let mut n = 0.0_f64;
        let st = cadrec_model_count(model, val.as_ptr(), 999, 0, ptr::null(), &mut n);
        assert_eq!(st, CadrecStatus::CadrecInvalid);
        assert!(last_error().contains("out of range"));
        let bogus = c("bogus");
        let st = cadrec_model_count(model, val.as_ptr(), 0, 0, bogus.as_ptr(), &mut n);
        assert_eq!(st, CadrecStatus::CadrecInvalid);
        assert!(last_error().contains("unknown strategy"));

        let prefix = cpath(&dir.path().join("pair0"));
        let st = cadrec_export_density(cfg, ckpt.as_ptr(), val.as_ptr(), 0, 0, prefix.as_ptr());
        assert_eq!(st, CadrecStatus::CadrecOk, "{}", last_error());
        for suffix in ["pred.tensors", "gt.tensors", "pred.pgm", "gt.pgm"] {
            let f = dir.path().join(format!("pair0.{suffix}"));
            assert!(f.exists(), "missing {}", f.display());
        }

        cadrec_model_free(model);
        cadrec_config_free(cfg);
    }
}

#[test]
fn a_bare_model_reports_a_missing_density_estimator() {
    let dir = tempdir().unwrap();
    unsafe {
        let cfg = tiny_config();
        assert_eq!(cadrec_config_set_ablation(cfg, 1), CadrecStatus::CadrecOk);
        let (val, ckpt) = train_tiny(cfg, dir.path());

        let model = cadrec_model_load(cfg, ckpt.as_ptr());
        assert!(!model.is_null(), "{}", last_error());
        let mut n = -1.0_f64;
        let threshold = c("threshold");
        let st = cadrec_model_count(model, val.as_ptr(), 0, 0, threshold.as_ptr(), &mut n);
        assert_eq!(st, CadrecStatus::CadrecOk, "{}", last_error());
        assert!(n >= 0.0);
        let density = c("density");
        let st = cadrec_model_count(model, val.as_ptr(), 0, 0, density.as_ptr(), &mut n);
        assert_eq!(st, CadrecStatus::CadrecInvalid);
        assert!(last_error().contains("estimator"), "{}", last_error());

        cadrec_model_free(model);
        cadrec_config_free(cfg);
    }
}

#[test]
fn loading_a_checkpoint_into_the_wrong_architecture_fails_cleanly() {
    let dir = tempdir().unwrap();
    unsafe {
        let cfg = tiny_config();
        let (_val, ckpt) = train_tiny(cfg, dir.path());

        let widened = TINY.replace("channels = 8", "channels = 12");
        let text = c(&widened);
        let cfg12 = cadrec_config_parse(text.as_ptr());
        assert!(!cfg12.is_null(), "{}", last_error());
        assert!(cadrec_model_load(cfg12, ckpt.as_ptr()).is_null());
        // either the tensor count or a shape disagrees; both name the model side
        assert!(last_error().contains("model expects"), "{}", last_error());

        cadrec_config_free(cfg12);
        cadrec_config_free(cfg);
    }
}

#[test]
fn gradcheck_passes_and_returns_its_report() {
    unsafe {
        let cfg = tiny_config();
        let mut ok = false;
        let mut text: *mut c_char = ptr::null_mut();
        let st = cadrec_gradcheck(cfg, &mut ok, &mut text);
        assert_eq!(st, CadrecStatus::CadrecOk, "{}", last_error());
        assert!(ok, "gradient checks failed");
        assert!(!text.is_null());
        let report = CStr::from_ptr(text).to_str().unwrap().to_owned();
        let checks = report.lines().filter(|l| l.starts_with("gradcheck ")).count();
        assert!(checks >= 30, "{checks} check lines");
        assert!(report.contains("control corrupted_backward"));
        assert!(report.contains(" caught"));
        assert!(!report.contains("MISSED"));
        cadrec_string_free(text);
        cadrec_config_free(cfg);
    }
}
