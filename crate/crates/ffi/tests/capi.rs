use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use rpo_core::embed::embed_hashed_bow;
use rpo_core::losses::{self, LogRatios};
use rpo_core::policy::{generate, logprob_response, DecodeConfig, ModelParams, ModelShape};
use rpo_ffi::*;

fn last_error() -> String {
    let p = rpo_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_model(seed: u64) -> *mut RpoModel {
    let mut handle = ptr::null_mut();
    assert_eq!(
        unsafe { rpo_model_new(4, 8, 16, seed, 0.3, &mut handle) },
        RpoStatus::Ok
    );
    assert!(!handle.is_null());
    handle
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

#[test]
fn model_matches_core_and_round_trips() {
    let handle = new_model(7);
    let reference = ModelParams::init(ModelShape::new(4, 8, 16).unwrap(), 7, 0.3).unwrap();

    let mut count = 0usize;
    assert_eq!(unsafe { rpo_model_num_params(handle, &mut count) }, RpoStatus::Ok);
    assert_eq!(count, reference.values().len());
    let mut values = vec![0.0; count];
    assert_eq!(
        unsafe { rpo_model_params(handle, values.as_mut_ptr(), count) },
        RpoStatus::Ok
    );
    assert_eq!(values, reference.values());

    let (prompt, response) = (c("tell me about rivers"), c("water flows"));
    let mut lp = 0.0;
    assert_eq!(
        unsafe { rpo_model_logprob(handle, prompt.as_ptr(), response.as_ptr(), &mut lp) },
        RpoStatus::Ok
    );
    assert_eq!(lp, logprob_response(&reference, "tell me about rivers", "water flows"));

    let mut decoded = ptr::null_mut();
    assert_eq!(
        unsafe { rpo_model_decode(handle, prompt.as_ptr(), 12, 0.0, 0, &mut decoded) },
        RpoStatus::Ok
    );
    let text = unsafe { CStr::from_ptr(decoded) }.to_string_lossy().into_owned();
    let cfg = DecodeConfig {
        max_new: 12,
        ..DecodeConfig::default()
    };
    assert_eq!(
        text,
        generate(&reference, "tell me about rivers", &cfg).replace('\0', "\u{fffd}")
    );
    unsafe { rpo_string_free(decoded) };

    let dir = tempfile::tempdir().unwrap();
    let path = c(dir.path().join("m.bin").to_str().unwrap());
    assert_eq!(unsafe { rpo_model_save(handle, path.as_ptr()) }, RpoStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { rpo_model_load(path.as_ptr(), &mut loaded) }, RpoStatus::Ok);
    let mut again = vec![0.0; count];
    assert_eq!(
        unsafe { rpo_model_params(loaded, again.as_mut_ptr(), count) },
        RpoStatus::Ok
    );
    assert_eq!(again, values);
    unsafe {
        rpo_model_free(loaded);
        rpo_model_free(handle);
        rpo_model_free(ptr::null_mut());
        rpo_string_free(ptr::null_mut());
    }
}

#[test]
fn errors_set_status_and_message() {
    let mut handle = ptr::null_mut();
    assert_eq!(
        unsafe { rpo_model_new(0, 8, 16, 1, 0.3, &mut handle) },
        RpoStatus::InvalidArgument
    );
    assert!(handle.is_null());
    assert!(!last_error().is_empty());

    assert_eq!(
        unsafe { rpo_model_new(4, 8, 16, 1, 0.3, ptr::null_mut()) },
        RpoStatus::NullPointer
    );
    assert!(last_error().contains("out"));

    let missing = c("/nonexistent/dir/model.bin");
    assert_eq!(unsafe { rpo_model_load(missing.as_ptr(), &mut handle) }, RpoStatus::Io);

    let mut lp = 0.0;
    let p = c("x");
    assert_eq!(
        unsafe { rpo_model_logprob(ptr::null(), p.as_ptr(), p.as_ptr(), &mut lp) },
        RpoStatus::NullPointer
    );

    let bad = [0xffu8, 0xfe, 0];
    let model = new_model(1);
    let status = unsafe { rpo_model_logprob(model, bad.as_ptr().cast(), p.as_ptr(), &mut lp) };
    assert_eq!(status, RpoStatus::Utf8);
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { rpo_model_decode(model, p.as_ptr(), 4, -1.0, 0, &mut out) },
        RpoStatus::InvalidArgument
    );
    let mut small = [0.0; 3];
    assert_eq!(
        unsafe { rpo_model_params(model, small.as_mut_ptr(), 3) },
        RpoStatus::ShapeMismatch
    );
    unsafe { rpo_model_free(model) };

    let mut count = 0usize;
    let fresh = new_model(2);
    assert_eq!(unsafe { rpo_model_num_params(fresh, &mut count) }, RpoStatus::Ok);
    assert!(rpo_last_error_message().is_null());
    unsafe { rpo_model_free(fresh) };
}

#[test]
fn weight_builders_match_core() {
    let d = [0.1, 0.5, 0.9, 0.2, 0.4, 1.3];
    let mut out = [0.0; 6];
    assert_eq!(
        unsafe { rpo_weights_from_distances(d.as_ptr(), 2, 3, 0.5, out.as_mut_ptr()) },
        RpoStatus::Ok
    );
    assert_eq!(
        out.as_slice(),
        losses::weight_from_distances(&d, 2, 3, 0.5).unwrap().entries()
    );

    assert_eq!(unsafe { rpo_weights_uniform(2, 3, out.as_mut_ptr()) }, RpoStatus::Ok);
    assert!(out.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

    let mut diag = [0.0; 9];
    assert_eq!(
        unsafe { rpo_weights_diagonal(3, 0.7, diag.as_mut_ptr()) },
        RpoStatus::Ok
    );
    assert_eq!(diag.as_slice(), losses::weight_diagonal(3, 3, 0.7).unwrap().entries());

    assert_eq!(
        unsafe { rpo_weights_from_distances(d.as_ptr(), 2, 3, 0.0, out.as_mut_ptr()) },
        RpoStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { rpo_weights_diagonal(3, 1.5, diag.as_mut_ptr()) },
        RpoStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { rpo_weights_uniform(2, 3, ptr::null_mut()) },
        RpoStatus::NullPointer
    );
    assert_eq!(
        unsafe { rpo_weights_uniform(0, 3, out.as_mut_ptr()) },
        RpoStatus::ShapeMismatch
    );
}

#[test]
fn losses_match_core() {
    let wins = [0.4, -0.2, 1.1];
    let loses = [-0.3, 0.6, 0.0];
    let lr = LogRatios::new(wins.to_vec(), loses.to_vec()).unwrap();
    let w = losses::weight_uniform(3, 3).unwrap();

    let (mut loss, mut gw, mut gl) = (0.0, [0.0; 3], [0.0; 3]);
    let status = unsafe {
        rpo_rpo_loss(
            wins.as_ptr(),
            3,
            loses.as_ptr(),
            3,
            w.entries().as_ptr(),
            0.1,
            &mut loss,
            gw.as_mut_ptr(),
            gl.as_mut_ptr(),
        )
    };
    assert_eq!(status, RpoStatus::Ok);
    assert_eq!(loss, losses::rpo_loss(&losses::score_matrix(&lr, &w, 0.1).unwrap()));
    let (ew, el) = losses::rpo_grad_logratios(&lr, &w, 0.1).unwrap();
    assert_eq!((gw.to_vec(), gl.to_vec()), (ew, el));

    let status = unsafe {
        rpo_dpo_loss(
            wins.as_ptr(),
            loses.as_ptr(),
            3,
            0.1,
            &mut loss,
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_eq!(status, RpoStatus::Ok);
    assert_eq!(loss, losses::dpo_loss(&lr, 0.1).unwrap());

    let status = unsafe {
        rpo_ipo_loss(
            wins.as_ptr(),
            loses.as_ptr(),
            3,
            0.1,
            &mut loss,
            gw.as_mut_ptr(),
            gl.as_mut_ptr(),
        )
    };
    assert_eq!(status, RpoStatus::Ok);
    assert_eq!(loss, losses::ipo_loss(&lr, 0.1).unwrap());
    assert_eq!(gw.to_vec(), losses::ipo_grad_logratios(&lr, 0.1).unwrap().0);

    let all = [0.4, -0.2, 1.1, -0.3];
    let labels = [true, true, false, false];
    let (mut z, mut g) = (0.0, [0.0; 4]);
    let status = unsafe {
        rpo_kto_loss(
            all.as_ptr(),
            labels.as_ptr(),
            4,
            0.1,
            1.0,
            1.0,
            &mut loss,
            &mut z,
            g.as_mut_ptr(),
        )
    };
    assert_eq!(status, RpoStatus::Ok);
    assert_eq!(loss, losses::kto_loss(&all, &labels, 0.1, (1.0, 1.0)).unwrap());
    assert_eq!(z, losses::kto_reference_point(&all).unwrap());
    assert_eq!(
        g.to_vec(),
        losses::kto_grad_at(&all, &labels, 0.1, (1.0, 1.0), z).unwrap()
    );
}

#[test]
fn loss_input_errors() {
    let wins = [0.4, f64::NAN];
    let loses = [0.1, 0.2];
    let uniform = [0.5; 4];
    let mut loss = 0.0;
    let status = unsafe {
        rpo_rpo_loss(
            wins.as_ptr(),
            2,
            loses.as_ptr(),
            2,
            uniform.as_ptr(),
            0.1,
            &mut loss,
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_eq!(status, RpoStatus::NonFinite);

    let ok = [0.4, 0.3];
    let skewed = [0.9, 0.9, 0.5, 0.5];
    let status = unsafe {
        rpo_rpo_loss(
            ok.as_ptr(),
            2,
            loses.as_ptr(),
            2,
            skewed.as_ptr(),
            0.1,
            &mut loss,
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_eq!(status, RpoStatus::InvalidArgument);
    assert!(last_error().contains("row 0"));

    let status = unsafe {
        rpo_dpo_loss(
            ok.as_ptr(),
            ptr::null(),
            2,
            0.1,
            &mut loss,
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_eq!(status, RpoStatus::NullPointer);
    let status = unsafe {
        rpo_dpo_loss(
            ok.as_ptr(),
            loses.as_ptr(),
            2,
            -1.0,
            &mut loss,
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_eq!(status, RpoStatus::InvalidArgument);
    let status = unsafe {
        rpo_ipo_loss(
            ok.as_ptr(),
            loses.as_ptr(),
            2,
            0.1,
            ptr::null_mut(),
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_eq!(status, RpoStatus::NullPointer);
}

#[test]
fn bt_and_bow_match_core() {
    let mut p = 0.0;
    assert_eq!(unsafe { rpo_bt_probability(2.0, 1.0, &mut p) }, RpoStatus::Ok);
    assert_eq!(p, rpo_core::synth::bt_probability(2.0, 1.0).unwrap());
    assert_eq!(
        unsafe { rpo_bt_probability(f64::INFINITY, 1.0, &mut p) },
        RpoStatus::NonFinite
    );

    let text = c("the quick brown fox");
    let mut e = [0.0; 32];
    assert_eq!(
        unsafe { rpo_hashed_bow(text.as_ptr(), 32, e.as_mut_ptr()) },
        RpoStatus::Ok
    );
    assert_eq!(
        e.as_slice(),
        embed_hashed_bow("the quick brown fox", 32).unwrap().values()
    );
    assert_eq!(
        unsafe { rpo_hashed_bow(text.as_ptr(), 4, e.as_mut_ptr()) },
        RpoStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { rpo_hashed_bow(ptr::null(), 32, e.as_mut_ptr()) },
        RpoStatus::NullPointer
    );
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(rpo_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include <math.h>
#include "rpo_ffi.h"

int main(void) {
    RpoModel *m = NULL;
    if (rpo_model_new(4, 8, 16, 3, 0.3, &m) != RPO_STATUS_OK) return 10;
    size_t n = 0;
    if (rpo_model_num_params(m, &n) != RPO_STATUS_OK || n == 0) return 11;
    double lp = 0.0;
    if (rpo_model_logprob(m, "hello", "world", &lp) != RPO_STATUS_OK || !(lp < 0.0)) return 12;
    char *text = NULL;
    if (rpo_model_decode(m, "hello", 8, 0.0, 0, &text) != RPO_STATUS_OK) return 13;
    rpo_string_free(text);
    rpo_model_free(m);

    double w[4], wins[2] = {0.25, 0.25}, loses[2] = {0.25, 0.25}, loss = 0.0;
    if (rpo_weights_uniform(2, 2, w) != RPO_STATUS_OK) return 14;
    if (rpo_rpo_loss(wins, 2, loses, 2, w, 0.1, &loss, NULL, NULL) != RPO_STATUS_OK) return 15;
    if (fabs(loss - log(2.0)) > 1e-12) return 16;
    if (rpo_model_new(0, 8, 16, 3, 0.3, &m) != RPO_STATUS_INVALID_ARGUMENT) return 17;
    if (rpo_last_error_message() == NULL) return 18;
    printf("%s\n", rpo_version());
    return 0;
}
"#;

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

/// `target/<profile>`, two levels above the test executable in `deps/`.
fn profile_dir() -> PathBuf {
    std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf()
}

fn compiler() -> Option<String> {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    Command::new(&cc)
        .arg("--version")
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|_| cc)
}

#[test]
fn generated_header_is_current() {
    let header = std::fs::read_to_string(crate_dir().join("include/rpo_ffi.h")).unwrap();
    for name in [
        "rpo_model_new",
        "rpo_model_load",
        "rpo_model_save",
        "rpo_model_free",
        "rpo_model_decode",
        "rpo_string_free",
        "rpo_rpo_loss",
        "rpo_dpo_loss",
        "rpo_ipo_loss",
        "rpo_kto_loss",
        "rpo_weights_from_distances",
        "rpo_bt_probability",
        "rpo_hashed_bow",
        "rpo_last_error_message",
        "RPO_STATUS_PANIC",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

#[test]
fn c_program_links_against_static_library() {
    let Some(cc) = compiler() else {
        eprintln!("skipping: no C compiler");
        return;
    };
    let lib = profile_dir().join("librpo_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let exe = dir.path().join("main");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let include = crate_dir().join("include");
    let build = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg(format!("-I{}", include.display()))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .output()
        .unwrap();
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let run = Command::new(Path::new(&exe)).output().unwrap();
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
