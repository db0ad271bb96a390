use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use graspladder_ffi::*;

fn last_error() -> String {
    let mut buf = [0 as std::ffi::c_char; 512];
    let mut len = 0usize;
    unsafe { gl_last_error_message(buf.as_mut_ptr(), buf.len(), &mut len) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn new_env(regime: &str, objects: u32) -> (GlStatus, *mut GlEnv) {
    let r = CString::new(regime).unwrap();
    let mut env = ptr::null_mut();
    let s = unsafe { gl_env_new(ptr::null(), r.as_ptr(), objects, &mut env) };
    (s, env)
}

#[test]
fn episode_through_handle_matches_library() {
    let (s, env) = new_env("medium_jitter", 3);
    assert_eq!(s, GlStatus::Ok);
    let mut state = [0f32; GL_STATE_DIM];
    assert_eq!(unsafe { gl_env_reset(env, 11, state.as_mut_ptr()) }, GlStatus::Ok);

    let cfg = graspladder::EnvConfig::default();
    let task = graspladder::TaskConfig::new(graspladder::Regime::MediumJitter).with_objects(3);
    let setup = graspladder::EpisodeSetup::generate(&cfg, &task, 11).unwrap();
    let mut reference = setup.reset(&cfg).unwrap();
    assert_eq!(state, reference.encode_state15());

    let action = [0.5f32, -0.25, -1.0, 0.0, 0.0, 0.0, 0.0];
    let mut done = false;
    let mut steps = 0;
    while !done {
        assert_eq!(unsafe { gl_env_step(env, action.as_ptr(), state.as_mut_ptr(), &mut done) }, GlStatus::Ok);
        reference.step(&graspladder::Action7::from_slice(&action).unwrap()).unwrap();
        assert_eq!(state, reference.encode_state15());
        steps += 1;
    }
    assert_eq!(steps, cfg.workspace.horizon);
    assert_eq!(unsafe { gl_env_step(env, action.as_ptr(), state.as_mut_ptr(), &mut done) }, GlStatus::EpisodeOver);
    assert!(last_error().contains("episode is over"));

    let mut text = [0 as std::ffi::c_char; 8];
    let mut len = 0usize;
    assert_eq!(unsafe { gl_env_instruction(env, text.as_mut_ptr(), text.len(), &mut len) }, GlStatus::BufferTooSmall);
    assert_eq!(len, setup.instruction.text.len());
    unsafe { gl_env_free(env) };
}

#[test]
fn bad_inputs_report_status_and_message() {
    let (s, env) = new_env("nowhere", 5);
    assert_eq!(s, GlStatus::InvalidConfig);
    assert!(env.is_null());
    assert!(!last_error().is_empty());

    let (s, env) = new_env("full_random", 9);
    assert_eq!(s, GlStatus::InvalidConfig);
    assert!(env.is_null());

    let (_, env) = new_env("full_random", 5);
    let nan = [f32::NAN, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let zero = [0f32; GL_ACTION_DIM];
    assert_eq!(unsafe { gl_env_step(env, zero.as_ptr(), ptr::null_mut(), ptr::null_mut()) }, GlStatus::InvalidArgument);
    assert!(last_error().contains("reset"));
    unsafe { gl_env_reset(env, 0, ptr::null_mut()) };
    assert_eq!(unsafe { gl_env_step(env, nan.as_ptr(), ptr::null_mut(), ptr::null_mut()) }, GlStatus::InvalidArgument);
    assert_eq!(unsafe { gl_env_step(env, ptr::null(), ptr::null_mut(), ptr::null_mut()) }, GlStatus::NullPointer);
    unsafe { gl_env_free(env) };
    unsafe { gl_env_free(ptr::null_mut()) };
}

#[test]
fn gae_matches_library() {
    let r = [1.0, 0.5, -0.2, 2.0, 0.0];
    let v = [0.3, 0.1, 0.4, -0.5, 0.2];
    let d = [false, false, true, false, false];
    let (mut adv, mut ret) = ([0.0; 5], [0.0; 5]);
    let s = unsafe {
        gl_compute_gae(r.as_ptr(), v.as_ptr(), d.as_ptr(), 5, 0.7, 0.8, 0.9, adv.as_mut_ptr(), ret.as_mut_ptr())
    };
    assert_eq!(s, GlStatus::Ok);
    let (a, rt) = graspladder::ppo::compute_gae(&r, &v, 0.7, &d, 0.8, 0.9).unwrap();
    assert_eq!(adv.to_vec(), a);
    assert_eq!(ret.to_vec(), rt);
}

#[test]
fn protocol_round_trip() {
    let json = CString::new(r#"{"type":"ACK","episode_id":4,"stored":true}"#).unwrap();
    let mut len = 0usize;
    assert_eq!(unsafe { gl_protocol_encode(json.as_ptr(), ptr::null_mut(), 0, &mut len) }, GlStatus::BufferTooSmall);
    let mut frame = vec![0u8; len];
    assert_eq!(unsafe { gl_protocol_encode(json.as_ptr(), frame.as_mut_ptr(), len, &mut len) }, GlStatus::Ok);

    let mut out = [0 as std::ffi::c_char; 128];
    let (mut jl, mut used) = (0usize, 0usize);
    let s = unsafe { gl_protocol_decode(frame.as_ptr(), len - 1, out.as_mut_ptr(), out.len(), &mut jl, &mut used) };
    assert_eq!((s, used), (GlStatus::Ok, 0));
    let s = unsafe { gl_protocol_decode(frame.as_ptr(), len, out.as_mut_ptr(), out.len(), &mut jl, &mut used) };
    assert_eq!((s, used), (GlStatus::Ok, len));
    assert_eq!(unsafe { CStr::from_ptr(out.as_ptr()) }.to_str().unwrap(), json.to_str().unwrap());

    let bad = CString::new(r#"{"type":"NOPE"}"#).unwrap();
    assert_eq!(unsafe { gl_protocol_encode(bad.as_ptr(), frame.as_mut_ptr(), frame.len(), &mut len) }, GlStatus::Protocol);
    let huge = [0x7fu8, 0xff, 0xff, 0xff];
    let s = unsafe { gl_protocol_decode(huge.as_ptr(), 4, out.as_mut_ptr(), out.len(), &mut jl, &mut used) };
    assert_eq!(s, GlStatus::Protocol);
}

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_static_library() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let lib = target_dir().join("libgraspladder_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let bin = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("graspladder_smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-std=c11")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("C compiler available");
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let line = String::from_utf8(out.stdout).unwrap();
    assert_eq!(line.trim(), format!("{}|50|0|18|0000000e", env!("CARGO_PKG_VERSION")));
}
