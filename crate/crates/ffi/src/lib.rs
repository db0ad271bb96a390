//! C interface to the grasping environment, GAE and the wire protocol.
//!
//! Every fallible call returns a [`GlStatus`]; on failure the message is kept
//! per thread and can be read with [`gl_last_error_message`]. Environments are
//! opaque handles created with [`gl_env_new`] and released with [`gl_env_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use graspladder::metrics;
use graspladder::placement::Regime;
use graspladder::ppo;
use graspladder::protocol::{self, Message};
use graspladder::{Action7, EnvConfig, EnvState, EpisodeSetup, Error, TaskConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    EpisodeOver = 4,
    PlacementFailure = 5,
    BufferTooSmall = 6,
    Protocol = 7,
    Io = 8,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GlOutcome {
    pub success: bool,
    pub grasp_any: bool,
    pub reach: bool,
}

pub const GL_STATE_DIM: usize = 15;
pub const GL_ACTION_DIM: usize = 7;

/// Opaque environment handle.
pub struct GlEnv {
    env: EnvConfig,
    task: TaskConfig,
    setup: Option<EpisodeSetup>,
    state: Option<EnvState>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let c = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: GlStatus, msg: impl Into<String>) -> GlStatus {
    set_error(msg);
    status
}

fn status_of(e: &Error) -> GlStatus {
    match e {
        Error::InvalidConfig(_) | Error::HashMismatch { .. } | Error::Json(_) => GlStatus::InvalidConfig,
        Error::EpisodeOver { .. } => GlStatus::EpisodeOver,
        Error::PlacementFailure { .. } => GlStatus::PlacementFailure,
        Error::Protocol(_) | Error::Oversize(_) => GlStatus::Protocol,
        Error::Io(_) => GlStatus::Io,
        _ => GlStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), GlStatus>) -> GlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GlStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(GlStatus::Panic, "internal panic"),
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, GlStatus>;
}

impl<T> OrStatus<T> for graspladder::Result<T> {
    fn or_status(self) -> Result<T, GlStatus> {
        self.map_err(|e| fail(status_of(&e), e.to_string()))
    }
}

unsafe fn opt_str<'a>(p: *const c_char) -> Result<Option<&'a str>, GlStatus> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Some)
        .map_err(|_| fail(GlStatus::InvalidArgument, "string is not valid UTF-8"))
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), GlStatus> {
    if p.is_null() {
        Err(fail(GlStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// Copies `bytes` plus a trailing NUL into `buf`; `out_len` receives the
/// length without the NUL even when the buffer is too small.
unsafe fn copy_out(bytes: &[u8], buf: *mut c_char, cap: usize, out_len: *mut usize) -> Result<(), GlStatus> {
    if !out_len.is_null() {
        *out_len = bytes.len();
    }
    if buf.is_null() || cap < bytes.len() + 1 {
        return Err(fail(GlStatus::BufferTooSmall, format!("need {} bytes", bytes.len() + 1)));
    }
    ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), bytes.len());
    *buf.add(bytes.len()) = 0;
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf`.
///
/// # Safety
/// `buf` must point to `cap` writable bytes or be null; `out_len` may be null.
#[no_mangle]
pub unsafe extern "C" fn gl_last_error_message(buf: *mut c_char, cap: usize, out_len: *mut usize) -> GlStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().as_ref().map(|c| c.as_bytes().to_vec())).unwrap_or_default();
    match copy_out(&msg, buf, cap, out_len) {
        Ok(()) => GlStatus::Ok,
        Err(s) => s,
    }
}

/// Creates an environment. `config_json` is an environment config as JSON or
/// null for the defaults; `regime` is `small_jitter`, `medium_jitter`,
/// `large_jitter` or `full_random`.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gl_env_new(
    config_json: *const c_char,
    regime: *const c_char,
    object_count: u32,
    out: *mut *mut GlEnv,
) -> GlStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let env = match opt_str(config_json)? {
            Some(s) => serde_json::from_str::<EnvConfig>(s).map_err(|e| fail(GlStatus::InvalidConfig, e.to_string()))?,
            None => EnvConfig::default(),
        };
        env.validate().or_status()?;
        let regime: Regime = match opt_str(regime)? {
            Some(s) => s.parse().or_status()?,
            None => Regime::SmallJitter,
        };
        let task = TaskConfig::new(regime).with_objects(object_count as usize);
        task.validate(&env).or_status()?;
        *out = Box::into_raw(Box::new(GlEnv { env, task, setup: None, state: None }));
        Ok(())
    })
}

/// # Safety
/// `env` must be null or a handle from [`gl_env_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gl_env_free(env: *mut GlEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Starts the episode for `seed` and writes its initial state.
///
/// # Safety
/// `env` must be a live handle; `state_out` null or 15 writable floats.
#[no_mangle]
pub unsafe extern "C" fn gl_env_reset(env: *mut GlEnv, seed: u64, state_out: *mut f32) -> GlStatus {
    guard(|| {
        non_null(env, "env")?;
        let h = &mut *env;
        let setup = EpisodeSetup::generate(&h.env, &h.task, seed).or_status()?;
        let state = setup.reset(&h.env).or_status()?;
        if !state_out.is_null() {
            slice::from_raw_parts_mut(state_out, GL_STATE_DIM).copy_from_slice(&state.encode_state15());
        }
        h.setup = Some(setup);
        h.state = Some(state);
        Ok(())
    })
}

fn live_state(h: &mut GlEnv) -> Result<&mut EnvState, GlStatus> {
    h.state.as_mut().ok_or_else(|| fail(GlStatus::InvalidArgument, "environment has not been reset"))
}

/// Advances one control step with a 7-float action.
///
/// # Safety
/// `env` live; `action` 7 readable floats; `state_out` null or 15 writable
/// floats; `done_out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn gl_env_step(
    env: *mut GlEnv,
    action: *const f32,
    state_out: *mut f32,
    done_out: *mut bool,
) -> GlStatus {
    guard(|| {
        non_null(env, "env")?;
        non_null(action, "action")?;
        let a = Action7::from_slice(slice::from_raw_parts(action, GL_ACTION_DIM)).or_status()?;
        let state = live_state(&mut *env)?;
        state.step(&a).or_status()?;
        if !state_out.is_null() {
            slice::from_raw_parts_mut(state_out, GL_STATE_DIM).copy_from_slice(&state.encode_state15());
        }
        if !done_out.is_null() {
            *done_out = state.is_done();
        }
        Ok(())
    })
}

/// Scores the current episode.
///
/// # Safety
/// `env` live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gl_env_outcome(env: *mut GlEnv, out: *mut GlOutcome) -> GlStatus {
    guard(|| {
        non_null(env, "env")?;
        non_null(out, "out")?;
        let flags = metrics::episode_outcome(live_state(&mut *env)?).or_status()?;
        *out = GlOutcome { success: flags.success, grasp_any: flags.grasp_any, reach: flags.reach };
        Ok(())
    })
}

/// Copies the current episode's instruction text.
///
/// # Safety
/// `env` live; `buf` null or `cap` writable bytes; `out_len` null or writable.
#[no_mangle]
pub unsafe extern "C" fn gl_env_instruction(env: *mut GlEnv, buf: *mut c_char, cap: usize, out_len: *mut usize) -> GlStatus {
    guard(|| {
        non_null(env, "env")?;
        let setup = (*env).setup.as_ref().ok_or_else(|| fail(GlStatus::InvalidArgument, "environment has not been reset"))?;
        copy_out(setup.instruction.text.as_bytes(), buf, cap, out_len)
    })
}

/// Copies the environment config hash (hex).
///
/// # Safety
/// As [`gl_env_instruction`].
#[no_mangle]
pub unsafe extern "C" fn gl_env_config_hash(env: *const GlEnv, buf: *mut c_char, cap: usize, out_len: *mut usize) -> GlStatus {
    guard(|| {
        non_null(env, "env")?;
        copy_out((*env).env.hash().as_bytes(), buf, cap, out_len)
    })
}

/// Generalized advantage estimation over `n` steps.
///
/// # Safety
/// `rewards`, `values`, `dones` must hold `n` readable elements and
/// `advantages_out`, `returns_out` `n` writable ones.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn gl_compute_gae(
    rewards: *const f64,
    values: *const f64,
    dones: *const bool,
    n: usize,
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
    advantages_out: *mut f64,
    returns_out: *mut f64,
) -> GlStatus {
    guard(|| {
        if n == 0 {
            return Ok(());
        }
        non_null(rewards, "rewards")?;
        non_null(values, "values")?;
        non_null(dones, "dones")?;
        non_null(advantages_out, "advantages_out")?;
        non_null(returns_out, "returns_out")?;
        let (adv, ret) = ppo::compute_gae(
            slice::from_raw_parts(rewards, n),
            slice::from_raw_parts(values, n),
            bootstrap,
            slice::from_raw_parts(dones, n),
            gamma,
            lambda,
        )
        .or_status()?;
        slice::from_raw_parts_mut(advantages_out, n).copy_from_slice(&adv);
        slice::from_raw_parts_mut(returns_out, n).copy_from_slice(&ret);
        Ok(())
    })
}

/// Validates a JSON protocol message and writes its length-prefixed frame.
/// On `BufferTooSmall`, `out_len` holds the required size.
///
/// # Safety
/// `json` NUL-terminated; `buf` null or `cap` writable bytes; `out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn gl_protocol_encode(json: *const c_char, buf: *mut u8, cap: usize, out_len: *mut usize) -> GlStatus {
    guard(|| {
        non_null(out_len, "out_len")?;
        let s = opt_str(json)?.ok_or_else(|| fail(GlStatus::NullPointer, "json is null"))?;
        let msg: Message = serde_json::from_str(s).map_err(|e| fail(GlStatus::Protocol, e.to_string()))?;
        let frame = protocol::encode(&msg).or_status()?;
        *out_len = frame.len();
        if buf.is_null() || cap < frame.len() {
            return Err(fail(GlStatus::BufferTooSmall, format!("need {} bytes", frame.len())));
        }
        ptr::copy_nonoverlapping(frame.as_ptr(), buf, frame.len());
        Ok(())
    })
}

/// Decodes one frame from the front of `data`. `consumed_out` receives the
/// frame length, or 0 if `data` holds only part of a frame; the JSON payload
/// is copied to `json_out` as a NUL-terminated string.
///
/// # Safety
/// `data` `len` readable bytes; `json_out` null or `cap` writable bytes;
/// `consumed_out` writable; `json_len` null or writable.
#[no_mangle]
pub unsafe extern "C" fn gl_protocol_decode(
    data: *const u8,
    len: usize,
    json_out: *mut c_char,
    cap: usize,
    json_len: *mut usize,
    consumed_out: *mut usize,
) -> GlStatus {
    guard(|| {
        non_null(consumed_out, "consumed_out")?;
        *consumed_out = 0;
        let bytes = if len == 0 { &[][..] } else {
            non_null(data, "data")?;
            slice::from_raw_parts(data, len)
        };
        let Some((msg, used)) = protocol::decode(bytes).or_status()? else {
            return Ok(());
        };
        let json = serde_json::to_string(&msg).map_err(|e| fail(GlStatus::Protocol, e.to_string()))?;
        copy_out(json.as_bytes(), json_out, cap, json_len)?;
        *consumed_out = used;
        Ok(())
    })
}
