//! C ABI for the boxflows simulator, task rewards, policies and episode
//! logs.
//!
//! Objects live behind opaque handles created by `bof_*_new` / `_open` /
//! `_load` and released by the matching `_free`. Every fallible call
//! returns a [`BofStatus`]; on failure a message is kept per thread and
//! read back with [`bof_last_error`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use boxflows::boxsim::{effective_flows, NUM_VALVES};
use boxflows::harness::{load_policy, ExperimentConfig};
use boxflows::mpo::{ActMode, Policy};
use boxflows::replay::{read_log, EpisodeLog};
use boxflows::tasks::{TaskEnv, TaskId};
use boxflows::{Error, ErrorCategory};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Number of valves; every action array has this length.
pub const BOF_NUM_VALVES: usize = 9;
const _: () = assert!(BOF_NUM_VALVES == NUM_VALVES);

/// Result of every fallible call. Failure codes equal the `bof` command's
/// exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BofStatus {
    Ok = 0,
    /// Bad argument, null pointer or wrong buffer size.
    Contract = 11,
    Numeric = 12,
    Format = 13,
    Config = 14,
    Data = 15,
    Io = 16,
    /// The library panicked; the handle involved should be dropped.
    Internal = 99,
}

impl From<ErrorCategory> for BofStatus {
    fn from(c: ErrorCategory) -> Self {
        match c {
            ErrorCategory::Contract => BofStatus::Contract,
            ErrorCategory::Numeric => BofStatus::Numeric,
            ErrorCategory::Format => BofStatus::Format,
            ErrorCategory::Config => BofStatus::Config,
            ErrorCategory::Data => BofStatus::Data,
            ErrorCategory::Io => BofStatus::Io,
        }
    }
}

/// Simulator plus task: resets, steps, rewards.
pub struct BofEnv {
    env: TaskEnv,
}

/// Gaussian policy loaded from a `.bofp` file.
pub struct BofPolicy {
    policy: Policy,
    rng: ChaCha8Rng,
}

/// Episode log loaded from a `.bofl` file.
pub struct BofLog {
    log: EpisodeLog,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(e: Error) -> BofStatus {
    let status = e.category().into();
    set_error(e.to_string());
    status
}

fn contract(msg: &str) -> Error {
    Error::Invalid(msg.to_string())
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Error>) -> BofStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BofStatus::Ok,
        Ok(Err(e)) => fail(e),
        Err(_) => {
            set_error("internal panic".into());
            BofStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Error> {
    if p.is_null() {
        return Err(contract(&format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| contract(&format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Error> {
    if p.is_null() {
        return Err(contract(&format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Error> {
    if p.is_null() {
        return Err(contract(&format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Error> {
    p.as_ref().ok_or_else(|| contract(&format!("{what} handle is null")))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Error> {
    p.as_mut().ok_or_else(|| contract(&format!("{what} handle is null")))
}

unsafe fn put<T>(p: *mut T, v: T, what: &str) -> Result<(), Error> {
    if p.is_null() {
        return Err(contract(&format!("{what} is null")));
    }
    p.write(v);
    Ok(())
}

fn copy_exact(src: &[f64], dst: &mut [f64], what: &str) -> Result<(), Error> {
    if src.len() != dst.len() {
        return Err(Error::Shape(format!(
            "{what} buffer holds {} values, {} needed",
            dst.len(),
            src.len()
        )));
    }
    dst.copy_from_slice(src);
    Ok(())
}

/// Message of the calling thread's last failure; empty when none. The
/// pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn bof_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bof_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Coupled per-valve flows for `action` (9 values) under supply constant
/// `kappa`. Writes 9 flows and, if `n_clamped` is non-null, the number of
/// components clamped into `[0, 1]`.
///
/// # Safety
/// `action` and `flows_out` must point to 9 doubles.
#[no_mangle]
pub unsafe extern "C" fn bof_effective_flows(
    action: *const f64,
    kappa: f64,
    flows_out: *mut f64,
    n_clamped: *mut usize,
) -> BofStatus {
    guard(|| {
        let a = slice_arg(action, NUM_VALVES, "action")?;
        let out = slice_out(flows_out, NUM_VALVES, "flows_out")?;
        let (f, clamped) = effective_flows(a, kappa)?;
        out.copy_from_slice(&f);
        if !n_clamped.is_null() {
            n_clamped.write(clamped);
        }
        Ok(())
    })
}

/// Creates an environment for `task` (`hover`, `hover-center`,
/// `rearrange`, `stack`, `reach`). `config` is null or experiment-file
/// text whose `sim.` and `task.` keys are applied.
///
/// # Safety
/// `task` and a non-null `config` must be NUL-terminated; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn bof_env_new(
    task: *const c_char,
    config: *const c_char,
    out: *mut *mut BofEnv,
) -> BofStatus {
    guard(|| {
        let id = TaskId::parse(str_arg(task, "task")?)?;
        let mut cfg = if config.is_null() {
            ExperimentConfig::new(id)
        } else {
            ExperimentConfig::parse(str_arg(config, "config")?)?
        };
        cfg.task = id;
        cfg.validate()?;
        let env = Box::new(BofEnv { env: cfg.env()? });
        put(out, Box::into_raw(env), "out")
    })
}

/// Releases an environment; null is ignored.
///
/// # Safety
/// `env` must come from [`bof_env_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bof_env_free(env: *mut BofEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Observation width, or 0 for a null handle.
///
/// # Safety
/// `env` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bof_env_obs_dim(env: *const BofEnv) -> usize {
    env.as_ref().map_or(0, |e| e.env.obs_dim())
}

/// Number of balls, or 0 for a null handle.
///
/// # Safety
/// `env` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bof_env_n_balls(env: *const BofEnv) -> usize {
    env.as_ref().map_or(0, |e| e.env.sim().config().n_balls)
}

/// Starts an episode from `seed` and writes the first observation.
///
/// # Safety
/// `obs_out` must hold `obs_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bof_env_reset(
    env: *mut BofEnv,
    seed: u64,
    obs_out: *mut f64,
    obs_len: usize,
) -> BofStatus {
    guard(|| {
        let e = handle_mut(env, "env")?;
        let out = slice_out(obs_out, obs_len, "obs_out")?;
        let obs = e.env.reset(seed);
        copy_exact(&obs, out, "observation")
    })
}

/// Applies one action (9 values in `[0, 1]`), writing the next
/// observation, the reward and whether the episode ended.
///
/// # Safety
/// `action` must hold 9 doubles, `obs_out` `obs_len` doubles; `reward` and
/// `done` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bof_env_step(
    env: *mut BofEnv,
    action: *const f64,
    obs_out: *mut f64,
    obs_len: usize,
    reward: *mut f64,
    done: *mut bool,
) -> BofStatus {
    guard(|| {
        let e = handle_mut(env, "env")?;
        let a = slice_arg(action, NUM_VALVES, "action")?;
        let out = slice_out(obs_out, obs_len, "obs_out")?;
        if reward.is_null() || done.is_null() {
            return Err(contract("reward or done is null"));
        }
        let st = e.env.step(a)?;
        copy_exact(&st.obs, out, "observation")?;
        reward.write(st.reward);
        done.write(st.done);
        Ok(())
    })
}

/// Exact ball-centre pixels `[x0, y0, x1, y1, ...]` of the current state.
///
/// # Safety
/// `out` must hold `len` doubles; `len` must be twice the ball count.
#[no_mangle]
pub unsafe extern "C" fn bof_env_ball_pixels(
    env: *const BofEnv,
    out: *mut f64,
    len: usize,
) -> BofStatus {
    guard(|| {
        let e = handle(env, "env")?;
        let dst = slice_out(out, len, "out")?;
        let px = e.env.sim().ground_truth_pixels(e.env.state());
        copy_exact(&px, dst, "pixel")
    })
}

/// Loads a policy file. `seed` drives sampled actions.
///
/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bof_policy_load(
    path: *const c_char,
    seed: u64,
    out: *mut *mut BofPolicy,
) -> BofStatus {
    guard(|| {
        let policy = load_policy(Path::new(str_arg(path, "path")?))?;
        let p = Box::new(BofPolicy {
            policy,
            rng: ChaCha8Rng::seed_from_u64(seed),
        });
        put(out, Box::into_raw(p), "out")
    })
}

/// Releases a policy; null is ignored.
///
/// # Safety
/// `policy` must come from [`bof_policy_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bof_policy_free(policy: *mut BofPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Observation width the policy expects, or 0 for a null handle.
///
/// # Safety
/// `policy` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bof_policy_obs_dim(policy: *const BofPolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.policy.net.input_width())
}

/// Action for `obs`: the distribution mean when `sample` is false, a draw
/// otherwise. Writes 9 values in `[0, 1]`.
///
/// # Safety
/// `obs` must hold `obs_len` doubles and `action_out` 9.
#[no_mangle]
pub unsafe extern "C" fn bof_policy_act(
    policy: *mut BofPolicy,
    obs: *const f64,
    obs_len: usize,
    sample: bool,
    action_out: *mut f64,
) -> BofStatus {
    guard(|| {
        let p = handle_mut(policy, "policy")?;
        let o = slice_arg(obs, obs_len, "obs")?;
        let out = slice_out(action_out, NUM_VALVES, "action_out")?;
        if o.len() != p.policy.net.input_width() {
            return Err(Error::Shape(format!(
                "policy expects {} observation values, got {}",
                p.policy.net.input_width(),
                o.len()
            )));
        }
        let mode = if sample { ActMode::Sample } else { ActMode::Mean };
        let a = p.policy.act(o, mode, &mut p.rng)?;
        out.copy_from_slice(&a);
        Ok(())
    })
}

/// Reads a whole episode log.
///
/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bof_log_open(path: *const c_char, out: *mut *mut BofLog) -> BofStatus {
    guard(|| {
        let log = read_log(Path::new(str_arg(path, "path")?))?;
        put(out, Box::into_raw(Box::new(BofLog { log })), "out")
    })
}

/// Releases a log; null is ignored.
///
/// # Safety
/// `log` must come from [`bof_log_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bof_log_free(log: *mut BofLog) {
    if !log.is_null() {
        drop(Box::from_raw(log));
    }
}

/// Number of transitions, or 0 for a null handle.
///
/// # Safety
/// `log` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bof_log_len(log: *const BofLog) -> usize {
    log.as_ref().map_or(0, |l| l.log.transitions.len())
}

/// Number of balls recorded per transition, or 0 for a null handle.
///
/// # Safety
/// `log` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bof_log_n_balls(log: *const BofLog) -> usize {
    log.as_ref().map_or(0, |l| l.log.header.n_balls as usize)
}

/// Transition `index`: ball pixels (`2 * n_balls` values), the action (9),
/// reward, done flag and episode id. Any output pointer may be null to
/// skip it.
///
/// # Safety
/// Non-null outputs must be writable with the sizes above.
#[no_mangle]
pub unsafe extern "C" fn bof_log_get(
    log: *const BofLog,
    index: usize,
    pixels_out: *mut f64,
    pixels_len: usize,
    action_out: *mut f64,
    reward: *mut f64,
    done: *mut bool,
    episode: *mut u32,
) -> BofStatus {
    guard(|| {
        let l = handle(log, "log")?;
        let t = l.log.transitions.get(index).ok_or_else(|| {
            contract(&format!(
                "index {index} beyond {} transitions",
                l.log.transitions.len()
            ))
        })?;
        if !pixels_out.is_null() {
            let px: Vec<f64> = t.pixels.iter().map(|&v| v as f64).collect();
            copy_exact(&px, slice_out(pixels_out, pixels_len, "pixels_out")?, "pixel")?;
        }
        if !action_out.is_null() {
            let a = slice_out(action_out, NUM_VALVES, "action_out")?;
            for (d, s) in a.iter_mut().zip(&t.action) {
                *d = *s as f64;
            }
        }
        if !reward.is_null() {
            reward.write(t.reward as f64);
        }
        if !done.is_null() {
            done.write(t.done);
        }
        if !episode.is_null() {
            episode.write(t.episode);
        }
        Ok(())
    })
}

/// Static lower-case name of a status (`"ok"`, `"format"`, ...).
#[no_mangle]
pub extern "C" fn bof_status_name(status: BofStatus) -> *const c_char {
    let s: &'static str = match status {
        BofStatus::Ok => "ok\0",
        BofStatus::Contract => "contract\0",
        BofStatus::Numeric => "numeric\0",
        BofStatus::Format => "format\0",
        BofStatus::Config => "config\0",
        BofStatus::Data => "data\0",
        BofStatus::Io => "io\0",
        BofStatus::Internal => "internal\0",
    };
    s.as_ptr().cast()
}
