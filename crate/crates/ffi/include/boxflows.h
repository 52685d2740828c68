/* C interface to the boxflows jet-box simulator, policies and logs. */

#ifndef BOXFLOWS_H
#define BOXFLOWS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/*
 Number of valves; every action array has this length.
 */
#define BOF_NUM_VALVES 9

/*
 Result of every fallible call. Failure codes equal the `bof` command's
 exit codes.
 */
typedef enum BofStatus {
  BOF_STATUS_OK = 0,
  /*
   Bad argument, null pointer or wrong buffer size.
   */
  BOF_STATUS_CONTRACT = 11,
  BOF_STATUS_NUMERIC = 12,
  BOF_STATUS_FORMAT = 13,
  BOF_STATUS_CONFIG = 14,
  BOF_STATUS_DATA = 15,
  BOF_STATUS_IO = 16,
  /*
   The library panicked; the handle involved should be dropped.
   */
  BOF_STATUS_INTERNAL = 99,
} BofStatus;

/*
 Simulator plus task: resets, steps, rewards.
 */
typedef struct BofEnv BofEnv;

/*
 Episode log loaded from a `.bofl` file.
 */
typedef struct BofLog BofLog;

/*
 Gaussian policy loaded from a `.bofp` file.
 */
typedef struct BofPolicy BofPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the calling thread's last failure; empty when none. The
 pointer stays valid until the next failing call on this thread.
 */
const char *bof_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *bof_version(void);

/*
 Coupled per-valve flows for `action` (9 values) under supply constant
 `kappa`. Writes 9 flows and, if `n_clamped` is non-null, the number of
 components clamped into `[0, 1]`.

 # Safety
 `action` and `flows_out` must point to 9 doubles.
 */
enum BofStatus bof_effective_flows(const double *action,
                                   double kappa,
                                   double *flows_out,
                                   size_t *n_clamped);

/*
 Creates an environment for `task` (`hover`, `hover-center`,
 `rearrange`, `stack`, `reach`). `config` is null or experiment-file
 text whose `sim.` and `task.` keys are applied.

 # Safety
 `task` and a non-null `config` must be NUL-terminated; `out` must be
 writable.
 */
enum BofStatus bof_env_new(const char *task, const char *config, struct BofEnv **out);

/*
 Releases an environment; null is ignored.

 # Safety
 `env` must come from [`bof_env_new`] and not be used afterwards.
 */
void bof_env_free(struct BofEnv *env);

/*
 Observation width, or 0 for a null handle.

 # Safety
 `env` must be null or a live handle.
 */
size_t bof_env_obs_dim(const struct BofEnv *env);

/*
 Number of balls, or 0 for a null handle.

 # Safety
 `env` must be null or a live handle.
 */
size_t bof_env_n_balls(const struct BofEnv *env);

/*
 Starts an episode from `seed` and writes the first observation.

 # Safety
 `obs_out` must hold `obs_len` doubles.
 */
enum BofStatus bof_env_reset(struct BofEnv *env, uint64_t seed, double *obs_out, size_t obs_len);

/*
 Applies one action (9 values in `[0, 1]`), writing the next
 observation, the reward and whether the episode ended.

 # Safety
 `action` must hold 9 doubles, `obs_out` `obs_len` doubles; `reward` and
 `done` must be writable.
 */
enum BofStatus bof_env_step(struct BofEnv *env,
                            const double *action,
                            double *obs_out,
                            size_t obs_len,
                            double *reward,
                            bool *done);

/*
 Exact ball-centre pixels `[x0, y0, x1, y1, ...]` of the current state.

 # Safety
 `out` must hold `len` doubles; `len` must be twice the ball count.
 */
enum BofStatus bof_env_ball_pixels(const struct BofEnv *env, double *out, size_t len);

/*
 Loads a policy file. `seed` drives sampled actions.

 # Safety
 `path` must be NUL-terminated; `out` writable.
 */
enum BofStatus bof_policy_load(const char *path, uint64_t seed, struct BofPolicy **out);

/*
 Releases a policy; null is ignored.

 # Safety
 `policy` must come from [`bof_policy_load`] and not be used afterwards.
 */
void bof_policy_free(struct BofPolicy *policy);

/*
 Observation width the policy expects, or 0 for a null handle.

 # Safety
 `policy` must be null or a live handle.
 */
size_t bof_policy_obs_dim(const struct BofPolicy *policy);

/*
 Action for `obs`: the distribution mean when `sample` is false, a draw
 otherwise. Writes 9 values in `[0, 1]`.

 # Safety
 `obs` must hold `obs_len` doubles and `action_out` 9.
 */
enum BofStatus bof_policy_act(struct BofPolicy *policy,
                              const double *obs,
                              size_t obs_len,
                              bool sample,
                              double *action_out);

/*
 Reads a whole episode log.

 # Safety
 `path` must be NUL-terminated; `out` writable.
 */
enum BofStatus bof_log_open(const char *path, struct BofLog **out);

/*
 Releases a log; null is ignored.

 # Safety
 `log` must come from [`bof_log_open`] and not be used afterwards.
 */
void bof_log_free(struct BofLog *log);

/*
 Number of transitions, or 0 for a null handle.

 # Safety
 `log` must be null or a live handle.
 */
size_t bof_log_len(const struct BofLog *log);

/*
 Number of balls recorded per transition, or 0 for a null handle.

 # Safety
 `log` must be null or a live handle.
 */
size_t bof_log_n_balls(const struct BofLog *log);

/*
 Transition `index`: ball pixels (`2 * n_balls` values), the action (9),
 reward, done flag and episode id. Any output pointer may be null to
 skip it.

 # Safety
 Non-null outputs must be writable with the sizes above.
 */
enum BofStatus bof_log_get(const struct BofLog *log,
                           size_t index,
                           double *pixels_out,
                           size_t pixels_len,
                           double *action_out,
                           double *reward,
                           bool *done,
                           uint32_t *episode);

/*
 Static lower-case name of a status (`"ok"`, `"format"`, ...).
 */
const char *bof_status_name(enum BofStatus status);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* BOXFLOWS_H */
