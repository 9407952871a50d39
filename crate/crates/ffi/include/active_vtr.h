#ifndef ACTIVE_VTR_H
#define ACTIVE_VTR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum AvtrStatus {
  AVTR_STATUS_OK = 0,
  AVTR_STATUS_NULL_POINTER = 1,
  AVTR_STATUS_INVALID_ARGUMENT = 2,
  AVTR_STATUS_INVALID_SCENARIO = 3,
  AVTR_STATUS_IO = 4,
  AVTR_STATUS_NUMERIC = 5,
  // The requested phase was never run (repeat after a failed teach).
  AVTR_STATUS_NO_DATA = 6,
  AVTR_STATUS_PANIC = 7,
} AvtrStatus;

typedef enum AvtrPlanner {
  AVTR_PLANNER_FLAF = 0,
  AVTR_PLANNER_FLAF_NOSCORE = 1,
  AVTR_PLANNER_UDVP = 2,
  AVTR_PLANNER_PASSIVE = 3,
} AvtrPlanner;

typedef enum AvtrFidelity {
  AVTR_FIDELITY_IDEAL = 0,
  AVTR_FIDELITY_NOISY = 1,
} AvtrFidelity;

typedef enum AvtrPhase {
  AVTR_PHASE_TEACH = 0,
  AVTR_PHASE_REPEAT = 1,
} AvtrPhase;

typedef enum AvtrFailure {
  AVTR_FAILURE_NONE = 0,
  AVTR_FAILURE_TRACKING_LOST_TIMEOUT = 1,
  AVTR_FAILURE_DEVIATION = 2,
  AVTR_FAILURE_TEACH_MAP_GAP = 3,
  AVTR_FAILURE_STALLED = 4,
} AvtrFailure;

// Opaque handle to a finished teach-and-repeat run.
typedef struct AvtrRun AvtrRun;

// Opaque scenario handle.
typedef struct AvtrScenario AvtrScenario;

// Outcome of one phase of a run.
typedef struct AvtrPhaseSummary {
  bool completed;
  // Completion rate in [0, 1].
  double completion_rate;
  double mean_inliers;
  // Absolute position RMSE against the taught trajectory, meters; 0 for
  // the teach phase itself and NaN when it could not be computed.
  double ap_rmse;
  enum AvtrFailure failure;
  size_t steps;
} AvtrPhaseSummary;

// Planar robot pose: position, heading in radians and mount height.
typedef struct AvtrPose2 {
  double x;
  double y;
  double heading;
  double height;
} AvtrPose2;

// Pan and tilt, radians.
typedef struct AvtrPanTilt {
  double pan;
  double tilt;
} AvtrPanTilt;

// Map point handed to [`avtr_plan`]. Positions are in the world frame.
typedef struct AvtrMapPoint {
  double position[3];
  // Unit direction from the point toward its observing cameras.
  double mean_view_dir[3];
  double d1;
  double d2;
} AvtrMapPoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Length in bytes of the last error message on this thread, 0 if none.
size_t avtr_last_error_length(void);

// Copies the last error message, NUL terminated and truncated to `len`
// bytes. Returns the number of bytes written without the terminator, or -1
// when `buf` is null or `len` is 0.
//
// # Safety
// `buf` must point to at least `len` writable bytes.
int64_t avtr_last_error_message(char *buf, size_t len);

// Loads a shipped preset by name (`path1`..`path4`) or a scenario TOML file.
//
// # Safety
// `source` must be a NUL-terminated string and `out` a valid pointer.
enum AvtrStatus avtr_scenario_load(const char *source, struct AvtrScenario **out);

// Parses a scenario from TOML text.
//
// # Safety
// `text` must be a NUL-terminated string and `out` a valid pointer.
enum AvtrStatus avtr_scenario_from_toml(const char *text, struct AvtrScenario **out);

// Length of the taught path, meters.
//
// # Safety
// `scenario` must come from a scenario constructor and `out` be valid.
enum AvtrStatus avtr_scenario_path_length(const struct AvtrScenario *scenario, double *out);

// Releases a scenario. Null is ignored.
//
// # Safety
// `scenario` must be null or an unreleased handle from this library.
void avtr_scenario_free(struct AvtrScenario *scenario);

// Teaches the scenario with `planner`, then repeats on the frozen map.
// A failed teach still yields a run; its repeat phase reports `NoData`.
//
// # Safety
// `scenario` must be a live handle and `out` a valid pointer.
enum AvtrStatus avtr_run(const struct AvtrScenario *scenario,
                         enum AvtrPlanner planner,
                         enum AvtrFidelity fidelity,
                         uint64_t seed,
                         struct AvtrRun **out);

// Summary of one phase of a run.
//
// # Safety
// `run` must be a live handle and `out` a valid pointer.
enum AvtrStatus avtr_run_phase_summary(const struct AvtrRun *run,
                                       enum AvtrPhase phase,
                                       struct AvtrPhaseSummary *out);

// Copies the per-step inlier counts of a phase into `buf`, up to `cap`
// entries, and stores the full series length in `len`. Pass a null `buf`
// with `cap` 0 to query the length.
//
// # Safety
// `buf` must hold `cap` writable entries unless `cap` is 0.
enum AvtrStatus avtr_run_inliers(const struct AvtrRun *run,
                                 enum AvtrPhase phase,
                                 size_t *buf,
                                 size_t cap,
                                 size_t *len);

// Writes the trajectory of a phase as a TUM file.
//
// # Safety
// `run` must be a live handle and `path` a NUL-terminated string.
enum AvtrStatus avtr_run_write_tum(const struct AvtrRun *run,
                                   enum AvtrPhase phase,
                                   const char *path);

// Releases a run. Null is ignored.
//
// # Safety
// `run` must be null or an unreleased handle from this library.
void avtr_run_free(struct AvtrRun *run);

// One planning call on the default grid and camera with no occluders.
// Writes the chosen angles to `best` and the objective value to `score`
// (may be null).
//
// # Safety
// `points` must hold `n` entries unless `n` is 0; `best` must be valid.
enum AvtrStatus avtr_plan(enum AvtrPlanner planner,
                          struct AvtrPose2 robot,
                          struct AvtrPanTilt current,
                          const struct AvtrMapPoint *points,
                          size_t n,
                          struct AvtrPanTilt *best,
                          double *score);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ACTIVE_VTR_H */
