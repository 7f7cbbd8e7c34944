#ifndef JOINTEP_H
#define JOINTEP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum JepArm {
  JEP_ARM_B1 = 0,
  JEP_ARM_E1 = 1,
  JEP_ARM_E2 = 2,
  JEP_ARM_E3 = 3,
} JepArm;

typedef enum JepFsmState {
  JEP_FSM_STATE_EP_ONLY = 0,
  JEP_FSM_STATE_ASR_PLUS_EP = 1,
  JEP_FSM_STATE_END = 2,
} JepFsmState;

typedef enum JepMode {
  JEP_MODE_SHORT_QUERY = 0,
  JEP_MODE_CONTINUOUS = 1,
} JepMode;

typedef enum JepStatus {
  JEP_STATUS_OK = 0,
  JEP_STATUS_NULL_POINTER = 1,
  JEP_STATUS_INVALID_ARGUMENT = 2,
  JEP_STATUS_IO = 3,
  JEP_STATUS_FORMAT = 4,
  JEP_STATUS_SHAPE = 5,
  JEP_STATUS_NON_FINITE = 6,
  JEP_STATUS_SESSION_ENDED = 7,
  JEP_STATUS_BUFFER_TOO_SMALL = 8,
  JEP_STATUS_INTERNAL = 9,
} JepStatus;

// A loaded model.
typedef struct JepModel JepModel;

// A streaming session over one model.
typedef struct JepSession JepSession;

typedef struct JepThresholds {
  double vad;
  double eoq;
  double eos;
  uint64_t wait_ms;
} JepThresholds;

// Per-frame outcome of [`jep_session_push_frame`].
typedef struct JepFrameResult {
  // State when the frame arrived.
  enum JepFsmState arrival;
  // State after the frame.
  enum JepFsmState state;
  // Speech, initial, intermediate, final silence.
  double posterior[4];
  // Decoder end-of-query cost, NaN while only the endpointer runs.
  double eos_cost;
  bool filtered;
  bool endpoint;
  size_t hyp_len;
} JepFrameResult;

typedef struct JepWer {
  // Percent.
  double wer;
  size_t deletions;
  size_t insertions;
  size_t substitutions;
  size_t ref_words;
} JepWer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Last error message on this thread, or null. Valid until the next call on
// this thread.
const char *jep_last_error_message(void);

// Loads a model from `n_paths` checkpoint files (two for a B1 run).
//
// # Safety
// `paths` must point to `n_paths` NUL-terminated strings; `out` must be
// writable.
enum JepStatus jep_model_load(const char *const *paths,
                              size_t n_paths,
                              enum JepArm arm,
                              struct JepModel **out);

// Feature dimension expected by [`jep_session_push_frame`]; 0 for null.
//
// # Safety
// `model` must be null or a live handle.
size_t jep_model_input_dim(const struct JepModel *model);

// # Safety
// `model` must be null or a handle from [`jep_model_load`], freed once.
void jep_model_free(struct JepModel *model);

// Opens a session. The session keeps the model alive on its own.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum JepStatus jep_session_new(const struct JepModel *model,
                               enum JepMode mode,
                               struct JepThresholds thresholds,
                               uint64_t frame_period_ms,
                               struct JepSession **out);

// Streams one frame of `len` features.
//
// # Safety
// `session` must be live; `features` must hold `len` values; `out` may be
// null.
enum JepStatus jep_session_push_frame(struct JepSession *session,
                                      const double *features,
                                      size_t len,
                                      struct JepFrameResult *out);

// Marks the end of the stream and drains buffered recogniser input. A
// session that reached its endpoint is left as is.
//
// # Safety
// `session` must be live.
enum JepStatus jep_session_finish(struct JepSession *session);

// Copies the current hypothesis into `tokens`. `len` always receives the
// full length; `BufferTooSmall` is returned when `cap` is short.
//
// # Safety
// `session` must be live; `tokens` must hold `cap` values (may be null when
// `cap` is 0); `len` must be writable.
enum JepStatus jep_session_hypothesis(const struct JepSession *session,
                                      uint32_t *tokens,
                                      size_t cap,
                                      size_t *len);

// # Safety
// `session` must be null or a handle from [`jep_session_new`], freed once.
void jep_session_free(struct JepSession *session);

// Word error rate of `hyp` against a non-empty `reference`.
//
// # Safety
// `reference` and `hyp` must hold `n_ref` and `n_hyp` values (either may be
// null when its length is 0); `out` must be writable.
enum JepStatus jep_wer(const uint32_t *reference,
                       size_t n_ref,
                       const uint32_t *hyp,
                       size_t n_hyp,
                       struct JepWer *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* JOINTEP_H */
