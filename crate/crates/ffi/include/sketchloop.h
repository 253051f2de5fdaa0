#ifndef SKETCHLOOP_H
#define SKETCHLOOP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SlEventKind {
  SL_EVENT_KIND_REASONING_TEXT = 0,
  SL_EVENT_KIND_SKETCH_COMPLETE = 1,
  SL_EVENT_KIND_THINK_END = 2,
  SL_EVENT_KIND_PLAIN_TEXT = 3,
  SL_EVENT_KIND_FEEDBACK = 4,
  SL_EVENT_KIND_SKETCH_TRUNCATED = 5,
} SlEventKind;

typedef enum SlStatus {
  SL_STATUS_OK = 0,
  SL_STATUS_NULL_POINTER = 1,
  SL_STATUS_INVALID_UTF8 = 2,
  SL_STATUS_INVALID_ARGUMENT = 3,
  SL_STATUS_PROTOCOL_ERROR = 4,
  SL_STATUS_QUEUE_FULL = 5,
  SL_STATUS_BROKER_DOWN = 6,
  SL_STATUS_DEADLINE_EXCEEDED = 7,
  SL_STATUS_UNKNOWN_JOB = 8,
  SL_STATUS_OUT_OF_RANGE = 9,
  SL_STATUS_PANIC = 10,
  SL_STATUS_RUNTIME = 11,
} SlStatus;

typedef enum SlVerdict {
  SL_VERDICT_SUCCESS = 0,
  SL_VERDICT_FAILED = 1,
  SL_VERDICT_INCOMPLETE = 2,
  SL_VERDICT_TIMEOUT = 3,
  SL_VERDICT_CRASH = 4,
} SlVerdict;

/**
 * Broker backed by the deterministic mock checker, with its own runtime.
 */
typedef struct SlBroker SlBroker;

typedef struct SlParser SlParser;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *sl_last_error(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library and not yet freed.
 */
void sl_string_free(char *s);

struct SlParser *sl_parser_new(void);

/**
 * # Safety
 * `p` must be NULL or a handle from [`sl_parser_new`] not yet freed.
 */
void sl_parser_free(struct SlParser *p);

/**
 * Feeds raw bytes; chunks may split delimiters and UTF-8 sequences. Events
 * accumulate inside the handle.
 *
 * # Safety
 * `p` must be a live parser handle and `data` must point to `len` readable bytes.
 */
enum SlStatus sl_parser_feed(struct SlParser *p, const uint8_t *data, size_t len);

/**
 * Flushes buffered text at end of stream.
 *
 * # Safety
 * `p` must be a live parser handle.
 */
enum SlStatus sl_parser_finish(struct SlParser *p);

/**
 * # Safety
 * `p` must be NULL or a live parser handle.
 */
size_t sl_parser_event_count(const struct SlParser *p);

/**
 * Reads event `index`. `text_out` receives the event text (empty for
 * `ThinkEnd`) and must be freed with [`sl_string_free`].
 *
 * # Safety
 * `p` must be a live parser handle; the out pointers must be writable.
 */
enum SlStatus sl_parser_event(const struct SlParser *p,
                              size_t index,
                              enum SlEventKind *kind_out,
                              char **text_out);

/**
 * # Safety
 * `payload` must be a NUL-terminated string; `out` must be writable.
 */
enum SlStatus sl_inject_feedback(const char *payload, char **out);

/**
 * Fails with `SL_STATUS_PROTOCOL_ERROR` when the text has no `</think>`.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
enum SlStatus sl_extract_final_answer(const char *text, char **out);

/**
 * Loss mask of a trajectory given as one JSON object, rendered as a string
 * of `1` (trained) and `0` (feedback) characters.
 *
 * # Safety
 * `trajectory_json` must be a NUL-terminated string; `out` must be writable.
 */
enum SlStatus sl_loss_mask(const char *trajectory_json, char **out);

/**
 * Classifies raw checker output. A nonzero `timed_out` yields Timeout
 * regardless of `raw`, which may then be NULL.
 *
 * # Safety
 * `raw` must be NULL or a NUL-terminated string; `out` must be writable.
 */
enum SlStatus sl_classify(const char *raw, int timed_out, enum SlVerdict *out);

int sl_reward(enum SlVerdict verdict);

/**
 * Writes `n` normalized advantages for binary `rewards` into `out`.
 *
 * # Safety
 * `rewards` must hold `n` bytes and `out` room for `n` doubles.
 */
enum SlStatus sl_advantages(const uint8_t *rewards, size_t n, double *out);

/**
 * # Safety
 * `out` must be writable.
 */
enum SlStatus sl_clipped_term(double ratio, double advantage, double epsilon, double *out);

/**
 * Objective over `n_groups` groups laid out back to back: group `g` owns the
 * next `group_sizes[g]` entries of `ratios` and `rewards`.
 *
 * # Safety
 * `group_sizes` must hold `n_groups` entries; `ratios` and `rewards` must
 * each hold their sum; `out` must be writable.
 */
enum SlStatus sl_objective(const double *ratios,
                           const uint8_t *rewards,
                           const size_t *group_sizes,
                           size_t n_groups,
                           double epsilon,
                           double *out);

/**
 * Starts a mock-backed broker. Returns NULL on failure (see [`sl_last_error`]).
 */
struct SlBroker *sl_broker_new_mock(size_t workers, size_t queue_capacity);

/**
 * Drains queued work, stops the workers and releases the handle.
 *
 * # Safety
 * `b` must be NULL or a handle from [`sl_broker_new_mock`] not yet freed.
 */
void sl_broker_free(struct SlBroker *b);

/**
 * Queues a job. Re-submitting a known `job_id` is accepted without running
 * it again. A `timeout_s` of 0 selects the default timeout.
 *
 * # Safety
 * `b` must be a live broker handle; strings must be NUL-terminated.
 */
enum SlStatus sl_broker_submit(struct SlBroker *b,
                               const char *job_id,
                               const char *code,
                               double timeout_s);

/**
 * Waits up to `deadline_s` for a job. On success writes the verdict and the
 * raw checker output (free with [`sl_string_free`]).
 *
 * # Safety
 * `b` must be a live broker handle; `job_id` NUL-terminated; out pointers writable.
 */
enum SlStatus sl_broker_await(struct SlBroker *b,
                              const char *job_id,
                              double deadline_s,
                              enum SlVerdict *verdict_out,
                              char **raw_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SKETCHLOOP_H */
