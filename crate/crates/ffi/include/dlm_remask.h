#ifndef DLM_REMASK_H
#define DLM_REMASK_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every exported function.
 */
typedef enum DlmStatus {
  DLM_STATUS_OK = 0,
  DLM_STATUS_NULL_POINTER = 1,
  DLM_STATUS_INVALID_ARGUMENT = 2,
  DLM_STATUS_INVALID_CONFIG = 3,
  DLM_STATUS_IO = 4,
  DLM_STATUS_CHECKPOINT = 5,
  DLM_STATUS_VOCAB_MISMATCH = 6,
  DLM_STATUS_MISSING_PREREQUISITE = 7,
  DLM_STATUS_BUFFER_TOO_SMALL = 8,
  DLM_STATUS_INTERNAL = 9,
} DlmStatus;

/**
 * A denoiser: the exact oracle or a loaded checkpoint.
 */
typedef struct DlmDenoiser DlmDenoiser;

/**
 * A correction head.
 */
typedef struct DlmHead DlmHead;

/**
 * A validated task.
 */
typedef struct DlmTask DlmTask;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the calling thread's last error message (NUL-terminated, truncated
 * to fit) into `buf`. Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t dlm_last_error(char *buf, size_t cap);

/**
 * Build a task from the JSON `task` config section.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum DlmStatus dlm_task_from_json(const char *json, struct DlmTask **out);

/**
 * # Safety
 * `task` must be null or a handle from [`dlm_task_from_json`] not yet freed.
 */
void dlm_task_free(struct DlmTask *task);

/**
 * Sequence length, prompt length and vocabulary size of a task.
 *
 * # Safety
 * `task` must be a live handle; output pointers may be null.
 */
enum DlmStatus dlm_task_dims(const struct DlmTask *task,
                             size_t *max_len,
                             size_t *prompt_len,
                             uint32_t *vocab_size);

/**
 * Check a full sequence (prompt followed by the generation region).
 * `ok` receives 1 when it passes the task verifier, else 0.
 *
 * # Safety
 * `seq` must point to `len` values; `ok` must be writable.
 */
enum DlmStatus dlm_verify(const struct DlmTask *task, const uint32_t *seq, size_t len, int32_t *ok);

/**
 * Exact enumeration denoiser for `task`.
 *
 * # Safety
 * `task` must be a live handle; `out` must be writable.
 */
enum DlmStatus dlm_denoiser_oracle(const struct DlmTask *task, struct DlmDenoiser **out);

/**
 * Load a denoiser checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DlmStatus dlm_denoiser_load(const char *path, struct DlmDenoiser **out);

/**
 * # Safety
 * `den` must be null or a live denoiser handle.
 */
void dlm_denoiser_free(struct DlmDenoiser *den);

/**
 * Posterior of every position. `tokens` uses -1 for MASK; `probs` receives
 * `len * vocab_size` values, row-major.
 *
 * # Safety
 * `tokens` must point to `len` values and `probs` to `probs_len` writable values.
 */
enum DlmStatus dlm_denoiser_predict(const struct DlmDenoiser *den,
                                    const int64_t *tokens,
                                    size_t len,
                                    double *probs,
                                    size_t probs_len);

/**
 * Enumeration-backed correction head for `task`.
 *
 * # Safety
 * `task` must be a live handle; `out` must be writable.
 */
enum DlmStatus dlm_head_bayes(const struct DlmTask *task, struct DlmHead **out);

/**
 * Load a head checkpoint trained on `den`'s features.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `den` a live handle; `out` writable.
 */
enum DlmStatus dlm_head_load(const char *path, const struct DlmDenoiser *den, struct DlmHead **out);

/**
 * # Safety
 * `head` must be null or a live head handle.
 */
void dlm_head_free(struct DlmHead *head);

/**
 * Decode one prompt. `config_json` is a `decode` config section (null for
 * defaults); `head` may be null unless the strategy is `dsc`. `out_tokens`
 * receives the full sequence (`max_len` values) and `out_passes` the
 * number of denoiser forward passes.
 *
 * # Safety
 * Handles must be live; `prompt` must point to `prompt_len` values;
 * `out_tokens` to `out_len` writable values; `out_passes` may be null.
 */
enum DlmStatus dlm_decode(const struct DlmTask *task,
                          const struct DlmDenoiser *den,
                          const struct DlmHead *head,
                          const char *config_json,
                          const uint32_t *prompt,
                          size_t prompt_len,
                          uint64_t seed,
                          uint32_t *out_tokens,
                          size_t out_len,
                          size_t *out_passes);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DLM_REMASK_H */
