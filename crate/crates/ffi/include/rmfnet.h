#ifndef RMFNET_H
#define RMFNET_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call. The numeric values of the first
// five match the command-line exit codes.
typedef enum RmfStatus {
  RMF_STATUS_OK = 0,
  // Bad argument or configuration.
  RMF_STATUS_INVALID_ARGUMENT = 1,
  // Malformed input data, I/O failure or shape mismatch.
  RMF_STATUS_DATA = 2,
  // A resource ceiling was hit.
  RMF_STATUS_RESOURCE = 3,
  // Non-finite values during computation.
  RMF_STATUS_NUMERICAL = 4,
  // A required pointer argument was null.
  RMF_STATUS_NULL_POINTER = 5,
  // The checkpoint file does not exist.
  RMF_STATUS_CHECKPOINT_NOT_FOUND = 6,
  // A caller-provided buffer is too small.
  RMF_STATUS_BUFFER_TOO_SMALL = 7,
  // A bug inside the library (caught panic).
  RMF_STATUS_INTERNAL = 8,
} RmfStatus;

// A loaded network plus its recurrent state.
typedef struct RmfModel RmfModel;

// Growable, time-ordered event stream.
typedef struct RmfStream RmfStream;

// One event as laid out in C. `p` is +1 or -1.
typedef struct RmfEvent {
  uint64_t t;
  uint16_t x;
  uint16_t y;
  int8_t p;
} RmfEvent;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *rmf_version(void);

// Message of the last failure on this thread, or null if none. The
// pointer stays valid until the next failing call on the same thread.
const char *rmf_last_error(void);

// Empty stream on a `width` x `height` sensor.
//
// # Safety
// `out` must be a valid pointer to writable storage for a handle.
enum RmfStatus rmf_stream_new(size_t width, size_t height, struct RmfStream **out);

// Load a text or binary event file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` as in [`rmf_stream_new`].
enum RmfStatus rmf_stream_read(const char *path, struct RmfStream **out);

// Write the stream as text (`binary == 0`) or binary.
//
// # Safety
// `stream` must be a live handle and `path` a NUL-terminated string.
enum RmfStatus rmf_stream_write(const struct RmfStream *stream, const char *path, int32_t binary);

// Append `n` events. They must be in bounds and not earlier than the
// stream's last event. On failure no event of the batch is kept.
//
// # Safety
// `stream` must be a live handle; `events` must point to `n` events
// (it may be null when `n == 0`).
enum RmfStatus rmf_stream_push(struct RmfStream *stream, const struct RmfEvent *events, size_t n);

// Number of events, or 0 for a null handle.
//
// # Safety
// `stream` must be null or a live handle.
size_t rmf_stream_len(const struct RmfStream *stream);

// Sensor size of the stream.
//
// # Safety
// `stream` must be a live handle; `width`/`height` writable.
enum RmfStatus rmf_stream_size(const struct RmfStream *stream, size_t *width, size_t *height);

// Copy event `index` into `out`.
//
// # Safety
// `stream` must be a live handle and `out` writable.
enum RmfStatus rmf_stream_get(const struct RmfStream *stream, size_t index, struct RmfEvent *out);

// New stream with coordinates relocated down by `factor`.
//
// # Safety
// `stream` must be a live handle; `out` as in [`rmf_stream_new`].
enum RmfStatus rmf_stream_downsample(const struct RmfStream *stream,
                                     size_t factor,
                                     struct RmfStream **out);

// New stream produced by the named augmentation (`"polarity_flip"`,
// `"selected_da"`, ...) with default parameters.
//
// # Safety
// `stream` must be a live handle and `method` a NUL-terminated string;
// `out` as in [`rmf_stream_new`].
enum RmfStatus rmf_stream_augment(const struct RmfStream *stream,
                                  const char *method,
                                  uint64_t seed,
                                  struct RmfStream **out);

// Event count image of the whole stream into `counts` (row-major,
// `width * height` entries). `polarity` is +1, -1, or 0 for all events.
//
// # Safety
// `stream` must be a live handle; `counts` must hold `capacity` values.
enum RmfStatus rmf_stream_stack(const struct RmfStream *stream,
                                int32_t polarity,
                                uint32_t *counts,
                                size_t capacity);

// Release a stream. Null is ignored.
//
// # Safety
// `stream` must be null or a handle not yet freed.
void rmf_stream_free(struct RmfStream *stream);

// Load a checkpoint; its geometry is read from the file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` writable.
enum RmfStatus rmf_model_load(const char *path, struct RmfModel **out);

// Upscaling factor of the model.
//
// # Safety
// `model` must be a live handle.
size_t rmf_model_scale(const struct RmfModel *model);

// Run one recurrent step on an LR window (all events of `window`).
// Writes the SR positive plane then the negative plane, each
// `(r*width) * (r*height)` row-major counts, into `out`.
//
// # Safety
// `model` and `window` must be live handles; `out` must hold `capacity` floats.
enum RmfStatus rmf_model_infer_window(struct RmfModel *model,
                                      const struct RmfStream *window,
                                      float *out,
                                      size_t capacity);

// Forget the recurrent state; the next window starts a new sequence.
//
// # Safety
// `model` must be null or a live handle.
void rmf_model_reset(struct RmfModel *model);

// Release a model. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void rmf_model_free(struct RmfModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RMFNET_H */
