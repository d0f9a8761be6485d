#ifndef MBANET_H
#define MBANET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status returned by every fallible call.
typedef enum MbaStatus {
  MBA_STATUS_OK = 0,
  MBA_STATUS_NULL_POINTER = 1,
  MBA_STATUS_INVALID_ARGUMENT = 2,
  MBA_STATUS_SHAPE = 3,
  MBA_STATUS_IO = 4,
  MBA_STATUS_CHECKPOINT = 5,
  MBA_STATUS_DATA = 6,
  MBA_STATUS_NUMERIC = 7,
  MBA_STATUS_PANIC = 8,
} MbaStatus;

// Opaque network handle.
typedef struct MbaNetwork MbaNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null if none.
// The pointer stays valid until the next failing call on the same thread.
const char *mba_last_error(void);

// Library version as a static NUL-terminated string.
const char *mba_version(void);

// Build the small 32x32 network with `num_ids` classifier outputs.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum MbaStatus mba_network_new_toy(size_t num_ids, uint64_t seed, struct MbaNetwork **out);

// Load a network from a checkpoint written by `mba_network_save` or the CLI.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum MbaStatus mba_network_load(const char *path, struct MbaNetwork **out);

// # Safety
// `net` must come from this library and `path` must be a NUL-terminated string.
enum MbaStatus mba_network_save(const struct MbaNetwork *net, const char *path);

// Descriptor width per image, or 0 for a null handle.
//
// # Safety
// `net` must be null or a live handle.
size_t mba_network_descriptor_dim(const struct MbaNetwork *net);

// Expected input height and width.
//
// # Safety
// `net` must be a live handle; `height` and `width` must be writable.
enum MbaStatus mba_network_input_size(const struct MbaNetwork *net, size_t *height, size_t *width);

// Embed `batch` normalized images laid out as `[batch, 3, H, W]`.
// Writes `batch * descriptor_dim` floats to `out`; `out_len` is its capacity.
//
// # Safety
// `images` must hold `batch * 3 * H * W` floats and `out` must hold `out_len`.
enum MbaStatus mba_network_embed(struct MbaNetwork *net,
                                 const float *images,
                                 size_t batch,
                                 float *out,
                                 size_t out_len);

// # Safety
// `net` must be null or a handle not yet freed.
void mba_network_free(struct MbaNetwork *net);

// Cosine-ranked rank-1 accuracy and mAP of `query` rows against `gallery` rows.
//
// # Safety
// `query` holds `num_query * dim` doubles, `gallery` holds `num_gallery * dim`,
// label arrays match their row counts, and `rank1`/`map` are writable.
enum MbaStatus mba_retrieval_metrics(const double *query,
                                     const int64_t *query_labels,
                                     size_t num_query,
                                     const double *gallery,
                                     const int64_t *gallery_labels,
                                     size_t num_gallery,
                                     size_t dim,
                                     double *rank1,
                                     double *map);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MBANET_H */
