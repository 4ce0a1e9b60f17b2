#ifndef PATCHSEG_H
#define PATCHSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum PsegStatus {
  PSEG_STATUS_OK = 0,
  PSEG_STATUS_NULL_ARGUMENT = 1,
  PSEG_STATUS_IO = 2,
  PSEG_STATUS_FORMAT = 3,
  PSEG_STATUS_DIMS = 4,
  PSEG_STATUS_DIVERGENCE = 5,
  PSEG_STATUS_INVALID = 6,
  PSEG_STATUS_PANIC = 7,
} PsegStatus;

// Opaque trained network.
typedef struct PsegNetwork PsegNetwork;

// Opaque 3D volume.
typedef struct PsegVolume PsegVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or an empty string. The
// pointer stays valid until the next failing call on this thread.
const char *pseg_last_error(void);

// Library version as a static NUL-terminated string.
const char *pseg_version(void);

// Loads a raw-grid or NIfTI-1 volume into `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum PsegStatus pseg_volume_load(const char *path, struct PsegVolume **out);

// Writes `volume` in the raw-grid format.
//
// # Safety
// `volume` must come from this library and `path` be NUL-terminated.
enum PsegStatus pseg_volume_save(const struct PsegVolume *volume, const char *path);

// Releases a volume. Null is ignored.
//
// # Safety
// `volume` must come from this library and not be used afterwards.
void pseg_volume_free(struct PsegVolume *volume);

// Grid size `[nx, ny, nz]` of `volume`, written to `dims[0..3]`.
//
// # Safety
// `volume` must come from this library; `dims` must hold 3 values.
enum PsegStatus pseg_volume_dims(const struct PsegVolume *volume, uint32_t *dims);

// 1 for label volumes, 0 for intensity volumes, -1 for a null handle.
//
// # Safety
// `volume` must be null or come from this library.
int32_t pseg_volume_is_label(const struct PsegVolume *volume);

// Loads a network checkpoint into `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum PsegStatus pseg_network_load(const char *path, struct PsegNetwork **out);

// Releases a network. Null is ignored.
//
// # Safety
// `network` must come from this library and not be used afterwards.
void pseg_network_free(struct PsegNetwork *network);

// Patch side of `network`, or 0 for a null handle.
//
// # Safety
// `network` must be null or come from this library.
uint32_t pseg_network_patch(const struct PsegNetwork *network);

// Segments `image` inside `mask` (nonzero voxels) and stores a new label
// volume in `*out`. `block` voxels are classified per matrix product; 0
// selects the default.
//
// # Safety
// Handles must come from this library; `out` must be a valid pointer.
enum PsegStatus pseg_segment(const struct PsegNetwork *network,
                             const struct PsegVolume *image,
                             const struct PsegVolume *mask,
                             uintptr_t block,
                             struct PsegVolume **out);

// Pooled-foreground Dice of two label volumes, written to `*out`.
//
// # Safety
// Handles must come from this library; `out` must be a valid pointer.
enum PsegStatus pseg_dice(const struct PsegVolume *a, const struct PsegVolume *b, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PATCHSEG_H */
