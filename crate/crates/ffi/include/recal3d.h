#ifndef RECAL3D_H
#define RECAL3D_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum Recal3dStatus {
  RECAL3D_STATUS_OK = 0,
  RECAL3D_STATUS_NULL_ARGUMENT = 1,
  RECAL3D_STATUS_INVALID_CONFIG = 2,
  RECAL3D_STATUS_SHAPE = 3,
  RECAL3D_STATUS_FORMAT = 4,
  RECAL3D_STATUS_INCOMPATIBLE = 5,
  RECAL3D_STATUS_IO = 6,
  RECAL3D_STATUS_GENERATION = 7,
  RECAL3D_STATUS_NON_FINITE = 8,
  RECAL3D_STATUS_BUFFER_TOO_SMALL = 9,
  RECAL3D_STATUS_INTERNAL = 10,
} Recal3dStatus;

typedef enum Recal3dBlockKind {
  RECAL3D_BLOCK_KIND_CSE = 0,
  RECAL3D_BLOCK_KIND_SSE = 1,
  RECAL3D_BLOCK_KIND_SCSE = 2,
  RECAL3D_BLOCK_KIND_CBAM = 3,
  RECAL3D_BLOCK_KIND_PE = 4,
} Recal3dBlockKind;

/**
 * Segmentation network handle.
 */
typedef struct Recal3dNet Recal3dNet;

/**
 * Synthetic phantom handle.
 */
typedef struct Recal3dPhantom Recal3dPhantom;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread; empty if none. Valid until
 * the next failing call on the same thread.
 */
const char *recal3d_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *recal3d_version(void);

/**
 * Builds a freshly initialised network. `config_json` may be null for the
 * default network.
 *
 * # Safety
 * `config_json` must be null or a NUL-terminated string; `out` must be a
 * valid pointer to write the handle to.
 */
enum Recal3dStatus recal3d_net_new(const char *config_json, uint64_t seed, struct Recal3dNet **out);

/**
 * Loads a weights file written for the network described by `config_json`
 * (null for the default network).
 *
 * # Safety
 * `path` and `config_json` as for [`recal3d_net_new`]; `out` must be valid.
 */
enum Recal3dStatus recal3d_net_load(const char *path,
                                    const char *config_json,
                                    struct Recal3dNet **out);

/**
 * # Safety
 * `net` must be a live handle and `path` a NUL-terminated string.
 */
enum Recal3dStatus recal3d_net_save(const struct Recal3dNet *net, const char *path);

/**
 * # Safety
 * `net` must be a live handle and `out` a valid pointer.
 */
enum Recal3dStatus recal3d_net_param_count(const struct Recal3dNet *net, uint64_t *out);

/**
 * Segments one single-channel volume of `h·w·d` values (row-major, `d`
 * fastest) into `labels`, which must hold at least `h·w·d` bytes.
 *
 * # Safety
 * `net` must be live; `volume` must point to `h·w·d` doubles and `labels`
 * to `labels_len` writable bytes.
 */
enum Recal3dStatus recal3d_net_segment(const struct Recal3dNet *net,
                                       const double *volume,
                                       size_t h,
                                       size_t w,
                                       size_t d,
                                       uint8_t *labels,
                                       size_t labels_len);

/**
 * # Safety
 * `net` must be null or a handle not yet freed.
 */
void recal3d_net_free(struct Recal3dNet *net);

/**
 * Generates a phantom. `spec_json` may be null for the default spec.
 *
 * # Safety
 * `spec_json` must be null or NUL-terminated; `out` must be valid.
 */
enum Recal3dStatus recal3d_phantom_generate(const char *spec_json,
                                            uint64_t seed,
                                            struct Recal3dPhantom **out);

/**
 * Writes the extents `[h, w, d]` to `extents`.
 *
 * # Safety
 * `phantom` must be live; `extents` must point to 3 writable values.
 */
enum Recal3dStatus recal3d_phantom_extents(const struct Recal3dPhantom *phantom, size_t *extents);

/**
 * # Safety
 * `phantom` must be live; `buf` must point to `len` writable doubles.
 */
enum Recal3dStatus recal3d_phantom_intensity(const struct Recal3dPhantom *phantom,
                                             double *buf,
                                             size_t len);

/**
 * # Safety
 * `phantom` must be live; `buf` must point to `len` writable bytes.
 */
enum Recal3dStatus recal3d_phantom_labels(const struct Recal3dPhantom *phantom,
                                          uint8_t *buf,
                                          size_t len);

/**
 * # Safety
 * `phantom` must be null or a handle not yet freed.
 */
void recal3d_phantom_free(struct Recal3dPhantom *phantom);

/**
 * Volumetric Dice of `class` between two label volumes of `h·w·d` bytes.
 *
 * # Safety
 * `pred` and `truth` must each point to `h·w·d` bytes; `out` must be valid.
 */
enum Recal3dStatus recal3d_volumetric_dice(const uint8_t *pred,
                                           const uint8_t *truth,
                                           size_t h,
                                           size_t w,
                                           size_t d,
                                           size_t class_,
                                           double *out);

/**
 * Surface Dice of `class` at `tolerance` with unit voxel spacing.
 *
 * # Safety
 * As for [`recal3d_volumetric_dice`].
 */
enum Recal3dStatus recal3d_surface_dice(const uint8_t *pred,
                                        const uint8_t *truth,
                                        size_t h,
                                        size_t w,
                                        size_t d,
                                        size_t class_,
                                        double tolerance,
                                        double *out);

/**
 * Learned parameters of one block on `channels` channels. `reduction` 0
 * picks the kind's default.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum Recal3dStatus recal3d_block_param_count(enum Recal3dBlockKind kind,
                                             size_t channels,
                                             size_t reduction,
                                             uint64_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RECAL3D_H */
