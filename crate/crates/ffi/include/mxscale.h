#ifndef MXSCALE_H
#define MXSCALE_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum MxDtype {
  MX_DTYPE_F32 = 0,
  MX_DTYPE_F64 = 1,
} MxDtype;

typedef enum MxFormat {
  MX_FORMAT_E2M1 = 0,
  MX_FORMAT_E4M3 = 1,
  MX_FORMAT_UE5M3 = 2,
  MX_FORMAT_E8M0 = 3,
} MxFormat;

typedef enum MxScaleKind {
  MX_SCALE_KIND_ABS_MAX = 0,
  MX_SCALE_KIND_PREVENT_ZERO = 1,
  MX_SCALE_KIND_FOUR_OVER_SIX = 2,
  MX_SCALE_KIND_FOUR_OVER_SIX_PREVENT_ZERO = 3,
  MX_SCALE_KIND_MX_POW2 = 4,
  MX_SCALE_KIND_BRUTE_FORCE = 5,
} MxScaleKind;

typedef enum MxStatus {
  MX_STATUS_OK = 0,
  MX_STATUS_NULL_POINTER = 1,
  MX_STATUS_INVALID_ARGUMENT = 2,
  MX_STATUS_NON_FINITE = 3,
  MX_STATUS_IO = 4,
  MX_STATUS_MALFORMED_FILE = 5,
  MX_STATUS_PANIC = 6,
} MxStatus;

// Opaque quantization recipe plus block size.
typedef struct MxQuantizer MxQuantizer;

// Opaque tensor.
typedef struct MxTensor MxTensor;

// Aggregate error of one quantization call.
typedef struct MxErrorReport {
  double total_sse;
  // `clip_sse + round_sse == total_sse` exactly.
  double clip_sse;
  double round_sse;
  uint64_t n;
  // Counts per E2M1 magnitude 0, 0.5, 1, 1.5, 2, 3, 4, 6.
  uint64_t entry_bin_counts[8];
  uint64_t clipped_count;
  double zero_scale_fraction;
  // 1.0 unless hierarchical.
  double tensor_scale;
} MxErrorReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failure on this thread, or NULL. Valid until the
// next failing call on the same thread.
const char *mx_last_error_message(void);

// Rounds `value` to the nearest value of `format` (ties to the even code).
enum MxStatus mx_round_to_format(enum MxFormat format,
                                 double value,
                                 uint8_t *code_out,
                                 double *value_out);

// Creates a quantizer. `mx_pow2` always uses E8M0 scales.
enum MxStatus mx_quantizer_new(enum MxScaleKind kind,
                               enum MxFormat scale_format,
                               bool hierarchical,
                               size_t block_size,
                               struct MxQuantizer **out);

// Creates a quantizer from a recipe label such as `ue5m3+4o6+H`.
enum MxStatus mx_quantizer_from_label(const char *label,
                                      size_t block_size,
                                      struct MxQuantizer **out);

void mx_quantizer_free(struct MxQuantizer *q);

// Number of blocks (and scales) produced for `len` values.
size_t mx_quantizer_num_blocks(const struct MxQuantizer *q, size_t len);

// Quantizes `len` values in blocks.
//
// Nullable outputs: `element_codes_out` (len E2M1 codes), `scales_out`
// (one decoded scale per block), `dequantized_out` (len values),
// `report_out`.
enum MxStatus mx_quantize(const struct MxQuantizer *q,
                          const double *data,
                          size_t len,
                          uint8_t *element_codes_out,
                          double *scales_out,
                          double *dequantized_out,
                          struct MxErrorReport *report_out);

// Loads an NPY file (`<f4` or `<f8`, C order).
enum MxStatus mx_tensor_load(const char *path, struct MxTensor **out);

// Copies `len` values into a new tensor of the given shape.
enum MxStatus mx_tensor_from_data(const double *data,
                                  size_t len,
                                  const size_t *shape,
                                  size_t ndim,
                                  enum MxDtype dtype,
                                  struct MxTensor **out);

enum MxStatus mx_tensor_save(const struct MxTensor *t, const char *path);

size_t mx_tensor_len(const struct MxTensor *t);

// Row-major values, valid while the tensor lives.
const double *mx_tensor_data(const struct MxTensor *t);

size_t mx_tensor_ndim(const struct MxTensor *t);

const size_t *mx_tensor_shape(const struct MxTensor *t);

void mx_tensor_free(struct MxTensor *t);

// Zeroes magnitudes in `[lower, upper)` into a new tensor. `upper` may be
// `INFINITY`.
enum MxStatus mx_mask_range(const struct MxTensor *t,
                            double lower,
                            double upper,
                            struct MxTensor **out,
                            double *masked_fraction_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MXSCALE_H */
