#pragma once

#include <cstdint>

// Dense f64 kernels behind the tensor ops. Each kernel has a serial
// reference implementation (*_serial) and an OpenMP entry point that
// parallelizes over rows/elements while keeping per-element work in the
// same shared routine, so parallel results are bitwise identical to the
// serial reference for every thread count.
namespace nava::kernels {

bool parallel_enabled();
void set_parallel(bool on);

// C[M x N] = A[M x K] * B[K x N]
void matmul_nn_serial(const double* a, const double* b, double* c,
                      int64_t m, int64_t k, int64_t n);
void matmul_nn(const double* a, const double* b, double* c,
               int64_t m, int64_t k, int64_t n);

// C[M x N] = A[M x K] * B[N x K]^T
void matmul_nt_serial(const double* a, const double* b, double* c,
                      int64_t m, int64_t k, int64_t n);
void matmul_nt(const double* a, const double* b, double* c,
               int64_t m, int64_t k, int64_t n);

// C[M x N] = A[K x M]^T * B[K x N]
void matmul_tn_serial(const double* a, const double* b, double* c,
                      int64_t m, int64_t k, int64_t n);
void matmul_tn(const double* a, const double* b, double* c,
               int64_t m, int64_t k, int64_t n);

// Row-wise softmax with max subtraction. Returns false (and leaves y
// unspecified) if some row is fully masked, i.e. its max is below the
// additive-mask watermark; bad_row then holds the offending row index.
bool softmax_rows_serial(const double* x, double* y, int64_t m, int64_t n,
                         int64_t* bad_row);
bool softmax_rows(const double* x, double* y, int64_t m, int64_t n,
                  int64_t* bad_row);

// Per-row layer norm over the last axis; gain/bias may be null (identity
// affine). mean/inv_std outputs (length m) may be null when not needed.
void layer_norm_rows_serial(const double* x, const double* gain,
                            const double* bias, double* y, double* mean,
                            double* inv_std, int64_t m, int64_t n, double eps);
void layer_norm_rows(const double* x, const double* gain, const double* bias,
                     double* y, double* mean, double* inv_std, int64_t m,
                     int64_t n, double eps);

// Tanh-approximation GELU, forward and input-gradient accumulate.
void gelu_serial(const double* x, double* y, int64_t n);
void gelu(const double* x, double* y, int64_t n);
void gelu_backward_serial(const double* x, const double* dy, double* dx,
                          int64_t n);
void gelu_backward(const double* x, const double* dy, double* dx, int64_t n);

// Rotate consecutive dimension pairs of each row by angle
// pos[row] * base^(-2k/d). sign=-1 applies the inverse rotation.
void rope_rows_serial(const double* x, const double* pos, double* y,
                      int64_t t, int64_t d, double base, double sign);
void rope_rows(const double* x, const double* pos, double* y, int64_t t,
               int64_t d, double base, double sign);

}  // namespace nava::kernels
