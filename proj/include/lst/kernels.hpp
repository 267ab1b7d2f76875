#pragma once

#include <cstddef>
#include <cstdint>

// Dense numeric kernels behind the tensor ops. Each kernel has a serial
// reference and an OpenMP variant; both share the same per-element inner
// loops, so outputs are bit-identical regardless of mode or thread count
// (every output element is produced by exactly one thread, in a fixed
// reduction order). `bench/kernels_bench` compares their throughput.
namespace lst::kernels {

enum class Mode { serial, parallel };

void set_mode(Mode m);
Mode mode();

// C[m x n] = op(A) * op(B), row-major. op is transpose when the flag is set;
// A is m x k after op, B is k x n after op. accumulate adds into C.
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n, bool trans_a, bool trans_b, bool accumulate);

// Row-wise softmax restricted to positions where mask != 0. Fully masked rows
// produce all-zero output rows. mask may be null (all positions allowed).
void softmax_rows_masked(const double* logits, const std::uint8_t* mask, double* out,
                         std::size_t rows, std::size_t cols);

// out[r] = x[r] * gain / rms(x[r]); inv_rms (len rows) receives 1/rms per row
// for the backward pass.
void rmsnorm_rows(const double* x, const double* gain, double* out, double* inv_rms,
                  std::size_t rows, std::size_t cols, double eps);

enum class Binary { add, mul };
void elementwise_binary(Binary op, const double* a, const double* b, double* out,
                        std::size_t n);

// out = x * sigmoid(x)
void silu(const double* x, double* out, std::size_t n);
// grad of silu: out[i] = gy[i] * (s + x*s*(1-s)), s = sigmoid(x[i])
void silu_backward(const double* x, const double* gy, double* out, std::size_t n);

void scale(const double* x, double c, double* out, std::size_t n);

namespace detail {

// Serial drivers (reference).
void gemm_serial(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n, bool trans_a, bool trans_b, bool accumulate);
void softmax_rows_masked_serial(const double* logits, const std::uint8_t* mask, double* out,
                                std::size_t rows, std::size_t cols);
void rmsnorm_rows_serial(const double* x, const double* gain, double* out, double* inv_rms,
                         std::size_t rows, std::size_t cols, double eps);
void elementwise_binary_serial(Binary op, const double* a, const double* b, double* out,
                               std::size_t n);
void silu_serial(const double* x, double* out, std::size_t n);
void silu_backward_serial(const double* x, const double* gy, double* out, std::size_t n);
void scale_serial(const double* x, double c, double* out, std::size_t n);

// OpenMP drivers.
void gemm_omp(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
              std::size_t n, bool trans_a, bool trans_b, bool accumulate);
void softmax_rows_masked_omp(const double* logits, const std::uint8_t* mask, double* out,
                             std::size_t rows, std::size_t cols);
void rmsnorm_rows_omp(const double* x, const double* gain, double* out, double* inv_rms,
                      std::size_t rows, std::size_t cols, double eps);
void elementwise_binary_omp(Binary op, const double* a, const double* b, double* out,
                            std::size_t n);
void silu_omp(const double* x, double* out, std::size_t n);
void silu_backward_omp(const double* x, const double* gy, double* out, std::size_t n);
void scale_omp(const double* x, double c, double* out, std::size_t n);

}  // namespace detail

}  // namespace lst::kernels
