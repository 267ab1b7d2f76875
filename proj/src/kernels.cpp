#include "lst/kernels.hpp"

#include <atomic>

namespace lst::kernels {

namespace {
std::atomic<Mode> g_mode{Mode::parallel};
}

void set_mode(Mode m) { g_mode.store(m, std::memory_order_relaxed); }
Mode mode() { return g_mode.load(std::memory_order_relaxed); }

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n, bool trans_a, bool trans_b, bool accumulate) {
    if (mode() == Mode::parallel)
        detail::gemm_omp(a, b, c, m, k, n, trans_a, trans_b, accumulate);
    else
        detail::gemm_serial(a, b, c, m, k, n, trans_a, trans_b, accumulate);
}

void softmax_rows_masked(const double* logits, const std::uint8_t* mask, double* out,
                         std::size_t rows, std::size_t cols) {
    if (mode() == Mode::parallel)
        detail::softmax_rows_masked_omp(logits, mask, out, rows, cols);
    else
        detail::softmax_rows_masked_serial(logits, mask, out, rows, cols);
}

void rmsnorm_rows(const double* x, const double* gain, double* out, double* inv_rms,
                  std::size_t rows, std::size_t cols, double eps) {
    if (mode() == Mode::parallel)
        detail::rmsnorm_rows_omp(x, gain, out, inv_rms, rows, cols, eps);
    else
        detail::rmsnorm_rows_serial(x, gain, out, inv_rms, rows, cols, eps);
}

void elementwise_binary(Binary op, const double* a, const double* b, double* out,
                        std::size_t n) {
    if (mode() == Mode::parallel)
        detail::elementwise_binary_omp(op, a, b, out, n);
    else
        detail::elementwise_binary_serial(op, a, b, out, n);
}

void silu(const double* x, double* out, std::size_t n) {
    if (mode() == Mode::parallel)
        detail::silu_omp(x, out, n);
    else
        detail::silu_serial(x, out, n);
}

void silu_backward(const double* x, const double* gy, double* out, std::size_t n) {
    if (mode() == Mode::parallel)
        detail::silu_backward_omp(x, gy, out, n);
    else
        detail::silu_backward_serial(x, gy, out, n);
}

void scale(const double* x, double c, double* out, std::size_t n) {
    if (mode() == Mode::parallel)
        detail::scale_omp(x, c, out, n);
    else
        detail::scale_serial(x, c, out, n);
}

}  // namespace lst::kernels
