#include "lst/kernels.hpp"

#include "kernels_inner.hpp"

namespace lst::kernels::detail {

void gemm_serial(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n, bool trans_a, bool trans_b, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double v = inner::gemm_cell(a, b, i, j, m, k, n, trans_a, trans_b);
            if (accumulate)
                c[i * n + j] += v;
            else
                c[i * n + j] = v;
        }
    }
}

void softmax_rows_masked_serial(const double* logits, const std::uint8_t* mask, double* out,
                                std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        inner::softmax_row(logits + r * cols, mask ? mask + r * cols : nullptr, out + r * cols,
                           cols);
    }
}

void rmsnorm_rows_serial(const double* x, const double* gain, double* out, double* inv_rms,
                         std::size_t rows, std::size_t cols, double eps) {
    for (std::size_t r = 0; r < rows; ++r) {
        inner::rmsnorm_row(x + r * cols, gain, out + r * cols, inv_rms + r, cols, eps);
    }
}

void elementwise_binary_serial(Binary op, const double* a, const double* b, double* out,
                               std::size_t n) {
    if (op == Binary::add) {
        for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
    } else {
        for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
    }
}

void silu_serial(const double* x, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = inner::silu_cell(x[i]);
}

void silu_backward_serial(const double* x, const double* gy, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = inner::silu_grad_cell(x[i], gy[i]);
}

void scale_serial(const double* x, double c, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * c;
}

}  // namespace lst::kernels::detail
