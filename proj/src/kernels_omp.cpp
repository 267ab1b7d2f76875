#include "lst/kernels.hpp"

#include "kernels_inner.hpp"

namespace lst::kernels::detail {

void gemm_omp(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
              std::size_t n, bool trans_a, bool trans_b, bool accumulate) {
    const std::int64_t mi = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < mi; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double v =
                inner::gemm_cell(a, b, static_cast<std::size_t>(i), j, m, k, n, trans_a, trans_b);
            if (accumulate)
                c[i * static_cast<std::int64_t>(n) + static_cast<std::int64_t>(j)] += v;
            else
                c[i * static_cast<std::int64_t>(n) + static_cast<std::int64_t>(j)] = v;
        }
    }
}

void softmax_rows_masked_omp(const double* logits, const std::uint8_t* mask, double* out,
                             std::size_t rows, std::size_t cols) {
    const std::int64_t ri = static_cast<std::int64_t>(rows);
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < ri; ++r) {
        inner::softmax_row(logits + r * static_cast<std::int64_t>(cols),
                           mask ? mask + r * static_cast<std::int64_t>(cols) : nullptr,
                           out + r * static_cast<std::int64_t>(cols), cols);
    }
}

void rmsnorm_rows_omp(const double* x, const double* gain, double* out, double* inv_rms,
                      std::size_t rows, std::size_t cols, double eps) {
    const std::int64_t ri = static_cast<std::int64_t>(rows);
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < ri; ++r) {
        inner::rmsnorm_row(x + r * static_cast<std::int64_t>(cols), gain,
                           out + r * static_cast<std::int64_t>(cols), inv_rms + r, cols, eps);
    }
}

void elementwise_binary_omp(Binary op, const double* a, const double* b, double* out,
                            std::size_t n) {
    const std::int64_t ni = static_cast<std::int64_t>(n);
    if (op == Binary::add) {
#pragma omp parallel for schedule(static)
        for (std::int64_t i = 0; i < ni; ++i) out[i] = a[i] + b[i];
    } else {
#pragma omp parallel for schedule(static)
        for (std::int64_t i = 0; i < ni; ++i) out[i] = a[i] * b[i];
    }
}

void silu_omp(const double* x, double* out, std::size_t n) {
    const std::int64_t ni = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < ni; ++i) out[i] = inner::silu_cell(x[i]);
}

void silu_backward_omp(const double* x, const double* gy, double* out, std::size_t n) {
    const std::int64_t ni = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < ni; ++i) out[i] = inner::silu_grad_cell(x[i], gy[i]);
}

void scale_omp(const double* x, double c, double* out, std::size_t n) {
    const std::int64_t ni = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < ni; ++i) out[i] = x[i] * c;
}

}  // namespace lst::kernels::detail
