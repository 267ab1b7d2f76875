#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>

// Per-element inner loops shared by the serial and OpenMP drivers. Keeping
// the arithmetic in one place guarantees both modes execute the same
// floating-point sequence per output element.
namespace lst::kernels::inner {

inline double gemm_cell(const double* a, const double* b, std::size_t i, std::size_t j,
                        std::size_t m, std::size_t k, std::size_t n, bool trans_a,
                        bool trans_b) {
    (void)m;
    double acc = 0.0;
    for (std::size_t p = 0; p < k; ++p) {
        const double av = trans_a ? a[p * m + i] : a[i * k + p];
        const double bv = trans_b ? b[j * k + p] : b[p * n + j];
        acc += av * bv;
    }
    return acc;
}

inline void softmax_row(const double* logits, const std::uint8_t* mask, double* out,
                        std::size_t cols) {
    double maxv = -1e300;
    bool any = false;
    for (std::size_t j = 0; j < cols; ++j) {
        if (mask && !mask[j]) continue;
        any = true;
        if (logits[j] > maxv) maxv = logits[j];
    }
    if (!any) {
        for (std::size_t j = 0; j < cols; ++j) out[j] = 0.0;
        return;
    }
    double denom = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
        if (mask && !mask[j]) {
            out[j] = 0.0;
        } else {
            out[j] = std::exp(logits[j] - maxv);
            denom += out[j];
        }
    }
    const double inv = 1.0 / denom;
    for (std::size_t j = 0; j < cols; ++j) out[j] *= inv;
}

inline void rmsnorm_row(const double* x, const double* gain, double* out, double* inv_rms,
                        std::size_t cols, double eps) {
    double ss = 0.0;
    for (std::size_t j = 0; j < cols; ++j) ss += x[j] * x[j];
    const double r = 1.0 / std::sqrt(ss / static_cast<double>(cols) + eps);
    *inv_rms = r;
    for (std::size_t j = 0; j < cols; ++j) out[j] = x[j] * r * gain[j];
}

inline double silu_cell(double x) {
    const double s = 1.0 / (1.0 + std::exp(-x));
    return x * s;
}

inline double silu_grad_cell(double x, double gy) {
    const double s = 1.0 / (1.0 + std::exp(-x));
    return gy * (s + x * s * (1.0 - s));
}

}  // namespace lst::kernels::inner
