#include "nava/kernels.hpp"

#include <atomic>
#include <cmath>

namespace nava::kernels {

namespace {

std::atomic<bool> g_parallel{true};

// Fully-masked-row watermark: genuine attention scores stay far above this.
constexpr double kMaskFloor = -1e8;

// Row routines are noinline so the serial and OpenMP loops share one
// compiled body and therefore one floating-point evaluation order.
__attribute__((noinline)) void mm_nn_row(const double* a_row, const double* b,
                                         double* c_row, int64_t k, int64_t n) {
    for (int64_t j = 0; j < n; ++j) c_row[j] = 0.0;
    for (int64_t p = 0; p < k; ++p) {
        const double av = a_row[p];
        const double* b_row = b + p * n;
        for (int64_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
    }
}

__attribute__((noinline)) void mm_nt_row(const double* a_row, const double* b,
                                         double* c_row, int64_t k, int64_t n) {
    for (int64_t j = 0; j < n; ++j) {
        const double* b_row = b + j * k;
        double acc = 0.0;
        for (int64_t p = 0; p < k; ++p) acc += a_row[p] * b_row[p];
        c_row[j] = acc;
    }
}

__attribute__((noinline)) void mm_tn_row(const double* a, const double* b,
                                         double* c_row, int64_t i, int64_t k,
                                         int64_t m, int64_t n) {
    for (int64_t j = 0; j < n; ++j) c_row[j] = 0.0;
    for (int64_t p = 0; p < k; ++p) {
        const double av = a[p * m + i];
        const double* b_row = b + p * n;
        for (int64_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
    }
}

__attribute__((noinline)) bool softmax_row(const double* x_row, double* y_row,
                                           int64_t n) {
    double mx = x_row[0];
    for (int64_t j = 1; j < n; ++j) mx = x_row[j] > mx ? x_row[j] : mx;
    if (mx <= kMaskFloor) return false;
    double sum = 0.0;
    for (int64_t j = 0; j < n; ++j) {
        y_row[j] = std::exp(x_row[j] - mx);
        sum += y_row[j];
    }
    const double inv = 1.0 / sum;
    for (int64_t j = 0; j < n; ++j) y_row[j] *= inv;
    return true;
}

__attribute__((noinline)) void layer_norm_row(const double* x_row,
                                              const double* gain,
                                              const double* bias, double* y_row,
                                              double* mean_out,
                                              double* inv_std_out, int64_t n,
                                              double eps) {
    double mean = 0.0;
    for (int64_t j = 0; j < n; ++j) mean += x_row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t j = 0; j < n; ++j) {
        const double d = x_row[j] - mean;
        var += d * d;
    }
    var /= static_cast<double>(n);
    const double inv_std = 1.0 / std::sqrt(var + eps);
    for (int64_t j = 0; j < n; ++j) {
        double v = (x_row[j] - mean) * inv_std;
        if (gain) v = v * gain[j];
        if (bias) v = v + bias[j];
        y_row[j] = v;
    }
    if (mean_out) *mean_out = mean;
    if (inv_std_out) *inv_std_out = inv_std;
}

constexpr double kGeluC = 0.79788456080286535588;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

__attribute__((noinline)) double gelu_one(double x) {
    const double u = kGeluC * (x + kGeluA * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

__attribute__((noinline)) double gelu_grad_one(double x) {
    const double u = kGeluC * (x + kGeluA * x * x * x);
    const double th = std::tanh(u);
    const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

__attribute__((noinline)) void rope_row(const double* x_row, double p,
                                        double* y_row, int64_t d, double base,
                                        double sign) {
    for (int64_t k = 0; k < d / 2; ++k) {
        const double freq =
            std::pow(base, -2.0 * static_cast<double>(k) / static_cast<double>(d));
        const double angle = sign * p * freq;
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const double x0 = x_row[2 * k];
        const double x1 = x_row[2 * k + 1];
        y_row[2 * k] = x0 * c - x1 * s;
        y_row[2 * k + 1] = x0 * s + x1 * c;
    }
}

}  // namespace

bool parallel_enabled() { return g_parallel.load(std::memory_order_relaxed); }
void set_parallel(bool on) { g_parallel.store(on, std::memory_order_relaxed); }

void matmul_nn_serial(const double* a, const double* b, double* c, int64_t m,
                      int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) mm_nn_row(a + i * k, b, c + i * n, k, n);
}

void matmul_nn(const double* a, const double* b, double* c, int64_t m,
               int64_t k, int64_t n) {
    if (!parallel_enabled()) {
        matmul_nn_serial(a, b, c, m, k, n);
        return;
    }
#pragma omp parallel for schedule(static) if (m * k * n > 8192)
    for (int64_t i = 0; i < m; ++i) mm_nn_row(a + i * k, b, c + i * n, k, n);
}

void matmul_nt_serial(const double* a, const double* b, double* c, int64_t m,
                      int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) mm_nt_row(a + i * k, b, c + i * n, k, n);
}

void matmul_nt(const double* a, const double* b, double* c, int64_t m,
               int64_t k, int64_t n) {
    if (!parallel_enabled()) {
        matmul_nt_serial(a, b, c, m, k, n);
        return;
    }
#pragma omp parallel for schedule(static) if (m * k * n > 8192)
    for (int64_t i = 0; i < m; ++i) mm_nt_row(a + i * k, b, c + i * n, k, n);
}

void matmul_tn_serial(const double* a, const double* b, double* c, int64_t m,
                      int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) mm_tn_row(a, b, c + i * n, i, k, m, n);
}

void matmul_tn(const double* a, const double* b, double* c, int64_t m,
               int64_t k, int64_t n) {
    if (!parallel_enabled()) {
        matmul_tn_serial(a, b, c, m, k, n);
        return;
    }
#pragma omp parallel for schedule(static) if (m * k * n > 8192)
    for (int64_t i = 0; i < m; ++i) mm_tn_row(a, b, c + i * n, i, k, m, n);
}

bool softmax_rows_serial(const double* x, double* y, int64_t m, int64_t n,
                         int64_t* bad_row) {
    for (int64_t i = 0; i < m; ++i) {
        if (!softmax_row(x + i * n, y + i * n, n)) {
            if (bad_row) *bad_row = i;
            return false;
        }
    }
    return true;
}

bool softmax_rows(const double* x, double* y, int64_t m, int64_t n,
                  int64_t* bad_row) {
    if (!parallel_enabled()) return softmax_rows_serial(x, y, m, n, bad_row);
    std::atomic<int64_t> bad{-1};
#pragma omp parallel for schedule(static) if (m * n > 4096)
    for (int64_t i = 0; i < m; ++i) {
        if (!softmax_row(x + i * n, y + i * n, n)) bad.store(i);
    }
    if (bad.load() >= 0) {
        if (bad_row) *bad_row = bad.load();
        return false;
    }
    return true;
}

void layer_norm_rows_serial(const double* x, const double* gain,
                            const double* bias, double* y, double* mean,
                            double* inv_std, int64_t m, int64_t n, double eps) {
    for (int64_t i = 0; i < m; ++i) {
        layer_norm_row(x + i * n, gain, bias, y + i * n,
                       mean ? mean + i : nullptr, inv_std ? inv_std + i : nullptr,
                       n, eps);
    }
}

void layer_norm_rows(const double* x, const double* gain, const double* bias,
                     double* y, double* mean, double* inv_std, int64_t m,
                     int64_t n, double eps) {
    if (!parallel_enabled()) {
        layer_norm_rows_serial(x, gain, bias, y, mean, inv_std, m, n, eps);
        return;
    }
#pragma omp parallel for schedule(static) if (m * n > 4096)
    for (int64_t i = 0; i < m; ++i) {
        layer_norm_row(x + i * n, gain, bias, y + i * n,
                       mean ? mean + i : nullptr, inv_std ? inv_std + i : nullptr,
                       n, eps);
    }
}

void gelu_serial(const double* x, double* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] = gelu_one(x[i]);
}

void gelu(const double* x, double* y, int64_t n) {
    if (!parallel_enabled()) {
        gelu_serial(x, y, n);
        return;
    }
#pragma omp parallel for schedule(static) if (n > 4096)
    for (int64_t i = 0; i < n; ++i) y[i] = gelu_one(x[i]);
}

void gelu_backward_serial(const double* x, const double* dy, double* dx,
                          int64_t n) {
    for (int64_t i = 0; i < n; ++i) dx[i] += dy[i] * gelu_grad_one(x[i]);
}

void gelu_backward(const double* x, const double* dy, double* dx, int64_t n) {
    if (!parallel_enabled()) {
        gelu_backward_serial(x, dy, dx, n);
        return;
    }
#pragma omp parallel for schedule(static) if (n > 4096)
    for (int64_t i = 0; i < n; ++i) dx[i] += dy[i] * gelu_grad_one(x[i]);
}

void rope_rows_serial(const double* x, const double* pos, double* y, int64_t t,
                      int64_t d, double base, double sign) {
    for (int64_t i = 0; i < t; ++i)
        rope_row(x + i * d, pos[i], y + i * d, d, base, sign);
}

void rope_rows(const double* x, const double* pos, double* y, int64_t t,
               int64_t d, double base, double sign) {
    if (!parallel_enabled()) {
        rope_rows_serial(x, pos, y, t, d, base, sign);
        return;
    }
#pragma omp parallel for schedule(static) if (t * d > 2048)
    for (int64_t i = 0; i < t; ++i)
        rope_row(x + i * d, pos[i], y + i * d, d, base, sign);
}

}  // namespace nava::kernels
