#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vector>

#include "nava/kernels.hpp"
#include "nava/rng.hpp"

using namespace nava;

namespace {

std::vector<double> randv(size_t n, Rng& rng) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal();
    return v;
}

struct ParallelGuard {
    explicit ParallelGuard(bool on) { kernels::set_parallel(on); }
    ~ParallelGuard() { kernels::set_parallel(true); }
};

}  // namespace

TEST_CASE("matmul kernels match serial reference bitwise") {
    Rng rng(11);
    for (auto [m, k, n] : {std::tuple{1, 1, 1}, std::tuple{3, 5, 7},
                           std::tuple{17, 33, 9}, std::tuple{64, 64, 64},
                           std::tuple{50, 13, 127}}) {
        auto a = randv(static_cast<size_t>(m * k), rng);
        auto b = randv(static_cast<size_t>(k * n), rng);
        std::vector<double> c_ref(static_cast<size_t>(m * n));
        std::vector<double> c_par(static_cast<size_t>(m * n));

        kernels::matmul_nn_serial(a.data(), b.data(), c_ref.data(), m, k, n);
        kernels::matmul_nn(a.data(), b.data(), c_par.data(), m, k, n);
        CHECK(c_ref == c_par);

        auto bt = randv(static_cast<size_t>(n * k), rng);
        kernels::matmul_nt_serial(a.data(), bt.data(), c_ref.data(), m, k, n);
        kernels::matmul_nt(a.data(), bt.data(), c_par.data(), m, k, n);
        CHECK(c_ref == c_par);

        auto at = randv(static_cast<size_t>(k * m), rng);
        kernels::matmul_tn_serial(at.data(), b.data(), c_ref.data(), m, k, n);
        kernels::matmul_tn(at.data(), b.data(), c_par.data(), m, k, n);
        CHECK(c_ref == c_par);
    }
}

TEST_CASE("matmul_nt and matmul_tn agree with explicit transposition") {
    Rng rng(5);
    const int m = 6, k = 4, n = 5;
    auto a = randv(static_cast<size_t>(m * k), rng);
    auto b = randv(static_cast<size_t>(k * n), rng);
    std::vector<double> c(static_cast<size_t>(m * n));
    kernels::matmul_nn_serial(a.data(), b.data(), c.data(), m, k, n);

    // nt: feed b transposed.
    std::vector<double> bt(static_cast<size_t>(n * k));
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < n; ++j) bt[j * k + i] = b[i * n + j];
    std::vector<double> c2(static_cast<size_t>(m * n));
    kernels::matmul_nt_serial(a.data(), bt.data(), c2.data(), m, k, n);
    for (size_t i = 0; i < c.size(); ++i)
        CHECK(c[i] == doctest::Approx(c2[i]).epsilon(1e-12));

    // tn: feed a transposed.
    std::vector<double> at(static_cast<size_t>(k * m));
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < k; ++j) at[j * m + i] = a[i * k + j];
    std::vector<double> c3(static_cast<size_t>(m * n));
    kernels::matmul_tn_serial(at.data(), b.data(), c3.data(), m, k, n);
    for (size_t i = 0; i < c.size(); ++i)
        CHECK(c[i] == doctest::Approx(c3[i]).epsilon(1e-12));
}

TEST_CASE("softmax/layer_norm/gelu/rope parallel paths are bitwise") {
    Rng rng(23);
    const int m = 37, n = 19;
    auto x = randv(static_cast<size_t>(m * n), rng);
    std::vector<double> ref(x.size()), par(x.size());

    int64_t bad = -1;
    CHECK(kernels::softmax_rows_serial(x.data(), ref.data(), m, n, &bad));
    CHECK(kernels::softmax_rows(x.data(), par.data(), m, n, &bad));
    CHECK(ref == par);

    auto gain = randv(static_cast<size_t>(n), rng);
    auto bias = randv(static_cast<size_t>(n), rng);
    std::vector<double> mean_r(m), inv_r(m), mean_p(m), inv_p(m);
    kernels::layer_norm_rows_serial(x.data(), gain.data(), bias.data(),
                                    ref.data(), mean_r.data(), inv_r.data(), m,
                                    n, 1e-5);
    kernels::layer_norm_rows(x.data(), gain.data(), bias.data(), par.data(),
                             mean_p.data(), inv_p.data(), m, n, 1e-5);
    CHECK(ref == par);
    CHECK(mean_r == mean_p);
    CHECK(inv_r == inv_p);

    kernels::gelu_serial(x.data(), ref.data(), m * n);
    kernels::gelu(x.data(), par.data(), m * n);
    CHECK(ref == par);

    const int t = m, d = 18;
    auto y = randv(static_cast<size_t>(t * d), rng);
    auto pos = randv(static_cast<size_t>(t), rng);
    std::vector<double> r2(y.size()), p2(y.size());
    kernels::rope_rows_serial(y.data(), pos.data(), r2.data(), t, d, 10000.0,
                              1.0);
    kernels::rope_rows(y.data(), pos.data(), p2.data(), t, d, 10000.0, 1.0);
    CHECK(r2 == p2);
}

TEST_CASE("disabling the parallel backend gives identical results") {
    Rng rng(7);
    const int m = 40, k = 24, n = 32;
    auto a = randv(static_cast<size_t>(m * k), rng);
    auto b = randv(static_cast<size_t>(k * n), rng);
    std::vector<double> on(static_cast<size_t>(m * n));
    std::vector<double> off(static_cast<size_t>(m * n));
    kernels::matmul_nn(a.data(), b.data(), on.data(), m, k, n);
    {
        ParallelGuard guard(false);
        kernels::matmul_nn(a.data(), b.data(), off.data(), m, k, n);
    }
    CHECK(on == off);
}

TEST_CASE("softmax reports fully masked rows") {
    std::vector<double> x = {0.0, 1.0, -1e9, -1e9};
    std::vector<double> y(4);
    int64_t bad = -1;
    CHECK_FALSE(kernels::softmax_rows_serial(x.data() + 2, y.data(), 1, 2,
                                             &bad));
    CHECK(bad == 0);
    CHECK(kernels::softmax_rows_serial(x.data(), y.data(), 1, 2, &bad));
}
