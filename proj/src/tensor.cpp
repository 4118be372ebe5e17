#include "nava/tensor.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "nava/kernels.hpp"

namespace nava {

namespace {

thread_local Tape* g_tape = nullptr;

using DataPtr = std::shared_ptr<detail::TensorData>;

int64_t product(const Shape& s) {
    int64_t p = 1;
    for (int64_t e : s) p *= e;
    return p;
}

void validate_shape(const Shape& s) {
    if (s.empty()) throw ShapeError("tensor shape must have at least one axis");
    for (int64_t e : s) {
        if (e <= 0)
            throw ShapeError("tensor extents must be positive, got " +
                             shape_str(s));
    }
}

void check_finite(const Tensor& t, const char* op) {
    const double* p = t.data();
    const int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i) {
        if (!std::isfinite(p[i]))
            throw NumericError(std::string(op) +
                               ": produced a non-finite value at index " +
                               std::to_string(i));
    }
}

bool tracing(std::initializer_list<const Tensor*> inputs) {
    if (!g_tape) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

std::vector<double>& ensure_grad(const DataPtr& d) {
    if (d->grad.empty()) d->grad.assign(d->data.size(), 0.0);
    return d->grad;
}

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2)
        throw ShapeError(std::string(op) + ": expected a rank-2 tensor, got " +
                         shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void require_valid(const Tensor& t, const char* op) {
    if (!t.valid())
        throw ShapeError(std::string(op) + ": operand is an empty tensor handle");
}

}  // namespace

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) {
    validate_shape(shape);
    d_ = std::make_shared<detail::TensorData>();
    d_->data.assign(static_cast<size_t>(product(shape)), fill);
    d_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) {
    validate_shape(shape);
    if (product(shape) != static_cast<int64_t>(values.size()))
        throw ShapeError("tensor init: " + shape_str(shape) + " needs " +
                         std::to_string(product(shape)) + " values, got " +
                         std::to_string(values.size()));
    d_ = std::make_shared<detail::TensorData>();
    d_->shape = std::move(shape);
    d_->data = std::move(values);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = rng.normal() * stddev;
    return t;
}

double Tensor::item() const {
    if (!is_scalar())
        throw ShapeError("item(): tensor is not scalar, shape " +
                         shape_str(shape()));
    return d_->data[0];
}

std::vector<double>& Tensor::grad() { return ensure_grad(d_); }

const std::vector<double>& Tensor::grad() const {
    if (d_->grad.empty())
        throw NumericError("grad(): no gradient has been accumulated");
    return d_->grad;
}

Tensor Tensor::clone() const {
    Tensor t(d_->shape, d_->data);
    t.set_requires_grad(d_->requires_grad);
    return t;
}

TapeScope::TapeScope(Tape& tape) : prev_(g_tape) { g_tape = &tape; }
TapeScope::~TapeScope() { g_tape = prev_; }

Tape* active_tape() { return g_tape; }

void backward(const Tensor& loss, Tape& tape) {
    if (!loss.valid() || !loss.is_scalar())
        throw ShapeError("backward: loss must be a scalar tensor, got " +
                         (loss.valid() ? shape_str(loss.shape())
                                       : std::string("<empty>")));
    if (tape.consumed_)
        throw ConfigError(
            "backward: tape already consumed; reset() before reusing it");
    ensure_grad(loss.impl())[0] += 1.0;
    for (auto it = tape.nodes_.rbegin(); it != tape.nodes_.rend(); ++it) (*it)();
    tape.consumed_ = true;
}

// ---- ops ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_valid(a, "matmul");
    require_valid(b, "matmul");
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul: inner extents differ, " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out({m, n});
    kernels::matmul_nn(a.data(), b.data(), out.data(), m, k, n);
    check_finite(out, "matmul");
    if (tracing({&a, &b})) {
        out.set_requires_grad(true);
        DataPtr ad = a.impl(), bd = b.impl(), od = out.impl();
        g_tape->record([ad, bd, od, m, k, n]() {
            if (od->grad.empty()) return;
            const double* dc = od->grad.data();
            if (ad->requires_grad) {
                std::vector<double> tmp(static_cast<size_t>(m * k));
                kernels::matmul_nt(dc, bd->data.data(), tmp.data(), m, n, k);
                auto& g = ensure_grad(ad);
                for (size_t i = 0; i < tmp.size(); ++i) g[i] += tmp[i];
            }
            if (bd->requires_grad) {
                std::vector<double> tmp(static_cast<size_t>(k * n));
                kernels::matmul_tn(ad->data.data(), dc, tmp.data(), k, m, n);
                auto& g = ensure_grad(bd);
                for (size_t i = 0; i < tmp.size(); ++i) g[i] += tmp[i];
            }
        });
    }
    return out;
}

Tensor transpose(const Tensor& x) {
    require_valid(x, "transpose");
    require_rank2(x, "transpose");
    const int64_t m = x.dim(0), n = x.dim(1);
    Tensor out({n, m});
    const double* src = x.data();
    double* dst = out.data();
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
    if (tracing({&x})) {
        out.set_requires_grad(true);
        DataPtr xd = x.impl(), od = out.impl();
        g_tape->record([xd, od, m, n]() {
            if (od->grad.empty()) return;
            auto& g = ensure_grad(xd);
            const double* dg = od->grad.data();
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) g[i * n + j] += dg[j * m + i];
        });
    }
    return out;
}

namespace {

template <typename Fwd, typename Bwd>
Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* name,
                          Fwd fwd, Bwd bwd) {
    require_valid(a, name);
    require_valid(b, name);
    require_same_shape(a, b, name);
    Tensor out(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
    check_finite(out, name);
    if (tracing({&a, &b})) {
        out.set_requires_grad(true);
        DataPtr ad = a.impl(), bd = b.impl(), od = out.impl();
        g_tape->record([ad, bd, od, bwd]() {
            if (od->grad.empty()) return;
            bwd(ad, bd, od);
        });
    }
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        a, b, "add", [](double x, double y) { return x + y; },
        [](const DataPtr& ad, const DataPtr& bd, const DataPtr& od) {
            const auto& dg = od->grad;
            if (ad->requires_grad) {
                auto& g = ensure_grad(ad);
                for (size_t i = 0; i < g.size(); ++i) g[i] += dg[i];
            }
            if (bd->requires_grad) {
                auto& g = ensure_grad(bd);
                for (size_t i = 0; i < g.size(); ++i) g[i] += dg[i];
            }
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](const DataPtr& ad, const DataPtr& bd, const DataPtr& od) {
            const auto& dg = od->grad;
            if (ad->requires_grad) {
                auto& g = ensure_grad(ad);
                for (size_t i = 0; i < g.size(); ++i) g[i] += dg[i];
            }
            if (bd->requires_grad) {
                auto& g = ensure_grad(bd);
                for (size_t i = 0; i < g.size(); ++i) g[i] -= dg[i];
            }
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](const DataPtr& ad, const DataPtr& bd, const DataPtr& od) {
            const auto& dg = od->grad;
            if (ad->requires_grad) {
                auto& g = ensure_grad(ad);
                for (size_t i = 0; i < g.size(); ++i) g[i] += dg[i] * bd->data[i];
            }
            if (bd->requires_grad) {
                auto& g = ensure_grad(bd);
                for (size_t i = 0; i < g.size(); ++i) g[i] += dg[i] * ad->data[i];
            }
        });
}

Tensor scale(const Tensor& x, double s) {
    require_valid(x, "scale");
    Tensor out(x.shape());
    const double* px = x.data();
    double* po = out.data();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = px[i] * s;
    check_finite(out, "scale");
    if (tracing({&x})) {
        out.set_requires_grad(true);
        DataPtr xd = x.impl(), od = out.impl();
        g_tape->record([xd, od, s]() {
            if (od->grad.empty()) return;
            auto& g = ensure_grad(xd);
            for (size_t i = 0; i < g.size(); ++i) g[i] += s * od->grad[i];
        });
    }
    return out;
}

namespace {

void require_rowvec(const Tensor& x, const Tensor& v, const char* op) {
    require_rank2(x, op);
    if (!((v.rank() == 2 && v.dim(0) == 1 && v.dim(1) == x.dim(1)) ||
          (v.rank() == 1 && v.dim(0) == x.dim(1))))
        throw ShapeError(std::string(op) + ": row vector " +
                         shape_str(v.shape()) + " does not match " +
                         shape_str(x.shape()));
}

}  // namespace

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    require_valid(x, "add_rowvec");
    require_valid(v, "add_rowvec");
    require_rowvec(x, v, "add_rowvec");
    const int64_t t = x.dim(0), d = x.dim(1);
    Tensor out({t, d});
    const double* px = x.data();
    const double* pv = v.data();
    double* po = out.data();
    for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < d; ++j) po[i * d + j] = px[i * d + j] + pv[j];
    check_finite(out, "add_rowvec");
    if (tracing({&x, &v})) {
        out.set_requires_grad(true);
        DataPtr xd = x.impl(), vd = v.impl(), od = out.impl();
        g_tape->record([xd, vd, od, t, d]() {
            if (od->grad.empty()) return;
            const double* dg = od->grad.data();
            if (xd->requires_grad) {
                auto& g = ensure_grad(xd);
                for (size_t i = 0; i < g.size(); ++i) g[i] += dg[i];
            }
            if (vd->requires_grad) {
                auto& g = ensure_grad(vd);
                for (int64_t i = 0; i < t; ++i)
                    for (int64_t j = 0; j < d; ++j) g[j] += dg[i * d + j];
            }
        });
    }
    return out;
}

Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
    require_valid(x, "mul_rowvec");
    require_valid(v, "mul_rowvec");
    require_rowvec(x, v, "mul_rowvec");
    const int64_t t = x.dim(0), d = x.dim(1);
    Tensor out({t, d});
    const double* px = x.data();
    const double* pv = v.data();
    double* po = out.data();
    for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < d; ++j) po[i * d + j] = px[i * d + j] * pv[j];
    check_finite(out, "mul_rowvec");
    if (tracing({&x, &v})) {
        out.set_requires_grad(true);
        DataPtr xd = x.impl(), vd = v.impl(), od = out.impl();
        g_tape->record([xd, vd, od, t, d]() {
            if (od->grad.empty()) return;
            const double* dg = od->grad.data();
            if (xd->requires_grad) {
                auto& g = ensure_grad(xd);
                for (int64_t i = 0; i < t; ++i)
                    for (int64_t j = 0; j < d; ++j)
                        g[i * d + j] += dg[i * d + j] * vd->data[j];
            }
            if (vd->requires_grad) {
                auto& g = ensure_grad(vd);
                for (int64_t i = 0; i < t; ++i)
                    for (int64_t j = 0; j < d; ++j)
                        g[j] += dg[i * d + j] * xd->data[i * d + j];
            }
        });
    }
    return out;
}

Tensor softmax_rows(const Tensor& x) {
    require_valid(x, "softmax_rows");
    require_rank2(x, "softmax_rows");
    const int64_t m = x.dim(0), n = x.dim(1);
    Tensor out({m, n});
    int64_t bad = -1;
    if (!kernels::softmax_rows(x.data(), out.data(), m, n, &bad))
        throw NumericError("softmax_rows: row " + std::to_string(bad) +
                           " is fully masked");
    check_finite(out, "softmax_rows");
    if (tracing({&x})) {
        out.set_requires_grad(true);
        DataPtr xd = x.impl(), od = out.impl();
        g_tape->record([xd, od, m, n]() {
            if (od->grad.empty() || !xd->requires_grad) return;
            auto& g = ensure_grad(xd);
            const double* y = od->data.data();
            const double* dy = od->grad.data();
            for (int64_t i = 0; i < m; ++i) {
                double dot = 0.0;
                for (int64_t j = 0; j < n; ++j)
                    dot += dy[i * n + j] * y[i * n + j];
                for (int64_t j = 0; j < n; ++j)
                    g[i * n + j] += y[i * n + j] * (dy[i * n + j] - dot);
            }
        });
    }
    return out;
}

namespace {

Tensor layer_norm_impl(const Tensor& x, const Tensor* gain, const Tensor* bias,
                       double eps) {
    require_valid(x, "layer_norm");
    if (x.rank() < 1) throw ShapeError("layer_norm: rank must be >= 1");
    const int64_t d = x.dim(static_cast<int>(x.rank() - 1));
    if (d < 2)
        throw ShapeError("layer_norm: last axis must have extent >= 2, got " +
                         shape_str(x.shape()));
    if (eps <= 0.0) throw ConfigError("layer_norm: eps must be positive");
    const int64_t rows = x.numel() / d;
    if (gain && gain->numel() != d)
        throw ShapeError("layer_norm: gain " + shape_str(gain->shape()) +
                         " does not match last axis of " +
                         shape_str(x.shape()));
    if (bias && bias->numel() != d)
        throw ShapeError("layer_norm: bias " + shape_str(bias->shape()) +
                         " does not match last axis of " +
                         shape_str(x.shape()));

    Tensor out(x.shape());
    auto mean = std::make_shared<std::vector<double>>(rows);
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    kernels::layer_norm_rows(x.data(), gain ? gain->data() : nullptr,
                             bias ? bias->data() : nullptr, out.data(),
                             mean->data(), inv_std->data(), rows, d, eps);
    check_finite(out, "layer_norm");

    const bool trace = gain ? tracing({&x, gain, bias})
                            : tracing({&x});
    if (trace) {
        out.set_requires_grad(true);
        DataPtr xd = x.impl(), od = out.impl();
        DataPtr gd = gain ? gain->impl() : nullptr;
        DataPtr bd = bias ? bias->impl() : nullptr;
        g_tape->record([xd, od, gd, bd, mean, inv_std, rows, d]() {
            if (od->grad.empty()) return;
            const double* dy = od->grad.data();
            const double* xp = xd->data.data();
            for (int64_t i = 0; i < rows; ++i) {
                const double mu = (*mean)[i];
                const double r = (*inv_std)[i];
                // dxhat and the two row means needed by the input gradient.
                double m1 = 0.0, m2 = 0.0;
                for (int64_t j = 0; j < d; ++j) {
                    const double xhat = (xp[i * d + j] - mu) * r;
                    const double dxh =
                        dy[i * d + j] * (gd ? gd->data[j] : 1.0);
                    m1 += dxh;
                    m2 += dxh * xhat;
                }
                m1 /= static_cast<double>(d);
                m2 /= static_cast<double>(d);
                if (xd->requires_grad) {
                    auto& g = ensure_grad(xd);
                    for (int64_t j = 0; j < d; ++j) {
                        const double xhat = (xp[i * d + j] - mu) * r;
                        const double dxh =
                            dy[i * d + j] * (gd ? gd->data[j] : 1.0);
                        g[i * d + j] += r * (dxh - m1 - xhat * m2);
                    }
                }
                if (gd && gd->requires_grad) {
                    auto& g = ensure_grad(gd);
                    for (int64_t j = 0; j < d; ++j) {
                        const double xhat = (xp[i * d + j] - mu) * r;
                        g[j] += dy[i * d + j] * xhat;
                    }
                }
                if (bd && bd->requires_grad) {
                    auto& g = ensure_grad(bd);
                    for (int64_t j = 0; j < d; ++j) g[j] += dy[i * d + j];
                }
            }
        });
    }
    return out;
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
    return layer_norm_impl(x, &gain, &bias, eps);
}

Tensor layer_norm(const Tensor& x, double eps) {
    return layer_norm_impl(x, nullptr, nullptr, eps);
}

Tensor gelu(const Tensor& x) {
    require_valid(x, "gelu");
    Tensor out(x.shape());
    kernels::gelu(x.data(), out.data(), x.numel());
    check_finite(out, "gelu");
    if (tracing({&x})) {
        out.set_requires_grad(true);
        DataPtr xd = x.impl(), od = out.impl();
        g_tape->record([xd, od]() {
            if (od->grad.empty() || !xd->requires_grad) return;
            auto& g = ensure_grad(xd);
            kernels::gelu_backward(xd->data.data(), od->grad.data(), g.data(),
                                   static_cast<int64_t>(g.size()));
        });
    }
    return out;
}

Tensor rope_apply(const Tensor& x, const std::vector<double>& positions,
                  double base) {
    require_valid(x, "rope_apply");
    require_rank2(x, "rope_apply");
    const int64_t t = x.dim(0), d = x.dim(1);
    if (d % 2 != 0)
        throw ShapeError("rope_apply: feature dimension must be even, got " +
                         shape_str(x.shape()));
    if (static_cast<int64_t>(positions.size()) != t)
        throw ShapeError("rope_apply: " + std::to_string(positions.size()) +
                         " positions for " + std::to_string(t) + " tokens");
    if (base <= 0.0) throw ConfigError("rope_apply: base must be positive");
    Tensor out({t, d});
    auto pos = std::make_shared<std::vector<double>>(positions);
    kernels::rope_rows(x.data(), pos->data(), out.data(), t, d, base, 1.0);
    check_finite(out, "rope_apply");
    if (tracing({&x})) {
        out.set_requires_grad(true);
        DataPtr xd = x.impl(), od = out.impl();
        g_tape->record([xd, od, pos, t, d, base]() {
            if (od->grad.empty() || !xd->requires_grad) return;
            std::vector<double> tmp(od->grad.size());
            kernels::rope_rows(od->grad.data(), pos->data(), tmp.data(), t, d,
                               base, -1.0);
            auto& g = ensure_grad(xd);
            for (size_t i = 0; i < g.size(); ++i) g[i] += tmp[i];
        });
    }
    return out;
}

namespace {

struct AxisSpan {
    int64_t outer;
    int64_t axis;
    int64_t inner;
};

AxisSpan axis_span(const Shape& s, int axis) {
    AxisSpan sp{1, s[static_cast<size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) sp.outer *= s[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i)
        sp.inner *= s[i];
    return sp;
}

}  // namespace

Tensor concat(const std::vector<Tensor>& xs, int axis) {
    if (xs.empty()) throw ShapeError("concat: empty input list");
    for (const Tensor& t : xs) require_valid(t, "concat");
    const Shape& base = xs[0].shape();
    if (axis < 0 || axis >= static_cast<int>(base.size()))
        throw ShapeError("concat: axis " + std::to_string(axis) +
                         " out of range for " + shape_str(base));
    int64_t axis_total = 0;
    for (const Tensor& t : xs) {
        if (t.rank() != xs[0].rank())
            throw ShapeError("concat: rank mismatch " + shape_str(t.shape()) +
                             " vs " + shape_str(base));
        for (int i = 0; i < static_cast<int>(base.size()); ++i) {
            if (i != axis && t.shape()[static_cast<size_t>(i)] !=
                                 base[static_cast<size_t>(i)])
                throw ShapeError("concat: shape mismatch on non-axis extent, " +
                                 shape_str(t.shape()) + " vs " +
                                 shape_str(base));
        }
        axis_total += t.dim(axis);
    }
    Shape out_shape = base;
    out_shape[static_cast<size_t>(axis)] = axis_total;
    Tensor out(out_shape);
    const AxisSpan sp = axis_span(out_shape, axis);
    double* po = out.data();
    int64_t offset = 0;
    for (const Tensor& t : xs) {
        const int64_t ax = t.dim(axis);
        const double* ps = t.data();
        for (int64_t o = 0; o < sp.outer; ++o) {
            std::memcpy(po + (o * axis_total + offset) * sp.inner,
                        ps + o * ax * sp.inner,
                        static_cast<size_t>(ax * sp.inner) * sizeof(double));
        }
        offset += ax;
    }
    check_finite(out, "concat");
    bool trace = false;
    if (g_tape) {
        for (const Tensor& t : xs)
            if (t.requires_grad()) trace = true;
    }
    if (trace) {
        out.set_requires_grad(true);
        std::vector<DataPtr> ins;
        std::vector<int64_t> sizes;
        for (const Tensor& t : xs) {
            ins.push_back(t.impl());
            sizes.push_back(t.dim(axis));
        }
        DataPtr od = out.impl();
        g_tape->record([ins, sizes, od, sp, axis_total]() {
            if (od->grad.empty()) return;
            const double* dg = od->grad.data();
            int64_t offset = 0;
            for (size_t idx = 0; idx < ins.size(); ++idx) {
                const int64_t ax = sizes[idx];
                if (ins[idx]->requires_grad) {
                    auto& g = ensure_grad(ins[idx]);
                    for (int64_t o = 0; o < sp.outer; ++o) {
                        const double* src =
                            dg + (o * axis_total + offset) * sp.inner;
                        double* dst = g.data() + o * ax * sp.inner;
                        for (int64_t i = 0; i < ax * sp.inner; ++i)
                            dst[i] += src[i];
                    }
                }
                offset += ax;
            }
        });
    }
    return out;
}

std::vector<Tensor> split(const Tensor& x, const std::vector<int64_t>& sizes,
                          int axis) {
    require_valid(x, "split");
    if (axis < 0 || axis >= static_cast<int>(x.rank()))
        throw ShapeError("split: axis " + std::to_string(axis) +
                         " out of range for " + shape_str(x.shape()));
    int64_t total = 0;
    for (int64_t s : sizes) {
        if (s <= 0) throw ShapeError("split: sizes must be positive");
        total += s;
    }
    if (total != x.dim(axis))
        throw ShapeError("split: sizes sum to " + std::to_string(total) +
                         " but axis extent is " + std::to_string(x.dim(axis)));
    const AxisSpan sp = axis_span(x.shape(), axis);
    std::vector<Tensor> outs;
    outs.reserve(sizes.size());
    int64_t offset = 0;
    for (int64_t s : sizes) {
        Shape shp = x.shape();
        shp[static_cast<size_t>(axis)] = s;
        Tensor part(shp);
        double* dst = part.data();
        const double* src = x.data();
        for (int64_t o = 0; o < sp.outer; ++o) {
            std::memcpy(dst + o * s * sp.inner,
                        src + (o * sp.axis + offset) * sp.inner,
                        static_cast<size_t>(s * sp.inner) * sizeof(double));
        }
        outs.push_back(part);
        offset += s;
    }
    if (tracing({&x})) {
        std::vector<DataPtr> outds;
        for (Tensor& t : outs) {
            t.set_requires_grad(true);
            outds.push_back(t.impl());
        }
        DataPtr xd = x.impl();
        std::vector<int64_t> sz = sizes;
        g_tape->record([xd, outds, sz, sp]() {
            if (!xd->requires_grad) return;
            bool any = false;
            for (const DataPtr& od : outds)
                if (!od->grad.empty()) any = true;
            if (!any) return;
            auto& g = ensure_grad(xd);
            int64_t offset = 0;
            for (size_t idx = 0; idx < outds.size(); ++idx) {
                const int64_t s = sz[idx];
                if (!outds[idx]->grad.empty()) {
                    const double* dg = outds[idx]->grad.data();
                    for (int64_t o = 0; o < sp.outer; ++o) {
                        double* dst = g.data() + (o * sp.axis + offset) * sp.inner;
                        const double* src = dg + o * s * sp.inner;
                        for (int64_t i = 0; i < s * sp.inner; ++i)
                            dst[i] += src[i];
                    }
                }
                offset += s;
            }
        });
    }
    return outs;
}

Tensor sum(const Tensor& x) {
    require_valid(x, "sum");
    double acc = 0.0;
    const double* p = x.data();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) acc += p[i];
    Tensor out = Tensor::scalar(acc);
    check_finite(out, "sum");
    if (tracing({&x})) {
        out.set_requires_grad(true);
        DataPtr xd = x.impl(), od = out.impl();
        g_tape->record([xd, od]() {
            if (od->grad.empty() || !xd->requires_grad) return;
            auto& g = ensure_grad(xd);
            const double d = od->grad[0];
            for (double& v : g) v += d;
        });
    }
    return out;
}

Tensor mean_rows(const Tensor& x) {
    require_valid(x, "mean_rows");
    require_rank2(x, "mean_rows");
    const int64_t t = x.dim(0), d = x.dim(1);
    Tensor out({1, d});
    const double* px = x.data();
    double* po = out.data();
    for (int64_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (int64_t i = 0; i < t; ++i) acc += px[i * d + j];
        po[j] = acc / static_cast<double>(t);
    }
    check_finite(out, "mean_rows");
    if (tracing({&x})) {
        out.set_requires_grad(true);
        DataPtr xd = x.impl(), od = out.impl();
        g_tape->record([xd, od, t, d]() {
            if (od->grad.empty() || !xd->requires_grad) return;
            auto& g = ensure_grad(xd);
            const double inv = 1.0 / static_cast<double>(t);
            for (int64_t i = 0; i < t; ++i)
                for (int64_t j = 0; j < d; ++j) g[i * d + j] += od->grad[j] * inv;
        });
    }
    return out;
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    require_valid(table, "embedding");
    require_rank2(table, "embedding");
    if (ids.empty()) throw ShapeError("embedding: empty id list");
    const int64_t v = table.dim(0), d = table.dim(1);
    for (int id : ids) {
        if (id < 0 || id >= v)
            throw ShapeError("embedding: id " + std::to_string(id) +
                             " out of range [0, " + std::to_string(v) + ")");
    }
    const int64_t t = static_cast<int64_t>(ids.size());
    Tensor out({t, d});
    const double* pt = table.data();
    double* po = out.data();
    for (int64_t i = 0; i < t; ++i)
        std::memcpy(po + i * d, pt + static_cast<int64_t>(ids[i]) * d,
                    static_cast<size_t>(d) * sizeof(double));
    check_finite(out, "embedding");
    if (tracing({&table})) {
        out.set_requires_grad(true);
        DataPtr td = table.impl(), od = out.impl();
        auto idv = std::make_shared<std::vector<int>>(ids);
        g_tape->record([td, od, idv, d]() {
            if (od->grad.empty() || !td->requires_grad) return;
            auto& g = ensure_grad(td);
            const double* dg = od->grad.data();
            for (size_t i = 0; i < idv->size(); ++i) {
                double* dst = g.data() + static_cast<int64_t>((*idv)[i]) * d;
                const double* src = dg + static_cast<int64_t>(i) * d;
                for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

}  // namespace nava
