#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "nava/errors.hpp"
#include "nava/rng.hpp"

namespace nava {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);

namespace detail {
struct TensorData {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until first accumulation
};
}  // namespace detail

// Dense f64 tensor, row-major, shared-handle semantics. Values are
// immutable once produced by an op; leaf tensors (parameters) are mutated
// in place only between training steps.
class Tensor {
 public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
    static Tensor full(Shape shape, double v) {
        return Tensor(std::move(shape), v);
    }
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);

    bool valid() const { return d_ != nullptr; }
    const Shape& shape() const { return d_->shape; }
    int64_t rank() const { return static_cast<int64_t>(d_->shape.size()); }
    int64_t dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(d_->data.size()); }
    bool is_scalar() const { return valid() && numel() == 1; }

    double* data() { return d_->data.data(); }
    const double* data() const { return d_->data.data(); }
    std::vector<double>& values() { return d_->data; }
    const std::vector<double>& values() const { return d_->data; }
    double item() const;
    double at(int64_t i) const { return d_->data[static_cast<size_t>(i)]; }
    double at(int64_t i, int64_t j) const {
        return d_->data[static_cast<size_t>(i * dim(1) + j)];
    }

    bool requires_grad() const { return d_->requires_grad; }
    Tensor& set_requires_grad(bool on) {
        d_->requires_grad = on;
        return *this;
    }
    bool has_grad() const { return !d_->grad.empty(); }
    std::vector<double>& grad();        // allocates zeros on first use
    const std::vector<double>& grad() const;
    void zero_grad() { d_->grad.clear(); }

    // Identity of the underlying buffer (used by tests and the optimizer).
    const void* id() const { return d_.get(); }
    Tensor clone() const;

    std::shared_ptr<detail::TensorData> impl() const { return d_; }

 private:
    std::shared_ptr<detail::TensorData> d_;
};

// Recorded backward program for one forward computation. Ops append nodes
// while a TapeScope is active; backward() replays them once in reverse.
class Tape {
 public:
    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
    size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }
    void reset() {
        nodes_.clear();
        consumed_ = false;
    }

    friend void backward(const Tensor& loss, Tape& tape);

 private:
    std::vector<std::function<void()>> nodes_;
    bool consumed_ = false;
};

// Binds a tape as the thread-local recording target.
class TapeScope {
 public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

 private:
    Tape* prev_;
};

Tape* active_tape();

// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse, accumulating
// gradients into every tensor on the loss's ancestry. Running backward
// twice on the same tape without reset() is an error.
void backward(const Tensor& loss, Tape& tape);

// ---- ops ----------------------------------------------------------------
// Every op validates shapes, checks the output for NaN/Inf, and records its
// backward rule when a tape is active and some input requires grad.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_rowvec(const Tensor& x, const Tensor& v);  // x[T x D] + v[1 x D]
Tensor mul_rowvec(const Tensor& x, const Tensor& v);  // x[T x D] * v[1 x D]
Tensor softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
Tensor layer_norm(const Tensor& x, double eps = 1e-5);  // identity affine
Tensor gelu(const Tensor& x);
Tensor rope_apply(const Tensor& x, const std::vector<double>& positions,
                  double base = 10000.0);
Tensor concat(const std::vector<Tensor>& xs, int axis);
std::vector<Tensor> split(const Tensor& x, const std::vector<int64_t>& sizes,
                          int axis);
Tensor sum(const Tensor& x);                   // scalar
Tensor mean_rows(const Tensor& x);             // [T x D] -> [1 x D]
Tensor embedding(const Tensor& table, const std::vector<int>& ids);

// Additive mask constant: 0 where keep, -1e9 where masked.
constexpr double kAttnMaskValue = -1e9;

}  // namespace nava
