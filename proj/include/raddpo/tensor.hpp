#pragma once

#include <cstddef>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace raddpo::ad {

// Dense row-major double tensor with value semantics. Storage is shared on
// copy; op outputs are never mutated after creation, so sharing is safe.
// node() is a handle into the Tape that recorded the tensor, or -1 when the
// tensor is detached (constants, inference-mode outputs, stop_gradient).
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<size_t> shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(count(shape_), 0.0)) {}

    Tensor(std::vector<size_t> shape, std::vector<double> values)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(std::move(values))) {
        if (data_->size() != count(shape_)) {
            throw std::invalid_argument("Tensor: data length does not match shape");
        }
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor full(std::vector<size_t> shape, double v) {
        Tensor t(std::move(shape));
        for (double& x : t.values()) x = v;
        return t;
    }

    static Tensor randn(std::vector<size_t> shape, std::mt19937_64& rng, double stddev = 1.0) {
        Tensor t(std::move(shape));
        std::normal_distribution<double> nd(0.0, stddev);
        for (double& x : t.values()) x = nd(rng);
        return t;
    }

    const std::vector<size_t>& shape() const { return shape_; }
    size_t ndim() const { return shape_.size(); }
    size_t size() const { return data_ ? data_->size() : 0; }
    size_t dim(size_t i) const { return shape_.at(i); }

    bool is_scalar() const { return size() == 1; }
    double scalar_value() const {
        if (!is_scalar()) throw std::invalid_argument("Tensor: not a scalar");
        return (*data_)[0];
    }

    double* data() { return data_->data(); }
    const double* data() const { return data_->data(); }
    std::vector<double>& values() { return *data_; }
    const std::vector<double>& values() const { return *data_; }

    double at(size_t i) const { return (*data_)[i]; }
    double& at(size_t i) { return (*data_)[i]; }

    int node() const { return node_; }
    void set_node(int n) { node_ = n; }
    bool tracked() const { return node_ >= 0; }

    // Value-identical view with no tape handle. Shares storage, so the
    // forward value is bitwise-equal by construction.
    Tensor detached() const {
        Tensor t = *this;
        t.node_ = -1;
        return t;
    }

    // Deep copy of the values (fresh storage, detached).
    Tensor clone() const {
        Tensor t(shape_, *data_);
        return t;
    }

    static size_t count(const std::vector<size_t>& shape) {
        size_t n = 1;
        for (size_t d : shape) {
            if (d == 0) throw std::invalid_argument("Tensor: zero extent in shape");
            n *= d;
        }
        return n;
    }

private:
    std::vector<size_t> shape_;
    std::shared_ptr<std::vector<double>> data_;
    int node_ = -1;
};

} // namespace raddpo::ad
