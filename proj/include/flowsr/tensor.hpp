#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "flowsr/errors.hpp"

namespace flowsr {

/// Dense N-dimensional array of doubles, row-major with the last axis
/// fastest. Copies are shallow: they share the underlying buffer, so a
/// Tensor behaves like a cheap value handle. Use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int64_t> shape, double fill = 0.0);

    static Tensor from_data(std::vector<int64_t> shape, std::vector<double> data);
    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape), 0.0); }
    static Tensor full(std::vector<int64_t> shape, double v) { return Tensor(std::move(shape), v); }
    static Tensor scalar(double v) { return Tensor({1}, v); }

    bool defined() const { return static_cast<bool>(data_); }
    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
    int64_t numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }
    int64_t dim(int64_t i) const;
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    double* data() { return data_->data(); }
    const double* data() const { return data_->data(); }
    std::vector<double>& vec() { return *data_; }
    const std::vector<double>& vec() const { return *data_; }

    /// Value of a single-element tensor.
    double item() const;

    bool requires_grad() const { return requires_grad_; }
    Tensor& set_requires_grad(bool v) {
        requires_grad_ = v;
        return *this;
    }

    /// Buffer identity; used as the gradient-accumulator key.
    const void* id() const { return data_.get(); }

    Tensor clone() const;

    // Element access for the common [B,C,H,W] layout.
    double& at4(int64_t b, int64_t c, int64_t y, int64_t x) {
        return (*data_)[offset4(b, c, y, x)];
    }
    double at4(int64_t b, int64_t c, int64_t y, int64_t x) const {
        return (*data_)[offset4(b, c, y, x)];
    }
    int64_t offset4(int64_t b, int64_t c, int64_t y, int64_t x) const {
        return ((b * shape_[1] + c) * shape_[2] + y) * shape_[3] + x;
    }

private:
    std::vector<int64_t> shape_;
    std::shared_ptr<std::vector<double>> data_;
    bool requires_grad_ = false;
};

int64_t shape_numel(const std::vector<int64_t>& shape);
std::string shape_str(const std::vector<int64_t>& shape);

/// Throws ShapeError unless both operands have identical shapes.
void check_same_shape(const Tensor& a, const Tensor& b, const char* op);

}  // namespace flowsr
