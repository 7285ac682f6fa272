#include "flowsr/tensor.hpp"

#include <sstream>

namespace flowsr {

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor::Tensor(std::vector<int64_t> shape, double fill) : shape_(std::move(shape)) {
    int64_t n = shape_numel(shape_);
    data_ = std::make_shared<std::vector<double>>(static_cast<size_t>(n), fill);
}

Tensor Tensor::from_data(std::vector<int64_t> shape, std::vector<double> data) {
    int64_t n = shape_numel(shape);
    if (n != static_cast<int64_t>(data.size())) {
        throw ShapeError("from_data: shape " + shape_str(shape) + " needs " + std::to_string(n) +
                         " values, got " + std::to_string(data.size()));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<double>>(std::move(data));
    return t;
}

int64_t Tensor::dim(int64_t i) const {
    if (i < 0 || i >= ndim()) {
        throw ShapeError("dim index " + std::to_string(i) + " out of range for " + shape_str(shape_));
    }
    return shape_[static_cast<size_t>(i)];
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() requires a single-element tensor, got " + shape_str(shape_));
    return (*data_)[0];
}

Tensor Tensor::clone() const {
    if (!defined()) return Tensor();
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<double>>(*data_);
    return t;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

}  // namespace flowsr
