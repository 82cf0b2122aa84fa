#include "dadm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dadm/errors.hpp"
#include "dadm/kernels.hpp"

namespace dadm {

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ')';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
    for (auto d : shape_)
        if (d == 0) throw ShapeError("Tensor: zero-length axis in " + shape_str(shape_));
    data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    for (auto d : shape_)
        if (d == 0) throw ShapeError("Tensor: zero-length axis in " + shape_str(shape_));
    if (shape_size(shape_) != data_.size())
        throw ShapeError("Tensor: shape " + shape_str(shape_) + " does not match " +
                         std::to_string(data_.size()) + " elements");
}

Tensor Tensor::uninitialized(Shape shape) {
    Tensor t;
    for (auto d : shape)
        if (d == 0) throw ShapeError("Tensor: zero-length axis in " + shape_str(shape));
    t.data_.resize(shape_size(shape));
    t.shape_ = std::move(shape);
    return t;
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::from(std::initializer_list<double> values) {
    return Tensor(Shape{values.size()}, std::vector<double>(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size())
        throw ShapeError("Tensor::dim: axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
    return shape_[axis];
}

double Tensor::item() const {
    if (data_.size() != 1) throw ShapeError("Tensor::item: tensor has shape " + shape_str(shape_));
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const& {
    Tensor t = *this;
    return std::move(t).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
    if (shape_size(shape) != data_.size())
        throw ShapeError("Tensor: shape " + shape_str(shape) + " does not match " + std::to_string(data_.size()) +
                         " elements");
    for (auto d : shape)
        if (d == 0) throw ShapeError("Tensor: zero-length axis in " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data_);
    return t;
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const { return kernels::active().all_finite(data_.data(), data_.size()); }

}  // namespace dadm
