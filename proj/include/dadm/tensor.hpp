#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <utility>
#include <span>
#include <string>
#include <vector>

namespace dadm {

using Shape = std::vector<std::size_t>;

/// Leaves elements default-initialized (indeterminate for double) on resize,
/// so freshly allocated outputs are not zero-filled before being overwritten.
template <class T>
struct DefaultInitAllocator : std::allocator<T> {
    template <class U>
    struct rebind {
        using other = DefaultInitAllocator<U>;
    };
    using std::allocator<T>::allocator;
    template <class U>
    void construct(U* p) noexcept {
        ::new (static_cast<void*>(p)) U;
    }
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles with value semantics.
///
/// Invariant: shape_size(shape()) == data().size(). A rank-0 tensor holds a
/// single element. No implicit broadcasting exists anywhere; operations that
/// combine differently shaped operands are named for the alignment they do.
class Tensor {
public:
    Tensor() : shape_{}, data_(1, 0.0) {}
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    /// Storage left unset; the caller must write every element.
    static Tensor uninitialized(Shape shape);
    static Tensor scalar(double value);
    static Tensor from(std::initializer_list<double> values);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t dim(std::size_t axis) const;

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    double* ptr() { return data_.data(); }
    const double* ptr() const { return data_.data(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    /// The single element of a size-1 tensor.
    double item() const;

    Tensor reshaped(Shape shape) const&;
    Tensor reshaped(Shape shape) &&;

    void fill(double value);
    bool all_finite() const;

    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    std::vector<double, DefaultInitAllocator<double>> data_;
};

}  // namespace dadm
