#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace gwmoe {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first needed
    bool requires_grad = false;
};
}  // namespace detail

/// Dense row-major tensor of doubles with an optional gradient buffer.
///
/// Tensor is a shared handle: copies alias the same storage, which is what
/// lets the autodiff tape refer back to operands. Use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
    static Tensor vector(std::initializer_list<double> values);

    bool defined() const noexcept { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const { return impl().data.size(); }
    std::size_t rows() const { return dim(0); }
    std::size_t cols() const { return dim(1); }

    std::span<double> data() { return impl().data; }
    std::span<const double> data() const { return impl().data; }
    double& operator[](std::size_t i) { return impl().data[i]; }
    double operator[](std::size_t i) const { return impl().data[i]; }
    double& at(std::size_t r, std::size_t c) { return impl().data[r * impl().shape[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return impl().data[r * impl().shape[1] + c]; }
    double item() const;

    bool requires_grad() const noexcept { return impl_ && impl_->requires_grad; }
    /// Marks a leaf as trainable and allocates a zeroed gradient buffer.
    Tensor& set_requires_grad(bool on = true);
    bool has_grad() const noexcept { return impl_ && !impl_->grad.empty(); }
    std::span<const double> grad() const { return impl().grad; }
    /// Gradient buffer, allocated (zeroed) on first use.
    std::span<double> grad_mut() const;
    void zero_grad() const;

    Tensor clone() const;
    /// Deep copy of the values with no gradient tracking.
    Tensor detach() const;

    bool same_as(const Tensor& other) const noexcept { return impl_ == other.impl_; }
    const void* id() const noexcept { return impl_.get(); }

    // Internal: flag an op result as differentiable without allocating grad.
    void mark_differentiable() { impl().requires_grad = true; }

private:
    detail::TensorImpl& impl();
    const detail::TensorImpl& impl() const;

    std::shared_ptr<detail::TensorImpl> impl_;
};

/// When enabled, every op output is scanned for NaN/Inf (thread-local flag).
void set_checked_mode(bool on);
bool checked_mode();

/// Throws NumericError naming `what` if any element is non-finite.
void require_finite(std::span<const double> values, const char* what);

}  // namespace gwmoe
