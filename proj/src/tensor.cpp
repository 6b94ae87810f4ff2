#include "gwmoe/tensor.hpp"

#include <cmath>
#include <sstream>

#include "gwmoe/errors.hpp"

namespace gwmoe {

namespace {
thread_local bool t_checked = false;
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<detail::TensorImpl>()) {
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<detail::TensorImpl>()) {
    if (shape_numel(shape) != values.size())
        throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> values;
    values.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw DimensionError("ragged matrix literal");
        values.insert(values.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(values));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
}

detail::TensorImpl& Tensor::impl() {
    if (!impl_) throw ContractError("use of an undefined tensor");
    return *impl_;
}

const detail::TensorImpl& Tensor::impl() const {
    if (!impl_) throw ContractError("use of an undefined tensor");
    return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size())
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
    return s[axis];
}

double Tensor::item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return impl().data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
    auto& t = impl();
    t.requires_grad = on;
    if (on && t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
    if (!on) t.grad.clear();
    return *this;
}

std::span<double> Tensor::grad_mut() const {
    if (!impl_) throw ContractError("use of an undefined tensor");
    auto& t = *impl_;
    if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
    return t.grad;
}

void Tensor::zero_grad() const {
    if (!impl_) throw ContractError("use of an undefined tensor");
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
    Tensor out;
    out.impl_ = std::make_shared<detail::TensorImpl>(impl());
    return out;
}

Tensor Tensor::detach() const { return Tensor(shape(), impl().data); }

void set_checked_mode(bool on) { t_checked = on; }
bool checked_mode() { return t_checked; }

void require_finite(std::span<const double> values, const char* what) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i]))
            throw NumericError(std::string(what) + ": non-finite value at flat index " + std::to_string(i));
    }
}

}  // namespace gwmoe
