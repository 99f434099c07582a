#include "cda/tensor.hpp"

#include <cmath>
#include <stdexcept>

namespace cda {

std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    out += ")";
    return out;
}

size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
}

static void validate_shape(const Shape& s) {
    if (s.empty()) throw std::invalid_argument("tensor shape must have at least one dimension");
    for (size_t d : s) {
        if (d == 0) throw std::invalid_argument("tensor shape dimensions must be >= 1, got " + shape_str(s));
    }
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(shape_numel(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (data_.size() != shape_numel(shape_)) {
        throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                    " does not match shape " + shape_str(shape_));
    }
}

Tensor::Tensor(Shape shape, std::initializer_list<double> data)
    : Tensor(std::move(shape), std::vector<double>(data)) {}

Tensor Tensor::full(Shape shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = rng.uniform(lo, hi);
    return t;
}

Tensor Tensor::normal(Shape shape, Rng& rng, double mean, double stddev) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = mean + stddev * rng.normal();
    return t;
}

double Tensor::scalar_value() const {
    if (data_.size() != 1) throw std::logic_error("scalar_value on tensor of shape " + shape_str(shape_));
    return data_[0];
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
        throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                                    " changes element count");
    }
    return Tensor(std::move(shape), data_);
}

} // namespace cda
