#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace usvid {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

/// Frame validity flags (1 = real frame, 0 = padding).
using Mask = std::vector<std::uint8_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

/// Dense row-major tensor with value semantics.
template <class S>
class Tensor {
public:
    using value_type = S;

    Tensor() = default;

    explicit Tensor(Shape shape, S fill = S(0))
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

    Tensor(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != shape_numel(shape_))
            throw Error("tensor: data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_str(shape_));
    }

    static Tensor scalar(S v) { return Tensor(Shape{1}, v); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    S* ptr() noexcept { return data_.data(); }
    const S* ptr() const noexcept { return data_.data(); }
    std::span<S> data() noexcept { return data_; }
    std::span<const S> data() const noexcept { return data_; }
    const std::vector<S>& vec() const noexcept { return data_; }

    S& operator[](std::size_t i) { return data_[i]; }
    const S& operator[](std::size_t i) const { return data_[i]; }

    S item() const {
        if (data_.size() != 1) throw Error("tensor: item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    Tensor reshaped(Shape shape) const& {
        Tensor t = *this;
        t.reshape(std::move(shape));
        return t;
    }
    Tensor reshaped(Shape shape) && {
        reshape(std::move(shape));
        return std::move(*this);
    }
    void reshape(Shape shape) {
        if (shape_numel(shape) != data_.size())
            throw Error("tensor: cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        shape_ = std::move(shape);
    }

    void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

    template <class T>
    Tensor<T> cast() const {
        std::vector<T> out(data_.begin(), data_.end());
        return Tensor<T>(shape_, std::move(out));
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](S v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    std::vector<S> data_;
};

template <class S>
Tensor<S> zeros_like(const Tensor<S>& t) {
    return Tensor<S>(t.shape());
}

}  // namespace usvid
