#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace msfs {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class GeometryError : public Error {
public:
    using Error::Error;
};

class InvalidInputError : public Error {
public:
    using Error::Error;
};

class NumericalError : public Error {
public:
    using Error::Error;
};

class CheckpointError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array. Rank-3 tensors are feature maps laid out H x W x C
/// with channels innermost, so a pixel's channel vector is contiguous.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0))
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != shape_numel(shape_))
            throw InvalidInputError("tensor data size " + std::to_string(data_.size()) +
                                    " does not match shape " + shape_string(shape_));
    }

    static Tensor feature_map(std::size_t h, std::size_t w, std::size_t c, T fill = T(0)) {
        return Tensor({h, w, c}, fill);
    }

    static Tensor scalar(T v) { return Tensor({1}, v); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }

    // Feature-map accessors; only meaningful for rank-3 tensors.
    std::size_t height() const { return shape_.at(0); }
    std::size_t width() const { return shape_.at(1); }
    std::size_t channels() const { return shape_.at(2); }
    std::size_t pixels() const { return shape_.at(0) * shape_.at(1); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    T& at(std::size_t h, std::size_t w, std::size_t c) {
        return data_[(h * shape_[1] + w) * shape_[2] + c];
    }
    const T& at(std::size_t h, std::size_t w, std::size_t c) const {
        return data_[(h * shape_[1] + w) * shape_[2] + c];
    }

    T* pixel(std::size_t h, std::size_t w) { return data_.data() + (h * shape_[1] + w) * shape_[2]; }
    const T* pixel(std::size_t h, std::size_t w) const {
        return data_.data() + (h * shape_[1] + w) * shape_[2];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor reshaped(Shape s) const& {
        Tensor out = *this;
        out.reshape(std::move(s));
        return out;
    }

    void reshape(Shape s) {
        if (shape_numel(s) != data_.size())
            throw InvalidInputError("cannot reshape " + shape_string(shape_) + " to " + shape_string(s));
        shape_ = std::move(s);
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return Tensor<U>(shape_, std::move(out));
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    std::vector<T> data_;
};

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw InvalidInputError("shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    T m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<T>(std::abs(a[i] - b[i])));
    return m;
}

inline void require_feature_map(const Shape& s, const char* what) {
    if (s.size() != 3 || s[0] == 0 || s[1] == 0 || s[2] == 0)
        throw InvalidInputError(std::string(what) + ": expected a non-empty HxWxC feature map, got " +
                                shape_string(s));
}

} // namespace msfs
