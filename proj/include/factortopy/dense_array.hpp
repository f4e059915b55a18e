// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "factortopy/error.hpp"

namespace factortopy {

/// Row-major dense array, last axis fastest.
///
/// Storage is 32-bit for everything that lives on disk or in a parameter
/// group. Compute paths that need headroom (tapes, finite differences)
/// instantiate `Array<double>`.
template <typename T>
class Array {
public:
    using value_type = T;

    Array() = default;

    explicit Array(std::vector<std::size_t> shape, T fill = T{0})
        : shape_(std::move(shape)), data_(count(shape_), fill) {}

    Array(std::vector<std::size_t> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != count(shape_)) {
            throw InvalidArgument("array data length " + std::to_string(data_.size()) +
                                  " does not match shape volume " +
                                  std::to_string(count(shape_)));
        }
    }

    static std::size_t count(const std::vector<std::size_t>& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                               std::multiplies<>());
    }

    const std::vector<std::size_t>& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> span() noexcept { return data_; }
    std::span<const T> span() const noexcept { return data_; }
    std::vector<T>& values() noexcept { return data_; }
    const std::vector<T>& values() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    T& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * shape_[1] + j]; }
    const T& operator()(std::size_t i, std::size_t j) const noexcept {
        return data_[i * shape_[1] + j];
    }
    T& operator()(std::size_t i, std::size_t j, std::size_t k) noexcept {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    const T& operator()(std::size_t i, std::size_t j, std::size_t k) const noexcept {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    /// Contiguous view of row `i` of a rank-2 array.
    std::span<T> row(std::size_t i) noexcept {
        return {data_.data() + i * shape_[1], shape_[1]};
    }
    std::span<const T> row(std::size_t i) const noexcept {
        return {data_.data() + i * shape_[1], shape_[1]};
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    void reshape(std::vector<std::size_t> shape) {
        if (count(shape) != data_.size()) {
            throw InvalidArgument("reshape changes element count");
        }
        shape_ = std::move(shape);
    }

    bool all_finite() const {
        for (const T& v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    template <typename U>
    Array<U> cast() const {
        return Array<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
    }

    friend bool operator==(const Array& a, const Array& b) = default;

private:
    std::vector<std::size_t> shape_;
    std::vector<T> data_;
};

using DenseArray = Array<float>;
using Matrix = Array<double>;

std::string shape_string(const std::vector<std::size_t>& shape);

}  // namespace factortopy
