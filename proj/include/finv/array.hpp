#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <new>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace finv {

/// 64-byte-aligned allocator. Keeping every buffer on the same alignment
/// makes Eigen's vectorized kernels take identical code paths for identical
/// shapes, which keeps results bit-stable across runs and thread counts.
template <typename T>
struct AlignedAlloc {
    using value_type = T;
    static constexpr std::size_t alignment = 64;
    AlignedAlloc() = default;
    template <typename U>
    AlignedAlloc(const AlignedAlloc<U>&) {}
    T* allocate(std::size_t n) {
        void* p = ::operator new(n * sizeof(T), std::align_val_t(alignment));
        return static_cast<T*>(p);
    }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t(alignment)); }
    bool operator==(const AlignedAlloc&) const { return true; }
    bool operator!=(const AlignedAlloc&) const { return false; }
};

using DoubleVec = std::vector<double, AlignedAlloc<double>>;

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

/// Dense multi-dimensional array of doubles. Rank 0 (empty shape) is a
/// scalar; a default-constructed Array is empty with shape [0].
class Array {
public:
    Array() : shape_{0} {}
    explicit Array(Shape shape) : shape_(std::move(shape)), data_(numel(shape_), 0.0) {}
    Array(Shape shape, DoubleVec data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<int64_t>(data_.size()) != numel(shape_))
            throw std::invalid_argument("Array: data size " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_str(shape_));
    }
    Array(Shape shape, const std::vector<double>& data)
        : Array(std::move(shape), DoubleVec(data.begin(), data.end())) {}
    Array(Shape shape, std::initializer_list<double> data)
        : Array(std::move(shape), DoubleVec(data.begin(), data.end())) {}

    static Array scalar(double v) {
        Array a{Shape{}};
        a.data_[0] = v;
        return a;
    }
    static Array full(Shape shape, double v) {
        Array a{std::move(shape)};
        std::fill(a.data_.begin(), a.data_.end(), v);
        return a;
    }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    /// Scalar value; valid only for size-1 arrays.
    double value() const {
        if (size() != 1) throw std::logic_error("Array::value on non-scalar " + shape_str(shape_));
        return data_[0];
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    /// In-place reshape; total element count must be preserved.
    void reshape(Shape s) {
        if (numel(s) != size())
            throw std::invalid_argument("reshape: numel mismatch " + shape_str(shape_) + " -> " + shape_str(s));
        shape_ = std::move(s);
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    DoubleVec& vec() { return data_; }
    const DoubleVec& vec() const { return data_; }

private:
    Shape shape_;
    DoubleVec data_;
};

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

}  // namespace finv
