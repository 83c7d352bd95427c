#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "moiie/errors.hpp"

namespace moiie {

// Element type of a tensor. The numeric tag values are also the on-disk
// dtype codes of the checkpoint format.
enum class Dtype : uint8_t { F32 = 0, F64 = 1 };

inline size_t dtype_size(Dtype dt) { return dt == Dtype::F32 ? 4 : 8; }
inline const char* dtype_name(Dtype dt) { return dt == Dtype::F32 ? "f32" : "f64"; }
Dtype dtype_from_name(const std::string& s);

// Dense row-major tensor with an optional gradient buffer of the same
// shape and dtype. Values are expected to stay finite; operations that
// produce tensors run check_finite() on their results.
class Tensor {
  public:
    Tensor() = default;
    Tensor(std::vector<int64_t> shape, Dtype dtype);

    static Tensor zeros(std::vector<int64_t> shape, Dtype dtype);
    static Tensor full(std::vector<int64_t> shape, double value, Dtype dtype);
    static Tensor scalar(double value, Dtype dtype);
    // Builds a tensor from double literals, converting to `dtype`.
    static Tensor from(const std::vector<double>& values, std::vector<int64_t> shape, Dtype dtype);

    const std::vector<int64_t>& shape() const { return shape_; }
    Dtype dtype() const { return dtype_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    int64_t numel() const;
    bool defined() const { return !data_.empty() || numel() == 0; }

    // Rank-2 helpers.
    int64_t rows() const;
    int64_t cols() const;

    template <typename T>
    std::span<T> as() {
        check_access<T>();
        return {reinterpret_cast<T*>(data_.data()), static_cast<size_t>(numel())};
    }
    template <typename T>
    std::span<const T> as() const {
        check_access<T>();
        return {reinterpret_cast<const T*>(data_.data()), static_cast<size_t>(numel())};
    }

    // Reads/writes single elements with conversion through double.
    double at(int64_t flat_index) const;
    void set(int64_t flat_index, double value);
    // Scalar (or single-element) tensor value.
    double item() const;

    // Gradient slot. Absent until ensure_grad() or set via accumulate.
    bool has_grad() const { return !grad_.empty(); }
    void ensure_grad();  // allocates zero-filled grad if absent
    void clear_grad() { grad_.clear(); }
    void zero_grad();  // ensure + fill with zeros
    template <typename T>
    std::span<T> grad_as() {
        check_access<T>();
        if (!has_grad()) throw ShapeError("tensor has no gradient buffer");
        return {reinterpret_cast<T*>(grad_.data()), static_cast<size_t>(numel())};
    }
    template <typename T>
    std::span<const T> grad_as() const {
        check_access<T>();
        if (!has_grad()) throw ShapeError("tensor has no gradient buffer");
        return {reinterpret_cast<const T*>(grad_.data()), static_cast<size_t>(numel())};
    }
    double grad_at(int64_t flat_index) const;

    // Copies values (not grad) into a new tensor of dtype `dt`.
    Tensor to(Dtype dt) const;
    // Copies values to a double vector regardless of dtype.
    std::vector<double> to_doubles() const;

    void fill(double value);
    bool values_equal(const Tensor& other) const;  // bitwise compare of value buffers

    // Throws NumericError naming `what` if any value is NaN or Inf.
    void check_finite(const std::string& what) const;

    std::span<const std::byte> raw() const { return data_; }
    std::span<std::byte> raw() { return data_; }

  private:
    template <typename T>
    void check_access() const {
        constexpr Dtype want = sizeof(T) == 4 ? Dtype::F32 : Dtype::F64;
        if (want != dtype_) throw ShapeError("tensor dtype access mismatch");
    }

    std::vector<int64_t> shape_;
    Dtype dtype_ = Dtype::F64;
    std::vector<std::byte> data_;
    std::vector<std::byte> grad_;  // empty == no grad slot
};

std::string shape_to_string(const std::vector<int64_t>& shape);
void require_same_shape(const Tensor& a, const Tensor& b, const std::string& op);

}  // namespace moiie
