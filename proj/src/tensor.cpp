#include "moiie/tensor.hpp"

#include <cmath>
#include <sstream>

namespace moiie {

Dtype dtype_from_name(const std::string& s) {
    if (s == "f32" || s == "float32") return Dtype::F32;
    if (s == "f64" || s == "float64") return Dtype::F64;
    throw ConfigError("unknown dtype '" + s + "' (expected f32 or f64)");
}

Tensor::Tensor(std::vector<int64_t> shape, Dtype dtype) : shape_(std::move(shape)), dtype_(dtype) {
    int64_t n = 1;
    for (int64_t d : shape_) {
        if (d < 0) throw ShapeError("negative extent in shape " + shape_to_string(shape_));
        n *= d;
    }
    data_.resize(static_cast<size_t>(n) * dtype_size(dtype_));
}

Tensor Tensor::zeros(std::vector<int64_t> shape, Dtype dtype) {
    return Tensor(std::move(shape), dtype);  // vector<byte> zero-initializes
}

Tensor Tensor::full(std::vector<int64_t> shape, double value, Dtype dtype) {
    Tensor t(std::move(shape), dtype);
    t.fill(value);
    return t;
}

Tensor Tensor::scalar(double value, Dtype dtype) {
    Tensor t(std::vector<int64_t>{}, dtype);
    t.set(0, value);
    return t;
}

Tensor Tensor::from(const std::vector<double>& values, std::vector<int64_t> shape, Dtype dtype) {
    Tensor t(std::move(shape), dtype);
    if (static_cast<int64_t>(values.size()) != t.numel())
        throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape_to_string(t.shape()));
    for (size_t i = 0; i < values.size(); ++i) t.set(static_cast<int64_t>(i), values[i]);
    return t;
}

int64_t Tensor::numel() const {
    int64_t n = 1;
    for (int64_t d : shape_) n *= d;
    return n;
}

int64_t Tensor::rows() const {
    if (rank() != 2) throw ShapeError("rows() on rank-" + std::to_string(rank()) + " tensor");
    return shape_[0];
}

int64_t Tensor::cols() const {
    if (rank() != 2) throw ShapeError("cols() on rank-" + std::to_string(rank()) + " tensor");
    return shape_[1];
}

double Tensor::at(int64_t i) const {
    if (i < 0 || i >= numel()) throw ShapeError("flat index out of range");
    if (dtype_ == Dtype::F32) return static_cast<double>(as<float>()[static_cast<size_t>(i)]);
    return as<double>()[static_cast<size_t>(i)];
}

void Tensor::set(int64_t i, double value) {
    if (i < 0 || i >= numel()) throw ShapeError("flat index out of range");
    if (dtype_ == Dtype::F32)
        as<float>()[static_cast<size_t>(i)] = static_cast<float>(value);
    else
        as<double>()[static_cast<size_t>(i)] = value;
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor with " + std::to_string(numel()) + " elements");
    return at(0);
}

void Tensor::ensure_grad() {
    if (grad_.empty()) grad_.resize(data_.size());
}

void Tensor::zero_grad() {
    grad_.assign(data_.size(), std::byte{0});
}

double Tensor::grad_at(int64_t i) const {
    if (!has_grad()) return 0.0;
    if (i < 0 || i >= numel()) throw ShapeError("flat index out of range");
    if (dtype_ == Dtype::F32) return static_cast<double>(grad_as<float>()[static_cast<size_t>(i)]);
    return grad_as<double>()[static_cast<size_t>(i)];
}

Tensor Tensor::to(Dtype dt) const {
    Tensor out(shape_, dt);
    if (dt == dtype_) {
        std::memcpy(out.data_.data(), data_.data(), data_.size());
        return out;
    }
    const int64_t n = numel();
    for (int64_t i = 0; i < n; ++i) out.set(i, at(i));
    return out;
}

std::vector<double> Tensor::to_doubles() const {
    std::vector<double> out(static_cast<size_t>(numel()));
    if (dtype_ == Dtype::F64) {
        auto s = as<double>();
        out.assign(s.begin(), s.end());
    } else {
        auto s = as<float>();
        for (size_t i = 0; i < s.size(); ++i) out[i] = static_cast<double>(s[i]);
    }
    return out;
}

void Tensor::fill(double value) {
    const int64_t n = numel();
    if (dtype_ == Dtype::F32) {
        auto s = as<float>();
        const float v = static_cast<float>(value);
        for (int64_t i = 0; i < n; ++i) s[static_cast<size_t>(i)] = v;
    } else {
        auto s = as<double>();
        for (int64_t i = 0; i < n; ++i) s[static_cast<size_t>(i)] = value;
    }
}

bool Tensor::values_equal(const Tensor& other) const {
    return dtype_ == other.dtype_ && shape_ == other.shape_ &&
           std::memcmp(data_.data(), other.data_.data(), data_.size()) == 0;
}

void Tensor::check_finite(const std::string& what) const {
    bool ok = true;
    if (dtype_ == Dtype::F32) {
        for (float v : as<float>())
            if (!std::isfinite(v)) {
                ok = false;
                break;
            }
    } else {
        for (double v : as<double>())
            if (!std::isfinite(v)) {
                ok = false;
                break;
            }
    }
    if (!ok) throw NumericError("non-finite values in " + what);
}

std::string shape_to_string(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

void require_same_shape(const Tensor& a, const Tensor& b, const std::string& op) {
    if (a.shape() != b.shape())
        throw ShapeError(op + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
    if (a.dtype() != b.dtype()) throw ShapeError(op + ": dtype mismatch");
}

}  // namespace moiie
