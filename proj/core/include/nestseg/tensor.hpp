#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace nestseg {

// 64-byte-aligned allocator: keeps SIMD kernels on one code path regardless
// of where the heap hands out the buffer, so runs are bitwise reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kAlign}));
  }
  void deallocate(T* p, std::size_t) {
    ::operator delete(p, std::align_val_t{kAlign});
  }
  bool operator==(const AlignedAllocator&) const { return true; }
};

// Dense row-major double tensor. The buffer is shared so reshapes are free;
// shapes are always contiguous (no strides, no offsets).
class Tensor {
 public:
  using Buffer = std::vector<double, AlignedAllocator<double>>;

  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape)
      : shape_(std::move(shape)),
        buf_(std::make_shared<Buffer>(count(shape_), 0.0)) {}

  Tensor(std::vector<int64_t> shape, std::vector<double> values)
      : shape_(std::move(shape)),
        buf_(std::make_shared<Buffer>(values.begin(), values.end())) {
    if (static_cast<int64_t>(buf_->size()) != count(shape_))
      throw std::invalid_argument("Tensor: value count does not match shape");
  }

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int64_t> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.buf_->begin(), t.buf_->end(), v);
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  // Concatenates along dim 0; trailing dims must match.
  static Tensor concat_dim0(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_dim0: empty");
    std::vector<int64_t> shape = parts[0].shape();
    for (size_t i = 1; i < parts.size(); ++i) {
      const auto& s = parts[i].shape();
      if (s.size() != shape.size() ||
          !std::equal(s.begin() + 1, s.end(), shape.begin() + 1))
        throw std::invalid_argument("concat_dim0: trailing dims differ");
      shape[0] += s[0];
    }
    Tensor out(std::move(shape));
    int64_t off = 0;
    for (const auto& p : parts) {
      std::copy(p.data(), p.data() + p.numel(), out.data() + off);
      off += p.numel();
    }
    return out;
  }

  bool defined() const { return buf_ != nullptr; }
  int64_t numel() const { return buf_ ? static_cast<int64_t>(buf_->size()) : 0; }
  int rank() const { return static_cast<int>(shape_.size()); }
  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t dim(int i) const { return shape_.at(i); }

  double* data() { return buf_->data(); }
  const double* data() const { return buf_->data(); }
  double& operator[](int64_t i) { return (*buf_)[i]; }
  double operator[](int64_t i) const { return (*buf_)[i]; }

  // Shares the underlying buffer.
  Tensor reshaped(std::vector<int64_t> shape) const {
    if (count(shape) != numel())
      throw std::invalid_argument("Tensor::reshaped: element count mismatch");
    Tensor t;
    t.shape_ = std::move(shape);
    t.buf_ = buf_;
    return t;
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.buf_ = std::make_shared<Buffer>(*buf_);
    return t;
  }

  void fill(double v) { std::fill(buf_->begin(), buf_->end(), v); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  static int64_t count(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dim");
      n *= d;
    }
    return n;
  }

  std::string shape_str() const {
    std::string s = "(";
    for (size_t i = 0; i < shape_.size(); ++i)
      s += (i ? "," : "") + std::to_string(shape_[i]);
    return s + ")";
  }

 private:
  std::vector<int64_t> shape_;
  std::shared_ptr<Buffer> buf_;
};

}  // namespace nestseg
