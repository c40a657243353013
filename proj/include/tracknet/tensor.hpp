#pragma once

#include <cstddef>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "tracknet/errors.hpp"

namespace tracknet {

/// Cache-line aligned storage. Vectorised reductions peel to the first
/// aligned element, so a fixed base alignment keeps results bit-stable
/// from one allocation to the next.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

/// Dense NCHW activation tensor.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(int n, int c, int h, int w, T fill = T(0))
      : n_(n), c_(c), h_(h), w_(w),
        data_(static_cast<std::size_t>(n) * c * h * w, fill) {
    if (n < 0 || c < 0 || h < 0 || w < 0) throw DimensionError("negative tensor extent");
  }

  int batch() const noexcept { return n_; }
  int channels() const noexcept { return c_; }
  int height() const noexcept { return h_; }
  int width() const noexcept { return w_; }
  std::size_t plane() const noexcept { return static_cast<std::size_t>(h_) * w_; }
  std::size_t sample_size() const noexcept { return plane() * c_; }
  std::size_t size() const noexcept { return data_.size(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  T* sample(int n) noexcept { return data_.data() + n * sample_size(); }
  const T* sample(int n) const noexcept { return data_.data() + n * sample_size(); }
  T* channel(int n, int c) noexcept { return sample(n) + c * plane(); }
  const T* channel(int n, int c) const noexcept { return sample(n) + c * plane(); }

  T& operator()(int n, int c, int y, int x) noexcept {
    return data_[((static_cast<std::size_t>(n) * c_ + c) * h_ + y) * w_ + x];
  }
  const T& operator()(int n, int c, int y, int x) const noexcept {
    return data_[((static_cast<std::size_t>(n) * c_ + c) * h_ + y) * w_ + x];
  }

  bool same_shape(const Tensor& o) const noexcept {
    return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
  }

  std::string shape_string() const {
    return std::to_string(n_) + "x" + std::to_string(c_) + "x" + std::to_string(h_) + "x" +
           std::to_string(w_);
  }

 private:
  int n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  std::vector<T, AlignedAllocator<T>> data_;
};

}  // namespace tracknet
