#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "echocss/error.hpp"

namespace echocss::nn {

/// Dense float32 tensor in NCHW order.
///
/// Every activation in the networks is 4-d: frames of a clip travel as the
/// N axis, per-frame vectors as [N, C, 1, 1].
class Tensor {
 public:
  Tensor() = default;
  Tensor(int n, int c, int h, int w, float fill = 0.0f)
      : n_(n), c_(c), h_(h), w_(w), data_(static_cast<std::size_t>(n) * c * h * w, fill) {
    detail::require(n >= 0 && c >= 0 && h >= 0 && w >= 0, "Tensor: negative dimension");
  }

  int n() const { return n_; }
  int c() const { return c_; }
  int h() const { return h_; }
  int w() const { return w_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t sample_size() const { return static_cast<std::size_t>(c_) * h_ * w_; }
  std::size_t plane() const { return static_cast<std::size_t>(h_) * w_; }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }

  float* sample(int i) { return data_.data() + static_cast<std::size_t>(i) * sample_size(); }
  const float* sample(int i) const {
    return data_.data() + static_cast<std::size_t>(i) * sample_size();
  }

  float& operator()(int n, int c, int h, int w) {
    return data_[((static_cast<std::size_t>(n) * c_ + c) * h_ + h) * w_ + w];
  }
  float operator()(int n, int c, int h, int w) const {
    return data_[((static_cast<std::size_t>(n) * c_ + c) * h_ + h) * w_ + w];
  }
  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  bool same_shape(const Tensor& o) const {
    return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
  }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    detail::require(same_shape(o), "Tensor +=: shape mismatch " + shape_string() + " vs " +
                                       o.shape_string());
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  /// Same storage viewed with a different shape of equal volume.
  Tensor reshaped(int n, int c, int h, int w) const {
    detail::require(static_cast<std::size_t>(n) * c * h * w == data_.size(),
                    "Tensor::reshaped: volume mismatch");
    Tensor t = *this;
    t.n_ = n;
    t.c_ = c;
    t.h_ = h;
    t.w_ = w;
    return t;
  }

  std::string shape_string() const {
    std::ostringstream os;
    os << '[' << n_ << 'x' << c_ << 'x' << h_ << 'x' << w_ << ']';
    return os.str();
  }

  bool operator==(const Tensor& o) const = default;

 private:
  int n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  // Eigen's vectorised products peel differently depending on the base
  // address, so a fixed alignment keeps results bit-identical across runs.
  std::vector<float, Eigen::aligned_allocator<float>> data_;
};

/// Channel concatenation of two tensors with equal N, H, W.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  detail::require(a.n() == b.n() && a.h() == b.h() && a.w() == b.w(),
                  "concat_channels: shape mismatch " + a.shape_string() + " vs " +
                      b.shape_string());
  Tensor out(a.n(), a.c() + b.c(), a.h(), a.w());
  for (int i = 0; i < a.n(); ++i) {
    std::copy_n(a.sample(i), a.sample_size(), out.sample(i));
    std::copy_n(b.sample(i), b.sample_size(), out.sample(i) + a.sample_size());
  }
  return out;
}

/// Inverse of concat_channels for gradients: splits off the first `ca` channels.
inline std::pair<Tensor, Tensor> split_channels(const Tensor& t, int ca) {
  detail::require(ca >= 0 && ca <= t.c(), "split_channels: bad split");
  Tensor a(t.n(), ca, t.h(), t.w());
  Tensor b(t.n(), t.c() - ca, t.h(), t.w());
  for (int i = 0; i < t.n(); ++i) {
    std::copy_n(t.sample(i), a.sample_size(), a.sample(i));
    std::copy_n(t.sample(i) + a.sample_size(), b.sample_size(), b.sample(i));
  }
  return {std::move(a), std::move(b)};
}

}  // namespace echocss::nn
