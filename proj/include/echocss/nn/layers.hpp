#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "echocss/nn/tensor.hpp"
#include "echocss/rng.hpp"

namespace echocss::nn {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<Eigen::VectorXf>;
using ConstMapVec = Eigen::Map<const Eigen::VectorXf>;

/// Trainable tensor with its gradient accumulator and optimizer slot.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor velocity;

  Param() = default;
  Param(std::string n, int a, int b, int c, int d)
      : name(std::move(n)), value(a, b, c, d), grad(a, b, c, d), velocity(a, b, c, d) {}
};

using ParamList = std::vector<Param*>;

inline void he_init(Param& p, int fan_in, Rng& rng, double gain = 1.0) {
  const double stddev = gain * std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : p.value.values()) v = static_cast<float>(stddev * rng.normal());
}

inline void zero_grad(const ParamList& ps) {
  for (auto* p : ps) p->grad.fill(0.0f);
}

/// 2-d convolution over each sample, lowered to GEMM via im2col.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in, int out, int k, int stride, int pad, Rng& rng, const std::string& name,
         double gain = 1.0)
      : in_(in), out_(out), k_(k), stride_(stride), pad_(pad),
        weight_(name + ".weight", out, in * k * k, 1, 1), bias_(name + ".bias", out, 1, 1, 1) {
    detail::require(in > 0 && out > 0 && k > 0 && stride > 0 && pad >= 0, "Conv2d: bad geometry");
    he_init(weight_, in * k * k, rng, gain);
  }

  int out_h(int h) const { return (h + 2 * pad_ - k_) / stride_ + 1; }
  int out_w(int w) const { return (w + 2 * pad_ - k_) / stride_ + 1; }
  int in_channels() const { return in_; }
  int out_channels() const { return out_; }

  Tensor forward(const Tensor& x) {
    detail::require(x.c() == in_, weight_.name + ": expected " + std::to_string(in_) +
                                      " input channels, got " + std::to_string(x.c()));
    input_ = x;
    const int ho = out_h(x.h()), wo = out_w(x.w());
    const int kk = in_ * k_ * k_;
    const int pix = ho * wo;
    Tensor y(x.n(), out_, ho, wo);
    RowMat col(kk, pix);
    ConstMapMat wmat(weight_.value.data(), out_, kk);
    ConstMapVec b(bias_.value.data(), out_);
    for (int i = 0; i < x.n(); ++i) {
      im2col(x.sample(i), x.h(), x.w(), col.data());
      MapMat ymat(y.sample(i), out_, pix);
      ymat.noalias() = wmat * col;
      ymat.colwise() += b;
    }
    return y;
  }

  Tensor backward(const Tensor& dy) {
    const Tensor& x = input_;
    const int ho = out_h(x.h()), wo = out_w(x.w());
    detail::require(dy.n() == x.n() && dy.c() == out_ && dy.h() == ho && dy.w() == wo,
                    weight_.name + ": gradient shape mismatch");
    const int kk = in_ * k_ * k_;
    const int pix = ho * wo;
    Tensor dx(x.n(), x.c(), x.h(), x.w());
    RowMat col(kk, pix);
    RowMat dcol(kk, pix);
    ConstMapMat wmat(weight_.value.data(), out_, kk);
    MapMat dw(weight_.grad.data(), out_, kk);
    MapVec db(bias_.grad.data(), out_);
    for (int i = 0; i < x.n(); ++i) {
      im2col(x.sample(i), x.h(), x.w(), col.data());
      ConstMapMat dymat(dy.sample(i), out_, pix);
      dw.noalias() += dymat * col.transpose();
      db += dymat.rowwise().sum();
      dcol.noalias() = wmat.transpose() * dymat;
      col2im(dcol.data(), x.h(), x.w(), dx.sample(i));
    }
    return dx;
  }

  void collect(ParamList& ps) {
    ps.push_back(&weight_);
    ps.push_back(&bias_);
  }

  Param& weight() { return weight_; }
  Param& bias() { return bias_; }

 private:
  void im2col(const float* x, int h, int w, float* col) const {
    const int ho = out_h(h), wo = out_w(w);
    for (int ci = 0; ci < in_; ++ci) {
      const float* plane = x + static_cast<std::size_t>(ci) * h * w;
      for (int ki = 0; ki < k_; ++ki) {
        for (int kj = 0; kj < k_; ++kj) {
          float* row = col + (static_cast<std::size_t>((ci * k_ + ki) * k_ + kj)) * ho * wo;
          for (int oh = 0; oh < ho; ++oh) {
            const int ih = oh * stride_ - pad_ + ki;
            float* dst = row + static_cast<std::size_t>(oh) * wo;
            if (ih < 0 || ih >= h) {
              std::fill_n(dst, wo, 0.0f);
              continue;
            }
            const float* src = plane + static_cast<std::size_t>(ih) * w;
            for (int ow = 0; ow < wo; ++ow) {
              const int iw = ow * stride_ - pad_ + kj;
              dst[ow] = (iw >= 0 && iw < w) ? src[iw] : 0.0f;
            }
          }
        }
      }
    }
  }

  void col2im(const float* col, int h, int w, float* dx) const {
    const int ho = out_h(h), wo = out_w(w);
    for (int ci = 0; ci < in_; ++ci) {
      float* plane = dx + static_cast<std::size_t>(ci) * h * w;
      for (int ki = 0; ki < k_; ++ki) {
        for (int kj = 0; kj < k_; ++kj) {
          const float* row =
              col + (static_cast<std::size_t>((ci * k_ + ki) * k_ + kj)) * ho * wo;
          for (int oh = 0; oh < ho; ++oh) {
            const int ih = oh * stride_ - pad_ + ki;
            if (ih < 0 || ih >= h) continue;
            const float* src = row + static_cast<std::size_t>(oh) * wo;
            float* dst = plane + static_cast<std::size_t>(ih) * w;
            for (int ow = 0; ow < wo; ++ow) {
              const int iw = ow * stride_ - pad_ + kj;
              if (iw >= 0 && iw < w) dst[iw] += src[ow];
            }
          }
        }
      }
    }
  }

  int in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  Param weight_, bias_;
  Tensor input_;
};

/// 1-d convolution along the N (time) axis of a clip tensor [L, C, H, W],
/// applied independently at every spatial position. Zero padding keeps L.
class TemporalConv {
 public:
  TemporalConv() = default;
  TemporalConv(int in, int out, int k, Rng& rng, const std::string& name)
      : in_(in), out_(out), k_(k), weight_(name + ".weight", k, out, in, 1),
        bias_(name + ".bias", out, 1, 1, 1) {
    detail::require(in > 0 && out > 0 && k > 0 && k % 2 == 1, "TemporalConv: bad geometry");
    he_init(weight_, in * k, rng);
  }

  Tensor forward(const Tensor& x) {
    detail::require(x.c() == in_, weight_.name + ": channel mismatch");
    input_ = x;
    const int len = x.n();
    const int pix = static_cast<int>(x.plane());
    const int half = k_ / 2;
    Tensor y(len, out_, x.h(), x.w());
    ConstMapVec b(bias_.value.data(), out_);
    for (int t = 0; t < len; ++t) {
      MapMat ymat(y.sample(t), out_, pix);
      ymat.colwise() = b;
      for (int j = 0; j < k_; ++j) {
        const int src = t + j - half;
        if (src < 0 || src >= len) continue;
        ConstMapMat wj(weight_.value.data() + static_cast<std::size_t>(j) * out_ * in_, out_, in_);
        ConstMapMat xs(x.sample(src), in_, pix);
        ymat.noalias() += wj * xs;
      }
    }
    return y;
  }

  Tensor backward(const Tensor& dy) {
    const Tensor& x = input_;
    detail::require(dy.n() == x.n() && dy.c() == out_ && dy.h() == x.h() && dy.w() == x.w(),
                    weight_.name + ": gradient shape mismatch");
    const int len = x.n();
    const int pix = static_cast<int>(x.plane());
    const int half = k_ / 2;
    Tensor dx(x.n(), x.c(), x.h(), x.w());
    MapVec db(bias_.grad.data(), out_);
    for (int t = 0; t < len; ++t) {
      ConstMapMat dymat(dy.sample(t), out_, pix);
      db += dymat.rowwise().sum();
      for (int j = 0; j < k_; ++j) {
        const int src = t + j - half;
        if (src < 0 || src >= len) continue;
        const std::size_t off = static_cast<std::size_t>(j) * out_ * in_;
        ConstMapMat wj(weight_.value.data() + off, out_, in_);
        MapMat dwj(weight_.grad.data() + off, out_, in_);
        ConstMapMat xs(x.sample(src), in_, pix);
        MapMat dxs(dx.sample(src), in_, pix);
        dwj.noalias() += dymat * xs.transpose();
        dxs.noalias() += wj.transpose() * dymat;
      }
    }
    return dx;
  }

  void collect(ParamList& ps) {
    ps.push_back(&weight_);
    ps.push_back(&bias_);
  }

 private:
  int in_ = 0, out_ = 0, k_ = 1;
  Param weight_, bias_;
  Tensor input_;
};

class Relu {
 public:
  Tensor forward(const Tensor& x) {
    Tensor y = x;
    for (auto& v : y.values()) v = v > 0.0f ? v : 0.0f;
    output_ = y;
    return y;
  }
  Tensor backward(const Tensor& dy) const {
    detail::require(dy.same_shape(output_), "Relu: gradient shape mismatch");
    Tensor dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i) {
      if (output_[i] <= 0.0f) dx[i] = 0.0f;
    }
    return dx;
  }

 private:
  Tensor output_;
};

/// Nearest-neighbour 2x spatial upsampling.
inline Tensor upsample2x(const Tensor& x) {
  Tensor y(x.n(), x.c(), x.h() * 2, x.w() * 2);
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c)
      for (int i = 0; i < y.h(); ++i)
        for (int j = 0; j < y.w(); ++j) y(n, c, i, j) = x(n, c, i / 2, j / 2);
  return y;
}

inline Tensor upsample2x_backward(const Tensor& dy) {
  detail::require(dy.h() % 2 == 0 && dy.w() % 2 == 0, "upsample2x_backward: odd size");
  Tensor dx(dy.n(), dy.c(), dy.h() / 2, dy.w() / 2);
  for (int n = 0; n < dy.n(); ++n)
    for (int c = 0; c < dy.c(); ++c)
      for (int i = 0; i < dy.h(); ++i)
        for (int j = 0; j < dy.w(); ++j) dx(n, c, i / 2, j / 2) += dy(n, c, i, j);
  return dx;
}

/// [N, C, H, W] -> [N, C, 1, 1] spatial mean.
inline Tensor global_avg_pool(const Tensor& x) {
  Tensor y(x.n(), x.c(), 1, 1);
  const std::size_t plane = x.plane();
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const float* p = x.sample(n) + c * plane;
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      y(n, c, 0, 0) = static_cast<float>(acc / static_cast<double>(plane));
    }
  }
  return y;
}

inline Tensor global_avg_pool_backward(const Tensor& dy, int h, int w) {
  Tensor dx(dy.n(), dy.c(), h, w);
  const float inv = 1.0f / static_cast<float>(h * w);
  const std::size_t plane = dx.plane();
  for (int n = 0; n < dy.n(); ++n) {
    for (int c = 0; c < dy.c(); ++c) {
      float* p = dx.sample(n) + c * plane;
      std::fill_n(p, plane, dy(n, c, 0, 0) * inv);
    }
  }
  return dx;
}

/// Fully connected layer over [N, in, 1, 1].
class Linear {
 public:
  Linear() = default;
  Linear(int in, int out, Rng& rng, const std::string& name, double gain = 1.0)
      : in_(in), out_(out), weight_(name + ".weight", out, in, 1, 1),
        bias_(name + ".bias", out, 1, 1, 1) {
    he_init(weight_, in, rng, gain);
  }

  Tensor forward(const Tensor& x) {
    detail::require(static_cast<int>(x.sample_size()) == in_, weight_.name + ": input size mismatch");
    input_ = x;
    Tensor y(x.n(), out_, 1, 1);
    ConstMapMat wmat(weight_.value.data(), out_, in_);
    ConstMapVec b(bias_.value.data(), out_);
    for (int i = 0; i < x.n(); ++i) {
      MapVec yv(y.sample(i), out_);
      yv.noalias() = wmat * ConstMapVec(x.sample(i), in_);
      yv += b;
    }
    return y;
  }

  Tensor backward(const Tensor& dy) {
    Tensor dx(input_.n(), input_.c(), input_.h(), input_.w());
    ConstMapMat wmat(weight_.value.data(), out_, in_);
    MapMat dw(weight_.grad.data(), out_, in_);
    MapVec db(bias_.grad.data(), out_);
    for (int i = 0; i < input_.n(); ++i) {
      ConstMapVec g(dy.sample(i), out_);
      ConstMapVec xi(input_.sample(i), in_);
      dw.noalias() += g * xi.transpose();
      db += g;
      MapVec(dx.sample(i), in_).noalias() = wmat.transpose() * g;
    }
    return dx;
  }

  void collect(ParamList& ps) {
    ps.push_back(&weight_);
    ps.push_back(&bias_);
  }

  Param& weight() { return weight_; }
  Param& bias() { return bias_; }

 private:
  int in_ = 0, out_ = 0;
  Param weight_, bias_;
  Tensor input_;
};

/// Summarises a per-frame feature sequence [L, C, 1, 1] by its temporal
/// mean, max and min, giving [1, 3C, 1, 1].
class TemporalStatsPool {
 public:
  Tensor forward(const Tensor& x) {
    detail::require(x.h() == 1 && x.w() == 1 && x.n() > 0, "TemporalStatsPool: expects [L,C,1,1]");
    len_ = x.n();
    ch_ = x.c();
    argmax_.assign(ch_, 0);
    argmin_.assign(ch_, 0);
    Tensor y(1, 3 * ch_, 1, 1);
    for (int c = 0; c < ch_; ++c) {
      double acc = 0.0;
      for (int t = 0; t < len_; ++t) {
        const float v = x(t, c, 0, 0);
        acc += v;
        if (v > x(argmax_[c], c, 0, 0)) argmax_[c] = t;
        if (v < x(argmin_[c], c, 0, 0)) argmin_[c] = t;
      }
      y(0, c, 0, 0) = static_cast<float>(acc / len_);
      y(0, ch_ + c, 0, 0) = x(argmax_[c], c, 0, 0);
      y(0, 2 * ch_ + c, 0, 0) = x(argmin_[c], c, 0, 0);
    }
    return y;
  }

  Tensor backward(const Tensor& dy) const {
    Tensor dx(len_, ch_, 1, 1);
    for (int c = 0; c < ch_; ++c) {
      const float g = dy(0, c, 0, 0) / static_cast<float>(len_);
      for (int t = 0; t < len_; ++t) dx(t, c, 0, 0) += g;
      dx(argmax_[c], c, 0, 0) += dy(0, ch_ + c, 0, 0);
      dx(argmin_[c], c, 0, 0) += dy(0, 2 * ch_ + c, 0, 0);
    }
    return dx;
  }

 private:
  int len_ = 0, ch_ = 0;
  std::vector<int> argmax_, argmin_;
};

/// Normalises each channel over all of (N, H, W) and applies a learned
/// affine map. Applied to a single clip [L, C, H, W] this is instance
/// normalisation over time and space; there are no running statistics, so
/// training and evaluation behave identically.
class ChannelNorm {
 public:
  ChannelNorm() = default;
  ChannelNorm(int ch, const std::string& name, double eps = 1e-5)
      : ch_(ch), eps_(eps), gamma_(name + ".gamma", ch, 1, 1, 1), beta_(name + ".beta", ch, 1, 1, 1) {
    gamma_.value.fill(1.0f);
  }

  Tensor forward(const Tensor& x) {
    detail::require(x.c() == ch_, gamma_.name + ": channel mismatch");
    const std::size_t plane = x.plane();
    const double count = static_cast<double>(x.n()) * static_cast<double>(plane);
    xhat_ = Tensor(x.n(), x.c(), x.h(), x.w());
    inv_std_.assign(static_cast<std::size_t>(ch_), 0.0);
    Tensor y(x.n(), x.c(), x.h(), x.w());
    for (int c = 0; c < ch_; ++c) {
      double sum = 0.0, sq = 0.0;
      for (int n = 0; n < x.n(); ++n) {
        const float* p = x.sample(n) + c * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          sum += p[i];
          sq += static_cast<double>(p[i]) * p[i];
        }
      }
      const double mean = sum / count;
      const double var = std::max(sq / count - mean * mean, 0.0);
      const double inv = 1.0 / std::sqrt(var + eps_);
      inv_std_[static_cast<std::size_t>(c)] = inv;
      const float g = gamma_.value[static_cast<std::size_t>(c)];
      const float b = beta_.value[static_cast<std::size_t>(c)];
      for (int n = 0; n < x.n(); ++n) {
        const float* p = x.sample(n) + c * plane;
        float* h = xhat_.sample(n) + c * plane;
        float* o = y.sample(n) + c * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          h[i] = static_cast<float>((p[i] - mean) * inv);
          o[i] = g * h[i] + b;
        }
      }
    }
    return y;
  }

  Tensor backward(const Tensor& dy) {
    detail::require(dy.same_shape(xhat_), gamma_.name + ": gradient shape mismatch");
    const std::size_t plane = dy.plane();
    const double count = static_cast<double>(dy.n()) * static_cast<double>(plane);
    Tensor dx(dy.n(), dy.c(), dy.h(), dy.w());
    for (int c = 0; c < ch_; ++c) {
      double sdy = 0.0, sdyx = 0.0;
      for (int n = 0; n < dy.n(); ++n) {
        const float* g = dy.sample(n) + c * plane;
        const float* h = xhat_.sample(n) + c * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          sdy += g[i];
          sdyx += static_cast<double>(g[i]) * h[i];
        }
      }
      gamma_.grad[static_cast<std::size_t>(c)] += static_cast<float>(sdyx);
      beta_.grad[static_cast<std::size_t>(c)] += static_cast<float>(sdy);
      const double scale = gamma_.value[static_cast<std::size_t>(c)] * inv_std_[static_cast<std::size_t>(c)];
      const double mdy = sdy / count, mdyx = sdyx / count;
      for (int n = 0; n < dy.n(); ++n) {
        const float* g = dy.sample(n) + c * plane;
        const float* h = xhat_.sample(n) + c * plane;
        float* d = dx.sample(n) + c * plane;
        for (std::size_t i = 0; i < plane; ++i)
          d[i] = static_cast<float>(scale * (g[i] - mdy - h[i] * mdyx));
      }
    }
    return dx;
  }

  void collect(ParamList& ps) {
    ps.push_back(&gamma_);
    ps.push_back(&beta_);
  }

 private:
  int ch_ = 0;
  double eps_ = 1e-5;
  Param gamma_, beta_;
  Tensor xhat_;
  std::vector<double> inv_std_;
};

/// conv-relu-conv with identity shortcut, then relu.
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(int ch, Rng& rng, const std::string& name)
      : conv1_(ch, ch, 3, 1, 1, rng, name + ".conv1"),
        conv2_(ch, ch, 3, 1, 1, rng, name + ".conv2", 0.5) {}

  Tensor forward(const Tensor& x) {
    Tensor h = conv2_.forward(relu1_.forward(conv1_.forward(x)));
    h += x;
    return relu_out_.forward(h);
  }

  Tensor backward(const Tensor& dy) {
    Tensor dsum = relu_out_.backward(dy);
    Tensor dx = conv1_.backward(relu1_.backward(conv2_.backward(dsum)));
    dx += dsum;
    return dx;
  }

  void collect(ParamList& ps) {
    conv1_.collect(ps);
    conv2_.collect(ps);
  }

 private:
  Conv2d conv1_, conv2_;
  Relu relu1_, relu_out_;
};

/// SGD with classical momentum: v <- mu v + g; w <- w - lr v.
struct Sgd {
  double lr = 1e-3;
  double momentum = 0.9;

  void step(const ParamList& ps) const {
    const float mu = static_cast<float>(momentum);
    const float eta = static_cast<float>(lr);
    for (auto* p : ps) {
      auto& v = p->velocity;
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        v[i] = mu * v[i] + p->grad[i];
        p->value[i] -= eta * v[i];
      }
    }
  }
};

inline double grad_norm(const ParamList& ps) {
  double acc = 0.0;
  for (auto* p : ps)
    for (float g : p->grad.values()) acc += static_cast<double>(g) * g;
  return std::sqrt(acc);
}

/// Rescales gradients so their global L2 norm is at most max_norm. Returns
/// the norm before clipping. max_norm <= 0 disables clipping.
inline double clip_grad_norm(const ParamList& ps, double max_norm) {
  const double norm = grad_norm(ps);
  if (max_norm > 0.0 && norm > max_norm) {
    const float scale = static_cast<float>(max_norm / norm);
    for (auto* p : ps)
      for (auto& g : p->grad.values()) g *= scale;
  }
  return norm;
}

inline std::size_t parameter_count(const ParamList& ps) {
  std::size_t n = 0;
  for (auto* p : ps) n += p->value.size();
  return n;
}

}  // namespace echocss::nn
