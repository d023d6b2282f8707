#pragma once

// Spatio-temporal EF regressor for clips [L, C, H, W].
//
// Per-frame strided conv stages interleaved with temporal convolutions give
// a (2+1)D stack; every conv is followed by per-clip channel normalisation.
// The spatially pooled per-frame features are summarised over time by mean,
// max and min and mapped to a scalar by a two-layer head.
// The output is offset + scale * head(x), in EF percent.

#include <string>
#include <vector>

#include "echocss/error.hpp"
#include "echocss/nn/layers.hpp"
#include "echocss/rng.hpp"

namespace echocss::reg {

using nn::Tensor;

struct RegConfig {
  int in_channels = 3;  ///< 3 for the video-only student, 4 with a mask channel
  std::vector<int> widths{8, 16, 16};
  int temporal_after = 1;  ///< temporal conv after stages >= this index
  int temporal_kernel = 3;
  int hidden = 32;
  double output_offset = 50.0;  ///< EF percent at zero head output
  double output_scale = 10.0;

  void validate() const {
    detail::require(in_channels == 3 || in_channels == 4, "RegConfig: in_channels must be 3 or 4");
    detail::require(!widths.empty(), "RegConfig: at least one stage");
    for (int w : widths) detail::require(w > 0, "RegConfig: widths must be positive");
    detail::require(temporal_kernel > 0 && temporal_kernel % 2 == 1,
                    "RegConfig: temporal kernel must be odd");
    detail::require(hidden > 0, "RegConfig: hidden must be positive");
    detail::require(output_scale > 0.0, "RegConfig: output_scale must be positive");
  }
  bool operator==(const RegConfig&) const = default;
};

class RegressionModel {
 public:
  RegressionModel(const RegConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    int prev = cfg_.in_channels;
    for (std::size_t i = 0; i < cfg_.widths.size(); ++i) {
      Stage st;
      const int w = cfg_.widths[i];
      const std::string name = "stage" + std::to_string(i);
      st.conv = nn::Conv2d(prev, w, 3, 2, 1, rng, name + ".conv");
      st.norm = nn::ChannelNorm(w, name + ".norm");
      st.temporal = static_cast<int>(i) >= cfg_.temporal_after;
      if (st.temporal) {
        st.tconv = nn::TemporalConv(w, w, cfg_.temporal_kernel, rng, name + ".tconv");
        st.tnorm = nn::ChannelNorm(w, name + ".tnorm");
      }
      stages_.push_back(std::move(st));
      prev = w;
    }
    fc1_ = nn::Linear(3 * prev, cfg_.hidden, rng, "fc1");
    fc2_ = nn::Linear(cfg_.hidden, 1, rng, "fc2", 0.1);
  }

  RegressionModel(const RegressionModel&) = delete;
  RegressionModel& operator=(const RegressionModel&) = delete;

  const RegConfig& config() const { return cfg_; }
  int in_channels() const { return cfg_.in_channels; }

  /// EF percent for one clip [L, C, H, W]. Unclamped.
  double forward(const Tensor& x) {
    if (x.c() != cfg_.in_channels)
      throw ContractError("RegressionModel: expected " + std::to_string(cfg_.in_channels) +
                          "-channel clips, got " + std::to_string(x.c()));
    detail::require(x.n() > 0, "RegressionModel: empty clip");
    Tensor h = x;
    for (auto& st : stages_) {
      h = st.relu.forward(st.norm.forward(st.conv.forward(h)));
      if (st.temporal) h = st.trelu.forward(st.tnorm.forward(st.tconv.forward(h)));
    }
    pool_h_ = h.h();
    pool_w_ = h.w();
    Tensor f = fc1_relu_.forward(fc1_.forward(stats_.forward(nn::global_avg_pool(h))));
    const Tensor y = fc2_.forward(f);
    return cfg_.output_offset + cfg_.output_scale * y[0];
  }

  /// Back-propagates d loss / d output (EF units) for the last forward call;
  /// returns d loss / d input.
  Tensor backward(double doutput) {
    Tensor dy(1, 1, 1, 1, static_cast<float>(doutput * cfg_.output_scale));
    Tensor g = stats_.backward(fc1_.backward(fc1_relu_.backward(fc2_.backward(dy))));
    g = nn::global_avg_pool_backward(g, pool_h_, pool_w_);
    for (auto it = stages_.rbegin(); it != stages_.rend(); ++it) {
      if (it->temporal) g = it->tconv.backward(it->tnorm.backward(it->trelu.backward(g)));
      g = it->conv.backward(it->norm.backward(it->relu.backward(g)));
    }
    return g;
  }

  /// d output / d input for one clip. Leaves parameter gradients zeroed.
  Tensor input_gradient(const Tensor& x) {
    const auto ps = parameters();
    forward(x);
    Tensor g = backward(1.0);
    nn::zero_grad(ps);
    return g;
  }

  nn::ParamList parameters() {
    nn::ParamList ps;
    for (auto& st : stages_) {
      st.conv.collect(ps);
      st.norm.collect(ps);
      if (st.temporal) {
        st.tconv.collect(ps);
        st.tnorm.collect(ps);
      }
    }
    fc1_.collect(ps);
    fc2_.collect(ps);
    return ps;
  }

 private:
  struct Stage {
    nn::Conv2d conv;
    nn::ChannelNorm norm;
    nn::Relu relu;
    bool temporal = false;
    nn::TemporalConv tconv;
    nn::ChannelNorm tnorm;
    nn::Relu trelu;
  };

  RegConfig cfg_;
  std::vector<Stage> stages_;
  nn::TemporalStatsPool stats_;
  nn::Linear fc1_, fc2_;
  nn::Relu fc1_relu_;
  int pool_h_ = 0, pool_w_ = 0;
};

}  // namespace echocss::reg
