#pragma once

// Encoder/decoder segmentation network.
//
// The encoder is a stack of conv stages (the first at full resolution, each
// later one halving it), optionally followed by residual blocks. The frame
// embedding z is the global average of the last stage. The decoder
// upsamples from the last stage, concatenating the matching encoder stage at
// each scale, and ends in a 1x1 conv producing one foreground logit per
// pixel.

#include <string>
#include <vector>

#include "echocss/error.hpp"
#include "echocss/nn/layers.hpp"
#include "echocss/rng.hpp"

namespace echocss::seg {

using nn::Tensor;

struct SegConfig {
  std::vector<int> widths{8, 16, 32, 64};  ///< encoder channels per stage; d = widths.back()
  int residual_blocks = 0;                 ///< per encoder stage
  int in_channels = 3;

  int embedding_dim() const { return widths.back(); }
  int stages() const { return static_cast<int>(widths.size()); }
  int decoder_width(int stage) const { return std::max(4, widths[static_cast<std::size_t>(stage)] / 2); }

  void validate() const {
    detail::require(!widths.empty(), "SegConfig: at least one encoder stage");
    for (int w : widths) detail::require(w > 0, "SegConfig: widths must be positive");
    detail::require(residual_blocks >= 0, "SegConfig: negative residual block count");
    detail::require(in_channels > 0, "SegConfig: in_channels must be positive");
  }
  bool operator==(const SegConfig&) const = default;
};

class SegmentationModel {
 public:
  SegmentationModel(const SegConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const int n = cfg_.stages();
    enc_.resize(static_cast<std::size_t>(n));
    dec_.resize(static_cast<std::size_t>(n));
    int prev = cfg_.in_channels;
    for (int i = 0; i < n; ++i) {
      auto& st = enc_[static_cast<std::size_t>(i)];
      const int w = cfg_.widths[static_cast<std::size_t>(i)];
      const std::string name = "enc" + std::to_string(i);
      st.conv = nn::Conv2d(prev, w, 3, i == 0 ? 1 : 2, 1, rng, name + ".conv");
      for (int b = 0; b < cfg_.residual_blocks; ++b)
        st.blocks.emplace_back(w, rng, name + ".res" + std::to_string(b));
      prev = w;
    }
    for (int i = n - 1; i >= 0; --i) {
      const int in = i == n - 1 ? cfg_.widths.back()
                                : cfg_.decoder_width(i + 1) + cfg_.widths[static_cast<std::size_t>(i)];
      dec_[static_cast<std::size_t>(i)].conv =
          nn::Conv2d(in, cfg_.decoder_width(i), 3, 1, 1, rng, "dec" + std::to_string(i) + ".conv");
    }
    // Small head so initial logits sit near zero.
    head_ = nn::Conv2d(cfg_.decoder_width(0), 1, 1, 1, 0, rng, "head", 0.1);
  }

  // Layers cache activations, so the model is neither copyable nor movable
  // once parameter pointers have been handed out.
  SegmentationModel(const SegmentationModel&) = delete;
  SegmentationModel& operator=(const SegmentationModel&) = delete;

  const SegConfig& config() const { return cfg_; }
  int embedding_dim() const { return cfg_.embedding_dim(); }

  /// Minimum spatial divisor of the input.
  int spatial_divisor() const { return 1 << (cfg_.stages() - 1); }

  /// Encoder feature maps of every stage for x [N, C, H, W].
  std::vector<Tensor> encode(const Tensor& x) {
    detail::require(x.c() == cfg_.in_channels, "SegmentationModel: expected " +
                                                  std::to_string(cfg_.in_channels) +
                                                  " input channels, got " + std::to_string(x.c()));
    detail::require(x.h() % spatial_divisor() == 0 && x.w() % spatial_divisor() == 0,
                    "SegmentationModel: frame size must be divisible by " +
                        std::to_string(spatial_divisor()));
    std::vector<Tensor> feats;
    feats.reserve(enc_.size());
    const Tensor* in = &x;
    for (auto& st : enc_) {
      Tensor h = st.relu.forward(st.conv.forward(*in));
      for (auto& b : st.blocks) h = b.forward(h);
      feats.push_back(std::move(h));
      in = &feats.back();
    }
    last_h_ = feats.back().h();
    last_w_ = feats.back().w();
    return feats;
  }

  /// Frame embeddings z [N, d, 1, 1].
  Tensor embed(const Tensor& x) { return nn::global_avg_pool(encode(x).back()); }

  /// Per-pixel foreground logits [N, 1, H, W].
  Tensor forward(const Tensor& x) { return decode(encode(x)); }
  Tensor logits(const Tensor& x) { return forward(x); }

  Tensor decode(const std::vector<Tensor>& feats) {
    const int n = cfg_.stages();
    detail::require(static_cast<int>(feats.size()) == n, "decode: wrong number of feature maps");
    Tensor h = dec_.back().relu.forward(dec_.back().conv.forward(feats.back()));
    for (int i = n - 2; i >= 0; --i) {
      auto& st = dec_[static_cast<std::size_t>(i)];
      h = st.relu.forward(
          st.conv.forward(nn::concat_channels(nn::upsample2x(h), feats[static_cast<std::size_t>(i)])));
    }
    return head_.forward(h);
  }

  /// Back-propagates d loss / d logits through decoder and encoder.
  void backward(const Tensor& dlogits) {
    const int n = cfg_.stages();
    std::vector<Tensor> dfeat(static_cast<std::size_t>(n));
    Tensor g = head_.backward(dlogits);
    for (int i = 0; i <= n - 2; ++i) {
      auto& st = dec_[static_cast<std::size_t>(i)];
      Tensor dcat = st.conv.backward(st.relu.backward(g));
      auto [dup, dskip] = nn::split_channels(dcat, cfg_.decoder_width(i + 1));
      dfeat[static_cast<std::size_t>(i)] = std::move(dskip);
      g = nn::upsample2x_backward(dup);
    }
    dfeat.back() = dec_.back().conv.backward(dec_.back().relu.backward(g));
    encoder_backward(std::move(dfeat));
  }

  /// Back-propagates d loss / d z through the encoder only.
  void embed_backward(const Tensor& dz) {
    std::vector<Tensor> dfeat(enc_.size());
    dfeat.back() = nn::global_avg_pool_backward(dz, last_h_, last_w_);
    encoder_backward(std::move(dfeat));
  }

  /// dfeat[i] is d loss / d (stage i output); empty tensors mean zero.
  void encoder_backward(std::vector<Tensor> dfeat) {
    detail::require(dfeat.size() == enc_.size() && !dfeat.back().empty(),
                    "encoder_backward: bad gradient list");
    Tensor g = std::move(dfeat.back());
    for (int i = cfg_.stages() - 1; i >= 0; --i) {
      auto& st = enc_[static_cast<std::size_t>(i)];
      if (i < cfg_.stages() - 1 && !dfeat[static_cast<std::size_t>(i)].empty())
        g += dfeat[static_cast<std::size_t>(i)];
      for (auto it = st.blocks.rbegin(); it != st.blocks.rend(); ++it) g = it->backward(g);
      g = st.conv.backward(st.relu.backward(g));
    }
  }

  nn::ParamList encoder_parameters() {
    nn::ParamList ps;
    for (auto& st : enc_) {
      st.conv.collect(ps);
      for (auto& b : st.blocks) b.collect(ps);
    }
    return ps;
  }

  nn::ParamList decoder_parameters() {
    nn::ParamList ps;
    for (auto it = dec_.rbegin(); it != dec_.rend(); ++it) it->conv.collect(ps);
    head_.collect(ps);
    return ps;
  }

  nn::ParamList parameters() {
    auto ps = encoder_parameters();
    auto d = decoder_parameters();
    ps.insert(ps.end(), d.begin(), d.end());
    return ps;
  }

 private:
  struct EncStage {
    nn::Conv2d conv;
    nn::Relu relu;
    std::vector<nn::ResidualBlock> blocks;
  };
  struct DecStage {
    nn::Conv2d conv;
    nn::Relu relu;
  };

  SegConfig cfg_;
  std::vector<EncStage> enc_;
  std::vector<DecStage> dec_;
  nn::Conv2d head_;
  int last_h_ = 0, last_w_ = 0;
};

}  // namespace echocss::seg
