#pragma once

#include <cmath>
#include <concepts>
#include <string>
#include <vector>

#include "echocss/data/sequence.hpp"
#include "echocss/error.hpp"
#include "echocss/nn/tensor.hpp"

namespace echocss::seg {

/// Anything mapping normalised frames [N, 3, H, W] to logits [N, 1, H, W].
template <class M>
concept FrameSegmenter = requires(M& m, const nn::Tensor& x) {
  { m.logits(x) } -> std::convertible_to<nn::Tensor>;
};

/// 2|A n B| / (|A| + |B|); 1 when both masks are empty.
inline double dice(const data::BinaryMask& pred, const data::BinaryMask& label) {
  if (pred.height != label.height || pred.width != label.width)
    throw ContractError("dice: mask sizes differ");
  if (!pred.is_binary() || !label.is_binary()) throw ContractError("dice: masks must be binary");
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.pixels.size(); ++i) {
    a += pred.pixels[i];
    b += label.pixels[i];
    both += pred.pixels[i] & label.pixels[i];
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

/// Per-frame foreground probabilities and thresholded masks of one video.
struct VideoMasks {
  std::string sequence_id;
  int height = 0;
  int width = 0;
  std::vector<float> probabilities;  ///< [T x H x W] in [0, 1]
  std::vector<data::BinaryMask> masks;

  int num_frames() const {
    const std::size_t plane = static_cast<std::size_t>(height) * width;
    return plane == 0 ? 0 : static_cast<int>(probabilities.size() / plane);
  }
  const float* probability(int t) const {
    return probabilities.data() + static_cast<std::size_t>(t) * height * width;
  }
};

inline float sigmoid(float x) {
  return x >= 0.0f ? 1.0f / (1.0f + std::exp(-x)) : std::exp(x) / (1.0f + std::exp(x));
}

/// Runs the segmenter over every frame of `seq` in chunks.
template <FrameSegmenter M>
VideoMasks infer_masks(M& model, const data::EchoSequence& seq, const data::ChannelStats& stats,
                       double threshold = 0.5, int chunk = 32) {
  detail::require(threshold > 0.0 && threshold < 1.0, "infer_masks: threshold must be in (0, 1)");
  detail::require(chunk > 0, "infer_masks: chunk must be positive");
  VideoMasks out;
  out.sequence_id = seq.id;
  out.height = seq.height;
  out.width = seq.width;
  const int t_total = seq.num_frames();
  const std::size_t plane = static_cast<std::size_t>(seq.height) * seq.width;
  out.probabilities.resize(static_cast<std::size_t>(t_total) * plane);
  out.masks.reserve(static_cast<std::size_t>(t_total));
  for (int t0 = 0; t0 < t_total; t0 += chunk) {
    std::vector<int> idx;
    for (int t = t0; t < std::min(t_total, t0 + chunk); ++t) idx.push_back(t);
    const nn::Tensor logits = model.logits(data::sequence_frames(seq, idx, stats));
    detail::require(logits.n() == static_cast<int>(idx.size()) && logits.c() == 1 &&
                        logits.h() == seq.height && logits.w() == seq.width,
                    "infer_masks: segmenter returned " + logits.shape_string());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      data::BinaryMask m(seq.height, seq.width);
      float* prob = out.probabilities.data() + static_cast<std::size_t>(idx[i]) * plane;
      const float* lg = logits.sample(static_cast<int>(i));
      for (std::size_t p = 0; p < plane; ++p) {
        prob[p] = sigmoid(lg[p]);
        m.pixels[p] = prob[p] >= threshold ? 1 : 0;
      }
      out.masks.push_back(std::move(m));
    }
  }
  return out;
}

}  // namespace echocss::seg
