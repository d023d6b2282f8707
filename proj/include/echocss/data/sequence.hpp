#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "echocss/error.hpp"
#include "echocss/nn/tensor.hpp"

namespace echocss::data {

inline constexpr int kChannels = 3;

/// Binary [H x W] mask, pixels in {0, 1}.
struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  BinaryMask() = default;
  BinaryMask(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, 0) {}

  std::size_t area() const {
    std::size_t a = 0;
    for (auto p : pixels) a += p;
    return a;
  }
  bool is_binary() const {
    for (auto p : pixels)
      if (p > 1) return false;
    return true;
  }
  std::uint8_t& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  bool operator==(const BinaryMask&) const = default;
};

/// One echocardiogram video. Frames are stored as 8-bit [T x 3 x H x W].
struct EchoSequence {
  std::string id;
  std::string split = "train";
  int height = 0;
  int width = 0;
  double fps = 50.0;
  std::vector<std::uint8_t> frames;

  std::optional<double> ef;
  std::optional<int> ed_index;
  std::optional<int> es_index;
  std::optional<BinaryMask> ed_mask;
  std::optional<BinaryMask> es_mask;

  /// Optional per-frame ground truth (synthetic data only).
  std::vector<BinaryMask> frame_masks;

  std::size_t frame_size() const { return static_cast<std::size_t>(kChannels) * height * width; }
  int num_frames() const {
    return frame_size() == 0 ? 0 : static_cast<int>(frames.size() / frame_size());
  }
  const std::uint8_t* frame(int t) const { return frames.data() + t * frame_size(); }
  std::uint8_t* frame(int t) { return frames.data() + t * frame_size(); }
  bool labeled() const { return ef.has_value(); }

  void validate() const {
    auto fail = [&](const std::string& why) {
      throw ValidationError("sequence '" + id + "': " + why);
    };
    if (height <= 0 || width <= 0) fail("non-positive frame size");
    if (frames.size() % frame_size() != 0) fail("frame buffer is not a whole number of frames");
    const int t = num_frames();
    if (ef) {
      if (!(*ef >= 0.0 && *ef <= 100.0)) fail("EF outside [0, 100]");
      if (!ed_mask) fail("labeled sequence is missing its ED mask");
      if (!es_mask) fail("labeled sequence is missing its ES mask");
      if (!ed_index || !es_index) fail("labeled sequence is missing ED/ES frame indices");
    }
    if (ed_index && es_index && *ed_index == *es_index) fail("ED and ES frame indices coincide");
    for (const auto* idx : {&ed_index, &es_index}) {
      if (*idx && (**idx < 0 || **idx >= t)) fail("ED/ES index outside the video");
    }
    for (const auto* m : {&ed_mask, &es_mask}) {
      if (!*m) continue;
      if ((*m)->height != height || (*m)->width != width) fail("mask size differs from frame size");
      if (!(*m)->is_binary()) fail("mask pixels must be 0 or 1");
    }
    if (!frame_masks.empty() && static_cast<int>(frame_masks.size()) != t)
      fail("per-frame mask count differs from frame count");
  }
};

/// Per-channel normalisation constants on the [0, 1] intensity scale.
struct ChannelStats {
  std::array<double, kChannels> mean{0.5, 0.5, 0.5};
  std::array<double, kChannels> stddev{0.25, 0.25, 0.25};
  bool operator==(const ChannelStats&) const = default;
};

struct Dataset {
  std::vector<EchoSequence> sequences;
  ChannelStats stats;

  std::size_t size() const { return sequences.size(); }

  const EchoSequence& get(const std::string& id) const { return sequences.at(index_of(id)); }

  std::size_t index_of(const std::string& id) const {
    if (index_.size() != sequences.size()) rebuild_index();
    auto it = index_.find(id);
    if (it == index_.end()) throw ContractError("dataset has no sequence '" + id + "'");
    return it->second;
  }

  std::vector<std::string> ids(const std::string& split) const {
    std::vector<std::string> out;
    for (const auto& s : sequences)
      if (split.empty() || s.split == split) out.push_back(s.id);
    return out;
  }

 private:
  void rebuild_index() const {
    index_.clear();
    for (std::size_t i = 0; i < sequences.size(); ++i) index_.emplace(sequences[i].id, i);
  }
  mutable std::unordered_map<std::string, std::size_t> index_;
};

/// Mean/std per channel over all frames of the given sequences.
inline ChannelStats compute_channel_stats(const Dataset& ds, const std::vector<std::string>& ids) {
  std::array<double, kChannels> sum{}, sq{};
  double count = 0.0;
  for (const auto& id : ids) {
    const auto& s = ds.get(id);
    const std::size_t plane = static_cast<std::size_t>(s.height) * s.width;
    for (int t = 0; t < s.num_frames(); ++t) {
      const auto* f = s.frame(t);
      for (int c = 0; c < kChannels; ++c) {
        for (std::size_t i = 0; i < plane; ++i) {
          const double v = f[c * plane + i] / 255.0;
          sum[c] += v;
          sq[c] += v * v;
        }
      }
      count += static_cast<double>(plane);
    }
  }
  ChannelStats st;
  if (count == 0.0) return st;
  for (int c = 0; c < kChannels; ++c) {
    st.mean[c] = sum[c] / count;
    st.stddev[c] = std::sqrt(std::max(sq[c] / count - st.mean[c] * st.mean[c], 1e-12));
  }
  return st;
}

/// Normalised float tensor [L, 3, H, W] from 8-bit frames given by pointer.
inline nn::Tensor frames_to_tensor(const std::vector<const std::uint8_t*>& frames, int height,
                                   int width, const ChannelStats& st) {
  nn::Tensor t(static_cast<int>(frames.size()), kChannels, height, width);
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    float* dst = t.sample(static_cast<int>(i));
    for (int c = 0; c < kChannels; ++c) {
      const float m = static_cast<float>(st.mean[c]);
      const float inv = static_cast<float>(1.0 / st.stddev[c]);
      for (std::size_t p = 0; p < plane; ++p)
        dst[c * plane + p] = (frames[i][c * plane + p] / 255.0f - m) * inv;
    }
  }
  return t;
}

inline nn::Tensor sequence_frames(const EchoSequence& s, const std::vector<int>& indices,
                                  const ChannelStats& st) {
  std::vector<const std::uint8_t*> ptrs;
  ptrs.reserve(indices.size());
  for (int t : indices) {
    if (t < 0 || t >= s.num_frames())
      throw IndexError("sequence '" + s.id + "': frame " + std::to_string(t) + " out of range");
    ptrs.push_back(s.frame(t));
  }
  return frames_to_tensor(ptrs, s.height, s.width, st);
}

inline nn::Tensor masks_to_tensor(const std::vector<const BinaryMask*>& masks) {
  detail::require(!masks.empty(), "masks_to_tensor: empty batch");
  nn::Tensor t(static_cast<int>(masks.size()), 1, masks[0]->height, masks[0]->width);
  for (std::size_t i = 0; i < masks.size(); ++i) {
    detail::require(masks[i]->height == t.h() && masks[i]->width == t.w(),
                    "masks_to_tensor: mask sizes differ");
    float* dst = t.sample(static_cast<int>(i));
    for (std::size_t p = 0; p < masks[i]->pixels.size(); ++p) dst[p] = masks[i]->pixels[p];
  }
  return t;
}

}  // namespace echocss::data
