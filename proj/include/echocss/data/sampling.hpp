#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <iostream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "echocss/data/sequence.hpp"
#include "echocss/error.hpp"
#include "echocss/rng.hpp"

namespace echocss::data {

/// Reflects a partial cycle at both ends:
///   [v_{T/2}, ..., v_2, v_1, v_2, ..., v_{T-1}, v_T, v_{T-1}, ..., v_{T/2}]
/// Output length is 2T - 1 and consecutive outputs are neighbours in the
/// source. For odd T the pivot is floor(T/2) (at least 1).
template <class T>
std::vector<T> temporal_mirror(std::span<const T> v) {
  const std::size_t n = v.size();
  detail::require(n > 0, "temporal_mirror: empty sequence");
  const std::size_t pivot = std::max<std::size_t>(1, n / 2);  // 1-based
  std::vector<T> out;
  out.reserve(2 * n - 1);
  for (std::size_t i = pivot; i >= 1; --i) out.push_back(v[i - 1]);
  for (std::size_t i = 2; i <= n; ++i) out.push_back(v[i - 1]);
  for (std::size_t i = n - 1; i >= pivot && i >= 1; --i) out.push_back(v[i - 1]);
  return out;
}

template <class T>
std::vector<T> temporal_mirror(const std::vector<T>& v) {
  return temporal_mirror(std::span<const T>(v));
}

/// 0-based source index for each position of the mirrored sequence.
inline std::vector<int> mirror_indices(int length) {
  std::vector<int> idx(static_cast<std::size_t>(length));
  std::iota(idx.begin(), idx.end(), 0);
  return temporal_mirror(idx);
}

struct ClipSpec {
  int length = 40;
  int stride = 3;

  /// Source frames covered: (length - 1) * stride + 1.
  constexpr int span() const { return (length - 1) * stride + 1; }
};

inline constexpr ClipSpec kCssClip{40, 3};
inline constexpr ClipSpec kRegressionClip{32, 2};

/// A strided window of frames. source_indices index the working sequence
/// (the video after any mirroring); original_indices map each clip frame
/// back to a frame of the stored video.
struct ClipSample {
  std::string sequence_id;
  std::vector<int> source_indices;
  std::vector<int> original_indices;
  int stride = 1;
  bool mirrored = false;
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> frames;

  int length() const { return static_cast<int>(source_indices.size()); }
  const std::uint8_t* frame(int i) const {
    return frames.data() + static_cast<std::size_t>(i) * kChannels * height * width;
  }
};

/// How a clip spec maps onto a video of a given length.
struct ClipPlan {
  std::vector<int> working;  ///< working index -> stored frame index
  int stride = 1;
  bool mirrored = false;

  int working_length() const { return static_cast<int>(working.size()); }
  int span(int length) const { return (length - 1) * stride + 1; }
  int valid_starts(int length) const { return working_length() - span(length) + 1; }
};

/// Short-sequence policy: keep the requested stride when the span fits;
/// otherwise use the largest stride >= 1 that fits; if even stride 1 does
/// not fit, mirror the video until it is long enough.
inline ClipPlan plan_clip(int num_frames, ClipSpec spec) {
  detail::require(num_frames > 0, "plan_clip: video has no frames");
  detail::require(spec.length > 0 && spec.stride > 0, "plan_clip: bad clip spec");
  ClipPlan plan;
  plan.working.resize(static_cast<std::size_t>(num_frames));
  std::iota(plan.working.begin(), plan.working.end(), 0);
  if (num_frames == 1) {
    plan.working.assign(static_cast<std::size_t>(spec.length), 0);
    plan.mirrored = true;
  }
  while (plan.working_length() < spec.length) {
    plan.working = temporal_mirror(plan.working);
    plan.mirrored = true;
  }
  plan.stride = spec.stride;
  if (plan.span(spec.length) > plan.working_length()) {
    plan.stride = spec.length == 1 ? 1 : std::max(1, (plan.working_length() - 1) / (spec.length - 1));
  }
  return plan;
}

inline ClipSample clip_at(const EchoSequence& seq, const ClipPlan& plan, int length, int start) {
  if (start < 0 || start >= plan.valid_starts(length)) {
    throw IndexError("clip_at: start " + std::to_string(start) + " outside [0, " +
                     std::to_string(plan.valid_starts(length) - 1) + "] for sequence '" + seq.id +
                     "'");
  }
  ClipSample clip;
  clip.sequence_id = seq.id;
  clip.stride = plan.stride;
  clip.mirrored = plan.mirrored;
  clip.height = seq.height;
  clip.width = seq.width;
  clip.frames.resize(static_cast<std::size_t>(length) * seq.frame_size());
  for (int i = 0; i < length; ++i) {
    const int w = start + i * plan.stride;
    const int orig = plan.working[static_cast<std::size_t>(w)];
    clip.source_indices.push_back(w);
    clip.original_indices.push_back(orig);
    std::copy_n(seq.frame(orig), seq.frame_size(),
                clip.frames.begin() + static_cast<std::ptrdiff_t>(i * seq.frame_size()));
  }
  return clip;
}

/// Clip with a start drawn uniformly from the valid starts.
inline ClipSample sample_clip(const EchoSequence& seq, ClipSpec spec, Rng& rng) {
  const auto plan = plan_clip(seq.num_frames(), spec);
  const int start = static_cast<int>(rng.index(static_cast<std::size_t>(plan.valid_starts(spec.length))));
  return clip_at(seq, plan, spec.length, start);
}

inline ClipSample sample_css_clip(const EchoSequence& seq, Rng& rng, ClipSpec spec = kCssClip) {
  return sample_clip(seq, spec, rng);
}

inline ClipSample sample_regression_clip(const EchoSequence& seq, Rng& rng,
                                         ClipSpec spec = kRegressionClip) {
  return sample_clip(seq, spec, rng);
}

/// Deterministic evaluation clip starting at working index 0.
inline ClipSample first_clip(const EchoSequence& seq, ClipSpec spec) {
  return clip_at(seq, plan_clip(seq.num_frames(), spec), spec.length, 0);
}

inline nn::Tensor clip_tensor(const ClipSample& clip, const ChannelStats& st) {
  std::vector<const std::uint8_t*> ptrs;
  for (int i = 0; i < clip.length(); ++i) ptrs.push_back(clip.frame(i));
  return frames_to_tensor(ptrs, clip.height, clip.width, st);
}

/// Exact rational label fraction such as 1/8.
struct Fraction {
  long long num = 1;
  long long den = 1;

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }

  /// Accepts "a/b" or a decimal such as "0.125".
  static Fraction parse(const std::string& text) {
    Fraction f;
    const auto slash = text.find('/');
    auto parse_ll = [&](std::string_view sv) {
      long long v = 0;
      auto [p, ec] = std::from_chars(sv.data(), sv.data() + sv.size(), v);
      if (ec != std::errc() || p != sv.data() + sv.size())
        throw ContractError("label fraction '" + text + "' is not a number");
      return v;
    };
    if (slash != std::string::npos) {
      const std::string_view sv(text);
      f.num = parse_ll(sv.substr(0, slash));
      f.den = parse_ll(sv.substr(slash + 1));
    } else {
      // decimal: scale by a power of ten until integral
      const auto dot = text.find('.');
      std::string digits = text;
      long long den = 1;
      if (dot != std::string::npos) {
        const auto frac_len = text.size() - dot - 1;
        digits.erase(dot, 1);
        for (std::size_t i = 0; i < frac_len; ++i) den *= 10;
      }
      f.num = parse_ll(digits);
      f.den = den;
      const long long g = std::gcd(f.num, f.den);
      if (g > 1) {
        f.num /= g;
        f.den /= g;
      }
    }
    f.validate();
    return f;
  }

  void validate() const {
    if (den <= 0 || num <= 0 || num > den)
      throw ContractError("label fraction must lie in (0, 1], got " + std::to_string(num) + "/" +
                          std::to_string(den));
  }

  std::string str() const { return std::to_string(num) + "/" + std::to_string(den); }
  bool operator==(const Fraction&) const = default;
};

struct DatasetSplit {
  std::vector<std::string> labeled;
  std::vector<std::string> unlabeled;
  std::uint64_t seed = 0;
  bool operator==(const DatasetSplit&) const = default;
};

/// floor(fraction * N) ids become labeled: a seeded shuffle prefix of the
/// sorted training ids. Pure function of (ids, fraction, seed).
inline DatasetSplit split_labels(std::vector<std::string> ids, Fraction fraction,
                                 std::uint64_t seed) {
  fraction.validate();
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  auto rng = Rng::derived(seed, 0x5b117);
  rng.shuffle(ids);
  const auto n_lab = static_cast<std::size_t>(
      (static_cast<long long>(ids.size()) * fraction.num) / fraction.den);
  DatasetSplit split;
  split.seed = seed;
  split.labeled.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_lab));
  split.unlabeled.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_lab), ids.end());
  return split;
}

inline DatasetSplit split_labels(const Dataset& ds, Fraction fraction, std::uint64_t seed) {
  return split_labels(ds.ids("train"), fraction, seed);
}

/// Draws items epoch by epoch: a fresh shuffled permutation of the pool is
/// consumed without replacement, then reshuffled. Batches larger than the
/// pool therefore repeat items, which is reported once on stderr.
class EpochSampler {
 public:
  EpochSampler(std::vector<std::size_t> pool, Rng rng, std::string what = "labeled set")
      : pool_(std::move(pool)), rng_(std::move(rng)), what_(std::move(what)) {
    detail::require(!pool_.empty(), "EpochSampler: " + what_ + " is empty");
  }

  std::vector<std::size_t> next(std::size_t batch) {
    if (batch > pool_.size() && !warned_) {
      std::cerr << "warning: batch of " << batch << " exceeds " << what_ << " of size "
                << pool_.size() << "; sampling with replacement across epochs\n";
      warned_ = true;
    }
    std::vector<std::size_t> out;
    out.reserve(batch);
    while (out.size() < batch) {
      if (pos_ >= order_.size()) {
        order_ = pool_;
        rng_.shuffle(order_);
        pos_ = 0;
        ++epoch_;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

  bool warned() const { return warned_; }
  int epochs_started() const { return epoch_; }
  std::size_t pool_size() const { return pool_.size(); }
  Rng& rng() { return rng_; }

 private:
  std::vector<std::size_t> pool_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  int epoch_ = 0;
  Rng rng_;
  std::string what_;
  bool warned_ = false;
};

/// Supervised segmentation batch: ED and ES frame of each sampled sequence,
/// interleaved as ED0, ES0, ED1, ES1, ...
struct LabeledFrameBatch {
  std::vector<std::string> ids;
  nn::Tensor frames;  ///< [2B, 3, H, W], normalised
  nn::Tensor masks;   ///< [2B, 1, H, W], values 0/1
};

inline LabeledFrameBatch sample_labeled_frames(const Dataset& ds,
                                               const std::vector<std::size_t>& seq_indices,
                                               const ChannelStats& st) {
  detail::require(!seq_indices.empty(), "sample_labeled_frames: empty labeled set");
  LabeledFrameBatch b;
  std::vector<const std::uint8_t*> frames;
  std::vector<const BinaryMask*> masks;
  int h = 0, w = 0;
  for (auto i : seq_indices) {
    const auto& s = ds.sequences.at(i);
    if (!s.labeled() || !s.ed_mask || !s.es_mask)
      throw ContractError("sample_labeled_frames: sequence '" + s.id + "' is not labeled");
    b.ids.push_back(s.id);
    frames.push_back(s.frame(*s.ed_index));
    masks.push_back(&*s.ed_mask);
    frames.push_back(s.frame(*s.es_index));
    masks.push_back(&*s.es_mask);
    h = s.height;
    w = s.width;
  }
  b.frames = frames_to_tensor(frames, h, w, st);
  b.masks = masks_to_tensor(masks);
  return b;
}

inline std::vector<std::size_t> indices_of(const Dataset& ds, const std::vector<std::string>& ids) {
  std::vector<std::size_t> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(ds.index_of(id));
  return out;
}

}  // namespace echocss::data
