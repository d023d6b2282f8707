#pragma once

// SmoothGrad saliency, top-k gradient Dice, frame-similarity matrices and
// PNG heatmap export.

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <numeric>
#include <string>
#include <vector>

#include "echocss/css.hpp"
#include "echocss/data/png_io.hpp"
#include "echocss/data/sequence.hpp"
#include "echocss/error.hpp"
#include "echocss/nn/tensor.hpp"
#include "echocss/rng.hpp"
#include "echocss/segmentation/inference.hpp"

namespace echocss::eval {

/// A scalar-output model exposing d output / d input for one clip.
template <class M>
concept DifferentiableVideoModel = requires(M& m, const nn::Tensor& x) {
  { m.input_gradient(x) } -> std::convertible_to<nn::Tensor>;
};

struct SmoothGradParams {
  int n_samples = 25;
  double sigma_fraction = 0.1;  ///< noise std as a fraction of the input's max - min
  std::uint64_t seed = 0;
};

/// Per-frame saliency [L x H x W], non-negative.
struct SaliencyMap {
  int frames = 0;
  int height = 0;
  int width = 0;
  std::vector<double> values;
  SmoothGradParams params;

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  const double* frame(int t) const { return values.data() + static_cast<std::size_t>(t) * plane(); }
  double* frame(int t) { return values.data() + static_cast<std::size_t>(t) * plane(); }
};

/// Mean over noisy copies of |d output / d pixel|, averaged over channels.
template <DifferentiableVideoModel M>
SaliencyMap smoothgrad(M& model, const nn::Tensor& clip, const SmoothGradParams& p = {}) {
  detail::require(p.n_samples >= 1, "smoothgrad: n_samples must be >= 1");
  detail::require(p.sigma_fraction >= 0.0, "smoothgrad: sigma must be non-negative");
  detail::require(!clip.empty(), "smoothgrad: empty clip");
  const auto [lo, hi] = std::minmax_element(clip.values().begin(), clip.values().end());
  const double sigma = p.sigma_fraction * static_cast<double>(*hi - *lo);

  SaliencyMap map;
  map.frames = clip.n();
  map.height = clip.h();
  map.width = clip.w();
  map.params = p;
  map.values.assign(static_cast<std::size_t>(clip.n()) * clip.plane(), 0.0);
  Rng rng = Rng::derived(p.seed, 0x5a11e);
  const double scale = 1.0 / (static_cast<double>(p.n_samples) * clip.c());
  nn::Tensor noisy = clip;
  for (int k = 0; k < p.n_samples; ++k) {
    if (sigma > 0.0) {
      for (std::size_t i = 0; i < noisy.size(); ++i)
        noisy[i] = clip[i] + static_cast<float>(sigma * rng.normal());
    }
    const nn::Tensor g = model.input_gradient(noisy);
    detail::require(g.same_shape(clip), "smoothgrad: gradient shape differs from input");
    for (int t = 0; t < clip.n(); ++t) {
      double* dst = map.frame(t);
      for (int c = 0; c < clip.c(); ++c) {
        const float* src = g.sample(t) + c * clip.plane();
        for (std::size_t i = 0; i < clip.plane(); ++i) dst[i] += std::abs(src[i]) * scale;
      }
    }
  }
  return map;
}

/// Keeps the ceil(k * H * W) highest pixels; ties go to the earlier pixel in
/// row-major order.
inline data::BinaryMask top_k_mask(const double* values, int height, int width, double k) {
  if (!(k > 0.0 && k < 1.0)) throw ContractError("top_k_mask: k must lie in (0, 1)");
  const std::size_t n = static_cast<std::size_t>(height) * width;
  const auto keep = std::min(n, static_cast<std::size_t>(std::ceil(k * static_cast<double>(n))));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [values](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  data::BinaryMask m(height, width);
  for (std::size_t i = 0; i < keep; ++i) m.pixels[order[i]] = 1;
  return m;
}

inline double top_gradient_dice(const double* saliency, const data::BinaryMask& label, double k = 0.05) {
  return dice(top_k_mask(saliency, label.height, label.width, k), label);
}

/// Top-k Dice for frame t of a saliency map.
inline double top_gradient_dice(const SaliencyMap& map, int t, const data::BinaryMask& label,
                                double k = 0.05) {
  detail::require(map.height == label.height && map.width == label.width,
                  "top_gradient_dice: saliency and mask sizes differ");
  detail::require(t >= 0 && t < map.frames, "top_gradient_dice: frame out of range");
  return top_gradient_dice(map.frame(t), label, k);
}

/// M[a][b] = ||row_a - row_b||, divided by the largest entry (all zeros if
/// every row is identical).
inline css::Matrix frame_similarity_matrix(const css::Matrix& rows) {
  const auto t = rows.rows();
  detail::require(t >= 2, "frame_similarity_matrix: need at least two frames");
  css::Matrix m = css::Matrix::Zero(t, t);
  double mx = 0.0;
  for (Eigen::Index a = 0; a < t; ++a)
    for (Eigen::Index b = a + 1; b < t; ++b) {
      const double d = (rows.row(a) - rows.row(b)).norm();
      m(a, b) = m(b, a) = d;
      mx = std::max(mx, d);
    }
  if (mx > 0.0) m /= mx;
  return m;
}

inline css::Matrix frame_similarity_matrix(const css::EmbeddingSequence& seq) {
  return frame_similarity_matrix(seq.values);
}

/// Raw pixel version over all frames of a video.
inline css::Matrix frame_similarity_matrix(const data::EchoSequence& s) {
  css::Matrix rows(s.num_frames(), static_cast<Eigen::Index>(s.frame_size()));
  for (int t = 0; t < s.num_frames(); ++t) {
    const auto* f = s.frame(t);
    for (std::size_t i = 0; i < s.frame_size(); ++i) rows(t, static_cast<Eigen::Index>(i)) = f[i] / 255.0;
  }
  return frame_similarity_matrix(rows);
}

/// Blue-cyan-yellow-red colour ramp for v in [0, 1].
inline std::array<std::uint8_t, 3> heat_color(double v) {
  v = std::clamp(v, 0.0, 1.0);
  const double r = std::clamp(1.5 - std::abs(4.0 * v - 3.0), 0.0, 1.0);
  const double g = std::clamp(1.5 - std::abs(4.0 * v - 2.0), 0.0, 1.0);
  const double b = std::clamp(1.5 - std::abs(4.0 * v - 1.0), 0.0, 1.0);
  return {static_cast<std::uint8_t>(std::lround(r * 255)), static_cast<std::uint8_t>(std::lround(g * 255)),
          static_cast<std::uint8_t>(std::lround(b * 255))};
}

/// Saliency of one frame scaled to [0, 1] by its own min and max, blended
/// over the grey frame.
inline data::Image heatmap_overlay(const std::uint8_t* frame_rgb_planar, const double* saliency,
                                   int height, int width, double alpha = 0.5) {
  const std::size_t n = static_cast<std::size_t>(height) * width;
  const auto [lo, hi] = std::minmax_element(saliency, saliency + n);
  const double range = *hi - *lo;
  data::Image img{height, width, 3, std::vector<std::uint8_t>(n * 3)};
  for (std::size_t i = 0; i < n; ++i) {
    const double v = range > 0.0 ? (saliency[i] - *lo) / range : 0.0;
    const auto c = heat_color(v);
    const double grey = frame_rgb_planar[i];
    for (int k = 0; k < 3; ++k)
      img.pixels[i * 3 + k] = static_cast<std::uint8_t>(std::lround((1.0 - alpha) * grey + alpha * c[k]));
  }
  return img;
}

inline void write_heatmap_png(const std::string& path, const std::uint8_t* frame_rgb_planar,
                              const double* saliency, int height, int width, double alpha = 0.5) {
  data::write_png(path, heatmap_overlay(frame_rgb_planar, saliency, height, width, alpha));
}

/// Similarity matrix rendered with the heat colour ramp.
inline void write_matrix_png(const std::string& path, const css::Matrix& m) {
  data::Image img{static_cast<int>(m.rows()), static_cast<int>(m.cols()), 3,
                  std::vector<std::uint8_t>(static_cast<std::size_t>(m.size()) * 3)};
  for (Eigen::Index a = 0; a < m.rows(); ++a)
    for (Eigen::Index b = 0; b < m.cols(); ++b) {
      const auto c = heat_color(m(a, b));
      const auto i = static_cast<std::size_t>(a * m.cols() + b) * 3;
      std::copy(c.begin(), c.end(), img.pixels.begin() + static_cast<std::ptrdiff_t>(i));
    }
  data::write_png(path, img);
}

}  // namespace echocss::eval
