#pragma once

// Synthetic cyclical echo-like videos. Each video shows a dark elliptical
// cavity with a bright wall whose area oscillates periodically between an
// end-diastolic maximum and an end-systolic minimum. An equally dark atrium
// below it pulsates in antiphase, a static dark blob acts as a distractor,
// and a smooth background texture, per-video gain and per-frame noise are
// added.
//
// Volume is proxied by area^(3/2), so EF = 100 * (1 - (A_ES / A_ED)^(3/2)).
// The stored EF label is computed from the rasterised ED/ES mask areas, so
// it agrees exactly with the per-frame ground-truth masks.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <string>
#include <vector>

#include "echocss/data/sequence.hpp"
#include "echocss/error.hpp"
#include "echocss/rng.hpp"

namespace echocss::data {

struct SynthParams {
  int height = 64;
  int width = 64;
  int period_min = 32;  ///< frames per cycle; even periods only
  int period_max = 48;
  double cycles_min = 3.7;  ///< 3.7 x 32 > 118, so the default CSS clip fits
  double cycles_max = 4.5;
  double ef_min = 25.0;
  double ef_max = 75.0;
  double noise = 0.03;  ///< std of additive noise on the [0, 1] scale
  double fps = 50.0;
  int test_count = 0;  ///< trailing videos assigned to the "test" split

  void validate(int count) const {
    detail::require(count > 0, "synthetic: count must be positive");
    detail::require(height >= 16 && width >= 16, "synthetic: frames must be at least 16x16");
    detail::require(period_min >= 4, "synthetic: period must be at least 4 frames");
    detail::require(period_max >= period_min, "synthetic: empty period range");
    detail::require((period_max / 2) * 2 >= period_min, "synthetic: period range has no even value");
    detail::require(cycles_min >= 2.0,
                    "synthetic: at least two cycles per video are required for cyclical matching");
    detail::require(cycles_max >= cycles_min, "synthetic: empty cycles range");
    detail::require(ef_min > 0.0 && ef_max < 100.0 && ef_min <= ef_max,
                    "synthetic: EF range must lie inside (0, 100)");
    detail::require(noise >= 0.0, "synthetic: noise must be non-negative");
    detail::require(fps > 0.0, "synthetic: fps must be positive");
    detail::require(test_count >= 0 && test_count <= count,
                    "synthetic: test_count " + std::to_string(test_count) + " must lie in [0, " +
                        std::to_string(count) + "]");
  }
};

/// A_ES / A_ED for a target EF under the area^(3/2) volume proxy.
inline double area_ratio_for_ef(double ef) { return std::pow(1.0 - ef / 100.0, 2.0 / 3.0); }

inline double ef_from_areas(double area_ed, double area_es) {
  detail::require(area_ed > 0.0, "ef_from_areas: ED area must be positive");
  return 100.0 * (1.0 - std::pow(area_es / area_ed, 1.5));
}

/// EF recomputed from the largest and smallest per-frame mask areas.
inline double ef_from_frame_masks(const EchoSequence& s) {
  detail::require(!s.frame_masks.empty(), "ef_from_frame_masks: no per-frame masks");
  std::size_t lo = s.frame_masks.front().area(), hi = lo;
  for (const auto& m : s.frame_masks) {
    lo = std::min(lo, m.area());
    hi = std::max(hi, m.area());
  }
  return ef_from_areas(static_cast<double>(hi), static_cast<double>(lo));
}

namespace synth_detail {

struct Ellipse {
  double cx, cy, a, b, cos_t, sin_t;

  // normalised radius of pixel centre (x + 0.5, y + 0.5) at unit scale
  double rho(int x, int y) const {
    const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
    const double u = dx * cos_t + dy * sin_t;
    const double v = -dx * sin_t + dy * cos_t;
    return std::sqrt((u / a) * (u / a) + (v / b) * (v / b));
  }
};

// smooth field in [0, 1]: bilinear upsampling of a coarse random grid
inline std::vector<double> smooth_field(int h, int w, int grid, Rng& rng) {
  std::vector<double> g(static_cast<std::size_t>(grid + 1) * (grid + 1));
  for (auto& v : g) v = rng.uniform();
  std::vector<double> out(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    const double gy = (y + 0.5) / h * grid;
    const int y0 = std::min(static_cast<int>(gy), grid - 1);
    const double fy = gy - y0;
    for (int x = 0; x < w; ++x) {
      const double gx = (x + 0.5) / w * grid;
      const int x0 = std::min(static_cast<int>(gx), grid - 1);
      const double fx = gx - x0;
      auto at = [&](int yy, int xx) { return g[static_cast<std::size_t>(yy) * (grid + 1) + xx]; };
      out[static_cast<std::size_t>(y) * w + x] =
          (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
          fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
    }
  }
  return out;
}

}  // namespace synth_detail

inline constexpr double kCavityLevel = 0.08;
inline constexpr double kDistractorLevel = 0.14;

inline std::string synthetic_id(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "synth_%05d", i);
  return buf;
}

/// Renders video `index` of a synthetic corpus. Each video draws from its
/// own stream derived from (seed, index), so a video does not depend on the
/// corpus size.
inline EchoSequence generate_synthetic_video(int index, const SynthParams& p, std::uint64_t seed) {
  using synth_detail::Ellipse;
  auto rng = Rng::derived(seed, static_cast<std::uint64_t>(index) + 1);
  const int h = p.height, w = p.width;

  const int half_lo = (p.period_min + 1) / 2, half_hi = p.period_max / 2;
  const int period = 2 * static_cast<int>(rng.integer(half_lo, half_hi));
  const double cycles = rng.uniform(p.cycles_min, p.cycles_max);
  const int frames = static_cast<int>(std::ceil(cycles * period));
  const int t0 = static_cast<int>(rng.index(static_cast<std::size_t>(period)));

  const double theta = rng.uniform(-0.4, 0.4);
  const double cos_t = std::cos(theta), sin_t = std::sin(theta);
  Ellipse lv{w * rng.uniform(0.38, 0.5), h * rng.uniform(0.3, 0.38), w * rng.uniform(0.13, 0.17),
             h * rng.uniform(0.18, 0.23), cos_t, sin_t};
  // atrium below the ventricle along its long axis, filling while it empties
  const double at_a = lv.a * rng.uniform(0.75, 0.9), at_b = lv.b * rng.uniform(0.4, 0.5);
  const double at_off = lv.b * 1.3 + at_b * 1.15;
  Ellipse atrium{lv.cx - sin_t * at_off, lv.cy + cos_t * at_off, at_a, at_b, cos_t, sin_t};
  Ellipse distractor{w * rng.uniform(0.74, 0.82), h * rng.uniform(0.72, 0.8),
                     w * rng.uniform(0.07, 0.1), h * rng.uniform(0.07, 0.1), 1.0, 0.0};
  const double target_ef = rng.uniform(p.ef_min, p.ef_max);
  const double ratio = area_ratio_for_ef(target_ef);
  const double atrium_ratio = rng.uniform(0.5, 0.7);
  const double gain = rng.uniform(0.8, 1.15);
  const double wall = 1.3;

  const auto coarse = synth_detail::smooth_field(h, w, 6, rng);
  std::vector<double> fine(static_cast<std::size_t>(h) * w);
  for (auto& v : fine) v = rng.uniform(-0.06, 0.06);
  std::vector<double> rho_lv(fine.size()), rho_at(fine.size()), rho_d(fine.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto i = static_cast<std::size_t>(y) * w + x;
      rho_lv[i] = lv.rho(x, y);
      rho_at[i] = atrium.rho(x, y);
      rho_d[i] = distractor.rho(x, y);
    }

  EchoSequence s;
  s.id = synthetic_id(index);
  s.height = h;
  s.width = w;
  s.fps = p.fps;
  s.frames.resize(static_cast<std::size_t>(frames) * s.frame_size());
  s.frame_masks.reserve(static_cast<std::size_t>(frames));
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int t = 0; t < frames; ++t) {
    // integer phase keeps frames one period apart bit-identical
    const int k = ((t - t0) % period + period) % period;
    const double wgt = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * k / period));
    const double scale = std::sqrt(1.0 - (1.0 - ratio) * wgt);
    const double at_scale = std::sqrt(1.0 - (1.0 - atrium_ratio) * (1.0 - wgt));
    BinaryMask mask(h, w);
    std::uint8_t* f = s.frame(t);
    for (std::size_t i = 0; i < plane; ++i) {
      const double r = rho_lv[i] / scale;
      const double ra = rho_at[i] / at_scale;
      double v;
      if (r <= 1.0) {
        v = kCavityLevel + 0.5 * fine[i];
        mask.pixels[i] = 1;
      } else if (r <= wall) {
        v = 0.72 + 0.15 * coarse[i] + fine[i];
      } else if (ra <= 1.0) {
        v = kCavityLevel + 0.5 * fine[i];
      } else if (ra <= 1.35) {
        v = 0.6 + 0.15 * coarse[i] + fine[i];
      } else if (rho_d[i] <= 1.0) {
        v = kDistractorLevel;
      } else if (rho_d[i] <= 1.25) {
        v = 0.5 + 0.1 * coarse[i];
      } else {
        v = 0.28 + 0.2 * coarse[i] + fine[i];
      }
      v *= gain;
      if (p.noise > 0.0) v += p.noise * rng.normal();
      const auto q = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      f[i] = f[plane + i] = f[2 * plane + i] = q;
    }
    s.frame_masks.push_back(std::move(mask));
  }

  const int ed = t0;
  const int es = t0 + period / 2;
  s.ed_index = ed;
  s.es_index = es;
  s.ed_mask = s.frame_masks[static_cast<std::size_t>(ed)];
  s.es_mask = s.frame_masks[static_cast<std::size_t>(es)];
  s.ef = ef_from_areas(static_cast<double>(s.ed_mask->area()),
                       static_cast<double>(s.es_mask->area()));
  return s;
}

/// `count` videos; the last p.test_count go to the "test" split. Channel
/// statistics are computed over the training split.
inline Dataset generate_synthetic(int count, const SynthParams& p, std::uint64_t seed) {
  p.validate(count);
  Dataset ds;
  ds.sequences.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    auto s = generate_synthetic_video(i, p, seed);
    s.split = i < count - p.test_count ? "train" : "test";
    ds.sequences.push_back(std::move(s));
  }
  auto train = ds.ids("train");
  ds.stats = compute_channel_stats(ds, train.empty() ? ds.ids("") : train);
  return ds;
}

}  // namespace echocss::data
