#pragma once

// Joint objective L_vol = L_seg + w_css * L_css. The supervised term uses the
// ED and ES frames of sampled labeled sequences; the CSS term uses strided
// clips drawn from labeled and unlabeled sequences alike. Both terms share
// the encoder; only the supervised term reaches the decoder.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "echocss/css.hpp"
#include "echocss/data/sampling.hpp"
#include "echocss/error.hpp"
#include "echocss/nn/layers.hpp"
#include "echocss/rng.hpp"
#include "echocss/segmentation/model.hpp"

namespace echocss::seg {

struct SegLoss {
  double loss = 0.0;
  Tensor grad;  ///< d loss / d logits
};

/// Mean binary cross-entropy over every pixel of the batch.
inline SegLoss seg_loss(const Tensor& logits, const Tensor& masks) {
  if (!logits.same_shape(masks))
    throw ContractError("seg_loss: logits " + logits.shape_string() + " vs masks " +
                        masks.shape_string());
  detail::require(logits.size() > 0, "seg_loss: empty batch");
  SegLoss out;
  out.grad = Tensor(logits.n(), logits.c(), logits.h(), logits.w());
  const double inv = 1.0 / static_cast<double>(logits.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double x = logits[i], y = masks[i];
    acc += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
    const double p = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    out.grad[i] = static_cast<float>((p - y) * inv);
  }
  out.loss = acc * inv;
  return out;
}

/// One logged iteration. total == seg + w_css * css exactly.
struct LossBreakdown {
  int epoch = 0;
  int iteration = 0;
  double seg = 0.0;
  double css = 0.0;
  double w_css = 0.0;
  double total = 0.0;

  static LossBreakdown make(int epoch, int iteration, double seg, double css, double w_css) {
    return {epoch, iteration, seg, css, w_css, seg + w_css * css};
  }
};

/// Clip [L, 3, H, W] -> embedding sequence [L, d] in double precision.
inline css::EmbeddingSequence to_embedding_sequence(const Tensor& z,
                                                    const std::vector<int>& clip_indices) {
  css::Matrix m(z.n(), z.c());
  for (int t = 0; t < z.n(); ++t)
    for (int k = 0; k < z.c(); ++k) m(t, k) = z(t, k, 0, 0);
  css::EmbeddingSequence seq(std::move(m));
  seq.clip_indices.assign(clip_indices.begin(), clip_indices.end());
  return seq;
}

inline css::EmbeddingSequence encode_clip(SegmentationModel& model, const data::ClipSample& clip,
                                          const data::ChannelStats& stats) {
  const Tensor x = data::clip_tensor(clip, stats);
  return to_embedding_sequence(model.embed(x), clip.source_indices);
}

struct JointConfig {
  css::CssConfig css;
  css::RegionPartition partition;
  data::ClipSpec clip = data::kCssClip;
  int batch = 20;         ///< labeled sequences per iteration (two frames each)
  int epochs = 25;
  double lr = 1e-5;
  double momentum = 0.9;
  double grad_clip = 0.0;  ///< global norm cap; 0 disables
  std::uint64_t seed = 0;

  void validate() const {
    css::validate_config(css, partition);
    detail::require(static_cast<std::size_t>(clip.length) == partition.clip_length(),
                    "JointConfig: CSS clip length must equal the region partition length");
    detail::require(batch > 0 && epochs > 0, "JointConfig: batch and epochs must be positive");
    detail::require(lr > 0.0 && momentum >= 0.0 && momentum < 1.0, "JointConfig: bad optimizer");
    detail::require(css.w_css >= 0.0, "JointConfig: w_css must be non-negative");
  }
};

/// Iterations per epoch: every labeled sequence used once.
inline int iterations_per_epoch(std::size_t labeled, int batch) {
  return static_cast<int>((labeled + static_cast<std::size_t>(batch) - 1) / batch);
}

// RNG stream ids. Supervised and CSS sampling draw from separate streams so
// the supervised trajectory does not depend on whether CSS runs.
inline constexpr std::uint64_t kStreamSupervised = 11;
inline constexpr std::uint64_t kStreamCssClip = 12;
inline constexpr std::uint64_t kStreamPstar = 13;

using LossCallback = std::function<void(const LossBreakdown&)>;

/// Trains `model` in place and returns the per-iteration loss log.
inline std::vector<LossBreakdown> train_joint(SegmentationModel& model, const data::Dataset& ds,
                                              const data::DatasetSplit& split,
                                              const JointConfig& cfg,
                                              const LossCallback& on_iteration = {}) {
  cfg.validate();
  detail::require(!split.labeled.empty(), "train_joint: labeled set is empty");
  data::EpochSampler sup(data::indices_of(ds, split.labeled), Rng::derived(cfg.seed, kStreamSupervised));
  auto pool = data::indices_of(ds, split.labeled);
  for (auto i : data::indices_of(ds, split.unlabeled)) pool.push_back(i);
  Rng clip_rng = Rng::derived(cfg.seed, kStreamCssClip);
  Rng pstar_rng = Rng::derived(cfg.seed, kStreamPstar);

  const auto params = model.parameters();
  const nn::Sgd opt{cfg.lr, cfg.momentum};
  const int per_epoch = iterations_per_epoch(split.labeled.size(), cfg.batch);
  const bool use_css = cfg.css.w_css > 0.0;

  std::vector<LossBreakdown> log;
  log.reserve(static_cast<std::size_t>(per_epoch) * cfg.epochs);
  int iteration = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int it = 0; it < per_epoch; ++it, ++iteration) {
      nn::zero_grad(params);

      const auto batch = data::sample_labeled_frames(ds, sup.next(static_cast<std::size_t>(cfg.batch)),
                                                     ds.stats);
      const auto sl = seg_loss(model.forward(batch.frames), batch.masks);
      model.backward(sl.grad);

      double css_value = 0.0;
      if (use_css) {
        const auto& seq = ds.sequences[pool[clip_rng.index(pool.size())]];
        const auto clip = data::sample_clip(seq, cfg.clip, clip_rng);
        const auto emb = encode_clip(model, clip, ds.stats);
        const auto pstars = css::sample_pstars(pstar_rng, cfg.css, 1);
        const auto res = css::css_loss(std::span<const css::EmbeddingSequence>(&emb, 1),
                                       cfg.partition, cfg.css, pstars);
        css_value = res.loss;
        if (std::isfinite(css_value)) {
          const auto& g = res.gradients.front();
          Tensor dz(static_cast<int>(g.rows()), static_cast<int>(g.cols()), 1, 1);
          for (Eigen::Index t = 0; t < g.rows(); ++t)
            for (Eigen::Index k = 0; k < g.cols(); ++k)
              dz(static_cast<int>(t), static_cast<int>(k), 0, 0) =
                  static_cast<float>(cfg.css.w_css * g(t, k));
          model.embed_backward(dz);
        }
      }

      const auto entry = LossBreakdown::make(epoch, iteration, sl.loss, css_value, cfg.css.w_css);
      if (!std::isfinite(entry.total))
        throw NumericError("train_joint: non-finite loss at epoch " + std::to_string(epoch) +
                           ", iteration " + std::to_string(iteration) + " (seg " +
                           std::to_string(sl.loss) + ", css " + std::to_string(css_value) +
                           "); lower the learning rate or enable gradient clipping");
      nn::clip_grad_norm(params, cfg.grad_clip);
      opt.step(params);
      log.push_back(entry);
      if (on_iteration) on_iteration(entry);
    }
  }
  return log;
}

}  // namespace echocss::seg
