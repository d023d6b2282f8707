#pragma once

// EF regression trainers.
//
//   multi-input teacher f_m:  L_m   = MSE(f_m(video + mask), EF)          labeled clips
//   distilled student f_e:    L_dst = L_lb + w_ulb * L_ulb
//     L_lb  = MSE(f_e(video), EF)              labeled clips
//     L_ulb = MSE(f_e(video), f_m(video + mask)) unlabeled clips, teacher frozen

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "echocss/data/sampling.hpp"
#include "echocss/error.hpp"
#include "echocss/nn/layers.hpp"
#include "echocss/regression/model.hpp"
#include "echocss/rng.hpp"
#include "echocss/segmentation/inference.hpp"

namespace echocss::reg {

/// Inferred masks keyed by sequence id.
using MaskBank = std::unordered_map<std::string, seg::VideoMasks>;

/// Video channels normalised with dataset statistics plus the foreground
/// probability of the same source frames as channel 3. The probability is
/// passed unnormalised in [0, 1]; `binary` substitutes the thresholded mask.
inline Tensor build_multi_input_clip(const data::ClipSample& clip, const seg::VideoMasks& masks,
                                     const data::ChannelStats& stats, bool binary = false) {
  if (masks.sequence_id != clip.sequence_id)
    throw ContractError("build_multi_input_clip: masks of '" + masks.sequence_id +
                        "' given for clip of '" + clip.sequence_id + "'");
  if (masks.height != clip.height || masks.width != clip.width)
    throw ContractError("build_multi_input_clip: mask size differs from frame size");
  if (static_cast<int>(masks.masks.size()) != masks.num_frames())
    throw ContractError("build_multi_input_clip: masks of '" + masks.sequence_id +
                        "' hold " + std::to_string(masks.masks.size()) + " binary frames for " +
                        std::to_string(masks.num_frames()) + " probability frames");
  const Tensor video = data::clip_tensor(clip, stats);
  Tensor prob(video.n(), 1, video.h(), video.w());
  const std::size_t plane = prob.plane();
  for (int i = 0; i < clip.length(); ++i) {
    const int t = clip.original_indices[static_cast<std::size_t>(i)];
    if (t < 0 || t >= masks.num_frames())
      throw ContractError("build_multi_input_clip: clip frame " + std::to_string(t) +
                          " has no inferred mask (video has " + std::to_string(masks.num_frames()) +
                          " masks)");
    float* dst = prob.sample(i);
    if (binary) {
      const auto& m = masks.masks[static_cast<std::size_t>(t)];
      for (std::size_t p = 0; p < plane; ++p) dst[p] = m.pixels[p];
    } else {
      std::copy_n(masks.probability(t), plane, dst);
    }
  }
  return nn::concat_channels(video, prob);
}

/// Maps a sampled clip to the model input tensor.
using InputBuilder = std::function<Tensor(const data::ClipSample&)>;

inline InputBuilder video_input(const data::ChannelStats& stats) {
  return [&stats](const data::ClipSample& clip) { return data::clip_tensor(clip, stats); };
}

inline InputBuilder multi_input(const MaskBank& bank, const data::ChannelStats& stats,
                                bool binary = false) {
  return [&bank, &stats, binary](const data::ClipSample& clip) {
    auto it = bank.find(clip.sequence_id);
    if (it == bank.end())
      throw ContractError("no inferred masks for sequence '" + clip.sequence_id + "'");
    return build_multi_input_clip(clip, it->second, stats, binary);
  };
}

enum class PredictionSource { Teacher, Student, Label };

inline std::string to_string(PredictionSource s) {
  switch (s) {
    case PredictionSource::Teacher: return "teacher";
    case PredictionSource::Student: return "student";
    case PredictionSource::Label: return "label";
  }
  return "unknown";
}

struct EfPrediction {
  double value = 0.0;
  std::string sequence_id;
  PredictionSource source = PredictionSource::Student;
  bool clamped = false;  ///< value was moved into [0, 100]
};

/// Mean squared error; used for every regression objective.
inline double mse(const std::vector<double>& preds, const std::vector<double>& targets) {
  detail::require(!preds.empty() && preds.size() == targets.size(), "mse: bad lengths");
  double acc = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) acc += (preds[i] - targets[i]) * (preds[i] - targets[i]);
  return acc / static_cast<double>(preds.size());
}

/// Frozen-teacher prediction for one clip; never clamped (it is a loss target).
inline EfPrediction pseudo_label(RegressionModel& teacher, const data::ClipSample& clip,
                                 const InputBuilder& input) {
  return {teacher.forward(input(clip)), clip.sequence_id, PredictionSource::Teacher, false};
}

struct RegTrainConfig {
  data::ClipSpec clip = data::kRegressionClip;
  int batch = 20;            ///< labeled clips per iteration
  int unlabeled_batch = 10;  ///< unlabeled clips per iteration (distillation)
  int epochs = 25;
  double lr = 1e-4;
  double momentum = 0.9;
  double grad_clip = 0.0;
  double w_ulb = 5.0;
  std::uint64_t seed = 0;

  void validate() const {
    detail::require(clip.length > 0 && clip.stride > 0, "RegTrainConfig: bad clip spec");
    detail::require(batch > 0 && unlabeled_batch >= 0 && epochs > 0,
                    "RegTrainConfig: batch sizes and epochs must be positive");
    detail::require(lr > 0.0 && momentum >= 0.0 && momentum < 1.0, "RegTrainConfig: bad optimizer");
    detail::require(w_ulb >= 0.0, "RegTrainConfig: w_ulb must be non-negative");
  }
};

/// One logged iteration. total == lb + w_ulb * ulb exactly.
struct RegLossBreakdown {
  int epoch = 0;
  int iteration = 0;
  double lb = 0.0;
  double ulb = 0.0;
  double w_ulb = 0.0;
  double total = 0.0;

  static RegLossBreakdown make(int epoch, int iteration, double lb, double ulb, double w_ulb) {
    return {epoch, iteration, lb, ulb, w_ulb, lb + w_ulb * ulb};
  }
};

using RegCallback = std::function<void(const RegLossBreakdown&)>;

inline constexpr std::uint64_t kStreamLabeledSeq = 21;
inline constexpr std::uint64_t kStreamLabeledClip = 22;
inline constexpr std::uint64_t kStreamUnlabeledSeq = 23;
inline constexpr std::uint64_t kStreamUnlabeledClip = 24;

/// Teacher used by train_distilled; frozen, evaluated only.
struct Teacher {
  RegressionModel* model = nullptr;
  InputBuilder input;
};

namespace train_detail {

// Forward/backward over a batch of clips with MSE against `targets`,
// gradients scaled by `weight`. Returns the unweighted MSE.
inline double mse_step(RegressionModel& model, const std::vector<Tensor>& inputs,
                       const std::vector<double>& targets, double weight) {
  const double inv = 1.0 / static_cast<double>(inputs.size());
  std::vector<double> preds;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const double p = model.forward(inputs[i]);
    preds.push_back(p);
    model.backward(weight * 2.0 * (p - targets[i]) * inv);
  }
  return mse(preds, targets);
}

}  // namespace train_detail

/// Trains `student` on labeled clips, plus teacher pseudo-labels on
/// unlabeled clips when a teacher is given and w_ulb > 0. Labeled and
/// unlabeled sampling use separate random streams, so w_ulb = 0 reproduces
/// the labeled-only run exactly.
inline std::vector<RegLossBreakdown> train_distilled(RegressionModel& student, const InputBuilder& input,
                                                     const data::Dataset& ds,
                                                     const data::DatasetSplit& split,
                                                     const RegTrainConfig& cfg,
                                                     const Teacher& teacher = {},
                                                     const RegCallback& on_iteration = {}) {
  cfg.validate();
  detail::require(!split.labeled.empty(), "train_distilled: labeled set is empty");
  for (const auto& id : split.labeled)
    if (!ds.get(id).ef) throw ContractError("train_distilled: labeled sequence '" + id + "' has no EF");
  const bool distill = teacher.model != nullptr && cfg.w_ulb > 0.0 && cfg.unlabeled_batch > 0;
  if (distill) {
    detail::require(!split.unlabeled.empty(), "train_distilled: unlabeled set is empty");
    detail::require(teacher.model != &student, "train_distilled: teacher and student must differ");
  }

  data::EpochSampler lab(data::indices_of(ds, split.labeled), Rng::derived(cfg.seed, kStreamLabeledSeq));
  Rng lab_clip = Rng::derived(cfg.seed, kStreamLabeledClip);
  std::optional<data::EpochSampler> ulb;
  if (distill)
    ulb.emplace(data::indices_of(ds, split.unlabeled), Rng::derived(cfg.seed, kStreamUnlabeledSeq),
                "unlabeled set");
  Rng ulb_clip = Rng::derived(cfg.seed, kStreamUnlabeledClip);

  const auto params = student.parameters();
  const nn::Sgd opt{cfg.lr, cfg.momentum};
  const int per_epoch = static_cast<int>((split.labeled.size() + cfg.batch - 1) / cfg.batch);
  std::vector<RegLossBreakdown> log;
  int iteration = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int it = 0; it < per_epoch; ++it, ++iteration) {
      nn::zero_grad(params);
      std::vector<Tensor> inputs;
      std::vector<double> targets;
      for (auto i : lab.next(static_cast<std::size_t>(cfg.batch))) {
        const auto& s = ds.sequences[i];
        inputs.push_back(input(data::sample_clip(s, cfg.clip, lab_clip)));
        targets.push_back(*s.ef);
      }
      const double lb = train_detail::mse_step(student, inputs, targets, 1.0);

      double ulb_loss = 0.0;
      if (distill) {
        inputs.clear();
        targets.clear();
        for (auto i : ulb->next(static_cast<std::size_t>(cfg.unlabeled_batch))) {
          const auto clip = data::sample_clip(ds.sequences[i], cfg.clip, ulb_clip);
          targets.push_back(pseudo_label(*teacher.model, clip, teacher.input).value);
          inputs.push_back(input(clip));
        }
        ulb_loss = train_detail::mse_step(student, inputs, targets, cfg.w_ulb);
      }

      const auto entry = RegLossBreakdown::make(epoch, iteration, lb, ulb_loss, distill ? cfg.w_ulb : 0.0);
      if (!std::isfinite(entry.total))
        throw NumericError("regression training diverged at epoch " + std::to_string(epoch) +
                           ", iteration " + std::to_string(iteration) +
                           "; lower the learning rate or enable gradient clipping");
      nn::clip_grad_norm(params, cfg.grad_clip);
      opt.step(params);
      log.push_back(entry);
      if (on_iteration) on_iteration(entry);
    }
  }
  return log;
}

/// Labeled-only MSE training (the multi-input teacher, or a supervised
/// student baseline).
inline std::vector<RegLossBreakdown> train_supervised(RegressionModel& model, const InputBuilder& input,
                                                      const data::Dataset& ds,
                                                      const data::DatasetSplit& split,
                                                      const RegTrainConfig& cfg,
                                                      const RegCallback& on_iteration = {}) {
  return train_distilled(model, input, ds, split, cfg, Teacher{}, on_iteration);
}

/// Mean EF of the labeled sequences; the natural output offset.
inline double mean_labeled_ef(const data::Dataset& ds, const std::vector<std::string>& ids) {
  detail::require(!ids.empty(), "mean_labeled_ef: no labeled sequences");
  double acc = 0.0;
  for (const auto& id : ids) {
    const auto& s = ds.get(id);
    if (!s.ef) throw ContractError("mean_labeled_ef: sequence '" + id + "' has no EF");
    acc += *s.ef;
  }
  return acc / static_cast<double>(ids.size());
}

/// EF for one video from `clips` clips with evenly spaced starts (the first
/// at index 0), averaged and clamped to [0, 100].
inline EfPrediction predict_ef(RegressionModel& model, const data::EchoSequence& seq,
                               const InputBuilder& input, data::ClipSpec spec = data::kRegressionClip,
                               int clips = 1,
                               PredictionSource source = PredictionSource::Student) {
  detail::require(clips >= 1, "predict_ef: clips must be >= 1");
  const auto plan = data::plan_clip(seq.num_frames(), spec);
  const int starts = plan.valid_starts(spec.length);
  const int n = std::min(clips, starts);
  double acc = 0.0;
  for (int k = 0; k < n; ++k) {
    const int start = n == 1 ? 0 : static_cast<int>(static_cast<long long>(k) * (starts - 1) / (n - 1));
    acc += model.forward(input(data::clip_at(seq, plan, spec.length, start)));
  }
  const double raw = acc / n;
  EfPrediction p{std::clamp(raw, 0.0, 100.0), seq.id, source, false};
  p.clamped = p.value != raw;
  if (!std::isfinite(raw)) throw NumericError("predict_ef: non-finite prediction for '" + seq.id + "'");
  return p;
}

}  // namespace echocss::reg
