#pragma once

// In-memory pipeline stages shared by the command-line tool and the tests:
// segmentation training, mask inference, teacher and student training, and
// test-set evaluation.

#include <memory>
#include <string>
#include <vector>

#include "echocss/data/sampling.hpp"
#include "echocss/evaluation/metrics.hpp"
#include "echocss/pipeline/config.hpp"
#include "echocss/regression/model.hpp"
#include "echocss/regression/train.hpp"
#include "echocss/rng.hpp"
#include "echocss/segmentation/inference.hpp"
#include "echocss/segmentation/model.hpp"
#include "echocss/segmentation/train.hpp"

namespace echocss::pipeline {

// Weight initialisation streams, disjoint from the trainers' sampling streams.
inline constexpr std::uint64_t kStreamInitSeg = 1;
inline constexpr std::uint64_t kStreamInitTeacher = 2;
inline constexpr std::uint64_t kStreamInitStudent = 3;

struct SegOutcome {
  std::unique_ptr<seg::SegmentationModel> model;
  std::vector<seg::LossBreakdown> log;
  std::string rng_state;  ///< init stream state after construction
};

inline SegOutcome train_segmentation(const RunConfig& rc, const data::Dataset& ds,
                                     const data::DatasetSplit& split,
                                     const seg::LossCallback& on_iteration = {}) {
  SegOutcome out;
  Rng init = Rng::derived(rc.seed, kStreamInitSeg);
  out.model = std::make_unique<seg::SegmentationModel>(rc.seg_config(), init);
  out.rng_state = init.state();
  out.log = seg::train_joint(*out.model, ds, split, rc.joint_config(), on_iteration);
  return out;
}

/// Thresholded prediction for a single frame.
inline data::BinaryMask segment_frame(seg::SegmentationModel& model, const data::EchoSequence& s, int t,
                                      const data::ChannelStats& stats, double threshold) {
  const auto logits = model.logits(data::sequence_frames(s, {t}, stats));
  data::BinaryMask m(s.height, s.width);
  for (std::size_t i = 0; i < m.pixels.size(); ++i)
    m.pixels[i] = seg::sigmoid(logits[i]) >= threshold ? 1 : 0;
  return m;
}

inline reg::MaskBank infer_bank(seg::SegmentationModel& model, const data::Dataset& ds,
                                const std::vector<std::string>& ids, double threshold) {
  reg::MaskBank bank;
  for (const auto& id : ids) bank.emplace(id, seg::infer_masks(model, ds.get(id), ds.stats, threshold));
  return bank;
}

/// ED/ES Dice on the test ids, plus Dice on one protocol-drawn unlabeled
/// frame per video when per-frame ground truth exists.
inline eval::MetricReport evaluate_segmentation(seg::SegmentationModel& model, const data::Dataset& ds,
                                                const std::vector<std::string>& ids, double threshold,
                                                std::uint64_t seed, const std::string& name) {
  eval::MetricReport r;
  r.name = name;
  r.seeds = {seed};
  std::vector<double> ed, es, unl;
  for (const auto& id : ids) {
    const auto& s = ds.get(id);
    if (s.ed_mask && s.ed_index) ed.push_back(eval::dice(segment_frame(model, s, *s.ed_index, ds.stats, threshold), *s.ed_mask));
    if (s.es_mask && s.es_index) es.push_back(eval::dice(segment_frame(model, s, *s.es_index, ds.stats, threshold), *s.es_mask));
  }
  for (const auto& [id, t] : eval::unlabeled_frame_protocol(ds, ids, seed)) {
    const auto& s = ds.get(id);
    if (s.frame_masks.empty()) continue;
    unl.push_back(eval::dice(segment_frame(model, s, t, ds.stats, threshold),
                             s.frame_masks[static_cast<std::size_t>(t)]));
  }
  r.n = ed.size();
  if (!ed.empty()) r.dice_ed = eval::mean_of(ed);
  if (!es.empty()) r.dice_es = eval::mean_of(es);
  if (!unl.empty()) r.dice_unlabeled = eval::mean_of(unl);
  return r;
}

struct RegOutcome {
  std::unique_ptr<reg::RegressionModel> model;
  std::vector<reg::RegLossBreakdown> log;
  std::string rng_state;
};

/// Multi-input teacher on video plus inferred-mask clips.
inline RegOutcome train_teacher(const RunConfig& rc, const data::Dataset& ds, const data::DatasetSplit& split,
                                const reg::MaskBank& bank, const reg::RegCallback& on_iteration = {}) {
  RegOutcome out;
  Rng init = Rng::derived(rc.seed, kStreamInitTeacher);
  out.model = std::make_unique<reg::RegressionModel>(
      rc.reg_config(4, reg::mean_labeled_ef(ds, split.labeled)), init);
  out.rng_state = init.state();
  out.log = reg::train_supervised(*out.model, reg::multi_input(bank, ds.stats, rc.reg_mask_binary), ds, split,
                                  rc.reg_train_config(), on_iteration);
  return out;
}

/// Video-only student; distilled from `teacher` when one is given.
inline RegOutcome train_student(const RunConfig& rc, const data::Dataset& ds, const data::DatasetSplit& split,
                                reg::RegressionModel* teacher, const reg::MaskBank* bank,
                                const reg::RegCallback& on_iteration = {}) {
  RegOutcome out;
  Rng init = Rng::derived(rc.seed, kStreamInitStudent);
  out.model = std::make_unique<reg::RegressionModel>(
      rc.reg_config(3, reg::mean_labeled_ef(ds, split.labeled)), init);
  out.rng_state = init.state();
  reg::Teacher t;
  if (teacher != nullptr) {
    detail::require(bank != nullptr, "train_student: a teacher needs a mask bank");
    t = {teacher, reg::multi_input(*bank, ds.stats, rc.reg_mask_binary)};
  }
  out.log = reg::train_distilled(*out.model, reg::video_input(ds.stats), ds, split,
                                 rc.reg_train_config(true), t, on_iteration);
  return out;
}

struct RegressionEval {
  std::vector<reg::EfPrediction> predictions;
  std::vector<double> labels;
  eval::MetricReport report;
};

/// Predicts every labeled test id and scores MAE and R^2.
inline RegressionEval evaluate_regression(reg::RegressionModel& model, const data::Dataset& ds,
                                          const std::vector<std::string>& ids, const reg::InputBuilder& input,
                                          const RunConfig& rc, reg::PredictionSource source,
                                          const std::string& name) {
  RegressionEval out;
  out.report.name = name;
  out.report.seeds = {rc.seed};
  std::vector<double> values;
  for (const auto& id : ids) {
    const auto& s = ds.get(id);
    if (!s.ef) continue;
    auto p = reg::predict_ef(model, s, input, rc.reg_clip(), rc.reg_eval_clips, source);
    out.report.clamped += p.clamped ? 1 : 0;
    values.push_back(p.value);
    out.labels.push_back(*s.ef);
    out.predictions.push_back(std::move(p));
  }
  out.report.n = values.size();
  if (!values.empty()) out.report.mae = eval::mae(values, out.labels);
  if (values.size() >= 2) {
    try {
      out.report.r2 = eval::r_squared(values, out.labels);
    } catch (const NumericError&) {
      // constant labels: R^2 stays NaN
    }
  }
  return out;
}

}  // namespace echocss::pipeline
