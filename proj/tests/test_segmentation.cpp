#include <gtest/gtest.h>

#include <cmath>

#include "echocss/data/synthetic.hpp"
#include "echocss/segmentation/inference.hpp"
#include "echocss/segmentation/model.hpp"
#include "echocss/segmentation/train.hpp"

using namespace echocss;
using nn::Tensor;

namespace {

const data::Dataset& corpus() {
  static const data::Dataset ds = [] {
    data::SynthParams p;
    p.height = p.width = 32;
    p.test_count = 2;
    return data::generate_synthetic(8, p, 5);
  }();
  return ds;
}

seg::SegConfig small_arch() {
  seg::SegConfig c;
  c.widths = {4, 8};
  return c;
}

seg::JointConfig small_joint(double w_css) {
  seg::JointConfig j;
  j.css.w_css = w_css;
  j.batch = 2;
  j.epochs = 2;
  j.lr = 0.05;
  j.grad_clip = 1.0;
  j.seed = 4;
  return j;
}

data::DatasetSplit small_split() {
  data::DatasetSplit s;
  s.labeled = {data::synthetic_id(0), data::synthetic_id(1), data::synthetic_id(2)};
  s.unlabeled = {data::synthetic_id(3), data::synthetic_id(4), data::synthetic_id(5)};
  return s;
}

}  // namespace

TEST(SegLoss, MatchesHandComputedBce) {
  Tensor logits(1, 1, 1, 2), masks(1, 1, 1, 2);
  logits[0] = 2.0f;
  logits[1] = -1.0f;
  masks[0] = 1.0f;
  masks[1] = 1.0f;
  const auto out = seg::seg_loss(logits, masks);
  const double expected = 0.5 * (std::log1p(std::exp(-2.0)) + std::log1p(std::exp(1.0)));
  EXPECT_NEAR(out.loss, expected, 1e-7);
  EXPECT_NEAR(out.grad[0], 0.5 * (1.0 / (1.0 + std::exp(-2.0)) - 1.0), 1e-7);
  EXPECT_NEAR(out.grad[1], 0.5 * (1.0 / (1.0 + std::exp(1.0)) - 1.0), 1e-7);
}

TEST(SegLoss, StableForLargeLogits) {
  Tensor logits(1, 1, 1, 2), masks(1, 1, 1, 2);
  logits[0] = 500.0f;
  logits[1] = -500.0f;
  masks[1] = 1.0f;
  const auto out = seg::seg_loss(logits, masks);
  EXPECT_TRUE(std::isfinite(out.loss));
  EXPECT_NEAR(out.loss, 500.0, 1e-3);
}

TEST(SegLoss, RejectsShapeMismatch) {
  EXPECT_THROW(seg::seg_loss(Tensor(1, 1, 4, 4), Tensor(1, 1, 4, 5)), ContractError);
}

TEST(SegModel, ShapesAndContracts) {
  Rng rng(1);
  seg::SegmentationModel model(small_arch(), rng);
  const Tensor x(3, 3, 32, 32, 0.1f);
  EXPECT_EQ(model.forward(x).c(), 1);
  EXPECT_EQ(model.forward(x).h(), 32);
  const Tensor z = model.embed(x);
  EXPECT_EQ(z.n(), 3);
  EXPECT_EQ(z.c(), 8);
  EXPECT_EQ(z.h(), 1);
  EXPECT_THROW(model.forward(Tensor(1, 3, 31, 32)), ContractError);
  EXPECT_THROW(model.forward(Tensor(1, 1, 32, 32)), ContractError);
  EXPECT_EQ(model.parameters().size(), model.encoder_parameters().size() + model.decoder_parameters().size());
}

TEST(SegModel, EmbedBackwardTouchesOnlyEncoder) {
  Rng rng(2);
  seg::SegmentationModel model(small_arch(), rng);
  nn::zero_grad(model.parameters());
  const Tensor x(2, 3, 32, 32, 0.3f);
  const Tensor z = model.embed(x);
  model.embed_backward(Tensor(z.n(), z.c(), 1, 1, 1.0f));
  EXPECT_GT(nn::grad_norm(model.encoder_parameters()), 0.0);
  EXPECT_EQ(nn::grad_norm(model.decoder_parameters()), 0.0);
}

TEST(Dice, OracleCases) {
  data::BinaryMask a(2, 2), b(2, 2);
  EXPECT_DOUBLE_EQ(seg::dice(a, b), 1.0);
  a.pixels = {1, 1, 0, 0};
  b.pixels = {1, 0, 1, 0};
  EXPECT_DOUBLE_EQ(seg::dice(a, b), 0.5);
  EXPECT_DOUBLE_EQ(seg::dice(a, a), 1.0);
  b.pixels = {0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(seg::dice(a, b), 0.0);
  EXPECT_THROW(seg::dice(a, data::BinaryMask(2, 3)), ContractError);
  b.pixels[0] = 2;
  EXPECT_THROW(seg::dice(a, b), ContractError);
}

TEST(Inference, MasksCoverEveryFrame) {
  Rng rng(3);
  seg::SegmentationModel model(small_arch(), rng);
  const auto& s = corpus().sequences.front();
  const auto vm = seg::infer_masks(model, s, corpus().stats, 0.5, 16);
  EXPECT_EQ(vm.num_frames(), s.num_frames());
  EXPECT_EQ(vm.probabilities.size(), static_cast<std::size_t>(s.num_frames()) * 32 * 32);
  for (int t = 0; t < vm.num_frames(); t += 17)
    for (std::size_t i = 0; i < 1024; ++i)
      EXPECT_EQ(vm.masks[t].pixels[i], vm.probability(t)[i] >= 0.5f ? 1 : 0);
  EXPECT_THROW(seg::infer_masks(model, s, corpus().stats, 1.0), ContractError);
}

TEST(Inference, ChunkSizeDoesNotChangeResult) {
  Rng rng(3);
  seg::SegmentationModel model(small_arch(), rng);
  const auto& s = corpus().sequences.front();
  EXPECT_EQ(seg::infer_masks(model, s, corpus().stats, 0.5, 7).probabilities,
            seg::infer_masks(model, s, corpus().stats, 0.5, 64).probabilities);
}

TEST(JointTraining, LossBreakdownIsExact) {
  const auto e = seg::LossBreakdown::make(0, 3, 0.25, 2.0, 0.01);
  EXPECT_DOUBLE_EQ(e.total, 0.25 + 0.01 * 2.0);
}

// With w_css = 0 the trainer must follow exactly the plain supervised loop.
TEST(JointTraining, ZeroWeightReducesToSupervisedLoop) {
  const auto& ds = corpus();
  const auto split = small_split();
  const auto cfg = small_joint(0.0);

  Rng r1(9);
  seg::SegmentationModel a(small_arch(), r1);
  const auto log = seg::train_joint(a, ds, split, cfg);

  Rng r2(9);
  seg::SegmentationModel b(small_arch(), r2);
  data::EpochSampler sampler(data::indices_of(ds, split.labeled), Rng::derived(cfg.seed, seg::kStreamSupervised));
  const auto ps = b.parameters();
  const nn::Sgd opt{cfg.lr, cfg.momentum};
  std::vector<double> ref;
  for (int i = 0; i < cfg.epochs * seg::iterations_per_epoch(split.labeled.size(), cfg.batch); ++i) {
    nn::zero_grad(ps);
    const auto batch = data::sample_labeled_frames(ds, sampler.next(2), ds.stats);
    const auto l = seg::seg_loss(b.forward(batch.frames), batch.masks);
    b.backward(l.grad);
    nn::clip_grad_norm(ps, cfg.grad_clip);
    opt.step(ps);
    ref.push_back(l.loss);
  }
  ASSERT_EQ(log.size(), ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) {
    EXPECT_EQ(log[i].seg, ref[i]);
    EXPECT_EQ(log[i].css, 0.0);
    EXPECT_EQ(log[i].total, log[i].seg);
  }
}

TEST(JointTraining, CssTermIsLoggedAndFirstSupervisedStepUnchanged) {
  const auto& ds = corpus();
  const auto split = small_split();
  Rng r1(9), r2(9);
  seg::SegmentationModel a(small_arch(), r1), b(small_arch(), r2);
  const auto base = seg::train_joint(a, ds, split, small_joint(0.0));
  const auto joint = seg::train_joint(b, ds, split, small_joint(0.1));
  EXPECT_EQ(base.front().seg, joint.front().seg);
  for (const auto& e : joint) {
    EXPECT_GT(e.css, 0.0);
    EXPECT_DOUBLE_EQ(e.total, e.seg + 0.1 * e.css);
  }
}

TEST(JointTraining, RejectsMismatchedClip) {
  auto cfg = small_joint(0.1);
  cfg.clip = {32, 3};
  EXPECT_THROW(cfg.validate(), ContractError);
}

TEST(JointTraining, DeterministicAcrossRuns) {
  const auto& ds = corpus();
  Rng r1(9), r2(9);
  seg::SegmentationModel a(small_arch(), r1), b(small_arch(), r2);
  const auto la = seg::train_joint(a, ds, small_split(), small_joint(0.1));
  const auto lb = seg::train_joint(b, ds, small_split(), small_joint(0.1));
  for (std::size_t i = 0; i < la.size(); ++i) EXPECT_EQ(la[i].total, lb[i].total);
}
