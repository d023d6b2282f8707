// Acceptance suite: prints one PASS/FAIL line per criterion and exits
// non-zero if any fails. Pass criterion numbers as arguments to run a
// subset, e.g. `acceptance 1 4 7`.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "echocss/css.hpp"
#include "echocss/data/sampling.hpp"
#include "echocss/data/synthetic.hpp"
#include "echocss/evaluation/metrics.hpp"
#include "echocss/evaluation/saliency.hpp"
#include "echocss/pipeline/config.hpp"
#include "echocss/pipeline/experiment.hpp"
#include "echocss/regression/train.hpp"
#include "echocss/segmentation/train.hpp"

using namespace echocss;
using css::Matrix;
using nn::Tensor;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int prec = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, v);
  return buf;
}

Matrix normal_matrix(Rng& rng, int rows, int cols, double scale) {
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  return m;
}

// 1. Analytic CSS gradient vs central differences, every coordinate.
Verdict gradient_check() {
  const auto t0 = Clock::now();
  const css::RegionPartition part;
  const css::CssConfig cfg;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng = Rng::derived(seed, 1);
    const css::EmbeddingSequence seq(normal_matrix(rng, 40, 8, 0.5));
    const auto pstar = css::sample_pstars(rng, cfg, 1).front();
    worst = std::max(worst, css::gradient_check(seq, part, cfg, pstar, 1e-6, rng, 40 * 8));
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60.0,
          "max rel err " + fmt(worst) + " over 20 seeds (< 1e-4), " + fmt(secs, 3) + " s (< 60 s)"};
}

// 2. Constant embeddings: loss = ln |P|.
Verdict constant_baseline() {
  const css::RegionPartition part;
  const css::CssConfig cfg;
  double worst = 0.0;
  for (double v : {0.0, 1.0, -3.5})
    for (std::size_t p = 0; p <= 12; ++p)
      worst = std::max(worst, std::abs(css::css_loss_value(css::EmbeddingSequence(Matrix::Constant(40, 8, v)),
                                                           part, cfg, p) -
                                       std::log(15.0)));
  return {worst < 1e-6, "max |loss - ln 15| = " + fmt(worst) + " (< 1e-6)"};
}

// 3. Periodic embeddings lock onto p* + c, with one or two matching phases.
Verdict cyclicality() {
  const css::RegionPartition part;
  css::CssConfig cfg;
  cfg.tau = 100.0;
  int unique_hits = 0, double_hits = 0;
  double worst_unique = 0.0, worst_double = 0.0;
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    Rng rng = Rng::derived(trial, 3);
    const auto pstar = css::sample_pstars(rng, cfg, 1).front();

    // Exactly periodic with period 21 = |Q|: a single q in Q matches p*.
    const Matrix cycle = normal_matrix(rng, 21, 8, 1.0);
    Matrix z(40, 8);
    for (int t = 0; t < 40; ++t) z.row(t) = cycle.row(t % 21);
    auto tr = css::css_forward(css::EmbeddingSequence(z), part, cfg, pstar);
    unique_hits += tr.beta.argmax() == pstar + cfg.c;
    worst_unique = std::max(worst_unique, tr.loss);

    // Random sequence with the window [p*, p* + c + s) copied to two
    // non-overlapping starts q1 < q2 in Q.
    Matrix y = normal_matrix(rng, 40, 8, 1.0);
    const int w = static_cast<int>(cfg.c + cfg.s);
    const int q1 = 15 + static_cast<int>(rng.index(11));
    const int q2 = q1 + w + static_cast<int>(rng.index(static_cast<std::size_t>(35 - q1 - w + 1)));
    for (int k = 0; k < w; ++k) {
      y.row(q1 + k) = y.row(static_cast<int>(pstar) + k);
      y.row(q2 + k) = y.row(static_cast<int>(pstar) + k);
    }
    tr = css::css_forward(css::EmbeddingSequence(y), part, cfg, pstar);
    double_hits += tr.beta.argmax() == pstar + cfg.c;
    worst_double = std::max(worst_double, tr.loss);
  }
  return {unique_hits == 100 && double_hits == 100 && worst_unique < 1e-3 && worst_double < 1e-3,
          "unique match " + std::to_string(unique_hits) + "/100 (max loss " + fmt(worst_unique) +
              "), two matches " + std::to_string(double_hits) + "/100 (max loss " + fmt(worst_double) +
              "), tau = 100"};
}

// 4. css_loss(lambda z, tau) = css_loss(z, lambda^2 tau).
Verdict scale_covariance() {
  const css::RegionPartition part;
  double worst = 0.0;
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    Rng rng = Rng::derived(trial, 4);
    const Matrix z = normal_matrix(rng, 40, 8, 0.3);
    const auto pstar = static_cast<std::size_t>(rng.index(13));
    for (double lambda : {0.5, 2.0, 10.0}) {
      css::CssConfig a, b;
      a.tau = 10.0;
      b.tau = lambda * lambda * 10.0;
      const double la = css::css_loss_value(css::EmbeddingSequence(Matrix(lambda * z)), part, a, pstar);
      const double lb = css::css_loss_value(css::EmbeddingSequence(z), part, b, pstar);
      worst = std::max(worst, std::abs(la - lb) / std::max(std::abs(lb), 1e-300));
    }
  }
  return {worst < 1e-9, "max relative difference " + fmt(worst) + " for lambda in {0.5, 2, 10} (< 1e-9)"};
}

// 5. The CSS clip covers exactly 118 source frames.
Verdict clip_arithmetic() {
  bool ok = data::kCssClip.span() == 118 && data::kCssClip.span() <= 120;
  int clips = 0;
  for (int frames : {118, 119, 150, 240}) {
    data::EchoSequence s;
    s.id = "v";
    s.height = s.width = 2;
    s.frames.assign(static_cast<std::size_t>(frames) * s.frame_size(), 0);
    const auto plan = data::plan_clip(frames, data::kCssClip);
    ok = ok && plan.stride == 3 && !plan.mirrored;
    for (int start = 0; start < plan.valid_starts(40); ++start, ++clips) {
      const auto c = data::clip_at(s, plan, 40, start);
      ok = ok && c.length() == 40 && c.original_indices.back() - c.original_indices.front() + 1 == 118;
    }
  }
  return {ok, "span " + std::to_string(data::kCssClip.span()) + " frames (<= 120), " + std::to_string(clips) +
                  " clips checked"};
}

// 6. Mirroring.
Verdict mirroring() {
  const std::vector<std::string> v{"v1", "v2", "v3", "v4"};
  bool ok = data::temporal_mirror(v) == std::vector<std::string>{"v2", "v1", "v2", "v3", "v4", "v3", "v2"};
  for (int t = 2; t <= 64; t += 2) {
    const auto idx = data::mirror_indices(t);
    ok = ok && static_cast<int>(idx.size()) == 2 * t - 1;
    for (std::size_t i = 1; i < idx.size(); ++i) ok = ok && std::abs(idx[i] - idx[i - 1]) == 1;
  }
  return {ok, "T=4 bit-exact, length 2T-1 and adjacency for T = 2, 4, ..., 64"};
}

// 7. Metrics vs brute force on 1000 random instances each.
Verdict metric_oracles() {
  Rng rng(77);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.index(50);
    std::vector<double> p(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = rng.uniform(0.0, 100.0);
      y[i] = rng.uniform(0.0, 100.0);
    }
    double abs_sum = 0.0, mean = 0.0, ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      abs_sum += std::abs(p[i] - y[i]);
      mean += y[i];
    }
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      ss_res += (y[i] - p[i]) * (y[i] - p[i]);
      ss_tot += (y[i] - mean) * (y[i] - mean);
    }
    worst = std::max(worst, std::abs(eval::mae(p, y) - abs_sum / static_cast<double>(n)));
    worst = std::max(worst, std::abs(eval::r_squared(p, y) - (1.0 - ss_res / ss_tot)));
  }
  for (int trial = 0; trial < 1000; ++trial) {
    const int h = 2 + static_cast<int>(rng.index(15)), w = 2 + static_cast<int>(rng.index(15));
    const std::size_t n = static_cast<std::size_t>(h * w);
    data::BinaryMask a(h, w), b(h, w);
    const double pa = rng.uniform(), pb = rng.uniform();
    for (std::size_t i = 0; i < n; ++i) {
      a.pixels[i] = rng.uniform() < pa;
      b.pixels[i] = rng.uniform() < pb;
    }
    double inter = 0, sa = 0, sb = 0;
    for (std::size_t i = 0; i < n; ++i) {
      inter += a.pixels[i] && b.pixels[i];
      sa += a.pixels[i];
      sb += b.pixels[i];
    }
    const double want = sa + sb == 0 ? 1.0 : 2.0 * inter / (sa + sb);
    worst = std::max(worst, std::abs(eval::dice(a, b) - want));

    // Top-k: a pixel is selected when fewer than ceil(k n) pixels outrank it.
    std::vector<double> sal(n);
    for (auto& s : sal) s = rng.index(4) == 0 ? 0.0 : rng.uniform();
    const double k = rng.uniform(0.01, 0.99);
    const auto keep = static_cast<std::size_t>(std::ceil(k * static_cast<double>(n)));
    data::BinaryMask top(h, w);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t before = 0;
      for (std::size_t j = 0; j < n; ++j) before += sal[j] > sal[i] || (sal[j] == sal[i] && j < i);
      top.pixels[i] = before < keep;
    }
    double ti = 0, ts = 0;
    for (std::size_t i = 0; i < n; ++i) {
      ti += top.pixels[i] && b.pixels[i];
      ts += top.pixels[i];
    }
    const double want_top = ts + sb == 0 ? 1.0 : 2.0 * ti / (ts + sb);
    worst = std::max(worst, std::abs(eval::top_gradient_dice(sal.data(), b, k) - want_top));
  }
  return {worst < 1e-9, "max |metric - brute force| = " + fmt(worst) + " over 1000 instances each (< 1e-9)"};
}

// 8. w_css = 0 is the supervised loop; w_ulb = 0 is labeled-only training.
Verdict reductions() {
  data::SynthParams sp;
  sp.height = sp.width = 32;
  const auto ds = data::generate_synthetic(8, sp, 8);
  data::DatasetSplit split;
  for (int i = 0; i < 8; ++i) (i < 3 ? split.labeled : split.unlabeled).push_back(data::synthetic_id(i));

  seg::SegConfig sarch;
  sarch.widths = {4, 8};
  seg::JointConfig jc;
  jc.css.w_css = 0.0;
  jc.batch = 2;
  jc.epochs = 3;
  jc.lr = 0.05;
  jc.grad_clip = 1.0;
  jc.seed = 5;
  Rng ra(1), rb(1);
  seg::SegmentationModel a(sarch, ra), b(sarch, rb);
  const auto log = seg::train_joint(a, ds, split, jc);
  data::EpochSampler sampler(data::indices_of(ds, split.labeled), Rng::derived(jc.seed, seg::kStreamSupervised));
  const auto ps = b.parameters();
  const nn::Sgd opt{jc.lr, jc.momentum};
  bool seg_equal = true;
  for (const auto& e : log) {
    nn::zero_grad(ps);
    const auto batch = data::sample_labeled_frames(ds, sampler.next(2), ds.stats);
    const auto l = seg::seg_loss(b.forward(batch.frames), batch.masks);
    b.backward(l.grad);
    nn::clip_grad_norm(ps, jc.grad_clip);
    opt.step(ps);
    seg_equal = seg_equal && e.seg == l.loss && e.total == l.loss;
  }

  reg::MaskBank bank;
  for (const auto& s : ds.sequences) bank.emplace(s.id, seg::infer_masks(a, s, ds.stats));
  reg::RegConfig rarch;
  rarch.widths = {4, 4};
  rarch.hidden = 8;
  reg::RegTrainConfig rc;
  rc.clip = {8, 2};
  rc.batch = 2;
  rc.unlabeled_batch = 2;
  rc.epochs = 3;
  rc.lr = 1e-3;
  rc.w_ulb = 0.0;
  rc.seed = 6;
  auto tarch = rarch;
  tarch.in_channels = 4;
  Rng rt(2), rs1(3), rs2(3);
  reg::RegressionModel teacher(tarch, rt), s1(rarch, rs1), s2(rarch, rs2);
  const auto l1 = reg::train_distilled(s1, reg::video_input(ds.stats), ds, split, rc,
                                       {&teacher, reg::multi_input(bank, ds.stats)});
  const auto l2 = reg::train_supervised(s2, reg::video_input(ds.stats), ds, split, rc);
  bool reg_equal = l1.size() == l2.size();
  for (std::size_t i = 0; reg_equal && i < l1.size(); ++i) reg_equal = l1[i].total == l2[i].total;
  const auto p1 = s1.parameters(), p2 = s2.parameters();
  for (std::size_t i = 0; reg_equal && i < p1.size(); ++i)
    reg_equal = std::equal(p1[i]->value.values().begin(), p1[i]->value.values().end(), p2[i]->value.values().begin());
  return {seg_equal && reg_equal, std::string("w_css = 0 trajectory ") + (seg_equal ? "identical" : "DIFFERS") +
                                      " over " + std::to_string(log.size()) + " iterations; w_ulb = 0 " +
                                      (reg_equal ? "identical" : "DIFFERS") + " to labeled-only"};
}

// 9. Desk-scale pipeline, three seeds.
Verdict desk_trend() {
  const auto t0 = Clock::now();
  const pipeline::RunConfig desk = pipeline::preset("desk");
  data::SynthParams sp = desk.synth_params();
  sp.height = sp.width = 64;
  sp.test_count = 30;
  const auto ds = data::generate_synthetic(180, sp, 2024);
  const auto test = ds.ids("test");

  std::vector<double> dice_sup, dice_css, mae_m, mae_e;
  for (std::uint64_t seed : {1, 2, 3}) {
    pipeline::RunConfig rc = desk;
    rc.seed = seed;
    rc.label_fraction = {1, 15};
    const auto split = data::split_labels(ds, rc.label_fraction, seed);

    pipeline::RunConfig sup = rc;
    sup.css_w = 0.0;
    auto base = pipeline::train_segmentation(sup, ds, split);
    dice_sup.push_back(
        pipeline::evaluate_segmentation(*base.model, ds, test, rc.seg_threshold, seed, "sup").dice_unlabeled);
    base.model.reset();

    auto joint = pipeline::train_segmentation(rc, ds, split);
    dice_css.push_back(
        pipeline::evaluate_segmentation(*joint.model, ds, test, rc.seg_threshold, seed, "css").dice_unlabeled);

    const auto bank = pipeline::infer_bank(*joint.model, ds, ds.ids(""), rc.seg_threshold);
    joint.model.reset();
    auto teacher = pipeline::train_teacher(rc, ds, split, bank);
    mae_m.push_back(pipeline::evaluate_regression(*teacher.model, ds, test,
                                                  reg::multi_input(bank, ds.stats, rc.reg_mask_binary), rc,
                                                  reg::PredictionSource::Teacher, "f_m")
                        .report.mae);
    auto student = pipeline::train_student(rc, ds, split, teacher.model.get(), &bank);
    mae_e.push_back(pipeline::evaluate_regression(*student.model, ds, test, reg::video_input(ds.stats), rc,
                                                  reg::PredictionSource::Student, "f_e")
                        .report.mae);
    std::cout << "  seed " << seed << ": labeled " << split.labeled.size() << ", unlabeled-frame Dice sup "
              << fmt(dice_sup.back(), 5) << " css " << fmt(dice_css.back(), 5) << ", MAE f_m "
              << fmt(mae_m.back(), 4) << " f_e " << fmt(mae_e.back(), 4) << " (" << fmt(seconds_since(t0), 4)
              << " s)" << std::endl;
  }
  const double ds_ = eval::mean_of(dice_sup), dc = eval::mean_of(dice_css);
  const double mm = eval::mean_of(mae_m), me = eval::mean_of(mae_e);
  const double secs = seconds_since(t0);
  const bool a = dc >= ds_, b = me <= mm + 0.5, t = secs < 3 * 3600.0;
  return {a && b && t, std::string("(a) ") + (a ? "ok" : "FAIL") + " Dice css " + fmt(dc, 5) + " vs sup " +
                           fmt(ds_, 5) + "; (b) " + (b ? "ok" : "FAIL") + " MAE f_e " + fmt(me, 4) + " vs f_m " +
                           fmt(mm, 4) + " + 0.5; " + fmt(secs / 60.0, 3) + " min CPU (< 180)"};
}

// A fixed regressor that reads only pixels inside the ground-truth LV of
// each frame: y = sum_t sum_{p in M_t} mean_c x_{t,c,p}^2.
struct LvOnlyRegressor {
  std::vector<const data::BinaryMask*> masks;
  Tensor input_gradient(const Tensor& x) const {
    Tensor g(x.n(), x.c(), x.h(), x.w());
    for (int t = 0; t < x.n(); ++t)
      for (int c = 0; c < x.c(); ++c)
        for (int i = 0; i < x.h() * x.w(); ++i)
          if (masks[static_cast<std::size_t>(t)]->pixels[static_cast<std::size_t>(i)])
            g(t, c, i / x.w(), i % x.w()) = 2.0f * x(t, c, i / x.w(), i % x.w()) / static_cast<float>(x.c());
    return g;
  }
};

// 10. SmoothGrad on that regressor lands inside the LV.
Verdict saliency() {
  data::SynthParams sp;
  const auto ds = data::generate_synthetic(5, sp, 10);
  std::vector<double> dices;
  for (const auto& s : ds.sequences) {
    const auto clip = data::first_clip(s, data::kRegressionClip);
    LvOnlyRegressor model;
    for (int t : clip.original_indices) model.masks.push_back(&s.frame_masks[static_cast<std::size_t>(t)]);
    const auto map = eval::smoothgrad(model, data::clip_tensor(clip, ds.stats), {25, 0.1, 3});
    for (int i = 0; i < map.frames; ++i)
      dices.push_back(eval::top_gradient_dice(map, i, *model.masks[static_cast<std::size_t>(i)], 0.05));
  }
  const double mean = eval::mean_of(dices);
  return {mean > 0.5, "mean top-5% gradient Dice " + fmt(mean, 4) + " over " + std::to_string(dices.size()) +
                          " frames (> 0.5)"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"CSS gradient check", gradient_check},
      {"constant-embedding baseline", constant_baseline},
      {"cyclicality", cyclicality},
      {"scale/temperature covariance", scale_covariance},
      {"clip arithmetic", clip_arithmetic},
      {"mirroring", mirroring},
      {"metric oracles", metric_oracles},
      {"reductions", reductions},
      {"desk-scale end-to-end trend", desk_trend},
      {"saliency pipeline", saliency},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoi(argv[i]));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failures += !v.pass;
    std::cout << "criterion " << id << " " << (v.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << ": "
              << v.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
