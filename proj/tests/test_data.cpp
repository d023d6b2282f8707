#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "echocss/data/manifest.hpp"
#include "echocss/data/png_io.hpp"
#include "echocss/data/sampling.hpp"
#include "echocss/data/synthetic.hpp"

using namespace echocss;
using namespace echocss::data;
namespace fs = std::filesystem;

namespace {

EchoSequence tiny_sequence(int frames, int h = 4, int w = 4) {
  EchoSequence s;
  s.id = "tiny";
  s.height = h;
  s.width = w;
  s.frames.resize(static_cast<std::size_t>(frames) * s.frame_size());
  for (int t = 0; t < frames; ++t) std::fill_n(s.frame(t), s.frame_size(), static_cast<std::uint8_t>(t));
  return s;
}

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("echocss_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

const Dataset& small_synthetic() {
  static const Dataset ds = [] {
    SynthParams p;
    p.test_count = 2;
    return generate_synthetic(6, p, 17);
  }();
  return ds;
}

}  // namespace

TEST(Mirror, FourFramesBitExact) {
  const std::vector<std::string> v{"v1", "v2", "v3", "v4"};
  const std::vector<std::string> want{"v2", "v1", "v2", "v3", "v4", "v3", "v2"};
  EXPECT_EQ(temporal_mirror(v), want);
}

TEST(Mirror, LengthAndAdjacency) {
  for (int t = 2; t <= 64; t += 2) {
    const auto idx = mirror_indices(t);
    ASSERT_EQ(static_cast<int>(idx.size()), 2 * t - 1);
    for (std::size_t i = 1; i < idx.size(); ++i) EXPECT_EQ(std::abs(idx[i] - idx[i - 1]), 1) << "T=" << t;
  }
}

TEST(Mirror, OddAndSingleLengths) {
  EXPECT_EQ(mirror_indices(1), std::vector<int>{0});
  EXPECT_EQ(mirror_indices(3), (std::vector<int>{0, 1, 2, 1, 0}));
}

TEST(ClipSampling, CssSpanIs118Frames) {
  EXPECT_EQ(kCssClip.span(), 118);
  EXPECT_LE(kCssClip.span(), 120);
  const auto s = tiny_sequence(150);
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    const auto clip = sample_css_clip(s, rng);
    ASSERT_EQ(clip.length(), 40);
    EXPECT_EQ(clip.source_indices.back() - clip.source_indices.front() + 1, 118);
    EXPECT_FALSE(clip.mirrored);
    for (int k = 0; k < clip.length(); ++k) EXPECT_EQ(clip.frame(k)[0], clip.original_indices[k]);
  }
}

TEST(ClipSampling, ExactFitHasSingleStart) {
  const auto plan = plan_clip(118, kCssClip);
  EXPECT_EQ(plan.stride, 3);
  EXPECT_EQ(plan.valid_starts(40), 1);
}

TEST(ClipSampling, ShortVideoReducesStride) {
  const auto plan = plan_clip(60, kCssClip);
  EXPECT_FALSE(plan.mirrored);
  EXPECT_EQ(plan.stride, 1);
  const auto plan2 = plan_clip(100, kCssClip);
  EXPECT_EQ(plan2.stride, 2);
  EXPECT_LE(plan2.span(40), 100);
}

TEST(ClipSampling, VeryShortVideoIsMirrored) {
  const auto s = tiny_sequence(10);
  const auto clip = first_clip(s, kCssClip);
  EXPECT_TRUE(clip.mirrored);
  EXPECT_EQ(clip.length(), 40);
  for (int k = 1; k < clip.length(); ++k)
    EXPECT_LE(std::abs(clip.original_indices[k] - clip.original_indices[k - 1]), clip.stride);
  for (int o : clip.original_indices) EXPECT_TRUE(o >= 0 && o < 10);
}

TEST(ClipSampling, StartOutOfRangeThrows) {
  const auto s = tiny_sequence(118);
  const auto plan = plan_clip(118, kCssClip);
  EXPECT_THROW(clip_at(s, plan, 40, 1), IndexError);
}

TEST(ClipSampling, ClipTensorNormalises) {
  auto s = tiny_sequence(40);
  ChannelStats st;
  st.mean = {0.0, 0.0, 0.0};
  st.stddev = {1.0, 1.0, 1.0};
  const auto clip = first_clip(s, {4, 1});
  const auto x = clip_tensor(clip, st);
  EXPECT_EQ(x.n(), 4);
  EXPECT_EQ(x.c(), 3);
  EXPECT_FLOAT_EQ(x(3, 2, 1, 1), 3.0f / 255.0f);
}

TEST(Fraction, ParsesRationalAndDecimal) {
  EXPECT_EQ(Fraction::parse("1/8"), (Fraction{1, 8}));
  EXPECT_EQ(Fraction::parse("0.125"), (Fraction{1, 8}));
  EXPECT_EQ(Fraction::parse("1"), (Fraction{1, 1}));
  EXPECT_THROW(Fraction::parse("0"), ContractError);
  EXPECT_THROW(Fraction::parse("3/2"), ContractError);
  EXPECT_THROW(Fraction::parse("abc"), ContractError);
}

TEST(Split, DeterministicFloorAndDisjoint) {
  std::vector<std::string> ids;
  for (int i = 0; i < 150; ++i) ids.push_back(synthetic_id(i));
  const auto a = split_labels(ids, {1, 15}, 3);
  const auto b = split_labels(ids, {1, 15}, 3);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.labeled.size(), 10u);
  EXPECT_EQ(a.unlabeled.size(), 140u);
  std::set<std::string> all(a.labeled.begin(), a.labeled.end());
  all.insert(a.unlabeled.begin(), a.unlabeled.end());
  EXPECT_EQ(all.size(), 150u);
  EXPECT_NE(split_labels(ids, {1, 15}, 4).labeled, a.labeled);
  EXPECT_EQ(split_labels(ids, {1, 8}, 3).labeled.size(), 18u);
}

TEST(EpochSampler, VisitsEveryItemOncePerEpoch) {
  EpochSampler s({0, 1, 2, 3, 4}, Rng(2));
  auto a = s.next(5);
  std::sort(a.begin(), a.end());
  EXPECT_EQ(a, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
  EXPECT_FALSE(s.warned());
  s.next(7);
  EXPECT_TRUE(s.warned());
}

TEST(Sequence, ValidationCatchesBrokenLabels) {
  auto s = small_synthetic().sequences.front();
  EXPECT_NO_THROW(s.validate());
  auto no_mask = s;
  no_mask.es_mask.reset();
  EXPECT_THROW(no_mask.validate(), ValidationError);
  auto same = s;
  same.es_index = same.ed_index;
  EXPECT_THROW(same.validate(), ValidationError);
  auto bad_ef = s;
  bad_ef.ef = 120.0;
  EXPECT_THROW(bad_ef.validate(), ValidationError);
}

TEST(Sequence, LabeledFramesInterleaveEdEs) {
  const auto& ds = small_synthetic();
  const auto b = sample_labeled_frames(ds, {0, 1}, ds.stats);
  EXPECT_EQ(b.frames.n(), 4);
  EXPECT_EQ(b.masks.c(), 1);
  const auto& s0 = ds.sequences[0];
  EXPECT_FLOAT_EQ(b.masks(0, 0, 0, 0), s0.ed_mask->pixels[0]);
  std::size_t area = 0;
  for (std::size_t i = 0; i < b.masks.plane(); ++i) area += b.masks(1, 0, i / 64, i % 64) > 0.5f;
  EXPECT_EQ(area, s0.es_mask->area());
}

TEST(Synthetic, EfMatchesMaskAreasAndCycleMinimum) {
  const auto& ds = small_synthetic();
  ASSERT_EQ(ds.size(), 6u);
  EXPECT_EQ(ds.ids("test").size(), 2u);
  for (const auto& s : ds.sequences) {
    EXPECT_NO_THROW(s.validate());
    EXPECT_DOUBLE_EQ(*s.ef, ef_from_areas(static_cast<double>(s.ed_mask->area()),
                                         static_cast<double>(s.es_mask->area())));
    EXPECT_NEAR(*s.ef, ef_from_frame_masks(s), 1e-9);
    EXPECT_GE(s.num_frames(), 118);
    EXPECT_GT(s.ed_mask->area(), s.es_mask->area());
  }
}

TEST(Synthetic, DeterministicPerSeed) {
  SynthParams p;
  const auto a = generate_synthetic_video(3, p, 9);
  const auto b = generate_synthetic_video(3, p, 9);
  const auto c = generate_synthetic_video(3, p, 10);
  EXPECT_EQ(a.frames, b.frames);
  EXPECT_NE(a.frames, c.frames);
}

TEST(Synthetic, RejectsSingleCycle) {
  SynthParams p;
  p.cycles_min = p.cycles_max = 1.0;
  EXPECT_THROW(p.validate(4), ContractError);
}

TEST(Manifest, RoundTripIsExact) {
  const auto dir = scratch_dir("manifest");
  const auto& ds = small_synthetic();
  write_dataset(ds, dir);
  const auto back = load_manifest(dir);
  ASSERT_EQ(back.size(), ds.size());
  EXPECT_EQ(back.stats, ds.stats);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& a = ds.sequences[i];
    const auto& b = back.sequences[i];
    EXPECT_EQ(a.id, b.id);
    EXPECT_EQ(a.split, b.split);
    EXPECT_EQ(a.frames, b.frames);
    EXPECT_EQ(a.ef, b.ef);
    EXPECT_EQ(a.ed_index, b.ed_index);
    EXPECT_EQ(a.ed_mask->pixels, b.ed_mask->pixels);
    EXPECT_EQ(a.frame_masks.size(), b.frame_masks.size());
  }
  fs::remove_all(dir);
}

TEST(Manifest, RejectsWrongHeader) {
  const auto dir = scratch_dir("badheader");
  std::ofstream(dir / "manifest.csv") << "id,ef\nx,50\n";
  EXPECT_THROW(load_manifest(dir), ValidationError);
  fs::remove_all(dir);
}

TEST(Png, RoundTrip) {
  const auto dir = scratch_dir("png");
  Image img{3, 5, 3, {}};
  for (int i = 0; i < 45; ++i) img.pixels.push_back(static_cast<std::uint8_t>(i * 5));
  write_png((dir / "a.png").string(), img);
  const auto back = read_png((dir / "a.png").string(), 3);
  EXPECT_EQ(back.pixels, img.pixels);
  EXPECT_EQ(back.width, 5);
  fs::remove_all(dir);
}

TEST(Numbers, FormatDoubleRoundTrips) {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, 12345.678901234567, -2.5})
    EXPECT_EQ(parse_double(format_double(v), "v"), v);
  EXPECT_THROW(parse_double("1.5x", "v"), ValidationError);
}
