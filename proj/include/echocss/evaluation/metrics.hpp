#pragma once

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "echocss/data/sequence.hpp"
#include "echocss/error.hpp"
#include "echocss/rng.hpp"
#include "echocss/segmentation/inference.hpp"

namespace echocss::eval {

using seg::dice;

inline double mae(const std::vector<double>& preds, const std::vector<double>& labels) {
  detail::require(!preds.empty(), "mae: empty input");
  detail::require(preds.size() == labels.size(), "mae: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) acc += std::abs(preds[i] - labels[i]);
  return acc / static_cast<double>(preds.size());
}

/// Coefficient of determination 1 - SS_res / SS_tot.
inline double r_squared(const std::vector<double>& preds, const std::vector<double>& labels) {
  detail::require(preds.size() >= 2, "r_squared: need at least two samples");
  detail::require(preds.size() == labels.size(), "r_squared: length mismatch");
  double mean = 0.0;
  for (double y : labels) mean += y;
  mean /= static_cast<double>(labels.size());
  double ss_tot = 0.0, ss_res = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ss_tot += (labels[i] - mean) * (labels[i] - mean);
    ss_res += (labels[i] - preds[i]) * (labels[i] - preds[i]);
  }
  if (ss_tot == 0.0) throw NumericError("r_squared: undefined for constant labels");
  return 1.0 - ss_res / ss_tot;
}

inline double mean_of(const std::vector<double>& v) {
  detail::require(!v.empty(), "mean_of: empty input");
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

/// One non-ED, non-ES frame per video, drawn from a stream seeded by
/// (seed, video position). Videos with fewer than three frames are skipped.
inline std::vector<std::pair<std::string, int>> unlabeled_frame_protocol(
    const data::Dataset& ds, const std::vector<std::string>& ids, std::uint64_t seed) {
  std::vector<std::pair<std::string, int>> out;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const auto& s = ds.get(ids[k]);
    std::vector<int> candidates;
    for (int t = 0; t < s.num_frames(); ++t)
      if (t != s.ed_index.value_or(-1) && t != s.es_index.value_or(-1)) candidates.push_back(t);
    if (candidates.empty()) continue;
    Rng rng = Rng::derived(seed, 0xd1ce0000ULL + k);
    out.emplace_back(s.id, candidates[rng.index(candidates.size())]);
  }
  return out;
}

/// Test-set summary. Fields that were not measured stay NaN.
struct MetricReport {
  std::string name;
  double mae = std::nan("");
  double r2 = std::nan("");
  double dice_ed = std::nan("");
  double dice_es = std::nan("");
  double dice_unlabeled = std::nan("");
  std::size_t n = 0;
  std::size_t clamped = 0;
  std::vector<std::uint64_t> seeds;
};

inline std::string format_metric(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

inline void write_metrics_csv(const std::string& path, const std::vector<MetricReport>& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write '" + path + "'");
  os << "name,n,mae,r2,dice_ed,dice_es,dice_unlabeled,clamped,seeds\n";
  for (const auto& r : rows) {
    std::string seeds;
    for (std::size_t i = 0; i < r.seeds.size(); ++i) seeds += (i ? ";" : "") + std::to_string(r.seeds[i]);
    os << r.name << ',' << r.n << ',' << format_metric(r.mae) << ',' << format_metric(r.r2) << ','
       << format_metric(r.dice_ed) << ',' << format_metric(r.dice_es) << ','
       << format_metric(r.dice_unlabeled) << ',' << r.clamped << ',' << seeds << "\n";
  }
}

inline std::string summary_text(const std::vector<MetricReport>& rows) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  for (const auto& r : rows) {
    os << r.name << " (n=" << r.n << ")\n";
    if (!std::isnan(r.mae)) os << "  MAE            " << r.mae << " EF points\n";
    if (!std::isnan(r.r2)) os << "  R^2            " << r.r2 << "\n";
    if (!std::isnan(r.dice_ed)) os << "  Dice ED        " << r.dice_ed << "\n";
    if (!std::isnan(r.dice_es)) os << "  Dice ES        " << r.dice_es << "\n";
    if (!std::isnan(r.dice_unlabeled)) os << "  Dice unlabeled " << r.dice_unlabeled << "\n";
    if (r.clamped) os << "  clamped predictions: " << r.clamped << "\n";
  }
  return os.str();
}

}  // namespace echocss::eval
