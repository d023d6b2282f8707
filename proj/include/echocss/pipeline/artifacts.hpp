#pragma once

// Files a run leaves behind: split.json, loss logs, predictions.csv and the
// inferred-mask bank.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "echocss/data/manifest.hpp"
#include "echocss/data/sampling.hpp"
#include "echocss/error.hpp"
#include "echocss/regression/train.hpp"
#include "echocss/segmentation/inference.hpp"
#include "echocss/segmentation/train.hpp"

namespace echocss::pipeline {

namespace fs = std::filesystem;

inline std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  return os;
}

inline void write_split(const fs::path& path, const data::DatasetSplit& s, const data::Fraction& f) {
  nlohmann::json j{{"seed", s.seed}, {"label_fraction", f.str()}, {"labeled", s.labeled},
                   {"unlabeled", s.unlabeled}};
  open_out(path) << j.dump(2) << "\n";
}

inline data::DatasetSplit read_split(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read split '" + path.string() + "'");
  const auto j = nlohmann::json::parse(is);
  data::DatasetSplit s;
  s.seed = j.at("seed").get<std::uint64_t>();
  s.labeled = j.at("labeled").get<std::vector<std::string>>();
  s.unlabeled = j.at("unlabeled").get<std::vector<std::string>>();
  return s;
}

inline void write_seg_loss_csv(const fs::path& path, const std::vector<seg::LossBreakdown>& log) {
  auto os = open_out(path);
  os << "epoch,iteration,seg,css,total\n";
  for (const auto& e : log)
    os << e.epoch << ',' << e.iteration << ',' << data::format_double(e.seg) << ','
       << data::format_double(e.css) << ',' << data::format_double(e.total) << "\n";
}

inline void write_reg_loss_csv(const fs::path& path, const std::vector<reg::RegLossBreakdown>& log) {
  auto os = open_out(path);
  os << "epoch,iteration,lb,ulb,total\n";
  for (const auto& e : log)
    os << e.epoch << ',' << e.iteration << ',' << data::format_double(e.lb) << ','
       << data::format_double(e.ulb) << ',' << data::format_double(e.total) << "\n";
}

inline void write_predictions_csv(const fs::path& path, const std::vector<reg::EfPrediction>& preds,
                                  const std::vector<double>& labels) {
  detail::require(preds.size() == labels.size(), "write_predictions_csv: length mismatch");
  auto os = open_out(path);
  os << "id,prediction,label,source\n";
  for (std::size_t i = 0; i < preds.size(); ++i)
    os << preds[i].sequence_id << ',' << data::format_double(preds[i].value) << ','
       << data::format_double(labels[i]) << ',' << reg::to_string(preds[i].source) << "\n";
}

// Mask bank layout: <dir>/<id>.prob holds "T H W" as three int32 followed by
// T*H*W float32 probabilities. Binary masks are re-derived by thresholding.

inline void write_video_masks(const fs::path& dir, const seg::VideoMasks& m) {
  fs::create_directories(dir);
  const auto path = dir / (m.sequence_id + ".prob");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  const std::int32_t dims[3] = {m.num_frames(), m.height, m.width};
  os.write(reinterpret_cast<const char*>(dims), sizeof dims);
  os.write(reinterpret_cast<const char*>(m.probabilities.data()),
           static_cast<std::streamsize>(m.probabilities.size() * sizeof(float)));
  if (!os) throw IoError("failed writing '" + path.string() + "'");
}

inline seg::VideoMasks read_video_masks(const fs::path& dir, const std::string& id, double threshold) {
  const auto path = dir / (id + ".prob");
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("no inferred masks for '" + id + "' in '" + dir.string() + "'");
  std::int32_t dims[3];
  is.read(reinterpret_cast<char*>(dims), sizeof dims);
  if (!is || dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0) throw IoError("corrupt mask file '" + path.string() + "'");
  seg::VideoMasks m;
  m.sequence_id = id;
  m.height = dims[1];
  m.width = dims[2];
  const std::size_t plane = static_cast<std::size_t>(dims[1]) * dims[2];
  m.probabilities.resize(static_cast<std::size_t>(dims[0]) * plane);
  is.read(reinterpret_cast<char*>(m.probabilities.data()),
          static_cast<std::streamsize>(m.probabilities.size() * sizeof(float)));
  if (!is) throw IoError("truncated mask file '" + path.string() + "'");
  for (int t = 0; t < dims[0]; ++t) {
    data::BinaryMask b(m.height, m.width);
    const float* p = m.probability(t);
    for (std::size_t i = 0; i < plane; ++i) b.pixels[i] = p[i] >= threshold ? 1 : 0;
    m.masks.push_back(std::move(b));
  }
  return m;
}

inline void write_mask_bank(const fs::path& dir, const reg::MaskBank& bank) {
  for (const auto& [id, m] : bank) write_video_masks(dir, m);
}

inline reg::MaskBank read_mask_bank(const fs::path& dir, const std::vector<std::string>& ids, double threshold) {
  reg::MaskBank bank;
  for (const auto& id : ids) bank.emplace(id, read_video_masks(dir, id, threshold));
  return bank;
}

}  // namespace echocss::pipeline
