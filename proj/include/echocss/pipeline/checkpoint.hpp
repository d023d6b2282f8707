#pragma once

// Binary checkpoints: 8-byte magic, u64 header length, a JSON header
// (model kind, architecture, config snapshot, RNG state, iteration count,
// parameter names and shapes), then the float32 parameter values in
// header order, little-endian as written by the host.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "echocss/error.hpp"
#include "echocss/nn/layers.hpp"
#include "echocss/regression/model.hpp"
#include "echocss/rng.hpp"
#include "echocss/segmentation/model.hpp"

namespace echocss::pipeline {

inline constexpr char kCheckpointMagic[8] = {'E', 'C', 'S', 'S', 'C', 'K', 'P', '1'};

struct CheckpointMeta {
  std::string kind;  ///< "segmentation" or "regression"
  nlohmann::json arch;
  std::string config_text;
  std::string rng_state;
  std::uint64_t seed = 0;
  long long iterations = 0;
  nlohmann::json extra = nlohmann::json::object();
};

inline nlohmann::json arch_json(const seg::SegConfig& c) {
  return {{"widths", c.widths}, {"residual_blocks", c.residual_blocks}, {"in_channels", c.in_channels}};
}

inline nlohmann::json arch_json(const reg::RegConfig& c) {
  return {{"in_channels", c.in_channels},   {"widths", c.widths},
          {"temporal_after", c.temporal_after}, {"temporal_kernel", c.temporal_kernel},
          {"hidden", c.hidden},             {"output_offset", c.output_offset},
          {"output_scale", c.output_scale}};
}

inline seg::SegConfig seg_arch(const nlohmann::json& j) {
  seg::SegConfig c;
  c.widths = j.at("widths").get<std::vector<int>>();
  c.residual_blocks = j.at("residual_blocks").get<int>();
  c.in_channels = j.at("in_channels").get<int>();
  return c;
}

inline reg::RegConfig reg_arch(const nlohmann::json& j) {
  reg::RegConfig c;
  c.in_channels = j.at("in_channels").get<int>();
  c.widths = j.at("widths").get<std::vector<int>>();
  c.temporal_after = j.at("temporal_after").get<int>();
  c.temporal_kernel = j.at("temporal_kernel").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.output_offset = j.at("output_offset").get<double>();
  c.output_scale = j.at("output_scale").get<double>();
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const CheckpointMeta& meta,
                            const nn::ParamList& params) {
  nlohmann::json h;
  h["kind"] = meta.kind;
  h["arch"] = meta.arch;
  h["config"] = meta.config_text;
  h["rng_state"] = meta.rng_state;
  h["seed"] = meta.seed;
  h["iterations"] = meta.iterations;
  h["extra"] = meta.extra;
  auto& plist = h["params"] = nlohmann::json::array();
  for (const auto* p : params)
    plist.push_back({{"name", p->name}, {"shape", {p->value.n(), p->value.c(), p->value.h(), p->value.w()}}});
  const std::string header = h.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint '" + path.string() + "'");
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  const std::uint64_t len = header.size();
  os.write(reinterpret_cast<const char*>(&len), sizeof len);
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto* p : params)
    os.write(reinterpret_cast<const char*>(p->value.data()),
             static_cast<std::streamsize>(p->value.size() * sizeof(float)));
  if (!os) throw IoError("failed writing checkpoint '" + path.string() + "'");
}

/// Reads the header only; the stream is left at the first parameter byte.
inline nlohmann::json read_checkpoint_header(std::ifstream& is, const std::filesystem::path& path) {
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || !std::equal(magic, magic + 8, kCheckpointMagic))
    throw IoError("'" + path.string() + "' is not an echocss checkpoint");
  std::uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!is || len > (1u << 26)) throw IoError("corrupt checkpoint header in '" + path.string() + "'");
  std::string header(len, '\0');
  is.read(header.data(), static_cast<std::streamsize>(len));
  if (!is) throw IoError("truncated checkpoint '" + path.string() + "'");
  return nlohmann::json::parse(header);
}

inline CheckpointMeta meta_from_header(const nlohmann::json& h) {
  CheckpointMeta m;
  m.kind = h.at("kind").get<std::string>();
  m.arch = h.at("arch");
  m.config_text = h.at("config").get<std::string>();
  m.rng_state = h.at("rng_state").get<std::string>();
  m.seed = h.at("seed").get<std::uint64_t>();
  m.iterations = h.at("iterations").get<long long>();
  if (h.contains("extra")) m.extra = h.at("extra");
  return m;
}

/// Fills `params` from the checkpoint, checking names and shapes.
inline void read_params(std::ifstream& is, const nlohmann::json& h, const nn::ParamList& params,
                        const std::filesystem::path& path) {
  const auto& plist = h.at("params");
  if (plist.size() != params.size())
    throw ValidationError("checkpoint '" + path.string() + "' has " + std::to_string(plist.size()) +
                          " parameters, model expects " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto* p = params[i];
    const auto shape = plist[i].at("shape").get<std::vector<int>>();
    const std::vector<int> want{p->value.n(), p->value.c(), p->value.h(), p->value.w()};
    if (plist[i].at("name").get<std::string>() != p->name || shape != want)
      throw ValidationError("checkpoint parameter " + std::to_string(i) + " does not match '" + p->name + "'");
    is.read(reinterpret_cast<char*>(p->value.data()),
            static_cast<std::streamsize>(p->value.size() * sizeof(float)));
    if (!is) throw IoError("truncated checkpoint '" + path.string() + "'");
  }
}

template <class Model>
struct LoadedModel {
  std::unique_ptr<Model> model;
  CheckpointMeta meta;
};

namespace checkpoint_detail {

template <class Model, class Arch>
LoadedModel<Model> load(const std::filesystem::path& path, const std::string& kind, Arch (*arch)(const nlohmann::json&),
                        bool require_trained) {
  if (!std::filesystem::exists(path)) throw IoError("checkpoint '" + path.string() + "' does not exist");
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path.string() + "'");
  const auto h = read_checkpoint_header(is, path);
  LoadedModel<Model> out;
  out.meta = meta_from_header(h);
  if (out.meta.kind != kind)
    throw ValidationError("checkpoint '" + path.string() + "' holds a " + out.meta.kind + " model, expected " + kind);
  if (require_trained && out.meta.iterations <= 0)
    throw ValidationError("checkpoint '" + path.string() + "' has not been trained");
  Rng rng(0);
  out.model = std::make_unique<Model>(arch(out.meta.arch), rng);
  read_params(is, h, out.model->parameters(), path);
  return out;
}

}  // namespace checkpoint_detail

inline LoadedModel<seg::SegmentationModel> load_segmentation(const std::filesystem::path& path,
                                                             bool require_trained = true) {
  return checkpoint_detail::load<seg::SegmentationModel>(path, "segmentation", &seg_arch, require_trained);
}

inline LoadedModel<reg::RegressionModel> load_regression(const std::filesystem::path& path,
                                                         bool require_trained = true) {
  return checkpoint_detail::load<reg::RegressionModel>(path, "regression", &reg_arch, require_trained);
}

}  // namespace echocss::pipeline
