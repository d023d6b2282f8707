#pragma once

// On-disk dataset layout:
//
//   <root>/manifest.csv            id,split,num_frames,fps,ef,ed_index,es_index
//   <root>/frames/<id>/%06d.png    RGB frames
//   <root>/masks/<id>/ed.png       0/255 masks for labeled rows
//   <root>/masks/<id>/es.png
//   <root>/masks/<id>/%06d.png     optional per-frame ground truth
//   <root>/stats.json              per-channel mean/std of the training split
//
// Empty ef/ed_index/es_index fields mark an unlabeled row.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "echocss/data/png_io.hpp"
#include "echocss/data/sequence.hpp"
#include "echocss/error.hpp"
#include "json.hpp"

namespace echocss::data {

namespace fs = std::filesystem;

inline constexpr const char* kManifestHeader = "id,split,num_frames,fps,ef,ed_index,es_index";

/// Shortest decimal text that parses back to exactly `v`.
inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) throw NumericError("format_double: conversion failed");
  return std::string(buf, end);
}

inline double parse_double(const std::string& text, const std::string& what) {
  double v = 0.0;
  const char* first = text.data();
  const char* last = first + text.size();
  auto [end, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || end != last) throw ValidationError(what + ": '" + text + "' is not a number");
  return v;
}

inline int parse_int(const std::string& text, const std::string& what) {
  int v = 0;
  const char* first = text.data();
  const char* last = first + text.size();
  auto [end, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || end != last)
    throw ValidationError(what + ": '" + text + "' is not an integer");
  return v;
}

inline std::string frame_filename(int t) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d.png", t);
  return buf;
}

namespace manifest_detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline void write_mask(const fs::path& path, const BinaryMask& m) {
  Image img{m.height, m.width, 1, std::vector<std::uint8_t>(m.pixels.size())};
  for (std::size_t i = 0; i < m.pixels.size(); ++i) img.pixels[i] = m.pixels[i] ? 255 : 0;
  write_png(path.string(), img);
}

inline BinaryMask read_mask(const fs::path& path) {
  const auto img = read_png(path.string(), 1);
  BinaryMask m(img.height, img.width);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) m.pixels[i] = img.pixels[i] >= 128 ? 1 : 0;
  return m;
}

}  // namespace manifest_detail

inline void write_stats(const fs::path& path, const ChannelStats& st) {
  nlohmann::json j;
  j["mean"] = st.mean;
  j["std"] = st.stddev;
  std::ofstream os(path);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  os << j.dump(2) << "\n";
}

inline ChannelStats read_stats(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read '" + path.string() + "'");
  ChannelStats st;
  try {
    const auto j = nlohmann::json::parse(is);
    st.mean = j.at("mean").get<std::array<double, kChannels>>();
    st.stddev = j.at("std").get<std::array<double, kChannels>>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("'" + path.string() + "': " + e.what());
  }
  for (double s : st.stddev)
    if (!(s > 0.0)) throw ValidationError("'" + path.string() + "': non-positive std");
  return st;
}

/// Writes the dataset in the manifest layout under `root`.
inline void write_dataset(const Dataset& ds, const fs::path& root) {
  fs::create_directories(root);
  std::ofstream csv(root / "manifest.csv");
  if (!csv) throw IoError("cannot write '" + (root / "manifest.csv").string() + "'");
  csv << kManifestHeader << "\n";
  for (const auto& s : ds.sequences) {
    s.validate();
    csv << s.id << ',' << s.split << ',' << s.num_frames() << ',' << format_double(s.fps) << ','
        << (s.ef ? format_double(*s.ef) : "") << ','
        << (s.ed_index ? std::to_string(*s.ed_index) : "") << ','
        << (s.es_index ? std::to_string(*s.es_index) : "") << "\n";

    const auto fdir = root / "frames" / s.id;
    fs::create_directories(fdir);
    const std::size_t plane = static_cast<std::size_t>(s.height) * s.width;
    Image img{s.height, s.width, 3, std::vector<std::uint8_t>(plane * 3)};
    for (int t = 0; t < s.num_frames(); ++t) {
      const auto* f = s.frame(t);
      for (std::size_t i = 0; i < plane; ++i)
        for (int c = 0; c < 3; ++c) img.pixels[i * 3 + c] = f[c * plane + i];
      write_png((fdir / frame_filename(t)).string(), img);
    }

    if (s.ed_mask || s.es_mask || !s.frame_masks.empty()) {
      const auto mdir = root / "masks" / s.id;
      fs::create_directories(mdir);
      if (s.ed_mask) manifest_detail::write_mask(mdir / "ed.png", *s.ed_mask);
      if (s.es_mask) manifest_detail::write_mask(mdir / "es.png", *s.es_mask);
      for (std::size_t t = 0; t < s.frame_masks.size(); ++t)
        manifest_detail::write_mask(mdir / frame_filename(static_cast<int>(t)), s.frame_masks[t]);
    }
  }
  write_stats(root / "stats.json", ds.stats);
}

/// Loads and validates every sequence listed in `root/manifest.csv`.
/// Channel statistics come from stats.json when present, otherwise they are
/// computed over the training split.
inline Dataset load_manifest(const fs::path& root) {
  const auto path = root / "manifest.csv";
  std::ifstream csv(path);
  if (!csv) throw IoError("cannot open manifest '" + path.string() + "'");
  std::string line;
  if (!std::getline(csv, line)) throw ValidationError("'" + path.string() + "' is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader)
    throw ValidationError("'" + path.string() + "': expected header '" + kManifestHeader + "'");

  Dataset ds;
  int row = 1;
  while (std::getline(csv, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = manifest_detail::split_csv_line(line);
    const std::string where = path.string() + ":" + std::to_string(row);
    if (f.size() != 7) throw ValidationError(where + ": expected 7 fields");

    EchoSequence s;
    s.id = f[0];
    s.split = f[1];
    const int t = parse_int(f[2], where + " num_frames");
    if (t <= 0) throw ValidationError(where + ": num_frames must be positive");
    s.fps = parse_double(f[3], where + " fps");
    if (!f[4].empty()) s.ef = parse_double(f[4], where + " ef");
    if (!f[5].empty()) s.ed_index = parse_int(f[5], where + " ed_index");
    if (!f[6].empty()) s.es_index = parse_int(f[6], where + " es_index");

    const auto fdir = root / "frames" / s.id;
    for (int i = 0; i < t; ++i) {
      const auto img = read_png((fdir / frame_filename(i)).string(), 3);
      if (i == 0) {
        s.height = img.height;
        s.width = img.width;
        s.frames.resize(static_cast<std::size_t>(t) * s.frame_size());
      } else if (img.height != s.height || img.width != s.width) {
        throw ValidationError("sequence '" + s.id + "': frame " + std::to_string(i) +
                              " has a different size");
      }
      const std::size_t plane = static_cast<std::size_t>(s.height) * s.width;
      auto* dst = s.frame(i);
      for (std::size_t p = 0; p < plane; ++p)
        for (int c = 0; c < 3; ++c) dst[c * plane + p] = img.pixels[p * 3 + c];
    }

    const auto mdir = root / "masks" / s.id;
    if (fs::exists(mdir / "ed.png")) s.ed_mask = manifest_detail::read_mask(mdir / "ed.png");
    if (fs::exists(mdir / "es.png")) s.es_mask = manifest_detail::read_mask(mdir / "es.png");
    if (fs::exists(mdir / frame_filename(0))) {
      for (int i = 0; i < t; ++i) {
        const auto p = mdir / frame_filename(i);
        if (!fs::exists(p))
          throw ValidationError("sequence '" + s.id + "': per-frame mask " + p.filename().string() +
                                " is missing");
        s.frame_masks.push_back(manifest_detail::read_mask(p));
      }
    }
    s.validate();
    ds.sequences.push_back(std::move(s));
  }

  if (fs::exists(root / "stats.json")) {
    ds.stats = read_stats(root / "stats.json");
  } else {
    auto train = ds.ids("train");
    ds.stats = compute_channel_stats(ds, train.empty() ? ds.ids("") : train);
  }
  return ds;
}

}  // namespace echocss::data
