#pragma once

// Run configuration: a flat text file of `[table]` headers and `key = value`
// lines. Every field is visited by one function, so parsing, printing and
// flag overrides cannot drift apart. Doubles print in shortest round-trip
// form, so parse(to_text(c)) == c.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "echocss/css.hpp"
#include "echocss/data/manifest.hpp"
#include "echocss/data/sampling.hpp"
#include "echocss/data/synthetic.hpp"
#include "echocss/error.hpp"
#include "echocss/regression/model.hpp"
#include "echocss/regression/train.hpp"
#include "echocss/segmentation/model.hpp"
#include "echocss/segmentation/train.hpp"

namespace echocss::pipeline {

struct RunConfig {
  // [run]
  std::string preset = "desk";
  std::string data_root;
  std::string out = "runs/desk";
  std::uint64_t seed = 1;
  data::Fraction label_fraction{1, 15};
  bool deterministic = true;

  // [synth]
  int synth_count = 180;
  int synth_test_count = 30;
  int synth_height = 64;
  int synth_width = 64;
  int synth_period_min = 32;
  int synth_period_max = 48;
  double synth_cycles_min = 3.7;
  double synth_cycles_max = 4.5;
  double synth_ef_min = 25.0;
  double synth_ef_max = 75.0;
  double synth_noise = 0.03;

  // [css] indices are 0-based and inclusive
  int css_s = 3;
  int css_c = 2;
  double css_tau = 10.0;
  double css_w = 0.01;
  int template_first = 0, template_last = 14;
  int search_first = 15, search_last = 35;
  int buffer_first = 36, buffer_last = 39;
  int pstar_first = 0, pstar_last = 12;
  int css_clip_stride = 3;

  // [seg]
  std::vector<int> seg_widths{8, 16, 32, 64};
  int seg_residual_blocks = 0;
  int seg_batch = 10;
  int seg_epochs = 300;
  double seg_lr = 0.1;
  double seg_momentum = 0.9;
  double seg_grad_clip = 1.0;
  double seg_threshold = 0.5;

  // [reg]
  std::vector<int> reg_widths{8, 16, 16};
  int reg_hidden = 32;
  int reg_temporal_kernel = 3;
  int reg_clip_length = 32;
  int reg_clip_stride = 2;
  int reg_batch = 10;
  int reg_unlabeled_batch = 5;
  int reg_epochs = 100;          ///< teacher (and labeled-only) training
  int reg_student_epochs = 300;  ///< distilled student
  double reg_lr = 3e-3;
  double reg_momentum = 0.9;
  double reg_grad_clip = 5.0;
  double reg_w_ulb = 5.0;
  bool reg_mask_binary = false;
  int reg_eval_clips = 1;

  // [eval]
  int smoothgrad_samples = 25;
  double smoothgrad_sigma = 0.1;
  double top_k = 0.05;
  double heatmap_alpha = 0.5;

  bool operator==(const RunConfig&) const = default;

  /// Calls f(table, key, field) for every field.
  template <class Self, class F>
  static void visit(Self& c, F&& f) {
    f("run", "preset", c.preset);
    f("run", "data_root", c.data_root);
    f("run", "out", c.out);
    f("run", "seed", c.seed);
    f("run", "label_fraction", c.label_fraction);
    f("run", "deterministic", c.deterministic);
    f("synth", "count", c.synth_count);
    f("synth", "test_count", c.synth_test_count);
    f("synth", "height", c.synth_height);
    f("synth", "width", c.synth_width);
    f("synth", "period_min", c.synth_period_min);
    f("synth", "period_max", c.synth_period_max);
    f("synth", "cycles_min", c.synth_cycles_min);
    f("synth", "cycles_max", c.synth_cycles_max);
    f("synth", "ef_min", c.synth_ef_min);
    f("synth", "ef_max", c.synth_ef_max);
    f("synth", "noise", c.synth_noise);
    f("css", "s", c.css_s);
    f("css", "c", c.css_c);
    f("css", "tau", c.css_tau);
    f("css", "w_css", c.css_w);
    f("css", "template_first", c.template_first);
    f("css", "template_last", c.template_last);
    f("css", "search_first", c.search_first);
    f("css", "search_last", c.search_last);
    f("css", "buffer_first", c.buffer_first);
    f("css", "buffer_last", c.buffer_last);
    f("css", "pstar_first", c.pstar_first);
    f("css", "pstar_last", c.pstar_last);
    f("css", "clip_stride", c.css_clip_stride);
    f("seg", "widths", c.seg_widths);
    f("seg", "residual_blocks", c.seg_residual_blocks);
    f("seg", "batch", c.seg_batch);
    f("seg", "epochs", c.seg_epochs);
    f("seg", "lr", c.seg_lr);
    f("seg", "momentum", c.seg_momentum);
    f("seg", "grad_clip", c.seg_grad_clip);
    f("seg", "threshold", c.seg_threshold);
    f("reg", "widths", c.reg_widths);
    f("reg", "hidden", c.reg_hidden);
    f("reg", "temporal_kernel", c.reg_temporal_kernel);
    f("reg", "clip_length", c.reg_clip_length);
    f("reg", "clip_stride", c.reg_clip_stride);
    f("reg", "batch", c.reg_batch);
    f("reg", "unlabeled_batch", c.reg_unlabeled_batch);
    f("reg", "epochs", c.reg_epochs);
    f("reg", "student_epochs", c.reg_student_epochs);
    f("reg", "lr", c.reg_lr);
    f("reg", "momentum", c.reg_momentum);
    f("reg", "grad_clip", c.reg_grad_clip);
    f("reg", "w_ulb", c.reg_w_ulb);
    f("reg", "mask_binary", c.reg_mask_binary);
    f("reg", "eval_clips", c.reg_eval_clips);
    f("eval", "smoothgrad_samples", c.smoothgrad_samples);
    f("eval", "smoothgrad_sigma", c.smoothgrad_sigma);
    f("eval", "top_k", c.top_k);
    f("eval", "heatmap_alpha", c.heatmap_alpha);
  }

  css::CssConfig css_config() const {
    css::CssConfig c;
    c.s = static_cast<std::size_t>(css_s);
    c.c = static_cast<std::size_t>(css_c);
    c.tau = css_tau;
    c.w_css = css_w;
    c.pstar_range = {static_cast<std::size_t>(pstar_first), static_cast<std::size_t>(pstar_last)};
    return c;
  }

  css::RegionPartition partition() const {
    auto r = [](int a, int b) { return css::IndexRange{static_cast<std::size_t>(a), static_cast<std::size_t>(b)}; };
    return {r(template_first, template_last), r(search_first, search_last), r(buffer_first, buffer_last)};
  }

  data::SynthParams synth_params() const {
    data::SynthParams p;
    p.height = synth_height;
    p.width = synth_width;
    p.period_min = synth_period_min;
    p.period_max = synth_period_max;
    p.cycles_min = synth_cycles_min;
    p.cycles_max = synth_cycles_max;
    p.ef_min = synth_ef_min;
    p.ef_max = synth_ef_max;
    p.noise = synth_noise;
    p.test_count = synth_test_count;
    return p;
  }

  seg::SegConfig seg_config() const {
    seg::SegConfig c;
    c.widths = seg_widths;
    c.residual_blocks = seg_residual_blocks;
    return c;
  }

  seg::JointConfig joint_config() const {
    seg::JointConfig j;
    j.css = css_config();
    j.partition = partition();
    j.clip = {static_cast<int>(j.partition.clip_length()), css_clip_stride};
    j.batch = seg_batch;
    j.epochs = seg_epochs;
    j.lr = seg_lr;
    j.momentum = seg_momentum;
    j.grad_clip = seg_grad_clip;
    j.seed = seed;
    return j;
  }

  reg::RegConfig reg_config(int in_channels, double output_offset) const {
    reg::RegConfig c;
    c.in_channels = in_channels;
    c.widths = reg_widths;
    c.hidden = reg_hidden;
    c.temporal_kernel = reg_temporal_kernel;
    c.output_offset = output_offset;
    return c;
  }

  data::ClipSpec reg_clip() const { return {reg_clip_length, reg_clip_stride}; }

  reg::RegTrainConfig reg_train_config(bool student = false) const {
    reg::RegTrainConfig t;
    t.clip = reg_clip();
    t.batch = reg_batch;
    t.unlabeled_batch = reg_unlabeled_batch;
    t.epochs = student ? reg_student_epochs : reg_epochs;
    t.lr = reg_lr;
    t.momentum = reg_momentum;
    t.grad_clip = reg_grad_clip;
    t.w_ulb = reg_w_ulb;
    t.seed = seed;
    return t;
  }

  void validate() const {
    label_fraction.validate();
    css::validate_config(css_config(), partition());
    seg_config().validate();
    joint_config().validate();
    reg_config(3, 50.0).validate();
    reg_train_config().validate();
    reg_train_config(true).validate();
    detail::require(seg_threshold > 0.0 && seg_threshold < 1.0, "seg.threshold must lie in (0, 1)");
    detail::require(reg_eval_clips >= 1, "reg.eval_clips must be >= 1");
    detail::require(smoothgrad_samples >= 1 && smoothgrad_sigma >= 0.0, "bad smoothgrad settings");
    detail::require(top_k > 0.0 && top_k < 1.0, "eval.top_k must lie in (0, 1)");
  }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::string format(const std::string& v) { return "\"" + v + "\""; }
inline std::string format(bool v) { return v ? "true" : "false"; }
inline std::string format(int v) { return std::to_string(v); }
inline std::string format(std::uint64_t v) { return std::to_string(v); }
inline std::string format(double v) { return data::format_double(v); }
inline std::string format(const data::Fraction& v) { return format(v.str()); }
inline std::string format(const std::vector<int>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
  return s + "]";
}

inline std::string unquote(const std::string& v) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
  return v;
}

inline void parse(const std::string& text, std::string& out, const std::string&) { out = unquote(text); }

inline void parse(const std::string& text, bool& out, const std::string& key) {
  if (text == "true" || text == "1") out = true;
  else if (text == "false" || text == "0") out = false;
  else throw ValidationError(key + ": expected true or false, got '" + text + "'");
}

inline void parse(const std::string& text, int& out, const std::string& key) {
  out = data::parse_int(text, key);
}

inline void parse(const std::string& text, std::uint64_t& out, const std::string& key) {
  const char* last = text.data() + text.size();
  auto [end, ec] = std::from_chars(text.data(), last, out);
  if (ec != std::errc{} || end != last)
    throw ValidationError(key + ": '" + text + "' is not a non-negative integer");
}

inline void parse(const std::string& text, double& out, const std::string& key) {
  out = data::parse_double(text, key);
}

inline void parse(const std::string& text, data::Fraction& out, const std::string& key) {
  try {
    out = data::Fraction::parse(unquote(text));
  } catch (const std::exception& e) {
    throw ValidationError(key + ": " + e.what());
  }
}

inline void parse(const std::string& text, std::vector<int>& out, const std::string& key) {
  std::string body = text;
  if (body.size() >= 2 && body.front() == '[' && body.back() == ']') body = body.substr(1, body.size() - 2);
  out.clear();
  std::istringstream is(body);
  std::string item;
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(data::parse_int(item, key));
  }
}

}  // namespace config_detail

inline std::string to_text(const RunConfig& c) {
  std::ostringstream os;
  std::string table;
  RunConfig::visit(c, [&](const char* t, const char* key, const auto& v) {
    if (table != t) {
      os << (table.empty() ? "" : "\n") << "[" << t << "]\n";
      table = t;
    }
    os << key << " = " << config_detail::format(v) << "\n";
  });
  return os.str();
}

/// Sets one field from its text form; `name` is "table.key".
inline void set_field(RunConfig& c, const std::string& name, const std::string& value) {
  bool found = false;
  RunConfig::visit(c, [&](const char* t, const char* key, auto& field) {
    if (name == std::string(t) + "." + key) {
      config_detail::parse(config_detail::trim(value), field, name);
      found = true;
    }
  });
  if (!found) throw ValidationError("unknown config key '" + name + "'");
}

/// Applies `[table]` / `key = value` text on top of `base`.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  std::istringstream is(text);
  std::string line, table;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos && line.find('"') == std::string::npos) line = line.substr(0, hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ValidationError("config line " + std::to_string(lineno) + ": bad table header");
      table = config_detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
    const auto key = config_detail::trim(line.substr(0, eq));
    set_field(base, table.empty() ? key : table + "." + key, line.substr(eq + 1));
  }
  return base;
}

/// Bundled presets. `desk` runs on the synthetic corpus in minutes on one
/// CPU core; `paper` carries the full-scale hyperparameters and needs a
/// real dataset at 112 x 112.
inline RunConfig preset(const std::string& name) {
  RunConfig c;
  if (name == "desk") return c;
  if (name == "paper") {
    c.preset = "paper";
    c.out = "runs/paper";
    c.label_fraction = {1, 8};
    c.synth_height = c.synth_width = 112;
    c.css_w = 0.01;
    c.css_tau = 10.0;
    c.seg_widths = {64, 128, 256, 512};
    c.seg_residual_blocks = 2;
    c.seg_batch = 20;
    c.seg_epochs = 25;
    c.seg_lr = 1e-5;
    c.seg_momentum = 0.9;
    c.seg_grad_clip = 0.0;
    c.reg_widths = {64, 128, 256, 512};
    c.reg_hidden = 256;
    c.reg_batch = 20;
    c.reg_unlabeled_batch = 10;
    c.reg_epochs = 25;
    c.reg_student_epochs = 25;
    c.reg_lr = 1e-4;
    c.reg_momentum = 0.9;
    c.reg_grad_clip = 0.0;
    c.reg_w_ulb = 5.0;
    return c;
  }
  throw ValidationError("unknown preset '" + name + "' (expected desk or paper)");
}

inline RunConfig load_config_file(const std::string& path, const RunConfig& base) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), base);
}

inline void write_config_file(const std::string& path, const RunConfig& c) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write '" + path + "'");
  os << to_text(c);
}

}  // namespace echocss::pipeline
