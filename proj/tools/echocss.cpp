// echocss: command-line driver for the synthetic corpus, segmentation with
// cyclical self-supervision, mask inference, teacher and student EF
// regression, evaluation and saliency heatmaps.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "echocss/data/manifest.hpp"
#include "echocss/data/synthetic.hpp"
#include "echocss/evaluation/metrics.hpp"
#include "echocss/evaluation/saliency.hpp"
#include "echocss/pipeline/artifacts.hpp"
#include "echocss/pipeline/checkpoint.hpp"
#include "echocss/pipeline/config.hpp"
#include "echocss/pipeline/experiment.hpp"

namespace fs = std::filesystem;
using namespace echocss;
using pipeline::RunConfig;

namespace {

struct CommonFlags {
  std::string config_path;
  std::string preset = "desk";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> label_fraction;
  std::optional<std::string> out;
  std::optional<std::string> data;
  bool deterministic = false;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "Run config file (table/key = value)")->check(CLI::ExistingFile);
  cmd->add_option("--preset", f.preset, "Base preset: desk or paper")->check(CLI::IsMember({"desk", "paper"}));
  cmd->add_option("--seed", f.seed, "Run seed");
  cmd->add_option("--label-fraction", f.label_fraction, "Labeled fraction, e.g. 1/8 or 0.125");
  cmd->add_option("--out", f.out, "Output directory");
  cmd->add_option("--data", f.data, "Dataset root (default: $ECHOCSS_DATA_ROOT)");
  cmd->add_flag("--deterministic", f.deterministic, "Record deterministic mode (execution is single-threaded)");
  cmd->add_option("--set", f.sets, "Override any config key: table.key=value")->take_all();
}

RunConfig resolve(const CommonFlags& f) {
  RunConfig rc = pipeline::preset(f.preset);
  if (!f.config_path.empty()) rc = pipeline::load_config_file(f.config_path, rc);
  if (rc.data_root.empty())
    if (const char* env = std::getenv("ECHOCSS_DATA_ROOT")) rc.data_root = env;
  if (f.seed) rc.seed = *f.seed;
  if (f.label_fraction) pipeline::set_field(rc, "run.label_fraction", *f.label_fraction);
  if (f.out) rc.out = *f.out;
  if (f.data) rc.data_root = *f.data;
  if (f.deterministic) rc.deterministic = true;
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ValidationError("--set expects table.key=value, got '" + s + "'");
    pipeline::set_field(rc, s.substr(0, eq), s.substr(eq + 1));
  }
  return rc;
}

fs::path out_dir(const RunConfig& rc) {
  fs::create_directories(rc.out);
  return rc.out;
}

// Snapshot of the resolved config, written before any training step.
void snapshot(const RunConfig& rc, const std::string& stage) {
  rc.validate();
  pipeline::write_config_file(out_dir(rc) / ("config_" + stage + ".toml"), rc);
}

data::Dataset load_data(const RunConfig& rc) {
  if (rc.data_root.empty())
    throw IoError("no dataset root: pass --data, set run.data_root, or export ECHOCSS_DATA_ROOT");
  if (!fs::exists(fs::path(rc.data_root) / "manifest.csv"))
    throw IoError("'" + rc.data_root + "' has no manifest.csv; create one with `echocss synth --out DIR`");
  return data::load_manifest(rc.data_root);
}

data::DatasetSplit make_split(const RunConfig& rc, const data::Dataset& ds) {
  auto split = data::split_labels(ds, rc.label_fraction, rc.seed);
  pipeline::write_split(out_dir(rc) / "split.json", split, rc.label_fraction);
  std::cerr << "split: " << split.labeled.size() << " labeled, " << split.unlabeled.size() << " unlabeled\n";
  return split;
}

fs::path or_default(const std::string& given, const RunConfig& rc, const char* name) {
  return given.empty() ? fs::path(rc.out) / name : fs::path(given);
}

pipeline::CheckpointMeta meta_for(const RunConfig& rc, const std::string& kind, nlohmann::json arch,
                                  const std::string& rng_state, std::size_t iterations) {
  pipeline::CheckpointMeta m;
  m.kind = kind;
  m.arch = std::move(arch);
  m.config_text = pipeline::to_text(rc);
  m.rng_state = rng_state;
  m.seed = rc.seed;
  m.iterations = static_cast<long long>(iterations);
  m.extra = {{"label_fraction", rc.label_fraction.str()}};
  return m;
}

void progress_seg(const seg::LossBreakdown& e) {
  if (e.iteration % 25 == 0)
    std::cerr << "seg it " << e.iteration << "  seg " << e.seg << "  css " << e.css << "  total " << e.total << "\n";
}

void progress_reg(const reg::RegLossBreakdown& e) {
  if (e.iteration % 25 == 0)
    std::cerr << "reg it " << e.iteration << "  lb " << e.lb << "  ulb " << e.ulb << "  total " << e.total << "\n";
}

// ---- commands -------------------------------------------------------------

struct SynthFlags {
  std::optional<int> count, test_count;
  std::optional<double> cycles;
  bool force = false;
};

int cmd_synth(const CommonFlags& cf, const SynthFlags& sf) {
  RunConfig rc = resolve(cf);
  if (sf.count) rc.synth_count = *sf.count;
  if (sf.test_count) rc.synth_test_count = *sf.test_count;
  if (sf.cycles) {
    if (*sf.cycles < 2.0) throw ValidationError("--cycles must be >= 2 (every video needs two full cardiac cycles)");
    rc.synth_cycles_min = rc.synth_cycles_max = *sf.cycles;
  }
  const fs::path out = rc.out;
  if (fs::exists(out) && !fs::is_empty(out) && !sf.force)
    throw IoError("'" + out.string() + "' exists and is not empty; pass --force to overwrite");
  const auto params = rc.synth_params();
  params.validate(rc.synth_count);
  if (sf.force && fs::exists(out)) fs::remove_all(out);
  fs::create_directories(out);
  pipeline::write_config_file(out / "config_synth.toml", rc);
  const auto ds = data::generate_synthetic(rc.synth_count, params, rc.seed);
  data::write_dataset(ds, out);
  std::cout << "wrote " << ds.size() << " sequences to " << out.string() << "\n";
  return 0;
}

int cmd_train_seg(const CommonFlags& cf, std::optional<double> w_css) {
  RunConfig rc = resolve(cf);
  if (w_css) rc.css_w = *w_css;
  snapshot(rc, "train_seg");
  const auto ds = load_data(rc);
  const auto split = make_split(rc, ds);
  auto run = pipeline::train_segmentation(rc, ds, split, progress_seg);
  const auto dir = out_dir(rc);
  pipeline::write_seg_loss_csv(dir / "seg_loss.csv", run.log);
  pipeline::save_checkpoint(dir / "seg.ckpt",
                            meta_for(rc, "segmentation", pipeline::arch_json(rc.seg_config()), run.rng_state,
                                     run.log.size()),
                            run.model->parameters());
  const auto report = pipeline::evaluate_segmentation(*run.model, ds, ds.ids("test"), rc.seg_threshold, rc.seed,
                                                      "segmentation");
  eval::write_metrics_csv(dir / "seg_metrics.csv", {report});
  std::cout << eval::summary_text({report});
  return 0;
}

int cmd_infer_masks(const CommonFlags& cf, const std::string& seg_path) {
  RunConfig rc = resolve(cf);
  snapshot(rc, "infer_masks");
  const auto ds = load_data(rc);
  auto loaded = pipeline::load_segmentation(or_default(seg_path, rc, "seg.ckpt"));
  const auto dir = out_dir(rc) / "masks";
  for (const auto& s : ds.sequences)
    pipeline::write_video_masks(dir, seg::infer_masks(*loaded.model, s, ds.stats, rc.seg_threshold));
  std::cout << "wrote masks for " << ds.size() << " sequences to " << dir.string() << "\n";
  return 0;
}

reg::MaskBank load_bank(const RunConfig& rc, const data::Dataset& ds, const std::string& masks_dir) {
  const fs::path dir = masks_dir.empty() ? fs::path(rc.out) / "masks" : fs::path(masks_dir);
  if (!fs::is_directory(dir))
    throw IoError("mask directory '" + dir.string() + "' not found; run `echocss infer-masks` first");
  return pipeline::read_mask_bank(dir, ds.ids(""), rc.seg_threshold);
}

int cmd_train_multi(const CommonFlags& cf, const std::string& masks_dir) {
  RunConfig rc = resolve(cf);
  snapshot(rc, "train_multi");
  const auto ds = load_data(rc);
  const auto split = make_split(rc, ds);
  const auto bank = load_bank(rc, ds, masks_dir);
  auto run = pipeline::train_teacher(rc, ds, split, bank, progress_reg);
  const auto dir = out_dir(rc);
  pipeline::write_reg_loss_csv(dir / "teacher_loss.csv", run.log);
  pipeline::save_checkpoint(dir / "teacher.ckpt",
                            meta_for(rc, "regression", pipeline::arch_json(run.model->config()), run.rng_state,
                                     run.log.size()),
                            run.model->parameters());
  std::cout << "trained teacher for " << run.log.size() << " iterations\n";
  return 0;
}

int cmd_distill(const CommonFlags& cf, const std::string& teacher_path, const std::string& masks_dir,
                std::optional<double> w_ulb) {
  RunConfig rc = resolve(cf);
  if (w_ulb) rc.reg_w_ulb = *w_ulb;
  snapshot(rc, "distill");
  const auto ds = load_data(rc);
  const auto split = make_split(rc, ds);
  std::optional<pipeline::LoadedModel<reg::RegressionModel>> teacher;
  reg::MaskBank bank;
  if (rc.reg_w_ulb > 0.0) {
    teacher = pipeline::load_regression(or_default(teacher_path, rc, "teacher.ckpt"));
    bank = load_bank(rc, ds, masks_dir);
  }
  auto run = pipeline::train_student(rc, ds, split, teacher ? teacher->model.get() : nullptr,
                                     teacher ? &bank : nullptr, progress_reg);
  const auto dir = out_dir(rc);
  pipeline::write_reg_loss_csv(dir / "student_loss.csv", run.log);
  pipeline::save_checkpoint(dir / "student.ckpt",
                            meta_for(rc, "regression", pipeline::arch_json(run.model->config()), run.rng_state,
                                     run.log.size()),
                            run.model->parameters());
  std::cout << "trained student for " << run.log.size() << " iterations\n";
  return 0;
}

struct EvalPaths {
  std::string student, teacher, seg, masks;
};

int cmd_evaluate(const CommonFlags& cf, const EvalPaths& p) {
  RunConfig rc = resolve(cf);
  const auto ds = load_data(rc);
  const auto test = ds.ids("test");
  if (test.empty()) throw ValidationError("dataset has no test split");
  const auto dir = out_dir(rc);
  pipeline::write_config_file(dir / "config_evaluate.toml", rc);

  std::vector<eval::MetricReport> reports;
  std::vector<reg::EfPrediction> preds;
  std::vector<double> labels;
  auto append = [&](pipeline::RegressionEval r) {
    preds.insert(preds.end(), r.predictions.begin(), r.predictions.end());
    labels.insert(labels.end(), r.labels.begin(), r.labels.end());
    reports.push_back(std::move(r.report));
  };

  auto student = pipeline::load_regression(or_default(p.student, rc, "student.ckpt"));
  append(pipeline::evaluate_regression(*student.model, ds, test, reg::video_input(ds.stats), rc,
                                       reg::PredictionSource::Student, "student"));

  const auto teacher_path = or_default(p.teacher, rc, "teacher.ckpt");
  if (!p.teacher.empty() || fs::exists(teacher_path)) {
    auto teacher = pipeline::load_regression(teacher_path);
    const auto bank = load_bank(rc, ds, p.masks);
    append(pipeline::evaluate_regression(*teacher.model, ds, test, reg::multi_input(bank, ds.stats, rc.reg_mask_binary),
                                         rc, reg::PredictionSource::Teacher, "teacher"));
  }
  const auto seg_path = or_default(p.seg, rc, "seg.ckpt");
  if (!p.seg.empty() || fs::exists(seg_path)) {
    auto segm = pipeline::load_segmentation(seg_path);
    reports.push_back(
        pipeline::evaluate_segmentation(*segm.model, ds, test, rc.seg_threshold, rc.seed, "segmentation"));
  }

  pipeline::write_predictions_csv(dir / "predictions.csv", preds, labels);
  eval::write_metrics_csv(dir / "metrics.csv", reports);
  const auto text = eval::summary_text(reports);
  pipeline::open_out(dir / "summary.txt") << text;
  std::cout << text;
  return 0;
}

struct HeatmapFlags {
  std::string model, masks, id;
};

int cmd_heatmap(const CommonFlags& cf, const HeatmapFlags& hf) {
  RunConfig rc = resolve(cf);
  const auto ds = load_data(rc);
  auto loaded = pipeline::load_regression(or_default(hf.model, rc, "student.ckpt"));
  auto& model = *loaded.model;
  const std::string id = hf.id.empty() ? ds.ids("test").empty() ? ds.sequences.front().id : ds.ids("test").front()
                                       : hf.id;
  const auto& s = ds.get(id);

  reg::MaskBank bank;
  reg::InputBuilder input = reg::video_input(ds.stats);
  if (model.in_channels() == 4) {
    bank = load_bank(rc, ds, hf.masks);
    input = reg::multi_input(bank, ds.stats, rc.reg_mask_binary);
  }
  const auto clip = data::first_clip(s, rc.reg_clip());
  const auto x = input(clip);
  const auto map = eval::smoothgrad(model, x, {rc.smoothgrad_samples, rc.smoothgrad_sigma, rc.seed});

  const auto dir = out_dir(rc) / "heatmaps" / id;
  fs::create_directories(dir);
  pipeline::write_config_file(out_dir(rc) / "config_heatmap.toml", rc);
  auto csv = pipeline::open_out(dir / "top_gradient_dice.csv");
  csv << "clip_frame,source_frame,dice\n";
  std::vector<double> dices;
  for (int i = 0; i < map.frames; ++i) {
    const int t = clip.original_indices[static_cast<std::size_t>(i)];
    eval::write_heatmap_png((dir / ("frame_" + data::frame_filename(i))).string(), clip.frame(i), map.frame(i),
                            map.height, map.width, rc.heatmap_alpha);
    const data::BinaryMask* gt = nullptr;
    if (!s.frame_masks.empty()) gt = &s.frame_masks[static_cast<std::size_t>(t)];
    else if (s.ed_index && t == *s.ed_index && s.ed_mask) gt = &*s.ed_mask;
    else if (s.es_index && t == *s.es_index && s.es_mask) gt = &*s.es_mask;
    if (gt) {
      const double d = eval::top_gradient_dice(map, i, *gt, rc.top_k);
      dices.push_back(d);
      csv << i << ',' << t << ',' << data::format_double(d) << "\n";
    }
  }
  eval::write_matrix_png((dir / "similarity_raw.png").string(), eval::frame_similarity_matrix(s));
  std::cout << "wrote " << map.frames << " heatmaps to " << dir.string();
  if (!dices.empty()) std::cout << "; mean top-" << rc.top_k << " gradient Dice " << eval::mean_of(dices);
  std::cout << "\n";
  return 0;
}

// Every stage in one process, writing the same artifacts as the separate
// commands.
int cmd_run(const CommonFlags& cf) {
  RunConfig rc = resolve(cf);
  snapshot(rc, "run");
  const auto ds = load_data(rc);
  const auto split = make_split(rc, ds);
  const auto dir = out_dir(rc);
  const auto test = ds.ids("test");

  auto segr = pipeline::train_segmentation(rc, ds, split, progress_seg);
  pipeline::write_seg_loss_csv(dir / "seg_loss.csv", segr.log);
  pipeline::save_checkpoint(dir / "seg.ckpt",
                            meta_for(rc, "segmentation", pipeline::arch_json(rc.seg_config()), segr.rng_state,
                                     segr.log.size()),
                            segr.model->parameters());
  std::cerr << "inferring masks\n";
  const auto bank = pipeline::infer_bank(*segr.model, ds, ds.ids(""), rc.seg_threshold);
  pipeline::write_mask_bank(dir / "masks", bank);

  auto teacher = pipeline::train_teacher(rc, ds, split, bank, progress_reg);
  pipeline::write_reg_loss_csv(dir / "teacher_loss.csv", teacher.log);
  pipeline::save_checkpoint(dir / "teacher.ckpt",
                            meta_for(rc, "regression", pipeline::arch_json(teacher.model->config()),
                                     teacher.rng_state, teacher.log.size()),
                            teacher.model->parameters());
  auto student = pipeline::train_student(rc, ds, split, teacher.model.get(), &bank, progress_reg);
  pipeline::write_reg_loss_csv(dir / "student_loss.csv", student.log);
  pipeline::save_checkpoint(dir / "student.ckpt",
                            meta_for(rc, "regression", pipeline::arch_json(student.model->config()),
                                     student.rng_state, student.log.size()),
                            student.model->parameters());

  auto se = pipeline::evaluate_regression(*student.model, ds, test, reg::video_input(ds.stats), rc,
                                          reg::PredictionSource::Student, "student");
  auto te = pipeline::evaluate_regression(*teacher.model, ds, test,
                                          reg::multi_input(bank, ds.stats, rc.reg_mask_binary), rc,
                                          reg::PredictionSource::Teacher, "teacher");
  std::vector<reg::EfPrediction> preds = se.predictions;
  preds.insert(preds.end(), te.predictions.begin(), te.predictions.end());
  std::vector<double> labels = se.labels;
  labels.insert(labels.end(), te.labels.begin(), te.labels.end());
  const std::vector<eval::MetricReport> reports{
      se.report, te.report,
      pipeline::evaluate_segmentation(*segr.model, ds, test, rc.seg_threshold, rc.seed, "segmentation")};
  pipeline::write_predictions_csv(dir / "predictions.csv", preds, labels);
  eval::write_metrics_csv(dir / "metrics.csv", reports);
  const auto text = eval::summary_text(reports);
  pipeline::open_out(dir / "summary.txt") << text;
  std::cout << text;
  return 0;
}

int cmd_show_config(const CommonFlags& cf) {
  const RunConfig rc = resolve(cf);
  rc.validate();
  std::cout << pipeline::to_text(rc);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Echocardiography segmentation and EF regression with cyclical self-supervision"};
  app.require_subcommand(1);

  CommonFlags cf;
  SynthFlags sf;
  std::optional<double> w_css, w_ulb;
  std::string seg_path, masks_dir, teacher_path;
  EvalPaths ep;
  HeatmapFlags hf;

  auto* synth = app.add_subcommand("synth", "Generate the synthetic echo corpus");
  add_common(synth, cf);
  synth->add_option("--count", sf.count, "Number of videos")->check(CLI::PositiveNumber);
  synth->add_option("--test-count", sf.test_count, "Videos assigned to the test split")->check(CLI::NonNegativeNumber);
  synth->add_option("--cycles", sf.cycles, "Cardiac cycles per video (>= 2)");
  synth->add_flag("--force", sf.force, "Overwrite a non-empty output directory");

  auto* train_seg = app.add_subcommand("train-seg", "Train the segmentation network (supervised + CSS)");
  train_seg->alias("train_seg");
  add_common(train_seg, cf);
  train_seg->add_option("--w-css", w_css, "CSS loss weight (0 = supervised only)");

  auto* infer = app.add_subcommand("infer-masks", "Infer per-frame LV masks for every video");
  infer->alias("infer_masks");
  add_common(infer, cf);
  infer->add_option("--seg", seg_path, "Segmentation checkpoint (default OUT/seg.ckpt)");

  auto* multi = app.add_subcommand("train-multi", "Train the multi-input (video + mask) EF teacher");
  multi->alias("train_multi");
  add_common(multi, cf);
  multi->add_option("--masks", masks_dir, "Mask directory (default OUT/masks)");

  auto* distill = app.add_subcommand("distill", "Train the video-only EF student from the teacher");
  add_common(distill, cf);
  distill->add_option("--teacher", teacher_path, "Teacher checkpoint (default OUT/teacher.ckpt)");
  distill->add_option("--masks", masks_dir, "Mask directory (default OUT/masks)");
  distill->add_option("--w-ulb", w_ulb, "Unlabeled distillation weight (0 = labeled only)");

  auto* evaluate = app.add_subcommand("evaluate", "Score checkpoints on the test split");
  add_common(evaluate, cf);
  evaluate->add_option("--student", ep.student, "Student checkpoint (default OUT/student.ckpt)");
  evaluate->add_option("--teacher", ep.teacher, "Teacher checkpoint (default OUT/teacher.ckpt if present)");
  evaluate->add_option("--seg", ep.seg, "Segmentation checkpoint (default OUT/seg.ckpt if present)");
  evaluate->add_option("--masks", ep.masks, "Mask directory for the teacher (default OUT/masks)");

  auto* heatmap = app.add_subcommand("heatmap", "SmoothGrad heatmaps for one test video");
  add_common(heatmap, cf);
  heatmap->add_option("--model", hf.model, "Regression checkpoint (default OUT/student.ckpt)");
  heatmap->add_option("--masks", hf.masks, "Mask directory, for a multi-input model");
  heatmap->add_option("--id", hf.id, "Sequence id (default: first test video)");

  auto* run = app.add_subcommand("run", "Run every stage end to end");
  add_common(run, cf);

  auto* show = app.add_subcommand("config", "Print the resolved configuration");
  add_common(show, cf);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return cmd_synth(cf, sf);
    if (*train_seg) return cmd_train_seg(cf, w_css);
    if (*infer) return cmd_infer_masks(cf, seg_path);
    if (*multi) return cmd_train_multi(cf, masks_dir);
    if (*distill) return cmd_distill(cf, teacher_path, masks_dir, w_ulb);
    if (*evaluate) return cmd_evaluate(cf, ep);
    if (*heatmap) return cmd_heatmap(cf, hf);
    if (*run) return cmd_run(cf);
    if (*show) return cmd_show_config(cf);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
