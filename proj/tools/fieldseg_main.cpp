// fieldseg: experiment runner around the header library. Subcommands
// generate synthetic scene data, pre-train the 2D labeler, run one-scene and
// multi-scene adaptation, evaluate label directories, render stored fields
// and reproduce the memory-footprint comparison.
//
// Every command writes two reproducibility records into its output
// directory: run.txt (tool version, command, seed) and config.txt (the
// fully resolved option set). config.txt is itself a valid --config file:
// rerunning `fieldseg --config config.txt` reproduces the run bit-exactly.
// Explicit flags override config values; unknown config keys are rejected.
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "fieldseg/adaptation.hpp"
#include "fieldseg/continual.hpp"
#include "fieldseg/manifest.hpp"
#include "fieldseg/metrics.hpp"
#include "fieldseg/scene.hpp"
#include "fieldseg/segmenter.hpp"
#include "fieldseg/serialize.hpp"

namespace fs = std::filesystem;
using namespace fieldseg;

namespace {

constexpr const char* kToolVersion = "0.3.0";

void write_run_record(const fs::path& out, const CLI::App& cmd, std::uint64_t seed) {
  fs::create_directories(out);
  std::ofstream run(out / "run.txt", std::ios::binary);
  run << "tool=fieldseg\nversion=" << kToolVersion << "\ncommand=" << cmd.get_name()
      << "\nseed=" << seed << '\n';
  std::ofstream cfg(out / "config.txt", std::ios::binary);
  cfg << '[' << cmd.get_name() << "]\n" << cmd.config_to_str(true, false);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << text;
}

std::string csv_cell(double v, int decimals = 4) {
  return std::isnan(v) ? std::string() : format_double(v, decimals);
}

// ---- gen-scenes ----

struct GenOpts {
  std::string out;
  int n_scenes = 6;
  int n_views = 40;
  int size = 64;
  int first_id = 1;
  double train_fraction = 0.8;
  std::uint64_t seed = 1000;
};

int cmd_gen_scenes(const CLI::App& cmd, const GenOpts& o) {
  fs::path root(o.out);
  write_run_record(root, cmd, o.seed);
  std::string list;
  for (int k = 0; k < o.n_scenes; ++k) {
    int id = o.first_id + k;
    ScenePack pack = make_scene_pack(id, derive_seed(o.seed, "scene", static_cast<std::uint64_t>(id)),
                                     o.n_views, o.train_fraction, {}, o.size, o.size);
    char dirname[32];
    std::snprintf(dirname, sizeof dirname, "scene_%03d", id);
    save_scene_pack(root / dirname, pack);
    list += std::string(dirname) + "/manifest.txt\n";
    std::printf("gen-scenes: scene %d -> %d train / %d val frames\n", id,
                static_cast<int>(pack.train.size()), static_cast<int>(pack.val.size()));
  }
  write_text(root / "scenes.txt", list);
  return 0;
}

// ---- pretrain ----

struct PretrainOpts {
  std::string scenes;
  std::string out;
  int epochs = 30;
  double lr = 1e-3;
  int pixels_per_frame = 256;
  double train_fraction = 0.8;
  double corruption = 0.0;
  std::uint64_t seed = 7;
};

int cmd_pretrain(const CLI::App& cmd, const PretrainOpts& o) {
  fs::path root(o.out);
  write_run_record(root, cmd, o.seed);

  std::vector<ScenePack> packs;
  for (const std::string& path : load_scene_list(o.scenes)) packs.push_back(load_scene_pack(path));
  int class_count = packs.front().spec.class_count;

  // The deployment gap: the labeler never sees clean labels when a
  // corruption rate is set.
  std::size_t scene_index = 0;
  for (ScenePack& p : packs) {
    if (o.corruption > 0.0) {
      Rng rng(derive_seed(o.seed, "corrupt", scene_index));
      for (Frame& f : p.train) f.labels = corrupt_labels(f.labels, o.corruption, class_count, rng);
      for (Frame& f : p.val) f.labels = corrupt_labels(f.labels, o.corruption, class_count, rng);
    }
    ++scene_index;
  }
  std::vector<LabeledImage> pool;
  for (const ScenePack& p : packs) {
    for (const Frame& f : p.train) pool.push_back({&f.rgb, &f.labels});
    for (const Frame& f : p.val) pool.push_back({&f.rgb, &f.labels});
  }

  SegmenterTrainConfig cfg;
  cfg.epochs = o.epochs;
  cfg.lr = o.lr;
  cfg.pixels_per_frame = o.pixels_per_frame;
  cfg.train_fraction = o.train_fraction;
  cfg.seed = o.seed;
  PretrainReport report = pretrain_segmenter(pool, class_count, cfg);

  save_blob((root / "segmenter.blob").string(), serialize_segmenter(report.params));
  std::string metrics = "epoch,val_miou\n";
  for (std::size_t e = 0; e < report.val_miou.size(); ++e)
    metrics += std::to_string(e + 1) + ',' + format_double(report.val_miou[e]) + '\n';
  write_text(root / "metrics.csv", metrics);
  std::string summary = "metric,value\n";
  summary += "pool_images," + std::to_string(pool.size()) + '\n';
  summary += "best_epoch," + std::to_string(report.best_epoch) + '\n';
  summary += "best_val_miou," + format_double(report.best_val_miou) + '\n';
  write_text(root / "summary.csv", summary);
  std::printf("pretrain: best val mIoU %.2f at epoch %d\n", report.best_val_miou,
              report.best_epoch);
  return 0;
}

// ---- shared adaptation options ----

struct AdaptCliOpts {
  std::string variant = "joint";
  std::string encoding = "grid";
  std::vector<int> grid;
  int fourier_levels = 0;
  int n_coarse = 0, n_fine = 0;
  int rays = 0;
  int steps_per_epoch = 0;
  int field_epochs = 0, warmup_epochs = 0, joint_epochs = 0, finetune_epochs = 0;
  int seg_pixels = 0, joint_tile = 0, psnr_views = 0;
  double field_lr = 0.0, seg_lr = 0.0;
  double w_depth = 0.0, w_semantic = 0.0;
  double far = 0.0;  // 0 = furthest camera range among the scenes
  std::string semantic_mode = "softmax";

  AdaptCliOpts() {
    AdaptConfig d;
    grid = d.encoding.grid_resolutions;
    fourier_levels = d.encoding.fourier_levels;
    n_coarse = d.render.n_coarse;
    n_fine = d.render.n_fine;
    rays = d.loss.rays_per_batch;
    steps_per_epoch = d.steps_per_epoch;
    field_epochs = d.field_epochs;
    warmup_epochs = d.field_pretrain_epochs;
    joint_epochs = d.joint_epochs;
    finetune_epochs = d.finetune_epochs;
    seg_pixels = d.seg_pixels_per_image;
    joint_tile = d.joint_tile;
    psnr_views = d.psnr_probe_views;
    field_lr = d.field_lr;
    seg_lr = d.seg_lr;
    w_depth = d.loss.w_d;
    w_semantic = d.loss.w_s;
  }
};

void add_adapt_options(CLI::App* sub, AdaptCliOpts& o) {
  sub->add_option("--variant", o.variant, "adaptation variant")
      ->check(CLI::IsMember({"gi_ml", "gi_nl", "ni_nl", "joint"}))
      ->capture_default_str();
  sub->add_option("--encoding", o.encoding, "positional encoding")
      ->check(CLI::IsMember({"grid", "fourier"}))
      ->capture_default_str();
  sub->add_option("--grid", o.grid, "dense grid resolutions")
      ->delimiter(',')
      ->capture_default_str();
  sub->add_option("--fourier-levels", o.fourier_levels, "fourier encoding levels")
      ->capture_default_str();
  sub->add_option("--n-coarse", o.n_coarse, "coarse samples per ray")->capture_default_str();
  sub->add_option("--n-fine", o.n_fine, "fine samples per ray")->capture_default_str();
  sub->add_option("--rays", o.rays, "rays per field batch")->capture_default_str();
  sub->add_option("--steps-per-epoch", o.steps_per_epoch, "field steps per epoch")
      ->capture_default_str();
  sub->add_option("--field-epochs", o.field_epochs, "field epochs (two-stage variants)")
      ->capture_default_str();
  sub->add_option("--warmup-epochs", o.warmup_epochs, "field-only epochs before joint phase")
      ->capture_default_str();
  sub->add_option("--joint-epochs", o.joint_epochs, "joint epochs")->capture_default_str();
  sub->add_option("--finetune-epochs", o.finetune_epochs, "labeler fine-tune epochs")
      ->capture_default_str();
  sub->add_option("--seg-pixels", o.seg_pixels, "pixels per labeler image")
      ->capture_default_str();
  sub->add_option("--joint-tile", o.joint_tile, "rendered tile edge in joint steps")
      ->capture_default_str();
  sub->add_option("--psnr-views", o.psnr_views, "train views probed for PSNR")
      ->capture_default_str();
  sub->add_option("--field-lr", o.field_lr, "field learning rate")->capture_default_str();
  sub->add_option("--seg-lr", o.seg_lr, "labeler learning rate")->capture_default_str();
  sub->add_option("--w-depth", o.w_depth, "depth loss weight")->capture_default_str();
  sub->add_option("--w-semantic", o.w_semantic, "semantic loss weight")->capture_default_str();
  sub->add_option("--far", o.far, "far plane; 0 keeps the furthest camera range")
      ->capture_default_str();
  sub->add_option("--semantic-mode", o.semantic_mode, "ray label aggregation")
      ->check(CLI::IsMember({"softmax", "logits"}))
      ->capture_default_str();
}

AdaptConfig build_adapt_config(const AdaptCliOpts& o, const std::vector<ScenePack>& scenes) {
  AdaptConfig cfg;
  cfg.encoding.kind =
      o.encoding == "grid" ? EncodingConfig::Kind::kDenseGrid : EncodingConfig::Kind::kFourier;
  cfg.encoding.grid_resolutions = o.grid;
  cfg.encoding.fourier_levels = o.fourier_levels;
  cfg.render.n_coarse = o.n_coarse;
  cfg.render.n_fine = o.n_fine;
  cfg.render.semantic_mode =
      o.semantic_mode == "logits" ? SemanticMode::kLogits : SemanticMode::kSoftmax;
  double near = scenes.front().cam.near;
  double far = o.far;
  for (const ScenePack& s : scenes) {
    near = std::min(near, s.cam.near);
    if (o.far <= 0.0) far = std::max(far, s.cam.far);
  }
  cfg.render.near = near;
  cfg.render.far = far;
  cfg.loss.rays_per_batch = o.rays;
  cfg.loss.w_d = o.w_depth;
  cfg.loss.w_s = o.w_semantic;
  cfg.steps_per_epoch = o.steps_per_epoch;
  cfg.field_epochs = o.field_epochs;
  cfg.field_pretrain_epochs = o.warmup_epochs;
  cfg.joint_epochs = o.joint_epochs;
  cfg.finetune_epochs = o.finetune_epochs;
  cfg.seg_pixels_per_image = o.seg_pixels;
  cfg.joint_tile = o.joint_tile;
  cfg.psnr_probe_views = o.psnr_views;
  cfg.field_lr = o.field_lr;
  cfg.seg_lr = o.seg_lr;
  return cfg;
}

std::string steps_csv(const MultiStepResult& r) {
  std::string out = "step,scene_id,val_miou,psnr_pretrain,psnr_joint,buffer_entries,stored_bytes\n";
  for (std::size_t i = 0; i < r.reports.size(); ++i) {
    const StepReport& rep = r.reports[i];
    out += std::to_string(i) + ',' + std::to_string(rep.scene_id) + ',' +
           format_double(rep.current_val_miou) + ',' + csv_cell(rep.psnr_pretrain) + ',' +
           csv_cell(rep.psnr_joint) + ',' + std::to_string(rep.buffer_entries) + ',' +
           std::to_string(rep.stored_bytes) + '\n';
  }
  return out;
}

std::string cl_metrics_csv(const ClMetrics& m) {
  std::string out = "metric,value\n";
  out += "acc," + format_double(m.acc) + '\n';
  out += "a_mean," + format_double(m.a_mean) + '\n';
  out += "fwt," + (m.fwt ? format_double(*m.fwt) : std::string()) + '\n';
  out += "bwt," + (m.bwt ? format_double(*m.bwt) : std::string()) + '\n';
  return out;
}

// ---- adapt-one ----

struct AdaptOneOpts {
  std::string scene;
  std::string segmenter;
  std::string out;
  std::uint64_t seed = 0;
  AdaptCliOpts adapt;
};

int cmd_adapt_one(const CLI::App& cmd, const AdaptOneOpts& o) {
  fs::path root(o.out);
  write_run_record(root, cmd, o.seed);

  std::vector<ScenePack> scenes{load_scene_pack(o.scene)};
  SegmenterParams seg = deserialize_segmenter(load_blob(o.segmenter));

  ScenarioConfig cfg;
  cfg.n_scenes = 1;
  cfg.replay = ReplayMode::kNone;
  cfg.variant = parse_variant(o.adapt.variant);
  cfg.adapt = build_adapt_config(o.adapt, scenes);
  cfg.seed = o.seed;
  MultiStepResult r = run_multi_step(cfg, seg, scenes, {});

  save_blob((root / "field.blob").string(), r.memory.entries[0].field);
  save_blob((root / "segmenter.blob").string(), serialize_segmenter(r.segmenter));
  write_text(root / "metrics.csv", epoch_log_csv(r.reports[0].log));
  const StepReport& rep = r.reports[0];
  std::string summary = "metric,value\n";
  summary += "scene_id," + std::to_string(rep.scene_id) + '\n';
  summary += "variant," + o.adapt.variant + '\n';
  summary += "baseline_val_miou," + format_double(r.accuracy.baseline[0]) + '\n';
  summary += "val_miou," + format_double(r.accuracy.at(0, 0)) + '\n';
  summary += "psnr_pretrain," + csv_cell(rep.psnr_pretrain) + '\n';
  summary += "psnr_joint," + csv_cell(rep.psnr_joint) + '\n';
  summary += "stored_bytes," + std::to_string(rep.stored_bytes) + '\n';
  write_text(root / "summary.csv", summary);
  write_text(root / "memory.csv", memory_report_csv(r.footprint));
  std::printf("adapt-one: val mIoU %.2f -> %.2f\n", r.accuracy.baseline[0], r.accuracy.at(0, 0));
  return 0;
}

// ---- adapt-multi ----

struct AdaptMultiOpts {
  std::string scenes;
  std::string segmenter;
  std::string out;
  std::string mode = "full";
  std::string pretrain_scenes;
  double pretrain_fraction = 0.10;
  int buffer_capacity = 100;
  int batch_pretrain = 2;
  int batch_current = 2;
  int n_scenes = 0;  // 0 = every scene in the list
  std::uint64_t seed = 0;
  AdaptCliOpts adapt;
};

int cmd_adapt_multi(const CLI::App& cmd, const AdaptMultiOpts& o) {
  fs::path root(o.out);
  write_run_record(root, cmd, o.seed);

  std::vector<std::string> paths = load_scene_list(o.scenes);
  if (o.n_scenes > 0) {
    if (o.n_scenes > static_cast<int>(paths.size()))
      throw IoError("adapt-multi: scene list holds fewer scenes than --n-scenes");
    paths.resize(static_cast<std::size_t>(o.n_scenes));
  }
  std::vector<ScenePack> scenes;
  for (const std::string& p : paths) scenes.push_back(load_scene_pack(p));

  std::vector<ScenePack> pool_packs;
  std::vector<LabeledImage> pool;
  if (!o.pretrain_scenes.empty()) {
    for (const std::string& p : load_scene_list(o.pretrain_scenes))
      pool_packs.push_back(load_scene_pack(p));
    for (const ScenePack& p : pool_packs) {
      for (const Frame& f : p.train) pool.push_back({&f.rgb, &f.labels});
      for (const Frame& f : p.val) pool.push_back({&f.rgb, &f.labels});
    }
  }
  SegmenterParams seg = deserialize_segmenter(load_blob(o.segmenter));

  ScenarioConfig cfg;
  cfg.n_scenes = static_cast<int>(scenes.size());
  cfg.replay = parse_replay_mode(o.mode);
  cfg.variant = parse_variant(o.adapt.variant);
  cfg.pretrain_fraction = o.pretrain_fraction;
  cfg.buffer_capacity = o.buffer_capacity;
  cfg.batch_pretrain = o.batch_pretrain;
  cfg.batch_current = o.batch_current;
  cfg.adapt = build_adapt_config(o.adapt, scenes);
  cfg.seed = o.seed;
  MultiStepResult r = run_multi_step(cfg, seg, scenes, pool);

  for (std::size_t i = 0; i < r.memory.entries.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "field_%03zu.blob", i);
    save_blob((root / name).string(), r.memory.entries[i].field);
    std::snprintf(name, sizeof name, "step_%03zu_metrics.csv", i);
    write_text(root / name, epoch_log_csv(r.reports[i].log));
  }
  save_blob((root / "segmenter.blob").string(), serialize_segmenter(r.segmenter));
  write_accuracy_matrix_csv((root / "accuracy_matrix.csv").string(), r.accuracy);
  write_text(root / "cl_metrics.csv", cl_metrics_csv(cl_metrics(r.accuracy)));
  write_text(root / "steps.csv", steps_csv(r));
  write_text(root / "memory.csv", memory_report_csv(r.footprint));
  std::printf("adapt-multi: %d scenes, final mean mIoU %.2f\n", r.accuracy.n,
              cl_metrics(r.accuracy).acc);
  return 0;
}

// ---- eval ----

struct EvalOpts {
  std::string pred;
  std::string gt;
  std::string out;
  int class_count = kClassCount;
};

int cmd_eval(const CLI::App& cmd, const EvalOpts& o) {
  fs::path root(o.out);
  write_run_record(root, cmd, 0);

  std::vector<std::string> names;
  for (const fs::directory_entry& e : fs::directory_iterator(o.pred))
    if (e.is_regular_file() && e.path().extension() == ".pgm")
      names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  if (names.empty()) throw IoError("eval: no .pgm files under " + o.pred);

  ConfusionMatrix cm(o.class_count);
  for (const std::string& name : names) {
    ImageLabels pred = read_pgm((fs::path(o.pred) / name).string());
    ImageLabels gt = read_pgm((fs::path(o.gt) / name).string());
    accumulate_confusion(cm, pred, gt);
  }
  IouResult r = miou(cm);

  std::int64_t correct = 0, total = 0;
  for (int i = 0; i < o.class_count; ++i) {
    correct += cm.at(i, i);
    for (int j = 0; j < o.class_count; ++j) total += cm.at(i, j);
  }
  std::string csv = "metric,value\n";
  csv += "n_images," + std::to_string(names.size()) + '\n';
  csv += "miou," + format_double(r.miou) + '\n';
  csv += "pixel_accuracy," +
         format_double(total > 0 ? 100.0 * static_cast<double>(correct) / static_cast<double>(total)
                                 : 0.0) +
         '\n';
  for (int k = 0; k < o.class_count; ++k)
    if (r.present[static_cast<std::size_t>(k)])
      csv += "iou_class_" + std::to_string(k) + ',' +
             format_double(r.per_class[static_cast<std::size_t>(k)]) + '\n';
  write_text(root / "metrics.csv", csv);
  std::printf("eval: mIoU %.2f over %d images\n", r.miou, static_cast<int>(names.size()));
  return 0;
}

// ---- render ----

struct RenderOpts {
  std::string field;
  std::string scene;
  std::string out;
  int frame = 0;
  int n_coarse = 0, n_fine = 0;
  double far = 0.0;
  std::string semantic_mode = "softmax";
  std::uint64_t seed = 0;
};

int cmd_render(const CLI::App& cmd, const RenderOpts& o) {
  fs::path root(o.out);
  write_run_record(root, cmd, o.seed);

  FieldParams field = deserialize_field(load_blob(o.field));
  SceneManifest m = load_scene_manifest(o.scene);
  if (o.frame < 0 || o.frame >= static_cast<int>(m.frames.size()))
    throw IoError("render: frame index out of range");

  RenderConfig rcfg;
  rcfg.n_coarse = o.n_coarse;
  rcfg.n_fine = o.n_fine;
  rcfg.near = m.cam.near;
  rcfg.far = o.far > 0.0 ? o.far : m.cam.far;
  rcfg.semantic_mode =
      o.semantic_mode == "logits" ? SemanticMode::kLogits : SemanticMode::kSoftmax;
  rcfg = inference_render(rcfg);
  RenderedView view =
      render_view(field, m.cam, m.frames[static_cast<std::size_t>(o.frame)].pose, rcfg, o.seed);

  write_ppm((root / "render_rgb.ppm").string(), view.rgb);
  write_pfm((root / "render_depth.pfm").string(), view.depth);
  write_pgm((root / "render_labels.pgm").string(), view.labels);
  std::printf("render: frame %d of scene %d\n", o.frame, m.scene_id);
  return 0;
}

// ---- footprint ----

struct FootprintOpts {
  std::string out;
  int n_scenes = 1;
  std::int64_t per_field_bytes = 0;
  std::int64_t pretrain_bytes = 0;
  std::int64_t buffer_bytes = 0;
};

int cmd_footprint(const CLI::App& cmd, const FootprintOpts& o) {
  fs::path root(o.out);
  write_run_record(root, cmd, 0);
  MemoryReport r =
      memory_footprint_report(o.n_scenes, o.per_field_bytes, o.pretrain_bytes, o.buffer_bytes);
  std::string csv = memory_report_csv(r);
  write_text(root / "memory.csv", csv);
  std::fputs(csv.c_str(), stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fieldseg: continual semantic adaptation with neural fields"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("fieldseg ") + kToolVersion);

  GenOpts gen;
  CLI::App* gen_cmd = app.add_subcommand("gen-scenes", "generate synthetic scenes to disk");
  gen_cmd->add_option("--out", gen.out, "output directory")->required();
  gen_cmd->add_option("--n-scenes", gen.n_scenes, "number of scenes")->capture_default_str();
  gen_cmd->add_option("--n-views", gen.n_views, "views per scene")->capture_default_str();
  gen_cmd->add_option("--size", gen.size, "image edge in pixels")->capture_default_str();
  gen_cmd->add_option("--first-id", gen.first_id, "id of the first scene")->capture_default_str();
  gen_cmd->add_option("--train-fraction", gen.train_fraction, "train split fraction")
      ->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "base seed")->capture_default_str();

  PretrainOpts pre;
  CLI::App* pre_cmd = app.add_subcommand("pretrain", "pre-train the 2D labeler on saved scenes");
  pre_cmd->add_option("--scenes", pre.scenes, "scene list file")->required();
  pre_cmd->add_option("--out", pre.out, "output directory")->required();
  pre_cmd->add_option("--epochs", pre.epochs, "training epochs")->capture_default_str();
  pre_cmd->add_option("--lr", pre.lr, "learning rate")->capture_default_str();
  pre_cmd->add_option("--pixels-per-frame", pre.pixels_per_frame, "sampled pixels per frame")
      ->capture_default_str();
  pre_cmd->add_option("--train-fraction", pre.train_fraction, "held-out validation split")
      ->capture_default_str();
  pre_cmd->add_option("--corruption", pre.corruption, "label corruption rate")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  pre_cmd->add_option("--seed", pre.seed, "base seed")->capture_default_str();

  AdaptOneOpts one;
  CLI::App* one_cmd = app.add_subcommand("adapt-one", "adapt to a single saved scene");
  one_cmd->add_option("--scene", one.scene, "scene manifest")->required();
  one_cmd->add_option("--segmenter", one.segmenter, "pre-trained labeler blob")->required();
  one_cmd->add_option("--out", one.out, "output directory")->required();
  one_cmd->add_option("--seed", one.seed, "base seed")->capture_default_str();
  add_adapt_options(one_cmd, one.adapt);

  AdaptMultiOpts multi;
  CLI::App* multi_cmd = app.add_subcommand("adapt-multi", "adapt across a scene sequence");
  multi_cmd->add_option("--scenes", multi.scenes, "ordered scene list file")->required();
  multi_cmd->add_option("--segmenter", multi.segmenter, "pre-trained labeler blob")->required();
  multi_cmd->add_option("--out", multi.out, "output directory")->required();
  multi_cmd->add_option("--mode", multi.mode, "replay mode")
      ->check(CLI::IsMember({"none", "pretrain_only", "full", "full_novel_views"}))
      ->capture_default_str();
  multi_cmd->add_option("--pretrain-scenes", multi.pretrain_scenes,
                        "scene list for the pre-training replay pool");
  multi_cmd->add_option("--pretrain-fraction", multi.pretrain_fraction,
                        "kept fraction of the pool")
      ->capture_default_str();
  multi_cmd->add_option("--buffer-capacity", multi.buffer_capacity, "render buffer capacity")
      ->capture_default_str();
  multi_cmd->add_option("--batch-pretrain", multi.batch_pretrain, "pool items per labeler batch")
      ->capture_default_str();
  multi_cmd->add_option("--batch-current", multi.batch_current,
                        "current-or-replay items per labeler batch")
      ->capture_default_str();
  multi_cmd->add_option("--n-scenes", multi.n_scenes, "limit to the first N scenes (0 = all)")
      ->capture_default_str();
  multi_cmd->add_option("--seed", multi.seed, "base seed")->capture_default_str();
  add_adapt_options(multi_cmd, multi.adapt);

  EvalOpts ev;
  CLI::App* eval_cmd = app.add_subcommand("eval", "score predicted labels against ground truth");
  eval_cmd->add_option("--pred", ev.pred, "directory of predicted .pgm labels")->required();
  eval_cmd->add_option("--gt", ev.gt, "directory of ground-truth .pgm labels")->required();
  eval_cmd->add_option("--out", ev.out, "output directory")->required();
  eval_cmd->add_option("--class-count", ev.class_count, "number of classes")
      ->capture_default_str();

  RenderOpts ren;
  CLI::App* render_cmd = app.add_subcommand("render", "render a stored field checkpoint");
  render_cmd->add_option("--field", ren.field, "field blob")->required();
  render_cmd->add_option("--scene", ren.scene, "scene manifest supplying camera and poses")
      ->required();
  render_cmd->add_option("--out", ren.out, "output directory")->required();
  render_cmd->add_option("--frame", ren.frame, "manifest frame index for the pose")
      ->capture_default_str();
  {
    RenderConfig d;
    ren.n_coarse = d.n_coarse;
    ren.n_fine = d.n_fine;
  }
  render_cmd->add_option("--n-coarse", ren.n_coarse, "coarse samples per ray")
      ->capture_default_str();
  render_cmd->add_option("--n-fine", ren.n_fine, "fine samples per ray")->capture_default_str();
  render_cmd->add_option("--far", ren.far, "far plane; 0 keeps the camera range")
      ->capture_default_str();
  render_cmd->add_option("--semantic-mode", ren.semantic_mode, "ray label aggregation")
      ->check(CLI::IsMember({"softmax", "logits"}))
      ->capture_default_str();
  render_cmd->add_option("--seed", ren.seed, "render seed")->capture_default_str();

  FootprintOpts fp;
  CLI::App* fp_cmd = app.add_subcommand("footprint", "memory footprint report");
  fp_cmd->add_option("--out", fp.out, "output directory")->required();
  fp_cmd->add_option("--n-scenes", fp.n_scenes, "stored scene count")->capture_default_str();
  fp_cmd->add_option("--per-field-bytes", fp.per_field_bytes, "measured bytes per stored field")
      ->capture_default_str();
  fp_cmd->add_option("--pretrain-bytes", fp.pretrain_bytes, "measured retained-pool bytes")
      ->capture_default_str();
  fp_cmd->add_option("--buffer-bytes", fp.buffer_bytes, "measured render-buffer bytes")
      ->capture_default_str();

  for (CLI::App* sub : {gen_cmd, pre_cmd, one_cmd, multi_cmd, eval_cmd, render_cmd, fp_cmd}) {
    sub->set_config("--config", "", "key=value file; explicit flags override it");
    sub->allow_config_extras(CLI::config_extras_mode::error);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen_cmd->parsed()) return cmd_gen_scenes(*gen_cmd, gen);
    if (pre_cmd->parsed()) return cmd_pretrain(*pre_cmd, pre);
    if (one_cmd->parsed()) return cmd_adapt_one(*one_cmd, one);
    if (multi_cmd->parsed()) return cmd_adapt_multi(*multi_cmd, multi);
    if (eval_cmd->parsed()) return cmd_eval(*eval_cmd, ev);
    if (render_cmd->parsed()) return cmd_render(*render_cmd, ren);
    if (fp_cmd->parsed()) return cmd_footprint(*fp_cmd, fp);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "fieldseg: %s\n", e.what());
    return 1;
  }
  return 2;
}
