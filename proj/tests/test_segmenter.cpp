#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <utility>
#include <vector>

#include "fieldseg/scene.hpp"
#include "fieldseg/segmenter.hpp"

using namespace fieldseg;

namespace {

// Frames interleaved across scenes so a first-frames-train split sees every
// scene on both sides.
std::vector<Frame> render_pool(int n_scenes, int frames_per_scene, int res) {
  std::vector<std::vector<Frame>> per_scene;
  for (int id = 0; id < n_scenes; ++id) {
    SceneSpec spec = generate_scene(id, 401);
    Camera cam = default_camera(spec, res, res);
    per_scene.emplace_back();
    for (const Pose& p : generate_trajectory(spec, frames_per_scene, 82 + id))
      per_scene.back().push_back(render_ground_truth(spec, cam, p));
  }
  std::vector<Frame> pool;
  for (int i = 0; i < frames_per_scene; ++i)
    for (int id = 0; id < n_scenes; ++id) pool.push_back(per_scene[static_cast<std::size_t>(id)][static_cast<std::size_t>(i)]);
  return pool;
}

std::vector<LabeledImage> views_of(const std::vector<Frame>& frames) {
  std::vector<LabeledImage> out;
  for (const Frame& f : frames) out.push_back({&f.rgb, &f.labels});
  return out;
}

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && a.raw() == b.raw();
}

bool same_weights(const SegmenterParams& a, const SegmenterParams& b) {
  if (a.params.names() != b.params.names()) return false;
  for (const std::string& n : a.params.names())
    if (!same_bits(a.params.tensor(n), b.params.tensor(n))) return false;
  return true;
}

ImageRgb flip_rgb(const ImageRgb& img) {
  ImageRgb out(img.width, img.height, 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = img.at(img.width - 1 - x, y, c);
  return out;
}

ImageLabels flip_labels(const ImageLabels& img) {
  ImageLabels out(img.width, img.height, 1);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) out.at(x, y) = img.at(img.width - 1 - x, y);
  return out;
}

// Per-pixel augmented NLL: the mean over both patch orientations under
// eval-mode normalization, after the given recoloring.
std::vector<double> pixel_losses(const SegmenterParams& s, const ImageRgb& rgb,
                                 const ImageLabels& lab, const JitterParams& jit) {
  ad::NoGradGuard ng;
  ImageRgb img = apply_color_jitter(rgb, jit);
  std::vector<std::pair<int, int>> px;
  std::vector<int> targets;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      px.emplace_back(x, y);
      targets.push_back(lab.at(x, y));
    }
  Tensor f0 = segmenter_patch_features(img, px, s.patch_radius, false);
  Tensor f1 = segmenter_patch_features(img, px, s.patch_radius, true);
  Tensor n0 = loss_semantic_nll(ad::softmax_last(segmenter_logits_eval(s, f0)), targets,
                                kIgnoreLabel)
                  .value();
  Tensor n1 = loss_semantic_nll(ad::softmax_last(segmenter_logits_eval(s, f1)), targets,
                                kIgnoreLabel)
                  .value();
  std::vector<double> out(px.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = 0.5 * (n0[static_cast<std::int64_t>(i)] + n1[static_cast<std::int64_t>(i)]);
  return out;
}

}  // namespace

TEST_CASE("segmenter init is deterministic and validated", "[segmenter]") {
  SegmenterParams a = init_segmenter(7, 6);
  SegmenterParams b = init_segmenter(7, 6);
  REQUIRE(same_weights(a, b));
  REQUIRE(a.feature_width() == 75);
  REQUIRE(a.params.tensor("mlp.w0").dim(0) == 75);
  REQUIRE(a.params.tensor("head.w").dim(1) == 6);
  for (int j = 0; j < 75; ++j) {
    REQUIRE(a.bn.running_mean[j] == 0.0);
    REQUIRE(a.bn.running_var[j] == 1.0);
  }

  SegmenterParams c = init_segmenter(8, 6);
  REQUIRE_FALSE(same_weights(a, c));

  REQUIRE_THROWS_AS(init_segmenter(1, 1), std::runtime_error);
  REQUIRE_THROWS_AS(init_segmenter(1, 6, -1), std::runtime_error);
}

TEST_CASE("patch features clamp at borders and mirror cleanly", "[segmenter]") {
  ImageRgb img(4, 3, 3);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 4; ++x)
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = 0.01 * x + 0.1 * y + 0.3 * c;

  int radius = 2;
  Tensor corner = segmenter_patch_features(img, {{0, 0}}, radius);
  int col = 0;
  for (int dy = -radius; dy <= radius; ++dy) {
    int py = std::max(0, std::min(2, dy));
    for (int dx = -radius; dx <= radius; ++dx) {
      int px = std::max(0, std::min(3, dx));
      for (int c = 0; c < 3; ++c) REQUIRE(corner.at(0, col++) == img.at(px, py, c));
    }
  }

  // Mirrored sampling equals normal sampling of the flipped image.
  ImageRgb flipped = flip_rgb(img);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 4; ++x) {
      Tensor m = segmenter_patch_features(img, {{x, y}}, radius, true);
      Tensor n = segmenter_patch_features(flipped, {{3 - x, y}}, radius, false);
      REQUIRE(m.raw() == n.raw());
    }

  REQUIRE_THROWS_AS(segmenter_patch_features(img, {{4, 0}}, radius), std::runtime_error);
}

TEST_CASE("color jitter at zero strength is the identity", "[segmenter]") {
  SceneSpec spec = generate_scene(0, 52);
  Camera cam = default_camera(spec, 16, 16);
  Frame f = render_ground_truth(spec, cam, generate_trajectory(spec, 1, 9)[0]);

  Rng rng(4);
  ImageRgb same = apply_color_jitter(f.rgb, sample_jitter(rng, 0.0));
  REQUIRE(same.data == f.rgb.data);

  ImageRgb moved = apply_color_jitter(f.rgb, sample_jitter(rng, 1.0));
  REQUIRE(moved.data != f.rgb.data);
  for (double v : moved.data) {
    REQUIRE(v >= 0.0);
    REQUIRE(v <= 1.0);
  }
}

TEST_CASE("predictions are valid distributions with consistent argmax", "[segmenter]") {
  SceneSpec spec = generate_scene(1, 53);
  Camera cam = default_camera(spec, 20, 20);
  Frame f = render_ground_truth(spec, cam, generate_trajectory(spec, 1, 10)[0]);

  SegmenterParams s = init_segmenter(21, kClassCount);
  PredictionMap pm = segmenter_predict(s, f.rgb);
  REQUIRE(pm.dist.dim(0) == 400);
  REQUIRE(pm.dist.dim(1) == kClassCount);
  for (int i = 0; i < pm.dist.dim(0); ++i) {
    double sum = 0.0;
    int best = 0;
    for (int j = 0; j < kClassCount; ++j) {
      REQUIRE(pm.dist.at(i, j) >= 0.0);
      sum += pm.dist.at(i, j);
      if (pm.dist.at(i, j) > pm.dist.at(i, best)) best = j;
    }
    REQUIRE(sum == Catch::Approx(1.0).margin(1e-6));
    REQUIRE(pm.labels.data[static_cast<std::size_t>(i)] == best);
  }

  PredictionMap again = segmenter_predict(s, f.rgb);
  REQUIRE(again.dist.raw() == pm.dist.raw());
  REQUIRE(again.labels.data == pm.labels.data);
}

TEST_CASE("flipping image and labels together leaves per-pixel losses unchanged",
          "[segmenter]") {
  SceneSpec spec = generate_scene(2, 54);
  Camera cam = default_camera(spec, 18, 18);
  Frame f = render_ground_truth(spec, cam, generate_trajectory(spec, 1, 11)[0]);

  // A few steps break the fresh-init symmetry before checking the property.
  SegmenterParams s = init_segmenter(30, kClassCount);
  AdamState adam(s.params, {});
  Rng rng(6);
  std::vector<LabeledImage> batch = {{&f.rgb, &f.labels}};
  for (int i = 0; i < 5; ++i) segmenter_train_step(s, adam, batch, 1e-3, 64, rng);

  JitterParams jit = sample_jitter(rng, 1.0);
  std::vector<double> orig = pixel_losses(s, f.rgb, f.labels, jit);

  ImageRgb frgb = flip_rgb(f.rgb);
  ImageLabels flab = flip_labels(f.labels);
  std::vector<double> flip = pixel_losses(s, frgb, flab, jit);

  for (int y = 0; y < f.rgb.height; ++y)
    for (int x = 0; x < f.rgb.width; ++x) {
      double a = orig[static_cast<std::size_t>(y) * f.rgb.width + x];
      double b = flip[static_cast<std::size_t>(y) * f.rgb.width + (f.rgb.width - 1 - x)];
      REQUIRE(a == b);  // exact, not approximate
    }
}

TEST_CASE("zero learning rate and ignore-only labels leave weights unchanged",
          "[segmenter]") {
  SceneSpec spec = generate_scene(3, 55);
  Camera cam = default_camera(spec, 16, 16);
  Frame f = render_ground_truth(spec, cam, generate_trajectory(spec, 1, 12)[0]);

  SegmenterParams s = init_segmenter(40, kClassCount);
  SegmenterParams before = clone_segmenter(s);
  {
    AdamState adam(s.params, {});
    Rng rng(3);
    double loss = segmenter_train_step(s, adam, {{&f.rgb, &f.labels}}, 0.0, 64, rng);
    REQUIRE(loss > 0.0);
    REQUIRE(same_weights(s, before));
  }

  ImageLabels all_ignore(f.labels.width, f.labels.height, 1, kIgnoreLabel);
  {
    AdamState adam(s.params, {});
    Rng rng(3);
    double loss = segmenter_train_step(s, adam, {{&f.rgb, &all_ignore}}, 1e-2, 64, rng);
    REQUIRE(loss == 0.0);
    REQUIRE(same_weights(s, before));
  }
}

TEST_CASE("training on a fixed batch gives a non-increasing loss trend", "[segmenter]") {
  SceneSpec spec = generate_scene(4, 56);
  Camera cam = default_camera(spec, 24, 24);
  Frame f = render_ground_truth(spec, cam, generate_trajectory(spec, 1, 13)[0]);

  SegmenterParams s = init_segmenter(50, kClassCount);
  AdamState adam(s.params, {});
  std::vector<double> losses;
  for (int step = 0; step < 20; ++step) {
    Rng rng(11);  // reseeding fixes pixels and jitter, so the batch is fixed
    losses.push_back(segmenter_train_step(s, adam, {{&f.rgb, &f.labels}}, 1e-3, 128, rng));
  }
  int violations = 0;
  for (std::size_t i = 1; i < losses.size(); ++i)
    if (losses[i] > losses[i - 1] + 1e-9) ++violations;
  REQUIRE(violations <= 3);
  REQUIRE(losses.back() < losses.front());
}

TEST_CASE("overfitting a single frame reaches 90 percent pixel accuracy", "[segmenter]") {
  SceneSpec spec = generate_scene(5, 77);
  Camera cam = default_camera(spec, 32, 32);
  Frame f = render_ground_truth(spec, cam, generate_trajectory(spec, 1, 14)[0]);

  SegmenterParams s = init_segmenter(60, kClassCount);
  AdamState adam(s.params, {});
  Rng rng(5);
  for (int step = 0; step < 50; ++step)
    segmenter_train_step(s, adam, {{&f.rgb, &f.labels}}, 1e-2, 512, rng);

  PredictionMap pm = segmenter_predict(s, f.rgb);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < f.labels.data.size(); ++i)
    if (pm.labels.data[i] == f.labels.data[i]) ++hits;
  double acc = static_cast<double>(hits) / static_cast<double>(f.labels.data.size());
  REQUIRE(acc >= 0.9);
}

TEST_CASE("pretraining keeps the best validation checkpoint and beats chance",
          "[segmenter]") {
  std::vector<Frame> pool = render_pool(2, 5, 24);
  std::vector<LabeledImage> views = views_of(pool);

  SegmenterTrainConfig cfg;
  cfg.epochs = 10;
  cfg.lr = 1e-3;
  cfg.pixels_per_frame = 256;
  cfg.seed = 9;
  PretrainReport report = pretrain_segmenter(views, kClassCount, cfg);

  REQUIRE(static_cast<int>(report.val_miou.size()) == cfg.epochs);
  REQUIRE(report.best_epoch >= 1);
  REQUIRE(report.best_epoch <= cfg.epochs);
  double best = report.val_miou[0];
  for (double v : report.val_miou) best = std::max(best, v);
  REQUIRE(report.best_val_miou == best);

  // The checkpoint reproduces its recorded validation score.
  FrameSplit split = split_frames(static_cast<int>(views.size()), cfg.train_fraction);
  std::vector<LabeledImage> val;
  for (int i : split.val) val.push_back(views[static_cast<std::size_t>(i)]);
  REQUIRE(segmenter_miou(report.params, val) == report.best_val_miou);

  // Better than the uniform baseline on the whole pool.
  REQUIRE(segmenter_miou(report.params, views) > 100.0 / kClassCount);

  PretrainReport again = pretrain_segmenter(views, kClassCount, cfg);
  REQUIRE(serialize_segmenter(again.params) == serialize_segmenter(report.params));
  REQUIRE(again.val_miou == report.val_miou);
}

TEST_CASE("statistic adaptation on the training domain is small and stable",
          "[segmenter]") {
  std::vector<Frame> pool = render_pool(2, 8, 24);
  std::vector<LabeledImage> views = views_of(pool);

  SegmenterTrainConfig cfg;
  cfg.epochs = 8;
  cfg.lr = 1e-3;
  cfg.pixels_per_frame = 256;
  cfg.seed = 13;
  PretrainReport report = pretrain_segmenter(views, kClassCount, cfg);

  std::vector<const ImageRgb*> images;
  for (const Frame& f : pool) images.push_back(&f.rgb);
  SegmenterParams adapted = adapt_norm_stats(report.params, images);

  REQUIRE(same_weights(adapted, report.params));

  // Same domain: mean shift (in feature std units) and relative variance
  // change both stay under 10 percent on average.
  int feat = report.params.feature_width();
  double mean_shift = 0.0, var_shift = 0.0;
  for (int j = 0; j < feat; ++j) {
    double v0 = report.params.bn.running_var[j];
    REQUIRE(adapted.bn.running_var[j] > 0.0);
    mean_shift += std::abs(adapted.bn.running_mean[j] - report.params.bn.running_mean[j]) /
                  std::sqrt(v0);
    var_shift += std::abs(adapted.bn.running_var[j] - v0) / v0;
  }
  mean_shift /= feat;
  var_shift /= feat;
  CHECK(mean_shift < 0.10);
  CHECK(var_shift < 0.10);

  SegmenterParams twice = adapt_norm_stats(report.params, images);
  REQUIRE(twice.bn.running_mean.raw() == adapted.bn.running_mean.raw());
  REQUIRE(twice.bn.running_var.raw() == adapted.bn.running_var.raw());

  REQUIRE_THROWS_AS(adapt_norm_stats(report.params, {}), std::runtime_error);
}

TEST_CASE("segmenter blobs round trip bit-exactly and reject corruption", "[segmenter]") {
  SceneSpec spec = generate_scene(6, 58);
  Camera cam = default_camera(spec, 16, 16);
  Frame f = render_ground_truth(spec, cam, generate_trajectory(spec, 1, 15)[0]);

  SegmenterParams s = init_segmenter(70, kClassCount);
  AdamState adam(s.params, {});
  Rng rng(8);
  for (int i = 0; i < 3; ++i) segmenter_train_step(s, adam, {{&f.rgb, &f.labels}}, 1e-3, 64, rng);

  Blob blob = serialize_segmenter(s);
  SegmenterParams restored = deserialize_segmenter(blob);
  REQUIRE(serialize_segmenter(restored) == blob);
  REQUIRE(same_weights(restored, s));
  REQUIRE(restored.bn.running_mean.raw() == s.bn.running_mean.raw());
  REQUIRE(restored.bn.running_var.raw() == s.bn.running_var.raw());

  PredictionMap a = segmenter_predict(s, f.rgb);
  PredictionMap b = segmenter_predict(restored, f.rgb);
  REQUIRE(a.dist.raw() == b.dist.raw());
  REQUIRE(a.labels.data == b.labels.data);

  Blob bad_kind = blob;
  bad_kind[4] = 'F';
  REQUIRE_THROWS_AS(deserialize_segmenter(bad_kind), BlobError);

  Blob truncated(blob.begin(), blob.end() - 5);
  REQUIRE_THROWS_AS(deserialize_segmenter(truncated), BlobError);

  Blob trailing = blob;
  trailing.push_back(0);
  REQUIRE_THROWS_AS(deserialize_segmenter(trailing), BlobError);

  SegmenterParams degenerate = clone_segmenter(s);
  degenerate.bn.running_var[3] = 0.0;
  REQUIRE_THROWS_AS(deserialize_segmenter(serialize_segmenter(degenerate)), BlobError);
}
