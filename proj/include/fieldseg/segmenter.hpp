#pragma once

// The 2D per-pixel segmenter: a patch classifier over RGB only.
//
// Architecture: 5x5 RGB patch -> flatten (75) -> batch norm -> 64 -> 64 -> C
// logits. Normalization uses batch statistics while training and running
// statistics (momentum 0.9) at inference, which is what makes AdaBN-style
// statistic adaptation meaningful under the palette shift between scenes.
//
// Training always sees both patch orientations (the mirrored patch shares the
// center label) plus a per-image color jitter. Using both orientations
// instead of a coin flip makes the flip-consistency property exact: flipping
// image and labels together permutes pixels but leaves every per-pixel loss
// value unchanged.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fieldseg/autodiff.hpp"
#include "fieldseg/geometry.hpp"
#include "fieldseg/image.hpp"
#include "fieldseg/losses.hpp"
#include "fieldseg/metrics.hpp"
#include "fieldseg/optim.hpp"
#include "fieldseg/rng.hpp"
#include "fieldseg/scene.hpp"
#include "fieldseg/serialize.hpp"
#include "fieldseg/tensor.hpp"

namespace fieldseg {

struct SegmenterParams {
  int patch_radius = 2;
  int class_count = 6;
  double bn_momentum = 0.9;
  ParamStore params;
  ad::BatchNormStats bn;

  int feature_width() const {
    int side = 2 * patch_radius + 1;
    return 3 * side * side;
  }
};

constexpr int kSegmenterHiddenWidth = 64;

inline SegmenterParams init_segmenter(std::uint64_t seed, int class_count, int patch_radius = 2) {
  if (class_count < 2) throw std::runtime_error("init_segmenter: class count must be >= 2");
  if (patch_radius < 0) throw std::runtime_error("init_segmenter: negative patch radius");
  SegmenterParams s;
  s.patch_radius = patch_radius;
  s.class_count = class_count;
  int feat = s.feature_width();
  Rng rng(derive_seed(seed, "segmenter_init"));
  s.params.add("bn.gamma", Tensor::full({feat}, 1.0));
  s.params.add("bn.beta", Tensor::zeros({feat}));
  s.params.add("mlp.w0", init_linear_weight(feat, kSegmenterHiddenWidth, rng));
  s.params.add("mlp.b0", Tensor::zeros({kSegmenterHiddenWidth}));
  s.params.add("mlp.w1", init_linear_weight(kSegmenterHiddenWidth, kSegmenterHiddenWidth, rng));
  s.params.add("mlp.b1", Tensor::zeros({kSegmenterHiddenWidth}));
  s.params.add("head.w", init_linear_weight(kSegmenterHiddenWidth, class_count, rng));
  s.params.add("head.b", Tensor::zeros({class_count}));
  s.bn.running_mean = Tensor::zeros({feat});
  s.bn.running_var = Tensor::full({feat}, 1.0);
  return s;
}

inline SegmenterParams clone_segmenter(const SegmenterParams& s) {
  SegmenterParams out;
  out.patch_radius = s.patch_radius;
  out.class_count = s.class_count;
  out.bn_momentum = s.bn_momentum;
  out.params = s.params.clone();
  out.bn = s.bn;
  return out;
}

// Flattened RGB patch around each pixel, borders clamped to the image edge.
// mirrored samples the patch left-right flipped; the center label is shared.
inline Tensor segmenter_patch_features(const ImageRgb& img,
                                       const std::vector<std::pair<int, int>>& pixels, int radius,
                                       bool mirrored = false) {
  int side = 2 * radius + 1;
  Tensor out({static_cast<int>(pixels.size()), 3 * side * side});
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    auto [x, y] = pixels[i];
    if (x < 0 || x >= img.width || y < 0 || y >= img.height)
      throw std::runtime_error("segmenter_patch_features: pixel outside image");
    int col = 0;
    for (int dy = -radius; dy <= radius; ++dy) {
      int py = y + dy;
      py = py < 0 ? 0 : (py >= img.height ? img.height - 1 : py);
      for (int dx = -radius; dx <= radius; ++dx) {
        int px = x + (mirrored ? -dx : dx);
        px = px < 0 ? 0 : (px >= img.width ? img.width - 1 : px);
        for (int c = 0; c < 3; ++c) out.at(static_cast<int>(i), col++) = img.at(px, py, c);
      }
    }
  }
  return out;
}

// Per-channel affine recoloring; strength 0 is the exact identity.
struct JitterParams {
  Vec3 scale{1.0, 1.0, 1.0};
  Vec3 offset{0.0, 0.0, 0.0};
};

inline JitterParams sample_jitter(Rng& rng, double strength) {
  JitterParams j;
  j.scale = {1.0 + strength * rng.uniform(-0.2, 0.2), 1.0 + strength * rng.uniform(-0.2, 0.2),
             1.0 + strength * rng.uniform(-0.2, 0.2)};
  j.offset = {strength * rng.uniform(-0.05, 0.05), strength * rng.uniform(-0.05, 0.05),
              strength * rng.uniform(-0.05, 0.05)};
  return j;
}

inline ImageRgb apply_color_jitter(const ImageRgb& img, const JitterParams& j) {
  ImageRgb out = img;
  const double s[3] = {j.scale.x, j.scale.y, j.scale.z};
  const double o[3] = {j.offset.x, j.offset.y, j.offset.z};
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = out.at(x, y, c) * s[c] + o[c];
        out.at(x, y, c) = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
      }
  return out;
}

// Batch-statistics forward; folds the batch into the running stats.
inline ad::Var segmenter_logits_train(SegmenterParams& s, const Tensor& features) {
  using namespace ad;
  Var x = Var::constant(features);
  Var h = batchnorm_train(x, s.params.var("bn.gamma"), s.params.var("bn.beta"), s.bn,
                          s.bn_momentum);
  h = relu(add_bias(matmul(h, s.params.var("mlp.w0")), s.params.var("mlp.b0")));
  h = relu(add_bias(matmul(h, s.params.var("mlp.w1")), s.params.var("mlp.b1")));
  return add_bias(matmul(h, s.params.var("head.w")), s.params.var("head.b"));
}

// Running-statistics forward; never mutates.
inline ad::Var segmenter_logits_eval(const SegmenterParams& s, const Tensor& features) {
  using namespace ad;
  Var x = Var::constant(features);
  Var h = batchnorm_eval(x, s.params.var("bn.gamma"), s.params.var("bn.beta"), s.bn);
  h = relu(add_bias(matmul(h, s.params.var("mlp.w0")), s.params.var("mlp.b0")));
  h = relu(add_bias(matmul(h, s.params.var("mlp.w1")), s.params.var("mlp.b1")));
  return add_bias(matmul(h, s.params.var("head.w")), s.params.var("head.b"));
}

struct PredictionMap {
  Tensor dist;         // [H*W, C], row-major by pixel
  ImageLabels labels;  // argmax per pixel
};

// Per-pixel inference over the whole image. Depth never enters the model.
inline PredictionMap segmenter_predict(const SegmenterParams& s, const ImageRgb& img) {
  ad::NoGradGuard ng;
  if (img.width < 1 || img.height < 1)
    throw std::runtime_error("segmenter_predict: empty image");
  std::vector<std::pair<int, int>> pixels;
  pixels.reserve(img.pixel_count());
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) pixels.emplace_back(x, y);
  Tensor feat = segmenter_patch_features(img, pixels, s.patch_radius);
  ad::Var dist = ad::softmax_last(segmenter_logits_eval(s, feat));

  PredictionMap out;
  out.dist = dist.value();
  out.labels = ImageLabels(img.width, img.height, 1);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    int best = 0;
    for (int j = 1; j < s.class_count; ++j)
      if (out.dist.at(static_cast<int>(i), j) > out.dist.at(static_cast<int>(i), best)) best = j;
    out.labels.data[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

// AdaBN: replace the running statistics with statistics of the given images;
// every weight stays bit-identical. Variances are floored to stay positive.
inline SegmenterParams adapt_norm_stats(const SegmenterParams& s,
                                        const std::vector<const ImageRgb*>& images) {
  if (images.empty()) throw std::runtime_error("adapt_norm_stats: no images");
  SegmenterParams out = clone_segmenter(s);
  int feat = s.feature_width();
  Tensor mean = Tensor::zeros({feat});
  Tensor var = Tensor::zeros({feat});
  std::int64_t rows = 0;
  std::vector<Tensor> batches;
  for (const ImageRgb* img : images) {
    std::vector<std::pair<int, int>> pixels;
    pixels.reserve(img->pixel_count());
    for (int y = 0; y < img->height; ++y)
      for (int x = 0; x < img->width; ++x) pixels.emplace_back(x, y);
    batches.push_back(segmenter_patch_features(*img, pixels, s.patch_radius));
    rows += batches.back().dim(0);
  }
  for (const Tensor& b : batches)
    for (int i = 0; i < b.dim(0); ++i)
      for (int j = 0; j < feat; ++j) mean[j] += b.at(i, j);
  for (int j = 0; j < feat; ++j) mean[j] /= static_cast<double>(rows);
  for (const Tensor& b : batches)
    for (int i = 0; i < b.dim(0); ++i)
      for (int j = 0; j < feat; ++j) {
        double d = b.at(i, j) - mean[j];
        var[j] += d * d;
      }
  for (int j = 0; j < feat; ++j) {
    var[j] /= static_cast<double>(rows);
    if (var[j] < 1e-12) var[j] = 1e-12;
  }
  out.bn.running_mean = std::move(mean);
  out.bn.running_var = std::move(var);
  return out;
}

struct LabeledImage {
  const ImageRgb* rgb = nullptr;
  const ImageLabels* labels = nullptr;
};

namespace detail {

inline Tensor stack_rows(const std::vector<Tensor>& parts) {
  int cols = parts.front().dim(1);
  int rows = 0;
  for (const Tensor& p : parts) rows += p.dim(0);
  Tensor out({rows, cols});
  int r = 0;
  for (const Tensor& p : parts) {
    std::copy(p.raw().begin(), p.raw().end(), out.raw().begin() + static_cast<std::ptrdiff_t>(r) * cols);
    r += p.dim(0);
  }
  return out;
}

}  // namespace detail

// One Adam step of cross_entropy_2d over sampled pixels of the batch images,
// with both patch orientations and per-image color jitter. Returns the loss.
inline double segmenter_train_step(SegmenterParams& s, AdamState& adam,
                                   const std::vector<LabeledImage>& batch, double lr,
                                   int pixels_per_image, Rng& rng,
                                   double jitter_strength = 1.0) {
  if (batch.empty()) throw std::runtime_error("segmenter_train_step: empty batch");
  std::vector<Tensor> parts;
  std::vector<int> targets;
  for (const LabeledImage& item : batch) {
    const ImageRgb& rgb = *item.rgb;
    const ImageLabels& lab = *item.labels;
    ImageRgb jittered = apply_color_jitter(rgb, sample_jitter(rng, jitter_strength));
    std::vector<std::pair<int, int>> pixels(static_cast<std::size_t>(pixels_per_image));
    for (auto& p : pixels)
      p = {static_cast<int>(rng.uniform_int(rgb.width)), static_cast<int>(rng.uniform_int(rgb.height))};
    parts.push_back(segmenter_patch_features(jittered, pixels, s.patch_radius, false));
    parts.push_back(segmenter_patch_features(jittered, pixels, s.patch_radius, true));
    for (int pass = 0; pass < 2; ++pass)
      for (auto [x, y] : pixels) targets.push_back(lab.at(x, y));
  }
  Tensor features = detail::stack_rows(parts);

  s.params.zero_grad();
  ad::Var logits = segmenter_logits_train(s, features);
  CrossEntropy2d ce = cross_entropy_2d(ad::softmax_last(logits), targets, kIgnoreLabel);
  double loss = ce.loss.value().item();
  if (ce.valid > 0) ad::backward(ce.loss);
  adam.step(s.params, lr);
  return loss;
}

struct SegmenterTrainConfig {
  int epochs = 30;
  double lr = 1e-3;
  int pixels_per_frame = 256;
  double jitter_strength = 1.0;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
};

struct PretrainReport {
  SegmenterParams params;        // validation-best checkpoint
  int best_epoch = 0;            // 1-based
  double best_val_miou = 0.0;
  std::vector<double> val_miou;  // one entry per epoch
};

inline double segmenter_miou(const SegmenterParams& s, const std::vector<LabeledImage>& frames) {
  ConfusionMatrix cm(s.class_count);
  for (const LabeledImage& f : frames)
    accumulate_confusion(cm, segmenter_predict(s, *f.rgb).labels, *f.labels);
  return miou(cm).miou;
}

// Cross-entropy pre-training over a multi-scene pool with a held-out
// validation split; keeps the epoch checkpoint with the best validation mIoU.
//
// Checkpoints carry running statistics recomputed over the full training
// images rather than the momentum average: per-frame mini-batches understate
// the between-frame variance, and inference statistics should describe the
// training domain.
inline PretrainReport pretrain_segmenter(const std::vector<LabeledImage>& pool, int class_count,
                                         const SegmenterTrainConfig& cfg) {
  if (pool.empty()) throw std::runtime_error("pretrain_segmenter: empty pool");
  FrameSplit split = split_frames(static_cast<int>(pool.size()), cfg.train_fraction);
  std::vector<LabeledImage> train, val;
  for (int i : split.train) train.push_back(pool[static_cast<std::size_t>(i)]);
  for (int i : split.val) val.push_back(pool[static_cast<std::size_t>(i)]);
  // Tiny pools degenerate gracefully instead of erroring.
  if (train.empty()) train = pool;
  if (val.empty()) val = train;

  PretrainReport report;
  report.params = init_segmenter(cfg.seed, class_count);
  SegmenterParams current = clone_segmenter(report.params);
  AdamState adam(current.params, {});
  Rng rng(derive_seed(cfg.seed, "segmenter_pretrain"));

  std::vector<const ImageRgb*> train_rgbs;
  for (const LabeledImage& t : train) train_rgbs.push_back(t.rgb);

  report.best_val_miou = -1.0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1],
                order[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i)))]);
    for (std::size_t i : order)
      segmenter_train_step(current, adam, {train[i]}, cfg.lr, cfg.pixels_per_frame, rng,
                           cfg.jitter_strength);
    SegmenterParams probe = adapt_norm_stats(current, train_rgbs);
    double v = segmenter_miou(probe, val);
    report.val_miou.push_back(v);
    if (v > report.best_val_miou) {
      report.best_val_miou = v;
      report.best_epoch = epoch;
      report.params = std::move(probe);
    }
  }
  return report;
}

inline Blob serialize_segmenter(const SegmenterParams& s) {
  ByteWriter w;
  write_blob_header(w, 'S');
  w.i32(s.patch_radius);
  w.i32(s.class_count);
  w.f64(s.bn_momentum);
  int feat = s.feature_width();
  w.i32(feat);
  for (int j = 0; j < feat; ++j) w.f64(s.bn.running_mean[j]);
  for (int j = 0; j < feat; ++j) w.f64(s.bn.running_var[j]);
  write_param_store(w, s.params);
  return w.take();
}

inline SegmenterParams deserialize_segmenter(const Blob& blob) {
  ByteReader r(blob);
  read_blob_header(r, 'S');
  SegmenterParams s;
  s.patch_radius = r.i32();
  s.class_count = r.i32();
  s.bn_momentum = r.f64();
  if (s.patch_radius < 0 || s.class_count < 2) throw BlobError("segmenter blob: bad config");
  int feat = r.i32();
  if (feat != s.feature_width()) throw BlobError("segmenter blob: feature width mismatch");
  s.bn.running_mean = Tensor({feat});
  s.bn.running_var = Tensor({feat});
  for (int j = 0; j < feat; ++j) s.bn.running_mean[j] = r.f64();
  for (int j = 0; j < feat; ++j) {
    s.bn.running_var[j] = r.f64();
    if (!(s.bn.running_var[j] > 0.0)) throw BlobError("segmenter blob: nonpositive variance");
  }
  s.params = read_param_store(r);
  if (!r.exhausted()) throw BlobError("segmenter blob: trailing bytes");
  return s;
}

}  // namespace fieldseg
