#pragma once

// Single-scene adaptation. A fresh field is fitted to a scene's training
// frames with photometric, depth and semantic supervision, where the semantic
// targets come from a 2D labeler; rendering the trained field back at the
// training viewpoints yields multi-view-consistent pseudo-labels. Those
// pseudo-labels then fine-tune the labeler (paired with ground-truth or
// rendered images depending on the variant), or field and labeler train
// jointly with one step of each per iteration.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fieldseg/field.hpp"
#include "fieldseg/geometry.hpp"
#include "fieldseg/image.hpp"
#include "fieldseg/losses.hpp"
#include "fieldseg/metrics.hpp"
#include "fieldseg/optim.hpp"
#include "fieldseg/render.hpp"
#include "fieldseg/rng.hpp"
#include "fieldseg/scene.hpp"
#include "fieldseg/segmenter.hpp"

namespace fieldseg {

// Image/label pairings for labeler fine-tuning. kGiMl and kGiNl pair
// ground-truth images with voxel-map or field pseudo-labels; kNiNl pairs
// rendered images with field pseudo-labels; kJoint interleaves field and
// labeler updates instead of a two-stage pipeline.
enum class AdaptVariant { kGiMl, kGiNl, kNiNl, kJoint };

inline const char* variant_name(AdaptVariant v) {
  switch (v) {
    case AdaptVariant::kGiMl: return "gi_ml";
    case AdaptVariant::kGiNl: return "gi_nl";
    case AdaptVariant::kNiNl: return "ni_nl";
    case AdaptVariant::kJoint: return "joint";
  }
  return "?";
}

inline AdaptVariant parse_variant(const std::string& name) {
  if (name == "gi_ml") return AdaptVariant::kGiMl;
  if (name == "gi_nl") return AdaptVariant::kGiNl;
  if (name == "ni_nl") return AdaptVariant::kNiNl;
  if (name == "joint") return AdaptVariant::kJoint;
  throw std::runtime_error("unknown adaptation variant: " + name);
}

struct AdaptConfig {
  RenderConfig render;
  LossConfig loss;
  EncodingConfig encoding;
  Aabb world{};  // scene bounds driving the field's canonical transform

  int field_epochs = 60;          // full field fit for the two-stage pipeline
  int field_pretrain_epochs = 10; // field-only warmup before the joint phase
  int joint_epochs = 50;
  int finetune_epochs = 50;
  int steps_per_epoch = 40;
  int joint_tile = 16;            // side of the square tile rendered per joint step
  double field_lr = 5e-3;
  double seg_lr = 1e-3;
  int seg_pixels_per_image = 256;
  double jitter_strength = 1.0;
  int eval_every = 0;       // epochs between mIoU/PSNR probes; 0 disables them
  int psnr_probe_views = 4; // train views entering the phase PSNR; 0 disables
  std::uint64_t seed = 0;

  AdaptConfig() {
    // Trainable grid features fit a single scene much faster than Fourier
    // features pushed through the trunk; the finest level matches the pixel
    // pitch of the default cameras so label boundaries stay sharp.
    encoding.kind = EncodingConfig::Kind::kDenseGrid;
    encoding.grid_resolutions = {16, 32, 64};
  }
};

// Inference rendering turns stratified jitter off: deterministic stratum
// midpoints sharpen boundaries (about +1 mIoU on pseudo-labels) and decouple
// rendered outputs from the sampling stream. Training batches keep jitter.
inline RenderConfig inference_render(RenderConfig rcfg) {
  rcfg.jitter = false;
  return rcfg;
}

// One row of the training log. Losses are means over the epoch's steps;
// loss_seg is the labeler's cross-entropy and only set during joint epochs.
// train_miou scores rendered labels against the frames' reference labels and
// psnr scores rendered color against the frames' color; both stay NaN except
// every `eval_every` epochs.
struct EpochLog {
  int epoch = 0;
  double loss_rgb = 0.0;
  double loss_depth = 0.0;
  double loss_sem = 0.0;
  double loss_seg = std::numeric_limits<double>::quiet_NaN();
  double loss_total = 0.0;
  double train_miou = std::numeric_limits<double>::quiet_NaN();
  double psnr = std::numeric_limits<double>::quiet_NaN();
};

inline std::string epoch_log_csv(const std::vector<EpochLog>& log) {
  std::ostringstream out;
  out << "epoch,loss_rgb,loss_depth,loss_sem,loss_seg,loss_total,train_miou,psnr\n";
  auto cell = [&out](double v) {
    if (std::isnan(v)) return;  // empty cell marks "not measured"
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    out << buf;
  };
  for (const EpochLog& e : log) {
    out << e.epoch << ',';
    cell(e.loss_rgb);
    out << ',';
    cell(e.loss_depth);
    out << ',';
    cell(e.loss_sem);
    out << ',';
    cell(e.loss_seg);
    out << ',';
    cell(e.loss_total);
    out << ',';
    cell(e.train_miou);
    out << ',';
    cell(e.psnr);
    out << '\n';
  }
  return out.str();
}

// Training products of one scene, indexed by training viewpoint: the fitted
// field plus color, depth and pseudo-labels rendered at each train pose.
struct FieldArtifacts {
  FieldParams field;
  std::vector<ImageRgb> images;
  std::vector<ImageDepth> depths;
  std::vector<ImageLabels> labels;
  std::vector<EpochLog> log;
};

struct SceneArtifacts {
  FieldArtifacts field;
  SegmenterParams segmenter;
};

inline std::vector<const ImageLabels*> label_ptrs(const std::vector<ImageLabels>& v) {
  std::vector<const ImageLabels*> out;
  out.reserve(v.size());
  for (const ImageLabels& l : v) out.push_back(&l);
  return out;
}

inline std::vector<const ImageRgb*> image_ptrs(const std::vector<ImageRgb>& v) {
  std::vector<const ImageRgb*> out;
  out.reserve(v.size());
  for (const ImageRgb& i : v) out.push_back(&i);
  return out;
}

inline std::vector<LabeledImage> labeled_frames(const std::vector<Frame>& frames) {
  std::vector<LabeledImage> out;
  out.reserve(frames.size());
  for (const Frame& f : frames) out.push_back({&f.rgb, &f.labels});
  return out;
}

// Evaluation protocol for a labeler on a new domain: swap in normalization
// statistics pooled over the evaluation images, then score. Weights are
// untouched, so this never trains on the evaluation set.
inline double segmenter_miou_adabn(const SegmenterParams& s,
                                   const std::vector<LabeledImage>& frames) {
  std::vector<const ImageRgb*> rgbs;
  rgbs.reserve(frames.size());
  for (const LabeledImage& f : frames) rgbs.push_back(f.rgb);
  return segmenter_miou(adapt_norm_stats(s, rgbs), frames);
}

// Hook invoked once per labeler training step; it may append extra labeled
// images (replay or retained pretraining data) to the batch. Appended
// pointers must stay valid for the duration of the step. The hook draws from
// its own random stream, so installing one never perturbs the base run.
using AdaptBatchHook = std::function<void(int step, Rng& rng, std::vector<LabeledImage>& batch)>;

namespace detail {

inline double tensor_mean(const Tensor& t) {
  double s = 0.0;
  for (std::int64_t i = 0; i < t.numel(); ++i) s += t[i];
  return t.numel() > 0 ? s / static_cast<double>(t.numel()) : 0.0;
}

inline void validate_adapt(const std::vector<Frame>& frames, const Camera& cam,
                           const AdaptConfig& cfg, int class_count) {
  if (frames.empty()) throw std::runtime_error("adapt: no training frames");
  if (class_count < 2) throw std::runtime_error("adapt: class count must be >= 2");
  const Aabb& w = cfg.world;
  if (!(w.max.x > w.min.x && w.max.y > w.min.y && w.max.z > w.min.z))
    throw std::runtime_error("adapt: degenerate world bounds");
  if (cfg.steps_per_epoch < 1 || cfg.loss.rays_per_batch < 1)
    throw std::runtime_error("adapt: steps and rays per batch must be positive");
  for (const Frame& f : frames)
    if (f.rgb.width != cam.width || f.rgb.height != cam.height)
      throw std::runtime_error("adapt: frame size disagrees with camera");
}

// Supervision for one field step. Rays may mix viewpoints freely; view and
// pixel record where each ray came from so callers can swap the semantic
// targets (the joint loop substitutes live labeler predictions).
struct RayTargets {
  std::vector<Ray> rays;
  Tensor rgb;    // [R, 3]
  Tensor depth;  // [R]
  std::vector<int> sem;
  std::vector<int> view;
  std::vector<std::pair<int, int>> pixel;
};

inline RayTargets sample_ray_targets(const std::vector<Frame>& frames, const Camera& cam,
                                     const std::vector<const ImageLabels*>& labels, int n,
                                     Rng& rng) {
  RayTargets t;
  t.rays.reserve(static_cast<std::size_t>(n));
  t.sem.reserve(static_cast<std::size_t>(n));
  t.view.reserve(static_cast<std::size_t>(n));
  t.pixel.reserve(static_cast<std::size_t>(n));
  t.rgb = Tensor({n, 3});
  t.depth = Tensor({n});
  for (int i = 0; i < n; ++i) {
    int v = rng.uniform_int(static_cast<int>(frames.size()));
    int x = rng.uniform_int(cam.width);
    int y = rng.uniform_int(cam.height);
    const Frame& f = frames[static_cast<std::size_t>(v)];
    t.rays.push_back(cam.pixel_ray(f.pose, x, y));
    for (int c = 0; c < 3; ++c) t.rgb.at(i, c) = f.rgb.at(x, y, c);
    t.depth[i] = f.depth.at(x, y);
    t.sem.push_back(labels[static_cast<std::size_t>(v)]->at(x, y));
    t.view.push_back(v);
    t.pixel.emplace_back(x, y);
  }
  return t;
}

struct StepLoss {
  double rgb = 0.0, depth = 0.0, sem = 0.0, total = 0.0;
};

inline StepLoss field_train_step(FieldParams& field, AdamState& adam, const RayTargets& t,
                                 const AdaptConfig& cfg, Rng& rng) {
  RayBatch batch = build_ray_batch(field, t.rays, cfg.render, rng);
  field.params.zero_grad();
  RenderGraph g = render_graph(field, batch, cfg.render);
  ad::Var lrgb = loss_rgb(g.color, t.rgb);
  ad::Var ldep = loss_depth(g.depth, t.depth);
  ad::Var lsem = loss_semantic_nll(g.semantics, t.sem, kIgnoreLabel, cfg.loss.log_eps);
  ad::Var total = total_loss(lrgb, ldep, lsem, cfg.loss);
  ad::backward(total);
  adam.step(field.params, cfg.field_lr);
  StepLoss out;
  out.rgb = tensor_mean(lrgb.value());
  out.depth = tensor_mean(ldep.value());
  out.sem = tensor_mean(lsem.value());
  out.total = total.value().item();
  return out;
}

inline void probe_train_views(const FieldParams& field, const std::vector<Frame>& frames,
                              const Camera& cam, const AdaptConfig& cfg, int epoch,
                              EpochLog& row) {
  ConfusionMatrix cm(field.class_count);
  double ps = 0.0;
  RenderConfig rcfg = inference_render(cfg.render);
  for (std::size_t v = 0; v < frames.size(); ++v) {
    RenderedView rv = render_view(field, cam, frames[v].pose, rcfg,
                                  derive_seed(cfg.seed, "probe", static_cast<std::uint64_t>(epoch), v));
    accumulate_confusion(cm, rv.labels, frames[v].labels);
    ps += psnr(rv.rgb, frames[v].rgb);
  }
  row.psnr = ps / static_cast<double>(frames.size());
  if (cm.evaluated() > 0) row.train_miou = miou(cm).miou;
}

// Runs `epochs` epochs of field training against fixed label images and
// appends one log row per epoch.
inline void train_field_epochs(FieldParams& field, AdamState& adam,
                               const std::vector<Frame>& frames, const Camera& cam,
                               const std::vector<const ImageLabels*>& labels, int epochs,
                               int epoch_offset, const AdaptConfig& cfg, Rng& rng,
                               std::vector<EpochLog>& log) {
  for (int e = 0; e < epochs; ++e) {
    EpochLog row;
    row.epoch = epoch_offset + e + 1;
    for (int s = 0; s < cfg.steps_per_epoch; ++s) {
      RayTargets t = sample_ray_targets(frames, cam, labels, cfg.loss.rays_per_batch, rng);
      StepLoss sl = field_train_step(field, adam, t, cfg, rng);
      row.loss_rgb += sl.rgb;
      row.loss_depth += sl.depth;
      row.loss_sem += sl.sem;
      row.loss_total += sl.total;
    }
    row.loss_rgb /= cfg.steps_per_epoch;
    row.loss_depth /= cfg.steps_per_epoch;
    row.loss_sem /= cfg.steps_per_epoch;
    row.loss_total /= cfg.steps_per_epoch;
    if (cfg.eval_every > 0 && row.epoch % cfg.eval_every == 0)
      probe_train_views(field, frames, cam, cfg, row.epoch, row);
    log.push_back(row);
  }
}

// Labeler argmax on the frames' ground-truth images at the given pixels,
// batched per view. Uses running statistics (eval mode).
inline std::vector<int> predict_pixels(const SegmenterParams& s, const std::vector<Frame>& frames,
                                       const std::vector<int>& view,
                                       const std::vector<std::pair<int, int>>& pixel) {
  ad::NoGradGuard ng;
  std::vector<int> out(view.size(), kIgnoreLabel);
  std::vector<std::vector<int>> by_view(frames.size());
  for (std::size_t i = 0; i < view.size(); ++i)
    by_view[static_cast<std::size_t>(view[i])].push_back(static_cast<int>(i));
  for (std::size_t v = 0; v < frames.size(); ++v) {
    if (by_view[v].empty()) continue;
    std::vector<std::pair<int, int>> px;
    px.reserve(by_view[v].size());
    for (int i : by_view[v]) px.push_back(pixel[static_cast<std::size_t>(i)]);
    Tensor feat = segmenter_patch_features(frames[v].rgb, px, s.patch_radius);
    Tensor logits = segmenter_logits_eval(s, feat).value();
    for (std::size_t k = 0; k < by_view[v].size(); ++k) {
      int best = 0;
      for (int j = 1; j < s.class_count; ++j)
        if (logits.at(static_cast<int>(k), j) > logits.at(static_cast<int>(k), best)) best = j;
      out[static_cast<std::size_t>(by_view[v][k])] = best;
    }
  }
  return out;
}

struct RenderedTile {
  ImageRgb rgb;
  ImageLabels labels;
};

// Renders a square tile of one training view without gradients; labels are
// the per-pixel semantic argmax, ignore where the ray hit nothing.
inline RenderedTile render_tile(const FieldParams& field, const Camera& cam, const Pose& pose,
                                int x0, int y0, int tw, int th, const RenderConfig& rcfg,
                                Rng& rng) {
  ad::NoGradGuard ng;
  std::vector<Ray> rays;
  rays.reserve(static_cast<std::size_t>(tw) * th);
  for (int y = 0; y < th; ++y)
    for (int x = 0; x < tw; ++x) rays.push_back(cam.pixel_ray(pose, x0 + x, y0 + y));
  RayBatch batch = build_ray_batch(field, rays, rcfg, rng);
  RenderGraph g = render_graph(field, batch, rcfg);
  RenderedTile tile{ImageRgb(tw, th, 3), ImageLabels(tw, th, 1, kIgnoreLabel)};
  const Tensor& color = g.color.value();
  const Tensor& sem = g.semantics.value();
  const Tensor& opacity = g.opacity.value();
  for (int i = 0; i < tw * th; ++i) {
    for (int c = 0; c < 3; ++c) tile.rgb.data[static_cast<std::size_t>(i) * 3 + c] = color.at(i, c);
    if (opacity[i] < rcfg.l1_eps) continue;
    int best = 0;
    for (int j = 1; j < field.class_count; ++j)
      if (sem.at(i, j) > sem.at(i, best)) best = j;
    tile.labels.data[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(best);
  }
  return tile;
}

inline double mean_train_psnr(const FieldParams& field, const std::vector<Frame>& frames,
                              const Camera& cam, const AdaptConfig& cfg, const char* tag) {
  int n = static_cast<int>(frames.size());
  if (cfg.psnr_probe_views > 0 && cfg.psnr_probe_views < n) n = cfg.psnr_probe_views;
  if (n == 0) return std::numeric_limits<double>::quiet_NaN();
  double ps = 0.0;
  RenderConfig rcfg = inference_render(cfg.render);
  for (int v = 0; v < n; ++v) {
    RenderedView rv = render_view(field, cam, frames[static_cast<std::size_t>(v)].pose,
                                  rcfg, derive_seed(cfg.seed, tag, static_cast<std::uint64_t>(v)));
    ps += psnr(rv.rgb, frames[static_cast<std::size_t>(v)].rgb);
  }
  return ps / n;
}

}  // namespace detail

// Renders color, depth and pseudo-labels at every training viewpoint and
// bundles them with the (moved-in) field.
inline FieldArtifacts make_field_artifacts(FieldParams field, const std::vector<Frame>& frames,
                                           const Camera& cam, const RenderConfig& rcfg,
                                           std::uint64_t seed, std::vector<EpochLog> log = {}) {
  FieldArtifacts out;
  out.log = std::move(log);
  out.images.reserve(frames.size());
  out.depths.reserve(frames.size());
  out.labels.reserve(frames.size());
  RenderConfig icfg = inference_render(rcfg);
  for (std::size_t v = 0; v < frames.size(); ++v) {
    RenderedView rv = render_view(field, cam, frames[v].pose, icfg, derive_seed(seed, "plabel", v));
    out.images.push_back(std::move(rv.rgb));
    out.depths.push_back(std::move(rv.depth));
    out.labels.push_back(std::move(rv.labels));
  }
  out.field = std::move(field);
  return out;
}

// Fits a fresh field to the frames, with semantic targets taken from the
// given label images, then renders pseudo-labels back at the train poses.
// `epochs` < 0 means cfg.field_epochs.
inline FieldArtifacts form_pseudo_labels(const std::vector<Frame>& frames, const Camera& cam,
                                         const std::vector<const ImageLabels*>& targets,
                                         int class_count, const AdaptConfig& cfg,
                                         int epochs = -1) {
  detail::validate_adapt(frames, cam, cfg, class_count);
  if (targets.size() != frames.size())
    throw std::runtime_error("form_pseudo_labels: one label image per frame required");
  for (const ImageLabels* t : targets)
    if (t == nullptr) throw std::runtime_error("form_pseudo_labels: null label image");
  if (epochs < 0) epochs = cfg.field_epochs;

  FieldParams field = init_field(derive_seed(cfg.seed, "field_init"), cfg.encoding, class_count,
                                 SceneTransform::for_box(cfg.world));
  AdamState adam(field.params, {});
  Rng rng(derive_seed(cfg.seed, "field_train"));
  std::vector<EpochLog> log;
  detail::train_field_epochs(field, adam, frames, cam, targets, epochs, 0, cfg, rng, log);
  return make_field_artifacts(std::move(field), frames, cam, cfg.render, cfg.seed, std::move(log));
}

// Same, with the semantic targets predicted by the labeler on each frame.
inline FieldArtifacts form_pseudo_labels(const std::vector<Frame>& frames, const Camera& cam,
                                         const SegmenterParams& seg, const AdaptConfig& cfg,
                                         int epochs = -1) {
  std::vector<ImageLabels> pred;
  pred.reserve(frames.size());
  for (const Frame& f : frames) pred.push_back(segmenter_predict(seg, f.rgb).labels);
  return form_pseudo_labels(frames, cam, label_ptrs(pred), seg.class_count, cfg, epochs);
}

// Cross-entropy fine-tuning of the labeler on (image, pseudo-label) pairs.
// The caller pairs sources per variant; kJoint is rejected here because it
// needs the interleaved loop below.
inline SegmenterParams fine_tune(const SegmenterParams& seg, AdaptVariant variant,
                                 const std::vector<const ImageRgb*>& images,
                                 const std::vector<const ImageLabels*>& labels, int epochs,
                                 double lr, const AdaptConfig& cfg,
                                 const AdaptBatchHook& hook = nullptr) {
  if (variant == AdaptVariant::kJoint)
    throw std::runtime_error("fine_tune: the joint variant trains via joint_train");
  if (images.empty() || images.size() != labels.size())
    throw std::runtime_error("fine_tune: image and label sources must align");
  for (std::size_t i = 0; i < images.size(); ++i)
    if (images[i] == nullptr || labels[i] == nullptr)
      throw std::runtime_error("fine_tune: null source entry");

  SegmenterParams out = clone_segmenter(seg);
  AdamState adam(out.params, {});
  Rng rng(derive_seed(cfg.seed, "finetune"));
  Rng hook_rng(derive_seed(cfg.seed, "finetune_hook"));
  std::vector<int> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  int step = 0;
  for (int e = 0; e < epochs; ++e) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i)))]);
    for (int idx : order) {
      std::vector<LabeledImage> batch{{images[static_cast<std::size_t>(idx)],
                                       labels[static_cast<std::size_t>(idx)]}};
      if (hook) hook(step, hook_rng, batch);
      segmenter_train_step(out, adam, batch, lr, cfg.seg_pixels_per_image, rng,
                           cfg.jitter_strength);
      ++step;
    }
  }
  return out;
}

struct JointResult {
  FieldParams field;
  SegmenterParams segmenter;
  std::vector<EpochLog> log;  // warmup epochs first, then joint epochs
  double psnr_pretrain = std::numeric_limits<double>::quiet_NaN();
  double psnr_joint = std::numeric_limits<double>::quiet_NaN();
};

// Two phases. Warmup fits a fresh field against the labeler's initial
// predictions for cfg.field_pretrain_epochs. Each subsequent joint step then
// (a) renders a tile of a sampled training view, (b) trains the labeler on
// that rendered tile toward the field's argmax labels, and (c) trains the
// field where the semantic targets are the labeler's current predictions on
// the ground-truth images, keeping color and depth supervision throughout.
// The field's density and color paths never receive semantic gradients.
inline JointResult joint_train(const std::vector<Frame>& frames, const Camera& cam,
                               const SegmenterParams& seg, const AdaptConfig& cfg,
                               const AdaptBatchHook& hook = nullptr) {
  detail::validate_adapt(frames, cam, cfg, seg.class_count);

  std::vector<ImageLabels> seed_labels;
  seed_labels.reserve(frames.size());
  for (const Frame& f : frames) seed_labels.push_back(segmenter_predict(seg, f.rgb).labels);
  std::vector<const ImageLabels*> targets = label_ptrs(seed_labels);

  JointResult out;
  out.field = init_field(derive_seed(cfg.seed, "field_init"), cfg.encoding, seg.class_count,
                         SceneTransform::for_box(cfg.world));
  AdamState field_adam(out.field.params, {});
  Rng rng(derive_seed(cfg.seed, "joint"));
  Rng hook_rng(derive_seed(cfg.seed, "joint_hook"));
  detail::train_field_epochs(out.field, field_adam, frames, cam, targets,
                             cfg.field_pretrain_epochs, 0, cfg, rng, out.log);
  out.psnr_pretrain = detail::mean_train_psnr(out.field, frames, cam, cfg, "psnr_pre");

  out.segmenter = clone_segmenter(seg);
  AdamState seg_adam(out.segmenter.params, {});
  RenderConfig tile_cfg = inference_render(cfg.render);
  int tw = cfg.joint_tile < cam.width ? cfg.joint_tile : cam.width;
  int th = cfg.joint_tile < cam.height ? cfg.joint_tile : cam.height;
  int step = 0;
  for (int e = 0; e < cfg.joint_epochs; ++e) {
    EpochLog row;
    row.epoch = cfg.field_pretrain_epochs + e + 1;
    row.loss_seg = 0.0;
    for (int s = 0; s < cfg.steps_per_epoch; ++s) {
      int v = rng.uniform_int(static_cast<int>(frames.size()));
      int x0 = rng.uniform_int(cam.width - tw + 1);
      int y0 = rng.uniform_int(cam.height - th + 1);
      detail::RenderedTile tile = detail::render_tile(
          out.field, cam, frames[static_cast<std::size_t>(v)].pose, x0, y0, tw, th, tile_cfg,
          rng);
      std::vector<LabeledImage> batch{{&tile.rgb, &tile.labels}};
      if (hook) hook(step, hook_rng, batch);
      row.loss_seg += segmenter_train_step(out.segmenter, seg_adam, batch, cfg.seg_lr,
                                           cfg.seg_pixels_per_image, rng, cfg.jitter_strength);

      detail::RayTargets t =
          detail::sample_ray_targets(frames, cam, targets, cfg.loss.rays_per_batch, rng);
      t.sem = detail::predict_pixels(out.segmenter, frames, t.view, t.pixel);
      detail::StepLoss sl = detail::field_train_step(out.field, field_adam, t, cfg, rng);
      row.loss_rgb += sl.rgb;
      row.loss_depth += sl.depth;
      row.loss_sem += sl.sem;
      row.loss_total += sl.total;
      ++step;
    }
    row.loss_rgb /= cfg.steps_per_epoch;
    row.loss_depth /= cfg.steps_per_epoch;
    row.loss_sem /= cfg.steps_per_epoch;
    row.loss_seg /= cfg.steps_per_epoch;
    row.loss_total /= cfg.steps_per_epoch;
    if (cfg.eval_every > 0 && row.epoch % cfg.eval_every == 0)
      detail::probe_train_views(out.field, frames, cam, cfg, row.epoch, row);
    out.log.push_back(row);
  }
  out.psnr_joint = detail::mean_train_psnr(out.field, frames, cam, cfg, "psnr_joint");
  return out;
}

}  // namespace fieldseg
