#pragma once

// Loss terms for field training and segmenter supervision.
//
// Per-ray losses stay vectors of shape [R]; total_loss combines them as
//   L(r) = L_rgb(r) + w_d * L_d(r) + w_s * L_s(r)
// and reduces over the batch (mean by default, sum selectable).

#include <string>
#include <vector>

#include "fieldseg/autodiff.hpp"
#include "fieldseg/tensor.hpp"

namespace fieldseg {

enum class Reduction { kMean, kSum };

struct LossConfig {
  double w_d = 0.1;
  double w_s = 0.04;
  int rays_per_batch = 256;
  Reduction reduction = Reduction::kMean;
  double log_eps = 1e-10;  // floor inside logarithms
};

// Squared error summed over channels, one value per ray.
inline ad::Var loss_rgb(const ad::Var& rendered, Tensor target) {
  require_same_shape("loss_rgb", rendered.value(), target);
  ad::Var diff = ad::sub(rendered, ad::Var::constant(std::move(target)));
  return ad::sum_last(ad::mul(diff, diff));
}

// l1 distance on rays with valid target depth; invalid rays contribute 0.
// A target depth of 0 marks invalid.
inline ad::Var loss_depth(const ad::Var& rendered, const Tensor& target) {
  require_same_shape("loss_depth", rendered.value(), target);
  Tensor mask(target.shape());
  for (std::int64_t i = 0; i < target.numel(); ++i) mask[i] = target[i] > 0.0 ? 1.0 : 0.0;
  ad::Var diff = ad::abs(ad::sub(rendered, ad::Var::constant(target)));
  return ad::mul_const(diff, std::move(mask));
}

// -log(max(p_target, eps)) per ray; ignore-id rays contribute 0.
inline ad::Var loss_semantic_nll(const ad::Var& dist, const std::vector<int>& targets,
                                 int ignore_id, double eps = 1e-10) {
  const Tensor& pv = dist.value();
  if (pv.ndim() != 2 || static_cast<std::int64_t>(targets.size()) != pv.dim(0))
    throw ShapeError("loss_semantic_nll: dist " + shape_str(pv.shape()) + " with " +
                     std::to_string(targets.size()) + " targets");
  int c = pv.dim(1);
  std::vector<int> idx(targets.size());
  Tensor mask({pv.dim(0)});
  for (std::size_t i = 0; i < targets.size(); ++i) {
    int t = targets[i];
    if (t == ignore_id) {
      idx[i] = 0;
      mask[static_cast<std::int64_t>(i)] = 0.0;
    } else if (t < 0 || t >= c) {
      throw std::runtime_error("loss_semantic_nll: class id " + std::to_string(t) +
                               " out of range");
    } else {
      idx[i] = t;
      mask[static_cast<std::int64_t>(i)] = 1.0;
    }
  }
  ad::Var picked = ad::gather_last(dist, std::move(idx));
  ad::Var nll = ad::neg(ad::log(ad::clamp_min(picked, eps)));
  return ad::mul_const(nll, std::move(mask));
}

// Combines per-ray loss vectors into the training scalar.
inline ad::Var total_loss(const ad::Var& rgb, const ad::Var& depth, const ad::Var& semantic,
                          const LossConfig& cfg) {
  require_same_shape("total_loss", rgb.value(), depth.value());
  require_same_shape("total_loss", rgb.value(), semantic.value());
  ad::Var combined =
      ad::add(rgb, ad::add(ad::scale(depth, cfg.w_d), ad::scale(semantic, cfg.w_s)));
  return cfg.reduction == Reduction::kSum ? ad::sum_all(combined) : ad::mean_all(combined);
}

struct CrossEntropy2d {
  ad::Var loss;   // scalar; 0 when no pixel is valid
  int valid = 0;  // pixels that contributed
};

// Mean over non-ignored pixels of -log p_target on prediction distributions.
inline CrossEntropy2d cross_entropy_2d(const ad::Var& dist, const std::vector<int>& targets,
                                       int ignore_id, double eps = 1e-10) {
  ad::Var per_pixel = loss_semantic_nll(dist, targets, ignore_id, eps);
  int valid = 0;
  for (int t : targets)
    if (t != ignore_id) ++valid;
  if (valid == 0) return {ad::Var::constant(Tensor::scalar(0.0)), 0};
  return {ad::scale(ad::sum_all(per_pixel), 1.0 / valid), valid};
}

}  // namespace fieldseg
