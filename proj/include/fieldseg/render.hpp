#pragma once

// Volume rendering: ray generation, stratified + importance sampling, alpha
// compositing, and color / depth / semantic aggregation.
//
// Two semantic aggregation rules are provided:
//   logit mode   : softmax( sum_i w_i * s_i )            (aggregate logits)
//   softmax mode : normalize( sum_i w_i * softmax(s_i) ) (aggregate
//                  distributions, then L1-normalize; empty rays -> uniform)
// Both detach the compositing weights, so semantic losses cannot move
// density parameters.
//
// Depth is the expected termination distance sum_i w_i * t_i. (A literal
// reading of the source formula would sum the inter-sample gaps delta_i
// instead of the distances t_i, which does not reproduce metric depth.)

#include <algorithm>
#include <cstdint>
#include <vector>

#include "fieldseg/autodiff.hpp"
#include "fieldseg/field.hpp"
#include "fieldseg/geometry.hpp"
#include "fieldseg/image.hpp"
#include "fieldseg/rng.hpp"
#include "fieldseg/tensor.hpp"

namespace fieldseg {

enum class SemanticMode { kLogits, kSoftmax };

struct RenderConfig {
  int n_coarse = 32;
  int n_fine = 32;
  // Full-scale reference counts, kept for documentation: 256 + 256.
  static constexpr int kFullScaleCoarse = 256;
  static constexpr int kFullScaleFine = 256;
  double near = 0.05;
  double far = 12.0;
  bool jitter = true;
  double l1_eps = 1e-8;      // empty-ray threshold of the softmax mode
  double last_gap = 0.0;     // 0 -> (far - near) / n_coarse
  SemanticMode semantic_mode = SemanticMode::kSoftmax;

  double resolved_last_gap() const {
    return last_gap > 0.0 ? last_gap : (far - near) / n_coarse;
  }
};

struct RaySamples {
  Vec3 origin;
  Vec3 dir;                   // unit
  std::vector<double> t;      // strictly increasing
  std::vector<double> delta;  // gaps; last entry is the configured cap
};

inline std::vector<Ray> make_rays(const Camera& cam, const Pose& pose,
                                  const std::vector<std::pair<int, int>>& pixels) {
  std::vector<Ray> rays;
  rays.reserve(pixels.size());
  for (auto [x, y] : pixels) {
    if (x < 0 || x >= cam.width || y < 0 || y >= cam.height)
      throw std::runtime_error("make_rays: pixel outside image bounds");
    rays.push_back(cam.pixel_ray(pose, x, y));
  }
  return rays;
}

// One sample per equal-width bin of [near, far], jittered inside the bin
// (or at the midpoint with jitter off).
inline std::vector<double> sample_stratified(int n, double near, double far, Rng& rng,
                                             bool jitter = true) {
  if (n < 1) throw std::runtime_error("sample_stratified: n must be >= 1");
  if (near >= far) throw std::runtime_error("sample_stratified: near >= far");
  double h = (far - near) / n;
  std::vector<double> t(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    t[static_cast<std::size_t>(i)] = near + h * (i + (jitter ? rng.uniform() : 0.5));
  return t;
}

// Inverse-transform draws from the piecewise-constant pdf proportional to w
// over the n_coarse equal bins of [near, far]; zero mass falls back to the
// uniform pdf. Output is unsorted.
inline std::vector<double> sample_importance(const std::vector<double>& w, int n, double near,
                                             double far, Rng& rng) {
  int bins = static_cast<int>(w.size());
  if (bins < 1) throw std::runtime_error("sample_importance: empty weights");
  double total = 0.0;
  for (double v : w) {
    if (v < 0.0) throw std::runtime_error("sample_importance: negative weight");
    total += v;
  }
  double h = (far - near) / bins;
  std::vector<double> out(static_cast<std::size_t>(n));
  if (total <= 0.0) {
    for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = rng.uniform(near, far);
    return out;
  }
  std::vector<double> cdf(static_cast<std::size_t>(bins) + 1, 0.0);
  for (int b = 0; b < bins; ++b)
    cdf[static_cast<std::size_t>(b) + 1] = cdf[static_cast<std::size_t>(b)] +
                                           w[static_cast<std::size_t>(b)] / total;
  cdf.back() = 1.0;
  for (int i = 0; i < n; ++i) {
    double u = rng.uniform();
    auto it = std::upper_bound(cdf.begin(), cdf.end() - 1, u);
    int b = static_cast<int>(std::max<std::ptrdiff_t>(0, it - cdf.begin() - 1));
    double mass = cdf[static_cast<std::size_t>(b) + 1] - cdf[static_cast<std::size_t>(b)];
    double frac = mass > 0.0 ? (u - cdf[static_cast<std::size_t>(b)]) / mass : 0.5;
    out[static_cast<std::size_t>(i)] = near + h * (b + frac);
  }
  return out;
}

// Sorts, epsilon-merges duplicates, and restores the exact target count by
// splitting the largest remaining gaps (deterministic).
inline std::vector<double> merge_samples(std::vector<double> t, int target, double near,
                                         double far) {
  double eps = 1e-9 * (far - near);
  std::sort(t.begin(), t.end());
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(target));
  for (double v : t)
    if (out.empty() || v - out.back() > eps) out.push_back(v);
  // Gap splitting below needs at least two anchors; degenerate inputs fall
  // back to the interval bounds.
  if (static_cast<int>(out.size()) < target) {
    if (out.empty()) out.push_back(0.5 * (near + far));
    if (out.size() == 1) {
      if (out.front() - near > eps) out.insert(out.begin(), near);
      if (static_cast<int>(out.size()) < target && far - out.back() > eps) out.push_back(far);
    }
  }
  while (static_cast<int>(out.size()) < target) {
    std::size_t widest = 0;
    double best = -1.0;
    for (std::size_t i = 0; i + 1 < out.size(); ++i) {
      double gap = out[i + 1] - out[i];
      if (gap > best) {
        best = gap;
        widest = i;
      }
    }
    out.insert(out.begin() + static_cast<std::ptrdiff_t>(widest) + 1,
               0.5 * (out[widest] + out[widest + 1]));
  }
  return out;
}

inline RaySamples make_ray_samples(const Ray& ray, std::vector<double> t, double last_gap) {
  RaySamples s;
  s.origin = ray.origin;
  s.dir = ray.dir;
  s.delta.resize(t.size());
  for (std::size_t i = 0; i + 1 < t.size(); ++i) {
    s.delta[i] = t[i + 1] - t[i];
    if (s.delta[i] <= 0.0) throw std::runtime_error("make_ray_samples: non-increasing t");
  }
  if (!t.empty()) s.delta.back() = last_gap;
  s.t = std::move(t);
  return s;
}

// ---- plain per-ray compositing (no autodiff) ----

struct CompositeResult {
  std::vector<double> alpha;
  std::vector<double> trans;    // T_i, transmittance before sample i
  std::vector<double> weights;  // w_i = T_i * alpha_i
};

inline CompositeResult composite(const std::vector<double>& sigma,
                                 const std::vector<double>& delta) {
  if (sigma.size() != delta.size()) throw std::runtime_error("composite: size mismatch");
  CompositeResult r;
  r.alpha.resize(sigma.size());
  r.trans.resize(sigma.size());
  r.weights.resize(sigma.size());
  double t = 1.0;
  for (std::size_t i = 0; i < sigma.size(); ++i) {
    double a = 1.0 - std::exp(-sigma[i] * delta[i]);
    r.alpha[i] = a;
    r.trans[i] = t;
    r.weights[i] = t * a;
    t *= (1.0 - a);
  }
  return r;
}

inline std::vector<double> render_color(const std::vector<double>& w, const Tensor& rgb) {
  int m = static_cast<int>(w.size());
  if (rgb.ndim() != 2 || rgb.dim(0) != m || rgb.dim(1) != 3)
    throw ShapeError("render_color: rgb must be [M,3]");
  std::vector<double> out(3, 0.0);
  for (int i = 0; i < m; ++i)
    for (int c = 0; c < 3; ++c) out[static_cast<std::size_t>(c)] += w[static_cast<std::size_t>(i)] * rgb.at(i, c);
  return out;
}

inline double render_depth(const std::vector<double>& w, const std::vector<double>& t) {
  if (w.size() != t.size()) throw std::runtime_error("render_depth: size mismatch");
  double d = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) d += w[i] * t[i];
  return d;
}

namespace detail {
inline void softmax_row(const double* in, double* out, int c) {
  double mx = in[0];
  for (int j = 1; j < c; ++j) mx = std::max(mx, in[j]);
  double s = 0.0;
  for (int j = 0; j < c; ++j) {
    out[j] = std::exp(in[j] - mx);
    s += out[j];
  }
  for (int j = 0; j < c; ++j) out[j] /= s;
}
}  // namespace detail

// Aggregate raw logits, then softmax once.
inline std::vector<double> render_semantics_logits(const std::vector<double>& w,
                                                   const Tensor& logits) {
  int m = static_cast<int>(w.size());
  if (logits.ndim() != 2 || logits.dim(0) != m)
    throw ShapeError("render_semantics_logits: logits must be [M,C]");
  int c = logits.dim(1);
  std::vector<double> agg(static_cast<std::size_t>(c), 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < c; ++j) agg[static_cast<std::size_t>(j)] += w[static_cast<std::size_t>(i)] * logits.at(i, j);
  std::vector<double> out(static_cast<std::size_t>(c));
  detail::softmax_row(agg.data(), out.data(), c);
  return out;
}

// Softmax each sample, aggregate, L1-normalize; empty rays return uniform.
inline std::vector<double> render_semantics_softmax(const std::vector<double>& w,
                                                    const Tensor& logits, double eps = 1e-8) {
  int m = static_cast<int>(w.size());
  if (logits.ndim() != 2 || logits.dim(0) != m)
    throw ShapeError("render_semantics_softmax: logits must be [M,C]");
  int c = logits.dim(1);
  std::vector<double> p(static_cast<std::size_t>(c), 0.0);
  std::vector<double> sm(static_cast<std::size_t>(c));
  for (int i = 0; i < m; ++i) {
    detail::softmax_row(logits.data() + static_cast<std::size_t>(i) * c, sm.data(), c);
    for (int j = 0; j < c; ++j) p[static_cast<std::size_t>(j)] += w[static_cast<std::size_t>(i)] * sm[static_cast<std::size_t>(j)];
  }
  double mass = 0.0;
  for (double v : p) mass += v;
  if (mass < eps) {
    for (double& v : p) v = 1.0 / c;
    return p;
  }
  for (double& v : p) v /= mass;
  return p;
}

// ---- batched rendering for training and full images ----

struct RayBatch {
  std::vector<Ray> rays;
  Tensor t;          // [R, M]
  Tensor delta;      // [R, M]
  Tensor positions;  // [R*M, 3]
  Tensor dirs;       // [R*M, 3]
  int n_rays = 0;
  int n_samples = 0;
};

// Coarse stratified pass (density only, no gradients), importance sampling,
// and a merged fixed-size sample set per ray.
inline RayBatch build_ray_batch(const FieldParams& field, const std::vector<Ray>& rays,
                                const RenderConfig& cfg, Rng& rng) {
  int n_rays = static_cast<int>(rays.size());
  int m = cfg.n_coarse + cfg.n_fine;
  RayBatch batch;
  batch.rays = rays;
  batch.n_rays = n_rays;
  batch.n_samples = m;
  batch.t = Tensor({n_rays, m});
  batch.delta = Tensor({n_rays, m});
  batch.positions = Tensor({n_rays * m, 3});
  batch.dirs = Tensor({n_rays * m, 3});

  double last_gap = cfg.resolved_last_gap();
  Tensor coarse_pos({cfg.n_coarse, 3});
  for (int r = 0; r < n_rays; ++r) {
    std::vector<double> tc = sample_stratified(cfg.n_coarse, cfg.near, cfg.far, rng, cfg.jitter);
    std::vector<double> ts;
    if (cfg.n_fine > 0) {
      for (int i = 0; i < cfg.n_coarse; ++i) {
        Vec3 p = rays[static_cast<std::size_t>(r)].at(tc[static_cast<std::size_t>(i)]);
        coarse_pos.at(i, 0) = p.x;
        coarse_pos.at(i, 1) = p.y;
        coarse_pos.at(i, 2) = p.z;
      }
      Tensor sigma = field_density(field, coarse_pos);
      std::vector<double> delta(static_cast<std::size_t>(cfg.n_coarse));
      for (int i = 0; i + 1 < cfg.n_coarse; ++i)
        delta[static_cast<std::size_t>(i)] = tc[static_cast<std::size_t>(i) + 1] - tc[static_cast<std::size_t>(i)];
      delta[static_cast<std::size_t>(cfg.n_coarse) - 1] = last_gap;
      CompositeResult comp = composite(std::vector<double>(sigma.raw()), delta);
      std::vector<double> tf = sample_importance(comp.weights, cfg.n_fine, cfg.near, cfg.far, rng);
      ts = std::move(tc);
      ts.insert(ts.end(), tf.begin(), tf.end());
    } else {
      ts = std::move(tc);
    }
    std::vector<double> merged = merge_samples(std::move(ts), m, cfg.near, cfg.far);
    for (int i = 0; i < m; ++i) {
      double tv = merged[static_cast<std::size_t>(i)];
      batch.t.at(r, i) = tv;
      batch.delta.at(r, i) =
          i + 1 < m ? merged[static_cast<std::size_t>(i) + 1] - tv : last_gap;
      Vec3 p = rays[static_cast<std::size_t>(r)].at(tv);
      int row = r * m + i;
      batch.positions.at(row, 0) = p.x;
      batch.positions.at(row, 1) = p.y;
      batch.positions.at(row, 2) = p.z;
      batch.dirs.at(row, 0) = rays[static_cast<std::size_t>(r)].dir.x;
      batch.dirs.at(row, 1) = rays[static_cast<std::size_t>(r)].dir.y;
      batch.dirs.at(row, 2) = rays[static_cast<std::size_t>(r)].dir.z;
    }
  }
  return batch;
}

struct RenderGraph {
  ad::Var weights;    // [R, M], differentiable toward density
  ad::Var color;      // [R, 3]
  ad::Var depth;      // [R]
  ad::Var opacity;    // [R]
  ad::Var semantics;  // [R, C] distributions (detached weights)
};

inline RenderGraph render_graph(const FieldParams& field, const RayBatch& batch,
                                const RenderConfig& cfg) {
  using namespace ad;
  FieldOutput out = field_forward(field, batch.positions, batch.dirs);
  int rr = batch.n_rays, m = batch.n_samples, c = field.class_count;

  Var sigma = reshape(out.sigma, {rr, m});
  Var w = composite_weights(sigma, batch.delta);
  Var color = weighted_sum(w, reshape(out.rgb, {rr, m, 3}));
  Var depth = weighted_reduce(w, batch.t);
  Var opacity = sum_last(w);

  // Semantics never backpropagates into the density path.
  Var wd = stop_gradient(w);
  Var semantics;
  if (cfg.semantic_mode == SemanticMode::kLogits) {
    semantics = softmax_last(weighted_sum(wd, reshape(out.logits, {rr, m, c})));
  } else {
    Var per_sample = softmax_last(out.logits);
    semantics = l1_normalize_rows(weighted_sum(wd, reshape(per_sample, {rr, m, c})), cfg.l1_eps);
  }
  return {w, color, depth, opacity, semantics};
}

struct RenderedView {
  ImageRgb rgb;
  ImageDepth depth;
  ImageLabels labels;     // argmax of the semantic distribution; ignore on empty rays
  ImageDepth opacity;     // sum of weights per pixel
};

// Full-image inference rendering, chunked to bound peak memory. Empty rays
// (opacity below l1_eps) get ignore labels and invalid depth.
inline RenderedView render_view(const FieldParams& field, const Camera& cam, const Pose& pose,
                                const RenderConfig& cfg, std::uint64_t seed,
                                int chunk_rays = 1024) {
  ad::NoGradGuard ng;
  RenderedView view;
  view.rgb = ImageRgb(cam.width, cam.height, 3);
  view.depth = ImageDepth(cam.width, cam.height, 1);
  view.labels = ImageLabels(cam.width, cam.height, 1, kIgnoreLabel);
  view.opacity = ImageDepth(cam.width, cam.height, 1);
  Rng rng(derive_seed(seed, "render_view"));

  std::vector<std::pair<int, int>> pixels;
  pixels.reserve(static_cast<std::size_t>(chunk_rays));
  int total = cam.width * cam.height;
  for (int start = 0; start < total; start += chunk_rays) {
    int end = std::min(total, start + chunk_rays);
    pixels.clear();
    for (int i = start; i < end; ++i) pixels.emplace_back(i % cam.width, i / cam.width);
    std::vector<Ray> rays = make_rays(cam, pose, pixels);
    RayBatch batch = build_ray_batch(field, rays, cfg, rng);
    RenderGraph g = render_graph(field, batch, cfg);
    for (std::size_t k = 0; k < pixels.size(); ++k) {
      auto [x, y] = pixels[k];
      int r = static_cast<int>(k);
      for (int ch = 0; ch < 3; ++ch) view.rgb.at(x, y, ch) = g.color.value().at(r, ch);
      double op = g.opacity.value()[r];
      view.opacity.at(x, y) = op;
      if (op < cfg.l1_eps) continue;  // leave ignore label and depth 0
      view.depth.at(x, y) = g.depth.value()[r];
      int best = 0;
      for (int j = 1; j < field.class_count; ++j)
        if (g.semantics.value().at(r, j) > g.semantics.value().at(r, best)) best = j;
      view.labels.at(x, y) = static_cast<std::uint8_t>(best);
    }
  }
  return view;
}

}  // namespace fieldseg
