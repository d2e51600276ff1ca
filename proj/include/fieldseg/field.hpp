#pragma once

// The semantics-aware radiance field: positional encoding, a small MLP trunk
// and three heads (density, color, semantic logits).
//
// The semantic head reads the trunk features through a stop-gradient, so any
// loss on the semantic branch leaves the trunk, density and color parameters
// untouched; color and depth supervision likewise never reaches the semantic
// head. Callers that aggregate semantics along rays must detach the
// compositing weights as well (see render.hpp).

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fieldseg/autodiff.hpp"
#include "fieldseg/geometry.hpp"
#include "fieldseg/optim.hpp"
#include "fieldseg/rng.hpp"
#include "fieldseg/serialize.hpp"
#include "fieldseg/tensor.hpp"

namespace fieldseg {

struct EncodingConfig {
  enum class Kind { kFourier, kDenseGrid };
  Kind kind = Kind::kFourier;
  int fourier_levels = 6;
  std::vector<int> grid_resolutions = {4, 8, 16};  // strictly increasing
  int grid_feature_dim = 4;

  // Full-scale reference values kept for documentation and the memory
  // report; a collision-hashed table is out of scope at desk size.
  static constexpr int kFullScaleHashLevels = 16;
  static constexpr std::int64_t kFullScaleHashTableSize = std::int64_t{1} << 19;

  int feature_width() const {
    if (kind == Kind::kFourier) return 3 + 6 * fourier_levels;
    int sum = 0;
    for (std::size_t i = 0; i < grid_resolutions.size(); ++i) sum += grid_feature_dim;
    return 3 + sum;
  }

  void validate() const {
    if (kind == Kind::kFourier) {
      if (fourier_levels < 1) throw std::runtime_error("encoding: fourier levels must be >= 1");
      return;
    }
    if (grid_resolutions.empty()) throw std::runtime_error("encoding: no grid levels");
    for (std::size_t i = 0; i < grid_resolutions.size(); ++i) {
      if (grid_resolutions[i] < 2) throw std::runtime_error("encoding: grid resolution < 2");
      if (i > 0 && grid_resolutions[i] <= grid_resolutions[i - 1])
        throw std::runtime_error("encoding: grid resolutions must increase");
    }
    if (grid_feature_dim < 1) throw std::runtime_error("encoding: feature dim must be >= 1");
  }
};

// Maps world positions into the field's canonical cube:
// normalized = (p - offset) * scale, componentwise, targeting [-1, 1].
struct SceneTransform {
  Vec3 offset{0.0, 0.0, 0.0};
  Vec3 scale{1.0, 1.0, 1.0};

  Vec3 apply(const Vec3& p) const {
    return {(p.x - offset.x) * scale.x, (p.y - offset.y) * scale.y, (p.z - offset.z) * scale.z};
  }

  static SceneTransform for_box(const Aabb& box, double padding = 1.02) {
    Vec3 e = box.extent();
    return {box.center(),
            {2.0 / (e.x * padding), 2.0 / (e.y * padding), 2.0 / (e.z * padding)}};
  }
};

struct FieldParams {
  EncodingConfig encoding;
  int class_count = 6;
  SceneTransform transform;
  ParamStore params;
};

constexpr int kTrunkWidth = 64;
constexpr int kColorHiddenWidth = 32;

// Trilinear sampling from a dense [R, R, R, F] feature grid (stored flat).
// Positions are fixed; gradients scatter back into the grid corners.
inline ad::Var grid_sample(const ad::Var& grid, const Tensor& pos01, int res, int feat) {
  const Tensor& gv = grid.value();
  if (gv.numel() != static_cast<std::int64_t>(res) * res * res * feat)
    throw ShapeError("grid_sample: grid size does not match resolution");
  int n = pos01.dim(0);
  Tensor out({n, feat});
  // Corner index and weight per sample, reused by the backward pass.
  std::vector<int> base(static_cast<std::size_t>(n) * 3);
  std::vector<double> frac(static_cast<std::size_t>(n) * 3);
  auto clampi = [&](int v) { return v < 0 ? 0 : (v > res - 2 ? res - 2 : v); };
  for (int i = 0; i < n; ++i) {
    for (int a = 0; a < 3; ++a) {
      double x = pos01.at(i, a);
      x = x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x);
      double g = x * (res - 1);
      int b = clampi(static_cast<int>(g));
      base[static_cast<std::size_t>(i) * 3 + a] = b;
      frac[static_cast<std::size_t>(i) * 3 + a] = g - b;
    }
  }
  auto corner = [res, feat](int bx, int by, int bz) {
    return ((static_cast<std::int64_t>(bx) * res + by) * res + bz) * feat;
  };
  for (int i = 0; i < n; ++i) {
    int bx = base[static_cast<std::size_t>(i) * 3], by = base[static_cast<std::size_t>(i) * 3 + 1],
        bz = base[static_cast<std::size_t>(i) * 3 + 2];
    double fx = frac[static_cast<std::size_t>(i) * 3], fy = frac[static_cast<std::size_t>(i) * 3 + 1],
           fz = frac[static_cast<std::size_t>(i) * 3 + 2];
    for (int dx = 0; dx < 2; ++dx)
      for (int dy = 0; dy < 2; ++dy)
        for (int dz = 0; dz < 2; ++dz) {
          double w = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy) * (dz ? fz : 1.0 - fz);
          std::int64_t off = corner(bx + dx, by + dy, bz + dz);
          for (int f = 0; f < feat; ++f) out.at(i, f) += w * gv[off + f];
        }
  }
  return ad::make_op("grid_sample", std::move(out), {grid},
                     [pg = grid.node(), base = std::move(base), frac = std::move(frac), corner, n,
                      feat](ad::Node& self) {
                       pg->ensure_grad();
                       for (int i = 0; i < n; ++i) {
                         int bx = base[static_cast<std::size_t>(i) * 3],
                             by = base[static_cast<std::size_t>(i) * 3 + 1],
                             bz = base[static_cast<std::size_t>(i) * 3 + 2];
                         double fx = frac[static_cast<std::size_t>(i) * 3],
                                fy = frac[static_cast<std::size_t>(i) * 3 + 1],
                                fz = frac[static_cast<std::size_t>(i) * 3 + 2];
                         for (int dx = 0; dx < 2; ++dx)
                           for (int dy = 0; dy < 2; ++dy)
                             for (int dz = 0; dz < 2; ++dz) {
                               double w = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy) *
                                          (dz ? fz : 1.0 - fz);
                               std::int64_t off = corner(bx + dx, by + dy, bz + dz);
                               for (int f = 0; f < feat; ++f)
                                 pg->grad[off + f] += w * self.grad.at(i, f);
                             }
                       }
                     });
}

inline FieldParams init_field(std::uint64_t seed, const EncodingConfig& encoding, int class_count,
                              const SceneTransform& transform = {}) {
  encoding.validate();
  if (class_count < 2) throw std::runtime_error("init_field: class count must be >= 2");
  FieldParams f;
  f.encoding = encoding;
  f.class_count = class_count;
  f.transform = transform;
  Rng rng(derive_seed(seed, "field_init"));

  if (encoding.kind == EncodingConfig::Kind::kDenseGrid) {
    for (std::size_t l = 0; l < encoding.grid_resolutions.size(); ++l) {
      int r = encoding.grid_resolutions[l];
      Tensor g({r * r * r, encoding.grid_feature_dim});
      Rng grng = rng.fork("grid", static_cast<std::uint64_t>(l));
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] = grng.normal(0.0, 0.1);
      f.params.add("enc.grid" + std::to_string(l), std::move(g));
    }
  }

  int in = encoding.feature_width();
  Rng wrng = rng.fork("weights");
  f.params.add("trunk.w0", init_linear_weight(in, kTrunkWidth, wrng));
  f.params.add("trunk.b0", Tensor::zeros({kTrunkWidth}));
  f.params.add("trunk.w1", init_linear_weight(kTrunkWidth, kTrunkWidth, wrng));
  f.params.add("trunk.b1", Tensor::zeros({kTrunkWidth}));

  f.params.add("density.w", init_linear_weight(kTrunkWidth, 1, wrng));
  // Bias keeps the field mostly transparent at start: softplus(-1) ~ 0.31,
  // so the mean per-sample alpha stays below 0.5 at typical gaps.
  f.params.add("density.b", Tensor::full({1}, -1.0));

  f.params.add("color.w0", init_linear_weight(kTrunkWidth + 3, kColorHiddenWidth, wrng));
  f.params.add("color.b0", Tensor::zeros({kColorHiddenWidth}));
  f.params.add("color.w1", init_linear_weight(kColorHiddenWidth, 3, wrng));
  f.params.add("color.b1", Tensor::zeros({3}));

  f.params.add("sem.w0", init_linear_weight(kTrunkWidth, kTrunkWidth, wrng));
  f.params.add("sem.b0", Tensor::zeros({kTrunkWidth}));
  f.params.add("sem.w1", init_linear_weight(kTrunkWidth, class_count, wrng));
  f.params.add("sem.b1", Tensor::zeros({class_count}));
  return f;
}

// Fixed (non-learned) part of the encoding: raw normalized coordinates plus
// Fourier features when configured. positions are world-space [P, 3].
inline Tensor encode_positions_fixed(const FieldParams& f, const Tensor& positions) {
  int n = positions.dim(0);
  bool fourier = f.encoding.kind == EncodingConfig::Kind::kFourier;
  int levels = fourier ? f.encoding.fourier_levels : 0;
  Tensor out({n, 3 + 6 * levels});
  for (int i = 0; i < n; ++i) {
    Vec3 p = f.transform.apply(
        {positions.at(i, 0), positions.at(i, 1), positions.at(i, 2)});
    const double c[3] = {p.x, p.y, p.z};
    for (int a = 0; a < 3; ++a) out.at(i, a) = c[a];
    int col = 3;
    for (int l = 0; l < levels; ++l) {
      double freq = std::ldexp(3.14159265358979323846, l);  // pi * 2^l
      for (int a = 0; a < 3; ++a) {
        out.at(i, col++) = std::sin(freq * c[a]);
        out.at(i, col++) = std::cos(freq * c[a]);
      }
    }
  }
  return out;
}

struct FieldOutput {
  ad::Var sigma;   // [P] nonnegative
  ad::Var rgb;     // [P, 3] in (0, 1)
  ad::Var logits;  // [P, C], detached from the density path
};

// Builds the forward graph. positions/dirs are [P, 3] world-space constants;
// wrap in NoGradGuard for plain evaluation.
inline FieldOutput field_forward(const FieldParams& f, const Tensor& positions,
                                 const Tensor& dirs) {
  if (positions.ndim() != 2 || positions.dim(1) != 3)
    throw ShapeError("field_forward: positions must be [P,3]");
  require_same_shape("field_forward", positions, dirs);
  for (std::int64_t i = 0; i < positions.numel(); ++i)
    if (!std::isfinite(positions[i]) || !std::isfinite(dirs[i]))
      throw std::runtime_error("field_forward: non-finite input");
  int n = positions.dim(0);

  ad::Var enc;
  if (f.encoding.kind == EncodingConfig::Kind::kFourier) {
    enc = ad::Var::constant(encode_positions_fixed(f, positions));
  } else {
    // Grid features live in [0, 1]^3 coordinates.
    Tensor pos01({n, 3});
    for (int i = 0; i < n; ++i) {
      Vec3 p = f.transform.apply(
          {positions.at(i, 0), positions.at(i, 1), positions.at(i, 2)});
      pos01.at(i, 0) = 0.5 * (p.x + 1.0);
      pos01.at(i, 1) = 0.5 * (p.y + 1.0);
      pos01.at(i, 2) = 0.5 * (p.z + 1.0);
    }
    enc = ad::Var::constant(encode_positions_fixed(f, positions));
    for (std::size_t l = 0; l < f.encoding.grid_resolutions.size(); ++l) {
      ad::Var feat = grid_sample(f.params.var("enc.grid" + std::to_string(l)), pos01,
                                 f.encoding.grid_resolutions[l], f.encoding.grid_feature_dim);
      enc = ad::concat_last(enc, feat);
    }
  }

  using namespace ad;
  Var h = relu(add_bias(matmul(enc, f.params.var("trunk.w0")), f.params.var("trunk.b0")));
  Var feat = relu(add_bias(matmul(h, f.params.var("trunk.w1")), f.params.var("trunk.b1")));

  Var sigma = softplus(reshape(
      add_bias(matmul(feat, f.params.var("density.w")), f.params.var("density.b")), {n}));

  Var color_in = concat_last(feat, Var::constant(dirs));
  Var ch = relu(add_bias(matmul(color_in, f.params.var("color.w0")), f.params.var("color.b0")));
  Var rgb = sigmoid(add_bias(matmul(ch, f.params.var("color.w1")), f.params.var("color.b1")));

  // Severs the semantic branch from the density path.
  Var sem_in = stop_gradient(feat);
  Var sh = relu(add_bias(matmul(sem_in, f.params.var("sem.w0")), f.params.var("sem.b0")));
  Var logits = add_bias(matmul(sh, f.params.var("sem.w1")), f.params.var("sem.b1"));

  return {sigma, rgb, logits};
}

struct FieldEval {
  Tensor sigma;
  Tensor rgb;
  Tensor logits;
};

inline FieldEval field_eval(const FieldParams& f, const Tensor& positions, const Tensor& dirs) {
  ad::NoGradGuard ng;
  FieldOutput out = field_forward(f, positions, dirs);
  return {out.sigma.value(), out.rgb.value(), out.logits.value()};
}

// Density only; skips the color and semantic heads (coarse sampling pass).
inline Tensor field_density(const FieldParams& f, const Tensor& positions) {
  ad::NoGradGuard ng;
  ad::Var enc;
  int n = positions.dim(0);
  if (f.encoding.kind == EncodingConfig::Kind::kFourier) {
    enc = ad::Var::constant(encode_positions_fixed(f, positions));
  } else {
    Tensor pos01({n, 3});
    for (int i = 0; i < n; ++i) {
      Vec3 p = f.transform.apply(
          {positions.at(i, 0), positions.at(i, 1), positions.at(i, 2)});
      pos01.at(i, 0) = 0.5 * (p.x + 1.0);
      pos01.at(i, 1) = 0.5 * (p.y + 1.0);
      pos01.at(i, 2) = 0.5 * (p.z + 1.0);
    }
    enc = ad::Var::constant(encode_positions_fixed(f, positions));
    for (std::size_t l = 0; l < f.encoding.grid_resolutions.size(); ++l) {
      ad::Var feat = grid_sample(f.params.var("enc.grid" + std::to_string(l)), pos01,
                                 f.encoding.grid_resolutions[l], f.encoding.grid_feature_dim);
      enc = ad::concat_last(enc, feat);
    }
  }
  using namespace ad;
  Var h = relu(add_bias(matmul(enc, f.params.var("trunk.w0")), f.params.var("trunk.b0")));
  Var feat = relu(add_bias(matmul(h, f.params.var("trunk.w1")), f.params.var("trunk.b1")));
  Var sigma = softplus(reshape(
      add_bias(matmul(feat, f.params.var("density.w")), f.params.var("density.b")), {n}));
  return sigma.value();
}

inline Blob serialize_field(const FieldParams& f) {
  ByteWriter w;
  write_blob_header(w, 'F');
  w.u8(f.encoding.kind == EncodingConfig::Kind::kFourier ? 0 : 1);
  w.i32(f.encoding.fourier_levels);
  w.u8(static_cast<std::uint8_t>(f.encoding.grid_resolutions.size()));
  for (int r : f.encoding.grid_resolutions) w.i32(r);
  w.i32(f.encoding.grid_feature_dim);
  w.i32(f.class_count);
  for (double v : {f.transform.offset.x, f.transform.offset.y, f.transform.offset.z,
                   f.transform.scale.x, f.transform.scale.y, f.transform.scale.z})
    w.f64(v);
  write_param_store(w, f.params);
  return w.take();
}

inline FieldParams deserialize_field(const Blob& blob) {
  ByteReader r(blob);
  read_blob_header(r, 'F');
  FieldParams f;
  f.encoding.kind = r.u8() == 0 ? EncodingConfig::Kind::kFourier : EncodingConfig::Kind::kDenseGrid;
  f.encoding.fourier_levels = r.i32();
  int levels = r.u8();
  f.encoding.grid_resolutions.clear();
  for (int i = 0; i < levels; ++i) f.encoding.grid_resolutions.push_back(r.i32());
  f.encoding.grid_feature_dim = r.i32();
  f.class_count = r.i32();
  f.transform.offset = {r.f64(), r.f64(), r.f64()};
  f.transform.scale = {r.f64(), r.f64(), r.f64()};
  f.encoding.validate();
  if (f.class_count < 2) throw BlobError("field blob: bad class count");
  f.params = read_param_store(r);
  if (!r.exhausted()) throw BlobError("field blob: trailing bytes");
  return f;
}

}  // namespace fieldseg
