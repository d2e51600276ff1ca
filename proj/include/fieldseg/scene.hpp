#pragma once

// Procedural indoor scenes with exact ground truth.
//
// A scene is an axis-aligned room seen from inside (floor / wall / ceiling
// classes), furniture boxes, floating spheres and small clutter. Every frame
// is rendered by analytic ray casting, so color, depth along the ray and the
// class label are exact at every pixel. A per-scene palette and lighting
// change recolors the same semantic content, which is the covariate shift
// between scenes.

#include <cstdint>
#include <string>
#include <vector>

#include "fieldseg/geometry.hpp"
#include "fieldseg/image.hpp"
#include "fieldseg/rng.hpp"

namespace fieldseg {

// Class ids, fixed across the whole corpus.
enum SceneClass : int {
  kClassFloor = 0,
  kClassWall = 1,
  kClassCeiling = 2,
  kClassBox = 3,
  kClassSphere = 4,
  kClassClutter = 5,
};
constexpr int kClassCount = 6;

struct SceneObject {
  enum class Kind { kBox, kSphere };
  Kind kind = Kind::kBox;
  Aabb box;
  Sphere sphere;
  int class_id = kClassBox;
  Vec3 albedo;
};

struct SceneSpec {
  int id = 0;
  std::uint64_t seed = 0;
  int class_count = kClassCount;
  Aabb room;
  Vec3 floor_albedo, wall_albedo, ceiling_albedo;
  std::vector<SceneObject> objects;
  // Covariate shift: output = clamp(color * palette_scale + palette_offset).
  Vec3 palette_scale{1.0, 1.0, 1.0};
  Vec3 palette_offset{0.0, 0.0, 0.0};
  double light_intensity = 1.0;
  Vec3 light_dir{0.3, -1.0, 0.2};  // direction light travels, unit length
};

struct Frame {
  Pose pose;
  ImageRgb rgb;
  ImageDepth depth;   // distance along the ray, 0 where invalid
  ImageLabels labels; // class ids, 255 = ignore
};

struct SceneGenConfig {
  int n_boxes = 3;
  int n_spheres = 2;
  int n_clutter = 4;
  // 0 keeps the neutral palette; 1 draws the full shift range.
  double palette_jitter = 1.0;
};

namespace detail {
inline Vec3 jitter_albedo(Vec3 base, Rng& rng) {
  auto j = [&](double v) {
    double x = v * rng.uniform(0.75, 1.25);
    return x < 0.02 ? 0.02 : (x > 1.0 ? 1.0 : x);
  };
  return {j(base.x), j(base.y), j(base.z)};
}

inline Aabb object_bounds(const SceneObject& o) {
  if (o.kind == SceneObject::Kind::kBox) return o.box;
  Vec3 r{o.sphere.radius, o.sphere.radius, o.sphere.radius};
  return Aabb{o.sphere.center - r, o.sphere.center + r};
}

inline bool overlaps(const Aabb& a, const Aabb& b, double margin) {
  return a.min.x - margin < b.max.x && b.min.x - margin < a.max.x &&
         a.min.y - margin < b.max.y && b.min.y - margin < a.max.y &&
         a.min.z - margin < b.max.z && b.min.z - margin < a.max.z;
}

// Appends the object unless it collides with an existing one; the caller
// retries with fresh geometry a bounded number of times.
inline bool try_place(std::vector<SceneObject>& objects, const SceneObject& o, double margin) {
  Aabb nb = object_bounds(o);
  for (const SceneObject& e : objects)
    if (overlaps(nb, object_bounds(e), margin)) return false;
  objects.push_back(o);
  return true;
}
}  // namespace detail

inline SceneSpec generate_scene(int id, std::uint64_t seed, const SceneGenConfig& cfg = {}) {
  SceneSpec s;
  s.id = id;
  s.seed = seed;
  Rng rng(derive_seed(seed, "scene", static_cast<std::uint64_t>(id)));

  double ex = rng.uniform(5.0, 7.0);
  double ey = rng.uniform(3.0, 4.0);
  double ez = rng.uniform(5.0, 7.0);
  s.room = Aabb{{0.0, 0.0, 0.0}, {ex, ey, ez}};

  s.floor_albedo = detail::jitter_albedo({0.45, 0.42, 0.38}, rng);
  s.wall_albedo = detail::jitter_albedo({0.75, 0.73, 0.70}, rng);
  s.ceiling_albedo = detail::jitter_albedo({0.85, 0.85, 0.88}, rng);

  // Objects are sampled without overlap; each placement gets a bounded
  // number of retries before generation fails.
  constexpr int kMaxPlacementTries = 100;
  constexpr double kMargin = 0.05;
  auto place = [&](auto make_object) {
    for (int tries = 0; tries < kMaxPlacementTries; ++tries)
      if (detail::try_place(s.objects, make_object(), kMargin)) return;
    throw std::runtime_error("generate_scene: no non-overlapping placement found");
  };

  // Furniture boxes on the floor, kept inside a central band so the camera
  // orbit stays clear of them.
  for (int i = 0; i < cfg.n_boxes; ++i)
    place([&] {
      double w = rng.uniform(0.5, 1.1);
      double h = rng.uniform(0.4, 0.45 * ey);
      double d = rng.uniform(0.5, 1.1);
      double cx = rng.uniform(0.22 * ex, 0.78 * ex);
      double cz = rng.uniform(0.22 * ez, 0.78 * ez);
      SceneObject o;
      o.kind = SceneObject::Kind::kBox;
      o.class_id = kClassBox;
      o.box = Aabb{{cx - 0.5 * w, 0.0, cz - 0.5 * d}, {cx + 0.5 * w, h, cz + 0.5 * d}};
      o.albedo = detail::jitter_albedo({0.55, 0.30, 0.18}, rng);
      return o;
    });

  for (int i = 0; i < cfg.n_spheres; ++i)
    place([&] {
      double r = rng.uniform(0.22, 0.42);
      SceneObject o;
      o.kind = SceneObject::Kind::kSphere;
      o.class_id = kClassSphere;
      o.sphere.radius = r;
      o.sphere.center = {rng.uniform(0.25 * ex, 0.75 * ex), rng.uniform(r, 0.4 * ey),
                         rng.uniform(0.25 * ez, 0.75 * ez)};
      o.albedo = detail::jitter_albedo({0.20, 0.35, 0.65}, rng);
      return o;
    });

  // Clutter: small boxes and spheres near the floor.
  for (int i = 0; i < cfg.n_clutter; ++i)
    place([&] {
      SceneObject o;
      o.class_id = kClassClutter;
      o.albedo = detail::jitter_albedo({0.30, 0.55, 0.25}, rng);
      double cx = rng.uniform(0.15 * ex, 0.85 * ex);
      double cz = rng.uniform(0.15 * ez, 0.85 * ez);
      if (rng.uniform() < 0.5) {
        double w = rng.uniform(0.15, 0.3);
        double h = rng.uniform(0.15, 0.35);
        o.kind = SceneObject::Kind::kBox;
        o.box = Aabb{{cx - 0.5 * w, 0.0, cz - 0.5 * w}, {cx + 0.5 * w, h, cz + 0.5 * w}};
      } else {
        double r = rng.uniform(0.1, 0.18);
        o.kind = SceneObject::Kind::kSphere;
        o.sphere = Sphere{{cx, r, cz}, r};
      }
      return o;
    });

  double amp = cfg.palette_jitter;
  s.palette_scale = {1.0 + amp * rng.uniform(-0.3, 0.3), 1.0 + amp * rng.uniform(-0.3, 0.3),
                     1.0 + amp * rng.uniform(-0.3, 0.3)};
  s.palette_offset = {amp * rng.uniform(-0.08, 0.08), amp * rng.uniform(-0.08, 0.08),
                      amp * rng.uniform(-0.08, 0.08)};
  s.light_intensity = 1.0 + amp * rng.uniform(-0.3, 0.2);
  s.light_dir = Vec3{rng.uniform(-0.4, 0.4), -1.0, rng.uniform(-0.4, 0.4)}.normalized();
  return s;
}

inline Camera default_camera(const SceneSpec& s, int width = 64, int height = 64) {
  Camera cam;
  cam.width = width;
  cam.height = height;
  cam.fx = cam.fy = 0.9 * width;
  cam.cx = 0.5 * width;
  cam.cy = 0.5 * height;
  cam.near = 0.05;
  cam.far = 1.05 * s.room.diagonal();
  return cam;
}

// Inward-looking orbit with height variation and a jittered look target.
inline std::vector<Pose> generate_trajectory(const SceneSpec& s, int n_views, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "traj", static_cast<std::uint64_t>(s.id)));
  Vec3 c = s.room.center();
  Vec3 e = s.room.extent();
  double radius = 0.36 * std::min(e.x, e.z);
  std::vector<Pose> poses;
  poses.reserve(static_cast<std::size_t>(n_views));
  for (int i = 0; i < n_views; ++i) {
    double a = 2.0 * 3.14159265358979323846 * i / n_views + rng.uniform(-0.04, 0.04);
    double height = s.room.min.y + e.y * (0.62 + 0.12 * std::sin(2.0 * a));
    Vec3 eye{c.x + radius * std::cos(a), height, c.z + radius * std::sin(a)};
    Vec3 target{c.x + rng.uniform(-0.06, 0.06) * e.x, s.room.min.y + 0.32 * e.y,
                c.z + rng.uniform(-0.06, 0.06) * e.z};
    poses.push_back(look_at(eye, target, {0.0, 1.0, 0.0}));
  }
  return poses;
}

struct SurfaceHit {
  double t = 0.0;
  int class_id = kIgnoreLabel;
  Vec3 albedo;
  Vec3 normal;
  bool valid = false;
};

// Nearest intersection along the ray: objects first, then the room shell
// seen from inside (exit point of the room box).
inline SurfaceHit trace_scene(const SceneSpec& s, const Ray& ray, double t_min = 1e-6) {
  SurfaceHit hit;
  double best = std::numeric_limits<double>::infinity();

  double t0 = 0.0, t1 = 0.0;
  if (s.room.intersect(ray, t0, t1) && t1 > t_min) {
    Vec3 p = ray.at(t1);
    Vec3 outward = s.room.surface_normal(p);
    hit.t = t1;
    hit.normal = -outward;  // faces into the room
    if (outward.y < -0.5) {
      hit.class_id = kClassFloor;
      hit.albedo = s.floor_albedo;
    } else if (outward.y > 0.5) {
      hit.class_id = kClassCeiling;
      hit.albedo = s.ceiling_albedo;
    } else {
      hit.class_id = kClassWall;
      hit.albedo = s.wall_albedo;
    }
    hit.valid = true;
    best = t1;
  }

  for (const SceneObject& o : s.objects) {
    if (o.kind == SceneObject::Kind::kBox) {
      double a = 0.0, b = 0.0;
      if (!o.box.intersect(ray, a, b)) continue;
      double t = a > t_min ? a : b;  // entry, or exit when starting inside
      if (t <= t_min || t >= best) continue;
      Vec3 p = ray.at(t);
      hit = SurfaceHit{t, o.class_id, o.albedo, o.box.surface_normal(p), true};
      if (a <= t_min) hit.normal = -hit.normal;
      best = t;
    } else {
      double t = 0.0;
      if (!o.sphere.intersect(ray, t_min, t) || t >= best) continue;
      Vec3 n = (ray.at(t) - o.sphere.center) * (1.0 / o.sphere.radius);
      hit = SurfaceHit{t, o.class_id, o.albedo, n, true};
      best = t;
    }
  }
  return hit;
}

inline Vec3 shade(const SceneSpec& s, const SurfaceHit& hit) {
  double diffuse = std::max(0.0, hit.normal.dot(-s.light_dir));
  double lum = (0.35 + 0.65 * diffuse) * s.light_intensity;
  auto channel = [&](double albedo, double scale, double offset) {
    double v = albedo * lum * scale + offset;
    return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  };
  return {channel(hit.albedo.x, s.palette_scale.x, s.palette_offset.x),
          channel(hit.albedo.y, s.palette_scale.y, s.palette_offset.y),
          channel(hit.albedo.z, s.palette_scale.z, s.palette_offset.z)};
}

// Exact color / depth / label frame from one pose.
inline Frame render_ground_truth(const SceneSpec& s, const Camera& cam, const Pose& pose) {
  Frame f;
  f.pose = pose;
  f.rgb = ImageRgb(cam.width, cam.height, 3);
  f.depth = ImageDepth(cam.width, cam.height, 1);
  f.labels = ImageLabels(cam.width, cam.height, 1, kIgnoreLabel);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      Ray ray = cam.pixel_ray(pose, x, y);
      SurfaceHit hit = trace_scene(s, ray);
      if (!hit.valid) continue;  // cannot happen inside a closed room
      Vec3 c = shade(s, hit);
      f.rgb.at(x, y, 0) = c.x;
      f.rgb.at(x, y, 1) = c.y;
      f.rgb.at(x, y, 2) = c.z;
      f.depth.at(x, y) = hit.t;
      f.labels.at(x, y) = static_cast<std::uint8_t>(hit.class_id);
    }
  return f;
}

inline std::vector<Frame> render_frames(const SceneSpec& s, const Camera& cam,
                                        const std::vector<Pose>& poses) {
  std::vector<Frame> frames;
  frames.reserve(poses.size());
  for (const Pose& p : poses) frames.push_back(render_ground_truth(s, cam, p));
  return frames;
}

struct FrameSplit {
  std::vector<int> train;
  std::vector<int> val;
};

// Deterministic split: the first floor(n * train_fraction) frames train,
// the remainder validate.
inline FrameSplit split_frames(int n_frames, double train_fraction = 0.8) {
  if (n_frames < 1) throw std::runtime_error("split_frames: empty frame list");
  int n_train = static_cast<int>(n_frames * train_fraction);
  FrameSplit split;
  for (int i = 0; i < n_train; ++i) split.train.push_back(i);
  for (int i = n_train; i < n_frames; ++i) split.val.push_back(i);
  return split;
}

// Invalidates exactly floor(fraction * valid) currently valid depth pixels,
// chosen by a seeded partial shuffle. Returns the number dropped.
inline int apply_depth_dropout(ImageDepth& depth, double fraction, std::uint64_t seed) {
  if (fraction < 0.0 || fraction > 1.0)
    throw std::runtime_error("apply_depth_dropout: fraction out of [0,1]");
  std::vector<std::size_t> valid;
  for (std::size_t i = 0; i < depth.data.size(); ++i)
    if (depth.data[i] > 0.0) valid.push_back(i);
  int n_drop = static_cast<int>(fraction * static_cast<double>(valid.size()));
  Rng rng(derive_seed(seed, "depth_dropout"));
  for (int k = 0; k < n_drop; ++k) {
    int j = k + rng.uniform_int(static_cast<int>(valid.size()) - k);
    std::swap(valid[static_cast<std::size_t>(k)], valid[static_cast<std::size_t>(j)]);
    depth.data[valid[static_cast<std::size_t>(k)]] = 0.0;
  }
  return n_drop;
}

// I.i.d. label noise emulating an imperfect labeler: each non-ignore pixel
// flips to a uniformly drawn *other* class with the given probability.
inline ImageLabels corrupt_labels(const ImageLabels& labels, double rate, int class_count,
                                  Rng& rng) {
  if (rate < 0.0 || rate > 1.0) throw std::runtime_error("corrupt_labels: rate out of [0,1]");
  if (class_count < 2) throw std::runtime_error("corrupt_labels: need at least two classes");
  ImageLabels out = labels;
  for (std::uint8_t& v : out.data) {
    if (v == kIgnoreLabel || rng.uniform() >= rate) continue;
    int repl = rng.uniform_int(class_count - 1);
    if (repl >= v) ++repl;
    v = static_cast<std::uint8_t>(repl);
  }
  return out;
}

// One scene's data as the adaptation pipeline consumes it.
struct ScenePack {
  SceneSpec spec;
  Camera cam;
  std::vector<Frame> train;
  std::vector<Frame> val;
};

inline ScenePack make_scene_pack(int id, std::uint64_t seed, int n_views,
                                 double train_fraction = 0.8, const SceneGenConfig& gen = {},
                                 int width = 64, int height = 64) {
  ScenePack p;
  p.spec = generate_scene(id, seed, gen);
  p.cam = default_camera(p.spec, width, height);
  std::vector<Pose> poses = generate_trajectory(p.spec, n_views, seed);
  std::vector<Frame> frames;
  frames.reserve(poses.size());
  for (const Pose& pose : poses) frames.push_back(render_ground_truth(p.spec, p.cam, pose));
  FrameSplit split = split_frames(n_views, train_fraction);
  for (int i : split.train) p.train.push_back(std::move(frames[static_cast<std::size_t>(i)]));
  for (int i : split.val) p.val.push_back(std::move(frames[static_cast<std::size_t>(i)]));
  return p;
}

}  // namespace fieldseg
