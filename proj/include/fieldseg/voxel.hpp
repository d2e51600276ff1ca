#pragma once

// Voxel-map fusion baseline: per-frame predictions vote into a class-count
// histogram per voxel, and pseudo-labels come from first-hit ray marching.
//
// Fusion is count-of-argmax: each valid-depth pixel back-projects to a world
// point and increments the containing voxel's counter for the predicted
// class. Ties at lookup go to the lowest class id, and a voxel only answers
// once its observation count reaches the threshold (default 1).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include "fieldseg/geometry.hpp"
#include "fieldseg/image.hpp"
#include "fieldseg/scene.hpp"
#include "fieldseg/segmenter.hpp"

namespace fieldseg {

struct VoxelGrid {
  Vec3 origin;
  double voxel_size = 0.0;
  int nx = 0, ny = 0, nz = 0;
  int class_count = 0;
  int threshold = 1;
  std::vector<std::int64_t> histogram;     // [nx*ny*nz, C]
  std::vector<std::int64_t> observations;  // [nx*ny*nz]
  std::int64_t spilled = 0;                // points that fell outside

  std::int64_t cell_count() const {
    return static_cast<std::int64_t>(nx) * ny * nz;
  }

  // Flat cell index for a world point, -1 when outside the grid.
  std::int64_t cell_of(const Vec3& p) const {
    int ix = static_cast<int>(std::floor((p.x - origin.x) / voxel_size));
    int iy = static_cast<int>(std::floor((p.y - origin.y) / voxel_size));
    int iz = static_cast<int>(std::floor((p.z - origin.z) / voxel_size));
    if (ix < 0 || ix >= nx || iy < 0 || iy >= ny || iz < 0 || iz >= nz) return -1;
    return (static_cast<std::int64_t>(iz) * ny + iy) * nx + ix;
  }

  Aabb bounds() const {
    return Aabb{origin,
                origin + Vec3{nx * voxel_size, ny * voxel_size, nz * voxel_size}};
  }
};

// Default voxel edge = bounds diagonal / 64. The box is padded slightly so
// points lying exactly on the far faces still land inside.
inline VoxelGrid make_voxel_grid(const Aabb& bounds, int class_count,
                                 double voxel_size = 0.0, int threshold = 1) {
  if (class_count < 2) throw std::runtime_error("make_voxel_grid: class count must be >= 2");
  if (threshold < 1) throw std::runtime_error("make_voxel_grid: threshold must be >= 1");
  double diag = bounds.diagonal();
  if (!(diag > 0.0)) throw std::runtime_error("make_voxel_grid: empty bounds");
  if (voxel_size == 0.0) voxel_size = diag / 64.0;
  if (!(voxel_size > 0.0)) throw std::runtime_error("make_voxel_grid: bad voxel size");

  double pad = 1e-6 * diag;
  Vec3 lo = bounds.min - Vec3{pad, pad, pad};
  Vec3 ext = bounds.extent() + Vec3{2.0 * pad, 2.0 * pad, 2.0 * pad};

  VoxelGrid g;
  g.origin = lo;
  g.voxel_size = voxel_size;
  g.nx = static_cast<int>(std::ceil(ext.x / voxel_size));
  g.ny = static_cast<int>(std::ceil(ext.y / voxel_size));
  g.nz = static_cast<int>(std::ceil(ext.z / voxel_size));
  g.class_count = class_count;
  g.threshold = threshold;
  g.histogram.assign(static_cast<std::size_t>(g.cell_count()) * class_count, 0);
  g.observations.assign(static_cast<std::size_t>(g.cell_count()), 0);
  return g;
}

// Votes one frame's predicted argmax classes into the grid. Pixels with
// invalid (zero) depth are skipped; points outside the grid count as spill.
inline void integrate_frame(VoxelGrid& g, const Camera& cam, const Frame& frame,
                            const PredictionMap& pred) {
  if (pred.labels.width != frame.depth.width || pred.labels.height != frame.depth.height)
    throw std::runtime_error("integrate_frame: prediction/frame shape mismatch");
  for (int y = 0; y < frame.depth.height; ++y)
    for (int x = 0; x < frame.depth.width; ++x) {
      double d = frame.depth.at(x, y);
      if (d <= 0.0) continue;
      int cls = pred.labels.at(x, y);
      if (cls == kIgnoreLabel) continue;
      if (cls >= g.class_count) throw std::runtime_error("integrate_frame: class out of range");
      Vec3 p = cam.pixel_ray(frame.pose, x, y).at(d);
      std::int64_t cell = g.cell_of(p);
      if (cell < 0) {
        ++g.spilled;
        continue;
      }
      ++g.histogram[static_cast<std::size_t>(cell) * g.class_count + cls];
      ++g.observations[static_cast<std::size_t>(cell)];
    }
}

// Majority class of a cell; ties break toward the lowest id.
inline int voxel_argmax(const VoxelGrid& g, std::int64_t cell) {
  const std::int64_t* h = &g.histogram[static_cast<std::size_t>(cell) * g.class_count];
  int best = 0;
  for (int c = 1; c < g.class_count; ++c)
    if (h[c] > h[best]) best = c;
  return best;
}

// First-hit ray march at voxel granularity: the nearest cell along the ray
// with observation count >= threshold answers; otherwise ignore. Exact grid
// traversal, so no cell crossed by the ray can be skipped.
inline ImageLabels render_voxel_labels(const VoxelGrid& g, const Camera& cam,
                                       const Pose& pose) {
  ImageLabels out(cam.width, cam.height, 1, kIgnoreLabel);
  Aabb box = g.bounds();
  const double inf = std::numeric_limits<double>::infinity();
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      Ray ray = cam.pixel_ray(pose, x, y);
      double t0 = 0.0, t1 = 0.0;
      if (!box.intersect(ray, t0, t1)) continue;
      t0 = std::max(t0, 0.0);
      if (t0 > t1) continue;

      Vec3 p = ray.at(t0 + 1e-9 * g.voxel_size);
      const double o[3] = {ray.origin.x, ray.origin.y, ray.origin.z};
      const double d[3] = {ray.dir.x, ray.dir.y, ray.dir.z};
      const double org[3] = {g.origin.x, g.origin.y, g.origin.z};
      const int dims[3] = {g.nx, g.ny, g.nz};
      int idx[3];
      int step[3];
      double tmax[3], tdelta[3];
      for (int a = 0; a < 3; ++a) {
        int i = static_cast<int>(std::floor((p[a] - org[a]) / g.voxel_size));
        idx[a] = std::max(0, std::min(dims[a] - 1, i));
        if (std::fabs(d[a]) < 1e-15) {
          step[a] = 0;
          tmax[a] = inf;
          tdelta[a] = inf;
        } else {
          step[a] = d[a] > 0.0 ? 1 : -1;
          double boundary = org[a] + (idx[a] + (d[a] > 0.0 ? 1 : 0)) * g.voxel_size;
          tmax[a] = (boundary - o[a]) / d[a];
          tdelta[a] = g.voxel_size / std::fabs(d[a]);
        }
      }
      while (true) {
        std::int64_t cell = (static_cast<std::int64_t>(idx[2]) * g.ny + idx[1]) * g.nx + idx[0];
        if (g.observations[static_cast<std::size_t>(cell)] >= g.threshold) {
          out.at(x, y) = static_cast<std::uint8_t>(voxel_argmax(g, cell));
          break;
        }
        int a = tmax[0] <= tmax[1] ? (tmax[0] <= tmax[2] ? 0 : 2) : (tmax[1] <= tmax[2] ? 1 : 2);
        if (tmax[a] > t1) break;
        idx[a] += step[a];
        if (idx[a] < 0 || idx[a] >= dims[a]) break;
        tmax[a] += tdelta[a];
      }
    }
  return out;
}

}  // namespace fieldseg
