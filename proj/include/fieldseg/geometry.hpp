#pragma once

// Minimal 3D geometry: vectors, unit-quaternion poses, a pinhole camera and
// analytic ray intersections against boxes and spheres.

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace fieldseg {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator-() const { return {-x, -y, -z}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const {
    double n = norm();
    if (n <= 0.0) throw std::runtime_error("normalized: zero-length vector");
    return {x / n, y / n, z / n};
  }
  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

inline Vec3 lerp(const Vec3& a, const Vec3& b, double t) { return a + (b - a) * t; }

// Unit quaternion, scalar-first (w, x, y, z).
struct Quat {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

  static Quat from_axis_angle(const Vec3& axis, double angle) {
    Vec3 a = axis.normalized();
    double h = 0.5 * angle, s = std::sin(h);
    return {std::cos(h), a.x * s, a.y * s, a.z * s};
  }

  double dot(const Quat& o) const { return w * o.w + x * o.x + y * o.y + z * o.z; }
  double norm() const { return std::sqrt(dot(*this)); }
  Quat normalized() const {
    double n = norm();
    return {w / n, x / n, y / n, z / n};
  }
  Quat operator-() const { return {-w, -x, -y, -z}; }

  Quat operator*(const Quat& o) const {
    return {w * o.w - x * o.x - y * o.y - z * o.z, w * o.x + x * o.w + y * o.z - z * o.y,
            w * o.y - x * o.z + y * o.w + z * o.x, w * o.z + x * o.y - y * o.x + z * o.w};
  }

  Vec3 rotate(const Vec3& v) const {
    // q v q* expanded via the cross-product form.
    Vec3 u{x, y, z};
    Vec3 t = 2.0 * u.cross(v);
    return v + w * t + u.cross(t);
  }
};

// Spherical linear interpolation with antipodal correction; falls back to
// normalized lerp when the arc is tiny.
inline Quat slerp(Quat a, Quat b, double t) {
  double d = a.dot(b);
  if (d < 0.0) {
    b = -b;
    d = -d;
  }
  if (d > 0.9995) {
    Quat r{a.w + t * (b.w - a.w), a.x + t * (b.x - a.x), a.y + t * (b.y - a.y),
           a.z + t * (b.z - a.z)};
    return r.normalized();
  }
  double theta = std::acos(std::clamp(d, -1.0, 1.0));
  double s = std::sin(theta);
  double wa = std::sin((1.0 - t) * theta) / s;
  double wb = std::sin(t * theta) / s;
  return Quat{wa * a.w + wb * b.w, wa * a.x + wb * b.x, wa * a.y + wb * b.y,
              wa * a.z + wb * b.z}
      .normalized();
}

// Camera-to-world rigid transform.
struct Pose {
  Quat rotation;
  Vec3 translation;

  Vec3 apply(const Vec3& p) const { return rotation.rotate(p) + translation; }
  Vec3 rotate(const Vec3& v) const { return rotation.rotate(v); }
};

// Pose whose -z axis looks from eye toward target (right-handed, y up in
// camera space maps to the given up hint).
inline Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& up_hint) {
  Vec3 fwd = (target - eye).normalized();
  Vec3 right = fwd.cross(up_hint).normalized();
  Vec3 up = right.cross(fwd);
  // Columns of the rotation matrix: camera x, y, -z axes in world space.
  double m00 = right.x, m01 = up.x, m02 = -fwd.x;
  double m10 = right.y, m11 = up.y, m12 = -fwd.y;
  double m20 = right.z, m21 = up.z, m22 = -fwd.z;
  double tr = m00 + m11 + m22;
  Quat q;
  if (tr > 0.0) {
    double s = std::sqrt(tr + 1.0) * 2.0;
    q = {0.25 * s, (m21 - m12) / s, (m02 - m20) / s, (m10 - m01) / s};
  } else if (m00 > m11 && m00 > m22) {
    double s = std::sqrt(1.0 + m00 - m11 - m22) * 2.0;
    q = {(m21 - m12) / s, 0.25 * s, (m01 + m10) / s, (m02 + m20) / s};
  } else if (m11 > m22) {
    double s = std::sqrt(1.0 + m11 - m00 - m22) * 2.0;
    q = {(m02 - m20) / s, (m01 + m10) / s, 0.25 * s, (m12 + m21) / s};
  } else {
    double s = std::sqrt(1.0 + m22 - m00 - m11) * 2.0;
    q = {(m10 - m01) / s, (m02 + m20) / s, (m12 + m21) / s, 0.25 * s};
  }
  return Pose{q.normalized(), eye};
}

struct Ray {
  Vec3 origin;
  Vec3 dir;  // unit length
  Vec3 at(double t) const { return origin + dir * t; }
};

struct Camera {
  int width = 64, height = 64;
  double fx = 64.0, fy = 64.0, cx = 32.0, cy = 32.0;
  double near = 0.05, far = 12.0;

  // Ray through the center of pixel (px, py). Camera looks down -z;
  // +x right, +y up in camera space, image rows grow downward.
  Ray pixel_ray(const Pose& pose, int px, int py) const {
    double u = (px + 0.5 - cx) / fx;
    double v = -(py + 0.5 - cy) / fy;
    Vec3 d{u, v, -1.0};
    return Ray{pose.translation, pose.rotate(d).normalized()};
  }
};

struct Aabb {
  Vec3 min, max;

  bool contains(const Vec3& p) const {
    return p.x >= min.x && p.x <= max.x && p.y >= min.y && p.y <= max.y && p.z >= min.z &&
           p.z <= max.z;
  }
  Vec3 extent() const { return max - min; }
  Vec3 center() const { return 0.5 * (min + max); }
  double diagonal() const { return extent().norm(); }

  // Slab test; returns entry/exit distances when the ray hits.
  bool intersect(const Ray& r, double& t_enter, double& t_exit) const {
    double t0 = -std::numeric_limits<double>::infinity();
    double t1 = std::numeric_limits<double>::infinity();
    const double o[3] = {r.origin.x, r.origin.y, r.origin.z};
    const double d[3] = {r.dir.x, r.dir.y, r.dir.z};
    const double lo[3] = {min.x, min.y, min.z};
    const double hi[3] = {max.x, max.y, max.z};
    for (int i = 0; i < 3; ++i) {
      if (std::fabs(d[i]) < 1e-12) {
        if (o[i] < lo[i] || o[i] > hi[i]) return false;
        continue;
      }
      double a = (lo[i] - o[i]) / d[i];
      double b = (hi[i] - o[i]) / d[i];
      if (a > b) std::swap(a, b);
      t0 = std::max(t0, a);
      t1 = std::min(t1, b);
    }
    if (t0 > t1) return false;
    t_enter = t0;
    t_exit = t1;
    return true;
  }

  // Outward normal axis at a surface point (0/1/2 for x/y/z, signed).
  Vec3 surface_normal(const Vec3& p) const {
    double best = std::numeric_limits<double>::infinity();
    Vec3 n{1.0, 0.0, 0.0};
    const double d[6] = {std::fabs(p.x - min.x), std::fabs(p.x - max.x), std::fabs(p.y - min.y),
                         std::fabs(p.y - max.y), std::fabs(p.z - min.z), std::fabs(p.z - max.z)};
    const Vec3 ns[6] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
    for (int i = 0; i < 6; ++i)
      if (d[i] < best) {
        best = d[i];
        n = ns[i];
      }
    return n;
  }
};

struct Sphere {
  Vec3 center;
  double radius = 1.0;

  bool contains(const Vec3& p) const { return (p - center).dot(p - center) <= radius * radius; }

  // Nearest positive intersection beyond t_min, if any.
  bool intersect(const Ray& r, double t_min, double& t_hit) const {
    Vec3 oc = r.origin - center;
    double b = oc.dot(r.dir);
    double c = oc.dot(oc) - radius * radius;
    double disc = b * b - c;
    if (disc < 0.0) return false;
    double s = std::sqrt(disc);
    double t = -b - s;
    if (t <= t_min) t = -b + s;
    if (t <= t_min) return false;
    t_hit = t;
    return true;
  }
};

}  // namespace fieldseg
