#pragma once

// Scene manifests: UTF-8 key=value text tying one generated scene to the
// image files that persist its frames.
//
//   format=scene-manifest-v1
//   scene_id=3
//   seed=1003
//   class_count=6
//   width=64          (camera; also height, fx, fy, cx, cy, near, far)
//   room_min=0 0 0
//   room_max=6.1 3.2 5.7
//   n_frames=40
//   frame_0=train frame_000_rgb.ppm frame_000_depth.pfm frame_000_labels.pgm qw qx qy qz tx ty tz
//
// Frame file names are stored relative to the manifest and must not contain
// spaces. Doubles are written with 17 significant digits so a save/load
// round trip is exact. Lines starting with '#' are comments; unknown keys
// are rejected.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fieldseg/geometry.hpp"
#include "fieldseg/image.hpp"
#include "fieldseg/scene.hpp"

namespace fieldseg {

struct ManifestFrame {
  std::string split;  // "train" or "val"
  std::string rgb, depth, labels;
  Pose pose;
};

struct SceneManifest {
  int scene_id = 0;
  std::uint64_t seed = 0;
  int class_count = kClassCount;
  Camera cam;
  Aabb room;
  std::vector<ManifestFrame> frames;
};

namespace detail {

inline std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& s, const std::string& key) {
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw IoError("manifest: bad number '" + s + "' for " + key);
  }
}

inline Vec3 parse_vec3(const std::string& s, const std::string& key) {
  std::istringstream in(s);
  std::string a, b, c, rest;
  if (!(in >> a >> b >> c) || (in >> rest))
    throw IoError("manifest: expected three numbers for " + key);
  return {parse_double(a, key), parse_double(b, key), parse_double(c, key)};
}

}  // namespace detail

inline void save_scene_manifest(const std::string& path, const SceneManifest& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  using detail::fmt_g17;
  out << "format=scene-manifest-v1\n";
  out << "scene_id=" << m.scene_id << '\n';
  out << "seed=" << m.seed << '\n';
  out << "class_count=" << m.class_count << '\n';
  out << "width=" << m.cam.width << '\n';
  out << "height=" << m.cam.height << '\n';
  out << "fx=" << fmt_g17(m.cam.fx) << '\n';
  out << "fy=" << fmt_g17(m.cam.fy) << '\n';
  out << "cx=" << fmt_g17(m.cam.cx) << '\n';
  out << "cy=" << fmt_g17(m.cam.cy) << '\n';
  out << "near=" << fmt_g17(m.cam.near) << '\n';
  out << "far=" << fmt_g17(m.cam.far) << '\n';
  out << "room_min=" << fmt_g17(m.room.min.x) << ' ' << fmt_g17(m.room.min.y) << ' '
      << fmt_g17(m.room.min.z) << '\n';
  out << "room_max=" << fmt_g17(m.room.max.x) << ' ' << fmt_g17(m.room.max.y) << ' '
      << fmt_g17(m.room.max.z) << '\n';
  out << "n_frames=" << m.frames.size() << '\n';
  for (std::size_t i = 0; i < m.frames.size(); ++i) {
    const ManifestFrame& f = m.frames[i];
    const Quat& q = f.pose.rotation;
    const Vec3& t = f.pose.translation;
    out << "frame_" << i << '=' << f.split << ' ' << f.rgb << ' ' << f.depth << ' ' << f.labels
        << ' ' << fmt_g17(q.w) << ' ' << fmt_g17(q.x) << ' ' << fmt_g17(q.y) << ' '
        << fmt_g17(q.z) << ' ' << fmt_g17(t.x) << ' ' << fmt_g17(t.y) << ' ' << fmt_g17(t.z)
        << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

inline SceneManifest load_scene_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  SceneManifest m;
  int n_frames = -1;
  bool have_format = false;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw IoError("manifest: line " + std::to_string(line_no) + " is not key=value");
    std::string key = line.substr(0, eq);
    std::string val = line.substr(eq + 1);
    using detail::parse_double;
    using detail::parse_vec3;
    if (key == "format") {
      if (val != "scene-manifest-v1") throw IoError("manifest: unsupported format " + val);
      have_format = true;
    } else if (key == "scene_id") {
      m.scene_id = static_cast<int>(parse_double(val, key));
    } else if (key == "seed") {
      m.seed = static_cast<std::uint64_t>(std::stoull(val));
    } else if (key == "class_count") {
      m.class_count = static_cast<int>(parse_double(val, key));
    } else if (key == "width") {
      m.cam.width = static_cast<int>(parse_double(val, key));
    } else if (key == "height") {
      m.cam.height = static_cast<int>(parse_double(val, key));
    } else if (key == "fx") {
      m.cam.fx = parse_double(val, key);
    } else if (key == "fy") {
      m.cam.fy = parse_double(val, key);
    } else if (key == "cx") {
      m.cam.cx = parse_double(val, key);
    } else if (key == "cy") {
      m.cam.cy = parse_double(val, key);
    } else if (key == "near") {
      m.cam.near = parse_double(val, key);
    } else if (key == "far") {
      m.cam.far = parse_double(val, key);
    } else if (key == "room_min") {
      m.room.min = parse_vec3(val, key);
    } else if (key == "room_max") {
      m.room.max = parse_vec3(val, key);
    } else if (key == "n_frames") {
      n_frames = static_cast<int>(parse_double(val, key));
    } else if (key.rfind("frame_", 0) == 0) {
      std::istringstream fs(val);
      ManifestFrame f;
      std::string q[4], t[3];
      if (!(fs >> f.split >> f.rgb >> f.depth >> f.labels >> q[0] >> q[1] >> q[2] >> q[3] >>
            t[0] >> t[1] >> t[2]))
        throw IoError("manifest: malformed " + key);
      std::string rest;
      if (fs >> rest) throw IoError("manifest: trailing tokens on " + key);
      if (f.split != "train" && f.split != "val")
        throw IoError("manifest: unknown split '" + f.split + "' on " + key);
      f.pose.rotation = {parse_double(q[0], key), parse_double(q[1], key),
                         parse_double(q[2], key), parse_double(q[3], key)};
      f.pose.translation = parse_vec3(t[0] + ' ' + t[1] + ' ' + t[2], key);
      m.frames.push_back(std::move(f));
    } else {
      throw IoError("manifest: unknown key '" + key + "'");
    }
  }
  if (!have_format) throw IoError("manifest: missing format line in " + path);
  if (n_frames < 0 || static_cast<int>(m.frames.size()) != n_frames)
    throw IoError("manifest: frame count disagrees with n_frames in " + path);
  return m;
}

// Writes a scene's frames (train split first, then val, matching the frame
// order of make_scene_pack) plus its manifest into `dir`; returns the
// manifest path.
inline std::filesystem::path save_scene_pack(const std::filesystem::path& dir,
                                             const ScenePack& pack) {
  std::filesystem::create_directories(dir);
  SceneManifest m;
  m.scene_id = pack.spec.id;
  m.seed = pack.spec.seed;
  m.class_count = pack.spec.class_count;
  m.cam = pack.cam;
  m.room = pack.spec.room;
  int index = 0;
  auto emit = [&](const Frame& f, const char* split) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "frame_%03d", index++);
    ManifestFrame mf;
    mf.split = split;
    mf.rgb = std::string(stem) + "_rgb.ppm";
    mf.depth = std::string(stem) + "_depth.pfm";
    mf.labels = std::string(stem) + "_labels.pgm";
    mf.pose = f.pose;
    write_ppm((dir / mf.rgb).string(), f.rgb);
    write_pfm((dir / mf.depth).string(), f.depth);
    write_pgm((dir / mf.labels).string(), f.labels);
    m.frames.push_back(std::move(mf));
  };
  for (const Frame& f : pack.train) emit(f, "train");
  for (const Frame& f : pack.val) emit(f, "val");
  std::filesystem::path manifest = dir / "manifest.txt";
  save_scene_manifest(manifest.string(), m);
  return manifest;
}

// Rebuilds a ScenePack from a manifest. Only the spec fields the adaptation
// pipeline consumes (id, seed, class count, room bounds) are recoverable
// from disk; geometry stays empty.
inline ScenePack load_scene_pack(const std::string& manifest_path) {
  SceneManifest m = load_scene_manifest(manifest_path);
  std::filesystem::path dir = std::filesystem::path(manifest_path).parent_path();
  ScenePack pack;
  pack.spec.id = m.scene_id;
  pack.spec.seed = m.seed;
  pack.spec.class_count = m.class_count;
  pack.spec.room = m.room;
  pack.cam = m.cam;
  for (const ManifestFrame& mf : m.frames) {
    Frame f;
    f.pose = mf.pose;
    f.rgb = read_ppm((dir / mf.rgb).string());
    f.depth = read_pfm((dir / mf.depth).string());
    f.labels = read_pgm((dir / mf.labels).string());
    if (f.rgb.width != m.cam.width || f.rgb.height != m.cam.height)
      throw IoError("manifest: frame size disagrees with camera in " + manifest_path);
    (mf.split == "train" ? pack.train : pack.val).push_back(std::move(f));
  }
  return pack;
}

// Reads an ordered scene list: one manifest path per line, relative to the
// list file itself.
inline std::vector<std::string> load_scene_list(const std::string& list_path) {
  std::ifstream in(list_path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + list_path);
  std::filesystem::path base = std::filesystem::path(list_path).parent_path();
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    out.push_back((base / line).string());
  }
  if (out.empty()) throw IoError("empty scene list: " + list_path);
  return out;
}

}  // namespace fieldseg
