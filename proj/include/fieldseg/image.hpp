#pragma once

// Image containers and binary image I/O.
//
// Formats on disk:
//   color  : binary PPM (P6), 8 bits per channel
//   depth  : little-endian grayscale PFM ("Pf", negative scale), rows
//            stored bottom-to-top per the PFM convention
//   labels : binary PGM (P5), one byte per pixel, 255 = ignore

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fieldseg {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

static_assert(std::endian::native == std::endian::little,
              "image I/O assumes a little-endian host");

template <typename T>
struct Image {
  int width = 0, height = 0, channels = 1;
  std::vector<T> data;

  Image() = default;
  Image(int w, int h, int c, T fill = T{})
      : width(w), height(h), channels(c),
        data(static_cast<std::size_t>(w) * h * c, fill) {}

  T& at(int x, int y, int c = 0) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  T at(int x, int y, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
};

using ImageRgb = Image<double>;     // 3 channels in [0, 1]
using ImageDepth = Image<double>;   // 1 channel, scene units, 0 = invalid
using ImageLabels = Image<std::uint8_t>;  // 1 channel class ids

constexpr std::uint8_t kIgnoreLabel = 255;

namespace detail {

inline void skip_pnm_space(std::istream& in) {
  int c = in.peek();
  while (c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '#') {
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else {
      in.get();
    }
    c = in.peek();
  }
}

inline int read_pnm_int(std::istream& in, const char* what) {
  skip_pnm_space(in);
  int v = -1;
  in >> v;
  if (!in || v < 0) throw IoError(std::string("malformed PNM header: ") + what);
  return v;
}

}  // namespace detail

inline void write_ppm(const std::string& path, const ImageRgb& img) {
  if (img.channels != 3) throw IoError("write_ppm: expected 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<std::uint8_t> row(static_cast<std::size_t>(img.width) * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = img.at(x, y, c);
        v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        row[static_cast<std::size_t>(x) * 3 + c] =
            static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw IoError("short write: " + path);
}

inline ImageRgb read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || m1 != '6') throw IoError("not a P6 PPM: " + path);
  int w = detail::read_pnm_int(in, "width");
  int h = detail::read_pnm_int(in, "height");
  int maxv = detail::read_pnm_int(in, "maxval");
  if (maxv != 255) throw IoError("unsupported PPM maxval in " + path);
  in.get();  // single whitespace before raster
  ImageRgb img(w, h, 3);
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size()))
    throw IoError("truncated PPM raster: " + path);
  for (std::size_t i = 0; i < raw.size(); ++i) img.data[i] = raw[i] / 255.0;
  return img;
}

inline void write_pgm(const std::string& path, const ImageLabels& img) {
  if (img.channels != 1) throw IoError("write_pgm: expected 1 channel");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "P5\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data.data()),
            static_cast<std::streamsize>(img.data.size()));
  if (!out) throw IoError("short write: " + path);
}

inline ImageLabels read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || m1 != '5') throw IoError("not a P5 PGM: " + path);
  int w = detail::read_pnm_int(in, "width");
  int h = detail::read_pnm_int(in, "height");
  int maxv = detail::read_pnm_int(in, "maxval");
  if (maxv != 255) throw IoError("unsupported PGM maxval in " + path);
  in.get();
  ImageLabels img(w, h, 1);
  in.read(reinterpret_cast<char*>(img.data.data()),
          static_cast<std::streamsize>(img.data.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.data.size()))
    throw IoError("truncated PGM raster: " + path);
  return img;
}

inline void write_pfm(const std::string& path, const ImageDepth& img) {
  if (img.channels != 1) throw IoError("write_pfm: expected 1 channel");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  // Negative scale marks little-endian data.
  out << "Pf\n" << img.width << " " << img.height << "\n-1.0\n";
  std::vector<float> row(static_cast<std::size_t>(img.width));
  for (int y = img.height - 1; y >= 0; --y) {  // PFM rows run bottom-to-top
    for (int x = 0; x < img.width; ++x) row[static_cast<std::size_t>(x)] =
        static_cast<float>(img.at(x, y));
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!out) throw IoError("short write: " + path);
}

inline ImageDepth read_pfm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::string magic;
  in >> magic;
  if (magic != "Pf") throw IoError("not a grayscale PFM: " + path);
  int w = detail::read_pnm_int(in, "width");
  int h = detail::read_pnm_int(in, "height");
  detail::skip_pnm_space(in);
  double scale = 0.0;
  in >> scale;
  if (!in || scale >= 0.0) throw IoError("expected little-endian PFM (negative scale): " + path);
  in.get();
  ImageDepth img(w, h, 1);
  std::vector<float> row(static_cast<std::size_t>(w));
  for (int y = h - 1; y >= 0; --y) {
    in.read(reinterpret_cast<char*>(row.data()),
            static_cast<std::streamsize>(row.size() * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(row.size() * sizeof(float)))
      throw IoError("truncated PFM raster: " + path);
    for (int x = 0; x < w; ++x) img.at(x, y) = row[static_cast<std::size_t>(x)];
  }
  return img;
}

}  // namespace fieldseg
