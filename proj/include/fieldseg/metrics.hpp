#pragma once

// Evaluation: confusion matrices, per-class IoU / mIoU, PSNR, and the
// continual-learning reductions of the step-by-scene accuracy matrix.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fieldseg/image.hpp"

namespace fieldseg {

struct ConfusionMatrix {
  int class_count = 0;
  // counts[gt * C + pred] over pixels whose gt and pred are both real
  // classes. Pixels with ignore-id gt are excluded entirely; pixels whose
  // prediction is the ignore id (an abstaining predictor) are tallied per gt
  // class in `unlabeled` and count as false negatives.
  std::vector<std::int64_t> counts;
  std::vector<std::int64_t> unlabeled;
  std::int64_t ignored_gt = 0;

  explicit ConfusionMatrix(int c = 0)
      : class_count(c), counts(static_cast<std::size_t>(c) * c, 0),
        unlabeled(static_cast<std::size_t>(c), 0) {}

  std::int64_t at(int gt, int pred) const {
    return counts[static_cast<std::size_t>(gt) * class_count + pred];
  }
  std::int64_t evaluated() const {
    std::int64_t n = 0;
    for (std::int64_t v : counts) n += v;
    for (std::int64_t v : unlabeled) n += v;
    return n;
  }
  void merge(const ConfusionMatrix& o) {
    if (o.class_count != class_count) throw std::runtime_error("confusion merge: class mismatch");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
    for (std::size_t i = 0; i < unlabeled.size(); ++i) unlabeled[i] += o.unlabeled[i];
    ignored_gt += o.ignored_gt;
  }
};

inline void accumulate_confusion(ConfusionMatrix& cm, const ImageLabels& pred,
                                 const ImageLabels& gt, int ignore_id = kIgnoreLabel) {
  if (pred.width != gt.width || pred.height != gt.height)
    throw std::runtime_error("confusion: image shape mismatch");
  for (std::size_t i = 0; i < gt.data.size(); ++i) {
    int g = gt.data[i];
    if (g == ignore_id) {
      ++cm.ignored_gt;
      continue;
    }
    if (g >= cm.class_count) throw std::runtime_error("confusion: gt class out of range");
    int p = pred.data[i];
    if (p == ignore_id) {
      ++cm.unlabeled[static_cast<std::size_t>(g)];
    } else if (p >= cm.class_count) {
      throw std::runtime_error("confusion: pred class out of range");
    } else {
      ++cm.counts[static_cast<std::size_t>(g) * cm.class_count + p];
    }
  }
}

inline ConfusionMatrix confusion(const ImageLabels& pred, const ImageLabels& gt, int class_count,
                                 int ignore_id = kIgnoreLabel) {
  ConfusionMatrix cm(class_count);
  accumulate_confusion(cm, pred, gt, ignore_id);
  return cm;
}

struct IouResult {
  std::vector<double> per_class;     // percent; NaN for classes absent from gt and pred
  std::vector<bool> present;
  double miou = 0.0;                 // percent, mean over present classes
};

// IoU_c = TP / (TP + FP + FN); the mean runs over classes present in the
// union of gt and pred. Predictions of the ignore id count as FN.
inline IouResult miou(const ConfusionMatrix& cm) {
  if (cm.evaluated() == 0) throw std::runtime_error("miou: no evaluated pixels");
  int c = cm.class_count;
  IouResult r;
  r.per_class.assign(static_cast<std::size_t>(c), std::nan(""));
  r.present.assign(static_cast<std::size_t>(c), false);
  double sum = 0.0;
  int n_present = 0;
  for (int k = 0; k < c; ++k) {
    std::int64_t tp = cm.at(k, k);
    std::int64_t fp = 0, fn = cm.unlabeled[static_cast<std::size_t>(k)];
    for (int j = 0; j < c; ++j) {
      if (j == k) continue;
      fp += cm.at(j, k);
      fn += cm.at(k, j);
    }
    std::int64_t uni = tp + fp + fn;
    if (uni == 0) continue;
    r.present[static_cast<std::size_t>(k)] = true;
    r.per_class[static_cast<std::size_t>(k)] = 100.0 * static_cast<double>(tp) / static_cast<double>(uni);
    sum += r.per_class[static_cast<std::size_t>(k)];
    ++n_present;
  }
  if (n_present == 0) throw std::runtime_error("miou: no classes present");
  r.miou = sum / n_present;
  return r;
}

// PSNR in dB for images in [0, 1]; identical images hit the +inf case and
// are reported as the sentinel cap.
constexpr double kPsnrCap = 99.0;

inline double psnr(const ImageRgb& a, const ImageRgb& b) {
  if (a.width != b.width || a.height != b.height || a.channels != b.channels)
    throw std::runtime_error("psnr: image shape mismatch");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    double d = a.data[i] - b.data[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.data.size());
  if (mse <= 0.0) return kPsnrCap;
  double v = 10.0 * std::log10(1.0 / mse);
  return v > kPsnrCap ? kPsnrCap : v;
}

struct AccuracyMatrix {
  int n = 0;
  std::vector<double> r;  // row i: mIoU per scene after adaptation step i
  std::vector<double> baseline;

  explicit AccuracyMatrix(int n_scenes = 0)
      : n(n_scenes), r(static_cast<std::size_t>(n_scenes) * n_scenes, 0.0),
        baseline(static_cast<std::size_t>(n_scenes), 0.0) {}

  double& at(int i, int j) { return r[static_cast<std::size_t>(i) * n + j]; }
  double at(int i, int j) const { return r[static_cast<std::size_t>(i) * n + j]; }
};

struct ClMetrics {
  double acc = 0.0;     // mean of the final row
  double a_mean = 0.0;  // mean over the lower triangle (i >= j)
  std::optional<double> fwt;
  std::optional<double> bwt;
};

inline ClMetrics cl_metrics(const AccuracyMatrix& m) {
  int n = m.n;
  if (n < 1) throw std::runtime_error("cl_metrics: empty matrix");
  ClMetrics out;
  double acc = 0.0;
  for (int j = 0; j < n; ++j) acc += m.at(n - 1, j);
  out.acc = acc / n;
  double tri = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) tri += m.at(i, j);
  out.a_mean = 2.0 * tri / (static_cast<double>(n) * (n + 1));
  if (n >= 2) {
    double bwt = 0.0;
    for (int j = 0; j + 1 < n; ++j) bwt += m.at(n - 1, j) - m.at(j, j);
    out.bwt = bwt / (n - 1);
    double fwt = 0.0;
    for (int j = 1; j < n; ++j) fwt += m.at(j - 1, j) - m.baseline[static_cast<std::size_t>(j)];
    out.fwt = fwt / (n - 1);
  }
  return out;
}

// ---- deterministic CSV plumbing ----

inline std::string format_double(double v, int decimals = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

class CsvWriter {
 public:
  explicit CsvWriter(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw std::runtime_error("cannot open for writing: " + path);
  }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << cells[i];
    }
    out_ << '\n';
  }

 private:
  std::ofstream out_;
};

inline void write_accuracy_matrix_csv(const std::string& path, const AccuracyMatrix& m) {
  CsvWriter csv(path);
  std::vector<std::string> header{"row"};
  for (int j = 0; j < m.n; ++j) header.push_back("scene_" + std::to_string(j));
  csv.row(header);
  std::vector<std::string> base{"baseline"};
  for (int j = 0; j < m.n; ++j) base.push_back(format_double(m.baseline[static_cast<std::size_t>(j)], 4));
  csv.row(base);
  for (int i = 0; i < m.n; ++i) {
    std::vector<std::string> row{"step_" + std::to_string(i + 1)};
    for (int j = 0; j < m.n; ++j) row.push_back(format_double(m.at(i, j), 4));
    csv.row(row);
  }
}

}  // namespace fieldseg
