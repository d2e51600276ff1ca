#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <cstdint>
#include <set>
#include <vector>

#include "fieldseg/metrics.hpp"
#include "fieldseg/rng.hpp"

using namespace fieldseg;
using Catch::Approx;

namespace {
ImageLabels labels_from(const std::vector<std::uint8_t>& v) {
  ImageLabels img(static_cast<int>(v.size()), 1, 1);
  img.data = v;
  return img;
}
}  // namespace

TEST_CASE("confusion matrix counts agreements and mistakes per class") {
  ImageLabels pred = labels_from({0, 1, 1});
  ImageLabels gt = labels_from({0, 1, 0});
  ConfusionMatrix cm = confusion(pred, gt, 2);
  REQUIRE(cm.at(0, 0) == 1);
  REQUIRE(cm.at(1, 1) == 1);
  REQUIRE(cm.at(0, 1) == 1);
  REQUIRE(cm.at(1, 0) == 0);
  REQUIRE(cm.evaluated() == 3);
}

TEST_CASE("ignored ground truth is excluded and abstaining predictions count as misses") {
  ImageLabels pred = labels_from({0, 255, 1});
  ImageLabels gt = labels_from({255, 1, 1});
  ConfusionMatrix cm = confusion(pred, gt, 2);
  REQUIRE(cm.ignored_gt == 1);
  REQUIRE(cm.unlabeled[1] == 1);
  REQUIRE(cm.at(1, 1) == 1);
  REQUIRE(cm.evaluated() == 2);

  // The abstained pixel is a false negative for class 1: IoU = 1 / 2.
  IouResult r = miou(cm);
  REQUIRE(r.per_class[1] == Approx(50.0));
}

TEST_CASE("worked miou example") {
  // gt:   0 0 0 1 1 2
  // pred: 0 0 1 1 1 1
  // class 0: tp 2, fp 0, fn 1 -> 2/3; class 1: tp 2, fp 2, fn 0 -> 1/2;
  // class 2: tp 0, union 1 -> 0. mIoU = (66.67 + 50 + 0) / 3 = 38.89.
  ImageLabels gt = labels_from({0, 0, 0, 1, 1, 2});
  ImageLabels pred = labels_from({0, 0, 1, 1, 1, 1});
  IouResult r = miou(confusion(pred, gt, 3));
  REQUIRE(r.per_class[0] == Approx(100.0 * 2.0 / 3.0).epsilon(1e-9));
  REQUIRE(r.per_class[1] == Approx(50.0).epsilon(1e-9));
  REQUIRE(r.per_class[2] == Approx(0.0).margin(1e-12));
  REQUIRE(r.miou == Approx(100.0 * (2.0 / 3.0 + 0.5) / 3.0).epsilon(1e-9));
}

TEST_CASE("classes absent from both gt and pred do not enter the mean") {
  ImageLabels gt = labels_from({0, 0, 1});
  ImageLabels pred = labels_from({0, 0, 1});
  IouResult r = miou(confusion(pred, gt, 6));
  REQUIRE_FALSE(r.present[5]);
  REQUIRE(std::isnan(r.per_class[5]));
  REQUIRE(r.miou == Approx(100.0));
}

TEST_CASE("miou errors on empty input") {
  ImageLabels gt = labels_from({255, 255});
  ImageLabels pred = labels_from({0, 1});
  REQUIRE_THROWS(miou(confusion(pred, gt, 2)));
}

TEST_CASE("miou matches a brute-force oracle on random labelings") {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    int c = 2 + static_cast<int>(rng.uniform_int(5));
    int n = 20 + static_cast<int>(rng.uniform_int(60));
    std::vector<std::uint8_t> gt(static_cast<std::size_t>(n)), pred(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      gt[static_cast<std::size_t>(i)] =
          rng.uniform() < 0.1 ? kIgnoreLabel : static_cast<std::uint8_t>(rng.uniform_int(c));
      pred[static_cast<std::size_t>(i)] =
          rng.uniform() < 0.1 ? kIgnoreLabel : static_cast<std::uint8_t>(rng.uniform_int(c));
    }

    // Oracle: set arithmetic per class, no confusion matrix involved.
    double sum = 0.0;
    int present = 0;
    for (int k = 0; k < c; ++k) {
      std::int64_t inter = 0, uni = 0;
      for (int i = 0; i < n; ++i) {
        if (gt[static_cast<std::size_t>(i)] == kIgnoreLabel) continue;
        bool in_gt = gt[static_cast<std::size_t>(i)] == k;
        bool in_pred = pred[static_cast<std::size_t>(i)] == k;
        if (in_gt && in_pred) ++inter;
        if (in_gt || in_pred) ++uni;
      }
      if (uni == 0) continue;
      sum += 100.0 * static_cast<double>(inter) / static_cast<double>(uni);
      ++present;
    }
    if (present == 0) continue;

    IouResult r = miou(confusion(labels_from(pred), labels_from(gt), c));
    INFO("trial " << trial << " classes " << c << " pixels " << n);
    REQUIRE(r.miou == Approx(sum / present).epsilon(1e-9));
  }
}

TEST_CASE("merged confusion equals confusion of concatenated images") {
  ImageLabels g1 = labels_from({0, 1, 2, 1});
  ImageLabels p1 = labels_from({0, 2, 2, 255});
  ImageLabels g2 = labels_from({2, 2, 255, 0});
  ImageLabels p2 = labels_from({1, 2, 0, 0});
  ConfusionMatrix a = confusion(p1, g1, 3);
  a.merge(confusion(p2, g2, 3));

  std::vector<std::uint8_t> gall = {0, 1, 2, 1, 2, 2, 255, 0};
  std::vector<std::uint8_t> pall = {0, 2, 2, 255, 1, 2, 0, 0};
  ConfusionMatrix b = confusion(labels_from(pall), labels_from(gall), 3);
  REQUIRE(a.counts == b.counts);
  REQUIRE(a.unlabeled == b.unlabeled);
  REQUIRE(a.ignored_gt == b.ignored_gt);
}

TEST_CASE("psnr hand values and cap") {
  ImageRgb a(10, 10, 3, 0.5);
  ImageRgb b = a;
  for (auto& v : b.data) v += 0.1;  // MSE = 0.01
  REQUIRE(psnr(a, b) == Approx(20.0).epsilon(1e-9));
  REQUIRE(psnr(a, a) == kPsnrCap);

  ImageRgb c = a;
  c.data[0] += 1e-9;  // finite but above the cap
  REQUIRE(psnr(a, c) == kPsnrCap);
}

TEST_CASE("continual metrics on a hand-solved two-step matrix") {
  AccuracyMatrix m(2);
  m.at(0, 0) = 60.0;
  m.at(0, 1) = 40.0;
  m.at(1, 0) = 55.0;
  m.at(1, 1) = 50.0;
  m.baseline = {40.0, 40.0};
  ClMetrics cl = cl_metrics(m);
  REQUIRE(cl.acc == Approx(52.5));
  REQUIRE(cl.a_mean == Approx((60.0 + 55.0 + 50.0) / 3.0));
  REQUIRE(cl.bwt.has_value());
  REQUIRE(*cl.bwt == Approx(-5.0));
  REQUIRE(cl.fwt.has_value());
  REQUIRE(*cl.fwt == Approx(0.0).margin(1e-12));
}

TEST_CASE("single-step runs report no transfer metrics") {
  AccuracyMatrix m(1);
  m.at(0, 0) = 70.0;
  ClMetrics cl = cl_metrics(m);
  REQUIRE(cl.acc == Approx(70.0));
  REQUIRE(cl.a_mean == Approx(70.0));
  REQUIRE_FALSE(cl.fwt.has_value());
  REQUIRE_FALSE(cl.bwt.has_value());
}

TEST_CASE("a_mean only reads the lower triangle") {
  AccuracyMatrix m(3);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j <= i; ++j) m.at(i, j) = 10.0;
  m.at(0, 1) = 999.0;  // upper triangle must not contribute
  m.at(0, 2) = 999.0;
  m.at(1, 2) = 999.0;
  REQUIRE(cl_metrics(m).a_mean == Approx(10.0));
}

TEST_CASE("csv formatting is locale-independent and fixed width") {
  REQUIRE(format_double(1.0) == "1.000000");
  REQUIRE(format_double(-0.125, 3) == "-0.125");
  REQUIRE(format_double(52.5, 4) == "52.5000");
}
