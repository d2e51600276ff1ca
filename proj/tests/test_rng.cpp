#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <vector>

#include "fieldseg/rng.hpp"

using namespace fieldseg;

TEST_CASE("rng streams are deterministic per seed") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
  Rng c(43);
  bool differs = false;
  Rng a2(42);
  for (int i = 0; i < 10; ++i) differs |= (a2.next_u64() != c.next_u64());
  REQUIRE(differs);
}

TEST_CASE("derive_seed separates streams by tag and index") {
  std::uint64_t base = 7;
  REQUIRE(derive_seed(base, "alpha") != derive_seed(base, "beta"));
  REQUIRE(derive_seed(base, "alpha", 0) != derive_seed(base, "alpha", 1));
  REQUIRE(derive_seed(base, "alpha", 1, 0) != derive_seed(base, "alpha", 0, 1));
  REQUIRE(derive_seed(base, "alpha", 2, 3) == derive_seed(base, "alpha", 2, 3));
}

TEST_CASE("uniform stays in [0,1) and covers the range") {
  Rng rng(1);
  double lo = 1.0, hi = 0.0;
  for (int i = 0; i < 10000; ++i) {
    double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    lo = std::min(lo, u);
    hi = std::max(hi, u);
  }
  REQUIRE(lo < 0.01);
  REQUIRE(hi > 0.99);
}

TEST_CASE("uniform_int is in range and roughly balanced") {
  Rng rng(5);
  std::vector<int> hist(7, 0);
  for (int i = 0; i < 70000; ++i) {
    int v = rng.uniform_int(7);
    REQUIRE(v >= 0);
    REQUIRE(v < 7);
    ++hist[static_cast<std::size_t>(v)];
  }
  for (int c : hist) {
    REQUIRE(c > 9000);
    REQUIRE(c < 11000);
  }
}

TEST_CASE("normal has near-standard moments") {
  Rng rng(9);
  double sum = 0.0, sq = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    double x = rng.normal();
    sum += x;
    sq += x * x;
  }
  double mean = sum / n;
  double var = sq / n - mean * mean;
  REQUIRE(std::fabs(mean) < 0.02);
  REQUIRE(std::fabs(var - 1.0) < 0.03);
}

TEST_CASE("fork gives reproducible independent streams") {
  Rng parent(123);
  Rng f1 = parent.fork("child", 1);
  Rng f2 = parent.fork("child", 1);
  Rng f3 = parent.fork("child", 2);
  REQUIRE(f1.next_u64() == f2.next_u64());
  REQUIRE(f1.next_u64() != f3.next_u64());
}
