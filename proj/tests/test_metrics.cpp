#include <doctest.h>

#include <cmath>

#include "mflow/error.hpp"
#include "mflow/metrics.hpp"
#include "support/gradcheck.hpp"

using namespace mflow;
using namespace mflow::metrics;
using tensor::Shape;

namespace {

Tensor<double> rand_field(Shape s, std::uint64_t seed, double lo = 0.0, double hi = 2.0) {
  return testing::random_tensor(s, seed, lo, hi);
}

// Direct per-sample sums, written independently of the library.
struct Sums {
  double vw = 0, v2 = 0, w2 = 0, v = 0, w = 0, diff = 0;
};

Sums sums(const Tensor<double>& pred, const Tensor<double>& truth, int n) {
  Sums s;
  const std::size_t per = truth.size() / static_cast<std::size_t>(truth.shape().n);
  for (std::size_t i = static_cast<std::size_t>(n) * per; i < static_cast<std::size_t>(n + 1) * per; ++i) {
    const double a = truth[i], b = pred[i];
    s.vw += std::abs(a * b);
    s.v2 += a * a;
    s.w2 += b * b;
    s.v += std::abs(a);
    s.w += std::abs(b);
    s.diff += std::abs(a - b);
  }
  return s;
}

}  // namespace

TEST_CASE("identical fields score one") {
  const auto f = rand_field({3, 2, 8, 16}, 1);
  CHECK(dice(f, f) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(iou(f, f) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(mre(f, f) == 0.0);
}

TEST_CASE("binary half overlap") {
  Tensor<double> a({1, 1, 2, 4}), b({1, 1, 2, 4});
  // a covers columns 0..1, b columns 1..2: |A| = |B| = 4, overlap 2
  for (int r = 0; r < 2; ++r) {
    a.at(0, 0, r, 0) = a.at(0, 0, r, 1) = 1;
    b.at(0, 0, r, 1) = b.at(0, 0, r, 2) = 1;
  }
  const MetricsConfig tight{1e-14, Variant::soft_squared};
  const double d = dice(b, a, tight), j = iou(b, a, tight);
  CHECK(d == doctest::Approx(0.5));
  CHECK(j == doctest::Approx(1.0 / 3.0));
  CHECK(std::abs(d - 2 * j / (1 + j)) < 1e-9);

  // prediction covering half of the truth
  Tensor<double> c({1, 1, 2, 4});
  for (int r = 0; r < 2; ++r)
    for (int col = 0; col < 4; ++col) c.at(0, 0, r, col) = 1;
  Tensor<double> h({1, 1, 2, 4});
  for (int col = 0; col < 4; ++col) h.at(0, 0, 0, col) = 1;
  const double d2 = dice(h, c, tight), j2 = iou(h, c, tight);
  CHECK(d2 == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(j2 == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(std::abs(d2 - 2 * j2 / (1 + j2)) < 1e-9);
}

TEST_CASE("Dice and IoU are linked for binary fields") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<double> a({1, 1, 6, 6}), b({1, 1, 6, 6});
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
      b[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
    }
    a[0] = b[0] = 1.0;
    const MetricsConfig cfg{1e-14, Variant::soft_squared};
    const double d = dice(b, a, cfg), j = iou(b, a, cfg);
    CHECK(std::abs(d - 2 * j / (1 + j)) < 1e-9);
  }
}

TEST_CASE("zero prediction has relative error one") {
  const auto f = rand_field({2, 1, 4, 8}, 2, 0.1, 1.0);
  CHECK(mre(Tensor<double>(f.shape()), f) == doctest::Approx(1.0).epsilon(1e-15));
  Tensor<double> scaled = f;
  for (auto& v : scaled.values()) v *= 1.25;
  CHECK(mre(scaled, f) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("metrics match brute-force sums") {
  const Shape s{4, 2, 5, 7};
  const auto truth = rand_field(s, 5, -1, 1), pred = rand_field(s, 6, -1, 1);
  const MetricsConfig soft{1e-6, Variant::soft_squared}, lit{1e-6, Variant::paper_literal};
  const auto d = dice_per_sample(pred, truth, soft), j = iou_per_sample(pred, truth, soft);
  const auto dl = dice_per_sample(pred, truth, lit), jl = iou_per_sample(pred, truth, lit);
  const auto m = mre_per_sample(pred, truth);
  double dm = 0, jm = 0, mm = 0;
  for (int n = 0; n < 4; ++n) {
    const Sums q = sums(pred, truth, n);
    const auto k = static_cast<std::size_t>(n);
    CHECK(std::abs(d[k] - (2 * q.vw + 1e-6) / (q.v2 + q.w2 + 1e-6)) < 1e-6);
    CHECK(std::abs(j[k] - (q.vw + 1e-6) / (q.v2 + q.w2 - q.vw + 1e-6)) < 1e-6);
    CHECK(std::abs(dl[k] - (2 * q.vw + 1e-6) / (q.v + 1e-6)) < 1e-6);
    CHECK(std::abs(jl[k] - q.vw / (q.v + q.w - q.vw)) < 1e-6);
    CHECK(std::abs(m[k] - q.diff / q.v) < 1e-6);
    dm += d[k] / 4;
    jm += j[k] / 4;
    mm += m[k] / 4;
  }
  CHECK(std::abs(dice(pred, truth, soft) - dm) < 1e-12);
  CHECK(std::abs(iou(pred, truth, soft) - jm) < 1e-12);
  CHECK(std::abs(mre(pred, truth) - mm) < 1e-12);
}

TEST_CASE("soft scores are symmetric and bounded") {
  for (std::uint64_t seed = 10; seed < 20; ++seed) {
    const auto a = rand_field({2, 1, 6, 6}, seed, -2, 2), b = rand_field({2, 1, 6, 6}, seed + 100, -2, 2);
    CHECK(dice(a, b) == doctest::Approx(dice(b, a)).epsilon(1e-14));
    CHECK(iou(a, b) == doctest::Approx(iou(b, a)).epsilon(1e-14));
    for (double v : dice_per_sample(a, b, {})) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    CHECK(iou(a, b) <= dice(a, b));
  }
}

TEST_CASE("literal-variant IoU of two empty fields is one") {
  const Tensor<double> z({1, 1, 3, 3});
  const MetricsConfig lit{1e-6, Variant::paper_literal};
  CHECK(iou(z, z, lit) == 1.0);
  CHECK(dice(z, z, lit) == doctest::Approx(1.0));
}

TEST_CASE("error cases") {
  const auto f = rand_field({2, 1, 4, 4}, 7);
  CHECK_THROWS_AS(dice(f, rand_field({2, 1, 4, 5}, 8)), Error);
  Tensor<double> zero_second = f;
  for (std::size_t i = 16; i < 32; ++i) zero_second[i] = 0;
  try {
    (void)mre(f, zero_second);
    FAIL("expected ZeroReference");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ZeroReference);
  }
  CHECK(parse_variant("paper_literal") == Variant::paper_literal);
  CHECK(parse_variant(variant_name(Variant::soft_squared)) == Variant::soft_squared);
  CHECK_THROWS_AS(parse_variant("hard"), Error);
  CHECK_THROWS_AS((MetricsConfig{-1.0, Variant::soft_squared}.validate()), Error);
}

TEST_CASE("float and double agree") {
  const auto a = rand_field({2, 2, 8, 8}, 9), b = rand_field({2, 2, 8, 8}, 10);
  CHECK(dice(a.cast<float>(), b.cast<float>()) == doctest::Approx(dice(a, b)).epsilon(1e-6));
  CHECK(mre(a.cast<float>(), b.cast<float>()) == doctest::Approx(mre(a, b)).epsilon(1e-6));
}
