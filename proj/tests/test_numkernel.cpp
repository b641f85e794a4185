#include <cmath>
#include <random>

#include "avsink/errors.hpp"
#include "avsink/numkernel.hpp"
#include "doctest.h"

using namespace avsink;

namespace {
Vec vec(std::initializer_list<double> v) {
  Vec out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}
void check_close(const Vec& got, std::initializer_list<double> want, double tol) {
  REQUIRE(got.size() == static_cast<Eigen::Index>(want.size()));
  Eigen::Index i = 0;
  for (double w : want) {
    CHECK(got[i] == doctest::Approx(w).epsilon(tol));
    ++i;
  }
}
}  // namespace

TEST_CASE("softmax analytic cases") {
  const Vec a = softmax(vec({0, 0}));
  CHECK(a[0] == 0.5);
  CHECK(a[1] == 0.5);
  const Vec b = softmax(vec({std::log(2.0), 0}));
  CHECK(b[0] == doctest::Approx(2.0 / 3).epsilon(1e-15));
  CHECK(b[1] == doctest::Approx(1.0 / 3).epsilon(1e-15));
  const Vec c = softmax(vec({1000, 1000, 999}));
  CHECK(all_finite(c));
  CHECK(c.sum() == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("softmax and log_softmax match numpy reference") {
  // tests/oracles/reference_values.py
  check_close(softmax(vec({1.5, -0.25, 3.0, 0.0, -2.0})),
              {0.16923937145724752, 0.02940939296520061, 0.75847824133083008, 0.037762408056675245,
               0.0051105861900466896},
              1e-14);
  check_close(log_softmax(vec({1.5, -0.25, 3.0, 0.0, -2.0})),
              {-1.7764411670508544, -3.5264411670508542, -0.27644116705085442, -3.2764411670508542,
               -5.2764411670508542},
              1e-14);
  check_close(softmax(vec({1000, 1000, 999})), {0.42231879825151819, 0.42231879825151819, 0.15536240349696362},
              1e-14);
}

TEST_CASE("log_softmax basics") {
  const Vec a = log_softmax(vec({0, 0}));
  CHECK(a[0] == doctest::Approx(-std::log(2.0)).epsilon(1e-15));
  const Vec b = log_softmax(vec({std::log(2.0), 0}));
  CHECK(b[0] == doctest::Approx(std::log(2.0 / 3)).epsilon(1e-14));
  CHECK(b[1] == doctest::Approx(std::log(1.0 / 3)).epsilon(1e-14));
}

TEST_CASE("non-finite input is rejected") {
  const double inf = std::numeric_limits<double>::infinity();
  CHECK_THROWS_WITH_AS(softmax(vec({1, NAN})), "non-finite input", DataError);
  CHECK_THROWS_AS(softmax(vec({inf, 0})), DataError);
  CHECK_THROWS_AS(log_softmax(vec({-inf, 0})), DataError);
}

TEST_CASE("rms_norm values") {
  const Vec a = rms_norm(vec({3, 4}), vec({1, 1}), 0.0);
  CHECK(a[0] == doctest::Approx(3 / std::sqrt(12.5)).epsilon(1e-15));
  CHECK(a[1] == doctest::Approx(4 / std::sqrt(12.5)).epsilon(1e-15));
  CHECK(a[0] == doctest::Approx(0.84853).epsilon(1e-5));
  const Vec z = rms_norm(Vec::Zero(5).eval(), Vec::Ones(5).eval(), 1e-6);
  CHECK(z.cwiseAbs().maxCoeff() == 0.0);
  check_close(rms_norm(vec({0.5, -1.25, 2.0, 4.0}), vec({1.0, 0.5, 2.0, -1.0}), 1e-6),
              {0.21411507139654912, -0.26764383924568641, 1.7129205711723929, -1.7129205711723929}, 1e-14);
  check_close(rms_norm(vec({30.0, -0.1, 0.2, 0.05, -0.3, 0.1}), Vec::Ones(6).eval(), 1e-6),
              {2.4492822347753673, -0.0081642741159178925, 0.016328548231835785, 0.0040821370579589462,
               -0.024492822347753674, 0.0081642741159178925},
              1e-14);
  CHECK_THROWS_AS(rms_norm(vec({1, 2}), vec({1, 2, 3}), 0.0), DataError);
}

TEST_CASE("property: shift invariance, scale invariance, normalization") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd(0, 4);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + trial % 9;
    Vec v(n);
    for (int i = 0; i < n; ++i) v[i] = nd(rng);
    const double c = nd(rng) * 10;
    const Vec shifted = (v.array() + c).matrix();
    CHECK((log_softmax(shifted) - log_softmax(v)).cwiseAbs().maxCoeff() < 1e-11);
    const Vec p = softmax(v);
    CHECK(std::abs(p.sum() - 1) < 1e-12);
    CHECK(p.minCoeff() >= 0);
    const double scale = std::abs(c) + 0.1;
    const Vec g = Vec::Ones(n);
    CHECK((rms_norm((v * scale).eval(), g, 0.0) - rms_norm(v, g, 0.0)).cwiseAbs().maxCoeff() < 1e-12);
    const Vec r = rms_norm(v, g, 0.0);
    CHECK(std::sqrt(r.squaredNorm() / n) == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("matmul helpers agree with Eigen products") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1, 1);
  Mat a(7, 5), b(4, 5), c(5, 3);
  for (auto* m : {&a, &b, &c})
    for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = u(rng);
  a.row(2).setZero();
  CHECK((matmul_nt(a, b) - a * b.transpose()).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((matmul(a, c) - a * c).cwiseAbs().maxCoeff() < 1e-14);
  CHECK(matmul_nt(a, b).row(2).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("templated on scalar") {
  Eigen::VectorXf f(3);
  f << 1.f, 2.f, 3.f;
  const VectorX<float> p = softmax<float>(VectorX<float>(f));
  CHECK(p.sum() == doctest::Approx(1.0f));
}
