#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "attnlab/oracle.hpp"
#include "attnlab/synth_data.hpp"

using namespace attnlab;

namespace {

DataSpec microSpec(int P, int c1, int cs, int K = 1, ZLawKind z = ZLawKind::PointMass) {
  ExperimentConfig c;
  c.P = P;
  c.K = K;
  c.c1 = c1;
  c.cs = cs;
  c.zLaw = (z == ZLawKind::PointMass) ? ZLawConfig{ZLawKind::PointMass, 1.0, 1.0}
                                      : ZLawConfig{ZLawKind::Uniform, 0.8, 1.2};
  return buildSpec(c);
}

}  // namespace

TEST_CASE("enumeration weights sum to one and visit every mask") {
  const DataSpec spec = microSpec(8, 4, 2, 2, ZLawKind::Uniform);
  KahanSum w;
  long count = 0;
  forEachMaskAssignment(spec, 0.5,
                        [&](int, const std::vector<std::uint8_t>&, const std::vector<double>&,
                            double weight) {
                          w.add(weight);
                          ++count;
                        });
  CHECK(w.value() == doctest::Approx(1.0).epsilon(1e-13));
  CHECK(count == 70 * 2 * 27);  // C(8,4) masks x 2 clusters x 3^3 latent nodes
}

TEST_CASE("expectation of a constant is the constant") {
  const DataSpec spec = microSpec(8, 4, 2);
  const double v = enumerateExpectation(
      spec, 0.5, [](int, const std::vector<std::uint8_t>&, const std::vector<double>&) {
        return 3.25;
      });
  CHECK(v == doctest::Approx(3.25).epsilon(1e-13));
}

TEST_CASE("probability that a 2-patch area is fully masked equals 15/70") {
  const DataSpec spec = microSpec(8, 4, 2);
  const auto& area = spec.partitions[0][1];
  const double v = enumerateExpectation(
      spec, 0.5,
      [&](int, const std::vector<std::uint8_t>& unmasked, const std::vector<double>&) {
        int u = 0;
        for (int p : area) u += unmasked[p];
        return u == 0 ? 1.0 : 0.0;
      });
  CHECK(v == doctest::Approx(15.0 / 70.0).epsilon(1e-13));
  CHECK(hypergeometricPmf(8, 2, 4, 0) == doctest::Approx(15.0 / 70.0).epsilon(1e-12));
}

TEST_CASE("enumeration cap rejects oversized instances") {
  ExperimentConfig c;
  c.P = 24;
  c.K = 1;
  c.kappaC = 0.9;
  c.kappaS = 0.35;
  const DataSpec spec = buildSpec(c);
  CHECK_THROWS_AS(enumerateExpectation(spec, 0.5,
                                       [](int, const std::vector<std::uint8_t>&,
                                          const std::vector<double>&) { return 0.0; }),
                  std::invalid_argument);
}

TEST_CASE("compensated summation is enumeration-order invariant below 1e-13") {
  const DataSpec spec = microSpec(8, 4, 2, 1, ZLawKind::Uniform);
  std::vector<double> terms;
  forEachMaskAssignment(spec, 0.5,
                        [&](int, const std::vector<std::uint8_t>& unmasked,
                            const std::vector<double>& z, double w) {
                          double v = 0.0;
                          for (std::size_t p = 0; p < unmasked.size(); ++p)
                            v += unmasked[p] ? z[0] * z[1] : -z[2] * z[2];
                          terms.push_back(w * v);
                        });
  KahanSum base;
  for (double t : terms) base.add(t);
  std::mt19937_64 rng(123);
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(terms.begin(), terms.end(), rng);
    KahanSum shuffled;
    for (double t : terms) shuffled.add(t);
    CHECK(std::abs(shuffled.value() - base.value()) < 1e-13);
  }
}

TEST_CASE("hypergeometric pmf sums to one and matches the masking law empirically") {
  const int P = 8, C = 2, nU = 4;
  double total = 0.0;
  for (int u = 0; u <= C; ++u) total += hypergeometricPmf(P, C, nU, u);
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));

  const DataSpec spec = microSpec(8, 4, 2);
  Rng rng = makeRng(31, Stream::Masking);
  Rng srng = makeRng(31, Stream::Sampling);
  const int draws = 20000;
  std::vector<double> observed(C + 1, 0.0);
  const auto& area = spec.partitions[0][1];
  for (int i = 0; i < draws; ++i) {
    const Sample s = drawSample(spec, srng);
    const MaskedSample ms = applyMask(s, spec, 0.5, rng);
    int u = 0;
    for (int p : area) u += ms.unmasked[p];
    observed[u] += 1.0;
  }
  std::vector<double> expected(C + 1);
  for (int u = 0; u <= C; ++u) expected[u] = draws * hypergeometricPmf(P, C, nU, u);
  CHECK(chiSquarePValue(observed, expected) > 0.01);
}

TEST_CASE("unavoidable-error bound: deterministic and quadrature latent laws") {
  // 1/2 (E[z^2] + low^2/(N-1)) * P(area fully masked), N=3, C=2 at P=8, gamma=1/2.
  const DataSpec unit = microSpec(8, 4, 2);
  const int pLocal = unit.partitions[0][1][0];
  CHECK(lowBound(unit, 0.5, pLocal) == doctest::Approx(9.0 / 56.0).epsilon(1e-12));

  const DataSpec quad = microSpec(8, 4, 2, 1, ZLawKind::Uniform);
  const int qLocal = quad.partitions[0][1][0];
  CHECK(lowBound(quad, 0.5, qLocal) == doctest::Approx(1.0 / 7.0).epsilon(1e-12));
}

TEST_CASE("bound vanishes when masking cannot cover an area") {
  // gamma = 1/4 at P = 8 masks 2 patches: a 4-patch area can never be fully masked.
  const DataSpec spec = microSpec(8, 4, 2);
  const int pGlobal = spec.partitions[0][0][0];
  CHECK(lowBound(spec, 0.25, pGlobal) == 0.0);
}

TEST_CASE("finite differences recover known gradients") {
  Eigen::MatrixXd Q = Eigen::MatrixXd::Random(5, 5);
  const auto quadratic = [](const Eigen::MatrixXd& M) { return 0.5 * M.squaredNorm(); };
  const Eigen::MatrixXd g1 = fdGradient(quadratic, Q, 1e-5);
  CHECK((g1 - Q).cwiseAbs().maxCoeff() < 1e-8);

  Eigen::MatrixXd A = Eigen::MatrixXd::Random(5, 5);
  const auto linear = [&A](const Eigen::MatrixXd& M) { return (A.transpose() * M).trace(); };
  const Eigen::MatrixXd g2 = fdGradient(linear, Q, 1e-5);
  CHECK((g2 - A).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("finite differences reject a non-deterministic objective") {
  Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(2, 2);
  int calls = 0;
  const auto flaky = [&calls](const Eigen::MatrixXd&) { return static_cast<double>(calls++); };
  CHECK_THROWS_AS(fdGradient(flaky, Q, 1e-5), std::invalid_argument);
}
