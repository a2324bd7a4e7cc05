#include "attnlab/oracle.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include <boost/math/distributions/chi_squared.hpp>

namespace attnlab {

long long binomial(int n, int k) {
  if (k < 0 || k > n) return 0;
  k = std::min(k, n - k);
  unsigned __int128 r = 1;  // intermediates exceed 64 bits well before the result does
  for (int i = 1; i <= k; ++i) r = r * static_cast<unsigned>(n - k + i) / static_cast<unsigned>(i);
  if (r > static_cast<unsigned __int128>(std::numeric_limits<long long>::max()))
    throw std::overflow_error("binomial: result exceeds 64 bits");
  return static_cast<long long>(r);
}

void forEachMaskAssignment(
    const DataSpec& spec, double gamma,
    const std::function<void(int, const std::vector<std::uint8_t>&, const std::vector<double>&,
                             double)>& fn) {
  const int P = spec.P;
  const int m = static_cast<int>(std::lround(gamma * P));
  if (m <= 0 || m >= P)
    throw std::invalid_argument("forEachMaskAssignment: round(gamma*P) must mask some but not all patches");
  // Cap check in log space first, so huge instances never touch exact arithmetic.
  const double logMasks =
      std::lgamma(P + 1.0) - std::lgamma(m + 1.0) - std::lgamma(P - m + 1.0);
  if (logMasks > std::log(100000.0 / spec.K) + 1e-9 ||
      binomial(P, m) * static_cast<long long>(spec.K) > 100000)
    throw std::invalid_argument("forEachMaskAssignment: enumeration cap exceeded (C(P,|M|)*K > 1e5)");
  const long long nMasks = binomial(P, m);

  // Latent quadrature: product rule over the N areas.
  const auto nodes = spec.zLaw.quadrature();
  const int R = static_cast<int>(nodes.size());
  std::vector<std::vector<double>> zCombos;
  std::vector<double> zWeights;
  {
    std::vector<int> idx(spec.N, 0);
    while (true) {
      std::vector<double> z(spec.N);
      double w = 1.0;
      for (int a = 0; a < spec.N; ++a) {
        z[a] = nodes[idx[a]].first;
        w *= nodes[idx[a]].second;
      }
      zCombos.push_back(std::move(z));
      zWeights.push_back(w);
      int a = spec.N - 1;
      while (a >= 0 && ++idx[a] == R) idx[a--] = 0;
      if (a < 0) break;
    }
  }

  const double maskWeight = 1.0 / (static_cast<double>(nMasks) * spec.K);
  std::vector<int> mask(m);
  for (int i = 0; i < m; ++i) mask[i] = i;  // first combination in lexicographic order
  std::vector<std::uint8_t> unmasked(P);
  while (true) {
    unmasked.assign(P, 1);
    for (int i : mask) unmasked[i] = 0;
    for (int k = 0; k < spec.K; ++k)
      for (std::size_t c = 0; c < zCombos.size(); ++c)
        fn(k, unmasked, zCombos[c], maskWeight * zWeights[c]);
    // Advance to the next combination.
    int i = m - 1;
    while (i >= 0 && mask[i] == P - m + i) --i;
    if (i < 0) break;
    ++mask[i];
    for (int j = i + 1; j < m; ++j) mask[j] = mask[j - 1] + 1;
  }
}

double enumerateExpectation(
    const DataSpec& spec, double gamma,
    const std::function<double(int, const std::vector<std::uint8_t>&, const std::vector<double>&)>&
        fn) {
  KahanSum acc;
  forEachMaskAssignment(spec, gamma,
                        [&](int k, const std::vector<std::uint8_t>& unmasked,
                            const std::vector<double>& z,
                            double w) { acc.add(w * fn(k, unmasked, z)); });
  return acc.value();
}

double hypergeometricPmf(int P, int areaSize, int nUnmasked, int u) {
  if (u < 0 || u > areaSize || u > nUnmasked) return 0.0;
  if (nUnmasked - u > P - areaSize) return 0.0;
  const double logPmf = std::lgamma(areaSize + 1.0) - std::lgamma(u + 1.0) -
                        std::lgamma(areaSize - u + 1.0) + std::lgamma(P - areaSize + 1.0) -
                        std::lgamma(nUnmasked - u + 1.0) -
                        std::lgamma(P - areaSize - (nUnmasked - u) + 1.0) -
                        (std::lgamma(P + 1.0) - std::lgamma(nUnmasked + 1.0) -
                         std::lgamma(P - nUnmasked + 1.0));
  return std::exp(logPmf);
}

double chiSquarePValue(const std::vector<double>& observed, const std::vector<double>& expected) {
  if (observed.size() != expected.size() || observed.empty())
    throw std::invalid_argument("chiSquarePValue: size mismatch");
  double stat = 0.0;
  int df = -1;  // categories minus one
  for (std::size_t i = 0; i < observed.size(); ++i) {
    if (expected[i] <= 0.0) {
      if (observed[i] > 0.0) throw std::invalid_argument("chiSquarePValue: observation in zero-probability cell");
      continue;
    }
    stat += (observed[i] - expected[i]) * (observed[i] - expected[i]) / expected[i];
    ++df;
  }
  if (df < 1) throw std::invalid_argument("chiSquarePValue: fewer than two support cells");
  boost::math::chi_squared dist(df);
  return boost::math::cdf(boost::math::complement(dist, stat));
}

double lowBound(const DataSpec& spec, double gamma, int p) {
  const int m = static_cast<int>(std::lround(gamma * spec.P));
  const int nUnmasked = spec.P - m;
  double pAllMasked = 0.0;
  for (int k = 0; k < spec.K; ++k) {
    const int C = spec.areaSizes[spec.areaOf[k][p]];
    pAllMasked += hypergeometricPmf(spec.P, C, nUnmasked, 0) / spec.K;
  }
  const double spread = (spec.N > 1) ? spec.zLaw.low * spec.zLaw.low / (spec.N - 1) : 0.0;
  return 0.5 * (spec.zLaw.meanSquare() + spread) * pAllMasked;
}

Eigen::MatrixXd fdGradient(const std::function<double(const Eigen::MatrixXd&)>& lossFn,
                           const Eigen::MatrixXd& Q, double h) {
  if (!(h >= 1e-7 && h <= 1e-3)) throw std::invalid_argument("fdGradient: h out of range");
  const double base = lossFn(Q);
  if (lossFn(Q) != base) throw std::invalid_argument("fdGradient: loss function is not deterministic");
  Eigen::MatrixXd g(Q.rows(), Q.cols());
  Eigen::MatrixXd Qp = Q;
  for (Eigen::Index i = 0; i < Q.rows(); ++i) {
    for (Eigen::Index j = 0; j < Q.cols(); ++j) {
      const double orig = Q(i, j);
      Qp(i, j) = orig + h;
      const double up = lossFn(Qp);
      Qp(i, j) = orig - h;
      const double down = lossFn(Qp);
      Qp(i, j) = orig;
      g(i, j) = (up - down) / (2.0 * h);
    }
  }
  return g;
}

}  // namespace attnlab
