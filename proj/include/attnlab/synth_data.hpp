#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include "attnlab/config.hpp"
#include "attnlab/rng.hpp"

namespace attnlab {

// Latent-scale law on [low, up]. Quadrature nodes let exact-mode code integrate it.
struct ZLaw {
  ZLawKind kind = ZLawKind::PointMass;
  double low = 1.0;
  double up = 1.0;

  double draw(Rng& rng) const;
  double meanSquare() const;  // E[z^2]
  // (node, weight) pairs integrating the law exactly for the polynomials we need:
  // a single point for the point mass, 3-point Gauss-Legendre for the uniform law.
  std::vector<std::pair<double, double>> quadrature() const;
};

// The clustered-patch distribution: K clusters, each partitioning the P patches
// into one dominant "global" area and equal-size "local" areas. Feature vectors
// v_{k,m} and positional encodings e_p are disjoint standard-basis blocks.
struct DataSpec {
  int P = 0;
  int K = 1;
  int N = 0;                             // areas per cluster
  std::vector<int> areaSizes;            // [C1, C2, ..., CN], identical across clusters
  std::vector<std::vector<int>> areaOf;  // areaOf[k][p] = area index of patch p (0 = global)
  std::vector<std::vector<std::vector<int>>> partitions;  // partitions[k][m] = patch ids
  double kappaC = 0.0;  // effective exponents: C1 = P^kappaC, Cs = P^kappaS
  double kappaS = 0.0;
  ZLaw zLaw;
  int d = 0;  // ambient dimension = K*N + P
  std::uint64_t seed = 0;
  bool contiguous = false;

  int featureCoord(int k, int m) const { return k * N + m; }
  int posCoord(int p) const { return K * N + p; }

  nlohmann::json toJson() const;
  static DataSpec fromJson(const nlohmann::json& j);
};

// One draw from the distribution: a cluster and one latent scale per area.
// Patch contents are z[a] * v_{k,a} for a = areaOf[k][p]; materialized on demand.
struct Sample {
  int clusterId = 0;
  std::vector<double> z;

  Eigen::MatrixXd contents(const DataSpec& spec) const;  // d x P, one column per patch
};

struct MaskedSample {
  Sample base;
  std::vector<int> maskSet;        // sorted masked patch indices, |M| = round(gamma*P)
  std::vector<std::uint8_t> unmasked;  // unmasked[p] == 1 iff p is kept

  Eigen::MatrixXd maskedContents(const DataSpec& spec) const;  // zero columns on the mask
};

struct NoisySample {
  Sample base;
  Eigen::MatrixXd noise;  // d x P, i.i.d. Gaussian per coordinate; empty => noiseless

  Eigen::MatrixXd contents(const DataSpec& spec) const;  // base contents + noise
};

// Area-size construction: C1 = round(P^kappaC), Cs = round(P^kappaS) — or explicit
// (c1, cs) for micro instances — with floor((P-C1)/Cs) local areas and the remainder
// absorbed into the last one. Rejects shapes whose global area does not dominate.
DataSpec buildSpec(const ExperimentConfig& config);

// Information gap (1 - kappaS) - 2*(1 - kappaC), from the effective exponents.
double infoGap(const DataSpec& spec);

Sample drawSample(const DataSpec& spec, Rng& rng);

MaskedSample applyMask(const Sample& sample, const DataSpec& spec, double gamma, Rng& rng);

// Two independent maskings of the same sample.
std::pair<MaskedSample, MaskedSample> augmentPair(const Sample& sample, const DataSpec& spec,
                                                  double gamma0, Rng& rng);

NoisySample addNoise(const Sample& sample, const DataSpec& spec, double sigma0Sq, Rng& rng);

}  // namespace attnlab
