#pragma once

#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "attnlab/synth_data.hpp"

namespace attnlab {

// Compensated accumulator: enumeration order must not matter at 1e-13.
struct KahanSum {
  double sum = 0.0;
  double carry = 0.0;
  void add(double x) {
    const double y = x - carry;
    const double t = sum + y;
    carry = (t - sum) - y;
    sum = t;
  }
  double value() const { return sum; }
};

long long binomial(int n, int k);

// Exact expectation driver: visits every (cluster, mask, latent quadrature node)
// assignment with its probability weight. unmasked[p] == 1 iff p is kept; z has one
// latent value per area. Weights sum to 1. Throws if C(P, round(gamma*P))*K exceeds
// the enumeration cap of 1e5.
void forEachMaskAssignment(
    const DataSpec& spec, double gamma,
    const std::function<void(int k, const std::vector<std::uint8_t>& unmasked,
                             const std::vector<double>& z, double weight)>& fn);

// Kahan-summed exact expectation of a scalar per-assignment function.
double enumerateExpectation(
    const DataSpec& spec, double gamma,
    const std::function<double(int k, const std::vector<std::uint8_t>& unmasked,
                               const std::vector<double>& z)>& fn);

// P(|U ∩ area| = u) when |U| = nUnmasked patches of P are kept and the area has
// `areaSize` patches: the without-replacement count law.
double hypergeometricPmf(int P, int areaSize, int nUnmasked, int u);

// Pearson goodness-of-fit p-value of observed counts against expected counts.
double chiSquarePValue(const std::vector<double>& observed, const std::vector<double>& expected);

// Unavoidable per-patch reconstruction error: the own-area-fully-masked event,
// priced at 1/2 (E[z^2] + low^2/(N-1)) and averaged over the cluster draw.
double lowBound(const DataSpec& spec, double gamma, int p);

// Central finite differences of a deterministic scalar function of Q.
// Rejects loss functions that do not reproduce their value on re-evaluation.
Eigen::MatrixXd fdGradient(const std::function<double(const Eigen::MatrixXd&)>& lossFn,
                           const Eigen::MatrixXd& Q, double h = 1e-5);

}  // namespace attnlab
