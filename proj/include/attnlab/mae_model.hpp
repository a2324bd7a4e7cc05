#pragma once

#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "attnlab/attention_core.hpp"
#include "attnlab/oracle.hpp"
#include "attnlab/synth_data.hpp"

namespace attnlab {

struct MaeOptions {
  double gamma = 0.5;
  RunMode mode = RunMode::Exact;
  int batch = 256;              // Monte Carlo samples per evaluation
  bool reconstructAll = false;  // reconstruct every patch instead of masked ones only
  double closedFormTol = 1e-9;       // cross-check tolerance between gradient paths
  double decompositionTol = 1e-10;
};

// Expected masked-reconstruction loss and its companions.
//   total            = sum over patches of perPatch, 1/2 E[sum_{p in M} |F_p - X_p|^2]
//   decomposedTotal  = the same expectation assembled from unmasked area attentions
//   lowBoundPerPatch = unavoidable own-area-fully-masked error
//   eventLoss        = loss restricted to "own area kept at least one unmasked patch"
//   totalStdErr      = Monte Carlo standard error of total (0 in exact mode)
struct LossReport {
  double total = 0.0;
  double decomposedTotal = 0.0;
  Eigen::VectorXd perPatch;
  Eigen::VectorXd lowBoundPerPatch;
  Eigen::VectorXd eventLoss;
  double totalStdErr = 0.0;
};

// Ascent direction G = -dL/dQ plus its correlation-table decompositions.
// alpha/beta/betaK come from the general-form arithmetic (alpha and beta are exact
// block reads of G); alphaClosedForm/betaClosedForm re-derive the same coefficients from
// area attentions by the closed-form case split, as an independent path.
struct MaeGradient {
  Eigen::MatrixXd G;
  Eigen::MatrixXd alpha;  // P x K*N
  Eigen::MatrixXd beta;   // P x P
  std::vector<Eigen::MatrixXd> betaK;
  Eigen::MatrixXd alphaClosedForm;
  Eigen::MatrixXd betaClosedForm;
  double alphaClosedFormGap = 0.0;  // max |alpha - alphaClosedForm|
  double betaClosedFormGap = 0.0;
  RunMode mode = RunMode::Exact;  // how the expectation was estimated
  int samples = 0;                // enumeration assignments or Monte Carlo draws
};

// Reconstruction of one masked sample: column p is sum_q score(p,q) * maskedContent_q.
Eigen::MatrixXd maeForward(const DataSpec& spec, const MaskedSample& masked,
                           const Eigen::MatrixXd& Q);

LossReport maeLoss(const DataSpec& spec, const Eigen::MatrixXd& Q, const MaeOptions& opts,
                   Rng* rng = nullptr);

// Fast scalar loss: identical value to maeLoss().total (area-coefficient arithmetic),
// suitable as a finite-difference target.
double maeLossTotal(const DataSpec& spec, const Eigen::MatrixXd& Q, const MaeOptions& opts,
                    Rng* rng = nullptr);

// Throws if the closed-form coefficients disagree with the general path beyond
// opts.closedFormTol (a formula-transcription bug, not a numerical condition).
MaeGradient maeGradient(const DataSpec& spec, const Eigen::MatrixXd& Q, const MaeOptions& opts,
                        Rng* rng = nullptr);

// Q <- Q + eta * G; throws on divergence (any |entry| > 1e6). Returns the gradient
// so trainers can log correlations without recomputing.
MaeGradient maeStep(AttentionWeights& w, const DataSpec& spec, double eta,
                    const MaeOptions& opts, Rng* rng = nullptr);

// Largest power of two whose first `probeSteps` exact steps keep the loss
// non-increasing, scanned over 2^[-6, 10].
double bisectEta(const DataSpec& spec, const MaeOptions& opts, int probeSteps = 50);

}  // namespace attnlab
