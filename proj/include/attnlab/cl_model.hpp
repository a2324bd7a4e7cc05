#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "attnlab/attention_core.hpp"
#include "attnlab/synth_data.hpp"

namespace attnlab {

// How the contrastive gradient expectation is evaluated:
//   ExactTiny   - every (anchor cluster, view mask, view mask) triple is enumerated
//                 together with the binomial count of same-cluster negatives; needs
//                 small P, a fixed latent scale, and no per-patch noise.
//   MonteCarlo  - sampled batches of fresh views and negatives.
enum class ClRunMode { ExactTiny, MonteCarlo };

// Knobs of the contrastive objective. Negative values resolve to data-shaped
// defaults: tau = 1/ln d, lambda = 1/(P ln P), sigma0Sq = 1/d (MonteCarlo) or 0
// (ExactTiny, which is noiseless by construction).
struct ClOptions {
  double gamma0 = 0.5;    // masking ratio of the two augmented views
  int negatives = 32;     // fresh unmasked contrast samples per batch
  double tau = -1.0;      // temperature of the score softmax over similarities
  double lambda = -1.0;   // weight-decay strength on Q
  double sigma0Sq = -1.0; // per-coordinate variance of the additive patch noise
  ClRunMode mode = ClRunMode::ExactTiny;
  int batches = 256;                // MonteCarlo sample count
  double closedFormTol = 1e-9;      // max allowed gap between gradient paths
};

struct ClResolved {
  double tau = 0.0;
  double lambda = 0.0;
  double sigma0Sq = 0.0;
};

ClResolved resolveClOptions(const DataSpec& spec, const ClOptions& opts);

// One concrete batch: two independently masked views of the same (optionally
// noisy) sample, plus unmasked fresh negatives. Plain data; hand-buildable.
struct ClBatch {
  Eigen::MatrixXd xPlus;                   // d x P, query-branch view
  Eigen::MatrixXd xPlusPlus;               // d x P, comparison view of the same draw
  std::vector<Eigen::MatrixXd> negatives;  // each d x P, unmasked
  int clusterId = 0;
  std::vector<int> negativeClusters;
};

// Draws anchor + views + negatives. The two views share the latent scales and
// the noise of the anchor draw; negatives are fully independent.
ClBatch makeClBatch(const DataSpec& spec, const ClOptions& opts, Rng& rng);

// Loss breakdown on one concrete batch. lp and ls form a probability vector:
// lp + sum(ls) == 1 up to rounding.
struct ClLossReport {
  double infoNce = 0.0;      // -tau * log of the positive's softmax share
  double regularizer = 0.0;  // (lambda/2) * squared Frobenius norm of Q
  double total = 0.0;
  double lp = 0.0;              // positive share
  std::vector<double> ls;       // one share per negative
};

struct ClGradient {
  // Descent direction: data term plus the weight-decay pull -lambda*Q.
  Eigen::MatrixXd G;
  // Feature projections of the data term alone (position row x feature column
  // block of G + lambda*Q), P x K*N.
  Eigen::MatrixXd alpha;
  // Independent area-aggregated re-evaluation of those projections; populated
  // by the enumerated mode, zero-sized under MonteCarlo.
  Eigen::MatrixXd alphaClosedForm;
  double alphaClosedFormGap = 0.0;
  double loss = 0.0;        // expected InfoNCE (no regularizer)
  double lossStdErr = 0.0;  // MonteCarlo only
  double tau = 0.0;         // resolved values used
  double lambda = 0.0;
  ClRunMode mode = ClRunMode::ExactTiny;
  long samples = 0;  // enumerated triples or MonteCarlo batches
};

// Pooled representation: attention-weighted average of the contents over all
// query-key pairs, (1/P) sum_{p,q} score(p,q) X_q. Queries are bare positions.
Eigen::VectorXd clForward(const DataSpec& spec, const Eigen::MatrixXd& contents,
                          const Eigen::MatrixXd& Q);

// Inner product of the two pooled representations. Numerically symmetric; the
// one-sided-gradient contract binds clGradient, not this value.
double clSimilarity(const DataSpec& spec, const Eigen::MatrixXd& xa, const Eigen::MatrixXd& xb,
                    const Eigen::MatrixXd& Q);

ClLossReport clLoss(const DataSpec& spec, const ClBatch& batch, const Eigen::MatrixXd& Q,
                    double tau, double lambda);

// Expected descent direction of the regularized objective. The gradient flows
// only through the query-branch representation; the comparison branch (second
// view and negatives) is held fixed. In the enumerated mode the feature
// projections are recomputed through an independent area decomposition and the
// two paths must agree within closedFormTol, else a hard error.
ClGradient clGradient(const DataSpec& spec, const Eigen::MatrixXd& Q, const ClOptions& opts,
                      Rng* rng = nullptr);

// Enumerated expected InfoNCE with the comparison branch evaluated at frozenQ
// while the query branch uses Q. Finite differences of this objective in Q at
// Q == frozenQ recover clGradient's data term.
double clPseudoLoss(const DataSpec& spec, const Eigen::MatrixXd& Q, const Eigen::MatrixXd& frozenQ,
                    const ClOptions& opts);

// One ascent step along the descent direction: Q += eta * G. Throws on
// negative eta and when any weight entry leaves [-1e6, 1e6] (divergence).
ClGradient clStep(AttentionWeights& w, const DataSpec& spec, double eta, const ClOptions& opts,
                  Rng* rng = nullptr);

}  // namespace attnlab
