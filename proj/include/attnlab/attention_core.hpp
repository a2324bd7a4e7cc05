#pragma once

#include <vector>

#include <Eigen/Dense>

#include "attnlab/synth_data.hpp"

namespace attnlab {

// The trainable matrix. Starts at zero so every correlation starts at zero.
struct AttentionWeights {
  Eigen::MatrixXd Q;
  long step = 0;

  explicit AttentionWeights(const DataSpec& spec) : Q(Eigen::MatrixXd::Zero(spec.d, spec.d)) {}
};

// Correlation read-outs of Q against the stored bases.
//   fp(p, k*N+m) = e_p^T Q v_{k,m}      (feature-position)
//   pp(p, q)     = e_p^T Q e_q          (position-position)
// ppK holds the per-cluster position-position pieces; they are trainer-accumulated
// (running sum of eta * per-cluster gradient parts), not re-derivable from Q.
struct CorrelationSnapshot {
  long step = 0;
  Eigen::MatrixXd fp;
  Eigen::MatrixXd pp;
  std::vector<Eigen::MatrixXd> ppK;
};

// One attention evaluation on one sample.
//   score: P x P softmax rows.
//   areaScore(p, m): total mass query p sends to area m of the sample's cluster.
//   unmaskedAreaAttn(p, m): mass restricted to unmasked patches of that area
//   (equals areaScore when nothing is masked).
struct AttentionProfile {
  Eigen::MatrixXd score;
  Eigen::MatrixXd areaScore;
  Eigen::MatrixXd unmaskedAreaAttn;
};

// Row-wise softmax with max-subtraction; throws on non-finite logits.
Eigen::MatrixXd softmaxRows(const Eigen::MatrixXd& logits);

// Masked-reconstruction attention: queries and keys are masked-content + position,
// so masked patches keep their positional encoding in the keys.
AttentionProfile maeScores(const DataSpec& spec, const MaskedSample& masked,
                           const Eigen::MatrixXd& Q);

// Contrastive attention: queries are bare positions, keys are bare contents.
// clusterId resolves which partition the area aggregates use.
AttentionProfile clScores(const DataSpec& spec, const Eigen::MatrixXd& contents, int clusterId,
                          const Eigen::MatrixXd& Q, const std::vector<std::uint8_t>* unmasked = nullptr);

// Exact block reads of Q; ppK is returned zero-sized (it is tracker state).
CorrelationSnapshot extractCorrelations(const Eigen::MatrixXd& Q, const DataSpec& spec);

}  // namespace attnlab
