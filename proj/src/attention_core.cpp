#include "attnlab/attention_core.hpp"

#include <cmath>
#include <stdexcept>

namespace attnlab {

Eigen::MatrixXd softmaxRows(const Eigen::MatrixXd& logits) {
  if (!logits.allFinite()) throw std::runtime_error("softmaxRows: non-finite logits");
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    Eigen::ArrayXd e = (logits.row(i).array() - m).exp();
    out.row(i) = (e / e.sum()).matrix();
  }
  return out;
}

namespace {

AttentionProfile profileFromScores(const DataSpec& spec, int clusterId, Eigen::MatrixXd score,
                                   const std::vector<std::uint8_t>* unmasked) {
  AttentionProfile prof;
  prof.score = std::move(score);
  prof.areaScore = Eigen::MatrixXd::Zero(spec.P, spec.N);
  prof.unmaskedAreaAttn = Eigen::MatrixXd::Zero(spec.P, spec.N);
  for (int q = 0; q < spec.P; ++q) {
    const int a = spec.areaOf[clusterId][q];
    prof.areaScore.col(a) += prof.score.col(q);
    if (unmasked == nullptr || (*unmasked)[q]) prof.unmaskedAreaAttn.col(a) += prof.score.col(q);
  }
  return prof;
}

}  // namespace

AttentionProfile maeScores(const DataSpec& spec, const MaskedSample& masked,
                           const Eigen::MatrixXd& Q) {
  if (Q.rows() != spec.d || Q.cols() != spec.d)
    throw std::invalid_argument("maeScores: Q dimension mismatch");
  Eigen::MatrixXd Xt = masked.maskedContents(spec);  // keys/queries: masked content + position
  for (int p = 0; p < spec.P; ++p) Xt(spec.posCoord(p), p) += 1.0;
  const Eigen::MatrixXd logits = Xt.transpose() * Q * Xt;
  return profileFromScores(spec, masked.base.clusterId, softmaxRows(logits), &masked.unmasked);
}

AttentionProfile clScores(const DataSpec& spec, const Eigen::MatrixXd& contents, int clusterId,
                          const Eigen::MatrixXd& Q, const std::vector<std::uint8_t>* unmasked) {
  if (Q.rows() != spec.d || Q.cols() != spec.d)
    throw std::invalid_argument("clScores: Q dimension mismatch");
  // Query p is its positional encoding: logit(p, q) = e_p^T Q X_q.
  const Eigen::MatrixXd posRows = Q.middleRows(spec.K * spec.N, spec.P);
  const Eigen::MatrixXd logits = posRows * contents;
  return profileFromScores(spec, clusterId, softmaxRows(logits), unmasked);
}

CorrelationSnapshot extractCorrelations(const Eigen::MatrixXd& Q, const DataSpec& spec) {
  CorrelationSnapshot snap;
  const int F = spec.K * spec.N;
  snap.fp = Q.block(F, 0, spec.P, F);
  snap.pp = Q.block(F, F, spec.P, spec.P);
  return snap;
}

}  // namespace attnlab
