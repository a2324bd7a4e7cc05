#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "attnlab/attention_core.hpp"
#include "attnlab/synth_data.hpp"

using namespace attnlab;

namespace {

ExperimentConfig sizeConfig(int P, int c1, int cs, int K = 1) {
  ExperimentConfig c;
  c.P = P;
  c.K = K;
  c.c1 = c1;
  c.cs = cs;
  return c;
}

// Fixed z == 1 so key contents are bare feature vectors where a test needs that.
ExperimentConfig pointMassConfig(int P, int c1, int cs, int K = 1) {
  ExperimentConfig c = sizeConfig(P, c1, cs, K);
  c.zLaw.kind = ZLawKind::PointMass;
  c.zLaw.low = 1.0;
  c.zLaw.up = 1.0;
  return c;
}

Eigen::MatrixXd randomMatrix(int rows, int cols, std::uint64_t seed, double scale) {
  Rng rng = makeRng(seed, Stream::OracleProbe);
  std::normal_distribution<double> gauss(0.0, scale);
  Eigen::MatrixXd M(rows, cols);
  for (Eigen::Index i = 0; i < M.rows(); ++i)
    for (Eigen::Index j = 0; j < M.cols(); ++j) M(i, j) = gauss(rng);
  return M;
}

Eigen::VectorXd unitVector(int d, int coord) {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(d);
  v(coord) = 1.0;
  return v;
}

}  // namespace

TEST_CASE("trainable weights start at zero") {
  const DataSpec spec = buildSpec(sizeConfig(10, 4, 3));
  AttentionWeights w(spec);
  CHECK(w.step == 0);
  CHECK(w.Q.rows() == spec.d);
  CHECK(w.Q.cols() == spec.d);
  CHECK(w.Q.cwiseAbs().maxCoeff() == 0.0);
  const CorrelationSnapshot snap = extractCorrelations(w.Q, spec);
  CHECK(snap.fp.cwiseAbs().maxCoeff() == 0.0);
  CHECK(snap.pp.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("softmax rows are stochastic, positive, and shift invariant") {
  const Eigen::MatrixXd logits = randomMatrix(7, 7, 11, 2.0);
  const Eigen::MatrixXd S = softmaxRows(logits);
  for (int i = 0; i < 7; ++i) {
    CHECK(std::abs(S.row(i).sum() - 1.0) <= 1e-12);
    CHECK(S.row(i).minCoeff() > 0.0);
  }

  // Adding one constant to a whole row only shifts what max-subtraction removes.
  Eigen::MatrixXd shifted = logits;
  shifted.row(3).array() += 17.25;
  const Eigen::MatrixXd S2 = softmaxRows(shifted);
  CHECK((S2 - S).cwiseAbs().maxCoeff() <= 1e-14);

  CHECK(softmaxRows(Eigen::MatrixXd::Zero(4, 4)).cwiseAbs().minCoeff() == 0.25);

  Eigen::MatrixXd bad = logits;
  bad(0, 0) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(softmaxRows(bad), std::runtime_error);
  bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(softmaxRows(bad), std::runtime_error);
}

TEST_CASE("zero weights attend uniformly in both attention variants") {
  const DataSpec spec = buildSpec(sizeConfig(8, 4, 2));
  const Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(spec.d, spec.d);
  Rng rng = makeRng(3, Stream::Sampling);
  const Sample s = drawSample(spec, rng);
  const MaskedSample ms = applyMask(s, spec, 0.5, rng);

  const AttentionProfile mae = maeScores(spec, ms, Q);
  CHECK((mae.score.array() - 1.0 / spec.P).abs().maxCoeff() <= 1e-15);
  const AttentionProfile cl = clScores(spec, s.contents(spec), s.clusterId, Q, &ms.unmasked);
  CHECK((cl.score.array() - 1.0 / spec.P).abs().maxCoeff() <= 1e-15);

  // Uniform rows put |area|/P on each area and |unmasked in area|/P on the kept part.
  for (int p = 0; p < spec.P; ++p) {
    for (int a = 0; a < spec.N; ++a) {
      int size = 0;
      int kept = 0;
      for (int q = 0; q < spec.P; ++q) {
        if (spec.areaOf[s.clusterId][q] != a) continue;
        ++size;
        kept += ms.unmasked[q];
      }
      CHECK(mae.areaScore(p, a) == doctest::Approx(double(size) / spec.P).epsilon(1e-13));
      CHECK(mae.unmaskedAreaAttn(p, a) == doctest::Approx(double(kept) / spec.P).epsilon(1e-13));
    }
  }
}

TEST_CASE("area attentions match naive summation of the softmax rows") {
  const DataSpec spec = buildSpec(sizeConfig(10, 4, 3, 2));
  const Eigen::MatrixXd Q = randomMatrix(spec.d, spec.d, 29, 0.7);
  Rng rng = makeRng(7, Stream::Sampling);
  const Sample s = drawSample(spec, rng);
  const MaskedSample ms = applyMask(s, spec, 0.5, rng);

  const AttentionProfile prof = maeScores(spec, ms, Q);
  for (int p = 0; p < spec.P; ++p) {
    CHECK(std::abs(prof.score.row(p).sum() - 1.0) <= 1e-12);
    double unmaskedTotal = 0.0;
    for (int a = 0; a < spec.N; ++a) {
      double full = 0.0;
      double kept = 0.0;
      for (int q = 0; q < spec.P; ++q) {
        if (spec.areaOf[s.clusterId][q] != a) continue;
        full += prof.score(p, q);
        if (ms.unmasked[q]) kept += prof.score(p, q);
      }
      CHECK(prof.areaScore(p, a) == full);
      CHECK(prof.unmaskedAreaAttn(p, a) == kept);
      CHECK(prof.unmaskedAreaAttn(p, a) <= prof.areaScore(p, a) + 1e-15);
      unmaskedTotal += kept;
    }
    CHECK(prof.areaScore.row(p).sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(unmaskedTotal <= 1.0 + 1e-12);
  }
}

TEST_CASE("a single feature-position coupling reproduces the direct attention formula") {
  const DataSpec spec = buildSpec(sizeConfig(8, 4, 2));  // areas [4, 2, 2], default z law
  Rng rng = makeRng(17, Stream::Sampling);
  const Sample s = drawSample(spec, rng);
  const MaskedSample ms = applyMask(s, spec, 0.5, rng);
  const int p = ms.maskSet[0];
  const int n = 1;  // couple the masked query to the first local area's feature
  const double c = std::log(double(spec.P));

  const Eigen::VectorXd ep = unitVector(spec.d, spec.posCoord(p));
  const Eigen::VectorXd v = unitVector(spec.d, spec.featureCoord(0, n));
  const Eigen::MatrixXd Q = c * ep * v.transpose();

  const AttentionProfile prof = maeScores(spec, ms, Q);

  // Independent scalar evaluation: only row p sees nonzero logits, exp(c*z_n) on
  // each unmasked patch of area n and exp(0) elsewhere.
  double denom = 0.0;
  std::vector<double> expRow(spec.P);
  for (int q = 0; q < spec.P; ++q) {
    const double feat = (ms.unmasked[q] && spec.areaOf[0][q] == n) ? s.z[n] : 0.0;
    expRow[q] = std::exp(c * feat);
    denom += expRow[q];
  }
  double attnToN = 0.0;
  for (int q = 0; q < spec.P; ++q)
    if (ms.unmasked[q] && spec.areaOf[0][q] == n) attnToN += expRow[q] / denom;

  CHECK(prof.unmaskedAreaAttn(p, n) == doctest::Approx(attnToN).epsilon(1e-12));
  for (int q = 0; q < spec.P; ++q)
    CHECK(prof.score(p, q) == doctest::Approx(expRow[q] / denom).epsilon(1e-12));

  // Every other query has an all-zero logit row, hence stays uniform.
  for (int r = 0; r < spec.P; ++r) {
    if (r == p) continue;
    CHECK((prof.score.row(r).array() - 1.0 / spec.P).abs().maxCoeff() <= 1e-15);
  }
}

TEST_CASE("contrastive attention ignores key positions and respects logit shifts") {
  const DataSpec spec = buildSpec(pointMassConfig(8, 4, 2));
  Rng rng = makeRng(23, Stream::Sampling);
  const Sample s = drawSample(spec, rng);
  const Eigen::MatrixXd X = s.contents(spec);
  const Eigen::MatrixXd Q = randomMatrix(spec.d, spec.d, 31, 0.6);

  const AttentionProfile base = clScores(spec, X, s.clusterId, Q);
  for (int p = 0; p < spec.P; ++p) CHECK(std::abs(base.score.row(p).sum() - 1.0) <= 1e-12);
  CHECK((base.unmaskedAreaAttn - base.areaScore).cwiseAbs().maxCoeff() == 0.0);

  // Keys are bare contents, so the positional columns of Q never enter.
  Eigen::MatrixXd Qpos = Q;
  Qpos.middleCols(spec.K * spec.N, spec.P) +=
      randomMatrix(spec.d, spec.P, 37, 5.0);
  const AttentionProfile samePos = clScores(spec, X, s.clusterId, Qpos);
  CHECK((samePos.score - base.score).cwiseAbs().maxCoeff() == 0.0);

  // With z == 1 every key has unit mass on its area feature, so a rank-one term
  // against the summed features adds one constant to every logit of row p.
  Eigen::VectorXd allFeatures = Eigen::VectorXd::Zero(spec.d);
  for (int a = 0; a < spec.N; ++a) allFeatures(spec.featureCoord(0, a)) = 1.0;
  const int p = 2;
  const Eigen::MatrixXd Qshift =
      Q + 3.5 * unitVector(spec.d, spec.posCoord(p)) * allFeatures.transpose();
  const AttentionProfile shifted = clScores(spec, X, s.clusterId, Qshift);
  CHECK((shifted.score.row(p) - base.score.row(p)).cwiseAbs().maxCoeff() <= 1e-14);
}

TEST_CASE("correlation extraction reads exact basis inner products") {
  const DataSpec spec = buildSpec(sizeConfig(8, 4, 2, 3));
  const Eigen::MatrixXd Q = randomMatrix(spec.d, spec.d, 41, 1.0);
  const CorrelationSnapshot snap = extractCorrelations(Q, spec);
  CHECK(snap.fp.rows() == spec.P);
  CHECK(snap.fp.cols() == spec.K * spec.N);
  CHECK(snap.pp.rows() == spec.P);
  CHECK(snap.pp.cols() == spec.P);
  CHECK(snap.ppK.empty());  // per-cluster pieces are trainer state, not derivable from Q

  for (int p = 0; p < spec.P; ++p) {
    const Eigen::VectorXd ep = unitVector(spec.d, spec.posCoord(p));
    for (int k = 0; k < spec.K; ++k)
      for (int m = 0; m < spec.N; ++m) {
        const Eigen::VectorXd v = unitVector(spec.d, spec.featureCoord(k, m));
        CHECK(snap.fp(p, k * spec.N + m) == ep.dot(Q * v));
      }
    for (int q = 0; q < spec.P; ++q) {
      const Eigen::VectorXd eq = unitVector(spec.d, spec.posCoord(q));
      CHECK(snap.pp(p, q) == ep.dot(Q * eq));
    }
  }
}

TEST_CASE("feature-sided weights produce no position-query correlations") {
  const DataSpec spec = buildSpec(sizeConfig(8, 4, 2));
  // Outer product with a feature vector on the query side: nothing to extract.
  const Eigen::VectorXd v = unitVector(spec.d, spec.featureCoord(0, 1));
  const Eigen::VectorXd e0 = unitVector(spec.d, spec.posCoord(0));
  const CorrelationSnapshot snap = extractCorrelations(v * e0.transpose(), spec);
  CHECK(snap.fp.cwiseAbs().maxCoeff() == 0.0);
  CHECK(snap.pp.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("correlation extraction round-trips constructed tables exactly") {
  const DataSpec spec = buildSpec(sizeConfig(10, 4, 3, 2));
  const int F = spec.K * spec.N;
  const Eigen::MatrixXd c = randomMatrix(spec.P, F, 43, 1.3);
  const Eigen::MatrixXd r = randomMatrix(spec.P, spec.P, 47, 0.9);

  Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(spec.d, spec.d);
  for (int p = 0; p < spec.P; ++p) {
    const Eigen::VectorXd ep = unitVector(spec.d, spec.posCoord(p));
    for (int k = 0; k < spec.K; ++k)
      for (int m = 0; m < spec.N; ++m)
        Q += c(p, k * spec.N + m) * ep *
             unitVector(spec.d, spec.featureCoord(k, m)).transpose();
    for (int q = 0; q < spec.P; ++q)
      Q += r(p, q) * ep * unitVector(spec.d, spec.posCoord(q)).transpose();
  }

  const CorrelationSnapshot snap = extractCorrelations(Q, spec);
  CHECK((snap.fp - c).cwiseAbs().maxCoeff() == 0.0);
  CHECK((snap.pp - r).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("correlation extraction is linear bit for bit") {
  const DataSpec spec = buildSpec(sizeConfig(8, 4, 2, 2));
  const Eigen::MatrixXd A = randomMatrix(spec.d, spec.d, 53, 1.1);
  const Eigen::MatrixXd B = randomMatrix(spec.d, spec.d, 59, 0.4);
  const double eta = 0.37;

  const CorrelationSnapshot sumSnap = extractCorrelations(A + B, spec);
  const CorrelationSnapshot aSnap = extractCorrelations(A, spec);
  const CorrelationSnapshot bSnap = extractCorrelations(B, spec);
  CHECK((sumSnap.fp - (aSnap.fp + bSnap.fp)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((sumSnap.pp - (aSnap.pp + bSnap.pp)).cwiseAbs().maxCoeff() == 0.0);

  const CorrelationSnapshot scaled = extractCorrelations(eta * B, spec);
  CHECK((scaled.fp - eta * bSnap.fp).cwiseAbs().maxCoeff() == 0.0);
  CHECK((scaled.pp - eta * bSnap.pp).cwiseAbs().maxCoeff() == 0.0);

  // One gradient step away from the zero initialization is exactly eta times the
  // gradient's own correlations.
  AttentionWeights w(spec);
  const CorrelationSnapshot stepped = extractCorrelations(w.Q + eta * B, spec);
  CHECK((stepped.fp - eta * bSnap.fp).cwiseAbs().maxCoeff() == 0.0);
  CHECK((stepped.pp - eta * bSnap.pp).cwiseAbs().maxCoeff() == 0.0);

  // From a generic starting point the identity holds to accumulated rounding.
  const CorrelationSnapshot moved = extractCorrelations(A + eta * B, spec);
  CHECK((moved.fp - aSnap.fp - eta * bSnap.fp).cwiseAbs().maxCoeff() <= 1e-15);
  CHECK((moved.pp - aSnap.pp - eta * bSnap.pp).cwiseAbs().maxCoeff() <= 1e-15);
}

TEST_CASE("attention evaluation rejects mismatched or non-finite weights") {
  const DataSpec spec = buildSpec(sizeConfig(8, 4, 2));
  Rng rng = makeRng(61, Stream::Sampling);
  const Sample s = drawSample(spec, rng);
  const MaskedSample ms = applyMask(s, spec, 0.5, rng);

  const Eigen::MatrixXd small = Eigen::MatrixXd::Zero(spec.d - 1, spec.d - 1);
  CHECK_THROWS_AS(maeScores(spec, ms, small), std::invalid_argument);
  CHECK_THROWS_AS(clScores(spec, s.contents(spec), s.clusterId, small), std::invalid_argument);

  Eigen::MatrixXd bad = Eigen::MatrixXd::Zero(spec.d, spec.d);
  bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(maeScores(spec, ms, bad), std::runtime_error);
  bad.setConstant(std::numeric_limits<double>::infinity());
  CHECK_THROWS_AS(clScores(spec, s.contents(spec), s.clusterId, bad), std::runtime_error);
}
