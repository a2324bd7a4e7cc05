#include "attnlab/cl_model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>

namespace attnlab {

namespace {

void checkWeights(const DataSpec& spec, const Eigen::MatrixXd& Q, const char* who) {
  if (Q.rows() != spec.d || Q.cols() != spec.d)
    throw std::invalid_argument(std::string(who) + ": Q dimension mismatch");
}

// All unmasked-indicator vectors with exactly `maskedCount` zeros, in
// lexicographic order of the masked sets.
std::vector<std::vector<std::uint8_t>> enumerateUnmaskedVectors(int P, int maskedCount) {
  std::vector<std::vector<std::uint8_t>> out;
  std::vector<int> pick(maskedCount);
  for (int i = 0; i < maskedCount; ++i) pick[i] = i;
  while (true) {
    std::vector<std::uint8_t> u(P, 1);
    for (int i : pick) u[i] = 0;
    out.push_back(std::move(u));
    int i = maskedCount - 1;
    while (i >= 0 && pick[i] == P - maskedCount + i) --i;
    if (i < 0) break;
    ++pick[i];
    for (int j = i + 1; j < maskedCount; ++j) pick[j] = pick[j - 1] + 1;
  }
  return out;
}

// Probability of each possible count of same-cluster negatives among the batch.
std::vector<double> sameClusterCountWeights(int negatives, int K) {
  std::vector<double> w(negatives + 1);
  for (int n = 0; n <= negatives; ++n) {
    double logC = std::lgamma(negatives + 1.0) - std::lgamma(n + 1.0) -
                  std::lgamma(negatives - n + 1.0);
    w[n] = std::exp(logC) * std::pow(1.0 / K, n) * std::pow(1.0 - 1.0 / K, negatives - n);
  }
  return w;
}

// Attention statistics of one cluster's noiseless sample under one mask.
struct TinyView {
  Eigen::MatrixXd S;  // P x P scores (kept only where the gradient needs them)
  Eigen::MatrixXd A;  // P x N mass on unmasked patches per area
  Eigen::VectorXd f;  // N pooled coefficients of the representation on the features
};

TinyView tinyView(const DataSpec& spec, const Eigen::MatrixXd& Q, int k,
                  const std::vector<std::uint8_t>& unmasked, double z0, bool keepScores) {
  const int P = spec.P;
  const int N = spec.N;
  Eigen::MatrixXd logits(P, P);
  for (int p = 0; p < P; ++p)
    for (int q = 0; q < P; ++q)
      logits(p, q) =
          unmasked[q] ? z0 * Q(spec.posCoord(p), spec.featureCoord(k, spec.areaOf[k][q])) : 0.0;
  TinyView view;
  Eigen::MatrixXd S = softmaxRows(logits);
  view.A = Eigen::MatrixXd::Zero(P, N);
  for (int q = 0; q < P; ++q)
    if (unmasked[q]) view.A.col(spec.areaOf[k][q]) += S.col(q);
  view.f = z0 * view.A.colwise().mean().transpose();
  if (keepScores) view.S = std::move(S);
  return view;
}

// Adds w * (1/P) * sum_{p,q} S(p,q) (X_q . D) e_p (X_q - Fbar_p)^T to the
// position rows of G, where Fbar_p is the row-p attention-weighted content.
void accumulatePooledGradient(const DataSpec& spec, const Eigen::MatrixXd& S,
                              const Eigen::MatrixXd& X, const Eigen::VectorXd& D, double w,
                              Eigen::MatrixXd& G) {
  const Eigen::VectorXd xd = X.transpose() * D;  // per-key projection on D
  const Eigen::MatrixXd C = S.array().rowwise() * xd.transpose().array();
  const Eigen::VectorXd rowTot = C.rowwise().sum();
  const Eigen::MatrixXd Fbar = X * S.transpose();  // column p = Fbar_p
  auto rows = G.middleRows(spec.K * spec.N, spec.P);
  rows.noalias() += (w / spec.P) * (C * X.transpose());
  rows.noalias() -= (w / spec.P) * (rowTot.asDiagonal() * Fbar.transpose());
}

struct TinyResult {
  Eigen::MatrixXd dataG;    // d x d data term (no weight decay)
  Eigen::MatrixXd alphaCf;  // P x K*N area-aggregated projections
  double loss = 0.0;
  long samples = 0;
};

// Full enumeration of (anchor cluster, query mask, comparison mask) with the
// binomially weighted count of same-cluster negatives. The comparison branch
// is evaluated at frozenQ; pass Q twice for the ordinary objective.
TinyResult tinyEnumerate(const DataSpec& spec, const Eigen::MatrixXd& Q,
                         const Eigen::MatrixXd& frozenQ, const ClOptions& opts,
                         const ClResolved& res, bool wantGradient) {
  if (spec.P > 8)
    throw std::invalid_argument("clGradient: enumerated mode supports P <= 8 only");
  if (spec.zLaw.kind != ZLawKind::PointMass)
    throw std::invalid_argument(
        "clGradient: enumerated mode needs a fixed latent scale (point-mass law)");
  if (opts.sigma0Sq > 0.0)
    throw std::invalid_argument("clGradient: enumerated mode is noiseless; disable patch noise");
  const int P = spec.P;
  const int N = spec.N;
  const int K = spec.K;
  const int Nc = opts.negatives;
  const double z0 = spec.zLaw.low;
  const double tau = res.tau;
  const int maskedCount = static_cast<int>(std::lround(opts.gamma0 * P));
  const auto masks = enumerateUnmaskedVectors(P, maskedCount);
  const auto allOn = std::vector<std::uint8_t>(P, 1);
  const int Nm = static_cast<int>(masks.size());
  const auto wn = sameClusterCountWeights(Nc, K);

  TinyResult r;
  r.dataG = Eigen::MatrixXd::Zero(spec.d, spec.d);
  r.alphaCf = Eigen::MatrixXd::Zero(P, K * N);
  r.samples = static_cast<long>(K) * Nm * Nm;
  const bool sameWeights = (&Q == &frozenQ);

  for (int k = 0; k < K; ++k) {
    std::vector<TinyView> qViews(Nm);
    for (int i = 0; i < Nm; ++i) qViews[i] = tinyView(spec, Q, k, masks[i], z0, wantGradient);
    std::vector<Eigen::VectorXd> cf(Nm);
    Eigen::VectorXd cg;
    if (sameWeights) {
      for (int i = 0; i < Nm; ++i) cf[i] = qViews[i].f;
      cg = tinyView(spec, Q, k, allOn, z0, false).f;
    } else {
      for (int i = 0; i < Nm; ++i) cf[i] = tinyView(spec, frozenQ, k, masks[i], z0, false).f;
      cg = tinyView(spec, frozenQ, k, allOn, z0, false).f;
    }

    const double wAnchor = 1.0 / K;
    Eigen::MatrixXd Xplus;
    if (wantGradient) Xplus = Eigen::MatrixXd::Zero(spec.d, P);
    for (int i = 0; i < Nm; ++i) {
      const double eN = std::exp(qViews[i].f.dot(cg) / tau);
      Eigen::VectorXd dBar = Eigen::VectorXd::Zero(N);
      double negShare = 0.0;
      for (int j = 0; j < Nm; ++j) {
        const double eP = std::exp(qViews[i].f.dot(cf[j]) / tau);
        double keepPos = 0.0;
        double pullNeg = 0.0;
        double lossIJ = 0.0;
        for (int n = 0; n <= Nc; ++n) {
          const double den = eP + n * (eN - 1.0) + Nc;
          const double lp = eP / den;
          keepPos += wn[n] * (1.0 - lp);
          pullNeg += wn[n] * (n * eN / den);
          lossIJ += wn[n] * (-tau * std::log(lp));
        }
        r.loss += wAnchor * lossIJ / (static_cast<double>(Nm) * Nm);
        dBar += keepPos * cf[j];
        negShare += pullNeg;
      }
      dBar = dBar / Nm - (negShare / Nm) * cg;

      if (!wantGradient) continue;
      const double w = wAnchor / Nm;
      // Independent area form of the same projections.
      for (int p = 0; p < P; ++p) {
        const double pooledPull = qViews[i].A.row(p).dot(dBar);
        for (int m = 0; m < N; ++m)
          r.alphaCf(p, k * N + m) +=
              (w / P) * z0 * z0 * qViews[i].A(p, m) * (dBar(m) - pooledPull);
      }
      // Full matrix form through the shared pooled-gradient accumulator.
      for (int q = 0; q < P; ++q) {
        Xplus.col(q).setZero();
        if (masks[i][q]) Xplus(spec.featureCoord(k, spec.areaOf[k][q]), q) = z0;
      }
      Eigen::VectorXd dVec = Eigen::VectorXd::Zero(spec.d);
      for (int m = 0; m < N; ++m) dVec(spec.featureCoord(k, m)) = dBar(m);
      accumulatePooledGradient(spec, qViews[i].S, Xplus, dVec, w, r.dataG);
    }
  }
  return r;
}

}  // namespace

ClResolved resolveClOptions(const DataSpec& spec, const ClOptions& opts) {
  ClResolved r;
  r.tau = opts.tau > 0.0 ? opts.tau : 1.0 / std::log(static_cast<double>(spec.d));
  if (opts.tau == 0.0) throw std::invalid_argument("resolveClOptions: tau must be positive");
  r.lambda = opts.lambda >= 0.0 ? opts.lambda : 1.0 / (spec.P * std::log(static_cast<double>(spec.P)));
  if (opts.sigma0Sq >= 0.0)
    r.sigma0Sq = opts.sigma0Sq;
  else
    r.sigma0Sq = opts.mode == ClRunMode::MonteCarlo ? 1.0 / spec.d : 0.0;
  return r;
}

ClBatch makeClBatch(const DataSpec& spec, const ClOptions& opts, Rng& rng) {
  if (opts.negatives < 1) throw std::invalid_argument("makeClBatch: need at least one negative");
  const ClResolved res = resolveClOptions(spec, opts);
  const Sample anchor = drawSample(spec, rng);
  Eigen::MatrixXd base = res.sigma0Sq > 0.0 ? addNoise(anchor, spec, res.sigma0Sq, rng).contents(spec)
                                            : anchor.contents(spec);
  const auto views = augmentPair(anchor, spec, opts.gamma0, rng);
  ClBatch batch;
  batch.clusterId = anchor.clusterId;
  batch.xPlus = base;
  for (int p : views.first.maskSet) batch.xPlus.col(p).setZero();
  batch.xPlusPlus = base;
  for (int p : views.second.maskSet) batch.xPlusPlus.col(p).setZero();
  batch.negatives.reserve(opts.negatives);
  for (int s = 0; s < opts.negatives; ++s) {
    const Sample neg = drawSample(spec, rng);
    batch.negativeClusters.push_back(neg.clusterId);
    batch.negatives.push_back(res.sigma0Sq > 0.0
                                  ? addNoise(neg, spec, res.sigma0Sq, rng).contents(spec)
                                  : neg.contents(spec));
  }
  return batch;
}

Eigen::VectorXd clForward(const DataSpec& spec, const Eigen::MatrixXd& contents,
                          const Eigen::MatrixXd& Q) {
  checkWeights(spec, Q, "clForward");
  if (contents.rows() != spec.d || contents.cols() != spec.P)
    throw std::invalid_argument("clForward: contents dimension mismatch");
  const Eigen::MatrixXd S =
      softmaxRows(Q.middleRows(spec.K * spec.N, spec.P) * contents);
  return contents * S.colwise().sum().transpose() / spec.P;
}

double clSimilarity(const DataSpec& spec, const Eigen::MatrixXd& xa, const Eigen::MatrixXd& xb,
                    const Eigen::MatrixXd& Q) {
  return clForward(spec, xa, Q).dot(clForward(spec, xb, Q));
}

ClLossReport clLoss(const DataSpec& spec, const ClBatch& batch, const Eigen::MatrixXd& Q,
                    double tau, double lambda) {
  if (!(tau > 0.0)) throw std::invalid_argument("clLoss: tau must be positive");
  if (!(lambda >= 0.0)) throw std::invalid_argument("clLoss: lambda must be non-negative");
  if (batch.negatives.empty()) throw std::invalid_argument("clLoss: empty negative set");
  const Eigen::VectorXd fPlus = clForward(spec, batch.xPlus, Q);
  const double simPos = fPlus.dot(clForward(spec, batch.xPlusPlus, Q));
  std::vector<double> simNeg(batch.negatives.size());
  for (std::size_t s = 0; s < batch.negatives.size(); ++s)
    simNeg[s] = fPlus.dot(clForward(spec, batch.negatives[s], Q));

  double top = simPos / tau;
  for (double s : simNeg) top = std::max(top, s / tau);
  double den = std::exp(simPos / tau - top);
  ClLossReport rep;
  rep.ls.resize(simNeg.size());
  for (std::size_t s = 0; s < simNeg.size(); ++s) {
    rep.ls[s] = std::exp(simNeg[s] / tau - top);
    den += rep.ls[s];
  }
  rep.lp = std::exp(simPos / tau - top) / den;
  for (double& v : rep.ls) v /= den;
  rep.infoNce = -simPos + tau * (top + std::log(den));
  rep.regularizer = 0.5 * lambda * Q.squaredNorm();
  rep.total = rep.infoNce + rep.regularizer;
  return rep;
}

ClGradient clGradient(const DataSpec& spec, const Eigen::MatrixXd& Q, const ClOptions& opts,
                      Rng* rng) {
  checkWeights(spec, Q, "clGradient");
  if (opts.negatives < 1) throw std::invalid_argument("clGradient: need at least one negative");
  const ClResolved res = resolveClOptions(spec, opts);
  ClGradient out;
  out.tau = res.tau;
  out.lambda = res.lambda;
  out.mode = opts.mode;
  const int F = spec.K * spec.N;

  if (opts.mode == ClRunMode::ExactTiny) {
    const TinyResult r = tinyEnumerate(spec, Q, Q, opts, res, /*wantGradient=*/true);
    out.loss = r.loss;
    out.samples = r.samples;
    out.alpha = r.dataG.block(F, 0, spec.P, F);
    out.alphaClosedForm = r.alphaCf;
    out.alphaClosedFormGap = (out.alpha - out.alphaClosedForm).cwiseAbs().maxCoeff();
    if (!(out.alphaClosedFormGap <= opts.closedFormTol))
      throw std::runtime_error("clGradient: gradient paths disagree beyond tolerance");
    out.G = r.dataG - res.lambda * Q;
    return out;
  }

  if (rng == nullptr)
    throw std::invalid_argument("clGradient: sampled mode needs a generator");
  if (opts.batches < 1) throw std::invalid_argument("clGradient: need at least one batch");
  Eigen::MatrixXd dataG = Eigen::MatrixXd::Zero(spec.d, spec.d);
  double lossSum = 0.0;
  double lossSq = 0.0;
  for (int b = 0; b < opts.batches; ++b) {
    const ClBatch batch = makeClBatch(spec, opts, *rng);
    const ClLossReport rep = clLoss(spec, batch, Q, res.tau, /*lambda=*/0.0);
    lossSum += rep.infoNce;
    lossSq += rep.infoNce * rep.infoNce;
    Eigen::VectorXd D = (1.0 - rep.lp) * clForward(spec, batch.xPlusPlus, Q);
    for (std::size_t s = 0; s < batch.negatives.size(); ++s)
      D -= rep.ls[s] * clForward(spec, batch.negatives[s], Q);
    const Eigen::MatrixXd S =
        softmaxRows(Q.middleRows(F, spec.P) * batch.xPlus);
    accumulatePooledGradient(spec, S, batch.xPlus, D, 1.0 / opts.batches, dataG);
  }
  out.loss = lossSum / opts.batches;
  if (opts.batches > 1) {
    const double var =
        std::max(0.0, (lossSq - lossSum * lossSum / opts.batches) / (opts.batches - 1));
    out.lossStdErr = std::sqrt(var / opts.batches);
  }
  out.samples = opts.batches;
  out.alpha = dataG.block(F, 0, spec.P, F);
  out.G = dataG - res.lambda * Q;
  return out;
}

double clPseudoLoss(const DataSpec& spec, const Eigen::MatrixXd& Q, const Eigen::MatrixXd& frozenQ,
                    const ClOptions& opts) {
  checkWeights(spec, Q, "clPseudoLoss");
  checkWeights(spec, frozenQ, "clPseudoLoss");
  const ClResolved res = resolveClOptions(spec, opts);
  return tinyEnumerate(spec, Q, frozenQ, opts, res, /*wantGradient=*/false).loss;
}

ClGradient clStep(AttentionWeights& w, const DataSpec& spec, double eta, const ClOptions& opts,
                  Rng* rng) {
  if (!(eta >= 0.0)) throw std::invalid_argument("clStep: eta must be non-negative");
  ClGradient g = clGradient(spec, w.Q, opts, rng);
  w.Q += eta * g.G;
  if (w.Q.cwiseAbs().maxCoeff() > 1e6) throw std::runtime_error("clStep: divergence (|Q| > 1e6)");
  ++w.step;
  return g;
}

}  // namespace attnlab
