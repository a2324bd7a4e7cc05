#include "attnlab/mae_model.hpp"

#include <cmath>
#include <stdexcept>

namespace attnlab {

namespace {

// Correlation-table views of Q; with orthonormal block bases the attention logits
// are exact lookups. For a masked (content-free) query,
//   logit(p,q) = pp(p,q) + 1{q unmasked} * z_a(q) * fp(p, a(q));
// an unmasked query adds its content row through ff and fpos.
struct Tables {
  Eigen::MatrixXd fp;    // e_p^T Q v
  Eigen::MatrixXd pp;    // e_p^T Q e_q
  Eigen::MatrixXd ff;    // v^T Q v
  Eigen::MatrixXd fpos;  // v^T Q e_q
};

Tables makeTables(const DataSpec& spec, const Eigen::MatrixXd& Q) {
  const CorrelationSnapshot snap = extractCorrelations(Q, spec);
  const int F = spec.K * spec.N;
  return {snap.fp, snap.pp, Q.block(0, 0, F, F), Q.block(0, F, F, spec.P)};
}

// Scratch buffers reused across enumeration / sampling.
struct Workspace {
  Eigen::MatrixXd logits, S, A;
  Eigen::MatrixXd X, Xc, Xt, QXt, F, C, scatter1, scatter2;
  Eigen::VectorXd rowMax;
};

// Softmax of the table logits plus unmasked area attentions for one assignment.
// contentQueries adds the unmasked queries' own content terms; masked-target
// evaluations never read those rows and may skip them.
void tableScores(const DataSpec& spec, const Tables& t, int k,
                 const std::vector<std::uint8_t>& u, const std::vector<double>& z,
                 Workspace& ws, bool contentQueries) {
  const int P = spec.P;
  ws.logits = t.pp;
  for (int q = 0; q < P; ++q) {
    if (!u[q]) continue;
    const int a = spec.areaOf[k][q];
    ws.logits.col(q) += z[a] * t.fp.col(k * spec.N + a);
  }
  if (contentQueries) {
    for (int p = 0; p < P; ++p) {
      if (!u[p]) continue;
      const int fn = k * spec.N + spec.areaOf[k][p];
      const double zn = z[spec.areaOf[k][p]];
      for (int q = 0; q < P; ++q) {
        double row = t.fpos(fn, q);
        if (u[q]) row += z[spec.areaOf[k][q]] * t.ff(fn, k * spec.N + spec.areaOf[k][q]);
        ws.logits(p, q) += zn * row;
      }
    }
  }
  ws.S = softmaxRows(ws.logits);
  ws.A.setZero(P, spec.N);
  for (int q = 0; q < P; ++q)
    if (u[q]) ws.A.col(spec.areaOf[k][q]) += ws.S.col(q);
}

// Accumulators for maeGradient over assignments.
struct GradAccum {
  Eigen::MatrixXd G;
  Eigen::MatrixXd alphaTable;  // general-path coefficients (table arithmetic)
  Eigen::MatrixXd betaTable;
  std::vector<Eigen::MatrixXd> betaK;
  Eigen::MatrixXd alphaClosedForm;
  Eigen::MatrixXd betaClosedForm;
};

// One assignment's contribution to every gradient accumulator.
// dense = true uses the full-matrix arithmetic for G (and betaK);
// otherwise G is assembled later by scattering the table coefficients.
void evalGradAssignment(const DataSpec& spec, const MaeOptions& opts, const Eigen::MatrixXd& Q,
                        const Tables& tables, int k, const std::vector<std::uint8_t>& u,
                        const std::vector<double>& z, double w, bool dense, Workspace& ws,
                        GradAccum& acc) {
  const int P = spec.P;
  const int N = spec.N;
  const auto& areaOf = spec.areaOf[k];
  const auto targeted = [&](int p) { return opts.reconstructAll || !u[p]; };

  if (dense) {
    // Full-matrix path: queries/keys are masked-content + position vectors.
    ws.X.setZero(spec.d, P);
    for (int p = 0; p < P; ++p) ws.X(spec.featureCoord(k, areaOf[p]), p) = z[areaOf[p]];
    ws.Xc = ws.X;
    for (int p = 0; p < P; ++p)
      if (!u[p]) ws.Xc.col(p).setZero();
    ws.Xt = ws.Xc;
    for (int p = 0; p < P; ++p) ws.Xt(spec.posCoord(p), p) += 1.0;
    ws.QXt.noalias() = Q * ws.Xt;
    ws.logits.noalias() = ws.Xt.transpose() * ws.QXt;
    ws.S = softmaxRows(ws.logits);
    ws.A.setZero(P, N);
    for (int q = 0; q < P; ++q)
      if (u[q]) ws.A.col(areaOf[q]) += ws.S.col(q);
    ws.F.noalias() = ws.Xc * ws.S.transpose();  // reconstruction, column per query
    // C(p,q) = S(p,q) * ((X_p - F_p) . Xc_q - T_p) on targeted rows.
    ws.C.setZero(P, P);
    for (int p = 0; p < P; ++p) {
      if (!targeted(p)) continue;
      double Tp = 0.0;
      for (int q = 0; q < P; ++q) {
        if (!u[q]) continue;
        const double g = (ws.X.col(p) - ws.F.col(p)).dot(ws.Xc.col(q));
        const double wq = ws.S(p, q) * g;
        ws.C(p, q) = wq;
        Tp += wq;
      }
      for (int q = 0; q < P; ++q) ws.C(p, q) -= Tp * ws.S(p, q);
    }
    ws.scatter1.noalias() = ws.C * ws.Xt.transpose();
    acc.G.noalias() += w * (ws.Xt * ws.scatter1);
    acc.betaK[k] += w * ws.C;
  } else {
    tableScores(spec, tables, k, u, z, ws, opts.reconstructAll);
  }

  // Table arithmetic for the coefficient decompositions (and, in the non-dense
  // case, for G itself via a final scatter).
  for (int p = 0; p < P; ++p) {
    if (!targeted(p)) continue;
    const int n = areaOf[p];
    const double zn = z[n];
    const double An = ws.A(p, n);
    double sumsq = 0.0;
    for (int a = 0; a < N; ++a) {
      const double za = z[a] * ws.A(p, a);
      sumsq += za * za;
    }
    const double Tp = zn * zn * An - sumsq;

    for (int q = 0; q < P; ++q) {
      const double S = ws.S(p, q);
      double g = 0.0;
      if (u[q]) {
        const int a = areaOf[q];
        g = (a == n) ? zn * zn * (1.0 - An) : -z[a] * z[a] * ws.A(p, a);
      }
      const double c = S * (g - Tp);
      acc.betaTable(p, q) += w * c;
      if (u[q]) acc.alphaTable(p, k * N + areaOf[q]) += w * z[areaOf[q]] * c;
      if (!dense) acc.betaK[k](p, q) += w * c;
    }

    // Closed-form coefficients from area attentions alone.
    const double Ansq = zn * zn * An * An;
    for (int m = 0; m < N; ++m) {
      double lem;
      if (m == n) {
        lem = An * (zn * zn * zn * (1.0 - An) * (1.0 - An) + zn * (sumsq - Ansq));
      } else {
        const double Am = ws.A(p, m);
        const double zm = z[m];
        lem = Am * zm *
              ((sumsq - zm * zm * Am * Am - Ansq) - zn * zn * (1.0 - An) * An -
               zm * zm * (1.0 - Am) * Am);
      }
      acc.alphaClosedForm(p, k * N + m) += w * lem;
    }
    for (int q = 0; q < P; ++q) {
      double base = 0.0;
      if (u[q]) {
        const int a = areaOf[q];
        base = (a == n) ? zn * zn * (1.0 - An) : -z[a] * z[a] * ws.A(p, a);
      }
      acc.betaClosedForm(p, q) += w * ws.S(p, q) * (base - Tp);
    }
  }
}

void drawAssignment(const DataSpec& spec, double gamma, Rng& rng, int& k,
                    std::vector<std::uint8_t>& u, std::vector<double>& z) {
  const Sample s = drawSample(spec, rng);
  k = s.clusterId;
  z = s.z;
  const MaskedSample ms = applyMask(s, spec, gamma, rng);
  u = ms.unmasked;
}

}  // namespace

Eigen::MatrixXd maeForward(const DataSpec& spec, const MaskedSample& masked,
                           const Eigen::MatrixXd& Q) {
  const AttentionProfile prof = maeScores(spec, masked, Q);
  const Eigen::MatrixXd Xc = masked.maskedContents(spec);
  Eigen::MatrixXd F = Xc * prof.score.transpose();
  if (!F.allFinite()) throw std::runtime_error("maeForward: non-finite reconstruction");
  return F;
}

LossReport maeLoss(const DataSpec& spec, const Eigen::MatrixXd& Q, const MaeOptions& opts,
                   Rng* rng) {
  const int P = spec.P;
  const Tables tables = makeTables(spec, Q);
  LossReport rep;
  rep.perPatch = Eigen::VectorXd::Zero(P);
  rep.eventLoss = Eigen::VectorXd::Zero(P);
  rep.lowBoundPerPatch = Eigen::VectorXd::Zero(P);
  for (int p = 0; p < P; ++p) rep.lowBoundPerPatch[p] = lowBound(spec, opts.gamma, p);

  Workspace ws;
  KahanSum decomposed;
  KahanSum sampleSum, sampleSq;
  long nSamples = 0;

  const auto evalOne = [&](int k, const std::vector<std::uint8_t>& u,
                           const std::vector<double>& z, double w) {
    const auto& areaOf = spec.areaOf[k];
    // Direct squared-residual path on the content coordinates.
    tableScores(spec, tables, k, u, z, ws, opts.reconstructAll);
    double sampleTotal = 0.0;
    for (int p = 0; p < P; ++p) {
      if (!(opts.reconstructAll || !u[p])) continue;
      const int n = areaOf[p];
      double direct = 0.0;
      for (int a = 0; a < spec.N; ++a) {
        const double coef = z[a] * ws.A(p, a) - (a == n ? z[n] : 0.0);
        direct += coef * coef;
      }
      rep.perPatch[p] += w * 0.5 * direct;
      sampleTotal += 0.5 * direct;
      // Area-attention decomposition: global deficit plus off-area mass.
      const double An = ws.A(p, n);
      double off = 0.0;
      for (int a = 0; a < spec.N; ++a)
        if (a != n) off += z[a] * z[a] * ws.A(p, a) * ws.A(p, a);
      const double dec = 0.5 * (z[n] * z[n] * (1.0 - An) * (1.0 - An) + off);
      decomposed.add(w * dec);
      // Event restriction: own area kept at least one unmasked patch.
      int own = 0;
      for (int q : spec.partitions[k][n]) own += u[q];
      if (own >= 1) rep.eventLoss[p] += w * dec;
    }
    sampleSum.add(sampleTotal);
    sampleSq.add(sampleTotal * sampleTotal);
    ++nSamples;
  };

  if (opts.mode == RunMode::Exact) {
    forEachMaskAssignment(spec, opts.gamma, evalOne);
  } else {
    if (rng == nullptr) throw std::invalid_argument("maeLoss: Monte Carlo mode needs an RNG");
    int k;
    std::vector<std::uint8_t> u;
    std::vector<double> z;
    const double w = 1.0 / opts.batch;
    for (int b = 0; b < opts.batch; ++b) {
      drawAssignment(spec, opts.gamma, *rng, k, u, z);
      evalOne(k, u, z, w);
    }
    const double mean = sampleSum.value() / nSamples;
    const double var = std::max(0.0, sampleSq.value() / nSamples - mean * mean);
    rep.totalStdErr = std::sqrt(var / nSamples);
  }

  rep.total = rep.perPatch.sum();
  rep.decomposedTotal = decomposed.value();
  if (opts.mode == RunMode::Exact &&
      std::abs(rep.total - rep.decomposedTotal) > opts.decompositionTol)
    throw std::runtime_error("maeLoss: residual and area-attention paths disagree");
  return rep;
}

double maeLossTotal(const DataSpec& spec, const Eigen::MatrixXd& Q, const MaeOptions& opts,
                    Rng* rng) {
  const int P = spec.P;
  const Tables tables = makeTables(spec, Q);
  Workspace ws;
  KahanSum acc;
  const auto evalOne = [&](int k, const std::vector<std::uint8_t>& u,
                           const std::vector<double>& z, double w) {
    tableScores(spec, tables, k, u, z, ws, opts.reconstructAll);
    const auto& areaOf = spec.areaOf[k];
    for (int p = 0; p < P; ++p) {
      if (!(opts.reconstructAll || !u[p])) continue;
      const int n = areaOf[p];
      const double An = ws.A(p, n);
      double off = 0.0;
      for (int a = 0; a < spec.N; ++a)
        if (a != n) off += z[a] * z[a] * ws.A(p, a) * ws.A(p, a);
      acc.add(w * 0.5 * (z[n] * z[n] * (1.0 - An) * (1.0 - An) + off));
    }
  };
  if (opts.mode == RunMode::Exact) {
    forEachMaskAssignment(spec, opts.gamma, evalOne);
  } else {
    if (rng == nullptr) throw std::invalid_argument("maeLossTotal: Monte Carlo mode needs an RNG");
    int k;
    std::vector<std::uint8_t> u;
    std::vector<double> z;
    for (int b = 0; b < opts.batch; ++b) {
      drawAssignment(spec, opts.gamma, *rng, k, u, z);
      evalOne(k, u, z, 1.0 / opts.batch);
    }
  }
  return acc.value();
}

MaeGradient maeGradient(const DataSpec& spec, const Eigen::MatrixXd& Q, const MaeOptions& opts,
                        Rng* rng) {
  const int P = spec.P;
  const int F = spec.K * spec.N;
  // Monte Carlo keeps the same coefficient arithmetic but skips the full-matrix
  // products per sample; exact mode runs them as written.
  const bool densePath = (opts.mode == RunMode::Exact);

  const Tables tables = makeTables(spec, Q);
  GradAccum acc;
  acc.G = Eigen::MatrixXd::Zero(spec.d, spec.d);
  acc.alphaTable = Eigen::MatrixXd::Zero(P, F);
  acc.betaTable = Eigen::MatrixXd::Zero(P, P);
  acc.alphaClosedForm = Eigen::MatrixXd::Zero(P, F);
  acc.betaClosedForm = Eigen::MatrixXd::Zero(P, P);
  acc.betaK.assign(spec.K, Eigen::MatrixXd::Zero(P, P));
  Workspace ws;
  int nAssignments = 0;

  if (opts.mode == RunMode::Exact) {
    forEachMaskAssignment(spec, opts.gamma,
                          [&](int k, const std::vector<std::uint8_t>& u,
                              const std::vector<double>& z, double w) {
                            evalGradAssignment(spec, opts, Q, tables, k, u, z, w, densePath, ws,
                                               acc);
                            ++nAssignments;
                          });
  } else {
    if (rng == nullptr) throw std::invalid_argument("maeGradient: Monte Carlo mode needs an RNG");
    if (opts.reconstructAll)
      throw std::invalid_argument("maeGradient: full-image reconstruction is exact-mode only");
    int k;
    std::vector<std::uint8_t> u;
    std::vector<double> z;
    const double w = 1.0 / opts.batch;
    for (int b = 0; b < opts.batch; ++b) {
      drawAssignment(spec, opts.gamma, *rng, k, u, z);
      evalGradAssignment(spec, opts, Q, tables, k, u, z, w, false, ws, acc);
    }
    nAssignments = opts.batch;
    // Assemble G from the coefficient tables: targeted rows are positional, so the
    // gradient lives entirely in the position-to-feature and position-to-position blocks.
    acc.G.block(F, 0, P, F) = acc.alphaTable;
    acc.G.block(F, F, P, P) = acc.betaTable;
  }

  MaeGradient out;
  out.mode = opts.mode;
  out.samples = nAssignments;
  out.G = std::move(acc.G);
  const CorrelationSnapshot proj = extractCorrelations(out.G, spec);
  out.alpha = proj.fp;
  out.beta = proj.pp;
  out.betaK = std::move(acc.betaK);
  out.alphaClosedForm = std::move(acc.alphaClosedForm);
  out.betaClosedForm = std::move(acc.betaClosedForm);
  out.alphaClosedFormGap = (out.alpha - out.alphaClosedForm).cwiseAbs().maxCoeff();
  out.betaClosedFormGap = (out.beta - out.betaClosedForm).cwiseAbs().maxCoeff();
  if (out.alphaClosedFormGap > opts.closedFormTol || out.betaClosedFormGap > opts.closedFormTol)
    throw std::runtime_error("maeGradient: closed-form coefficients disagree with the gradient");
  return out;
}

MaeGradient maeStep(AttentionWeights& w, const DataSpec& spec, double eta, const MaeOptions& opts,
                    Rng* rng) {
  if (!(eta >= 0.0)) throw std::invalid_argument("maeStep: eta must be non-negative");
  MaeGradient g = maeGradient(spec, w.Q, opts, rng);
  w.Q += eta * g.G;
  if (w.Q.cwiseAbs().maxCoeff() > 1e6) throw std::runtime_error("maeStep: divergence (|Q| > 1e6)");
  ++w.step;
  return g;
}

double bisectEta(const DataSpec& spec, const MaeOptions& opts, int probeSteps) {
  MaeOptions exactOpts = opts;
  exactOpts.mode = RunMode::Exact;
  for (int j = 10; j >= -6; --j) {
    const double eta = std::ldexp(1.0, j);
    AttentionWeights w(spec);
    double prev = maeLossTotal(spec, w.Q, exactOpts);
    bool monotone = true;
    for (int t = 0; t < probeSteps; ++t) {
      try {
        maeStep(w, spec, eta, exactOpts);
      } catch (const std::runtime_error&) {
        monotone = false;  // divergence counts as instability
        break;
      }
      const double cur = maeLossTotal(spec, w.Q, exactOpts);
      if (!(cur <= prev + 1e-12)) {
        monotone = false;
        break;
      }
      prev = cur;
    }
    if (monotone) return eta;
  }
  throw std::runtime_error("bisectEta: no stable step size in 2^[-6,10]");
}

}  // namespace attnlab
