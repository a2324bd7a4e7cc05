#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "attnlab/cl_model.hpp"
#include "attnlab/dynamics_tracker.hpp"
#include "attnlab/mae_model.hpp"

using namespace attnlab;

namespace {

// Fixed z == 1 latent law: every frozen constant below was derived under it.
ExperimentConfig sizeConfig(int P, int c1, int cs, int K = 1) {
  ExperimentConfig c;
  c.P = P;
  c.K = K;
  c.c1 = c1;
  c.cs = cs;
  c.zLaw.kind = ZLawKind::PointMass;
  c.zLaw.low = 1.0;
  c.zLaw.up = 1.0;
  return c;
}

int firstPatchInArea(const DataSpec& spec, int k, int area) {
  for (int p = 0; p < spec.P; ++p)
    if (spec.areaOf[k][p] == area) return p;
  return -1;
}

CorrelationTrace runExactMae(const DataSpec& spec, AttentionWeights& w, double eta, int steps) {
  MaeOptions mo;
  mo.gamma = 0.5;
  mo.mode = RunMode::Exact;
  CorrelationTrace trace;
  CorrelationSnapshot s0 = extractCorrelations(w.Q, spec);
  s0.step = w.step;
  trace.push_back(std::move(s0));
  for (int t = 0; t < steps; ++t) {
    maeStep(w, spec, eta, mo);
    CorrelationSnapshot s = extractCorrelations(w.Q, spec);
    s.step = w.step;
    trace.push_back(std::move(s));
  }
  return trace;
}

struct RunBundle {
  DataSpec spec;
  CorrelationTrace trace;
  Eigen::MatrixXd qFinal;
};

// The P=8 [6,2] positive-gap instance trained to convergence, shared across cases.
const RunBundle& microRun() {
  static const RunBundle bundle = [] {
    DataSpec spec = buildSpec(sizeConfig(8, 6, 2));
    AttentionWeights w(spec);
    CorrelationTrace trace = runExactMae(spec, w, 1.0, 4000);
    return RunBundle{std::move(spec), std::move(trace), w.Q};
  }();
  return bundle;
}

bool nonRegressing(const std::vector<PhaseLabel>& labels) {
  for (std::size_t i = 1; i < labels.size(); ++i) {
    if (static_cast<int>(labels[i]) < static_cast<int>(labels[i - 1])) return false;
  }
  return true;
}

std::set<PhaseLabel> distinctLabels(const std::vector<PhaseLabel>& labels) {
  return {labels.begin(), labels.end()};
}

Eigen::MatrixXd trainClTiny(const DataSpec& spec, double eta, double lambda, int steps) {
  ClOptions o;
  o.mode = ClRunMode::ExactTiny;
  o.lambda = lambda;
  AttentionWeights w(spec);
  for (int t = 0; t < steps; ++t) clStep(w, spec, eta, o);
  return w.Q;
}

}  // namespace

TEST_CASE("two-phase run classifies P1S1 through CONVERGED with frozen boundaries") {
  const RunBundle& run = microRun();
  const DataSpec& spec = run.spec;
  const auto series = classifyPhase(run.trace, spec);
  REQUIRE(series.size() == static_cast<std::size_t>(spec.P));

  const double logP = std::log(8.0);
  const double delta = infoGap(spec);
  REQUIRE(delta > 0.0);

  const int pLoc = firstPatchInArea(spec, 0, 1);
  const int pGlb = firstPatchInArea(spec, 0, 0);
  const PhaseSeries& loc = series[pLoc];
  const PhaseSeries& glb = series[pGlb];

  // Resolved boundary levels match the definitions (z law support 1 => U = L = 1).
  CHECK(loc.thr1 == doctest::Approx(-(delta / 2 - 0.01) * logP).epsilon(1e-14));
  CHECK(loc.thrGap ==
        doctest::Approx((delta / 2 + 0.01 + (1.0 - spec.kappaS)) * logP).epsilon(1e-14));
  CHECK(loc.thr2 == doctest::Approx((1.0 - spec.kappaS) * logP).epsilon(1e-14));
  CHECK(loc.thr2Eps ==
        doctest::Approx(std::log((std::sqrt(3.0 / 0.05) - 1.0) * 2.0)).epsilon(1e-14));

  CHECK(!loc.globalPatch);
  CHECK(!loc.negativeGap);
  CHECK(loc.labels.front() == PhaseLabel::P1S1);
  CHECK(nonRegressing(loc.labels));
  CHECK(loc.t1 == 6);
  CHECK(loc.t1Tilde == 23);
  CHECK(loc.t2 == 56);
  // The final boundary (level 2.602 on the own-feature correlation) sits beyond
  // this horizon: growth is logarithmic after concentration, so the stage is
  // correctly censored rather than closed.
  CHECK(loc.t2Eps == kNotReached);
  CHECK(distinctLabels(loc.labels) == std::set<PhaseLabel>{PhaseLabel::P1S1, PhaseLabel::P1S2,
                                                           PhaseLabel::P2S1, PhaseLabel::P2S2});

  // A looser final boundary closes within the horizon and completes the ladder.
  ThresholdConfig looser;
  looser.t2EpsMultiplier = 0.8;
  const PhaseSeries locLoose = classifyPhase(run.trace, spec, looser)[pLoc];
  CHECK(locLoose.t2Eps == 856);
  CHECK(distinctLabels(locLoose.labels) ==
        std::set<PhaseLabel>{PhaseLabel::P1S1, PhaseLabel::P1S2, PhaseLabel::P2S1,
                             PhaseLabel::P2S2, PhaseLabel::Converged});
  CHECK(nonRegressing(locLoose.labels));

  // Both local patches are exchangeable, so their series agree.
  int pLoc2 = -1;
  for (int p = pLoc + 1; p < spec.P; ++p)
    if (spec.areaOf[0][p] == 1) pLoc2 = p;
  REQUIRE(pLoc2 >= 0);
  CHECK(series[pLoc2].t1 == loc.t1);
  CHECK(series[pLoc2].t1Tilde == loc.t1Tilde);
  CHECK(series[pLoc2].t2 == loc.t2);
  CHECK(series[pLoc2].t2Eps == loc.t2Eps);

  CHECK(glb.globalPatch);
  CHECK(glb.labels.front() == PhaseLabel::GlobalS1);
  CHECK(nonRegressing(glb.labels));
  CHECK(glb.thr2 == doctest::Approx((1.0 - spec.kappaC) * logP).epsilon(1e-14));
  const std::set<PhaseLabel> glbSeen = distinctLabels(glb.labels);
  for (PhaseLabel l : glbSeen) {
    CHECK((l == PhaseLabel::GlobalS1 || l == PhaseLabel::GlobalS2 || l == PhaseLabel::Converged));
  }
  CHECK(glbSeen.count(PhaseLabel::GlobalS2) == 1);
  CHECK(glbSeen.count(PhaseLabel::Converged) == 1);
  CHECK(glb.t2 == 3);
  CHECK(glb.t2Eps == 84);
  for (int p = 0; p < spec.P; ++p) {
    if (spec.areaOf[0][p] != 0) continue;
    CHECK(series[p].t2 == glb.t2);
    CHECK(series[p].t2Eps == glb.t2Eps);
  }
}

TEST_CASE("loosening a threshold multiplier never delays its crossing") {
  const RunBundle& run = microRun();
  const int pLoc = firstPatchInArea(run.spec, 0, 1);
  const auto boundaryAt = [&](auto setter) {
    ThresholdConfig t;
    setter(t);
    return classifyPhase(run.trace, run.spec, t)[pLoc];
  };
  const double ms[3] = {0.5, 1.0, 2.0};

  long prev = -2;
  for (double m : ms) {
    const PhaseSeries s = boundaryAt([&](ThresholdConfig& t) { t.t1Multiplier = m; });
    CHECK(prev <= s.t1);
    prev = s.t1;
  }
  prev = -2;
  for (double m : ms) {
    const PhaseSeries s = boundaryAt([&](ThresholdConfig& t) { t.t1TildeMultiplier = m; });
    CHECK(prev <= s.t1Tilde);
    prev = s.t1Tilde;
  }
  prev = -2;
  for (double m : ms) {
    const PhaseSeries s = boundaryAt([&](ThresholdConfig& t) { t.t2Multiplier = m; });
    CHECK(prev <= s.t2);
    prev = s.t2;
  }
  prev = -2;
  for (double m : ms) {
    const PhaseSeries s = boundaryAt([&](ThresholdConfig& t) { t.t2EpsMultiplier = m; });
    CHECK(prev <= s.t2Eps);
    prev = s.t2Eps;
  }
}

TEST_CASE("negative-gap run skips phase one and global patches start GLOBAL_S1") {
  DataSpec spec = buildSpec(sizeConfig(10, 4, 3));
  REQUIRE(infoGap(spec) < 0.0);
  AttentionWeights w(spec);
  const CorrelationTrace trace = runExactMae(spec, w, 1.0, 2500);
  const auto series = classifyPhase(trace, spec);

  const int pLoc = firstPatchInArea(spec, 0, 1);
  const PhaseSeries& loc = series[pLoc];
  CHECK(loc.negativeGap);
  CHECK(loc.labels.front() == PhaseLabel::NegS1);
  CHECK(nonRegressing(loc.labels));
  for (PhaseLabel l : distinctLabels(loc.labels)) {
    CHECK((l == PhaseLabel::NegS1 || l == PhaseLabel::NegS2 || l == PhaseLabel::Converged));
  }
  CHECK(loc.t2 == 21);
  CHECK(loc.t2Eps == 256);
  CHECK(distinctLabels(loc.labels) ==
        std::set<PhaseLabel>{PhaseLabel::NegS1, PhaseLabel::NegS2, PhaseLabel::Converged});
  CHECK(loc.thr2 == doctest::Approx((1.0 - spec.kappaS) * std::log(10.0)).epsilon(1e-14));
  CHECK(loc.thr2Eps == doctest::Approx(std::log((std::sqrt(3.0 / 0.05) - 1.0) *
                                                std::pow(10.0, 1.0 - spec.kappaS)))
                           .epsilon(1e-14));

  const PhaseSeries& glb = series[firstPatchInArea(spec, 0, 0)];
  CHECK(glb.globalPatch);
  CHECK(glb.labels.front() == PhaseLabel::GlobalS1);
  CHECK(nonRegressing(glb.labels));
}

TEST_CASE("stage boundaries follow the last-crossing convention and censor at trace end") {
  const DataSpec spec = buildSpec(sizeConfig(8, 6, 2));
  const int pLoc = firstPatchInArea(spec, 0, 1);
  const double thr1 = -(infoGap(spec) / 2 - 0.01) * std::log(8.0);

  const auto traceWithPhi1 = [&](const std::vector<double>& phi1) {
    CorrelationTrace trace;
    for (std::size_t i = 0; i < phi1.size(); ++i) {
      CorrelationSnapshot s;
      s.step = static_cast<long>(i);
      s.fp = Eigen::MatrixXd::Zero(spec.P, spec.K * spec.N);
      s.fp(pLoc, 0) = phi1[i];
      trace.push_back(std::move(s));
    }
    return trace;
  };
  REQUIRE(thr1 < 0.0);
  REQUIRE(thr1 > -1.0);

  // Dips below the boundary, recovers, crosses for good: the last holding step wins.
  {
    const auto series = classifyPhase(traceWithPhi1({0, -1, 0, -1, -1, -1}), spec);
    const PhaseSeries& s = series[pLoc];
    CHECK(s.t1 == 2);
    CHECK(s.labels[1] == PhaseLabel::P1S1);  // inside the stage despite the dip
    CHECK(s.labels[3] == PhaseLabel::P1S2);
    CHECK(s.t1Tilde == kNotReached);  // gap condition still holds at the end
    CHECK(s.t2 == kNotReached);
    CHECK(s.t2Eps == kNotReached);
  }
  // Condition holds at the final entry: the boundary is censored, labels stay put.
  {
    const auto series = classifyPhase(traceWithPhi1({0, -1, -1, -1, -1, 0}), spec);
    const PhaseSeries& s = series[pLoc];
    CHECK(s.t1 == kNotReached);
    for (PhaseLabel l : s.labels) CHECK(l == PhaseLabel::P1S1);
  }
  // Never holds: the stage was over before logging began.
  {
    const auto series = classifyPhase(traceWithPhi1({-1, -1, -1, -1}), spec);
    const PhaseSeries& s = series[pLoc];
    CHECK(s.t1 == -1);
    CHECK(s.labels.front() == PhaseLabel::P1S2);
  }
}

TEST_CASE("classifyPhase rejects malformed traces and threshold settings") {
  const DataSpec spec = buildSpec(sizeConfig(8, 6, 2));
  const auto snapshotAt = [&](long step) {
    CorrelationSnapshot s;
    s.step = step;
    s.fp = Eigen::MatrixXd::Zero(spec.P, spec.K * spec.N);
    return s;
  };

  CHECK_THROWS_AS(classifyPhase({}, spec), std::invalid_argument);
  CHECK_THROWS_AS(classifyPhase({snapshotAt(1)}, spec), std::invalid_argument);
  {
    CorrelationTrace t{snapshotAt(0), snapshotAt(2), snapshotAt(1)};
    CHECK_THROWS_AS(classifyPhase(t, spec), std::invalid_argument);
  }
  {
    CorrelationSnapshot bad = snapshotAt(0);
    bad.fp.resize(spec.P, spec.K * spec.N + 1);
    bad.fp.setZero();
    CHECK_THROWS_AS(classifyPhase({bad}, spec), std::invalid_argument);
  }
  {
    ThresholdConfig t;
    t.epsilon = 0.0;
    CHECK_THROWS_AS(classifyPhase({snapshotAt(0)}, spec, t), std::invalid_argument);
    t.epsilon = 3.0;
    CHECK_THROWS_AS(classifyPhase({snapshotAt(0)}, spec, t), std::invalid_argument);
  }
  {
    ThresholdConfig t;
    t.c5 = 0.0;
    CHECK_THROWS_AS(classifyPhase({snapshotAt(0)}, spec, t), std::invalid_argument);
  }
  {
    DataSpec zeroLow = spec;
    zeroLow.zLaw.low = 0.0;
    CHECK_THROWS_AS(classifyPhase({snapshotAt(0)}, zeroLow), std::invalid_argument);
  }
}

TEST_CASE("theoremCheck flags the untrained matrix on the single-cluster instance") {
  ExperimentConfig cfg;
  cfg.P = 64;
  cfg.K = 1;
  cfg.kappaC = 0.9;
  cfg.kappaS = 0.35;
  const DataSpec spec = buildSpec(cfg);
  const Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(spec.d, spec.d);

  TheoremCheckOptions opts;
  opts.lossMode = RunMode::MonteCarlo;
  opts.lossBatch = 1024;
  opts.maskSamples = 10;
  const TheoremReport rep = theoremCheck(spec, Q, 0.05, opts);

  CHECK(!rep.pass);
  CHECK(!rep.lossPass);
  CHECK(!rep.localityPass);
  CHECK(rep.localDraws + rep.globalDraws == spec.P * opts.maskSamples);
  for (const PatchCheck& pc : rep.patches) {
    CHECK(pc.lossGap > 0.05);
    CHECK(pc.failures == pc.draws);  // uniform attention misses the target everywhere
    const int own = spec.areaOf[0][pc.patch];
    const double maxKeep =
        std::min(static_cast<double>(spec.areaSizes[own]), spec.P / 2.0) / spec.P;
    CHECK(pc.worstOwnAttnSq >= (1.0 - maxKeep) * (1.0 - maxKeep) - 1e-12);
    CHECK(!pc.pass);
  }
}

TEST_CASE("reconstruction and contrastive training leave opposite attention signatures") {
  const DataSpec spec = buildSpec(sizeConfig(8, 6, 2, 4));

  // Reconstruction side: exact training to a small loss gap.
  AttentionWeights maeW(spec);
  runExactMae(spec, maeW, 1.0, 6000);
  TheoremCheckOptions maeOpts;
  maeOpts.objective = Objective::Mae;
  maeOpts.attnConstant = 1.0;
  const TheoremReport maeRep = theoremCheck(spec, maeW.Q, 0.05, maeOpts);
  {
    double worstGap = 0.0, worstAttn = 0.0;
    for (const PatchCheck& pc : maeRep.patches) {
      worstGap = std::max(worstGap, pc.lossGap);
      worstAttn = std::max(worstAttn, pc.worstOwnAttnSq);
    }
    CHECK(worstGap < 2e-4);
    CHECK(worstAttn < 0.005);
  }
  CHECK(maeRep.lossPass);
  CHECK(maeRep.localityPass);
  CHECK(maeRep.globalFailures == 0);
  CHECK(maeRep.pass);

  // Contrastive side: decay small enough for the dominant feature to rise.
  const Eigen::MatrixXd clQ = trainClTiny(spec, 16.0, 1e-5, 800);
  TheoremCheckOptions clOpts;
  clOpts.objective = Objective::Cl;
  clOpts.attnConstant = 1.0;
  clOpts.contentSamples = 2;
  const TheoremReport clRep = theoremCheck(spec, clQ, 0.05, clOpts);
  CHECK(clRep.globalConcentrationPass);
  CHECK(clRep.worstGlobalAttnSq < 1e-4);
  CHECK(clRep.phiOrderingPass);
  CHECK(clRep.phiGapMin > 4.0);
  CHECK(clRep.pass);
  CHECK(!clRep.localityPass);  // reconstruction-style locality is lost
  CHECK(clRep.localDraws > 0);
  CHECK(clRep.localFailures == clRep.localDraws);  // every local draw misses its own area

  // The untrained matrix concentrates nowhere at this tolerance.
  const TheoremReport zeroRep =
      theoremCheck(spec, Eigen::MatrixXd::Zero(spec.d, spec.d), 0.05, clOpts);
  CHECK(!zeroRep.globalConcentrationPass);
  CHECK(!zeroRep.pass);

  // And the reconstruction-trained matrix fails the contrastive signature.
  const TheoremReport crossRep = theoremCheck(spec, maeW.Q, 0.05, clOpts);
  CHECK(!crossRep.phiOrderingPass);
  CHECK(!crossRep.pass);
}

TEST_CASE("theoremCheck rejects invalid inputs") {
  const DataSpec spec = buildSpec(sizeConfig(8, 6, 2));
  const Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(spec.d, spec.d);
  CHECK_THROWS_AS(theoremCheck(spec, Q, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(theoremCheck(spec, Eigen::MatrixXd::Zero(3, 3), 0.05), std::invalid_argument);
  TheoremCheckOptions opts;
  opts.gamma = 0.01;  // rounds to an empty mask: the conditioning is impossible
  CHECK_THROWS_AS(theoremCheck(spec, Q, 0.05, opts), std::invalid_argument);
}

TEST_CASE("diversity metric matches the hand-computed grid examples") {
  // Identity attention on the 2x2 grid: queries pin their own cells.
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(4, 4);
  const DiversityReport rep = diversityMetric(eye, 2, 1);
  CHECK(rep.mean == doctest::Approx((8.0 + 4.0 * std::sqrt(2.0)) / 12.0).epsilon(1e-15));
  CHECK(rep.mean == doctest::Approx(1.1380711874576983).epsilon(1e-15));
  for (int q = 0; q < 4; ++q) {
    REQUIRE(rep.topIndices[q].size() == 1);
    CHECK(rep.topIndices[q][0] == q);
    CHECK(rep.coordinates(q, 0) == q / 2);
    CHECK(rep.coordinates(q, 1) == q % 2);
  }

  // Identical rows collapse to zero spread.
  Eigen::MatrixXd same(9, 9);
  Eigen::VectorXd row = Eigen::VectorXd::LinSpaced(9, 0.1, 0.9);
  for (int q = 0; q < 9; ++q) same.row(q) = row.transpose();
  CHECK(diversityMetric(same, 3, 3).mean == 0.0);

  // Ties break to the lower index; selection orders by descending weight.
  Eigen::MatrixXd tied = Eigen::MatrixXd::Zero(4, 4);
  tied.row(0) << 0.1, 0.4, 0.4, 0.1;
  tied.row(1) << 0.25, 0.25, 0.25, 0.25;
  tied.row(2) << 0.05, 0.6, 0.05, 0.3;
  tied.row(3) << 0.7, 0.1, 0.1, 0.1;
  const DiversityReport t2 = diversityMetric(tied, 2, 2);
  CHECK(t2.topIndices[0] == std::vector<int>{1, 2});
  CHECK(t2.topIndices[1] == std::vector<int>{0, 1});
  CHECK(t2.topIndices[2] == std::vector<int>{1, 3});
  // Row 2 concatenates cell 1 = (0,1) before cell 3 = (1,1).
  CHECK(t2.coordinates(2, 0) == 0);
  CHECK(t2.coordinates(2, 1) == 1);
  CHECK(t2.coordinates(2, 2) == 1);
  CHECK(t2.coordinates(2, 3) == 1);

  // Same top sets selected in different weight order still count as spread.
  Eigen::MatrixXd reordered = Eigen::MatrixXd::Zero(4, 4);
  reordered.row(0) << 0.6, 0.3, 0.05, 0.05;
  reordered.row(1) << 0.3, 0.6, 0.05, 0.05;
  reordered.row(2) << 0.6, 0.3, 0.05, 0.05;
  reordered.row(3) << 0.6, 0.3, 0.05, 0.05;
  CHECK(diversityMetric(reordered, 2, 2).mean > 0.0);
}

TEST_CASE("diversity metric is invariant exactly under grid isometries") {
  const int N = 3, P = 9;
  Rng rng = makeRng(404, Stream::OracleProbe);
  std::uniform_real_distribution<double> unif(0.05, 1.0);
  Eigen::MatrixXd attn(P, P);
  for (int q = 0; q < P; ++q) {
    for (int k = 0; k < P; ++k) attn(q, k) = unif(rng);
    attn.row(q) /= attn.row(q).sum();
  }
  const double base = diversityMetric(attn, N, 2).mean;
  CHECK(base > 0.0);

  const auto applyPerm = [&](const std::vector<int>& perm) {
    Eigen::MatrixXd out(P, P);
    for (int q = 0; q < P; ++q)
      for (int k = 0; k < P; ++k) out(perm[q], perm[k]) = attn(q, k);
    return out;
  };
  const auto cellPerm = [&](auto&& map) {
    std::vector<int> perm(P);
    for (int r = 0; r < N; ++r)
      for (int c = 0; c < N; ++c) {
        auto [r2, c2] = map(r, c);
        perm[r * N + c] = r2 * N + c2;
      }
    return perm;
  };

  const auto rot90 = cellPerm([&](int r, int c) { return std::pair{c, N - 1 - r}; });
  const auto rot180 = cellPerm([&](int r, int c) { return std::pair{N - 1 - r, N - 1 - c}; });
  const auto rot270 = cellPerm([&](int r, int c) { return std::pair{N - 1 - c, r}; });
  const auto reflect = cellPerm([&](int r, int c) { return std::pair{r, N - 1 - c}; });
  for (const auto& perm : {rot90, rot180, rot270, reflect}) {
    CHECK(diversityMetric(applyPerm(perm), N, 2).mean == doctest::Approx(base).epsilon(1e-12));
  }

  // A non-isometric relabeling (swap two cells at different radii) changes it.
  std::vector<int> swap02(P);
  std::iota(swap02.begin(), swap02.end(), 0);
  std::swap(swap02[0], swap02[4]);
  CHECK(std::abs(diversityMetric(applyPerm(swap02), N, 2).mean - base) > 1e-6);
}

TEST_CASE("diversity metric rejects bad shapes and arguments") {
  const Eigen::MatrixXd ok = Eigen::MatrixXd::Identity(9, 9);
  CHECK_THROWS_AS(diversityMetric(ok, 2, 1), std::invalid_argument);  // 9 != 2*2
  CHECK_THROWS_AS(diversityMetric(Eigen::MatrixXd::Identity(9, 8), 3, 1), std::invalid_argument);
  CHECK_THROWS_AS(diversityMetric(ok, 3, 0), std::invalid_argument);
  CHECK_THROWS_AS(diversityMetric(ok, 3, 10), std::invalid_argument);
  Eigen::MatrixXd nan = ok;
  nan(0, 0) = std::nan("");
  CHECK_THROWS_AS(diversityMetric(nan, 3, 1), std::invalid_argument);
}
