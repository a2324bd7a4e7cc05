#include "attnlab/dynamics_tracker.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <utility>

#include <nlohmann/json.hpp>

#include "attnlab/mae_model.hpp"
#include "attnlab/oracle.hpp"
#include "attnlab/rng.hpp"

namespace attnlab {

namespace {

// Last index in (lo, n-1] where cond holds; lo if it never does. second == false
// when the condition still holds at the final entry (boundary beyond the trace).
template <class Cond>
std::pair<int, bool> lastHolding(int lo, int n, Cond cond) {
  for (int i = n - 1; i > lo; --i) {
    if (cond(i)) return {i, i != n - 1};
  }
  return {lo, true};
}

void validateTrace(const CorrelationTrace& trace, const DataSpec& spec) {
  if (trace.empty()) throw std::invalid_argument("classifyPhase: empty trace");
  if (trace.front().step != 0) throw std::invalid_argument("classifyPhase: trace must start at step 0");
  long prev = -1;
  for (const auto& snap : trace) {
    if (snap.step <= prev) throw std::invalid_argument("classifyPhase: steps must be ascending");
    prev = snap.step;
    if (snap.fp.rows() != spec.P || snap.fp.cols() != static_cast<long>(spec.K) * spec.N) {
      throw std::invalid_argument("classifyPhase: fp block shape does not match the spec");
    }
  }
}

nlohmann::json boundaryJson(long t) {
  if (t == kNotReached) return nullptr;
  return t;
}

}  // namespace

const char* phaseLabelName(PhaseLabel label) {
  switch (label) {
    case PhaseLabel::P1S1: return "P1S1";
    case PhaseLabel::P1S2: return "P1S2";
    case PhaseLabel::P2S1: return "P2S1";
    case PhaseLabel::P2S2: return "P2S2";
    case PhaseLabel::NegS1: return "NEG_S1";
    case PhaseLabel::NegS2: return "NEG_S2";
    case PhaseLabel::GlobalS1: return "GLOBAL_S1";
    case PhaseLabel::GlobalS2: return "GLOBAL_S2";
    case PhaseLabel::Converged: return "CONVERGED";
  }
  return "?";
}

std::vector<PhaseSeries> classifyPhase(const CorrelationTrace& trace, const DataSpec& spec,
                                       const ThresholdConfig& thresholds) {
  validateTrace(trace, spec);
  const double zLow = spec.zLaw.low;
  const double zUp = spec.zLaw.up;
  if (!(zLow > 0.0) || zUp < zLow) {
    throw std::invalid_argument("classifyPhase: latent-scale law needs 0 < low <= up");
  }
  if (!(thresholds.epsilon > 0.0) || thresholds.epsilon >= 3.0) {
    throw std::invalid_argument("classifyPhase: epsilon must lie in (0, 3)");
  }
  if (!(thresholds.c5 > 0.0)) throw std::invalid_argument("classifyPhase: c5 must be positive");

  const int n = static_cast<int>(trace.size());
  const double logP = std::log(static_cast<double>(spec.P));
  const double delta = infoGap(spec);
  const double tailFactor = std::sqrt(3.0 / thresholds.epsilon) - 1.0;
  const auto tOf = [&](int i) { return i >= 0 ? trace[i].step : trace.front().step - 1; };

  std::vector<PhaseSeries> out;
  out.reserve(static_cast<std::size_t>(spec.P) * spec.K);
  for (int p = 0; p < spec.P; ++p) {
    for (int k = 0; k < spec.K; ++k) {
      PhaseSeries s;
      s.patch = p;
      s.cluster = k;
      s.ownArea = spec.areaOf[k][p];
      s.globalPatch = (s.ownArea == 0);
      s.negativeGap = !s.globalPatch && delta <= 0.0;

      std::vector<double> phi1(n), phin(n);
      for (int i = 0; i < n; ++i) {
        phi1[i] = trace[i].fp(p, k * spec.N + 0);
        phin[i] = trace[i].fp(p, k * spec.N + s.ownArea);
      }

      if (s.globalPatch || s.negativeGap) {
        // Two stages, tracked on the own-area correlation (the dominant feature
        // for a global patch, the local one under a negative gap).
        const double exponent = s.globalPatch ? (1.0 - spec.kappaC) : (1.0 - spec.kappaS);
        const std::vector<double>& ref = s.globalPatch ? phi1 : phin;
        s.thr2 = (exponent / zLow) * logP * thresholds.t2Multiplier;
        s.thr2Eps = std::log(thresholds.c5 * tailFactor * std::pow(spec.P, exponent)) *
                    thresholds.t2EpsMultiplier;
        auto [i2, r2] = lastHolding(-1, n, [&](int i) { return ref[i] <= s.thr2; });
        if (r2) {
          s.t2 = tOf(i2);
          auto [i2e, r2e] = lastHolding(i2, n, [&](int i) { return ref[i] <= s.thr2Eps; });
          if (r2e) s.t2Eps = tOf(i2e);
        }
      } else {
        s.thr1 = -(1.0 / zUp) * (delta / 2.0 - 0.01) * logP * thresholds.t1Multiplier;
        s.thrGap = (delta / (2.0 * zLow) + 0.01 / zLow +
                    thresholds.c1Star * (1.0 - spec.kappaS) / zUp) *
                   logP * thresholds.t1TildeMultiplier;
        s.thr2 = ((1.0 - spec.kappaS) / zLow) * logP * thresholds.t2Multiplier;
        s.thr2Eps =
            std::log(thresholds.c5 * tailFactor * spec.N) * thresholds.t2EpsMultiplier;
        auto [i1, r1] = lastHolding(-1, n, [&](int i) { return phi1[i] >= s.thr1; });
        if (r1) {
          s.t1 = tOf(i1);
          auto [i1t, r1t] =
              lastHolding(i1, n, [&](int i) { return phin[i] - phi1[i] <= s.thrGap; });
          if (r1t) {
            s.t1Tilde = tOf(i1t);
            auto [i2, r2] = lastHolding(i1t, n, [&](int i) { return phin[i] <= s.thr2; });
            if (r2) {
              s.t2 = tOf(i2);
              auto [i2e, r2e] =
                  lastHolding(i2, n, [&](int i) { return phin[i] <= s.thr2Eps; });
              if (r2e) s.t2Eps = tOf(i2e);
            }
          }
        }
      }

      s.labels.resize(n);
      for (int i = 0; i < n; ++i) {
        const long t = trace[i].step;
        if (s.globalPatch) {
          s.labels[i] = t <= s.t2 ? PhaseLabel::GlobalS1
                        : t <= s.t2Eps ? PhaseLabel::GlobalS2
                                       : PhaseLabel::Converged;
        } else if (s.negativeGap) {
          s.labels[i] = t <= s.t2 ? PhaseLabel::NegS1
                        : t <= s.t2Eps ? PhaseLabel::NegS2
                                       : PhaseLabel::Converged;
        } else {
          s.labels[i] = t <= s.t1        ? PhaseLabel::P1S1
                        : t <= s.t1Tilde ? PhaseLabel::P1S2
                        : t <= s.t2      ? PhaseLabel::P2S1
                        : t <= s.t2Eps   ? PhaseLabel::P2S2
                                         : PhaseLabel::Converged;
        }
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

nlohmann::json PhaseSeries::toJson() const {
  nlohmann::json labelNames = nlohmann::json::array();
  for (PhaseLabel l : labels) labelNames.push_back(phaseLabelName(l));
  return nlohmann::json{{"patch", patch},
                        {"cluster", cluster},
                        {"ownArea", ownArea},
                        {"globalPatch", globalPatch},
                        {"negativeGap", negativeGap},
                        {"t1", boundaryJson(t1)},
                        {"t1Tilde", boundaryJson(t1Tilde)},
                        {"t2", boundaryJson(t2)},
                        {"t2Eps", boundaryJson(t2Eps)},
                        {"thr1", thr1},
                        {"thrGap", thrGap},
                        {"thr2", thr2},
                        {"thr2Eps", thr2Eps},
                        {"labels", std::move(labelNames)}};
}

TheoremReport theoremCheck(const DataSpec& spec, const Eigen::MatrixXd& Q, double epsilon,
                           const TheoremCheckOptions& opts) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("theoremCheck: epsilon must be positive");
  if (Q.rows() != spec.d || Q.cols() != spec.d) {
    throw std::invalid_argument("theoremCheck: weight shape does not match the spec");
  }
  if (std::lround(opts.gamma * spec.P) < 1) {
    throw std::invalid_argument("theoremCheck: gamma masks no patch");
  }

  TheoremReport rep;
  rep.objective = opts.objective;
  rep.epsilon = epsilon;
  rep.attnConstant = opts.attnConstant;
  const double attnTol = opts.attnConstant * epsilon;

  Rng rng = makeRng(opts.seed, Stream::Evaluation);
  rep.patches.resize(spec.P);
  int attnFailures = 0;
  for (int p = 0; p < spec.P; ++p) {
    PatchCheck& pc = rep.patches[p];
    pc.patch = p;
    for (int s = 0; s < opts.maskSamples; ++s) {
      const Sample sample = drawSample(spec, rng);
      const int own = spec.areaOf[sample.clusterId][p];
      // Condition on "p masked, own area not fully masked": unmasked-own attention
      // is degenerate (empty target) on the complement, where no matrix can score.
      MaskedSample masked;
      int attempts = 0;
      for (;;) {
        masked = applyMask(sample, spec, opts.gamma, rng);
        if (!masked.unmasked[p]) {
          int kept = 0;
          for (int q : spec.partitions[sample.clusterId][own]) kept += masked.unmasked[q];
          if (kept >= 1) break;
        }
        if (++attempts > 100000) {
          throw std::runtime_error("theoremCheck: no mask keeps an unmasked own-area patch");
        }
      }
      const AttentionProfile prof = maeScores(spec, masked, Q);
      const double attn = prof.unmaskedAreaAttn(p, own);
      const double sq = (1.0 - attn) * (1.0 - attn);
      pc.worstOwnAttnSq = std::max(pc.worstOwnAttnSq, sq);
      ++pc.draws;
      const bool local = own >= 1;
      ++(local ? rep.localDraws : rep.globalDraws);
      if (sq > attnTol) {
        ++pc.failures;
        ++attnFailures;
        ++(local ? rep.localFailures : rep.globalFailures);
      }
    }
  }
  rep.localityPass = rep.localFailures == 0;

  rep.lossPass = true;
  if (opts.objective == Objective::Mae) {
    MaeOptions mo;
    mo.gamma = opts.gamma;
    mo.mode = opts.lossMode;
    mo.batch = opts.lossBatch;
    Rng lossRng = makeRng(opts.seed, Stream::OracleProbe);
    const LossReport loss = maeLoss(spec, Q, mo, &lossRng);
    for (int p = 0; p < spec.P; ++p) {
      rep.patches[p].lossGap = loss.perPatch(p) - loss.lowBoundPerPatch(p);
      if (rep.patches[p].lossGap > epsilon) rep.lossPass = false;
    }
  }
  for (PatchCheck& pc : rep.patches) {
    pc.pass = pc.failures == 0 && pc.lossGap <= epsilon;
  }

  if (opts.objective == Objective::Cl) {
    const CorrelationSnapshot snap = extractCorrelations(Q, spec);
    rep.phiGapMin = std::numeric_limits<double>::infinity();
    for (int p = 0; p < spec.P; ++p) {
      for (int k = 0; k < spec.K; ++k) {
        double worstLocal = -std::numeric_limits<double>::infinity();
        for (int m = 1; m < spec.N; ++m) {
          worstLocal = std::max(worstLocal, snap.fp(p, k * spec.N + m));
        }
        if (spec.N > 1) {
          rep.phiGapMin = std::min(rep.phiGapMin, snap.fp(p, k * spec.N) - worstLocal);
        }
      }
    }
    if (spec.N <= 1) rep.phiGapMin = 0.0;
    rep.phiOrderingPass = rep.phiGapMin >= 0.0;

    bool concentrated = true;
    for (int s = 0; s < opts.contentSamples; ++s) {
      const Sample sample = drawSample(spec, rng);
      const AttentionProfile prof = clScores(spec, sample.contents(spec), sample.clusterId, Q);
      for (int p = 0; p < spec.P; ++p) {
        const double sq = std::pow(1.0 - prof.areaScore(p, 0), 2);
        rep.worstGlobalAttnSq = std::max(rep.worstGlobalAttnSq, sq);
        if (sq > attnTol) concentrated = false;
      }
    }
    rep.globalConcentrationPass = concentrated;
    rep.pass = rep.globalConcentrationPass && rep.phiOrderingPass;
  } else {
    rep.pass = rep.lossPass && attnFailures == 0;
  }
  return rep;
}

nlohmann::json TheoremReport::toJson() const {
  nlohmann::json perPatch = nlohmann::json::array();
  for (const PatchCheck& pc : patches) {
    perPatch.push_back({{"patch", pc.patch},
                        {"lossGap", pc.lossGap},
                        {"worstOwnAttnSq", pc.worstOwnAttnSq},
                        {"draws", pc.draws},
                        {"failures", pc.failures},
                        {"pass", pc.pass}});
  }
  nlohmann::json j{{"objective", objective == Objective::Mae ? "mae" : "cl"},
                   {"epsilon", epsilon},
                   {"attnConstant", attnConstant},
                   {"patches", std::move(perPatch)},
                   {"lossPass", lossPass},
                   {"localityPass", localityPass},
                   {"localDraws", localDraws},
                   {"localFailures", localFailures},
                   {"globalDraws", globalDraws},
                   {"globalFailures", globalFailures},
                   {"pass", pass}};
  if (objective == Objective::Cl) {
    j["phiGapMin"] = phiGapMin;
    j["phiOrderingPass"] = phiOrderingPass;
    j["worstGlobalAttnSq"] = worstGlobalAttnSq;
    j["globalConcentrationPass"] = globalConcentrationPass;
  }
  return j;
}

DiversityReport diversityMetric(const Eigen::MatrixXd& attn, int gridSide, int n) {
  if (gridSide < 1 || attn.rows() != attn.cols() ||
      attn.rows() != static_cast<long>(gridSide) * gridSide) {
    throw std::invalid_argument("diversityMetric: attention must be P x P with P = gridSide^2");
  }
  const int P = static_cast<int>(attn.rows());
  if (n < 1 || n > P) throw std::invalid_argument("diversityMetric: n must lie in [1, P]");
  if (!attn.allFinite()) throw std::invalid_argument("diversityMetric: non-finite attention");

  DiversityReport rep;
  rep.gridSide = gridSide;
  rep.n = n;
  rep.topIndices.resize(P);
  rep.coordinates.resize(P, 2 * n);
  std::vector<int> order(P);
  for (int q = 0; q < P; ++q) {
    std::iota(order.begin(), order.end(), 0);
    // Stable sort keeps equal weights in index order: ties go to the lower index.
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return attn(q, a) > attn(q, b); });
    rep.topIndices[q].assign(order.begin(), order.begin() + n);
    for (int l = 0; l < n; ++l) {
      rep.coordinates(q, 2 * l) = order[l] / gridSide;
      rep.coordinates(q, 2 * l + 1) = order[l] % gridSide;
    }
  }
  KahanSum sum;
  for (int a = 0; a < P; ++a) {
    for (int b = 0; b < P; ++b) {
      if (a == b) continue;
      sum.add((rep.coordinates.row(a) - rep.coordinates.row(b)).norm());
    }
  }
  rep.mean = P > 1 ? sum.value() / (static_cast<double>(P) * (P - 1)) : 0.0;
  return rep;
}

nlohmann::json DiversityReport::toJson() const {
  return nlohmann::json{
      {"gridSide", gridSide}, {"n", n}, {"topIndices", topIndices}, {"mean", mean}};
}

}  // namespace attnlab
