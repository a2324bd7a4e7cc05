#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include "attnlab/attention_core.hpp"
#include "attnlab/config.hpp"
#include "attnlab/synth_data.hpp"

namespace attnlab {

// Logged correlation read-outs of a training run, ascending in step, starting at
// step 0 (the zero-weight snapshot). Only the fp block is consumed here.
using CorrelationTrace = std::vector<CorrelationSnapshot>;

// Training stages of one (patch, cluster) pair, keyed by where the patch sits in
// that cluster's partition and by the sign of the information gap:
//   local patch, positive gap: P1S1 -> P1S2 -> P2S1 -> P2S2 -> CONVERGED
//   local patch, negative gap: NEG_S1 -> NEG_S2 -> CONVERGED
//   patch in the dominant area: GLOBAL_S1 -> GLOBAL_S2 -> CONVERGED
enum class PhaseLabel {
  P1S1,
  P1S2,
  P2S1,
  P2S2,
  NegS1,
  NegS2,
  GlobalS1,
  GlobalS2,
  Converged
};

const char* phaseLabelName(PhaseLabel label);

// Sentinel for a stage boundary whose exit condition still holds at the end of
// the trace: the crossing was not reached within the logged horizon.
inline constexpr long kNotReached = std::numeric_limits<long>::max();

// Stage classification of one (patch, cluster) pair. Boundary fields hold the
// last step of each stage (the trace may be subsampled; values are step numbers,
// not trace indices): a stage ends at the last logged step where its exit
// condition has not yet fired. kNotReached marks a boundary beyond the trace;
// -1 (more generally, one step before the first logged one) marks a stage that
// was already over when logging started. Boundaries that a branch never uses
// (t1/t1Tilde outside the positive-gap local branch) stay kNotReached.
struct PhaseSeries {
  int patch = 0;
  int cluster = 0;
  int ownArea = 0;           // index of the patch's area in this cluster (0 = dominant)
  bool globalPatch = false;  // ownArea == 0
  bool negativeGap = false;  // information gap <= 0 (local branches only)

  long t1 = kNotReached;       // P1S1 end
  long t1Tilde = kNotReached;  // P1S2 end
  long t2 = kNotReached;       // P2S1 / NEG_S1 / GLOBAL_S1 end
  long t2Eps = kNotReached;    // P2S2 / NEG_S2 / GLOBAL_S2 end

  // Resolved boundary levels, after multipliers (for reports).
  double thr1 = 0.0;
  double thrGap = 0.0;
  double thr2 = 0.0;
  double thr2Eps = 0.0;

  std::vector<PhaseLabel> labels;  // one per trace entry

  nlohmann::json toJson() const;
};

// Applies the stage-boundary definitions to a logged run. Boundaries follow the
// "last step where the stage condition holds" convention, searched after the
// previous boundary, so labels never regress; a condition still holding at the
// trace end leaves that boundary (and all later ones) at kNotReached.
//
// Boundary levels for a local patch whose cluster gap is positive (U and L are
// the support ends of the latent-scale law; logP = ln P):
//   stage 1 of phase 1 ends when  phi_{p->v1}  drops below -(1/U)(gap/2 - 0.01) logP
//   stage 2 of phase 1 ends when  phi_{p->vn} - phi_{p->v1}  exceeds
//                                 (gap/(2L) + 0.01/L + c1Star (1-kappaS)/U) logP
//   stage 1 of phase 2 ends when  phi_{p->vn}  exceeds ((1-kappaS)/L) logP
//   stage 2 of phase 2 ends when  phi_{p->vn}  exceeds log(c5 (sqrt(3/eps)-1) N)
// Negative gap: the P1 stages are skipped; NEG_S1 ends at the same level as T2
// and NEG_S2 at log(c5 (sqrt(3/eps)-1) P^(1-kappaS)), both on phi_{p->vn}.
// Dominant-area patch: GLOBAL_S1 ends when phi_{p->v1} exceeds
// ((1-kappaC)/L) logP and GLOBAL_S2 at log(c5 (sqrt(3/eps)-1) P^(1-kappaC)).
// Each level is scaled by its multiplier from `thresholds`.
//
// Returns one series per (patch, cluster), patch-major: series[p*K + k].
// Throws std::invalid_argument if the trace is empty, does not start at step 0,
// has non-increasing steps, or carries fp blocks of the wrong shape.
std::vector<PhaseSeries> classifyPhase(const CorrelationTrace& trace, const DataSpec& spec,
                                       const ThresholdConfig& thresholds = {});

struct TheoremCheckOptions {
  Objective objective = Objective::Mae;
  double gamma = 0.5;         // masking ratio for the sampled-mask attention checks
  double attnConstant = 2.0;  // c in (1 - attention)^2 <= c * epsilon
  // Per-patch masks to sample, conditioned on the patch being masked while its
  // own area keeps at least one unmasked patch (the target of the attention
  // check is empty on the complement, so no weight matrix could score there).
  int maskSamples = 20;
  int contentSamples = 8;  // content draws for the contrastive concentration check
  RunMode lossMode = RunMode::Exact;
  int lossBatch = 2048;  // Monte Carlo draws when lossMode is MonteCarlo
  std::uint64_t seed = 101;
};

// Per-patch outcome of the reconstruction-objective checks.
struct PatchCheck {
  int patch = 0;
  double lossGap = 0.0;         // patch loss minus its unavoidable floor
  double worstOwnAttnSq = 0.0;  // max over draws of (1 - own-area unmasked attention)^2
  int draws = 0;
  int failures = 0;             // draws where (1-attn)^2 exceeded attnConstant * epsilon
  bool pass = false;            // lossGap <= epsilon and failures == 0
};

// Success-criteria report for a trained weight matrix.
//
// The reconstruction-style locality check (sampled masks with the patch masked;
// own-area unmasked attention) runs for both objectives so the two training
// signatures can be compared on the same footing. The contrastive fields are
// populated only for Objective::Cl.
struct TheoremReport {
  Objective objective = Objective::Mae;
  double epsilon = 0.0;
  double attnConstant = 0.0;

  std::vector<PatchCheck> patches;
  bool lossPass = false;      // every patch: lossGap <= epsilon (true under Cl: not checked)
  bool localityPass = false;  // no attention failures on draws where the patch was local
  int localDraws = 0;
  int localFailures = 0;
  int globalDraws = 0;  // draws where the patch sat in the dominant area
  int globalFailures = 0;

  // Contrastive-objective checks.
  double phiGapMin = 0.0;  // min over (p,k) of phi_{p->v1} - max_{m>1} phi_{p->vm}
  bool phiOrderingPass = false;
  double worstGlobalAttnSq = 0.0;  // max over draws/patches of (1 - dominant-area attention)^2
  bool globalConcentrationPass = false;

  bool pass = false;  // Mae: lossPass && no attention failures; Cl: concentration && ordering

  nlohmann::json toJson() const;
};

// Evaluates the end-of-training success criteria on Q.
//   Mae: per masked patch, loss above the floor <= epsilon and
//        (1 - own-area unmasked attention)^2 <= attnConstant * epsilon.
//   Cl:  dominant-area attention concentration on clean draws plus the
//        dominant-feature correlation ordering, with the reconstruction-style
//        locality fields reported alongside for signature comparison.
// Throws std::invalid_argument on a non-positive epsilon or a Q shape that does
// not match the spec's ambient dimension.
TheoremReport theoremCheck(const DataSpec& spec, const Eigen::MatrixXd& Q, double epsilon,
                           const TheoremCheckOptions& opts = {});

// Where each query concentrates its attention on an implicit gridSide x gridSide
// grid: per query, the indices of its n largest weights (ties to the lower
// index), their (row, col) coordinates concatenated in descending-weight order.
struct DiversityReport {
  int gridSide = 0;
  int n = 0;
  std::vector<std::vector<int>> topIndices;  // per query, descending weight
  Eigen::MatrixXd coordinates;               // P x 2n: (row0, col0, row1, col1, ...)
  double mean = 0.0;  // mean Euclidean distance over the P*(P-1) ordered query pairs

  nlohmann::json toJson() const;
};

// Spread of the per-query attention footprints: mean pairwise Euclidean distance
// between the queries' top-n coordinate vectors. Key index i sits at grid cell
// (i / gridSide, i % gridSide). Zero iff all queries select identical footprints;
// invariant under any grid isometry applied to queries and keys simultaneously.
// Throws std::invalid_argument unless attn is P x P with P == gridSide^2 and
// 1 <= n <= P.
DiversityReport diversityMetric(const Eigen::MatrixXd& attn, int gridSide, int n = 10);

}  // namespace attnlab
