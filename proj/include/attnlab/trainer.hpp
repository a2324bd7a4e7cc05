#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "attnlab/attention_core.hpp"
#include "attnlab/cl_model.hpp"
#include "attnlab/config.hpp"
#include "attnlab/dynamics_tracker.hpp"
#include "attnlab/synth_data.hpp"

namespace attnlab {

// One row of the scalar training trace; rows share their cadence with the
// correlation snapshots (step 0, every logInterval-th step, and the last step).
struct TraceRow {
  long step = 0;
  double loss = 0.0;  // fresh evaluation at the logged weights
  double lossStdErr = 0.0;
  double gradMaxAbs = 0.0;     // largest |entry| of the latest ascent direction
  double gradEmaMaxAbs = 0.0;  // largest |entry| of the window-averaged direction
};

// A finished (or divergence-aborted) run, in memory.
struct RunResult {
  ExperimentConfig config;  // resolved echo: numeric eta, frozen lambda/tau/sigma0Sq
  DataSpec spec;
  Eigen::MatrixXd qFinal;  // on divergence: the last finite weights
  long stepsTaken = 0;
  CorrelationTrace trace;      // snapshot ppK carries the accumulated position pieces
  std::vector<TraceRow> rows;  // same steps as trace
  long checkpointStep = -1;    // first step whose averaged direction dips under
                               // gradNormTol (armed only after a full window); -1 = never
  bool diverged = false;
  std::string divergenceMessage;
};

// Trains Q from zero under the configured objective. Scale-dependent knobs
// are resolved first; a missing eta triggers the stability probe. Config and
// shape problems throw std::invalid_argument; divergence is recorded in the
// result rather than thrown.
RunResult runExperiment(const ExperimentConfig& config);

// Largest stable contrastive step size: powers of two in 2^[-6,10], each
// probed for probeSteps steps on a seed-frozen batch sequence; a candidate
// survives when no weight entry overflows and the loss ends no higher than
// it started. Throws std::runtime_error when nothing survives.
double clBisectEta(const DataSpec& spec, const ClOptions& opts, std::uint64_t seed,
                   int probeSteps = 30);

// Attention map of trained weights on one clean reference draw (cluster and
// contents from the Evaluation stream of `seed`). The reconstruction map uses
// content+position keys with nothing masked; the contrastive map uses bare
// content keys. Rows are queries, columns keys.
Eigen::MatrixXd referenceAttention(const DataSpec& spec, const Eigen::MatrixXd& Q,
                                   Objective objective, std::uint64_t seed);

// ---- run artifacts -------------------------------------------------------
//
// writeRunArtifacts produces, inside `dir` (created when absent):
//   trace.csv            scalar rows (schema comment + header, %.17g floats)
//   correlations.csv     long-format correlation series for tracked patches
//   phases.json          stage classification of every (patch, cluster) pair
//   report.json          final-weights checks, diversity, label census
//   q_final.csv          the weight matrix, one row per line
//   resolved_config.json the exact configuration needed to repeat the run

void writeRunArtifacts(const RunResult& result, const std::filesystem::path& dir);

// Key of one correlation series read back from correlations.csv.
//   quantity "phi":        index = 1-based feature number (1 = global feature)
//   quantity "ups_self" / "ups_own" / "ups_global": index = 0
struct SeriesKey {
  int patch = 0;
  int cluster = 0;
  std::string quantity;
  int index = 0;

  bool operator<(const SeriesKey& o) const {
    return std::tie(patch, cluster, quantity, index) <
           std::tie(o.patch, o.cluster, o.quantity, o.index);
  }
};

using SeriesMap = std::map<SeriesKey, std::vector<std::pair<long, double>>>;

// Artifacts read back for plotting and comparison. Throws std::runtime_error
// on missing files or schema-version mismatches.
struct RunArtifacts {
  ExperimentConfig config;
  std::vector<TraceRow> rows;
  SeriesMap series;
  Eigen::MatrixXd qFinal;
  nlohmann::json phases;
  nlohmann::json report;
};

RunArtifacts readRunArtifacts(const std::filesystem::path& dir);

}  // namespace attnlab
