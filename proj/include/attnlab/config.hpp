#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace attnlab {

enum class Objective { Mae, Cl };
enum class RunMode { Exact, MonteCarlo };
enum class ZLawKind { PointMass, Uniform };

struct ZLawConfig {
  ZLawKind kind = ZLawKind::Uniform;
  double low = 0.8;   // support lower end (uniform) / the point value
  double up = 1.2;    // support upper end
};

// Multipliers and heuristic constants for the phase-threshold definitions.
struct ThresholdConfig {
  double t1Multiplier = 1.0;
  double t1TildeMultiplier = 1.0;
  double t2Multiplier = 1.0;
  double t2EpsMultiplier = 1.0;
  double c1Star = 1.0;    // stage-2 target level constant
  double c5 = 1.0;        // tail-threshold constant
  double epsilon = 0.05;  // tail accuracy for the final-stage threshold
};

// Every knob of a run. Optional fields resolve to scale-dependent defaults
// (documented next to each) once P / d are known; resolve() freezes them.
struct ExperimentConfig {
  Objective objective = Objective::Mae;

  // --- data distribution ---
  int P = 0;
  int K = 1;
  std::optional<double> kappaC;  // area sizes via round(P^kappa)
  std::optional<double> kappaS;
  std::optional<int> c1;         // explicit-size mode (micro instances)
  std::optional<int> cs;
  ZLawConfig zLaw;
  bool contiguous = false;  // contiguous per-cluster partitions instead of random

  // --- masking / augmentation ---
  double gamma = 0.5;
  double gamma0 = 0.5;

  // --- optimization ---
  std::optional<double> eta;       // absent => auto (stability bisection)
  std::optional<double> lambda;    // CL weight decay; default 1/(P ln P)
  std::optional<double> tau;       // CL temperature; default 1/ln d
  std::optional<double> sigma0Sq;  // CL per-coordinate noise variance; default 1/d
  bool clNoise = true;             // disable for deterministic micro oracles
  int nNegatives = 32;
  int batch = 256;  // Monte Carlo samples (MAE) / batches (CL) per step
  long maxSteps = 1000;
  RunMode mode = RunMode::Exact;
  bool reconstructAll = false;  // reconstruct every patch, not just masked ones

  // --- tracking / evaluation ---
  std::vector<int> trackedPatches;  // empty => all patches
  ThresholdConfig thresholds;
  long logInterval = 1;            // trace cadence in steps
  double gradNormTol = 1e-4;       // convergence checkpoint on smoothed gradient norm
  long gradEmaWindow = 20000;      // smoothing window (steps) for that norm
  bool stopAtCheckpoint = false;   // end the run once the checkpoint fires
  int evalMasks = 200;             // held-out masks per tracked patch (reconstruction check)
  int evalSamples = 20;            // held-out augmented samples (concentration check)
  double theoremEpsilon = 0.05;    // loss-gap tolerance in the final checks
  double theoremC = 2.0;           // (1-attention)^2 tolerance = theoremC * theoremEpsilon
  int diversityTopN = 10;

  std::uint64_t seed = 12345;
  std::string outputDir;  // empty => derived from output root + seed

  // Parse/serialize. fromJson rejects unknown keys and ill-typed values.
  static ExperimentConfig fromJson(const nlohmann::json& j);
  static ExperimentConfig fromFile(const std::string& path);
  nlohmann::json toJson() const;  // resolved echo: every knob, numeric defaults frozen

  // Fill scale-dependent defaults given the ambient dimension d; validates ranges.
  void resolve(int ambientDim);
};

// Built-in configurations for the headline experiments and micro oracles.
std::vector<std::string> presetNames();
ExperimentConfig presetConfig(const std::string& name);

}  // namespace attnlab
