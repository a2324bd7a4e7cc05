#include "attnlab/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace attnlab {

using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& ctx, const std::string& msg) {
  throw std::invalid_argument(ctx + ": " + msg);
}

void rejectUnknownKeys(const json& j, const std::set<std::string>& allowed, const std::string& ctx) {
  if (!j.is_object()) fail(ctx, "expected a JSON object");
  for (const auto& item : j.items()) {
    if (allowed.find(item.key()) == allowed.end()) fail(ctx, "unknown key '" + item.key() + "'");
  }
}

template <typename T>
T require(const json& j, const std::string& key, const std::string& ctx) {
  if (!j.contains(key)) fail(ctx, "missing required key '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    fail(ctx, "key '" + key + "' has the wrong type");
  }
}

template <typename T>
void readInto(const json& j, const std::string& key, T& out, const std::string& ctx) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    fail(ctx, "key '" + key + "' has the wrong type");
  }
}

template <typename T>
void readOptional(const json& j, const std::string& key, std::optional<T>& out, const std::string& ctx) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    fail(ctx, "key '" + key + "' has the wrong type");
  }
}

ZLawConfig parseZLaw(const json& j) {
  const std::string ctx = "ExperimentConfig.zLaw";
  rejectUnknownKeys(j, {"kind", "low", "up", "value"}, ctx);
  ZLawConfig z;
  const auto kind = require<std::string>(j, "kind", ctx);
  if (kind == "uniform") {
    z.kind = ZLawKind::Uniform;
    readInto(j, "low", z.low, ctx);
    readInto(j, "up", z.up, ctx);
    if (!(0.0 <= z.low && z.low < z.up)) fail(ctx, "need 0 <= low < up");
  } else if (kind == "point") {
    z.kind = ZLawKind::PointMass;
    double v = 1.0;
    readInto(j, "value", v, ctx);
    if (!(v > 0.0)) fail(ctx, "point value must be positive");
    z.low = z.up = v;
  } else {
    fail(ctx, "kind must be 'uniform' or 'point'");
  }
  return z;
}

json zLawToJson(const ZLawConfig& z) {
  if (z.kind == ZLawKind::PointMass) return json{{"kind", "point"}, {"value", z.low}};
  return json{{"kind", "uniform"}, {"low", z.low}, {"up", z.up}};
}

ThresholdConfig parseThresholds(const json& j) {
  const std::string ctx = "ExperimentConfig.thresholds";
  rejectUnknownKeys(j,
                    {"t1Multiplier", "t1TildeMultiplier", "t2Multiplier", "t2EpsMultiplier",
                     "c1Star", "c5", "epsilon"},
                    ctx);
  ThresholdConfig t;
  readInto(j, "t1Multiplier", t.t1Multiplier, ctx);
  readInto(j, "t1TildeMultiplier", t.t1TildeMultiplier, ctx);
  readInto(j, "t2Multiplier", t.t2Multiplier, ctx);
  readInto(j, "t2EpsMultiplier", t.t2EpsMultiplier, ctx);
  readInto(j, "c1Star", t.c1Star, ctx);
  readInto(j, "c5", t.c5, ctx);
  readInto(j, "epsilon", t.epsilon, ctx);
  if (t.epsilon <= 0.0) fail(ctx, "epsilon must be positive");
  return t;
}

}  // namespace

ExperimentConfig ExperimentConfig::fromJson(const json& j) {
  const std::string ctx = "ExperimentConfig";
  rejectUnknownKeys(
      j,
      {"objective",     "P",          "K",           "kappaC",      "kappaS",
       "c1",            "cs",         "zLaw",        "contiguous",  "gamma",
       "gamma0",        "eta",        "lambda",      "tau",         "sigma0Sq",
       "clNoise",       "nNegatives", "batch",       "maxSteps",    "mode",
       "reconstructAll", "trackedPatches", "thresholds", "logInterval", "gradNormTol",
       "gradEmaWindow", "stopAtCheckpoint", "evalMasks", "evalSamples", "theoremEpsilon",
       "theoremC",      "diversityTopN", "seed",        "outputDir"},
      ctx);

  ExperimentConfig c;
  const auto obj = require<std::string>(j, "objective", ctx);
  if (obj == "mae") {
    c.objective = Objective::Mae;
  } else if (obj == "cl") {
    c.objective = Objective::Cl;
  } else {
    fail(ctx, "objective must be 'mae' or 'cl'");
  }

  c.P = require<int>(j, "P", ctx);
  readInto(j, "K", c.K, ctx);
  readOptional(j, "kappaC", c.kappaC, ctx);
  readOptional(j, "kappaS", c.kappaS, ctx);
  readOptional(j, "c1", c.c1, ctx);
  readOptional(j, "cs", c.cs, ctx);
  if (j.contains("zLaw")) c.zLaw = parseZLaw(j.at("zLaw"));
  readInto(j, "contiguous", c.contiguous, ctx);
  readInto(j, "gamma", c.gamma, ctx);
  readInto(j, "gamma0", c.gamma0, ctx);

  if (j.contains("eta")) {
    const auto& e = j.at("eta");
    if (e.is_string()) {
      if (e.get<std::string>() != "auto") fail(ctx, "eta must be a number or 'auto'");
      c.eta.reset();
    } else if (e.is_number()) {
      c.eta = e.get<double>();
      if (*c.eta <= 0.0) fail(ctx, "eta must be positive");
    } else {
      fail(ctx, "eta must be a number or 'auto'");
    }
  }

  readOptional(j, "lambda", c.lambda, ctx);
  readOptional(j, "tau", c.tau, ctx);
  readOptional(j, "sigma0Sq", c.sigma0Sq, ctx);
  readInto(j, "clNoise", c.clNoise, ctx);
  readInto(j, "nNegatives", c.nNegatives, ctx);
  readInto(j, "batch", c.batch, ctx);
  readInto(j, "maxSteps", c.maxSteps, ctx);
  readInto(j, "reconstructAll", c.reconstructAll, ctx);

  if (j.contains("mode")) {
    const auto m = require<std::string>(j, "mode", ctx);
    if (m == "exact") {
      c.mode = RunMode::Exact;
    } else if (m == "mc") {
      c.mode = RunMode::MonteCarlo;
    } else {
      fail(ctx, "mode must be 'exact' or 'mc'");
    }
  }

  if (j.contains("trackedPatches")) {
    const auto& tp = j.at("trackedPatches");
    if (tp.is_string()) {
      if (tp.get<std::string>() != "all") fail(ctx, "trackedPatches must be a list or 'all'");
      c.trackedPatches.clear();
    } else if (tp.is_array()) {
      c.trackedPatches = tp.get<std::vector<int>>();
    } else {
      fail(ctx, "trackedPatches must be a list or 'all'");
    }
  }

  if (j.contains("thresholds")) c.thresholds = parseThresholds(j.at("thresholds"));
  readInto(j, "logInterval", c.logInterval, ctx);
  readInto(j, "gradNormTol", c.gradNormTol, ctx);
  readInto(j, "gradEmaWindow", c.gradEmaWindow, ctx);
  readInto(j, "stopAtCheckpoint", c.stopAtCheckpoint, ctx);
  readInto(j, "evalMasks", c.evalMasks, ctx);
  readInto(j, "evalSamples", c.evalSamples, ctx);
  readInto(j, "theoremEpsilon", c.theoremEpsilon, ctx);
  readInto(j, "theoremC", c.theoremC, ctx);
  readInto(j, "diversityTopN", c.diversityTopN, ctx);
  readInto(j, "seed", c.seed, ctx);
  readInto(j, "outputDir", c.outputDir, ctx);

  // Structural checks that do not need the ambient dimension.
  if (c.P < 4) fail(ctx, "P must be at least 4");
  if (c.K < 1) fail(ctx, "K must be at least 1");
  const bool kappaMode = c.kappaC.has_value() || c.kappaS.has_value();
  const bool sizeMode = c.c1.has_value() || c.cs.has_value();
  if (kappaMode == sizeMode)
    fail(ctx, "specify exactly one of (kappaC, kappaS) or explicit sizes (c1, cs)");
  if (kappaMode && (!c.kappaC || !c.kappaS)) fail(ctx, "kappaC and kappaS must be given together");
  if (sizeMode && (!c.c1 || !c.cs)) fail(ctx, "c1 and cs must be given together");
  if (kappaMode && !(0.0 < *c.kappaS && *c.kappaS < *c.kappaC && *c.kappaC <= 1.0))
    fail(ctx, "need 0 < kappaS < kappaC <= 1");
  if (!(0.0 < c.gamma && c.gamma < 1.0)) fail(ctx, "gamma must lie in (0,1)");
  if (!(0.0 < c.gamma0 && c.gamma0 < 1.0)) fail(ctx, "gamma0 must lie in (0,1)");
  if (c.nNegatives < 1) fail(ctx, "nNegatives must be positive");
  if (c.batch < 1) fail(ctx, "batch must be positive");
  if (c.maxSteps < 0) fail(ctx, "maxSteps must be non-negative");
  if (c.logInterval < 1) fail(ctx, "logInterval must be positive");
  for (int p : c.trackedPatches)
    if (p < 0 || p >= c.P) fail(ctx, "trackedPatches entries must lie in [0, P)");
  return c;
}

ExperimentConfig ExperimentConfig::fromFile(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("ExperimentConfig: cannot open '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::invalid_argument("ExperimentConfig: JSON parse error in '" + path + "': " + e.what());
  }
  return fromJson(j);
}

json ExperimentConfig::toJson() const {
  json j;
  j["objective"] = objective == Objective::Mae ? "mae" : "cl";
  j["P"] = P;
  j["K"] = K;
  if (kappaC) j["kappaC"] = *kappaC;
  if (kappaS) j["kappaS"] = *kappaS;
  if (c1) j["c1"] = *c1;
  if (cs) j["cs"] = *cs;
  j["zLaw"] = zLawToJson(zLaw);
  j["contiguous"] = contiguous;
  j["gamma"] = gamma;
  j["gamma0"] = gamma0;
  if (eta) {
    j["eta"] = *eta;
  } else {
    j["eta"] = "auto";
  }
  if (lambda) j["lambda"] = *lambda;
  if (tau) j["tau"] = *tau;
  if (sigma0Sq) j["sigma0Sq"] = *sigma0Sq;
  j["clNoise"] = clNoise;
  j["nNegatives"] = nNegatives;
  j["batch"] = batch;
  j["maxSteps"] = maxSteps;
  j["mode"] = mode == RunMode::Exact ? "exact" : "mc";
  j["reconstructAll"] = reconstructAll;
  if (trackedPatches.empty()) {
    j["trackedPatches"] = "all";
  } else {
    j["trackedPatches"] = trackedPatches;
  }
  j["thresholds"] = json{{"t1Multiplier", thresholds.t1Multiplier},
                         {"t1TildeMultiplier", thresholds.t1TildeMultiplier},
                         {"t2Multiplier", thresholds.t2Multiplier},
                         {"t2EpsMultiplier", thresholds.t2EpsMultiplier},
                         {"c1Star", thresholds.c1Star},
                         {"c5", thresholds.c5},
                         {"epsilon", thresholds.epsilon}};
  j["logInterval"] = logInterval;
  j["gradNormTol"] = gradNormTol;
  j["gradEmaWindow"] = gradEmaWindow;
  j["stopAtCheckpoint"] = stopAtCheckpoint;
  j["evalMasks"] = evalMasks;
  j["evalSamples"] = evalSamples;
  j["theoremEpsilon"] = theoremEpsilon;
  j["theoremC"] = theoremC;
  j["diversityTopN"] = diversityTopN;
  j["seed"] = seed;
  j["outputDir"] = outputDir;
  return j;
}

void ExperimentConfig::resolve(int ambientDim) {
  if (ambientDim < 2) throw std::invalid_argument("ExperimentConfig: ambient dimension too small");
  if (!lambda) lambda = 1.0 / (P * std::log(static_cast<double>(P)));
  if (!tau) tau = 1.0 / std::log(static_cast<double>(ambientDim));
  if (!sigma0Sq) sigma0Sq = 1.0 / static_cast<double>(ambientDim);
}

std::vector<std::string> presetNames() {
  return {"oracle-micro", "theorem41-mae-p64", "theorem42-positive", "theorem42-negative",
          "theorem43-cl-p64"};
}

ExperimentConfig presetConfig(const std::string& name) {
  json j;
  if (name == "oracle-micro") {
    // Smallest fully-enumerable instance: explicit sizes, quadrature latents.
    j = json{{"objective", "mae"}, {"P", 8},          {"K", 1},
             {"c1", 4},            {"cs", 2},         {"gamma", 0.5},
             {"eta", 0.5},         {"mode", "exact"}, {"maxSteps", 50},
             {"logInterval", 1},   {"seed", 1}};
  } else if (name == "theorem41-mae-p64") {
    // Reconstruction-convergence run: positive information gap at P=64.
    j = json{{"objective", "mae"},
             {"P", 64},
             {"K", 2},
             {"kappaC", 0.9},
             {"kappaS", 0.35},
             {"gamma", 0.5},
             {"eta", 8.0},
             {"mode", "mc"},
             {"batch", 256},
             {"maxSteps", 200000},
             {"logInterval", 100},
             {"gradNormTol", 2e-4},
             {"gradEmaWindow", 10000},
             {"stopAtCheckpoint", true},
             {"seed", 41}};
  } else if (name == "theorem42-positive") {
    // Two-phase dynamics micro-instance: Delta > 0, deterministic latents.
    j = json{{"objective", "mae"},
             {"P", 8},
             {"K", 1},
             {"c1", 6},
             {"cs", 2},
             {"zLaw", {{"kind", "point"}, {"value", 1.0}}},
             {"gamma", 0.5},
             {"eta", 0.5},
             {"mode", "exact"},
             {"maxSteps", 500},
             {"logInterval", 1},
             {"seed", 42}};
  } else if (name == "theorem42-negative") {
    // One-phase dynamics micro-instance: Delta < 0, deterministic latents.
    j = json{{"objective", "mae"},
             {"P", 10},
             {"K", 1},
             {"c1", 4},
             {"cs", 3},
             {"zLaw", {{"kind", "point"}, {"value", 1.0}}},
             {"gamma", 0.5},
             {"eta", 2.0},
             {"mode", "exact"},
             {"maxSteps", 2000},
             {"logInterval", 1},
             {"seed", 42}};
  } else if (name == "theorem43-cl-p64") {
    // Contrastive collapse run at P=64 with the pinned regularization scale.
    j = json{{"objective", "cl"},
             {"P", 64},
             {"K", 8},
             {"kappaC", 0.95},
             {"kappaS", 0.35},
             {"gamma0", 0.25},
             {"eta", 8.0},
             {"mode", "mc"},
             {"batch", 32},
             {"nNegatives", 32},
             {"maxSteps", 300000},
             {"logInterval", 200},
             {"gradNormTol", 1e-4},
             {"gradEmaWindow", 20000},
             {"stopAtCheckpoint", true},
             {"seed", 43}};
  } else {
    throw std::invalid_argument("presetConfig: unknown preset '" + name + "'");
  }
  return ExperimentConfig::fromJson(j);
}

}  // namespace attnlab
