#include "attnlab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "attnlab/mae_model.hpp"
#include "attnlab/rng.hpp"

namespace attnlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct LossEval {
  double value = 0.0;
  double stdErr = 0.0;
};

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

MaeOptions maeOptionsOf(const ExperimentConfig& c) {
  MaeOptions o;
  o.gamma = c.gamma;
  o.mode = c.mode;
  o.batch = c.batch;
  o.reconstructAll = c.reconstructAll;
  return o;
}

ClOptions clOptionsOf(const ExperimentConfig& c) {
  ClOptions o;
  o.gamma0 = c.gamma0;
  o.negatives = c.nNegatives;
  o.tau = c.tau.value_or(-1.0);
  o.lambda = c.lambda.value_or(-1.0);
  if (c.mode == RunMode::Exact) {
    o.mode = ClRunMode::ExactTiny;  // noiseless by construction
    o.sigma0Sq = 0.0;
  } else {
    o.mode = ClRunMode::MonteCarlo;
    o.sigma0Sq = c.clNoise ? c.sigma0Sq.value_or(-1.0) : 0.0;
  }
  o.batches = c.batch;
  return o;
}

std::vector<int> trackedOrAll(const ExperimentConfig& c) {
  if (!c.trackedPatches.empty()) return c.trackedPatches;
  std::vector<int> all(static_cast<std::size_t>(c.P));
  for (int p = 0; p < c.P; ++p) all[static_cast<std::size_t>(p)] = p;
  return all;
}

std::ofstream openForWrite(const fs::path& file) {
  std::ofstream out(file, std::ios::binary);  // '\n' endings on every platform
  if (!out) throw std::runtime_error("cannot write '" + file.string() + "'");
  return out;
}

std::ifstream openForRead(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("missing artifact '" + file.string() + "'");
  return in;
}

void expectSchemaLine(std::ifstream& in, const std::string& expected, const fs::path& file) {
  std::string line;
  if (!std::getline(in, line) || line != expected)
    throw std::runtime_error("'" + file.string() + "': expected schema line '" + expected + "'");
}

std::vector<std::string> splitCsv(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  return cells;
}

}  // namespace

double clBisectEta(const DataSpec& spec, const ClOptions& opts, std::uint64_t seed,
                   int probeSteps) {
  if (probeSteps < 2) throw std::invalid_argument("clBisectEta: probeSteps must be at least 2");
  ClOptions probe = opts;
  probe.batches = std::min(probe.batches, 16);  // a frozen probe batch is enough
  double best = -1.0;
  for (int e = -6; e <= 10; ++e) {
    const double eta = std::ldexp(1.0, e);
    AttentionWeights w(spec);
    Rng rng = makeRng(seed, Stream::OracleProbe);  // same batches for every candidate
    bool stable = true;
    double first = 0.0, last = 0.0;
    for (int t = 0; t < probeSteps && stable; ++t) {
      try {
        const ClGradient g = clStep(w, spec, eta, probe, &rng);
        if (t == 0) first = g.loss;
        last = g.loss;
        if (!std::isfinite(last)) stable = false;
      } catch (const std::runtime_error&) {
        stable = false;
      }
    }
    if (stable && last <= first + 1e-9) best = eta;
  }
  if (best <= 0.0) throw std::runtime_error("clBisectEta: no stable step size in 2^[-6,10]");
  return best;
}

RunResult runExperiment(const ExperimentConfig& original) {
  RunResult out;
  ExperimentConfig config = original;
  DataSpec spec = buildSpec(config);
  config.resolve(spec.d);

  const MaeOptions maeOpts = maeOptionsOf(config);
  const ClOptions clOpts = clOptionsOf(config);
  if (!config.eta) {
    config.eta = (config.objective == Objective::Mae) ? bisectEta(spec, maeOpts)
                                                      : clBisectEta(spec, clOpts, config.seed);
  }
  const double eta = *config.eta;

  AttentionWeights w(spec);
  Rng trainRng = makeRng(config.seed, Stream::Sampling);
  Rng evalRng = makeRng(config.seed, Stream::Evaluation);
  const int K = static_cast<int>(spec.partitions.size());
  std::vector<Eigen::MatrixXd> ppAccum(static_cast<std::size_t>(K),
                                       Eigen::MatrixXd::Zero(config.P, config.P));

  auto evalLoss = [&]() -> LossEval {
    if (config.objective == Objective::Mae) {
      const LossReport r = maeLoss(spec, w.Q, maeOpts, &evalRng);
      return {r.total, r.totalStdErr};
    }
    const ClGradient g = clGradient(spec, w.Q, clOpts, &evalRng);
    return {g.loss, g.lossStdErr};
  };

  auto snapshot = [&](const TraceRow& row) {
    CorrelationSnapshot snap = extractCorrelations(w.Q, spec);
    snap.step = w.step;
    snap.ppK = ppAccum;
    out.trace.push_back(std::move(snap));
    out.rows.push_back(row);
  };

  {
    const LossEval l0 = evalLoss();  // gradient columns start at zero by convention
    snapshot({0, l0.value, l0.stdErr, 0.0, 0.0});
  }

  Eigen::MatrixXd ema = Eigen::MatrixXd::Zero(spec.d, spec.d);
  Eigen::MatrixXd qPrev = w.Q;
  long emaCount = 0;
  for (long t = 1; t <= config.maxSteps; ++t) {
    qPrev = w.Q;
    Eigen::MatrixXd direction;
    try {
      if (config.objective == Objective::Mae) {
        MaeGradient g = maeStep(w, spec, eta, maeOpts, &trainRng);
        for (int k = 0; k < K; ++k)
          ppAccum[static_cast<std::size_t>(k)] += eta * g.betaK[static_cast<std::size_t>(k)];
        direction = std::move(g.G);
      } else {
        ClGradient g = clStep(w, spec, eta, clOpts, &trainRng);
        direction = std::move(g.G);
      }
    } catch (const std::runtime_error& e) {
      out.diverged = true;
      out.divergenceMessage = e.what();
      w.Q = qPrev;  // keep the last finite weights
      break;
    }

    ++emaCount;
    ema += (direction - ema) / static_cast<double>(std::min(emaCount, config.gradEmaWindow));
    const double gmax = direction.cwiseAbs().maxCoeff();
    const double emax = ema.cwiseAbs().maxCoeff();
    const bool checkpoint = out.checkpointStep < 0 && config.gradNormTol > 0.0 &&
                            emaCount >= config.gradEmaWindow && emax < config.gradNormTol;
    if (checkpoint) out.checkpointStep = t;
    const bool stopping = checkpoint && config.stopAtCheckpoint;
    if (t % config.logInterval == 0 || stopping || t == config.maxSteps) {
      const LossEval le = evalLoss();
      snapshot({t, le.value, le.stdErr, gmax, emax});
    }
    if (stopping) break;
  }

  if (out.trace.back().step != w.step) {  // divergence mid-interval: log the kept state
    const LossEval le = evalLoss();
    snapshot({w.step, le.value, le.stdErr, out.rows.back().gradMaxAbs,
              out.rows.back().gradEmaMaxAbs});
  }

  out.stepsTaken = w.step;
  out.qFinal = w.Q;
  out.config = std::move(config);
  out.spec = std::move(spec);
  return out;
}

Eigen::MatrixXd referenceAttention(const DataSpec& spec, const Eigen::MatrixXd& Q,
                                   Objective objective, std::uint64_t seed) {
  Rng rng = makeRng(seed, Stream::Evaluation);
  const Sample sample = drawSample(spec, rng);
  if (objective == Objective::Cl)
    return clScores(spec, sample.contents(spec), sample.clusterId, Q).score;
  MaskedSample clean;
  clean.base = sample;
  clean.unmasked.assign(static_cast<std::size_t>(spec.P), 1);
  return maeScores(spec, clean, Q).score;
}

namespace {

void writeTraceCsv(const RunResult& r, const fs::path& file) {
  std::ofstream out = openForWrite(file);
  out << "# schema: attnlab-trace-v1\n";
  out << "step,loss,lossStdErr,gradMaxAbs,gradEmaMaxAbs\n";
  for (const TraceRow& row : r.rows) {
    out << row.step << ',' << fmt17(row.loss) << ',' << fmt17(row.lossStdErr) << ','
        << fmt17(row.gradMaxAbs) << ',' << fmt17(row.gradEmaMaxAbs) << '\n';
  }
}

void writeCorrelationsCsv(const RunResult& r, const fs::path& file) {
  std::ofstream out = openForWrite(file);
  out << "# schema: attnlab-correlations-v1\n";
  out << "step,patch,cluster,quantity,index,value\n";
  const DataSpec& spec = r.spec;
  const int K = static_cast<int>(spec.partitions.size());
  const std::vector<int> tracked = trackedOrAll(r.config);
  for (const CorrelationSnapshot& snap : r.trace) {
    for (int p : tracked) {
      for (int k = 0; k < K; ++k) {
        const auto& areas = spec.partitions[static_cast<std::size_t>(k)];
        const int N = static_cast<int>(areas.size());
        for (int m = 0; m < N; ++m) {
          out << snap.step << ',' << p << ',' << k << ",phi," << (m + 1) << ','
              << fmt17(snap.fp(p, k * N + m)) << '\n';
        }
        const Eigen::MatrixXd& ups = snap.ppK[static_cast<std::size_t>(k)];
        auto areaMean = [&](int area) {
          double sum = 0.0;
          int count = 0;
          for (int q : areas[static_cast<std::size_t>(area)]) {
            if (q == p) continue;
            sum += ups(p, q);
            ++count;
          }
          return count > 0 ? sum / count : 0.0;
        };
        const int own = spec.areaOf[static_cast<std::size_t>(k)][static_cast<std::size_t>(p)];
        out << snap.step << ',' << p << ',' << k << ",ups_self,0," << fmt17(ups(p, p)) << '\n';
        out << snap.step << ',' << p << ',' << k << ",ups_own,0," << fmt17(areaMean(own)) << '\n';
        out << snap.step << ',' << p << ',' << k << ",ups_global,0," << fmt17(areaMean(0))
            << '\n';
      }
    }
  }
}

void writeQFinalCsv(const RunResult& r, const fs::path& file) {
  std::ofstream out = openForWrite(file);
  out << "# schema: attnlab-qmatrix-v1\n";
  for (Eigen::Index i = 0; i < r.qFinal.rows(); ++i) {
    for (Eigen::Index j = 0; j < r.qFinal.cols(); ++j) {
      if (j > 0) out << ',';
      out << fmt17(r.qFinal(i, j));
    }
    out << '\n';
  }
}

json phasesJson(const RunResult& r) {
  json series = json::array();
  for (const PhaseSeries& s : classifyPhase(r.trace, r.spec, r.config.thresholds))
    series.push_back(s.toJson());
  return json{{"schema", "attnlab-phases-v1"}, {"series", std::move(series)}};
}

json reportJson(const RunResult& r, const json& phases) {
  json rep;
  rep["schema"] = "attnlab-report-v1";
  rep["objective"] = r.config.objective == Objective::Mae ? "mae" : "cl";
  rep["eta"] = *r.config.eta;
  rep["stepsTaken"] = r.stepsTaken;
  rep["checkpointStep"] = r.checkpointStep;
  rep["diverged"] = r.diverged;
  rep["divergenceMessage"] = r.divergenceMessage;
  rep["infoGap"] = infoGap(r.spec);
  {
    json sizes = json::array();
    for (const auto& areas : r.spec.partitions) {
      json cluster = json::array();
      for (const auto& area : areas) cluster.push_back(area.size());
      sizes.push_back(std::move(cluster));
    }
    rep["areaSizes"] = std::move(sizes);
  }
  rep["finalLoss"] = r.rows.back().loss;
  rep["finalLossStdErr"] = r.rows.back().lossStdErr;

  json census = json::object();
  for (const auto& s : phases.at("series")) {
    const std::string label = s.at("labels").back().get<std::string>();
    census[label] = census.value(label, 0) + 1;
  }
  rep["finalLabels"] = std::move(census);

  if (r.diverged) {
    rep["theorem"] = nullptr;
    rep["diversity"] = nullptr;
    rep["note"] = "final-weight checks skipped: the run diverged";
    return rep;
  }

  TheoremCheckOptions tco;
  tco.objective = r.config.objective;
  tco.gamma = r.config.gamma;
  tco.attnConstant = r.config.theoremC;
  tco.maskSamples = r.config.evalMasks;
  tco.contentSamples = r.config.evalSamples;
  tco.lossMode = r.config.mode;
  tco.lossBatch = std::max(r.config.batch, 2048);
  tco.seed = r.config.seed;
  rep["theorem"] = theoremCheck(r.spec, r.qFinal, r.config.theoremEpsilon, tco).toJson();

  const int gridSide = static_cast<int>(std::lround(std::sqrt(static_cast<double>(r.config.P))));
  if (gridSide * gridSide == r.config.P && r.config.diversityTopN >= 1 &&
      r.config.diversityTopN < r.config.P) {
    const Eigen::MatrixXd attn =
        referenceAttention(r.spec, r.qFinal, r.config.objective, r.config.seed);
    rep["diversity"] = diversityMetric(attn, gridSide, r.config.diversityTopN).toJson();
  } else {
    rep["diversity"] = nullptr;
    rep["diversityNote"] = "needs a square patch grid (P = N^2) and topN < P";
  }
  return rep;
}

}  // namespace

void writeRunArtifacts(const RunResult& result, const fs::path& dir) {
  fs::create_directories(dir);
  writeTraceCsv(result, dir / "trace.csv");
  writeCorrelationsCsv(result, dir / "correlations.csv");
  writeQFinalCsv(result, dir / "q_final.csv");
  const json phases = phasesJson(result);
  openForWrite(dir / "phases.json") << phases.dump(2) << '\n';
  openForWrite(dir / "report.json") << reportJson(result, phases).dump(2) << '\n';
  openForWrite(dir / "resolved_config.json") << result.config.toJson().dump(2) << '\n';
}

RunArtifacts readRunArtifacts(const fs::path& dir) {
  RunArtifacts art;
  {
    std::ifstream in = openForRead(dir / "resolved_config.json");
    json j;
    in >> j;
    art.config = ExperimentConfig::fromJson(j);
  }
  {
    const fs::path file = dir / "trace.csv";
    std::ifstream in = openForRead(file);
    expectSchemaLine(in, "# schema: attnlab-trace-v1", file);
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto cells = splitCsv(line);
      if (cells.size() != 5) throw std::runtime_error("'" + file.string() + "': malformed row");
      art.rows.push_back({std::stol(cells[0]), std::stod(cells[1]), std::stod(cells[2]),
                          std::stod(cells[3]), std::stod(cells[4])});
    }
  }
  {
    const fs::path file = dir / "correlations.csv";
    std::ifstream in = openForRead(file);
    expectSchemaLine(in, "# schema: attnlab-correlations-v1", file);
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto cells = splitCsv(line);
      if (cells.size() != 6) throw std::runtime_error("'" + file.string() + "': malformed row");
      const SeriesKey key{std::stoi(cells[1]), std::stoi(cells[2]), cells[3],
                          std::stoi(cells[4])};
      art.series[key].emplace_back(std::stol(cells[0]), std::stod(cells[5]));
    }
  }
  {
    const fs::path file = dir / "q_final.csv";
    std::ifstream in = openForRead(file);
    expectSchemaLine(in, "# schema: attnlab-qmatrix-v1", file);
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto cells = splitCsv(line);
      std::vector<double> row(cells.size());
      std::transform(cells.begin(), cells.end(), row.begin(),
                     [](const std::string& c) { return std::stod(c); });
      rows.push_back(std::move(row));
    }
    if (rows.empty()) throw std::runtime_error("'" + file.string() + "': empty matrix");
    art.qFinal.resize(static_cast<Eigen::Index>(rows.size()),
                      static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != rows[0].size())
        throw std::runtime_error("'" + file.string() + "': ragged matrix");
      for (std::size_t j = 0; j < rows[i].size(); ++j)
        art.qFinal(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
  }
  openForRead(dir / "phases.json") >> art.phases;
  openForRead(dir / "report.json") >> art.report;
  return art;
}

}  // namespace attnlab
