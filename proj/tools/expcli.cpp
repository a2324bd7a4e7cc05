// Experiment front door: run one training configuration, verify the numerics
// against independent oracles, and turn run artifacts into figures/reports.
//
// Exit codes: 0 success, 2 configuration/artifact problems, 3 divergence,
// 1 verification failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnlab/cl_model.hpp"
#include "attnlab/config.hpp"
#include "attnlab/mae_model.hpp"
#include "attnlab/oracle.hpp"
#include "attnlab/rng.hpp"
#include "attnlab/svg.hpp"
#include "attnlab/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace attnlab;

namespace {

// ---------------------------------------------------------------- run ----

struct RunArgs {
  std::string configFile;
  std::string preset;
  std::string outDir;
  std::uint64_t seed = 0;
  bool seedSet = false;
  long maxSteps = -1;
};

int cmdRun(const RunArgs& args) {
  ExperimentConfig config;
  try {
    if (!args.preset.empty() && !args.configFile.empty())
      throw std::invalid_argument("give either a config file or --preset, not both");
    if (!args.preset.empty()) {
      config = presetConfig(args.preset);
    } else if (!args.configFile.empty()) {
      config = ExperimentConfig::fromFile(args.configFile);
    } else {
      throw std::invalid_argument("need a config file or --preset (see --list-presets)");
    }
    if (args.seedSet) config.seed = args.seed;
    if (args.maxSteps >= 0) config.maxSteps = args.maxSteps;
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }

  fs::path dir;
  if (!args.outDir.empty()) {
    dir = args.outDir;
  } else if (!config.outputDir.empty()) {
    dir = config.outputDir;
  } else {
    const char* root = std::getenv("ATTNLAB_OUT");
    const std::string stem =
        !args.preset.empty() ? args.preset : fs::path(args.configFile).stem().string();
    dir = fs::path(root != nullptr ? root : "runs") / (stem + "-seed" + std::to_string(config.seed));
  }

  RunResult result;
  try {
    result = runExperiment(config);
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }
  try {
    writeRunArtifacts(result, dir);
  } catch (const std::exception& e) {
    std::cerr << "artifact error: " << e.what() << "\n";
    return 2;
  }

  std::cout << "objective=" << (result.config.objective == Objective::Mae ? "mae" : "cl")
            << " P=" << result.config.P << " steps=" << result.stepsTaken
            << " checkpoint=" << result.checkpointStep
            << " finalLoss=" << result.rows.back().loss << "\n"
            << "artifacts: " << dir.string() << "\n";
  if (result.diverged) {
    std::cerr << "divergence: " << result.divergenceMessage << "\n";
    return 3;
  }
  return 0;
}

// ------------------------------------------------------------- verify ----

struct CheckRow {
  std::string name;
  bool pass = false;
  double value = 0.0;      // measured deviation (or p-value, see detail)
  double threshold = 0.0;  // pass bound for that value
  std::string detail;
};

ExperimentConfig microConfig(int P, int c1, int cs, int K, bool uniformZ, double gamma) {
  ExperimentConfig c;
  c.P = P;
  c.K = K;
  c.c1 = c1;
  c.cs = cs;
  c.gamma = gamma;
  c.zLaw = uniformZ ? ZLawConfig{ZLawKind::Uniform, 0.8, 1.2}
                    : ZLawConfig{ZLawKind::PointMass, 1.0, 1.0};
  c.seed = 7;
  return c;
}

Eigen::MatrixXd randomWeights(const DataSpec& spec, std::uint64_t seed, double scale) {
  Rng rng = makeRng(seed, Stream::OracleProbe);
  std::uniform_real_distribution<double> u(-scale, scale);
  Eigen::MatrixXd Q(spec.d, spec.d);
  for (int i = 0; i < spec.d; ++i)
    for (int j = 0; j < spec.d; ++j) Q(i, j) = u(rng);
  return Q;
}

int firstPatchInArea(const DataSpec& spec, int cluster, int area) {
  return spec.partitions[static_cast<std::size_t>(cluster)][static_cast<std::size_t>(area)]
      .front();
}

int cmdVerify(const std::string& mutate, double fdTol, const std::string& jsonPath) {
  std::vector<CheckRow> rows;

  const std::vector<ExperimentConfig> maeConfigs = {
      microConfig(8, 4, 2, 1, true, 0.5),
      microConfig(8, 6, 2, 2, false, 0.5),
      microConfig(8, 6, 2, 8, false, 0.5),  // widest ambient dimension, d = 24
      microConfig(8, 4, 2, 1, true, 0.375),
  };

  {  // reconstruction gradient vs central finite differences, full matrix
    double worst = 0.0;
    for (std::size_t i = 0; i < maeConfigs.size(); ++i) {
      const DataSpec spec = buildSpec(maeConfigs[i]);
      const Eigen::MatrixXd Q = randomWeights(spec, 11 + i, 0.3);
      MaeOptions mo;
      mo.gamma = maeConfigs[i].gamma;
      mo.mode = RunMode::Exact;
      const MaeGradient g = maeGradient(spec, Q, mo);
      const Eigen::MatrixXd fd = fdGradient(
          [&](const Eigen::MatrixXd& q) { return maeLossTotal(spec, q, mo); }, Q);
      const double scale = std::max(fd.cwiseAbs().maxCoeff(), 1e-12);
      worst = std::max(worst, (fd + g.G).cwiseAbs().maxCoeff() / scale);
    }
    rows.push_back({"mae-grad-parity", worst <= fdTol, worst, fdTol,
                    "max |fd + G| / max |fd| over 4 exact instances, all entries"});
  }

  {  // coefficient tables against their independent area-attention derivation
    double worst = 0.0;
    for (std::size_t i = 0; i < maeConfigs.size(); ++i) {
      const DataSpec spec = buildSpec(maeConfigs[i]);
      const Eigen::MatrixXd Q = randomWeights(spec, 31 + i, 0.3);
      MaeOptions mo;
      mo.gamma = maeConfigs[i].gamma;
      mo.mode = RunMode::Exact;
      const MaeGradient g = maeGradient(spec, Q, mo);
      Eigen::MatrixXd betaSum = Eigen::MatrixXd::Zero(spec.P, spec.P);
      for (const auto& bk : g.betaK) betaSum += bk;
      double dev = std::max({g.alphaClosedFormGap, g.betaClosedFormGap,
                             (g.beta - betaSum).cwiseAbs().maxCoeff()});
      if (mutate == "alpha-sign")
        dev = std::max(dev, ((-g.alpha) - g.alphaClosedForm).cwiseAbs().maxCoeff());
      worst = std::max(worst, dev);
    }
    const char* note = mutate == "alpha-sign"
                           ? "alpha sign intentionally flipped before the comparison"
                           : "closed-form coefficient gaps and the per-cluster split";
    rows.push_back({"mae-lemma-parity", worst <= 1e-9, worst, 1e-9, note});
  }

  {  // contrastive gradient vs finite differences of the frozen-branch loss
    double worst = 0.0;
    const std::vector<ExperimentConfig> clConfigs = {microConfig(8, 6, 2, 1, false, 0.5),
                                                     microConfig(8, 4, 2, 2, false, 0.5)};
    for (std::size_t i = 0; i < clConfigs.size(); ++i) {
      const DataSpec spec = buildSpec(clConfigs[i]);
      ClOptions opts;
      opts.mode = ClRunMode::ExactTiny;
      opts.gamma0 = 0.5;
      opts.negatives = 8;
      opts.sigma0Sq = 0.0;
      const Eigen::MatrixXd Q = randomWeights(spec, 51 + i, 0.3);
      const ClGradient g = clGradient(spec, Q, opts);
      const double h = 1e-5;
      double fdScale = 1e-12;
      double dev = 0.0;
      std::vector<std::pair<int, int>> probes;
      for (int p : {firstPatchInArea(spec, 0, 0), firstPatchInArea(spec, 0, 1)})
        for (int k : {0, spec.K - 1})
          for (int m : {0, spec.N - 1}) probes.emplace_back(p, spec.featureCoord(k, m));
      for (const auto& [p, col] : probes) {
        Eigen::MatrixXd up = Q, dn = Q;
        up(spec.posCoord(p), col) += h;
        dn(spec.posCoord(p), col) -= h;
        const double fd =
            -(clPseudoLoss(spec, up, Q, opts) - clPseudoLoss(spec, dn, Q, opts)) / (2.0 * h);
        fdScale = std::max(fdScale, std::abs(fd));
        dev = std::max(dev, std::abs(fd - g.alpha(p, col)));
      }
      worst = std::max(worst, dev / fdScale);
    }
    rows.push_back({"cl-grad-parity", worst <= fdTol, worst, fdTol,
                    "position-feature probes of the stop-grad objective, 2 instances"});
  }

  {  // the two independent expectation paths and the constant sanity case
    const DataSpec spec = buildSpec(maeConfigs[0]);
    const Eigen::MatrixXd Q = randomWeights(spec, 71, 0.3);
    MaeOptions mo;
    mo.mode = RunMode::Exact;
    const LossReport rep = maeLoss(spec, Q, mo);
    const double constant = enumerateExpectation(
        spec, 0.5, [](int, const std::vector<std::uint8_t>&, const std::vector<double>&) {
          return 1.0;
        });
    const double dev =
        std::max(std::abs(rep.total - rep.decomposedTotal), std::abs(constant - 1.0));
    rows.push_back({"enumeration-dual-path", dev <= 1e-12, dev, 1e-12,
                    "general vs area-decomposed loss; constant integrates to 1"});
  }

  {  // empirical mask-overlap law against the closed-form count distribution
    const DataSpec spec = buildSpec(microConfig(8, 6, 2, 1, false, 0.5));
    const auto& area = spec.partitions[0][1];
    Rng rng = makeRng(99, Stream::Masking);
    const Sample sample = drawSample(spec, rng);
    const int draws = 100000;
    std::vector<double> observed(area.size() + 1, 0.0);
    for (int i = 0; i < draws; ++i) {
      const MaskedSample masked = applyMask(sample, spec, 0.5, rng);
      int overlap = 0;
      for (int q : area) overlap += masked.unmasked[static_cast<std::size_t>(q)];
      observed[static_cast<std::size_t>(overlap)] += 1.0;
    }
    std::vector<double> expected(observed.size());
    for (std::size_t u = 0; u < expected.size(); ++u)
      expected[u] = draws * hypergeometricPmf(spec.P, static_cast<int>(area.size()), spec.P / 2,
                                              static_cast<int>(u));
    const double p = chiSquarePValue(observed, expected);
    rows.push_back({"hypergeometric-chi2", p > 0.01, p, 0.01,
                    "p-value of 1e5 mask draws; pass requires p > threshold"});
  }

  {  // irreducible-error formula against its hand-computed instance
    const DataSpec spec = buildSpec(microConfig(8, 4, 2, 1, false, 0.5));
    const int p = firstPatchInArea(spec, 0, 1);
    const double hand = 0.75 * 15.0 / 70.0;  // 1/2 (1 + 1/2) * P(area fully masked)
    const double dev = std::abs(lowBound(spec, 0.5, p) - hand);
    rows.push_back({"low-bound-value", dev <= 1e-12, dev, 1e-12,
                    "size-2 area, half masking, fixed unit latent"});
  }

  bool all = true;
  std::printf("%-24s %-6s %-14s %-14s %s\n", "check", "status", "value", "threshold", "note");
  for (const CheckRow& r : rows) {
    all = all && r.pass;
    std::printf("%-24s %-6s %-14.4g %-14.4g %s\n", r.name.c_str(), r.pass ? "PASS" : "FAIL",
                r.value, r.threshold, r.detail.c_str());
  }
  std::printf("overall: %s\n", all ? "PASS" : "FAIL");

  if (!jsonPath.empty()) {
    json out{{"schema", "attnlab-verify-v1"}, {"pass", all}, {"checks", json::array()}};
    for (const CheckRow& r : rows)
      out["checks"].push_back(json{{"name", r.name},
                                   {"pass", r.pass},
                                   {"value", r.value},
                                   {"threshold", r.threshold},
                                   {"note", r.detail}});
    std::ofstream f(jsonPath, std::ios::binary);
    if (!f) {
      std::cerr << "verify: cannot write '" << jsonPath << "'\n";
      return 2;
    }
    f << out.dump(2) << '\n';
  }
  return all ? 0 : 1;
}

// --------------------------------------------------------------- plot ----

std::string upsLabel(const std::string& quantity) {
  if (quantity == "ups_self") return "ups self";
  if (quantity == "ups_own") return "ups own area";
  return "ups global area";
}

int cmdPlot(const std::string& runDir, std::string outDir) {
  RunArtifacts art;
  try {
    art = readRunArtifacts(runDir);
  } catch (const std::exception& e) {
    std::cerr << "plot: " << e.what() << "\n";
    return 2;
  }
  if (outDir.empty()) outDir = (fs::path(runDir) / "figures").string();
  const fs::path out(outDir);

  svg::Series loss{"loss", {}, {}};
  svg::Series gmax{"gradMaxAbs", {}, {}};
  svg::Series gema{"gradEmaMaxAbs", {}, {}};
  for (const TraceRow& r : art.rows) {
    loss.x.push_back(static_cast<double>(r.step));
    loss.y.push_back(r.loss);
    gmax.x.push_back(static_cast<double>(r.step));
    gmax.y.push_back(r.gradMaxAbs);
    gema.x.push_back(static_cast<double>(r.step));
    gema.y.push_back(r.gradEmaMaxAbs);
  }
  svg::writeLinePlot(out / "loss_vs_step.svg", "training loss", "step", "loss", {loss});
  svg::writeLinePlot(out / "grad_vs_step.svg", "ascent-direction magnitude", "step", "max |entry|",
                     {gmax, gema});

  std::set<int> patches;
  for (const auto& [key, values] : art.series) patches.insert(key.patch);
  int figures = 0;
  for (int p : patches) {
    if (figures == 8) break;  // keep the figure count bounded for all-patch runs
    std::vector<svg::Series> series;
    for (const auto& [key, values] : art.series) {
      if (key.patch != p) continue;
      svg::Series s;
      s.label = "k" + std::to_string(key.cluster) + " " +
                (key.quantity == "phi" ? "v" + std::to_string(key.index) : upsLabel(key.quantity));
      for (const auto& [step, value] : values) {
        s.x.push_back(static_cast<double>(step));
        s.y.push_back(value);
      }
      series.push_back(std::move(s));
    }
    svg::writeLinePlot(out / ("correlations_patch" + std::to_string(p) + ".svg"),
                       "correlations of patch " + std::to_string(p), "step", "logit", series);
    ++figures;
  }

  try {
    const DataSpec spec = buildSpec(art.config);
    const Eigen::MatrixXd attn =
        referenceAttention(spec, art.qFinal, art.config.objective, art.config.seed);
    svg::writeHeatmap(out / "attention_final.svg", "attention on a clean reference draw", attn);
  } catch (const std::exception& e) {
    std::cerr << "plot: attention heatmap skipped: " << e.what() << "\n";
  }

  if (art.report.contains("diversity") && !art.report.at("diversity").is_null()) {
    const double mean = art.report.at("diversity").at("mean").get<double>();
    svg::writeBarChart(out / "diversity.svg", "attention diversity",
                       {art.report.at("objective").get<std::string>()}, {mean});
  }
  std::cout << "figures: " << out.string() << "\n";
  return 0;
}

// ------------------------------------------------------------ compare ----

json compareSide(const std::string& dir, const RunArtifacts& art) {
  json side;
  side["dir"] = dir;
  side["objective"] = art.report.at("objective");
  side["finalLoss"] = art.report.at("finalLoss");
  side["finalLabels"] = art.report.at("finalLabels");
  side["diversity"] = art.report.at("diversity").is_null()
                          ? json(nullptr)
                          : art.report.at("diversity").at("mean");
  return side;
}

int cmdCompare(const std::string& dirA, const std::string& dirB, std::string outDir) {
  RunArtifacts a, b;
  try {
    a = readRunArtifacts(dirA);
    b = readRunArtifacts(dirB);
  } catch (const std::exception& e) {
    std::cerr << "compare: " << e.what() << "\n";
    return 2;
  }
  if (outDir.empty()) outDir = "compare";
  const fs::path out(outDir);
  fs::create_directories(out);

  json cmp{{"schema", "attnlab-compare-v1"},
           {"a", compareSide(dirA, a)},
           {"b", compareSide(dirB, b)}};
  std::string ordering = "unavailable";
  if (!cmp["a"]["diversity"].is_null() && !cmp["b"]["diversity"].is_null()) {
    const double da = cmp["a"]["diversity"].get<double>();
    const double db = cmp["b"]["diversity"].get<double>();
    ordering = da > db ? "a" : db > da ? "b" : "tie";
    svg::writeBarChart(out / "diversity_compare.svg", "attention diversity",
                       {cmp["a"]["objective"].get<std::string>() + " (a)",
                        cmp["b"]["objective"].get<std::string>() + " (b)"},
                       {da, db});
  }
  cmp["moreDiverse"] = ordering;

  std::ofstream f(out / "compare.json", std::ios::binary);
  if (!f) {
    std::cerr << "compare: cannot write '" << (out / "compare.json").string() << "'\n";
    return 2;
  }
  f << cmp.dump(2) << '\n';
  std::cout << "moreDiverse=" << ordering << "\nreport: " << (out / "compare.json").string()
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attention-dynamics experiment driver"};
  app.require_subcommand(1);

  RunArgs runArgs;
  bool listPresets = false;
  CLI::App* run = app.add_subcommand("run", "train one configuration and write artifacts");
  run->add_option("config", runArgs.configFile, "JSON configuration file");
  run->add_option("--preset", runArgs.preset, "built-in configuration name");
  run->add_option("--seed", runArgs.seed, "override the configured seed");
  run->add_option("--out", runArgs.outDir,
                  "artifact directory (default: config outputDir, else $ATTNLAB_OUT/<name>-seed<s>)");
  run->add_option("--max-steps", runArgs.maxSteps, "override the configured step budget");
  run->add_flag("--list-presets", listPresets, "print the preset names and exit");

  std::string mutate, verifyJson;
  double fdTol = 1e-4;
  CLI::App* verify = app.add_subcommand("verify", "run the independent numeric oracles");
  verify->add_option("--mutate", mutate, "intentional fault injection (alpha-sign)")
      ->check(CLI::IsMember({"alpha-sign"}));
  verify->add_option("--fd-tol", fdTol, "relative tolerance of the parity checks");
  verify->add_option("--json", verifyJson, "also write the table as JSON");

  std::string plotDir, plotOut;
  CLI::App* plot = app.add_subcommand("plot", "render figures from run artifacts");
  plot->add_option("runDir", plotDir, "artifact directory of one run")->required();
  plot->add_option("--out", plotOut, "figure directory (default <runDir>/figures)");

  std::string cmpA, cmpB, cmpOut;
  CLI::App* compare = app.add_subcommand("compare", "joint diversity/phase report of two runs");
  compare->add_option("runDirA", cmpA, "first run directory")->required();
  compare->add_option("runDirB", cmpB, "second run directory")->required();
  compare->add_option("--out", cmpOut, "report directory (default ./compare)");

  CLI11_PARSE(app, argc, argv);

  if (run->parsed()) {
    if (listPresets) {
      for (const std::string& name : presetNames()) std::cout << name << "\n";
      return 0;
    }
    runArgs.seedSet = run->count("--seed") > 0;
    return cmdRun(runArgs);
  }
  if (verify->parsed()) return cmdVerify(mutate, fdTol, verifyJson);
  if (plot->parsed()) return cmdPlot(plotDir, plotOut);
  return cmdCompare(cmpA, cmpB, cmpOut);
}
