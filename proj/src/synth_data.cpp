#include "attnlab/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace attnlab {

using nlohmann::json;

double ZLaw::draw(Rng& rng) const {
  if (kind == ZLawKind::PointMass) return low;
  std::uniform_real_distribution<double> dist(low, up);
  return dist(rng);
}

double ZLaw::meanSquare() const {
  if (kind == ZLawKind::PointMass) return low * low;
  // E[z^2] for uniform on [low, up].
  return (up * up * up - low * low * low) / (3.0 * (up - low));
}

std::vector<std::pair<double, double>> ZLaw::quadrature() const {
  if (kind == ZLawKind::PointMass) return {{low, 1.0}};
  // 3-point Gauss-Legendre on [low, up]: exact through degree-5 polynomials,
  // which covers every z-moment the losses and gradients use.
  const double mid = 0.5 * (low + up);
  const double half = 0.5 * (up - low);
  const double r = std::sqrt(3.0 / 5.0);
  return {{mid - half * r, 5.0 / 18.0}, {mid, 8.0 / 18.0}, {mid + half * r, 5.0 / 18.0}};
}

namespace {

std::vector<int> makeAreaSizes(int P, int C1, int Cs) {
  if (C1 >= P) throw std::invalid_argument("buildSpec: global area must leave room for local areas (C1 < P)");
  if (Cs < 1) throw std::invalid_argument("buildSpec: local area size must be at least 1");
  if (C1 <= Cs) throw std::invalid_argument("buildSpec: global area must be strictly largest (C1 > Cs)");
  const int rest = P - C1;
  const int nLocal = rest / Cs;
  if (nLocal < 1) throw std::invalid_argument("buildSpec: no room for a local area");
  std::vector<int> sizes(1 + nLocal, Cs);
  sizes[0] = C1;
  sizes.back() += rest - nLocal * Cs;  // remainder absorbed into the last local area
  if (sizes.back() >= C1)
    throw std::invalid_argument("buildSpec: global area must be strictly largest (last local area too big)");
  return sizes;
}

}  // namespace

DataSpec buildSpec(const ExperimentConfig& config) {
  const int P = config.P;
  if (P < 4) throw std::invalid_argument("buildSpec: P must be at least 4");
  if (config.K < 1) throw std::invalid_argument("buildSpec: K must be at least 1");

  int C1 = 0;
  int Cs = 0;
  if (config.c1 && config.cs) {
    C1 = *config.c1;
    Cs = *config.cs;
  } else if (config.kappaC && config.kappaS) {
    C1 = static_cast<int>(std::lround(std::pow(static_cast<double>(P), *config.kappaC)));
    Cs = static_cast<int>(std::lround(std::pow(static_cast<double>(P), *config.kappaS)));
  } else {
    throw std::invalid_argument("buildSpec: need (kappaC, kappaS) or explicit (c1, cs)");
  }

  DataSpec spec;
  spec.P = P;
  spec.K = config.K;
  spec.areaSizes = makeAreaSizes(P, C1, Cs);
  spec.N = static_cast<int>(spec.areaSizes.size());
  const double logP = std::log(static_cast<double>(P));
  spec.kappaC = std::log(static_cast<double>(C1)) / logP;
  spec.kappaS = std::log(static_cast<double>(Cs)) / logP;
  spec.zLaw.kind = config.zLaw.kind;
  spec.zLaw.low = config.zLaw.low;
  spec.zLaw.up = config.zLaw.up;
  spec.d = spec.K * spec.N + P;
  spec.seed = config.seed;
  spec.contiguous = config.contiguous;

  Rng rng = makeRng(config.seed, Stream::Partition);
  spec.partitions.assign(spec.K, {});
  spec.areaOf.assign(spec.K, std::vector<int>(P, -1));
  for (int k = 0; k < spec.K; ++k) {
    std::vector<int> order(P);
    std::iota(order.begin(), order.end(), 0);
    if (spec.contiguous) {
      // Contiguous blocks, rotated per cluster so clusters do not coincide.
      const int shift = (spec.K > 0) ? (k * (P / spec.K)) % P : 0;
      std::rotate(order.begin(), order.begin() + shift, order.end());
    } else {
      std::shuffle(order.begin(), order.end(), rng);
    }
    spec.partitions[k].resize(spec.N);
    int at = 0;
    for (int m = 0; m < spec.N; ++m) {
      auto& area = spec.partitions[k][m];
      area.assign(order.begin() + at, order.begin() + at + spec.areaSizes[m]);
      std::sort(area.begin(), area.end());
      for (int p : area) spec.areaOf[k][p] = m;
      at += spec.areaSizes[m];
    }
  }
  return spec;
}

double infoGap(const DataSpec& spec) {
  return (1.0 - spec.kappaS) - 2.0 * (1.0 - spec.kappaC);
}

Sample drawSample(const DataSpec& spec, Rng& rng) {
  Sample s;
  std::uniform_int_distribution<int> pick(0, spec.K - 1);
  s.clusterId = pick(rng);
  s.z.resize(spec.N);
  for (int m = 0; m < spec.N; ++m) s.z[m] = spec.zLaw.draw(rng);
  return s;
}

Eigen::MatrixXd Sample::contents(const DataSpec& spec) const {
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(spec.d, spec.P);
  for (int p = 0; p < spec.P; ++p) {
    const int a = spec.areaOf[clusterId][p];
    X(spec.featureCoord(clusterId, a), p) = z[a];
  }
  return X;
}

Eigen::MatrixXd MaskedSample::maskedContents(const DataSpec& spec) const {
  Eigen::MatrixXd X = base.contents(spec);
  for (int p : maskSet) X.col(p).setZero();
  return X;
}

Eigen::MatrixXd NoisySample::contents(const DataSpec& spec) const {
  Eigen::MatrixXd X = base.contents(spec);
  if (noise.size() > 0) X += noise;
  return X;
}

namespace {

std::vector<int> drawMaskSet(int P, double gamma, Rng& rng) {
  const int m = static_cast<int>(std::lround(gamma * P));
  if (m <= 0 || m >= P)
    throw std::invalid_argument("applyMask: round(gamma*P) must mask some but not all patches");
  // Partial Fisher-Yates: the first m entries are a uniform subset.
  std::vector<int> order(P);
  std::iota(order.begin(), order.end(), 0);
  for (int i = 0; i < m; ++i) {
    std::uniform_int_distribution<int> pick(i, P - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  std::vector<int> mask(order.begin(), order.begin() + m);
  std::sort(mask.begin(), mask.end());
  return mask;
}

}  // namespace

MaskedSample applyMask(const Sample& sample, const DataSpec& spec, double gamma, Rng& rng) {
  MaskedSample ms;
  ms.base = sample;
  ms.maskSet = drawMaskSet(spec.P, gamma, rng);
  ms.unmasked.assign(spec.P, 1);
  for (int p : ms.maskSet) ms.unmasked[p] = 0;
  return ms;
}

std::pair<MaskedSample, MaskedSample> augmentPair(const Sample& sample, const DataSpec& spec,
                                                  double gamma0, Rng& rng) {
  MaskedSample first = applyMask(sample, spec, gamma0, rng);
  MaskedSample second = applyMask(sample, spec, gamma0, rng);
  return {std::move(first), std::move(second)};
}

NoisySample addNoise(const Sample& sample, const DataSpec& spec, double sigma0Sq, Rng& rng) {
  NoisySample ns;
  ns.base = sample;
  if (sigma0Sq < 0.0) throw std::invalid_argument("addNoise: variance must be non-negative");
  ns.noise = Eigen::MatrixXd::Zero(spec.d, spec.P);
  if (sigma0Sq > 0.0) {
    std::normal_distribution<double> gauss(0.0, std::sqrt(sigma0Sq));
    for (int p = 0; p < spec.P; ++p)
      for (int i = 0; i < spec.d; ++i) ns.noise(i, p) = gauss(rng);
  }
  return ns;
}

json DataSpec::toJson() const {
  json j;
  j["P"] = P;
  j["K"] = K;
  j["N"] = N;
  j["areaSizes"] = areaSizes;
  j["partitions"] = partitions;
  j["kappaC"] = kappaC;
  j["kappaS"] = kappaS;
  j["zLaw"] = (zLaw.kind == ZLawKind::PointMass)
                  ? json{{"kind", "point"}, {"value", zLaw.low}}
                  : json{{"kind", "uniform"}, {"low", zLaw.low}, {"up", zLaw.up}};
  j["d"] = d;
  j["seed"] = seed;
  j["contiguous"] = contiguous;
  return j;
}

DataSpec DataSpec::fromJson(const json& j) {
  DataSpec spec;
  spec.P = j.at("P").get<int>();
  spec.K = j.at("K").get<int>();
  spec.N = j.at("N").get<int>();
  spec.areaSizes = j.at("areaSizes").get<std::vector<int>>();
  spec.partitions = j.at("partitions").get<std::vector<std::vector<std::vector<int>>>>();
  spec.kappaC = j.at("kappaC").get<double>();
  spec.kappaS = j.at("kappaS").get<double>();
  const auto& z = j.at("zLaw");
  if (z.at("kind").get<std::string>() == "point") {
    spec.zLaw.kind = ZLawKind::PointMass;
    spec.zLaw.low = spec.zLaw.up = z.at("value").get<double>();
  } else {
    spec.zLaw.kind = ZLawKind::Uniform;
    spec.zLaw.low = z.at("low").get<double>();
    spec.zLaw.up = z.at("up").get<double>();
  }
  spec.d = j.at("d").get<int>();
  spec.seed = j.at("seed").get<std::uint64_t>();
  spec.contiguous = j.at("contiguous").get<bool>();
  spec.areaOf.assign(spec.K, std::vector<int>(spec.P, -1));
  for (int k = 0; k < spec.K; ++k)
    for (int m = 0; m < spec.N; ++m)
      for (int p : spec.partitions[k][m]) spec.areaOf[k][p] = m;
  return spec;
}

}  // namespace attnlab
