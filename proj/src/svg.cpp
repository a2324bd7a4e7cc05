#include "attnlab/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace attnlab::svg {

namespace {

constexpr double kWidth = 960.0;
constexpr double kHeight = 600.0;
constexpr double kLeft = 78.0;
constexpr double kRight = kWidth - 190.0;  // legend strip on the right
constexpr double kTop = 56.0;
constexpr double kBottom = kHeight - 64.0;

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                          "#8c564b", "#17becf", "#7f7f7f", "#bcbd22", "#e377c2"};
constexpr int kPaletteSize = 10;

std::string escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    if (c == '&') {
      out += "&amp;";
    } else if (c == '<') {
      out += "&lt;";
    } else if (c == '>') {
      out += "&gt;";
    } else {
      out += c;
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tickText(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

struct Range {
  double lo = 0.0;
  double hi = 1.0;
};

// Pads degenerate ranges so the mapping below never divides by zero.
Range padded(double lo, double hi) {
  if (!std::isfinite(lo) || !std::isfinite(hi)) return {0.0, 1.0};
  if (lo == hi) {
    const double pad = lo == 0.0 ? 0.5 : std::abs(lo) * 0.05;
    return {lo - pad, hi + pad};
  }
  return {lo, hi};
}

std::vector<double> niceTicks(const Range& r) {
  const double raw = (r.hi - r.lo) / 5.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  const double norm = raw / mag;
  const double step = mag * (norm < 1.5 ? 1.0 : norm < 3.5 ? 2.0 : norm < 7.5 ? 5.0 : 10.0);
  std::vector<double> ticks;
  for (double v = std::ceil(r.lo / step) * step; v <= r.hi + step * 1e-9; v += step)
    ticks.push_back(std::abs(v) < step * 1e-9 ? 0.0 : v);
  return ticks;
}

std::ofstream openSvg(const std::filesystem::path& file) {
  if (!file.parent_path().empty()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + file.string() + "'");
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\""
      << kHeight << "\" viewBox=\"0 0 " << kWidth << " " << kHeight << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  return out;
}

void writeTitle(std::ofstream& out, const std::string& title) {
  out << "<text x=\"" << kWidth / 2 << "\" y=\"30\" font-family=\"sans-serif\" font-size=\"18\""
      << " text-anchor=\"middle\">" << escape(title) << "</text>\n";
}

void writeAxes(std::ofstream& out, const std::string& xLabel, const std::string& yLabel,
               const Range& xr, const Range& yr) {
  out << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << kRight - kLeft
      << "\" height=\"" << kBottom - kTop << "\" fill=\"none\" stroke=\"#333\"/>\n";
  const auto mapX = [&](double v) {
    return kLeft + (v - xr.lo) / (xr.hi - xr.lo) * (kRight - kLeft);
  };
  const auto mapY = [&](double v) {
    return kBottom - (v - yr.lo) / (yr.hi - yr.lo) * (kBottom - kTop);
  };
  for (double t : niceTicks(xr)) {
    const double x = mapX(t);
    out << "<line x1=\"" << num(x) << "\" y1=\"" << kTop << "\" x2=\"" << num(x) << "\" y2=\""
        << kBottom << "\" stroke=\"#ddd\"/>\n";
    out << "<text x=\"" << num(x) << "\" y=\"" << kBottom + 18
        << "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">"
        << tickText(t) << "</text>\n";
  }
  for (double t : niceTicks(yr)) {
    const double y = mapY(t);
    out << "<line x1=\"" << kLeft << "\" y1=\"" << num(y) << "\" x2=\"" << kRight << "\" y2=\""
        << num(y) << "\" stroke=\"#ddd\"/>\n";
    out << "<text x=\"" << kLeft - 8 << "\" y=\"" << num(y + 4)
        << "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"end\">" << tickText(t)
        << "</text>\n";
  }
  out << "<text x=\"" << (kLeft + kRight) / 2 << "\" y=\"" << kHeight - 18
      << "\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">"
      << escape(xLabel) << "</text>\n";
  out << "<text x=\"22\" y=\"" << (kTop + kBottom) / 2
      << "\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\""
      << " transform=\"rotate(-90 22 " << (kTop + kBottom) / 2 << ")\">" << escape(yLabel)
      << "</text>\n";
}

}  // namespace

void writeLinePlot(const std::filesystem::path& file, const std::string& title,
                   const std::string& xLabel, const std::string& yLabel,
                   const std::vector<Series>& series) {
  double xLo = std::numeric_limits<double>::infinity(), xHi = -xLo;
  double yLo = xLo, yHi = -xLo;
  for (const Series& s : series) {
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      xLo = std::min(xLo, s.x[i]);
      xHi = std::max(xHi, s.x[i]);
      yLo = std::min(yLo, s.y[i]);
      yHi = std::max(yHi, s.y[i]);
    }
  }
  const Range xr = padded(xLo, xHi);
  const Range yr = padded(yLo, yHi);

  std::ofstream out = openSvg(file);
  writeTitle(out, title);
  writeAxes(out, xLabel, yLabel, xr, yr);
  const auto mapX = [&](double v) {
    return kLeft + (v - xr.lo) / (xr.hi - xr.lo) * (kRight - kLeft);
  };
  const auto mapY = [&](double v) {
    return kBottom - (v - yr.lo) / (yr.hi - yr.lo) * (kBottom - kTop);
  };

  int colorIdx = 0;
  int legendRow = 0;
  constexpr int kMaxLegend = 20;
  for (const Series& s : series) {
    const std::string color = kPalette[colorIdx % kPaletteSize];
    ++colorIdx;
    std::ostringstream points;
    bool open = false;
    auto flush = [&]() {
      if (open)
        out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\""
            << " points=\"" << points.str() << "\"/>\n";
      points.str("");
      open = false;
    };
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) {
        flush();
        continue;
      }
      points << num(mapX(s.x[i])) << ',' << num(mapY(s.y[i])) << ' ';
      open = true;
    }
    flush();
    if (legendRow < kMaxLegend) {
      const double y = kTop + 14 + 18.0 * legendRow;
      out << "<line x1=\"" << kRight + 10 << "\" y1=\"" << num(y - 4) << "\" x2=\""
          << kRight + 34 << "\" y2=\"" << num(y - 4) << "\" stroke=\"" << color
          << "\" stroke-width=\"2\"/>\n";
      out << "<text x=\"" << kRight + 40 << "\" y=\"" << num(y)
          << "\" font-family=\"sans-serif\" font-size=\"12\">" << escape(s.label)
          << "</text>\n";
    } else if (legendRow == kMaxLegend) {
      out << "<text x=\"" << kRight + 40 << "\" y=\"" << num(kTop + 14 + 18.0 * kMaxLegend)
          << "\" font-family=\"sans-serif\" font-size=\"12\">(" << series.size() - kMaxLegend
          << " more)</text>\n";
    }
    ++legendRow;
  }
  out << "</svg>\n";
}

void writeHeatmap(const std::filesystem::path& file, const std::string& title,
                  const Eigen::MatrixXd& values) {
  std::ofstream out = openSvg(file);
  writeTitle(out, title);
  const Eigen::Index rows = values.rows();
  const Eigen::Index cols = values.cols();
  if (rows == 0 || cols == 0) {
    out << "</svg>\n";
    return;
  }
  double lo = values.minCoeff(), hi = values.maxCoeff();
  if (!(hi > lo)) hi = lo + 1.0;
  const double side = std::min((kRight - kLeft) / static_cast<double>(cols),
                               (kBottom - kTop) / static_cast<double>(rows));
  const double x0 = kLeft, y0 = kTop;
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      const double t = (values(i, j) - lo) / (hi - lo);
      const int r = static_cast<int>(std::lround(255.0 - t * (255.0 - 8.0)));
      const int g = static_cast<int>(std::lround(255.0 - t * (255.0 - 48.0)));
      const int b = static_cast<int>(std::lround(255.0 - t * (255.0 - 107.0)));
      char color[8];
      std::snprintf(color, sizeof color, "#%02x%02x%02x", r, g, b);
      out << "<rect x=\"" << num(x0 + side * static_cast<double>(j)) << "\" y=\""
          << num(y0 + side * static_cast<double>(i)) << "\" width=\"" << num(side)
          << "\" height=\"" << num(side) << "\" fill=\"" << color << "\"/>\n";
    }
  }
  out << "<text x=\"" << kLeft << "\" y=\"" << kHeight - 18
      << "\" font-family=\"sans-serif\" font-size=\"13\">rows = queries, columns = keys;"
      << " range [" << tickText(lo) << ", " << tickText(hi) << "]</text>\n";
  out << "</svg>\n";
}

void writeBarChart(const std::filesystem::path& file, const std::string& title,
                   const std::vector<std::string>& labels, const std::vector<double>& values) {
  if (labels.size() != values.size())
    throw std::invalid_argument("writeBarChart: labels/values size mismatch");
  double lo = 0.0, hi = 0.0;
  for (double v : values) {
    if (!std::isfinite(v)) continue;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const Range yr = padded(lo, hi == lo ? lo + 1.0 : hi);
  std::ofstream out = openSvg(file);
  writeTitle(out, title);
  writeAxes(out, "", "value", {0.0, static_cast<double>(std::max<std::size_t>(values.size(), 1))},
            yr);
  const auto mapY = [&](double v) {
    return kBottom - (v - yr.lo) / (yr.hi - yr.lo) * (kBottom - kTop);
  };
  const double slot = (kRight - kLeft) / static_cast<double>(std::max<std::size_t>(values.size(), 1));
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) continue;
    const double x = kLeft + slot * (static_cast<double>(i) + 0.15);
    const double yZero = mapY(std::max(0.0, yr.lo));
    const double yVal = mapY(values[i]);
    const double top = std::min(yZero, yVal);
    const double height = std::abs(yZero - yVal);
    out << "<rect x=\"" << num(x) << "\" y=\"" << num(top) << "\" width=\"" << num(slot * 0.7)
        << "\" height=\"" << num(height) << "\" fill=\""
        << kPalette[i % kPaletteSize] << "\"/>\n";
    out << "<text x=\"" << num(x + slot * 0.35) << "\" y=\"" << num(top - 6)
        << "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">"
        << tickText(values[i]) << "</text>\n";
    out << "<text x=\"" << num(x + slot * 0.35) << "\" y=\"" << kBottom + 18
        << "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">"
        << escape(labels[i]) << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace attnlab::svg
