#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace attnlab::svg {

// One polyline of a line plot. Non-finite points break the line into segments.
struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

// Fixed-size (960x600) chart with axes, ticks, grid and a right-hand legend.
// An empty series list (or all-empty series) still produces a valid figure
// with bare axes.
void writeLinePlot(const std::filesystem::path& file, const std::string& title,
                   const std::string& xLabel, const std::string& yLabel,
                   const std::vector<Series>& series);

// Matrix cells colored on a white-to-dark-blue ramp over [min, max] of the
// data; rows are drawn top to bottom. Meant for attention maps.
void writeHeatmap(const std::filesystem::path& file, const std::string& title,
                  const Eigen::MatrixXd& values);

// Vertical bars with value labels; negative values hang below the zero line.
void writeBarChart(const std::filesystem::path& file, const std::string& title,
                   const std::vector<std::string>& labels, const std::vector<double>& values);

}  // namespace attnlab::svg
