// SPDX-License-Identifier: Apache-2.0
//
// Deterministic SVG charts for the CSV reports. Output depends only on the
// CSV text, so identical reports give byte-identical files.

#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace mtlab {

class CsvError : public std::runtime_error {
 public:
  CsvError(const std::string& source, std::size_t line, const std::string& detail);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  /// 1-based source line of every row.
  std::vector<std::size_t> lines;

  std::size_t column(const std::string& name) const;
};

/// Splits comma-separated text. Every row must match the header width.
CsvTable parse_csv(const std::string& text, const std::string& source = "csv");

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct BarGroup {
  std::string label;
  double value = 0.0;
  double error = 0.0;
};

std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series);
std::string bar_chart_svg(const std::string& title, const std::string& y_label, const std::vector<BarGroup>& bars);

/// Picks the chart for a report from its header. Known layouts: consistency
/// (partition,kind,layer,mean,std), consistency over training
/// (step,partition,kind,layer,mean,std), entropy (layer,stream,IE), weight
/// history (step,task,m,w) and shrink evaluation (step,batch,n_mean,m_mean,ratio).
std::string chart_for_csv(const std::string& text, const std::string& title);

/// Writes one SVG per *.csv in `report_dir` into `out_dir`; returns the
/// written paths in name order.
std::vector<std::string> export_plots(const std::string& report_dir, const std::string& out_dir);

}  // namespace mtlab
