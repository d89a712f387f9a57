// SPDX-License-Identifier: Apache-2.0

#include "mtlab/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace mtlab {

namespace fs = std::filesystem;

namespace {

constexpr double kWidth = 640, kHeight = 400;
constexpr double kLeft = 70, kRight = 150, kTop = 40, kBottom = 60;
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

struct Range {
  double lo = 0.0, hi = 1.0;

  void cover(double v) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  double at(double v, double from, double to) const { return from + (v - lo) / (hi - lo) * (to - from); }
};

Range padded(double lo, double hi) {
  if (lo == hi) return {lo - 0.5, hi + 0.5};
  return {lo, hi};
}

struct Canvas {
  std::ostringstream out;

  Canvas(const std::string& title) {
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
        << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << "<text x=\"" << num(kWidth / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << escape(title)
        << "</text>\n";
  }

  void axes(const Range& y, const std::string& y_label) {
    const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
    out << "<line x1=\"" << num(x0) << "\" y1=\"" << num(y0) << "\" x2=\"" << num(x1) << "\" y2=\"" << num(y0)
        << "\" stroke=\"black\"/>\n"
        << "<line x1=\"" << num(x0) << "\" y1=\"" << num(y0) << "\" x2=\"" << num(x0) << "\" y2=\"" << num(y1)
        << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
      const double v = y.lo + (y.hi - y.lo) * i / 4.0;
      const double py = y.at(v, y0, y1);
      out << "<line x1=\"" << num(x0 - 4) << "\" y1=\"" << num(py) << "\" x2=\"" << num(x0) << "\" y2=\"" << num(py)
          << "\" stroke=\"black\"/>\n"
          << "<text x=\"" << num(x0 - 6) << "\" y=\"" << num(py + 4) << "\" text-anchor=\"end\">" << tick(v)
          << "</text>\n";
    }
    out << "<text x=\"16\" y=\"" << num((y0 + y1) / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
        << num((y0 + y1) / 2) << ")\">" << escape(y_label) << "</text>\n";
  }

  std::string finish() {
    out << "</svg>\n";
    return out.str();
  }
};

double parse_number(const CsvTable& t, std::size_t row, std::size_t col, const std::string& source) {
  const std::string& s = t.rows[row][col];
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw CsvError(source, t.lines[row], "column '" + t.header[col] + "' holds '" + s + "', expected a number");
  }
}

bool header_is(const CsvTable& t, std::initializer_list<const char*> names) {
  return std::equal(t.header.begin(), t.header.end(), names.begin(), names.end(),
                    [](const std::string& a, const char* b) { return a == b; });
}

}  // namespace

CsvError::CsvError(const std::string& source, std::size_t line, const std::string& detail)
    : std::runtime_error(source + ":" + std::to_string(line) + ": " + detail), line_(line) {}

std::size_t CsvTable::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw CsvError("csv", 1, "missing column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

CsvTable parse_csv(const std::string& text, const std::string& source) {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(s);
    while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
    if (!s.empty() && s.back() == ',') cells.emplace_back();
    return cells;
  };
  while (std::getline(in, line)) {
    ++number;
    if (trim(line).empty()) continue;
    auto cells = split(line);
    if (t.header.empty()) {
      t.header = std::move(cells);
      continue;
    }
    if (cells.size() != t.header.size()) {
      throw CsvError(source, number, "expected " + std::to_string(t.header.size()) + " fields, found " +
                                         std::to_string(cells.size()));
    }
    t.rows.push_back(std::move(cells));
    t.lines.push_back(number);
  }
  if (t.header.empty()) throw CsvError(source, 1, "missing header");
  return t;
}

std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series) {
  Canvas c(title);
  bool any = false;
  Range xr, yr;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!any) {
        xr = {s.x[i], s.x[i]};
        yr = {s.y[i], s.y[i]};
        any = true;
      }
      xr.cover(s.x[i]);
      yr.cover(s.y[i]);
    }
  }
  if (any) {
    xr = padded(xr.lo, xr.hi);
    yr = padded(std::min(yr.lo, 0.0), yr.hi);
  }
  c.axes(yr, y_label);
  const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
  for (int i = 0; i <= 4; ++i) {
    const double v = xr.lo + (xr.hi - xr.lo) * i / 4.0;
    c.out << "<text x=\"" << num(xr.at(v, x0, x1)) << "\" y=\"" << num(y0 + 16) << "\" text-anchor=\"middle\">"
          << tick(v) << "</text>\n";
  }
  c.out << "<text x=\"" << num((x0 + x1) / 2) << "\" y=\"" << num(kHeight - 18) << "\" text-anchor=\"middle\">"
        << escape(x_label) << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* colour = kPalette[k % std::size(kPalette)];
    if (!s.x.empty()) {
      c.out << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        c.out << (i ? " " : "") << num(xr.at(s.x[i], x0, x1)) << ',' << num(yr.at(s.y[i], y0, y1));
      }
      c.out << "\"/>\n";
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        c.out << "<circle cx=\"" << num(xr.at(s.x[i], x0, x1)) << "\" cy=\"" << num(yr.at(s.y[i], y0, y1))
              << "\" r=\"3\" fill=\"" << colour << "\"/>\n";
      }
    }
    const double ly = kTop + 14.0 * static_cast<double>(k);
    c.out << "<rect x=\"" << num(x1 + 10) << "\" y=\"" << num(ly - 8) << "\" width=\"10\" height=\"10\" fill=\""
          << colour << "\"/>\n<text x=\"" << num(x1 + 24) << "\" y=\"" << num(ly + 1) << "\">" << escape(s.name)
          << "</text>\n";
  }
  return c.finish();
}

std::string bar_chart_svg(const std::string& title, const std::string& y_label, const std::vector<BarGroup>& bars) {
  Canvas c(title);
  Range yr{0.0, 0.0};
  for (const auto& b : bars) {
    yr.cover(b.value + b.error);
    yr.cover(b.value - b.error);
  }
  yr = padded(yr.lo, yr.hi);
  c.axes(yr, y_label);
  const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
  const double slot = bars.empty() ? 0.0 : (x1 - x0) / static_cast<double>(bars.size());
  const double base = yr.at(0.0, y0, y1);
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const auto& b = bars[i];
    const double left = x0 + slot * (static_cast<double>(i) + 0.15), w = slot * 0.7;
    const double top = yr.at(b.value, y0, y1);
    c.out << "<rect x=\"" << num(left) << "\" y=\"" << num(std::min(top, base)) << "\" width=\"" << num(w)
          << "\" height=\"" << num(std::abs(base - top)) << "\" fill=\"" << kPalette[i % std::size(kPalette)]
          << "\"/>\n";
    if (b.error > 0.0) {
      const double cx = left + w / 2;
      c.out << "<line x1=\"" << num(cx) << "\" y1=\"" << num(yr.at(b.value - b.error, y0, y1)) << "\" x2=\""
            << num(cx) << "\" y2=\"" << num(yr.at(b.value + b.error, y0, y1)) << "\" stroke=\"black\"/>\n";
    }
    c.out << "<text x=\"" << num(left + w / 2) << "\" y=\"" << num(y0 + 14) << "\" text-anchor=\"end\" transform=\"rotate(-30 "
          << num(left + w / 2) << ' ' << num(y0 + 14) << ")\">" << escape(b.label) << "</text>\n";
  }
  return c.finish();
}

std::string chart_for_csv(const std::string& text, const std::string& title) {
  const CsvTable t = parse_csv(text, title);
  if (header_is(t, {"partition", "kind", "layer", "mean", "std"})) {
    std::vector<BarGroup> bars;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      std::string label = t.rows[r][0] + " " + t.rows[r][1];
      if (t.rows[r][2] != "all") label += " L" + t.rows[r][2];
      bars.push_back({label, parse_number(t, r, 3, title), parse_number(t, r, 4, title)});
    }
    return bar_chart_svg(title, "cosine", bars);
  }
  // Line charts: rows grouped into series by their label columns, in first
  // appearance order.
  auto grouped = [&](std::size_t x_col, std::size_t y_col, const std::vector<std::size_t>& label_cols) {
    std::vector<Series> series;
    std::map<std::string, std::size_t> index;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      std::string name;
      for (std::size_t c : label_cols) name += (name.empty() ? "" : " ") + t.rows[r][c];
      auto [it, fresh] = index.emplace(name, series.size());
      if (fresh) series.push_back({name, {}, {}});
      series[it->second].x.push_back(parse_number(t, r, x_col, title));
      series[it->second].y.push_back(parse_number(t, r, y_col, title));
    }
    return series;
  };
  if (header_is(t, {"step", "partition", "kind", "layer", "mean", "std"})) {
    return line_chart_svg(title, "step", "cosine", grouped(0, 4, {1, 2, 3}));
  }
  if (header_is(t, {"layer", "stream", "IE"})) return line_chart_svg(title, "layer", "entropy (bits)", grouped(0, 2, {1}));
  if (header_is(t, {"step", "task", "m", "w"})) return line_chart_svg(title, "step", "weight", grouped(0, 3, {1}));
  if (header_is(t, {"step", "batch", "n_mean", "m_mean", "ratio"})) {
    // Average batches per step.
    Series s{"length ratio", {}, {}};
    std::vector<std::size_t> counts;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      const double step = parse_number(t, r, 0, title), ratio = parse_number(t, r, 4, title);
      parse_number(t, r, 1, title);
      if (s.x.empty() || s.x.back() != step) {
        s.x.push_back(step);
        s.y.push_back(0.0);
        counts.push_back(0);
      }
      s.y.back() += ratio;
      ++counts.back();
    }
    for (std::size_t i = 0; i < s.y.size(); ++i) s.y[i] /= static_cast<double>(counts[i]);
    return line_chart_svg(title, "step", "shrunk / original length", {s});
  }
  std::string joined;
  for (const auto& h : t.header) joined += (joined.empty() ? "" : ",") + h;
  throw CsvError(title, 1, "unrecognized report header '" + joined + "'");
}

std::vector<std::string> export_plots(const std::string& report_dir, const std::string& out_dir) {
  if (!fs::is_directory(report_dir)) throw std::runtime_error("export-plots: no report directory " + report_dir);
  std::vector<fs::path> inputs;
  for (const auto& entry : fs::directory_iterator(report_dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".csv") inputs.push_back(entry.path());
  }
  std::sort(inputs.begin(), inputs.end());
  fs::create_directories(out_dir);
  std::vector<std::string> written;
  for (const auto& path : inputs) {
    std::ifstream in(path);
    std::stringstream text;
    text << in.rdbuf();
    const std::string svg = chart_for_csv(text.str(), path.filename().string());
    const fs::path target = fs::path(out_dir) / path.filename().replace_extension(".svg");
    std::ofstream out(target, std::ios::binary);
    out << svg;
    if (!out) throw std::runtime_error("export-plots: cannot write " + target.string());
    written.push_back(target.string());
  }
  return written;
}

}  // namespace mtlab
