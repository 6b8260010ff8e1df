#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "stressprompt/common.hpp"
#include "stressprompt/dataset.hpp"
#include "stressprompt/eval_harness.hpp"
#include "stressprompt/scanner.hpp"

namespace stressprompt {

enum class ArtifactKind { Table, Scan, Distribution, Curve, Radar, Scatter };

inline ArtifactKind parse_artifact_kind(std::string_view s) {
  if (s == "table") return ArtifactKind::Table;
  if (s == "scan") return ArtifactKind::Scan;
  if (s == "distribution") return ArtifactKind::Distribution;
  if (s == "curve") return ArtifactKind::Curve;
  if (s == "radar") return ArtifactKind::Radar;
  if (s == "scatter") return ArtifactKind::Scatter;
  throw Error(ErrorKind::Config, "unknown artifact kind '" + std::string(s) + "'");
}

/// Paths of one rendered artifact. The data file is the contract; the image
/// is best-effort.
struct RenderedFiles {
  std::filesystem::path data;
  std::filesystem::path image;
};

/// Output directory layout: runs/<hash>/ledger.jsonl, tables/, scans/, figures/.
struct OutputLayout {
  std::filesystem::path root;

  std::filesystem::path ledger(const std::string& config_hash) const { return root / "runs" / config_hash / "ledger.jsonl"; }
  std::filesystem::path tables() const { return root / "tables"; }
  std::filesystem::path scans() const { return root / "scans"; }
  std::filesystem::path figures() const { return root / "figures"; }
};

// ---------------------------------------------------------------------------
// CSV data

namespace detail {

inline std::string num(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error(ErrorKind::Io, "failed writing " + path.string());
}

}  // namespace detail

/// Rows of cells from a simple CSV (no quoting); '#' comment lines skipped.
inline std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    rows.push_back(detail::split_csv_line(line));
  }
  return rows;
}

inline std::string distribution_csv(const StressLevelPartition& part) {
  std::string out = "level,count\n";
  for (int l = 1; l <= kNumLevels; ++l) out += std::to_string(l) + "," + std::to_string(part.count(l)) + "\n";
  return out;
}

/// (level, mean, std) for every level row of `task`.
inline std::string curve_csv(const PerformanceTable& table, const std::string& task) {
  std::string out = "level,mean,std\n";
  for (const auto& r : table.rows) {
    if (r.task != task || r.condition.rfind("level_", 0) != 0) continue;
    out += std::to_string(condition_rank(r.condition)) + "," + detail::num(r.mean) + "," + detail::num(r.std) + "\n";
  }
  return out;
}

/// One row per task (radar axis), one column per condition.
inline std::string radar_csv(const PerformanceTable& table) {
  std::vector<std::string> conditions;
  for (const auto& r : table.rows) {
    if (std::find(conditions.begin(), conditions.end(), r.condition) == conditions.end()) conditions.push_back(r.condition);
  }
  std::stable_sort(conditions.begin(), conditions.end(),
                   [](const auto& a, const auto& b) { return condition_rank(a) < condition_rank(b); });
  std::string out = "task";
  for (const auto& c : conditions) out += "," + c;
  out += "\n";
  for (const auto& task : table.tasks()) {
    out += task;
    for (const auto& c : conditions) {
      const auto* row = table.find(task, c);
      out += ",";
      if (row) out += detail::num(row->mean);
    }
    out += "\n";
  }
  return out;
}

inline std::string table_csv(const PerformanceTable& table) {
  std::string out = "task,condition,mean,std,n_prompts,single_prompt,failures\n";
  for (const auto& r : table.rows) {
    out += r.task + "," + r.condition + "," + detail::num(r.mean) + "," + detail::num(r.std) + "," +
           std::to_string(r.per_prompt.size()) + "," + (r.single_prompt ? "1" : "0") + "," +
           std::to_string(r.failures) + "\n";
  }
  return out;
}

inline std::string scatter_csv(const std::vector<EmbeddedPoint>& points) {
  std::string out = "prompt_id,level,x,y\n";
  for (const auto& p : points) out += p.prompt_id + "," + std::to_string(p.level) + "," + detail::num(p.x) + "," + detail::num(p.y) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// SVG

namespace detail {

class Svg {
 public:
  Svg(int w, int h) : w_(w), h_(h) {}

  void rect(double x, double y, double w, double h, const std::string& fill) {
    body_ << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << w << "\" height=\"" << h << "\" fill=\"" << fill
          << "\"/>\n";
  }
  void line(double x1, double y1, double x2, double y2, const std::string& stroke, double width = 1.0) {
    body_ << "<line x1=\"" << x1 << "\" y1=\"" << y1 << "\" x2=\"" << x2 << "\" y2=\"" << y2 << "\" stroke=\"" << stroke
          << "\" stroke-width=\"" << width << "\"/>\n";
  }
  void circle(double x, double y, double r, const std::string& fill) {
    body_ << "<circle cx=\"" << x << "\" cy=\"" << y << "\" r=\"" << r << "\" fill=\"" << fill << "\"/>\n";
  }
  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke, bool closed = false) {
    body_ << (closed ? "<polygon" : "<polyline") << " fill=\"none\" stroke=\"" << stroke << "\" points=\"";
    for (const auto& [x, y] : pts) body_ << x << ',' << y << ' ';
    body_ << "\"/>\n";
  }
  void text(double x, double y, const std::string& s, int size = 11, const char* anchor = "middle") {
    std::string esc;
    for (char c : s) {
      if (c == '<') esc += "&lt;";
      else if (c == '>') esc += "&gt;";
      else if (c == '&') esc += "&amp;";
      else esc += c;
    }
    body_ << "<text x=\"" << x << "\" y=\"" << y << "\" font-size=\"" << size << "\" text-anchor=\"" << anchor
          << "\" font-family=\"sans-serif\">" << esc << "</text>\n";
  }
  std::string str() const {
    return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w_) + "\" height=\"" +
           std::to_string(h_) + "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n" + body_.str() +
           "</svg>\n";
  }

 private:
  int w_, h_;
  std::ostringstream body_;
};

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f",
                                 "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac"};
  return colors[i % 10];
}

// Diverging blue-white-red for t in [-1, 1].
inline std::string diverging(double t) {
  t = std::clamp(t, -1.0, 1.0);
  int r, g, b;
  if (t < 0) {
    r = static_cast<int>(255 * (1 + t));
    g = r;
    b = 255;
  } else {
    r = 255;
    g = static_cast<int>(255 * (1 - t));
    b = g;
  }
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

inline std::string bar_chart(const std::vector<std::string>& labels, const std::vector<double>& values,
                             const std::string& title) {
  const int w = 60 + 40 * static_cast<int>(labels.size()), h = 260;
  Svg svg(w, h);
  svg.text(w / 2.0, 18, title, 13);
  const double vmax = values.empty() ? 1.0 : std::max(1e-12, *std::max_element(values.begin(), values.end()));
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double bh = 180.0 * values[i] / vmax;
    svg.rect(40 + 40.0 * i, 220 - bh, 30, bh, palette(0));
    svg.text(55 + 40.0 * i, 236, labels[i]);
    svg.text(55 + 40.0 * i, 215 - bh, num(values[i]).substr(0, 6), 9);
  }
  svg.line(35, 220, w - 10, 220, "#333");
  return svg.str();
}

}  // namespace detail

inline std::string heatmap_svg(const ScanMatrix& m, const std::string& title) {
  const int cell = 18;
  const int left = 60, top = 30;
  const int w = left + cell * static_cast<int>(m.cols()) + 20;
  const int h = top + cell * static_cast<int>(m.rows()) + 40;
  detail::Svg svg(w, h);
  svg.text(w / 2.0, 18, title, 13);
  double vmax = 1e-12;
  for (double v : m.values) vmax = std::max(vmax, std::abs(v));
  for (std::size_t r = 0; r < m.rows(); ++r) {
    svg.text(left - 4, top + cell * (r + 0.7), m.row_labels[r], 10, "end");
    for (std::size_t c = 0; c < m.cols(); ++c) {
      svg.rect(left + cell * static_cast<double>(c), top + cell * static_cast<double>(r), cell, cell,
               detail::diverging(m.at(r, c) / vmax));
    }
  }
  return svg.str();
}

// ---------------------------------------------------------------------------
// Renderers

inline RenderedFiles render_table(const PerformanceTable& table, const OutputLayout& out, const std::string& name) {
  RenderedFiles f{out.tables() / (name + ".json"), out.tables() / (name + ".csv")};
  detail::write_text(f.data, to_json(table).dump(2) + "\n");
  detail::write_text(f.image, table_csv(table));
  return f;
}

inline RenderedFiles render_scan(const ScanMatrix& scan, const OutputLayout& out, const std::string& name) {
  RenderedFiles f{out.scans() / (name + ".csv"), out.figures() / (name + ".svg")};
  detail::write_text(f.data, scan_to_csv(scan));
  detail::write_text(f.image, heatmap_svg(scan, name));
  return f;
}

inline RenderedFiles render_distribution(const StressLevelPartition& part, const OutputLayout& out,
                                         const std::string& name = "distribution") {
  RenderedFiles f{out.figures() / (name + ".csv"), out.figures() / (name + ".svg")};
  detail::write_text(f.data, distribution_csv(part));
  std::vector<std::string> labels;
  std::vector<double> values;
  for (int l = 1; l <= kNumLevels; ++l) {
    labels.push_back(std::to_string(l));
    values.push_back(static_cast<double>(part.count(l)));
  }
  detail::write_text(f.image, detail::bar_chart(labels, values, "prompts per stress level"));
  return f;
}

inline RenderedFiles render_curve(const PerformanceTable& table, const std::string& task, const OutputLayout& out,
                                  const std::string& name) {
  RenderedFiles f{out.figures() / (name + ".csv"), out.figures() / (name + ".svg")};
  const auto csv = curve_csv(table, task);
  detail::write_text(f.data, csv);

  std::vector<std::pair<double, double>> pts;
  const auto rows = parse_csv(csv);
  detail::Svg svg(420, 280);
  svg.text(210, 18, task + " by stress level", 13);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const double level = std::stod(rows[i][0]), mean = std::stod(rows[i][1]), sd = std::stod(rows[i][2]);
    const double x = 40 + 35 * (level - 1), y = 240 - 200 * mean;
    pts.emplace_back(x, y);
    svg.line(x, y - 200 * sd, x, y + 200 * sd, "#999");
    svg.circle(x, y, 3, detail::palette(0));
    svg.text(x, 256, rows[i][0]);
  }
  svg.polyline(pts, detail::palette(0));
  detail::write_text(f.image, svg.str());
  return f;
}

inline RenderedFiles render_radar(const PerformanceTable& table, const OutputLayout& out, const std::string& name) {
  RenderedFiles f{out.figures() / (name + ".csv"), out.figures() / (name + ".svg")};
  const auto csv = radar_csv(table);
  detail::write_text(f.data, csv);

  const auto rows = parse_csv(csv);
  const std::size_t k = rows.size() - 1;
  detail::Svg svg(400, 400);
  const double cx = 200, cy = 200, radius = 150;
  auto at = [&](std::size_t axis, double value) {
    const double a = 2 * 3.141592653589793 * static_cast<double>(axis) / std::max<std::size_t>(k, 1) - 3.141592653589793 / 2;
    return std::pair<double, double>{cx + radius * value * std::cos(a), cy + radius * value * std::sin(a)};
  };
  for (std::size_t a = 0; a < k; ++a) {
    const auto [x, y] = at(a, 1.0);
    svg.line(cx, cy, x, y, "#ccc");
    svg.text(x, y, rows[a + 1][0], 10);
  }
  for (std::size_t c = 1; c < rows[0].size(); ++c) {
    std::vector<std::pair<double, double>> poly;
    for (std::size_t a = 0; a < k; ++a) {
      const auto& cell = rows[a + 1][c];
      poly.push_back(at(a, cell.empty() ? 0.0 : std::clamp(std::stod(cell), 0.0, 1.0)));
    }
    svg.polyline(poly, detail::palette(c - 1), true);
  }
  detail::write_text(f.image, svg.str());
  return f;
}

inline RenderedFiles render_scatter(const std::vector<EmbeddedPoint>& points, const OutputLayout& out,
                                    const std::string& name) {
  RenderedFiles f{out.figures() / (name + ".csv"), out.figures() / (name + ".svg")};
  detail::write_text(f.data, scatter_csv(points));
  double xmin = 0, xmax = 1e-12, ymin = 0, ymax = 1e-12;
  for (const auto& p : points) {
    xmin = std::min(xmin, p.x);
    xmax = std::max(xmax, p.x);
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
  }
  detail::Svg svg(400, 400);
  for (const auto& p : points) {
    const double x = 20 + 360 * (p.x - xmin) / (xmax - xmin);
    const double y = 380 - 360 * (p.y - ymin) / (ymax - ymin);
    svg.circle(x, y, 4, detail::diverging((p.level - 5.5) / 4.5));
  }
  detail::write_text(f.image, svg.str());
  return f;
}

}  // namespace stressprompt
