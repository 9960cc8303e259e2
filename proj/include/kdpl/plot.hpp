// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "kdpl/metrics.hpp"

namespace kdpl {

struct PlotSeries {
  std::string method;
  std::map<std::string, double> by_dataset;  // dataset -> accuracy
};

/// Pulls one accuracy per dataset from a results table: seed-averaged test
/// rows when present, otherwise the mean of per-seed test rows.
inline PlotSeries plot_series_from_table(const MetricsTable& t, const std::string& split = "test") {
  PlotSeries s;
  std::map<std::string, std::pair<double, int>> per_seed_acc;
  for (const auto& r : t.rows) {
    if (r.split != split) continue;
    if (s.method.empty() && r.method != "zero_shot") s.method = r.method;
    if (r.seed == "avg") {
      s.by_dataset[r.dataset] = r.accuracy;
    } else {
      auto& acc = per_seed_acc[r.dataset];
      acc.first += r.accuracy;
      acc.second += 1;
    }
  }
  for (const auto& [ds, acc] : per_seed_acc)
    if (!s.by_dataset.count(ds)) s.by_dataset[ds] = acc.first / acc.second;
  if (s.method.empty()) s.method = "unknown";
  return s;
}

/// Grouped per-dataset bar chart (method x dataset -> accuracy) as a
/// self-contained SVG. Bars carry data-* attributes so results can be
/// checked against the chart programmatically. Datasets missing from some
/// series are dropped from the chart (the caller is warned via the return).
inline std::vector<std::string> emit_comparison_plot(const std::vector<PlotSeries>& series,
                                                     const std::string& out_path) {
  if (series.empty()) throw ContractViolation("nothing to plot");
  // dataset intersection, in first-series order
  std::vector<std::string> datasets;
  for (const auto& [ds, v] : series.front().by_dataset) {
    bool everywhere = true;
    for (const auto& s : series) everywhere = everywhere && s.by_dataset.count(ds) > 0;
    if (everywhere) datasets.push_back(ds);
  }
  std::vector<std::string> dropped;
  for (const auto& s : series)
    for (const auto& [ds, v] : s.by_dataset)
      if (std::find(datasets.begin(), datasets.end(), ds) == datasets.end() &&
          std::find(dropped.begin(), dropped.end(), ds) == dropped.end())
        dropped.push_back(ds);
  if (datasets.empty()) throw ContractViolation("result sets share no datasets");

  const int bar_w = 26, gap = 14, group_gap = 34;
  const int chart_h = 320, margin_l = 60, margin_b = 90, margin_t = 40;
  const int group_w = static_cast<int>(series.size()) * (bar_w + gap) - gap + group_gap;
  const int width = margin_l + static_cast<int>(datasets.size()) * group_w + 40;
  const int height = chart_h + margin_b + margin_t;
  static const char* palette[] = {"#4878cf", "#e24a33", "#6acc65", "#d65f5f",
                                  "#956cb4", "#8c613c", "#dc7ec0", "#797979"};

  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw DataError("cannot write plot: " + out_path);
  char buf[512];
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (int tick = 0; tick <= 100; tick += 20) {
    int y = margin_t + chart_h - tick * chart_h / 100;
    std::snprintf(buf, sizeof(buf),
                  "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"#dddddd\"/>"
                  "<text x=\"%d\" y=\"%d\" font-size=\"11\" text-anchor=\"end\">%d</text>\n",
                  margin_l, y, width - 20, y, margin_l - 6, y + 4, tick);
    out << buf;
  }
  for (std::size_t di = 0; di < datasets.size(); ++di) {
    int gx = margin_l + static_cast<int>(di) * group_w;
    for (std::size_t si = 0; si < series.size(); ++si) {
      double acc = series[si].by_dataset.at(datasets[di]);
      int h = static_cast<int>(acc * chart_h / 100.0);
      int x = gx + static_cast<int>(si) * (bar_w + gap);
      int y = margin_t + chart_h - h;
      std::snprintf(buf, sizeof(buf),
                    "<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"%s\" "
                    "data-method=\"%s\" data-dataset=\"%s\" data-value=\"%s\"/>\n",
                    x, y, bar_w, h, palette[si % 8], series[si].method.c_str(),
                    datasets[di].c_str(), format2(acc).c_str());
      out << buf;
    }
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%d\" y=\"%d\" font-size=\"11\" text-anchor=\"end\" "
                  "transform=\"rotate(-45 %d %d)\">%s</text>\n",
                  gx + group_w / 2, margin_t + chart_h + 16, gx + group_w / 2,
                  margin_t + chart_h + 16, datasets[di].c_str());
    out << buf;
  }
  for (std::size_t si = 0; si < series.size(); ++si) {
    int y = 18 + static_cast<int>(si) * 16;
    std::snprintf(buf, sizeof(buf),
                  "<rect x=\"%d\" y=\"%d\" width=\"12\" height=\"12\" fill=\"%s\"/>"
                  "<text x=\"%d\" y=\"%d\" font-size=\"12\">%s</text>\n",
                  width - 220, y - 10, palette[si % 8], width - 202, y, series[si].method.c_str());
    out << buf;
  }
  out << "<text x=\"14\" y=\"" << (margin_t + chart_h / 2)
      << "\" font-size=\"12\" transform=\"rotate(-90 14 " << (margin_t + chart_h / 2)
      << ")\">accuracy (%)</text>\n";
  out << "</svg>\n";
  return dropped;
}

/// Parses the data-* attributes back out of a chart (used to verify chart
/// values equal the results files).
inline std::vector<std::tuple<std::string, std::string, double>> parse_plot_values(
    const std::string& svg_path) {
  std::ifstream in(svg_path);
  if (!in) throw DataError("cannot read plot: " + svg_path);
  std::vector<std::tuple<std::string, std::string, double>> out;
  std::string line;
  auto attr = [](const std::string& s, const std::string& key) -> std::string {
    auto pos = s.find(key + "=\"");
    if (pos == std::string::npos) return {};
    pos += key.size() + 2;
    auto end = s.find('"', pos);
    return s.substr(pos, end - pos);
  };
  while (std::getline(in, line)) {
    if (line.find("data-method") == std::string::npos) continue;
    out.emplace_back(attr(line, "data-method"), attr(line, "data-dataset"),
                     std::stod(attr(line, "data-value")));
  }
  return out;
}

}  // namespace kdpl
