// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "kdpl/dataset.hpp"
#include "kdpl/student.hpp"

namespace kdpl {

/// Half-up rounding to 2 decimals, applied at report time only.
inline double round2(double v) { return std::floor(v * 100.0 + 0.5) / 100.0; }

inline std::string format2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", round2(v));
  return buf;
}

/// Top-1 accuracy (percentage, full precision) of the prompted student over a
/// split. `gamma` may be null for the hand-crafted zero-shot baseline.
inline double evaluate_accuracy(const DualEncoderModel& model, PromptParameters* gamma,
                                const DatasetBundle& bundle, const DatasetSplit& split,
                                const ClassSet& classes, double tau,
                                const std::string& handcrafted_template = "a photo of a {}") {
  if (split.items.empty()) throw ContractViolation("cannot evaluate an empty split");
  if (static_cast<int>(split.classnames.size()) != classes.size())
    throw ContractViolation("class set does not match split classnames");
  const std::size_t chunk = 64;
  long correct = 0;
  for (std::size_t at = 0; at < split.items.size(); at += chunk) {
    std::size_t take = std::min(chunk, split.items.size() - at);
    std::vector<BatchItem> batch;
    batch.reserve(take);
    for (std::size_t i = 0; i < take; ++i) batch.push_back(bundle.make_item(split.items[at + i]));
    auto dists = student_predict(model, gamma, batch, classes, tau, handcrafted_template);
    for (std::size_t i = 0; i < take; ++i) {
      Eigen::Index best = 0;
      dists[i].probs.maxCoeff(&best);
      if (static_cast<int>(best) == split.items[at + i].label) ++correct;
    }
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(split.items.size());
}

/// 2 * base * new / (base + new); both inputs must be positive.
inline double harmonic_mean(double base, double novel) {
  if (!(base > 0.0) || !(novel > 0.0))
    throw ContractViolation("harmonic mean needs positive inputs");
  return 2.0 * base * novel / (base + novel);
}

inline double average_over_targets(const std::vector<double>& per_dataset) {
  if (per_dataset.empty()) throw ContractViolation("average over an empty target list");
  double s = 0.0;
  for (double v : per_dataset) s += v;
  return s / static_cast<double>(per_dataset.size());
}

struct MetricsRow {
  std::string scenario;
  std::string method;
  std::string backbone;
  std::string dataset;
  std::string seed;  // seed number or "avg"
  std::string split;
  double accuracy = 0.0;
};

/// Raw per-seed rows plus recomputable aggregates, written as a delimited
/// text table.
struct MetricsTable {
  std::vector<MetricsRow> rows;

  void add(MetricsRow r) { rows.push_back(std::move(r)); }

  /// Mean over the seed rows matching (dataset, split), appended as seed="avg".
  void add_seed_average(const std::string& scenario, const std::string& method,
                        const std::string& backbone, const std::string& dataset,
                        const std::string& split) {
    std::vector<double> vals;
    for (const auto& r : rows)
      if (r.scenario == scenario && r.method == method && r.dataset == dataset &&
          r.split == split && r.seed != "avg")
        vals.push_back(r.accuracy);
    if (vals.empty()) return;
    add({scenario, method, backbone, dataset, "avg", split, average_over_targets(vals)});
  }

  std::string to_tsv() const {
    std::ostringstream out;
    out << "scenario\tmethod\tbackbone\tdataset\tseed\tsplit\taccuracy\n";
    for (const auto& r : rows)
      out << r.scenario << "\t" << r.method << "\t" << r.backbone << "\t" << r.dataset << "\t"
          << r.seed << "\t" << r.split << "\t" << format2(r.accuracy) << "\n";
    return out.str();
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write results file: " + path);
    out << to_tsv();
  }

  static MetricsTable load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read results file: " + path);
    MetricsTable t;
    std::string line;
    if (!std::getline(in, line)) throw ParseError(path + ": empty results file");
    int lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::istringstream ls(line);
      MetricsRow r;
      std::string acc;
      if (!std::getline(ls, r.scenario, '\t') || !std::getline(ls, r.method, '\t') ||
          !std::getline(ls, r.backbone, '\t') || !std::getline(ls, r.dataset, '\t') ||
          !std::getline(ls, r.seed, '\t') || !std::getline(ls, r.split, '\t') ||
          !std::getline(ls, acc, '\t'))
        throw ParseError(path + ":" + std::to_string(lineno) + ": malformed row");
      r.accuracy = std::stod(acc);
      t.rows.push_back(std::move(r));
    }
    return t;
  }
};

}  // namespace kdpl
