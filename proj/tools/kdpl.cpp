// SPDX-License-Identifier: Apache-2.0
//
// Config-driven experiment runner: train / eval / sweep / plot / cache warm.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "kdpl/experiment.hpp"

namespace fs = std::filesystem;

namespace {

kdpl::ExperimentConfig resolve_config(const std::string& config_path,
                                      const std::string& manifest_path,
                                      const std::vector<std::string>& overrides) {
  if (!manifest_path.empty()) {
    auto cfg = kdpl::config_from_manifest(kdpl::read_json_file(manifest_path));
    if (!overrides.empty()) throw kdpl::ConfigError("--set cannot modify a manifest-based run");
    return cfg;
  }
  return kdpl::parse_config(config_path, overrides);
}

int cmd_train(const std::string& config_path, const std::string& manifest_path,
              const std::vector<std::string>& overrides) {
  auto cfg = resolve_config(config_path, manifest_path, overrides);
  auto result = kdpl::run_experiment(cfg);
  std::printf("results: %s\nsummary: %s\n", result.results_path.c_str(),
              result.summary_path.c_str());
  for (const auto& g : result.gaps) std::printf("skipped target (no data): %s\n", g.c_str());
  return result.all_seeds_completed ? 0 : 1;
}

int cmd_eval(const std::string& config_path, const std::string& manifest_path,
             const std::vector<std::string>& overrides) {
  auto cfg = resolve_config(config_path, manifest_path, overrides);
  for (int seed : cfg.seeds) {
    std::string gamma_path =
        (fs::path(cfg.output_dir) / ("prompt_seed" + std::to_string(seed) + ".json")).string();
    if (!fs::exists(gamma_path))
      throw kdpl::DataError("no trained prompt checkpoint for seed " + std::to_string(seed) +
                            " (run `kdpl train` first): " + gamma_path);
  }
  auto world = kdpl::detail::materialize(cfg);
  kdpl::ScenarioSpec spec;
  spec.kind = cfg.scenario;
  spec.source_dataset = world.source.name;
  spec.targets = world.target_names;
  spec.shots = cfg.shots;
  spec.seeds = cfg.seeds;
  kdpl::ScenarioContext ctx;
  ctx.student = &world.student;
  ctx.teacher = &world.teacher;
  ctx.source = &world.source;
  for (std::size_t i = 0; i < world.target_names.size(); ++i)
    ctx.target_bundles[world.target_names[i]] = &world.target_storage[i];
  ctx.vocab = world.vocab ? &*world.vocab : nullptr;
  ctx.teacher_template = cfg.teacher_template;

  kdpl::MetricsTable table;
  for (int seed : cfg.seeds) {
    std::string gamma_path =
        (fs::path(cfg.output_dir) / ("prompt_seed" + std::to_string(seed) + ".json")).string();
    auto gamma = kdpl::PromptParameters::load(gamma_path);
    auto rows = kdpl::evaluate_scenario_seed(spec, ctx, cfg.train, std::move(gamma), seed);
    for (auto& r : rows.rows) table.add(std::move(r));
    for (const auto& g : rows.gaps) std::printf("skipped target (no data): %s\n", g.c_str());
  }
  std::string out_path = (fs::path(cfg.output_dir) / "results_eval.tsv").string();
  table.save(out_path);
  std::printf("results: %s\n", out_path.c_str());
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::vector<std::string>& overrides,
              std::vector<int> k_values) {
  if (k_values.empty()) k_values = {100, 500, 1000, 2000};
  auto base = resolve_config(config_path, "", overrides);
  if (base.variant != kdpl::TrainVariant::ca_kdpl && base.variant != kdpl::TrainVariant::pomp_star)
    throw kdpl::ConfigError("sweep varies K; use a ca_kdpl or pomp_star variant");
  std::string root = base.output_dir;
  std::vector<kdpl::PlotSeries> series;
  bool all_ok = true;
  kdpl::MetricsTable combined;
  for (int k : k_values) {
    auto cfg = base;
    cfg.train.top_k = k;
    cfg.output_dir = (fs::path(root) / ("k" + std::to_string(k))).string();
    auto result = kdpl::run_experiment(cfg);
    all_ok = all_ok && result.all_seeds_completed;
    kdpl::MetricsTable mine;
    std::string m = kdpl::method_display_name(cfg.method, cfg.variant);
    for (const auto& r : result.table.rows)
      if (r.method == m) {
        auto row = r;
        row.method = m + "(K=" + std::to_string(k) + ")";
        combined.add(row);
        mine.add(row);
      }
    series.push_back(kdpl::plot_series_from_table(mine));
  }
  fs::create_directories(root);
  std::string combined_path = (fs::path(root) / "sweep_results.tsv").string();
  combined.save(combined_path);
  auto dropped = kdpl::emit_comparison_plot(series, (fs::path(root) / "sweep_plot.svg").string());
  for (const auto& d : dropped) std::printf("plot: dropped dataset %s\n", d.c_str());
  std::printf("sweep results: %s\n", combined_path.c_str());
  return all_ok ? 0 : 1;
}

int cmd_plot(const std::vector<std::string>& results, const std::string& out,
             const std::string& split) {
  if (results.size() < 1) throw kdpl::ContractViolation("need at least one results file");
  std::vector<kdpl::PlotSeries> series;
  for (const auto& path : results)
    series.push_back(kdpl::plot_series_from_table(kdpl::MetricsTable::load(path), split));
  auto dropped = kdpl::emit_comparison_plot(series, out);
  for (const auto& d : dropped)
    std::fprintf(stderr, "warning: dataset %s missing from some result sets; dropped\n", d.c_str());
  std::printf("plot: %s\n", out.c_str());
  return 0;
}

int cmd_cache_warm(const std::string& config_path, const std::vector<std::string>& overrides) {
  auto cfg = resolve_config(config_path, "", overrides);
  auto world = kdpl::detail::materialize(cfg);
  std::string cache_dir = cfg.cache_dir;
  if (cache_dir.empty()) {
    const char* env = std::getenv("KDPL_CACHE_ROOT");
    cache_dir = env ? std::string(env) : (fs::path(cfg.output_dir) / "cache").string();
  }
  fs::create_directories(cache_dir);
  std::string cache_path = (fs::path(cache_dir) / "teacher_cache.bin").string();
  kdpl::TeacherPredictionCache cache;
  if (fs::exists(cache_path)) {
    try {
      cache = kdpl::TeacherPredictionCache::load(cache_path);
    } catch (const kdpl::CacheError& e) {
      std::fprintf(stderr, "[kdpl] %s; rebuilding cache\n", e.what());
    }
  }
  kdpl::TeacherContext teacher(world.teacher, cfg.teacher_template, cfg.train.distill.tau_teacher,
                               &cache);
  kdpl::ClassSet classes = world.source.class_set();
  for (const auto* split : {&world.source.train, &world.source.val, &world.source.test}) {
    std::vector<kdpl::BatchItem> items;
    for (const auto& s : split->items) items.push_back(world.source.make_item(s));
    if (!items.empty()) kdpl::teacher_predict(teacher, items, classes);
  }
  cache.save(cache_path);
  std::printf("cache: %s (%zu entries, %llu hits / %llu misses this pass)\n", cache_path.c_str(),
              cache.size(), static_cast<unsigned long long>(cache.hits()),
              static_cast<unsigned long long>(cache.misses()));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prompt distillation experiment runner"};
  app.require_subcommand(1);

  std::string config_path, manifest_path, out_path = "plot.svg", split = "test";
  std::vector<std::string> overrides, results;
  std::vector<int> k_values;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "experiment config file");
    cmd->add_option("--set", overrides, "override config keys (key=value)");
  };

  auto* train = app.add_subcommand("train", "train prompts and evaluate the scenario");
  add_common(train);
  train->add_option("--from-manifest", manifest_path, "reproduce a run from its manifest");

  auto* eval = app.add_subcommand("eval", "evaluate existing prompt checkpoints");
  add_common(eval);
  eval->add_option("--from-manifest", manifest_path, "evaluate a manifest-described run");

  auto* sweep = app.add_subcommand("sweep", "run a K sweep for class-agnostic variants");
  add_common(sweep);
  sweep->add_option("--k-values", k_values, "K values to sweep");

  auto* plot = app.add_subcommand("plot", "grouped per-dataset comparison chart");
  plot->add_option("--results", results, "results files (TSV)")->required();
  plot->add_option("-o,--out", out_path, "output SVG path");
  plot->add_option("--split", split, "split column to chart");

  auto* cache = app.add_subcommand("cache", "teacher prediction cache utilities");
  auto* warm = cache->add_subcommand("warm", "precompute teacher distributions");
  add_common(warm);

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(config_path, manifest_path, overrides);
    if (eval->parsed()) return cmd_eval(config_path, manifest_path, overrides);
    if (sweep->parsed()) return cmd_sweep(config_path, overrides, k_values);
    if (plot->parsed()) return cmd_plot(results, out_path, split);
    if (cache->parsed() && warm->parsed()) return cmd_cache_warm(config_path, overrides);
    std::fprintf(stderr, "no subcommand\n");
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
