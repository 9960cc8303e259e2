// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "kdpl/episode.hpp"
#include "kdpl/metrics.hpp"
#include "kdpl/trainer.hpp"

namespace kdpl {

enum class ScenarioKind { domain_generalization, cross_dataset, base_to_novel, class_agnostic };

inline std::string scenario_name(ScenarioKind k) {
  switch (k) {
    case ScenarioKind::domain_generalization: return "domain_generalization";
    case ScenarioKind::cross_dataset: return "cross_dataset";
    case ScenarioKind::base_to_novel: return "base_to_novel";
    case ScenarioKind::class_agnostic: return "class_agnostic";
  }
  throw ContractViolation("unknown scenario kind");
}

inline ScenarioKind scenario_from_name(const std::string& s) {
  if (s == "domain_generalization") return ScenarioKind::domain_generalization;
  if (s == "cross_dataset") return ScenarioKind::cross_dataset;
  if (s == "base_to_novel") return ScenarioKind::base_to_novel;
  if (s == "class_agnostic") return ScenarioKind::class_agnostic;
  throw ConfigError("unknown scenario: " + s);
}

struct ScenarioSpec {
  ScenarioKind kind = ScenarioKind::cross_dataset;
  std::string source_dataset;
  std::vector<std::string> targets;  // dataset names; base_to_novel ignores this
  int shots = 16;
  std::vector<int> seeds = {1, 2, 3};
};

/// Everything a scenario run needs resolved up front.
struct ScenarioContext {
  const DualEncoderModel* student = nullptr;
  const DualEncoderModel* teacher = nullptr;
  TeacherPredictionCache* cache = nullptr;
  const DatasetBundle* source = nullptr;
  std::map<std::string, const DatasetBundle*> target_bundles;
  const ClassVocabulary* vocab = nullptr;
  std::string teacher_template = "a photo of {}";
};

inline std::string method_display_name(PromptMethod m, TrainVariant v) {
  std::string base = method_name(m);
  if (v == TrainVariant::plain) return base;
  return base + "+" + variant_name(v);
}

struct SeedRunResult {
  std::vector<MetricsRow> rows;
  std::vector<std::string> gaps;  // skipped targets, explicit and loud
  PromptParameters gamma;
  std::vector<EpochStats> epoch_stats;
};

/// Stage 1 of a seed run: trains prompts on the source dataset (base classes
/// only for base_to_novel).
inline TrainResult train_scenario_seed(const ScenarioSpec& spec, const ScenarioContext& ctx,
                                       const TrainRunConfig& base_cfg,
                                       const PromptOptions& prompt_options, int seed) {
  if (!ctx.student || !ctx.teacher || !ctx.source)
    throw ContractViolation("scenario context is incomplete");
  TrainRunConfig cfg = base_cfg;
  cfg.seed = static_cast<std::uint64_t>(seed);
  TeacherContext teacher(*ctx.teacher, ctx.teacher_template, cfg.distill.tau_teacher, ctx.cache);

  DatasetSplit train_split = ctx.source->train;
  ClassSet classes = ctx.source->class_set();
  if (spec.kind == ScenarioKind::base_to_novel) {
    auto [base_set, novel_set] = base_novel_split(ctx.source->classnames);
    train_split = filter_to_classes(ctx.source->train, base_set.names);
    classes = base_set;
  }
  auto episode = sample_few_shot(train_split, spec.shots, static_cast<std::uint64_t>(seed));
  std::vector<LabeledItem> items;
  items.reserve(episode.items.size());
  for (const auto& s : episode.items)
    items.push_back(LabeledItem{ctx.source->make_item(s), s.label});
  auto gamma0 = make_prompt_params(cfg.method, *ctx.student, prompt_options,
                                   static_cast<std::uint64_t>(seed));
  return train_prompts(*ctx.student, teacher, items, classes, ctx.vocab, cfg, std::move(gamma0));
}

/// Stage 2 of a seed run: evaluates a trained gamma per the scenario kind.
inline SeedRunResult evaluate_scenario_seed(const ScenarioSpec& spec, const ScenarioContext& ctx,
                                            const TrainRunConfig& base_cfg,
                                            PromptParameters gamma, int seed) {
  TrainRunConfig cfg = base_cfg;
  const std::string method = method_display_name(cfg.method, cfg.variant);
  const std::string backbone = ctx.student->backbone_id;
  const std::string seed_str = std::to_string(seed);
  SeedRunResult out;

  if (spec.kind == ScenarioKind::base_to_novel) {
    auto [base_set, novel_set] = base_novel_split(ctx.source->classnames);
    auto base_test = filter_to_classes(ctx.source->test, base_set.names);
    auto novel_test = filter_to_classes(ctx.source->test, novel_set.names);
    double base_acc = evaluate_accuracy(*ctx.student, &gamma, *ctx.source, base_test, base_set,
                                        cfg.distill.tau_student, cfg.student_template);
    double novel_acc = evaluate_accuracy(*ctx.student, &gamma, *ctx.source, novel_test, novel_set,
                                         cfg.distill.tau_student, cfg.student_template);
    out.rows.push_back({scenario_name(spec.kind), method, backbone, ctx.source->name, seed_str,
                        "base", base_acc});
    out.rows.push_back({scenario_name(spec.kind), method, backbone, ctx.source->name, seed_str,
                        "new", novel_acc});
    out.gamma = std::move(gamma);
    return out;
  }

  ClassSet source_classes = ctx.source->class_set();
  double source_acc = evaluate_accuracy(*ctx.student, &gamma, *ctx.source, ctx.source->test,
                                        source_classes, cfg.distill.tau_student,
                                        cfg.student_template);
  out.rows.push_back({scenario_name(spec.kind), method, backbone, ctx.source->name, seed_str,
                      "test", source_acc});
  for (const auto& name : spec.targets) {
    auto it = ctx.target_bundles.find(name);
    if (it == ctx.target_bundles.end() || !it->second) {
      out.gaps.push_back(name);
      continue;
    }
    const DatasetBundle& tgt = *it->second;
    double acc = evaluate_accuracy(*ctx.student, &gamma, tgt, tgt.test, tgt.class_set(),
                                   cfg.distill.tau_student, cfg.student_template);
    out.rows.push_back({scenario_name(spec.kind), method, backbone, name, seed_str, "test", acc});
  }
  out.gamma = std::move(gamma);
  return out;
}

/// Trains on the source for one seed and evaluates per the scenario kind.
inline SeedRunResult run_scenario_seed(const ScenarioSpec& spec, const ScenarioContext& ctx,
                                       const TrainRunConfig& base_cfg,
                                       const PromptOptions& prompt_options, int seed) {
  auto trained = train_scenario_seed(spec, ctx, base_cfg, prompt_options, seed);
  auto out = evaluate_scenario_seed(spec, ctx, base_cfg, std::move(trained.gamma), seed);
  out.epoch_stats = std::move(trained.epoch_stats);
  return out;
}

/// Multi-seed scenario run: per-seed rows plus per-dataset seed averages.
struct ScenarioRunResult {
  MetricsTable table;
  std::vector<std::string> gaps;
  std::map<int, PromptParameters> gamma_per_seed;
  std::map<int, std::vector<EpochStats>> stats_per_seed;
};

inline ScenarioRunResult run_scenario(const ScenarioSpec& spec, const ScenarioContext& ctx,
                                      const TrainRunConfig& base_cfg,
                                      const PromptOptions& prompt_options) {
  ScenarioRunResult out;
  for (int seed : spec.seeds) {
    auto seed_result = run_scenario_seed(spec, ctx, base_cfg, prompt_options, seed);
    for (auto& r : seed_result.rows) out.table.add(std::move(r));
    for (auto& g : seed_result.gaps) out.gaps.push_back(std::move(g));
    out.gamma_per_seed.emplace(seed, std::move(seed_result.gamma));
    out.stats_per_seed.emplace(seed, std::move(seed_result.epoch_stats));
  }
  const std::string method = method_display_name(base_cfg.method, base_cfg.variant);
  const std::string backbone = ctx.student->backbone_id;
  std::vector<std::pair<std::string, std::string>> keys;  // (dataset, split)
  for (const auto& r : out.table.rows) {
    std::pair<std::string, std::string> k{r.dataset, r.split};
    bool seen = false;
    for (const auto& e : keys) seen = seen || e == k;
    if (!seen) keys.push_back(k);
  }
  for (const auto& [ds, split] : keys)
    out.table.add_seed_average(scenario_name(spec.kind), method, backbone, ds, split);
  return out;
}

}  // namespace kdpl
