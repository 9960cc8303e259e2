// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "kdpl/plot.hpp"
#include "kdpl/scenario.hpp"
#include "kdpl/synthetic.hpp"
#include "kdpl/teacher_cache.hpp"

namespace kdpl {

inline constexpr const char* kVersionStamp = "kdpl 0.1.0";

struct ExperimentConfig {
  PromptMethod method = PromptMethod::coop;
  TrainVariant variant = TrainVariant::kdpl;
  std::string dataset = "synthetic";  // "synthetic" or a split-file path
  std::vector<std::string> targets;   // split-file paths (real data)
  ScenarioKind scenario = ScenarioKind::cross_dataset;
  int shots = 16;
  std::vector<int> seeds = {1, 2, 3};
  TrainRunConfig train;
  PromptOptions prompt;
  SyntheticVLConfig synthetic;
  int synthetic_targets = 2;
  double target_noise_boost = 3.0;
  std::string vocab_path;
  std::string student_backbone = "auto";
  std::string teacher_backbone = "auto";
  std::string teacher_template = "a photo of {}";
  std::string output_dir = "kdpl_out";
  std::string cache_dir;
  bool include_zero_shot = true;

  Json to_json() const {
    Json j;
    j["method"] = method_name(method);
    j["variant"] = variant_name(variant);
    j["dataset"] = dataset;
    j["targets"] = targets;
    j["scenario"] = scenario_name(scenario);
    j["shots"] = shots;
    j["seeds"] = seeds;
    Json t;
    t["epochs"] = train.epochs;
    t["batch_size"] = train.batch_size;
    t["learning_rate"] = train.learning_rate;
    t["warmup_lr"] = train.warmup_lr;
    t["warmup_epochs"] = train.warmup_epochs;
    t["kl_mode"] = kl_mode_name(train.distill.kl_mode);
    t["tau_student"] = train.distill.tau_student;
    t["tau_teacher"] = train.distill.tau_teacher;
    t["eps_floor"] = train.distill.eps_floor;
    t["top_k"] = train.top_k;
    t["src_text_weight"] = train.src_weights.text;
    t["src_image_weight"] = train.src_weights.image;
    t["src_kl_weight"] = train.src_weights.kl;
    t["src_gaussian_mean"] = train.src_gaussian_mean;
    t["src_gaussian_sigma"] = train.src_gaussian_sigma;
    t["student_template"] = train.student_template;
    j["train"] = std::move(t);
    Json p;
    p["text_tokens"] = prompt.text_tokens;
    p["visual_tokens"] = prompt.visual_tokens;
    p["vision_depth"] = prompt.vision_depth;
    p["prompt_depth"] = prompt.prompt_depth;
    p["init_text"] = prompt.init_text;
    p["init_scale"] = prompt.init_scale;
    j["prompt"] = std::move(p);
    Json s;
    s["num_classes"] = synthetic.num_classes;
    s["samples_per_class"] = synthetic.samples_per_class;
    s["val_per_class"] = synthetic.val_per_class;
    s["test_per_class"] = synthetic.test_per_class;
    s["embedding_dim"] = synthetic.embedding_dim;
    s["prototype_margin"] = synthetic.prototype_margin;
    s["noise_scale"] = synthetic.noise_scale;
    s["teacher_accuracy_floor"] = synthetic.teacher_accuracy_floor;
    s["teacher_spillover"] = synthetic.teacher_spillover;
    s["student_image_rank_fraction"] = synthetic.student_image_rank_fraction;
    s["student_confusion_fraction"] = synthetic.student_confusion_fraction;
    s["student_confusion_strength"] = synthetic.student_confusion_strength;
    s["distractor_names"] = synthetic.distractor_names;
    s["seed"] = synthetic.seed;
    s["student_layers"] = synthetic.student_layers;
    s["student_branch"] = synthetic.student_branch == ImageBranch::vit ? "vit" : "feature";
    s["student_patches"] = synthetic.student_patches;
    j["synthetic"] = std::move(s);
    j["synthetic_targets"] = synthetic_targets;
    j["target_noise_boost"] = target_noise_boost;
    j["vocab_path"] = vocab_path;
    j["student_backbone"] = student_backbone;
    j["teacher_backbone"] = teacher_backbone;
    j["teacher_template"] = teacher_template;
    j["output_dir"] = output_dir;
    j["cache_dir"] = cache_dir;
    j["include_zero_shot"] = include_zero_shot;
    return j;
  }
};

namespace detail {

struct ConfigEntry {
  std::string scope;  // "" for global
  std::string key;
  std::string value;
};

inline std::vector<ConfigEntry> parse_config_text(const std::string& text) {
  std::vector<ConfigEntry> entries;
  std::istringstream in(text);
  std::string line, scope;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto trim = [](std::string s) {
      auto b = s.find_first_not_of(" \t\r");
      auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError("config line " + std::to_string(lineno) + ": bad section");
      scope = trim(line.substr(1, line.size() - 2));
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError("config line " + std::to_string(lineno) + ": expected key = value");
    entries.push_back({scope, trim(line.substr(0, eq)), trim(line.substr(eq + 1))});
  }
  return entries;
}

inline std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::istringstream in(s);
  std::string tok;
  while (std::getline(in, tok, ',')) {
    if (tok.empty()) continue;
    out.push_back(std::stoi(tok));
  }
  return out;
}

inline std::vector<std::string> parse_string_list(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string tok;
  while (std::getline(in, tok, ',')) {
    auto b = tok.find_first_not_of(" \t");
    auto e = tok.find_last_not_of(" \t");
    if (b == std::string::npos) continue;
    out.push_back(tok.substr(b, e - b + 1));
  }
  return out;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("not a boolean: " + s);
}

/// Supp-style per-method defaults (batch, lr, epochs, token counts).
inline void apply_method_defaults(ExperimentConfig& cfg) {
  switch (cfg.method) {
    case PromptMethod::coop:
      cfg.train.batch_size = 32;
      cfg.train.learning_rate = 0.02;
      cfg.train.epochs = 50;
      cfg.prompt.text_tokens = 4;
      break;
    case PromptMethod::cocoop:
      cfg.train.batch_size = 1;
      cfg.train.learning_rate = 0.02;
      cfg.train.epochs = 10;
      cfg.prompt.text_tokens = 4;
      break;
    case PromptMethod::vpt_shallow:
    case PromptMethod::vpt_deep:
      cfg.train.batch_size = 4;
      cfg.train.learning_rate = 0.0025;
      cfg.train.epochs = 5;
      cfg.prompt.text_tokens = 4;
      cfg.prompt.visual_tokens = 8;
      cfg.prompt.vision_depth = 12;
      break;
    case PromptMethod::maple:
      cfg.train.batch_size = 4;
      cfg.train.learning_rate = 0.0035;
      cfg.train.epochs = 5;
      cfg.prompt.text_tokens = 2;
      cfg.prompt.prompt_depth = 9;
      break;
    case PromptMethod::promptsrc:
      cfg.train.batch_size = 4;
      cfg.train.learning_rate = 0.0025;
      cfg.train.epochs = 20;
      cfg.prompt.text_tokens = 4;
      cfg.prompt.visual_tokens = 4;
      cfg.prompt.prompt_depth = 9;
      break;
  }
}

inline void apply_entry(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "method") cfg.method = method_from_name(value);
  else if (key == "variant") cfg.variant = variant_from_name(value);
  else if (key == "dataset") cfg.dataset = value;
  else if (key == "targets") cfg.targets = parse_string_list(value);
  else if (key == "scenario") cfg.scenario = scenario_from_name(value);
  else if (key == "shots") cfg.shots = std::stoi(value);
  else if (key == "seeds") cfg.seeds = parse_int_list(value);
  else if (key == "epochs") cfg.train.epochs = std::stoi(value);
  else if (key == "batch_size") cfg.train.batch_size = std::stoi(value);
  else if (key == "learning_rate" || key == "lr") cfg.train.learning_rate = std::stod(value);
  else if (key == "warmup_lr") cfg.train.warmup_lr = std::stod(value);
  else if (key == "warmup_epochs") cfg.train.warmup_epochs = std::stoi(value);
  else if (key == "kl_mode") cfg.train.distill.kl_mode = kl_mode_from_name(value);
  else if (key == "tau" || key == "tau_student") cfg.train.distill.tau_student = std::stod(value);
  else if (key == "tau_teacher") cfg.train.distill.tau_teacher = std::stod(value);
  else if (key == "eps_floor") cfg.train.distill.eps_floor = std::stod(value);
  else if (key == "k" || key == "top_k") cfg.train.top_k = std::stoi(value);
  else if (key == "text_tokens") cfg.prompt.text_tokens = std::stoi(value);
  else if (key == "visual_tokens") cfg.prompt.visual_tokens = std::stoi(value);
  else if (key == "vision_depth") cfg.prompt.vision_depth = std::stoi(value);
  else if (key == "prompt_depth") cfg.prompt.prompt_depth = std::stoi(value);
  else if (key == "init_text") cfg.prompt.init_text = value;
  else if (key == "init_scale") cfg.prompt.init_scale = std::stod(value);
  else if (key == "src_text_weight") cfg.train.src_weights.text = std::stod(value);
  else if (key == "src_image_weight") cfg.train.src_weights.image = std::stod(value);
  else if (key == "src_kl_weight") cfg.train.src_weights.kl = std::stod(value);
  else if (key == "src_gaussian_mean") cfg.train.src_gaussian_mean = std::stod(value);
  else if (key == "src_gaussian_sigma") cfg.train.src_gaussian_sigma = std::stod(value);
  else if (key == "student_template") cfg.train.student_template = value;
  else if (key == "teacher_template") cfg.teacher_template = value;
  else if (key == "vocab") cfg.vocab_path = value;
  else if (key == "output_dir") cfg.output_dir = value;
  else if (key == "cache_dir") cfg.cache_dir = value;
  else if (key == "student_backbone") cfg.student_backbone = value;
  else if (key == "teacher_backbone") cfg.teacher_backbone = value;
  else if (key == "include_zero_shot") cfg.include_zero_shot = parse_bool(value);
  else if (key == "synthetic_targets") cfg.synthetic_targets = std::stoi(value);
  else if (key == "target_noise_boost") cfg.target_noise_boost = std::stod(value);
  else if (key == "synthetic.num_classes") cfg.synthetic.num_classes = std::stoi(value);
  else if (key == "synthetic.samples_per_class") cfg.synthetic.samples_per_class = std::stoi(value);
  else if (key == "synthetic.val_per_class") cfg.synthetic.val_per_class = std::stoi(value);
  else if (key == "synthetic.test_per_class") cfg.synthetic.test_per_class = std::stoi(value);
  else if (key == "synthetic.dim") cfg.synthetic.embedding_dim = std::stoi(value);
  else if (key == "synthetic.margin") cfg.synthetic.prototype_margin = std::stod(value);
  else if (key == "synthetic.noise") cfg.synthetic.noise_scale = std::stod(value);
  else if (key == "synthetic.floor") cfg.synthetic.teacher_accuracy_floor = std::stod(value);
  else if (key == "synthetic.spillover") cfg.synthetic.teacher_spillover = std::stod(value);
  else if (key == "synthetic.rank_fraction") cfg.synthetic.student_image_rank_fraction = std::stod(value);
  else if (key == "synthetic.confusion_fraction") cfg.synthetic.student_confusion_fraction = std::stod(value);
  else if (key == "synthetic.confusion_strength") cfg.synthetic.student_confusion_strength = std::stod(value);
  else if (key == "synthetic.distractors") cfg.synthetic.distractor_names = std::stoi(value);
  else if (key == "synthetic.seed") cfg.synthetic.seed = std::stoull(value);
  else if (key == "synthetic.student_layers") cfg.synthetic.student_layers = std::stoi(value);
  else if (key == "synthetic.student_patches") cfg.synthetic.student_patches = std::stoi(value);
  else throw ConfigError("unknown config key: " + key);
}

}  // namespace detail

/// Every invalid combination detectable from the config alone fails here,
/// before any model is built.
inline void validate_experiment_config(const ExperimentConfig& cfg) {
  cfg.train.validate();
  if (cfg.shots < 1) throw ConfigError("shots must be >= 1");
  if (cfg.seeds.empty()) throw ConfigError("at least one seed required");
  if (cfg.train.top_k < 1) throw ConfigError("K must be >= 1");
  const bool is_synthetic = cfg.dataset == "synthetic";
  if ((cfg.variant == TrainVariant::ca_kdpl || cfg.variant == TrainVariant::pomp_star) &&
      !is_synthetic && cfg.vocab_path.empty())
    throw ConfigError(variant_name(cfg.variant) + " requires a vocabulary path");
  if (method_uses_visual_prompts(cfg.method)) {
    if (cfg.student_backbone == "toy_feature")
      throw ConfigError(method_name(cfg.method) + " needs a ViT student (got toy_feature)");
    if (is_synthetic && cfg.student_backbone == "auto" &&
        cfg.synthetic.student_branch == ImageBranch::feature) {
      // resolved later to a ViT student; nothing to reject
    }
  }
  if (cfg.scenario == ScenarioKind::class_agnostic && cfg.variant != TrainVariant::ca_kdpl &&
      cfg.variant != TrainVariant::pomp_star)
    throw ConfigError("class_agnostic scenario needs the ca_kdpl or pomp_star variant");
}

/// Resolves an experiment config from an optional file plus key=value
/// overrides. Per-method defaults are applied after the method is known and
/// before explicit keys. Unknown keys are rejected.
inline ExperimentConfig parse_config(const std::string& config_path,
                                     const std::vector<std::string>& overrides) {
  std::vector<detail::ConfigEntry> entries;
  if (!config_path.empty()) {
    Json maybe_manifest;
    std::ifstream probe(config_path);
    if (!probe) throw DataError("cannot open config: " + config_path);
    std::stringstream ss;
    ss << probe.rdbuf();
    entries = detail::parse_config_text(ss.str());
  }
  std::vector<detail::ConfigEntry> override_entries;
  for (const auto& ov : overrides) {
    auto eq = ov.find('=');
    if (eq == std::string::npos) throw ConfigError("override must be key=value: " + ov);
    override_entries.push_back({"", ov.substr(0, eq), ov.substr(eq + 1)});
  }

  // pass 1: find method/variant so scoped sections and defaults resolve
  ExperimentConfig cfg;
  for (const auto& e : entries)
    if (e.scope.empty() && e.key == "method") cfg.method = method_from_name(e.value);
  for (const auto& e : override_entries)
    if (e.key == "method") cfg.method = method_from_name(e.value);
  detail::apply_method_defaults(cfg);

  const std::set<std::string> known_scopes = {"coop",     "cocoop", "vpt_shallow",
                                              "vpt_deep", "maple",  "promptsrc"};
  for (const auto& e : entries) {
    if (!e.scope.empty() && !known_scopes.count(e.scope))
      throw ConfigError("unknown config section: [" + e.scope + "]");
    if (e.scope.empty()) detail::apply_entry(cfg, e.key, e.value);
  }
  for (const auto& e : entries)
    if (e.scope == method_name(cfg.method)) detail::apply_entry(cfg, e.key, e.value);
  for (const auto& e : override_entries) detail::apply_entry(cfg, e.key, e.value);

  cfg.train.method = cfg.method;
  cfg.train.variant = cfg.variant;
  // visual-prompt methods on synthetic data get a ViT student automatically
  if (cfg.dataset == "synthetic" && method_uses_visual_prompts(cfg.method) &&
      cfg.student_backbone == "auto")
    cfg.synthetic.student_branch = ImageBranch::vit;
  validate_experiment_config(cfg);
  return cfg;
}

/// Rebuilds the exact config from a run manifest.
inline ExperimentConfig config_from_manifest(const Json& manifest) {
  if (manifest.value("format", "") != "kdpl.manifest.v1") throw ParseError("not a kdpl manifest");
  const Json& j = manifest.at("config");
  ExperimentConfig cfg;
  cfg.method = method_from_name(j.at("method").get<std::string>());
  detail::apply_method_defaults(cfg);
  cfg.variant = variant_from_name(j.at("variant").get<std::string>());
  cfg.dataset = j.at("dataset").get<std::string>();
  cfg.targets = j.at("targets").get<std::vector<std::string>>();
  cfg.scenario = scenario_from_name(j.at("scenario").get<std::string>());
  cfg.shots = j.at("shots").get<int>();
  cfg.seeds = j.at("seeds").get<std::vector<int>>();
  const Json& t = j.at("train");
  cfg.train.epochs = t.at("epochs").get<int>();
  cfg.train.batch_size = t.at("batch_size").get<int>();
  cfg.train.learning_rate = t.at("learning_rate").get<double>();
  cfg.train.warmup_lr = t.at("warmup_lr").get<double>();
  cfg.train.warmup_epochs = t.at("warmup_epochs").get<int>();
  cfg.train.distill.kl_mode = kl_mode_from_name(t.at("kl_mode").get<std::string>());
  cfg.train.distill.tau_student = t.at("tau_student").get<double>();
  cfg.train.distill.tau_teacher = t.at("tau_teacher").get<double>();
  cfg.train.distill.eps_floor = t.at("eps_floor").get<double>();
  cfg.train.top_k = t.at("top_k").get<int>();
  cfg.train.src_weights.text = t.at("src_text_weight").get<double>();
  cfg.train.src_weights.image = t.at("src_image_weight").get<double>();
  cfg.train.src_weights.kl = t.at("src_kl_weight").get<double>();
  cfg.train.src_gaussian_mean = t.at("src_gaussian_mean").get<double>();
  cfg.train.src_gaussian_sigma = t.at("src_gaussian_sigma").get<double>();
  cfg.train.student_template = t.at("student_template").get<std::string>();
  const Json& p = j.at("prompt");
  cfg.prompt.text_tokens = p.at("text_tokens").get<int>();
  cfg.prompt.visual_tokens = p.at("visual_tokens").get<int>();
  cfg.prompt.vision_depth = p.at("vision_depth").get<int>();
  cfg.prompt.prompt_depth = p.at("prompt_depth").get<int>();
  cfg.prompt.init_text = p.at("init_text").get<std::string>();
  cfg.prompt.init_scale = p.at("init_scale").get<double>();
  const Json& s = j.at("synthetic");
  cfg.synthetic.num_classes = s.at("num_classes").get<int>();
  cfg.synthetic.samples_per_class = s.at("samples_per_class").get<int>();
  cfg.synthetic.val_per_class = s.at("val_per_class").get<int>();
  cfg.synthetic.test_per_class = s.at("test_per_class").get<int>();
  cfg.synthetic.embedding_dim = s.at("embedding_dim").get<int>();
  cfg.synthetic.prototype_margin = s.at("prototype_margin").get<double>();
  cfg.synthetic.noise_scale = s.at("noise_scale").get<double>();
  cfg.synthetic.teacher_accuracy_floor = s.at("teacher_accuracy_floor").get<double>();
  cfg.synthetic.teacher_spillover = s.at("teacher_spillover").get<double>();
  cfg.synthetic.student_image_rank_fraction = s.at("student_image_rank_fraction").get<double>();
  cfg.synthetic.student_confusion_fraction = s.at("student_confusion_fraction").get<double>();
  cfg.synthetic.student_confusion_strength = s.at("student_confusion_strength").get<double>();
  cfg.synthetic.distractor_names = s.at("distractor_names").get<int>();
  cfg.synthetic.seed = s.at("seed").get<std::uint64_t>();
  cfg.synthetic.student_layers = s.at("student_layers").get<int>();
  cfg.synthetic.student_branch =
      s.at("student_branch").get<std::string>() == "vit" ? ImageBranch::vit : ImageBranch::feature;
  cfg.synthetic.student_patches = s.at("student_patches").get<int>();
  cfg.synthetic_targets = j.at("synthetic_targets").get<int>();
  cfg.target_noise_boost = j.at("target_noise_boost").get<double>();
  cfg.vocab_path = j.at("vocab_path").get<std::string>();
  cfg.student_backbone = j.at("student_backbone").get<std::string>();
  cfg.teacher_backbone = j.at("teacher_backbone").get<std::string>();
  cfg.teacher_template = j.at("teacher_template").get<std::string>();
  cfg.output_dir = j.at("output_dir").get<std::string>();
  cfg.cache_dir = j.at("cache_dir").get<std::string>();
  cfg.include_zero_shot = j.at("include_zero_shot").get<bool>();
  cfg.train.method = cfg.method;
  cfg.train.variant = cfg.variant;
  validate_experiment_config(cfg);
  return cfg;
}

struct ExperimentResult {
  MetricsTable table;
  Json manifest;
  std::string results_path;
  std::string summary_path;
  std::string plot_path;
  std::vector<std::string> gaps;
  bool all_seeds_completed = false;
};

namespace detail {

struct MaterializedWorld {
  DatasetBundle source;
  std::vector<DatasetBundle> target_storage;
  DualEncoderModel teacher;
  DualEncoderModel student;
  std::optional<ClassVocabulary> vocab;
  std::vector<std::string> target_names;
};

inline MaterializedWorld materialize(const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  MaterializedWorld w;
  const char* data_root_env = std::getenv("KDPL_DATA_ROOT");
  auto resolve = [&](const std::string& p) {
    if (p == "synthetic" || p.empty() || fs::path(p).is_absolute() || !data_root_env) return p;
    return (fs::path(data_root_env) / p).string();
  };

  if (cfg.dataset == "synthetic") {
    SyntheticVLConfig scfg = cfg.synthetic;
    auto gen = generate_synthetic(scfg);
    w.source = std::move(gen.data);
    w.teacher = std::move(gen.teacher);
    w.student = std::move(gen.student);
    w.vocab = std::move(gen.vocab);
    SyntheticDataset shell;  // prototype access for shifted variants
    shell.prototypes = std::move(gen.prototypes);
    shell.data.classnames = w.source.classnames;
    for (int i = 1; i <= cfg.synthetic_targets; ++i) {
      std::string name = "shift" + std::to_string(i);
      w.target_storage.push_back(make_shifted_variant(
          shell, cfg.synthetic.noise_scale * cfg.target_noise_boost, cfg.synthetic.test_per_class,
          derive_seed(cfg.synthetic.seed, 0x7a9, static_cast<std::uint64_t>(i)), name));
      w.target_names.push_back(name);
    }
  } else {
    w.source = load_split_file(resolve(cfg.dataset));
    for (const auto& t : cfg.targets) {
      w.target_storage.push_back(load_split_file(resolve(t)));
      w.target_names.push_back(w.target_storage.back().name);
    }
    auto build_toy = [&](const std::string& id, Role role, std::uint64_t seed) {
      EncoderConfig ec;
      ec.image_branch = id == "toy_vit" ? ImageBranch::vit : ImageBranch::feature;
      return DualEncoderModel::make(ec, role, seed, id);
    };
    if (cfg.teacher_backbone == "auto" || cfg.teacher_backbone == "toy_feature" ||
        cfg.teacher_backbone == "toy_vit")
      w.teacher = build_toy(cfg.teacher_backbone == "auto" ? "toy_feature" : cfg.teacher_backbone,
                            Role::teacher, 11);
    else
      w.teacher = DualEncoderModel::load(resolve(cfg.teacher_backbone));
    if (cfg.student_backbone == "auto" || cfg.student_backbone == "toy_feature" ||
        cfg.student_backbone == "toy_vit") {
      std::string id = cfg.student_backbone;
      if (id == "auto") id = method_uses_visual_prompts(cfg.method) ? "toy_vit" : "toy_feature";
      w.student = build_toy(id, Role::student, 13);
    } else {
      w.student = DualEncoderModel::load(resolve(cfg.student_backbone));
    }
    if (!cfg.vocab_path.empty()) w.vocab = ClassVocabulary::load(resolve(cfg.vocab_path));
  }
  if (method_uses_visual_prompts(cfg.method) && !w.student.is_vit())
    throw ConfigError(method_name(cfg.method) + " needs a ViT student");
  return w;
}

}  // namespace detail

/// Config-driven end-to-end run: trains per seed (resuming from completed
/// (seed, stage) artifacts), evaluates the scenario, and writes the results
/// table, summary, plot, prompt checkpoints, teacher cache, manifest, and a
/// run report.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  using Clock = std::chrono::steady_clock;
  validate_experiment_config(cfg);
  fs::create_directories(cfg.output_dir);
  std::string cache_dir = cfg.cache_dir;
  if (cache_dir.empty()) {
    const char* env = std::getenv("KDPL_CACHE_ROOT");
    cache_dir = env ? std::string(env) : (fs::path(cfg.output_dir) / "cache").string();
  }
  fs::create_directories(cache_dir);

  // manifest: written before training, immutable afterwards
  Json manifest;
  manifest["format"] = "kdpl.manifest.v1";
  manifest["version"] = kVersionStamp;
  manifest["config"] = cfg.to_json();
  std::string manifest_path = (fs::path(cfg.output_dir) / "manifest.json").string();
  if (fs::exists(manifest_path)) {
    Json existing = read_json_file(manifest_path);
    if (existing != manifest)
      throw ConfigError("output dir already holds a different run: " + manifest_path);
  } else {
    write_json_file(manifest_path, manifest);
  }

  Json report;
  auto t_start = Clock::now();
  auto elapsed_ms = [&](Clock::time_point from) {
    return std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - from).count();
  };

  auto world = detail::materialize(cfg);
  report["materialize_ms"] = elapsed_ms(t_start);

  if (cfg.dataset == "synthetic") {
    fs::create_directories(fs::path(cfg.output_dir) / "data");
    save_split_file(world.source, (fs::path(cfg.output_dir) / "data" / "source.json").string());
    world.teacher.save((fs::path(cfg.output_dir) / "data" / "teacher_model.json").string());
    world.student.save((fs::path(cfg.output_dir) / "data" / "student_model.json").string());
    if (world.vocab) world.vocab->save((fs::path(cfg.output_dir) / "data" / "vocab.txt").string());
  }

  TeacherPredictionCache cache;
  std::string cache_path = (fs::path(cache_dir) / "teacher_cache.bin").string();
  if (fs::exists(cache_path)) {
    try {
      cache = TeacherPredictionCache::load(cache_path);
    } catch (const CacheError& e) {
      std::fprintf(stderr, "[kdpl] %s; rebuilding cache\n", e.what());
    }
  }

  ScenarioSpec spec;
  spec.kind = cfg.scenario;
  spec.source_dataset = world.source.name;
  spec.targets = world.target_names;
  spec.shots = cfg.shots;
  spec.seeds = cfg.seeds;

  ScenarioContext ctx;
  ctx.student = &world.student;
  ctx.teacher = &world.teacher;
  ctx.cache = &cache;
  ctx.source = &world.source;
  for (std::size_t i = 0; i < world.target_names.size(); ++i)
    ctx.target_bundles[world.target_names[i]] = &world.target_storage[i];
  ctx.vocab = world.vocab ? &*world.vocab : nullptr;
  ctx.teacher_template = cfg.teacher_template;

  ExperimentResult result;
  result.manifest = manifest;
  Json seed_timings = Json::object();
  int completed = 0;
  for (int seed : cfg.seeds) {
    auto t_seed = Clock::now();
    std::string gamma_path =
        (fs::path(cfg.output_dir) / ("prompt_seed" + std::to_string(seed) + ".json")).string();
    std::string rows_path =
        (fs::path(cfg.output_dir) / ("rows_seed" + std::to_string(seed) + ".tsv")).string();
    if (fs::exists(rows_path) && fs::exists(gamma_path)) {
      for (auto& r : MetricsTable::load(rows_path).rows) result.table.add(std::move(r));
      ++completed;
      seed_timings[std::to_string(seed)] = "resumed";
      continue;
    }
    PromptParameters gamma;
    if (fs::exists(gamma_path)) {
      gamma = PromptParameters::load(gamma_path);
    } else {
      auto trained = train_scenario_seed(spec, ctx, cfg.train, cfg.prompt, seed);
      gamma = std::move(trained.gamma);
      gamma.save(gamma_path);
    }
    auto seed_result = evaluate_scenario_seed(spec, ctx, cfg.train, std::move(gamma), seed);
    MetricsTable seed_table;
    for (const auto& r : seed_result.rows) seed_table.add(r);
    seed_table.save(rows_path);
    for (auto& r : seed_result.rows) result.table.add(std::move(r));
    for (auto& g : seed_result.gaps) result.gaps.push_back(std::move(g));
    ++completed;
    seed_timings[std::to_string(seed)] = elapsed_ms(t_seed);
  }
  result.all_seeds_completed = completed == static_cast<int>(cfg.seeds.size());

  // per-dataset seed averages
  const std::string method = method_display_name(cfg.method, cfg.variant);
  std::vector<std::pair<std::string, std::string>> keys;
  for (const auto& r : result.table.rows) {
    std::pair<std::string, std::string> k{r.dataset, r.split};
    bool seen = false;
    for (const auto& e : keys) seen = seen || e == k;
    if (!seen) keys.push_back(k);
  }
  for (const auto& [ds, split] : keys)
    result.table.add_seed_average(scenario_name(cfg.scenario), method, world.student.backbone_id,
                                  ds, split);

  // zero-shot student baseline rows (deterministic; no training state)
  if (cfg.include_zero_shot) {
    auto add_zero_shot = [&](const DatasetBundle& b, const DatasetSplit& split,
                             const ClassSet& classes, const std::string& split_name) {
      double acc = evaluate_accuracy(world.student, nullptr, b, split, classes,
                                     cfg.train.distill.tau_student, cfg.train.student_template);
      result.table.add({scenario_name(cfg.scenario), "zero_shot", world.student.backbone_id,
                        b.name, "avg", split_name, acc});
    };
    if (cfg.scenario == ScenarioKind::base_to_novel) {
      auto [base_set, novel_set] = base_novel_split(world.source.classnames);
      add_zero_shot(world.source, filter_to_classes(world.source.test, base_set.names), base_set,
                    "base");
      add_zero_shot(world.source, filter_to_classes(world.source.test, novel_set.names), novel_set,
                    "new");
    } else {
      add_zero_shot(world.source, world.source.test, world.source.class_set(), "test");
      for (const auto& name : world.target_names) {
        const DatasetBundle& b = *ctx.target_bundles[name];
        add_zero_shot(b, b.test, b.class_set(), "test");
      }
    }
  }

  result.results_path = (fs::path(cfg.output_dir) / "results.tsv").string();
  result.table.save(result.results_path);
  cache.save(cache_path);

  // summary document shaped like the familiar tables
  result.summary_path = (fs::path(cfg.output_dir) / "summary.txt").string();
  {
    std::ofstream out(result.summary_path, std::ios::binary);
    out << "scenario: " << scenario_name(cfg.scenario) << "\nmethod: " << method
        << "\nbackbone: " << world.student.backbone_id << "\n\n";
    auto avg_of = [&](const std::string& m, const std::string& ds, const std::string& split,
                      double* out_val) {
      for (const auto& r : result.table.rows)
        if (r.method == m && r.dataset == ds && r.split == split && r.seed == "avg") {
          *out_val = r.accuracy;
          return true;
        }
      return false;
    };
    if (cfg.scenario == ScenarioKind::base_to_novel) {
      out << "              Base     New      H\n";
      double b = 0, n = 0;
      if (avg_of(method, world.source.name, "base", &b) &&
          avg_of(method, world.source.name, "new", &n))
        out << method << "  " << format2(b) << "  " << format2(n) << "  "
            << format2(harmonic_mean(b, n)) << "\n";
      if (cfg.include_zero_shot && avg_of("zero_shot", world.source.name, "base", &b) &&
          avg_of("zero_shot", world.source.name, "new", &n))
        out << "zero_shot  " << format2(b) << "  " << format2(n) << "  "
            << format2(harmonic_mean(b, n)) << "\n";
    } else {
      out << "method        Source";
      for (const auto& t : world.target_names) out << "  " << t;
      out << "  Average\n";
      for (const std::string& m : {method, std::string("zero_shot")}) {
        if (m == "zero_shot" && !cfg.include_zero_shot) continue;
        double v = 0;
        if (!avg_of(m, world.source.name, "test", &v)) continue;
        out << m << "  " << format2(v);
        std::vector<double> tgt;
        for (const auto& tname : world.target_names) {
          double tv = 0;
          if (avg_of(m, tname, "test", &tv)) {
            out << "  " << format2(tv);
            tgt.push_back(tv);
          } else {
            out << "  MISSING";
          }
        }
        out << "  " << (tgt.empty() ? "n/a" : format2(average_over_targets(tgt))) << "\n";
      }
      for (const auto& g : result.gaps) out << "skipped target (no data): " << g << "\n";
    }
  }

  // comparison plot: trained method vs the zero-shot baseline
  result.plot_path = (fs::path(cfg.output_dir) / "plot.svg").string();
  if (cfg.scenario != ScenarioKind::base_to_novel) {
    MetricsTable trained_rows, zs_rows;
    for (const auto& r : result.table.rows) {
      if (r.method == method) trained_rows.add(r);
      if (r.method == "zero_shot") zs_rows.add(r);
    }
    std::vector<PlotSeries> series;
    series.push_back(plot_series_from_table(trained_rows));
    if (cfg.include_zero_shot) {
      auto zs = plot_series_from_table(zs_rows);
      zs.method = "zero_shot";
      series.push_back(zs);
    }
    emit_comparison_plot(series, result.plot_path);
  }

  report["total_ms"] = elapsed_ms(t_start);
  report["seed_ms"] = std::move(seed_timings);
  report["cache_hits"] = cache.hits();
  report["cache_misses"] = cache.misses();
  report["cache_entries"] = cache.size();
  write_json_file((fs::path(cfg.output_dir) / "run_report.json").string(), report);
  return result;
}

}  // namespace kdpl
