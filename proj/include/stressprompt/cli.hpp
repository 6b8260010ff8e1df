#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "stressprompt/backends.hpp"
#include "stressprompt/config.hpp"
#include "stressprompt/dataset.hpp"
#include "stressprompt/eval_harness.hpp"
#include "stressprompt/fixture.hpp"
#include "stressprompt/rater_stats.hpp"
#include "stressprompt/reporting.hpp"
#include "stressprompt/run_ledger.hpp"
#include "stressprompt/scanner.hpp"

namespace stressprompt::cli {

enum ExitCode : int { kOk = 0, kValidationError = 1, kRuntimeError = 2 };

inline int exit_code_for(const Error& e) { return e.is_validation() ? kValidationError : kRuntimeError; }

/// Parsed command line. Fields mirror the flags; `cfg` is the merged
/// RunConfig (file values overridden by flags).
struct Invocation {
  RunConfig cfg;
  bool dry_run = false;
  unsigned jobs = 1;
  bool seed_given = false;
  std::string timestamp;
  std::string templates_dir;

  // subcommand-local
  std::string annotations;
  std::string orientation = "raters_x_levels";
  std::string format = "json";
  bool exclude_outliers = false;
  std::string bank;
  std::string vectors;
  std::string layer = "all";
  std::string method = "joint";
  std::string token = "last";
  std::string question;
  std::string prompt;
  std::size_t width = 0;
  std::string kind;
  std::string input;
  std::string task;
  std::string name;
  bool skip_failures = false;
};

namespace detail {

struct Env {
  Invocation inv;
  std::ostream& out;
  std::ostream& err;

  OutputLayout layout() const { return {inv.cfg.output}; }

  Clock clock() const {
    if (!inv.timestamp.empty()) return fixed_clock(inv.timestamp);
    if (const char* epoch = std::getenv("SOURCE_DATE_EPOCH"); epoch && *epoch) {
      try {
        return fixed_clock(iso8601_utc(static_cast<std::time_t>(std::stoll(epoch))));
      } catch (const std::exception&) {
        throw Error(ErrorKind::Config, "SOURCE_DATE_EPOCH is not an integer");
      }
    }
    return wall_clock();
  }

  TemplateLibrary templates() const {
    TemplateLibrary lib;
    if (!inv.templates_dir.empty()) lib.load_dir(inv.templates_dir);
    return lib;
  }

  void write(const std::filesystem::path& path, const std::string& text) const {
    if (inv.dry_run) {
      out << "dry-run: would write " << path.string() << "\n";
      return;
    }
    stressprompt::detail::write_text(path, text);
  }

  template <typename F>
  void render(const char* what, F&& f) const {
    if (inv.dry_run) {
      out << "dry-run: would render " << what << "\n";
      return;
    }
    const RenderedFiles files = f();
    out << files.data.string() << "\n";
    if (!files.image.empty()) out << files.image.string() << "\n";
  }
};

inline void require(bool ok, const std::string& message) {
  if (!ok) throw Error(ErrorKind::Config, message);
}

inline std::vector<StressPromptRecord> load_records(const Env& env, std::vector<std::string>* warnings = nullptr) {
  require(!env.inv.cfg.dataset.empty(), "--dataset is required");
  return load_dataset(env.inv.cfg.dataset, warnings);
}

/// Records with levels taken from the annotation matrix when one is given.
inline std::vector<StressPromptRecord> leveled_records(const Env& env) {
  std::vector<std::string> warnings;
  auto records = load_records(env, &warnings);
  for (const auto& w : warnings) env.err << "warning: " << w << "\n";
  if (env.inv.annotations.empty()) return records;
  auto m = load_annotations(env.inv.annotations);
  if (env.inv.exclude_outliers) m = exclude_outliers(m, detect_outliers(m));
  const auto levels = levels_from_matrix(m);
  for (auto& r : records) {
    auto it = levels.find(r.id);
    if (it == levels.end()) throw Error(ErrorKind::Validation, "prompt '" + r.id + "' is missing from the annotations");
    r.stress_level = it->second;
  }
  return records;
}

inline std::vector<std::size_t> selected_layers(const std::string& spec, std::size_t layers) {
  std::vector<std::size_t> out;
  if (spec == "all") {
    for (std::size_t l = 0; l < layers; ++l) out.push_back(l);
    return out;
  }
  std::size_t l = 0;
  try {
    l = std::stoul(spec);
  } catch (const std::exception&) {
    throw Error(ErrorKind::Config, "--layer must be 'all' or a layer index");
  }
  if (l >= layers) throw Error(ErrorKind::Validation, "layer " + spec + " out of range");
  out.push_back(l);
  return out;
}

// True when the selected-token states at `layer` are not all identical.
inline bool layer_varies(const CaptureBank& bank, std::size_t layer, const TokenSelector& token) {
  const auto& first = bank.first();
  const auto ref = first.state(layer, token.resolve(first.tokens()));
  for (const auto& [_, caps] : bank.levels) {
    for (const auto& c : caps) {
      const auto s = c.state(layer, token.resolve(c.tokens()));
      if (!std::equal(s.begin(), s.end(), ref.begin())) return true;
    }
  }
  return false;
}

inline json counts_json(const StressLevelPartition& part) {
  json c = json::object();
  for (int l = 1; l <= kNumLevels; ++l) c[std::to_string(l)] = part.count(l);
  return c;
}

// ---------------------------------------------------------------------------
// dataset

inline int dataset_validate(Env& env) {
  std::vector<std::string> warnings;
  const auto records = load_records(env, &warnings);
  json report{{"dataset", env.inv.cfg.dataset}, {"records", records.size()}};
  if (!env.inv.annotations.empty()) {
    const auto m = load_annotations(env.inv.annotations);
    for (const auto& r : records) {
      if (!m.prompt_index(r.id)) throw Error(ErrorKind::Validation, "prompt '" + r.id + "' is missing from the annotations");
    }
    if (m.n_prompts() != records.size()) {
      throw Error(ErrorKind::Validation, "annotation matrix has " + std::to_string(m.n_prompts()) +
                                             " prompts but the dataset has " + std::to_string(records.size()));
    }
    report["raters"] = m.n_raters();
  }
  report["level_counts"] = counts_json(partition_by_level(records));
  report["warnings"] = warnings;
  report["valid"] = true;
  env.out << report.dump(2) << "\n";
  return kOk;
}

inline int dataset_stats(Env& env) {
  require(!env.inv.annotations.empty(), "--annotations is required");
  const auto orientation = parse_orientation(env.inv.orientation);
  require(orientation.has_value(), "unknown Friedman orientation '" + env.inv.orientation + "'");
  auto m = load_annotations(env.inv.annotations);
  if (env.inv.exclude_outliers) m = exclude_outliers(m, detect_outliers(m));
  const auto report = reliability_report(m, *orientation, levels_from_matrix(m));
  if (env.inv.format == "table") {
    env.out << format_table(report);
  } else {
    require(env.inv.format == "json", "--format must be json or table");
    env.out << to_json(report).dump(2) << "\n";
  }
  return kOk;
}

inline int dataset_partition(Env& env) {
  const auto records = leveled_records(env);
  const auto part = partition_by_level(records);
  env.write(env.layout().root / "partition.json", to_json(part).dump(2) + "\n");
  env.render("distribution", [&] { return render_distribution(part, env.layout()); });
  env.out << json{{"total", part.total()}, {"level_counts", counts_json(part)}}.dump(2) << "\n";
  return kOk;
}

inline int dataset_synth(Env& env) {
  FixtureOptions opts;
  if (env.inv.seed_given) opts.seed = env.inv.cfg.seed;
  const auto fx = generate_fixture(opts);
  const auto root = env.layout().root;
  env.write(root / "stress_prompts.synthetic.jsonl", serialize_dataset(fx.records));
  env.write(root / "annotations.synthetic.csv", serialize_annotations(fx.annotations));
  env.write(root / "manifest.json", fx.manifest.dump(2) + "\n");
  if (!env.inv.dry_run) env.out << "wrote synthetic fixture to " << root.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// capture / fit / scan

inline int capture(Env& env) {
  const auto& cfg = env.inv.cfg;
  const auto records = leveled_records(env);
  const auto part = partition_by_level(records);
  auto adapter = make_adapter(cfg.model, env.templates());
  if (!adapter->capabilities().activations) {
    throw Error(ErrorKind::Capability, "backend '" + adapter->model_id() + "' does not export activations");
  }
  const std::filesystem::path dir =
      env.inv.bank.empty() ? env.layout().root / "runs" / config_hash(cfg) / "bank" : std::filesystem::path(env.inv.bank);
  if (env.inv.dry_run) {
    std::size_t n = 0;
    for (int l = 1; l <= kNumLevels; ++l) n += (cfg.levels.empty() || cfg.levels.count(l)) ? part.count(l) : 0;
    env.out << "dry-run: would capture " << n << " prompts with " << adapter->model_id() << " into " << dir.string()
            << "\n";
    return kOk;
  }
  auto bank = collect(*adapter, part, cfg.capture_mode, cfg.levels, env.inv.question, cfg.template_id);
  bank.provenance.dataset_hash = file_digest(cfg.dataset);
  save_bank(bank, dir);
  env.out << dir.string() << "\n";
  return kOk;
}

inline FitOptions fit_options(const Env& env) {
  FitOptions o;
  o.method = parse_fit_method(env.inv.method);
  o.token = TokenSelector::parse(env.inv.token);
  o.pca.seed = env.inv.cfg.seed;
  return o;
}

inline std::vector<StressVector> fit_layers(const Env& env, const CaptureBank& bank) {
  const bool all = env.inv.layer == "all";
  const auto layers = selected_layers(env.inv.layer, bank.layers());
  const auto opts = fit_options(env);
  // With --layer all, layers whose states do not vary (e.g. a shared final
  // token at the embedding layer) are skipped instead of failing the run.
  auto fit_one = [&](std::size_t layer) -> std::optional<StressVector> {
    try {
      return fit_stress_vector(bank, layer, opts);
    } catch (const Error& e) {
      if (!all || e.kind() != ErrorKind::Degenerate) throw;
      return std::nullopt;
    }
  };
  std::vector<std::optional<StressVector>> fitted(layers.size());
  const unsigned jobs = std::max(1u, env.inv.jobs);
  for (std::size_t start = 0; start < layers.size(); start += jobs) {
    const auto end = std::min(layers.size(), start + jobs);
    if (jobs == 1) {
      fitted[start] = fit_one(layers[start]);
      continue;
    }
    std::vector<std::future<std::optional<StressVector>>> futures;
    for (auto i = start; i < end; ++i) futures.push_back(std::async(std::launch::async, fit_one, layers[i]));
    for (auto i = start; i < end; ++i) fitted[i] = futures[i - start].get();
  }
  std::vector<StressVector> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (fitted[i]) {
      out.push_back(std::move(*fitted[i]));
    } else {
      env.err << "warning: layer " << layers[i] << " skipped: hidden states do not vary\n";
    }
  }
  if (out.empty()) throw Error(ErrorKind::Degenerate, "no layer has varying hidden states");
  return out;
}

inline std::filesystem::path default_vectors_path(const Env& env) {
  return env.inv.vectors.empty() ? env.layout().root / "vectors" / "stress_vectors.json"
                                  : std::filesystem::path(env.inv.vectors);
}

inline int fit(Env& env) {
  require(!env.inv.bank.empty(), "--bank is required");
  const auto bank = load_bank(env.inv.bank);
  const auto vectors = fit_layers(env, bank);
  json arr = json::array();
  for (const auto& v : vectors) arr.push_back(v.to_json());
  env.write(default_vectors_path(env), arr.dump(2) + "\n");
  json summary = json::array();
  for (const auto& v : vectors) {
    summary.push_back(json{{"layer", v.layer},
                           {"explained_variance_ratio", v.explained_variance_ratio},
                           {"orientation_sign", v.orientation_sign}});
  }
  env.out << summary.dump(2) << "\n";
  return kOk;
}

inline int scan(Env& env) {
  require(!env.inv.bank.empty(), "--bank is required");
  const auto bank = load_bank(env.inv.bank);
  std::vector<StressVector> vectors;
  if (!env.inv.vectors.empty()) {
    vectors = load_vectors(env.inv.vectors);
  } else {
    auto all = env.inv;
    all.layer = "all";
    vectors = fit_layers(Env{all, env.out, env.err}, bank);
  }
  const auto layers = selected_layers(env.inv.layer, bank.layers());
  const auto token = TokenSelector::parse(env.inv.token);

  std::vector<StressVector> chosen;
  for (auto l : layers) {
    const bool have = std::any_of(vectors.begin(), vectors.end(), [&](const auto& v) { return v.layer == l; });
    if (have) {
      chosen.push_back(stressprompt::detail::vector_for_layer(vectors, l));
    } else if (env.inv.layer != "all") {
      throw Error(ErrorKind::Validation, "no stress vector for layer " + std::to_string(l));
    }
  }
  const auto layout = env.layout();
  const auto levels = level_scan(bank, chosen, token);
  env.render("level scan", [&] { return render_scan(levels, layout, "level"); });
  for (const auto& v : chosen) {
    const auto m = prompt_token_scan(bank, v, env.inv.width);
    const auto name = "prompt_token_L" + std::to_string(v.layer);
    env.render(name.c_str(), [&] { return render_scan(m, layout, name); });
  }
  if (!env.inv.prompt.empty()) {
    const HiddenStateCapture* found = nullptr;
    for (const auto& [_, caps] : bank.levels) {
      for (const auto& c : caps) {
        if (c.prompt_id == env.inv.prompt) found = &c;
      }
    }
    if (!found) throw Error(ErrorKind::Validation, "prompt '" + env.inv.prompt + "' is not in the bank");
    const auto m = layer_token_scan(*found, vectors);
    const auto name = "layer_token_" + env.inv.prompt;
    env.render(name.c_str(), [&] { return render_scan(m, layout, name); });
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// sweep

inline int sweep(Env& env) {
  const auto& cfg = env.inv.cfg;
  require(!cfg.tasks.empty(), "--tasks is required");
  const auto records = leveled_records(env);
  const auto part = partition_by_level(records);
  std::vector<Task> tasks;
  for (const auto& t : cfg.tasks) tasks.push_back(load_task(t));
  const auto gen = cfg.generation();
  gen.validate();
  const auto templates = env.templates();
  templates.get(cfg.template_id);
  auto adapter = make_adapter(cfg.model, templates);
  if (!adapter->capabilities().generate) {
    throw Error(ErrorKind::Capability, "backend '" + adapter->model_id() + "' cannot generate");
  }
  const auto hash = config_hash(cfg);
  const auto layout = env.layout();
  const auto ledger_path = layout.ledger(hash);

  if (env.inv.dry_run) {
    std::size_t calls = 0;
    for (const auto& t : tasks) {
      std::size_t prompts = 2;
      for (int l = 1; l <= kNumLevels; ++l) prompts += (cfg.levels.empty() || cfg.levels.count(l)) ? part.count(l) : 0;
      calls += prompts * t.items.size();
    }
    env.out << json{{"config_hash", hash}, {"ledger", ledger_path.string()}, {"generations", calls}}.dump(2) << "\n";
    return kOk;
  }

  stressprompt::detail::write_text(ledger_path.parent_path() / "config.json", cfg.to_json().dump(2) + "\n");
  RunLedger ledger(ledger_path);
  for (const auto& w : ledger.warnings()) env.err << "warning: " << w << "\n";

  SweepOptions opts;
  opts.config_hash = hash;
  opts.template_id = cfg.template_id;
  opts.levels = cfg.levels;
  opts.skip_failures = env.inv.skip_failures;
  opts.jobs = env.inv.jobs;
  opts.clock = env.clock();
  opts.adapter_factory = [model = cfg.model, templates] { return make_adapter(model, templates); };
  const auto table = sweep(*adapter, tasks, part, gen, ledger, opts);

  env.render("performance table", [&] { return render_table(table, layout, "performance"); });
  for (const auto& t : table.tasks()) {
    env.out << t << ": argmax level " << table.argmax_level(t) << "\n";
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// report

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline PerformanceTable read_table(const std::filesystem::path& p) {
  try {
    return table_from_json(json::parse(read_file(p)));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::Parse, p.string() + ": " + e.what());
  }
}

inline int report(Env& env) {
  const auto layout = env.layout();
  const auto& kind = env.inv.kind;
  if (kind == "reliability") {
    require(!env.inv.annotations.empty(), "--annotations is required");
    const auto orientation = parse_orientation(env.inv.orientation);
    require(orientation.has_value(), "unknown Friedman orientation '" + env.inv.orientation + "'");
    auto m = load_annotations(env.inv.annotations);
    if (env.inv.exclude_outliers) m = exclude_outliers(m, detect_outliers(m));
    const auto rep = reliability_report(m, *orientation, levels_from_matrix(m));
    env.write(layout.tables() / "reliability.json", to_json(rep).dump(2) + "\n");
    env.write(layout.tables() / "reliability.txt", format_table(rep));
    env.out << format_table(rep);
    return kOk;
  }
  const auto k = parse_artifact_kind(kind);
  const bool needs_input = k != ArtifactKind::Distribution || env.inv.cfg.dataset.empty();
  if (needs_input) require(!env.inv.input.empty(), "--input is required for report --kind " + kind);
  const std::string name = env.inv.name.empty() ? kind : env.inv.name;

  switch (k) {
    case ArtifactKind::Table: {
      const auto t = read_table(env.inv.input);
      env.render("table", [&] { return render_table(t, layout, name); });
      break;
    }
    case ArtifactKind::Curve: {
      const auto t = read_table(env.inv.input);
      std::vector<std::string> tasks = env.inv.task.empty() ? t.tasks() : std::vector<std::string>{env.inv.task};
      for (const auto& task : tasks) {
        if (!t.find(task, "level_1") && std::none_of(t.rows.begin(), t.rows.end(), [&](const auto& r) { return r.task == task; })) {
          throw Error(ErrorKind::Validation, "task '" + task + "' is not in the table");
        }
        const auto n = name + "_" + task;
        env.render(n.c_str(), [&] { return render_curve(t, task, layout, n); });
      }
      break;
    }
    case ArtifactKind::Radar: {
      const auto t = read_table(env.inv.input);
      env.render("radar", [&] { return render_radar(t, layout, name); });
      break;
    }
    case ArtifactKind::Scan: {
      const auto m = scan_from_csv(read_file(env.inv.input));
      env.render("scan", [&] { return render_scan(m, layout, name); });
      break;
    }
    case ArtifactKind::Distribution: {
      auto e2 = env.inv;
      if (!env.inv.input.empty()) e2.cfg.dataset = env.inv.input;
      const auto part = partition_by_level(leveled_records(Env{e2, env.out, env.err}));
      env.render("distribution", [&] { return render_distribution(part, layout, name); });
      break;
    }
    case ArtifactKind::Scatter: {
      const auto bank = load_bank(env.inv.input);
      EmbedOptions eo;
      eo.method = parse_embed_method(env.inv.method == "joint" ? "pca" : env.inv.method);
      eo.seed = env.inv.cfg.seed;
      eo.token = TokenSelector::parse(env.inv.token);
      for (auto l : selected_layers(env.inv.layer, bank.layers())) {
        if (env.inv.layer == "all" && !layer_varies(bank, l, eo.token)) {
          env.err << "warning: layer " << l << " skipped: hidden states do not vary\n";
          continue;
        }
        const auto points = embed_2d(bank, l, eo);
        const auto n = name + "_L" + std::to_string(l);
        env.render(n.c_str(), [&] { return render_scatter(points, layout, n); });
      }
      break;
    }
  }
  return kOk;
}

}  // namespace detail

/// Runs one command line (without the program name). Output goes to `out`,
/// diagnostics to `err`. Returns the process exit code.
inline int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Stress-prompt evaluation and activation scanning toolkit", "stressprompt"};
  app.fallthrough();
  app.require_subcommand(1);

  Invocation inv;
  std::string config_path, model, template_id, dataset, output, mode, levels;
  std::vector<std::string> tasks;
  std::uint64_t seed = 0;
  double temperature = 0.0;
  int max_tokens = 0;

  app.add_option("--config", config_path, "RunConfig JSON; flags override its values");
  auto* o_seed = app.add_option("--seed", seed, "seed for every random choice");
  app.add_flag("--dry-run", inv.dry_run, "validate everything and write nothing");
  app.add_option("--jobs", inv.jobs, "parallel sweep cells / layer fits")->check(CLI::PositiveNumber);
  auto* o_output = app.add_option("--output", output, "output directory");
  auto* o_model = app.add_option("--model", model, "toy | toy:<config.json> | http:<model>");
  auto* o_template = app.add_option("--template", template_id, "chat template id");
  app.add_option("--templates-dir", inv.templates_dir, "directory of chat template JSON files");
  auto* o_dataset = app.add_option("--dataset", dataset, "stress prompt JSONL");
  auto* o_tasks = app.add_option("--tasks", tasks, "task manifest JSON files");
  auto* o_levels = app.add_option("--levels", levels, "comma-separated level filter, e.g. 1,5,10");
  auto* o_mode = app.add_option("--mode", mode, "capture mode: prompt_only | prompt_and_question");
  auto* o_temp = app.add_option("--temperature", temperature, "sampling temperature");
  auto* o_max = app.add_option("--max-tokens", max_tokens, "generation budget");
  app.add_option("--timestamp", inv.timestamp, "fixed ledger timestamp (default: SOURCE_DATE_EPOCH, else now)");

  auto* ds = app.add_subcommand("dataset", "validate, summarize, or partition the prompt corpus");
  ds->require_subcommand(1);
  auto* ds_validate = ds->add_subcommand("validate", "check the dataset (and annotations) against the schema");
  auto* ds_stats = ds->add_subcommand("stats", "inter-rater reliability report");
  auto* ds_partition = ds->add_subcommand("partition", "group prompts into the ten stress levels");
  ds->add_subcommand("synth", "write the synthetic 100-prompt fixture");
  for (auto* sub : {ds_validate, ds_stats, ds_partition}) {
    sub->add_option("--annotations", inv.annotations, "rater x prompt CSV");
    sub->add_flag("--exclude-outliers", inv.exclude_outliers, "drop ratings beyond 3 sd of their prompt");
  }
  ds_stats->add_option("--orientation", inv.orientation, "raters_x_prompts | prompts_x_raters | raters_x_levels");
  ds_stats->add_option("--format", inv.format, "json | table");

  auto* cap = app.add_subcommand("capture", "collect hidden states per stress level");
  cap->add_option("--bank", inv.bank, "bank directory (default runs/<hash>/bank)");
  cap->add_option("--question", inv.question, "user turn for prompt_and_question mode");
  cap->add_option("--annotations", inv.annotations, "take levels from this rating matrix");

  auto* fitc = app.add_subcommand("fit", "fit per-layer stress vectors");
  auto* scanc = app.add_subcommand("scan", "score captures along the stress vectors");
  for (auto* sub : {fitc, scanc}) {
    sub->add_option("--bank", inv.bank, "capture bank directory");
    sub->add_option("--vectors", inv.vectors, "stress vector JSON");
    sub->add_option("--layer", inv.layer, "'all' or a layer index");
    sub->add_option("--method", inv.method, "joint | contrast");
    sub->add_option("--token", inv.token, "'last' or a token offset");
  }
  scanc->add_option("--prompt", inv.prompt, "also write the layer x token scan of this prompt");
  scanc->add_option("--width", inv.width, "token columns in the prompt scans (0 = shortest prompt)");

  auto* sw = app.add_subcommand("sweep", "evaluate tasks under every stress level and the baselines");
  sw->add_option("--annotations", inv.annotations, "take levels from this rating matrix");
  sw->add_flag("--skip-failures", inv.skip_failures, "record adapter failures instead of aborting");

  auto* rep = app.add_subcommand("report", "render tables and figures from stored artifacts");
  rep->add_option("--kind", inv.kind, "table | curve | radar | scan | distribution | scatter | reliability")->required();
  rep->add_option("--input", inv.input, "artifact to render");
  rep->add_option("--task", inv.task, "task for curves");
  rep->add_option("--name", inv.name, "output file stem");
  rep->add_option("--annotations", inv.annotations, "rating matrix for reliability");
  rep->add_option("--orientation", inv.orientation, "Friedman orientation for reliability");
  rep->add_option("--layer", inv.layer, "'all' or a layer index for scatter");
  rep->add_option("--method", inv.method, "pca | tsne for scatter");
  rep->add_option("--token", inv.token, "'last' or a token offset");

  std::vector<std::string> argv_store{"stressprompt"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    CLI::App* shown = &app;
    for (auto* s : app.get_subcommands()) {
      shown = s;
      for (auto* s2 : s->get_subcommands()) shown = s2;
    }
    err << shown->help();
    return kValidationError;
  }

  try {
    if (!config_path.empty()) inv.cfg = RunConfig::load(config_path);
    auto& cfg = inv.cfg;
    if (o_model->count()) cfg.model = model;
    if (o_template->count()) cfg.template_id = template_id;
    if (o_dataset->count()) cfg.dataset = dataset;
    if (o_tasks->count()) cfg.tasks = tasks;
    if (o_output->count()) cfg.output = output;
    if (o_seed->count()) cfg.seed = seed;
    inv.seed_given = o_seed->count() > 0 || !config_path.empty();
    if (o_mode->count()) cfg.capture_mode = parse_capture_mode(mode);
    if (o_temp->count()) cfg.temperature = temperature;
    if (o_max->count()) cfg.max_tokens = max_tokens;
    if (o_levels->count()) {
      cfg.levels.clear();
      std::stringstream ss(levels);
      std::string item;
      while (std::getline(ss, item, ',')) {
        int l = 0;
        try {
          l = std::stoi(item);
        } catch (const std::exception&) {
          throw Error(ErrorKind::Config, "bad --levels entry '" + item + "'");
        }
        if (l < 1 || l > kNumLevels) throw Error(ErrorKind::Config, "--levels entries must lie in 1..10");
        cfg.levels.insert(l);
      }
    }
    cfg.generation().validate();

    detail::Env env{inv, out, err};
    if (ds->parsed()) {
      if (ds_validate->parsed()) return detail::dataset_validate(env);
      if (ds_stats->parsed()) return detail::dataset_stats(env);
      if (ds_partition->parsed()) return detail::dataset_partition(env);
      return detail::dataset_synth(env);
    }
    if (cap->parsed()) return detail::capture(env);
    if (fitc->parsed()) return detail::fit(env);
    if (scanc->parsed()) return detail::scan(env);
    if (sw->parsed()) return detail::sweep(env);
    return detail::report(env);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
}

}  // namespace stressprompt::cli
