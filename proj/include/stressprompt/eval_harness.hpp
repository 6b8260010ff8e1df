#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "stressprompt/common.hpp"
#include "stressprompt/dataset.hpp"
#include "stressprompt/model_adapter.hpp"
#include "stressprompt/run_ledger.hpp"

namespace stressprompt {

inline constexpr const char* kHelpfulBaseline = "you are a helpful assistant";
inline constexpr const char* kCotBaseline = "let's think step by step";

// ---------------------------------------------------------------------------
// Tasks and metrics

enum class MetricKind { ExactMatch, Contains, ChoiceAccuracy, NumericEqual };
enum class Normalization { None, LowercaseStrip };

struct MetricSpec {
  MetricKind kind = MetricKind::ExactMatch;
  Normalization normalization = Normalization::LowercaseStrip;
  double tolerance = 0.0;  // numeric_equal only
};

inline const char* to_string(MetricKind k) {
  switch (k) {
    case MetricKind::ExactMatch: return "exact_match";
    case MetricKind::Contains: return "contains";
    case MetricKind::ChoiceAccuracy: return "choice_accuracy";
    case MetricKind::NumericEqual: return "numeric_equal";
  }
  return "?";
}

inline MetricKind parse_metric_kind(std::string_view s) {
  for (auto k : {MetricKind::ExactMatch, MetricKind::Contains, MetricKind::ChoiceAccuracy, MetricKind::NumericEqual}) {
    if (s == to_string(k)) return k;
  }
  throw Error(ErrorKind::Config, "unknown metric '" + std::string(s) + "'");
}

inline Normalization parse_normalization(std::string_view s) {
  if (s == "none") return Normalization::None;
  if (s == "lowercase_strip") return Normalization::LowercaseStrip;
  throw Error(ErrorKind::Config, "unknown normalization '" + std::string(s) + "'");
}

struct TaskItem {
  std::string question;
  std::string reference;                 // text reference
  std::optional<std::size_t> reference_index;  // choice reference
  std::vector<std::string> choices;
};

struct Task {
  std::string id;
  std::vector<TaskItem> items;
  MetricSpec metric;
  // "{question}" and "{choices}" are substituted; lets task files carry
  // their own few-shot or chain-of-thought framing.
  std::string question_template = "{question}";

  void validate() const {
    if (id.empty()) throw Error(ErrorKind::Config, "task without id");
    if (items.empty()) throw Error(ErrorKind::Config, "task '" + id + "' has no items");
    for (std::size_t i = 0; i < items.size(); ++i) {
      const auto& it = items[i];
      if (it.reference_index && *it.reference_index >= it.choices.size()) {
        throw Error(ErrorKind::Validation, "task '" + id + "' item " + std::to_string(i) +
                                               ": choice index outside choices");
      }
      if (metric.kind == MetricKind::ChoiceAccuracy && (it.choices.empty() || !it.reference_index)) {
        throw Error(ErrorKind::Config, "task '" + id + "' item " + std::to_string(i) +
                                           ": choice_accuracy needs choices and an integer reference");
      }
    }
  }
};

inline std::string normalize_answer(std::string s, Normalization n) {
  if (n == Normalization::None) return s;
  std::string out;
  for (unsigned char c : s) {
    if (std::isspace(c) || std::ispunct(c)) {
      if (!out.empty() && out.back() != ' ') out += ' ';
      continue;
    }
    out += static_cast<char>(std::tolower(c));
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

namespace detail {

inline std::optional<double> first_number(const std::string& s) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    const bool starts = std::isdigit(static_cast<unsigned char>(s[i])) ||
                        ((s[i] == '-' || s[i] == '+' || s[i] == '.') && i + 1 < s.size() &&
                         std::isdigit(static_cast<unsigned char>(s[i + 1])));
    if (!starts) continue;
    try {
      std::size_t used = 0;
      return std::stod(s.substr(i), &used);
    } catch (const std::exception&) {
      return std::nullopt;
    }
  }
  return std::nullopt;
}

inline std::string choice_letter(std::size_t i) { return std::string(1, static_cast<char>('A' + i)); }

}  // namespace detail

/// Metric(reference, prediction) in [0, 1].
inline double score_prediction(const MetricSpec& metric, const TaskItem& item, const std::string& prediction) {
  const auto norm = [&](const std::string& s) { return normalize_answer(s, metric.normalization); };
  switch (metric.kind) {
    case MetricKind::ExactMatch:
      return norm(prediction) == norm(item.reference) ? 1.0 : 0.0;
    case MetricKind::Contains: {
      const auto ref = norm(item.reference);
      return !ref.empty() && norm(prediction).find(ref) != std::string::npos ? 1.0 : 0.0;
    }
    case MetricKind::ChoiceAccuracy: {
      if (!item.reference_index || item.choices.empty()) {
        throw Error(ErrorKind::Config, "choice_accuracy is undefined for an item without choices");
      }
      const auto pred = normalize_answer(prediction, Normalization::LowercaseStrip);
      const auto idx = *item.reference_index;
      const auto letter = normalize_answer(detail::choice_letter(idx), Normalization::LowercaseStrip);
      if (pred == letter) return 1.0;
      return pred == normalize_answer(item.choices[idx], Normalization::LowercaseStrip) ? 1.0 : 0.0;
    }
    case MetricKind::NumericEqual: {
      const auto ref = detail::first_number(item.reference);
      if (!ref) throw Error(ErrorKind::Config, "numeric_equal needs a numeric reference");
      const auto got = detail::first_number(prediction);
      return got && std::abs(*got - *ref) <= metric.tolerance ? 1.0 : 0.0;
    }
  }
  return 0.0;
}

inline std::string format_question(const Task& task, const TaskItem& item) {
  std::string choices;
  for (std::size_t i = 0; i < item.choices.size(); ++i) {
    if (i) choices += '\n';
    choices += detail::choice_letter(i) + ". " + item.choices[i];
  }
  std::string out = task.question_template;
  auto replace_all = [&](const std::string& key, const std::string& value) {
    for (auto pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos + value.size())) {
      out.replace(pos, key.size(), value);
    }
  };
  replace_all("{question}", item.question);
  replace_all("{choices}", choices);
  return out;
}

/// Task manifest JSON {id, metric, normalization, tolerance?, question_template?,
/// items?}. Items come from the JSONL file named by "items", defaulting to
/// the manifest path with a .jsonl extension.
inline Task load_task(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw Error(ErrorKind::Io, "cannot open task manifest " + manifest_path.string());
  json m;
  try {
    m = json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::Parse, manifest_path.string() + ": " + e.what());
  }
  Task task;
  try {
    task.id = m.at("id").get<std::string>();
    task.metric.kind = parse_metric_kind(m.at("metric").get<std::string>());
    task.metric.normalization = parse_normalization(m.value("normalization", "lowercase_strip"));
    task.metric.tolerance = m.value("tolerance", 0.0);
    task.question_template = m.value("question_template", "{question}");
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Config, manifest_path.string() + ": " + e.what());
  }
  auto items_path = manifest_path;
  items_path.replace_extension(".jsonl");
  if (m.contains("items")) items_path = manifest_path.parent_path() / m["items"].get<std::string>();

  std::ifstream items(items_path);
  if (!items) throw Error(ErrorKind::Io, "cannot open task items " + items_path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(items, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = items_path.string() + ":" + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorKind::Parse, where + ": " + e.what());
    }
    TaskItem item;
    if (!j.contains("question") || !j["question"].is_string()) {
      throw Error(ErrorKind::Validation, where + ": question must be a string");
    }
    item.question = j["question"].get<std::string>();
    if (j.contains("choices")) item.choices = j["choices"].get<std::vector<std::string>>();
    const auto& ref = j.contains("reference") ? j["reference"] : json();
    if (ref.is_number_integer()) {
      const auto idx = ref.get<long long>();
      if (idx < 0) throw Error(ErrorKind::Validation, where + ": negative choice index");
      item.reference_index = static_cast<std::size_t>(idx);
      if (*item.reference_index < item.choices.size()) item.reference = item.choices[*item.reference_index];
    } else if (ref.is_string()) {
      item.reference = ref.get<std::string>();
    } else {
      throw Error(ErrorKind::Validation, where + ": reference must be a string or a choice index");
    }
    task.items.push_back(std::move(item));
  }
  task.validate();
  return task;
}

// ---------------------------------------------------------------------------
// Conditions and prompt composition

enum class BaselineKind { Helpful, ChainOfThought };

inline std::string condition_label(BaselineKind b) { return b == BaselineKind::Helpful ? "baseline" : "cot"; }
inline std::string condition_label(int level) { return "level_" + std::to_string(level); }

/// Position of a condition in reported tables: baselines first, then levels.
inline int condition_rank(const std::string& label) {
  if (label == "baseline") return -2;
  if (label == "cot") return -1;
  if (label.rfind("level_", 0) == 0) return std::stoi(label.substr(6));
  return 1000;
}

inline std::string baseline_text(BaselineKind b) {
  return b == BaselineKind::Helpful ? kHelpfulBaseline : kCotBaseline;
}

/// The stress prompt acts as the system instruction; the task question is
/// the user turn.
inline ChatPrompt compose_prompt(const StressPromptRecord& stress_prompt, const Task& task, const TaskItem& item,
                                 const std::string& template_id = "plain") {
  return ChatPrompt{stress_prompt.text, format_question(task, item), template_id};
}

inline ChatPrompt compose_prompt(const StressPromptRecord& stress_prompt, const TaskItem& item,
                                 const std::string& template_id = "plain") {
  Task bare;
  return ChatPrompt{stress_prompt.text, format_question(bare, item), template_id};
}

inline ChatPrompt compose_baseline(BaselineKind b, const Task& task, const TaskItem& item,
                                   const std::string& template_id = "plain") {
  return ChatPrompt{baseline_text(b), format_question(task, item), template_id};
}

/// A baseline expressed as a one-prompt level set.
inline StressPromptRecord baseline_record(BaselineKind b) {
  StressPromptRecord r;
  r.id = condition_label(b);
  r.text = baseline_text(b);
  return r;
}

namespace detail {

// Sums in ascending order so the result does not depend on input order.
inline double ordered_sum(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  double sum = 0.0;
  for (double x : xs) sum += x;
  return sum;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Running conditions

struct RunOptions {
  std::string condition;      // label written to the ledger
  std::string config_hash;
  std::string template_id = "plain";
  bool skip_failures = false;
  Clock clock = fixed_clock("");
};

struct PromptScore {
  std::string prompt_id;
  double mean = 0.0;
  std::size_t failures = 0;
};

/// Generates and scores one (prompt, item) pair. Adapter failures become a
/// failed record scoring 0 under skip_failures and propagate otherwise.
inline RunRecord evaluate_item(ModelAdapter& model, const Task& task, const StressPromptRecord& stress_prompt,
                               std::size_t item_index, const GenerationConfig& config, const RunOptions& options) {
  RunRecord rec;
  rec.config_hash = options.config_hash;
  rec.task = task.id;
  rec.condition = options.condition;
  rec.prompt_id = stress_prompt.id;
  rec.item_index = item_index;
  const auto& item = task.items.at(item_index);
  try {
    rec.prediction = model.generate(compose_prompt(stress_prompt, task, item, options.template_id), config);
    rec.score = score_prediction(task.metric, item, rec.prediction);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Config || !options.skip_failures) throw;
    rec.failed = true;
    rec.score = 0.0;
    rec.error = e.what();
  }
  rec.timestamp = options.clock();
  return rec;
}

/// Scores every item of `task` under every prompt of `level_set`.
///
/// Records are appended to `sink` (when given) before any aggregation.
/// Items already present in `cache` (defaults to `sink`) are reused instead
/// of re-queried. Every record, reused or new, is also pushed to `produced`.
inline std::vector<PromptScore> run_condition(ModelAdapter& model, const Task& task,
                                              std::span<const StressPromptRecord> level_set,
                                              const GenerationConfig& config, const RunOptions& options,
                                              RunLedger* sink = nullptr,
                                              std::vector<RunRecord>* produced = nullptr,
                                              const RunLedger* cache = nullptr) {
  if (level_set.empty()) throw Error(ErrorKind::Validation, "run_condition needs a non-empty prompt set");
  task.validate();
  config.validate();
  if (!cache) cache = sink;
  std::vector<PromptScore> out;
  for (const auto& sp : level_set) {
    PromptScore ps;
    ps.prompt_id = sp.id;
    std::vector<double> scores;
    for (std::size_t k = 0; k < task.items.size(); ++k) {
      const RunRecord::Key key{options.config_hash, task.id, options.condition, sp.id, k};
      const RunRecord* done = cache ? cache->find(key) : nullptr;
      RunRecord rec = done ? *done : evaluate_item(model, task, sp, k, config, options);
      if (!done && sink) sink->append(rec);
      scores.push_back(rec.score);
      ps.failures += rec.failed ? 1 : 0;
      if (produced) produced->push_back(std::move(rec));
    }
    ps.mean = detail::ordered_sum(std::move(scores)) / static_cast<double>(task.items.size());
    out.push_back(ps);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Aggregation

struct CellStats {
  double mean = 0.0;
  double std = 0.0;
  bool single_prompt = false;  // N_i = 1, std reported as 0
};

/// Mean of per-prompt means and their sample standard deviation.
inline CellStats aggregate_cell(std::span<const double> per_prompt_means) {
  if (per_prompt_means.empty()) throw Error(ErrorKind::Validation, "cannot aggregate an empty cell");
  CellStats c;
  const double n = static_cast<double>(per_prompt_means.size());
  c.mean = detail::ordered_sum({per_prompt_means.begin(), per_prompt_means.end()}) / n;
  if (per_prompt_means.size() == 1) {
    c.single_prompt = true;
    return c;
  }
  std::vector<double> sq;
  for (double x : per_prompt_means) sq.push_back((x - c.mean) * (x - c.mean));
  const double ss = detail::ordered_sum(std::move(sq));
  c.std = std::sqrt(ss / (n - 1.0));
  return c;
}

struct PerformanceRow {
  std::string task;
  std::string condition;
  double mean = 0.0;
  double std = 0.0;
  bool single_prompt = false;
  std::vector<std::string> prompt_ids;
  std::vector<double> per_prompt;
  std::size_t failures = 0;
};

struct PerformanceTable {
  std::vector<PerformanceRow> rows;

  const PerformanceRow* find(const std::string& task, const std::string& condition) const {
    for (const auto& r : rows) {
      if (r.task == task && r.condition == condition) return &r;
    }
    return nullptr;
  }

  /// Stress level with the highest mean for `task`, or 0 if none.
  int argmax_level(const std::string& task) const {
    int best = 0;
    double best_mean = -1.0;
    for (const auto& r : rows) {
      if (r.task != task || r.condition.rfind("level_", 0) != 0) continue;
      if (r.mean > best_mean) {
        best_mean = r.mean;
        best = condition_rank(r.condition);
      }
    }
    return best;
  }

  std::vector<std::string> tasks() const {
    std::vector<std::string> out;
    for (const auto& r : rows) {
      if (std::find(out.begin(), out.end(), r.task) == out.end()) out.push_back(r.task);
    }
    return out;
  }
};

/// One cell's inputs: per-prompt means for a (task, condition).
struct CellInput {
  std::string task;
  std::string condition;
  std::vector<std::string> prompt_ids;
  std::vector<double> per_prompt;
  std::size_t failures = 0;
};

/// Builds the table; cells without any per-prompt mean are omitted. Rows
/// keep task order of first appearance and are sorted by condition within a
/// task.
inline PerformanceTable aggregate(std::span<const CellInput> cells) {
  std::vector<std::string> task_order;
  for (const auto& c : cells) {
    if (std::find(task_order.begin(), task_order.end(), c.task) == task_order.end()) task_order.push_back(c.task);
  }
  PerformanceTable table;
  for (const auto& task : task_order) {
    std::vector<const CellInput*> mine;
    for (const auto& c : cells) {
      if (c.task == task && !c.per_prompt.empty()) mine.push_back(&c);
    }
    std::stable_sort(mine.begin(), mine.end(), [](auto* a, auto* b) {
      return condition_rank(a->condition) < condition_rank(b->condition);
    });
    for (const auto* c : mine) {
      const auto stats = aggregate_cell(c->per_prompt);
      table.rows.push_back(PerformanceRow{c->task, c->condition, stats.mean, stats.std, stats.single_prompt,
                                          c->prompt_ids, c->per_prompt, c->failures});
    }
  }
  return table;
}

/// Folds ledger records into the table: per-prompt item means, then the
/// per-cell aggregate. Only records matching `config_hash` count (all
/// records when empty).
inline PerformanceTable replay(std::span<const RunRecord> records, const std::string& config_hash = "") {
  struct Acc {
    std::vector<double> scores;
    std::size_t failures = 0;
  };
  std::vector<CellInput> cells;
  std::map<std::pair<std::string, std::string>, std::size_t> cell_index;
  std::vector<std::vector<Acc>> accs;
  std::map<std::tuple<std::string, std::string, std::string>, std::size_t> prompt_index;
  for (const auto& r : records) {
    if (!config_hash.empty() && r.config_hash != config_hash) continue;
    auto [it, fresh] = cell_index.try_emplace({r.task, r.condition}, cells.size());
    if (fresh) {
      cells.push_back(CellInput{r.task, r.condition, {}, {}, 0});
      accs.emplace_back();
    }
    const auto ci = it->second;
    auto [pit, pfresh] = prompt_index.try_emplace({r.task, r.condition, r.prompt_id}, cells[ci].prompt_ids.size());
    if (pfresh) {
      cells[ci].prompt_ids.push_back(r.prompt_id);
      accs[ci].emplace_back();
    }
    auto& acc = accs[ci][pit->second];
    acc.scores.push_back(r.score);
    acc.failures += r.failed ? 1 : 0;
  }
  for (std::size_t c = 0; c < cells.size(); ++c) {
    for (const auto& a : accs[c]) {
      cells[c].per_prompt.push_back(detail::ordered_sum(a.scores) / static_cast<double>(a.scores.size()));
      cells[c].failures += a.failures;
    }
  }
  return aggregate(cells);
}

inline json to_json(const PerformanceTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows) {
    rows.push_back(json{{"task", r.task},
                        {"condition", r.condition},
                        {"mean", r.mean},
                        {"std", r.std},
                        {"n_prompts", r.per_prompt.size()},
                        {"single_prompt", r.single_prompt},
                        {"failures", r.failures},
                        {"prompt_ids", r.prompt_ids},
                        {"per_prompt_means", r.per_prompt}});
  }
  return json{{"rows", rows}};
}

inline PerformanceTable table_from_json(const json& j) {
  PerformanceTable t;
  try {
    for (const auto& r : j.at("rows")) {
      PerformanceRow row;
      row.task = r.at("task").get<std::string>();
      row.condition = r.at("condition").get<std::string>();
      row.mean = r.at("mean").get<double>();
      row.std = r.at("std").get<double>();
      row.single_prompt = r.value("single_prompt", false);
      row.failures = r.value("failures", std::size_t{0});
      row.prompt_ids = r.value("prompt_ids", std::vector<std::string>{});
      row.per_prompt = r.at("per_prompt_means").get<std::vector<double>>();
      t.rows.push_back(std::move(row));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Parse, std::string("bad performance table: ") + e.what());
  }
  return t;
}

// ---------------------------------------------------------------------------
// Sweep

struct SweepOptions {
  std::string config_hash;
  std::string template_id = "plain";
  std::vector<BaselineKind> baselines{BaselineKind::Helpful, BaselineKind::ChainOfThought};
  std::set<int> levels;  // empty = all levels present in the partition
  bool skip_failures = false;
  unsigned jobs = 1;
  // Needed for jobs > 1: one adapter per worker.
  std::function<std::unique_ptr<ModelAdapter>()> adapter_factory;
  Clock clock = fixed_clock("");
};

/// Runs the {baselines, levels 1..10} x tasks grid. Completed records in the
/// ledger are skipped, so an interrupted sweep resumes where it stopped.
/// Records are appended in grid order regardless of `jobs`, and the table
/// is the replay of the ledger, so reruns are byte-identical.
inline PerformanceTable sweep(ModelAdapter& model, std::span<const Task> tasks, const StressLevelPartition& partition,
                              const GenerationConfig& config, RunLedger& ledger, const SweepOptions& options) {
  if (partition.empty()) throw Error(ErrorKind::Validation, "sweep needs a non-empty partition");
  struct Cell {
    const Task* task;
    std::string condition;
    std::vector<StressPromptRecord> prompts;
  };
  std::vector<Cell> grid;
  for (const auto& task : tasks) {
    for (auto b : options.baselines) grid.push_back({&task, condition_label(b), {baseline_record(b)}});
    for (int level = 1; level <= kNumLevels; ++level) {
      if (!options.levels.empty() && !options.levels.count(level)) continue;
      if (partition.count(level) == 0) continue;
      grid.push_back({&task, condition_label(level), partition.at(level)});
    }
  }

  auto cell_options = [&](const Cell& cell) {
    RunOptions ro;
    ro.condition = cell.condition;
    ro.config_hash = options.config_hash;
    ro.template_id = options.template_id;
    ro.skip_failures = options.skip_failures;
    ro.clock = options.clock;
    return ro;
  };

  const unsigned jobs = std::max(1u, options.jobs);
  if (jobs == 1 || !options.adapter_factory) {
    for (const auto& cell : grid) run_condition(model, *cell.task, cell.prompts, config, cell_options(cell), &ledger);
  } else {
    // Workers only read the ledger; their records are appended in grid
    // order once the whole chunk is done.
    for (std::size_t start = 0; start < grid.size(); start += jobs) {
      const auto end = std::min(grid.size(), start + jobs);
      std::vector<std::future<std::vector<RunRecord>>> futures;
      for (auto c = start; c < end; ++c) {
        futures.push_back(std::async(std::launch::async, [&, c] {
          auto worker = options.adapter_factory();
          std::vector<RunRecord> produced;
          const auto& cell = grid[c];
          run_condition(*worker, *cell.task, cell.prompts, config, cell_options(cell), nullptr, &produced, &ledger);
          return produced;
        }));
      }
      std::vector<std::vector<RunRecord>> results;
      std::exception_ptr failure;
      for (auto& f : futures) {
        try {
          results.push_back(f.get());
        } catch (...) {
          if (!failure) failure = std::current_exception();
          results.emplace_back();
        }
      }
      for (const auto& batch : results) {
        for (const auto& r : batch) ledger.append(r);
      }
      if (failure) std::rethrow_exception(failure);
    }
  }
  return replay(ledger.records(), options.config_hash);
}

}  // namespace stressprompt
