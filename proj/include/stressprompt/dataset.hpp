#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "stressprompt/common.hpp"

namespace stressprompt {

inline constexpr int kMinRating = 1;
inline constexpr int kMaxRating = 10;
inline constexpr int kNumLevels = 10;

enum class Framework {
  StressCoping,
  JobDemandControl,
  ConservationOfResources,
  EffortRewardImbalance,
};

inline const char* to_string(Framework f) {
  switch (f) {
    case Framework::StressCoping: return "StressCoping";
    case Framework::JobDemandControl: return "JobDemandControl";
    case Framework::ConservationOfResources: return "ConservationOfResources";
    case Framework::EffortRewardImbalance: return "EffortRewardImbalance";
  }
  return "?";
}

inline std::optional<Framework> parse_framework(std::string_view s) {
  for (auto f : {Framework::StressCoping, Framework::JobDemandControl,
                 Framework::ConservationOfResources, Framework::EffortRewardImbalance}) {
    if (s == to_string(f)) return f;
  }
  return std::nullopt;
}

struct StressPromptRecord {
  std::string id;
  std::string text;
  Framework framework = Framework::StressCoping;
  std::vector<int> ratings;
  int stress_level = 0;
};

/// Round-half-up of the mean rating, clamped to [1, 10].
///
/// Computed in integers so that ties such as 7.5 never depend on floating
/// point representation: floor((2*sum + n) / (2n)).
inline int assign_stress_level(std::span<const int> ratings) {
  if (ratings.empty()) {
    throw Error(ErrorKind::Validation, "cannot assign a stress level from zero ratings");
  }
  long long sum = 0;
  for (int r : ratings) {
    if (r < kMinRating || r > kMaxRating) {
      throw Error(ErrorKind::Validation,
                  "rating " + std::to_string(r) + " outside [1,10]");
    }
    sum += r;
  }
  const auto n = static_cast<long long>(ratings.size());
  const auto level = static_cast<int>((2 * sum + n) / (2 * n));
  return std::clamp(level, kMinRating, kMaxRating);
}

// ---------------------------------------------------------------------------
// JSONL dataset

inline json to_json(const StressPromptRecord& r) {
  json j = json::object();
  j["id"] = r.id;
  j["text"] = r.text;
  j["framework"] = to_string(r.framework);
  j["ratings"] = r.ratings;
  j["stress_level"] = r.stress_level;
  return j;
}

/// Validates one decoded dataset object. `where` prefixes error messages.
inline StressPromptRecord record_from_json(const json& j, const std::string& where,
                                           std::vector<std::string>* warnings = nullptr) {
  if (!j.is_object()) throw Error(ErrorKind::Parse, where + ": expected a JSON object");
  auto require_string = [&](const char* key) -> std::string {
    if (!j.contains(key) || !j[key].is_string()) {
      throw Error(ErrorKind::Validation, where + ": field '" + key + "' must be a string");
    }
    return j[key].get<std::string>();
  };

  StressPromptRecord r;
  r.id = require_string("id");
  if (r.id.empty()) throw Error(ErrorKind::Validation, where + ": empty id");
  r.text = require_string("text");
  if (r.text.empty()) throw Error(ErrorKind::Validation, where + ": record '" + r.id + "' has empty text");
  const auto fw = require_string("framework");
  auto parsed = parse_framework(fw);
  if (!parsed) {
    throw Error(ErrorKind::Validation,
                where + ": record '" + r.id + "' has unknown framework '" + fw + "'");
  }
  r.framework = *parsed;

  if (!j.contains("ratings") || !j["ratings"].is_array()) {
    throw Error(ErrorKind::Validation, where + ": record '" + r.id + "' lacks a ratings array");
  }
  for (const auto& v : j["ratings"]) {
    if (!v.is_number_integer()) {
      throw Error(ErrorKind::Validation, where + ": record '" + r.id + "' has a non-integer rating");
    }
    const int x = v.get<int>();
    if (x < kMinRating || x > kMaxRating) {
      throw Error(ErrorKind::Validation, where + ": record '" + r.id + "' has rating " +
                                             std::to_string(x) + " outside [1,10]");
    }
    r.ratings.push_back(x);
  }

  const bool has_level = j.contains("stress_level") && !j["stress_level"].is_null();
  if (has_level) {
    if (!j["stress_level"].is_number_integer()) {
      throw Error(ErrorKind::Validation, where + ": record '" + r.id + "' stress_level must be an integer");
    }
    r.stress_level = j["stress_level"].get<int>();
    if (r.stress_level < kMinRating || r.stress_level > kMaxRating) {
      throw Error(ErrorKind::Validation, where + ": record '" + r.id + "' stress_level outside [1,10]");
    }
    // The stored level wins; a mismatch usually means exclusions upstream.
    if (!r.ratings.empty() && warnings) {
      const int recomputed = assign_stress_level(r.ratings);
      if (recomputed != r.stress_level) {
        warnings->push_back(where + ": record '" + r.id + "' stores stress_level " +
                            std::to_string(r.stress_level) + " but ratings round to " +
                            std::to_string(recomputed));
      }
    }
  } else {
    if (r.ratings.empty()) {
      throw Error(ErrorKind::Validation,
                  where + ": record '" + r.id + "' has neither ratings nor stress_level");
    }
    r.stress_level = assign_stress_level(r.ratings);
  }
  return r;
}

inline std::vector<StressPromptRecord> parse_dataset(std::istream& in, const std::string& source,
                                                     std::vector<std::string>* warnings = nullptr) {
  std::vector<StressPromptRecord> out;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorKind::Parse, where + ": " + e.what());
    }
    auto rec = record_from_json(j, where, warnings);
    if (!seen.insert(rec.id).second) {
      throw Error(ErrorKind::Validation, where + ": duplicate id '" + rec.id + "'");
    }
    out.push_back(std::move(rec));
  }
  return out;
}

inline std::vector<StressPromptRecord> load_dataset(const std::filesystem::path& path,
                                                    std::vector<std::string>* warnings = nullptr) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open dataset " + path.string());
  return parse_dataset(in, path.string(), warnings);
}

/// Normalized JSONL: fixed key order, one record per line, trailing newline.
inline std::string serialize_dataset(std::span<const StressPromptRecord> records) {
  std::string out;
  for (const auto& r : records) {
    out += to_json(r).dump();
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Annotation matrix

/// Raters x prompts grid of integer ratings. Missing entries hold kMissing.
class AnnotationMatrix {
 public:
  static constexpr int kMissing = 0;

  AnnotationMatrix() = default;
  AnnotationMatrix(std::vector<std::string> raters, std::vector<std::string> prompts)
      : raters_(std::move(raters)),
        prompts_(std::move(prompts)),
        scores_(raters_.size() * prompts_.size(), kMissing) {}

  std::size_t n_raters() const { return raters_.size(); }
  std::size_t n_prompts() const { return prompts_.size(); }
  const std::vector<std::string>& raters() const { return raters_; }
  const std::vector<std::string>& prompts() const { return prompts_; }

  int at(std::size_t rater, std::size_t prompt) const { return scores_[rater * prompts_.size() + prompt]; }
  bool missing(std::size_t rater, std::size_t prompt) const { return at(rater, prompt) == kMissing; }

  void set(std::size_t rater, std::size_t prompt, int value) {
    if (value != kMissing && (value < kMinRating || value > kMaxRating)) {
      throw Error(ErrorKind::Validation, "score " + std::to_string(value) + " for rater '" +
                                             raters_[rater] + "', prompt '" + prompts_[prompt] +
                                             "' outside [1,10]");
    }
    scores_[rater * prompts_.size() + prompt] = value;
  }

  bool complete() const {
    return std::none_of(scores_.begin(), scores_.end(), [](int v) { return v == kMissing; });
  }

  /// Non-missing ratings of one prompt, in rater order.
  std::vector<int> column(std::size_t prompt) const {
    std::vector<int> out;
    for (std::size_t r = 0; r < n_raters(); ++r) {
      if (!missing(r, prompt)) out.push_back(at(r, prompt));
    }
    return out;
  }

  /// Copy with prompts reordered: result column c is source column order[c].
  AnnotationMatrix permute_prompts(std::span<const std::size_t> order) const {
    std::vector<std::string> ids;
    for (auto c : order) ids.push_back(prompts_.at(c));
    AnnotationMatrix out(raters_, ids);
    for (std::size_t r = 0; r < n_raters(); ++r) {
      for (std::size_t c = 0; c < order.size(); ++c) out.scores_[r * order.size() + c] = at(r, order[c]);
    }
    return out;
  }

  std::optional<std::size_t> prompt_index(std::string_view id) const {
    auto it = std::find(prompts_.begin(), prompts_.end(), id);
    if (it == prompts_.end()) return std::nullopt;
    return static_cast<std::size_t>(it - prompts_.begin());
  }

 private:
  std::vector<std::string> raters_;
  std::vector<std::string> prompts_;
  std::vector<int> scores_;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(cell);
      cell.clear();
    } else if (c != '\r') {
      cell += c;
    }
  }
  cells.push_back(cell);
  return cells;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\"");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\"");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// CSV layout: first row holds prompt ids (the top-left cell is a label and is
/// ignored), first column holds rater ids, empty cells are missing.
inline AnnotationMatrix parse_annotations(std::istream& in, const std::string& source) {
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    header = detail::split_csv_line(line);
    break;
  }
  if (header.size() < 2) throw Error(ErrorKind::Parse, source + ": missing header row of prompt ids");
  std::vector<std::string> prompts;
  for (std::size_t i = 1; i < header.size(); ++i) prompts.push_back(detail::trim(header[i]));

  std::vector<std::string> raters;
  std::vector<std::vector<int>> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto cells = detail::split_csv_line(line);
    const std::string where = source + ":" + std::to_string(line_no);
    if (cells.size() != header.size()) {
      throw Error(ErrorKind::Parse, where + ": expected " + std::to_string(header.size()) +
                                        " cells, found " + std::to_string(cells.size()));
    }
    raters.push_back(detail::trim(cells[0]));
    std::vector<int> row;
    for (std::size_t i = 1; i < cells.size(); ++i) {
      const auto cell = detail::trim(cells[i]);
      if (cell.empty()) {
        row.push_back(AnnotationMatrix::kMissing);
        continue;
      }
      std::size_t used = 0;
      int v = 0;
      try {
        v = std::stoi(cell, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != cell.size()) throw Error(ErrorKind::Parse, where + ": non-integer cell '" + cell + "'");
      if (v < kMinRating || v > kMaxRating) {
        throw Error(ErrorKind::Validation, where + ": score " + cell + " outside [1,10]");
      }
      row.push_back(v);
    }
    rows.push_back(std::move(row));
  }

  std::set<std::string> unique_prompts(prompts.begin(), prompts.end());
  if (unique_prompts.size() != prompts.size()) throw Error(ErrorKind::Validation, source + ": duplicate prompt id");
  std::set<std::string> unique_raters(raters.begin(), raters.end());
  if (unique_raters.size() != raters.size()) throw Error(ErrorKind::Validation, source + ": duplicate rater id");

  AnnotationMatrix m(raters, prompts);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t p = 0; p < prompts.size(); ++p) m.set(r, p, rows[r][p]);
  }
  return m;
}

inline AnnotationMatrix load_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open annotation matrix " + path.string());
  return parse_annotations(in, path.string());
}

inline std::string serialize_annotations(const AnnotationMatrix& m) {
  std::ostringstream out;
  out << "rater";
  for (const auto& p : m.prompts()) out << ',' << p;
  out << '\n';
  for (std::size_t r = 0; r < m.n_raters(); ++r) {
    out << m.raters()[r];
    for (std::size_t p = 0; p < m.n_prompts(); ++p) {
      out << ',';
      if (!m.missing(r, p)) out << m.at(r, p);
    }
    out << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Outlier screening

struct OutlierFlag {
  std::string rater;
  std::string prompt;
  double z = 0.0;

  bool operator==(const OutlierFlag&) const = default;
};

inline constexpr double kOutlierZ = 3.0;

/// Flags entries whose distance from their prompt's mean exceeds
/// `threshold` sample standard deviations. Column statistics include the
/// entry under test and skip missing cells. Never mutates the matrix.
inline std::vector<OutlierFlag> detect_outliers(const AnnotationMatrix& m, double threshold = kOutlierZ) {
  std::vector<OutlierFlag> flags;
  for (std::size_t p = 0; p < m.n_prompts(); ++p) {
    const auto col = m.column(p);
    if (col.size() < 3) {
      throw Error(ErrorKind::Validation, "prompt '" + m.prompts()[p] + "' has " +
                                             std::to_string(col.size()) +
                                             " ratings; outlier screening needs at least 3");
    }
    double mean = 0.0;
    for (int v : col) mean += v;
    mean /= static_cast<double>(col.size());
    double ss = 0.0;
    for (int v : col) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(col.size() - 1));
    if (sd == 0.0) continue;
    for (std::size_t r = 0; r < m.n_raters(); ++r) {
      if (m.missing(r, p)) continue;
      const double z = (m.at(r, p) - mean) / sd;
      if (std::abs(z) > threshold) flags.push_back({m.raters()[r], m.prompts()[p], z});
    }
  }
  return flags;
}

/// Exclusion mode: copy of `m` with every flagged entry marked missing.
inline AnnotationMatrix exclude_outliers(const AnnotationMatrix& m, std::span<const OutlierFlag> flags) {
  AnnotationMatrix out = m;
  for (const auto& f : flags) {
    auto r = std::find(m.raters().begin(), m.raters().end(), f.rater);
    auto p = m.prompt_index(f.prompt);
    if (r == m.raters().end() || !p) continue;
    out.set(static_cast<std::size_t>(r - m.raters().begin()), *p, AnnotationMatrix::kMissing);
  }
  return out;
}

/// Stress level per prompt id, from the non-missing ratings of each column.
inline std::map<std::string, int> levels_from_matrix(const AnnotationMatrix& m) {
  std::map<std::string, int> out;
  for (std::size_t p = 0; p < m.n_prompts(); ++p) {
    const auto col = m.column(p);
    if (col.empty()) throw Error(ErrorKind::Validation, "prompt '" + m.prompts()[p] + "' has no ratings");
    out[m.prompts()[p]] = assign_stress_level(col);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Level partition

struct StressLevelPartition {
  // sets[i - 1] holds the prompts at level i.
  std::array<std::vector<StressPromptRecord>, kNumLevels> sets;

  const std::vector<StressPromptRecord>& at(int level) const {
    if (level < 1 || level > kNumLevels) throw Error(ErrorKind::Validation, "level out of range");
    return sets[static_cast<std::size_t>(level - 1)];
  }
  std::size_t count(int level) const { return at(level).size(); }
  std::array<std::size_t, kNumLevels> counts() const {
    std::array<std::size_t, kNumLevels> c{};
    for (int i = 0; i < kNumLevels; ++i) c[static_cast<std::size_t>(i)] = sets[static_cast<std::size_t>(i)].size();
    return c;
  }
  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& s : sets) n += s.size();
    return n;
  }
  bool empty() const { return total() == 0; }
};

inline StressLevelPartition partition_by_level(std::span<const StressPromptRecord> records) {
  StressLevelPartition part;
  for (const auto& r : records) {
    if (r.stress_level < 1 || r.stress_level > kNumLevels) {
      throw Error(ErrorKind::Validation, "record '" + r.id + "' has no valid stress_level");
    }
    part.sets[static_cast<std::size_t>(r.stress_level - 1)].push_back(r);
  }
  return part;
}

inline json to_json(const StressLevelPartition& part) {
  json j = json::object();
  json counts = json::object();
  json sets = json::object();
  for (int level = 1; level <= kNumLevels; ++level) {
    counts[std::to_string(level)] = part.count(level);
    json ids = json::array();
    for (const auto& r : part.at(level)) ids.push_back(r.id);
    sets[std::to_string(level)] = ids;
  }
  j["counts"] = counts;
  j["sets"] = sets;
  j["total"] = part.total();
  return j;
}

}  // namespace stressprompt
