#pragma once

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <string>
#include <tuple>
#include <vector>

#include "stressprompt/common.hpp"

namespace stressprompt {

inline constexpr int kLedgerSchemaVersion = 1;

// Conditions are labelled "baseline", "cot" or "level_<i>"; on disk a level
// is written as its integer and the baselines by tag.
inline json condition_to_json(const std::string& condition) {
  if (condition.rfind("level_", 0) == 0) return std::stoi(condition.substr(6));
  return condition;
}

inline std::string condition_from_json(const json& j) {
  if (j.is_number_integer()) return "level_" + std::to_string(j.get<int>());
  if (j.is_string()) return j.get<std::string>();
  throw Error(ErrorKind::Validation, "run record level must be an integer or a baseline tag");
}

/// One scored (prompt, item) evaluation.
struct RunRecord {
  int schema_version = kLedgerSchemaVersion;
  std::string config_hash;
  std::string task;
  std::string condition;  // "baseline", "cot" or "level_<i>"
  std::string prompt_id;
  std::size_t item_index = 0;
  std::string prediction;
  double score = 0.0;
  bool failed = false;
  std::string error;
  std::string timestamp;

  using Key = std::tuple<std::string, std::string, std::string, std::string, std::size_t>;
  Key key() const { return {config_hash, task, condition, prompt_id, item_index}; }

  json to_json() const {
    json j{{"schema_version", schema_version},
           {"config_hash", config_hash},
           {"task", task},
           {"level", condition_to_json(condition)},
           {"prompt_id", prompt_id},
           {"item_index", item_index},
           {"prediction", prediction},
           {"score", score},
           {"failed", failed}};
    if (!error.empty()) j["error"] = error;
    j["timestamp"] = timestamp;
    return j;
  }

  static RunRecord from_json(const json& j) {
    RunRecord r;
    try {
      r.schema_version = j.at("schema_version").get<int>();
      r.config_hash = j.at("config_hash").get<std::string>();
      r.task = j.at("task").get<std::string>();
      r.condition = condition_from_json(j.at("level"));
      r.prompt_id = j.at("prompt_id").get<std::string>();
      r.item_index = j.at("item_index").get<std::size_t>();
      r.prediction = j.at("prediction").get<std::string>();
      r.score = j.at("score").get<double>();
      r.failed = j.value("failed", false);
      r.error = j.value("error", "");
      r.timestamp = j.value("timestamp", "");
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Validation, std::string("bad run record: ") + e.what());
    }
    return r;
  }
};

/// Source of RunRecord timestamps. Injectable so pipelines can produce
/// byte-identical ledgers.
using Clock = std::function<std::string()>;

inline std::string iso8601_utc(std::time_t t) {
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline Clock wall_clock() {
  return [] { return iso8601_utc(std::chrono::system_clock::to_time_t(std::chrono::system_clock::now())); };
}

inline Clock fixed_clock(std::string stamp) {
  return [stamp = std::move(stamp)] { return stamp; };
}

/// Append-only JSONL store of RunRecords, one per line.
///
/// Keys are unique: appending a record whose key already exists is a no-op
/// returning the stored record. Opening a file whose last line does not
/// parse truncates it back to the last valid record.
class RunLedger {
 public:
  explicit RunLedger(std::filesystem::path path, int schema_version = kLedgerSchemaVersion)
      : path_(std::move(path)), schema_version_(schema_version) {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    recover();
  }

  const std::filesystem::path& path() const { return path_; }
  int schema_version() const { return schema_version_; }
  std::size_t size() const { return records_.size(); }
  const std::vector<RunRecord>& records() const { return records_; }
  const std::vector<std::string>& warnings() const { return warnings_; }

  const RunRecord* find(const RunRecord::Key& key) const {
    auto it = index_.find(key);
    return it == index_.end() ? nullptr : &records_[it->second];
  }

  /// Durable append. Returns the stored record (the existing one on a
  /// duplicate key).
  const RunRecord& append(const RunRecord& record) {
    if (record.schema_version != schema_version_) {
      throw Error(ErrorKind::Validation, "run record schema " + std::to_string(record.schema_version) +
                                             " does not match ledger schema " + std::to_string(schema_version_));
    }
    std::lock_guard lock(mutex_);
    auto it = index_.find(record.key());
    if (it != index_.end()) return records_[it->second];
    {
      std::ofstream out(path_, std::ios::app | std::ios::binary);
      out << record.to_json().dump() << '\n';
      out.flush();
      if (!out) throw Error(ErrorKind::Io, "failed appending to " + path_.string());
    }
    index_.emplace(record.key(), records_.size());
    records_.push_back(record);
    return records_.back();
  }

 private:
  void recover() {
    if (!std::filesystem::exists(path_)) return;
    std::ifstream in(path_, std::ios::binary);
    std::string contents((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();

    std::size_t pos = 0;
    std::size_t valid_end = 0;
    std::size_t line_no = 0;
    while (pos < contents.size()) {
      auto nl = contents.find('\n', pos);
      const bool terminated = nl != std::string::npos;
      const auto end = terminated ? nl : contents.size();
      const std::string line = contents.substr(pos, end - pos);
      ++line_no;
      const std::size_t next = terminated ? nl + 1 : contents.size();
      if (line.empty()) {
        pos = next;
        valid_end = next;
        continue;
      }
      RunRecord rec;
      bool ok = true;
      try {
        rec = RunRecord::from_json(json::parse(line));
      } catch (const std::exception&) {
        ok = false;
      }
      if (!ok) {
        if (next < contents.size()) {
          throw Error(ErrorKind::Parse, path_.string() + ":" + std::to_string(line_no) +
                                            ": corrupt record before the end of the ledger");
        }
        warnings_.push_back(path_.string() + ": dropped corrupt trailing line " + std::to_string(line_no));
        std::filesystem::resize_file(path_, valid_end);
        break;
      }
      if (rec.schema_version != schema_version_) {
        throw Error(ErrorKind::Validation, path_.string() + ":" + std::to_string(line_no) + ": schema version " +
                                               std::to_string(rec.schema_version) + " != " +
                                               std::to_string(schema_version_));
      }
      if (!index_.count(rec.key())) {
        index_.emplace(rec.key(), records_.size());
        records_.push_back(std::move(rec));
      }
      if (!terminated) {
        std::ofstream out(path_, std::ios::app | std::ios::binary);
        out << '\n';
      }
      pos = next;
      valid_end = next;
    }
  }

  std::filesystem::path path_;
  int schema_version_;
  std::vector<RunRecord> records_;
  std::map<RunRecord::Key, std::size_t> index_;
  std::vector<std::string> warnings_;
  std::mutex mutex_;
};

}  // namespace stressprompt
