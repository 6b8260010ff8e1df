#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "stressprompt/common.hpp"
#include "stressprompt/model_adapter.hpp"

namespace stressprompt {

/// Everything that determines a run's artifacts.
struct RunConfig {
  std::string model = "toy";
  std::string template_id = "plain";
  std::string dataset;
  std::vector<std::string> tasks;
  std::set<int> levels;  // empty = all
  CaptureMode capture_mode = CaptureMode::PromptOnly;
  std::uint64_t seed = 0;
  std::string output = "out";
  double temperature = 0.0;
  int max_tokens = 64;

  json to_json() const {
    json lv = json::array();
    for (int l : levels) lv.push_back(l);
    return json{{"model", model},
                {"template_id", template_id},
                {"dataset", dataset},
                {"tasks", tasks},
                {"levels", lv},
                {"capture_mode", to_string(capture_mode)},
                {"seed", seed},
                {"output", output},
                {"temperature", temperature},
                {"max_tokens", max_tokens}};
  }

  static RunConfig from_json(const json& j) {
    RunConfig c;
    try {
      c.model = j.value("model", c.model);
      c.template_id = j.value("template_id", c.template_id);
      c.dataset = j.value("dataset", c.dataset);
      c.tasks = j.value("tasks", c.tasks);
      if (j.contains("levels")) {
        for (const auto& l : j["levels"]) c.levels.insert(l.get<int>());
      }
      c.capture_mode = parse_capture_mode(j.value("capture_mode", "prompt_only"));
      c.seed = j.value("seed", c.seed);
      c.output = j.value("output", c.output);
      c.temperature = j.value("temperature", c.temperature);
      c.max_tokens = j.value("max_tokens", c.max_tokens);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Config, std::string("bad run config: ") + e.what());
    }
    for (int l : c.levels) {
      if (l < 1 || l > 10) throw Error(ErrorKind::Config, "levels filter entries must lie in 1..10");
    }
    return c;
  }

  static RunConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::Io, "cannot open config " + path.string());
    try {
      return from_json(json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorKind::Parse, path.string() + ": " + e.what());
    }
  }

  GenerationConfig generation() const { return GenerationConfig{temperature, max_tokens, seed}; }
};

/// Digest of a file's bytes; empty string when the file is absent.
inline std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return {};
  std::ostringstream ss;
  ss << in.rdbuf();
  return hex64(fnv1a64(ss.str()));
}

/// Stable digest of the normalized config. Input files contribute their
/// content digests rather than their paths, and the output directory is
/// left out, so the same experiment hashes the same wherever it runs.
inline std::string config_hash(const RunConfig& c) {
  json norm = c.to_json();
  norm.erase("output");
  norm["dataset"] = c.dataset.empty() ? std::string() : file_digest(c.dataset);
  json tasks = json::array();
  for (const auto& t : c.tasks) {
    std::filesystem::path p(t);
    auto items = p;
    items.replace_extension(".jsonl");
    if (std::ifstream mf(p); mf) {
      try {
        const auto m = json::parse(mf);
        if (m.contains("items")) items = p.parent_path() / m["items"].get<std::string>();
      } catch (const nlohmann::json::exception&) {
        // unreadable manifests are reported by load_task
      }
    }
    tasks.push_back(file_digest(p) + ":" + file_digest(items));
  }
  norm["tasks"] = tasks;
  return hex64(fnv1a64(norm.dump()));
}

}  // namespace stressprompt
