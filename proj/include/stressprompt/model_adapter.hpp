#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "stressprompt/common.hpp"

namespace stressprompt {

// ---------------------------------------------------------------------------
// Prompts and chat templates

struct ChatPrompt {
  std::string system;
  std::string user;
  std::string template_id = "plain";
};

/// Chat rendering template. Loaded from JSON files so that per-family
/// dialogue tokens live in data rather than code.
struct ChatTemplate {
  std::string id;
  std::string system_prefix;
  std::string system_suffix;
  std::string user_prefix;
  std::string user_suffix;
  std::string assistant_prefix;

  static ChatTemplate plain() {
    return {"plain", "<system>", "</system>", "<user>", "</user>", "<assistant>"};
  }

  static ChatTemplate from_json(const json& j) {
    ChatTemplate t;
    try {
      t.id = j.at("id").get<std::string>();
      t.system_prefix = j.value("system_prefix", "");
      t.system_suffix = j.value("system_suffix", "");
      t.user_prefix = j.value("user_prefix", "");
      t.user_suffix = j.value("user_suffix", "");
      t.assistant_prefix = j.value("assistant_prefix", "");
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Config, std::string("bad chat template: ") + e.what());
    }
    if (t.id.empty()) throw Error(ErrorKind::Config, "chat template without id");
    return t;
  }

  json to_json() const {
    return json{{"id", id},
                {"system_prefix", system_prefix},
                {"system_suffix", system_suffix},
                {"user_prefix", user_prefix},
                {"user_suffix", user_suffix},
                {"assistant_prefix", assistant_prefix}};
  }

  /// Full dialogue: system turn, user turn, open assistant turn.
  std::string render(const ChatPrompt& p) const {
    if (p.system.empty() || p.user.empty()) {
      throw Error(ErrorKind::Validation, "chat prompt needs non-empty system and user text");
    }
    return system_prefix + " " + p.system + " " + system_suffix + " " + user_prefix + " " + p.user +
           " " + user_suffix + " " + assistant_prefix;
  }

  /// Stress prompt alone, followed by the open assistant turn.
  std::string render_system_only(const std::string& system) const {
    if (system.empty()) throw Error(ErrorKind::Validation, "empty system text");
    return system_prefix + " " + system + " " + system_suffix + " " + assistant_prefix;
  }
};

class TemplateLibrary {
 public:
  TemplateLibrary() { add(ChatTemplate::plain()); }

  void add(ChatTemplate t) { templates_[t.id] = std::move(t); }

  /// Adds every `*.json` template in `dir`.
  void load_dir(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) {
      throw Error(ErrorKind::Io, "template directory " + dir.string() + " does not exist");
    }
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
      if (e.path().extension() == ".json") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      std::ifstream in(f);
      try {
        add(ChatTemplate::from_json(json::parse(in)));
      } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorKind::Parse, f.string() + ": " + e.what());
      }
    }
  }

  const ChatTemplate& get(const std::string& id) const {
    auto it = templates_.find(id);
    if (it == templates_.end()) throw Error(ErrorKind::Config, "unknown chat template '" + id + "'");
    return it->second;
  }

  bool contains(const std::string& id) const { return templates_.count(id) != 0; }

 private:
  std::map<std::string, ChatTemplate> templates_;
};

/// Whitespace tokenizer shared by the toy backend and the dump manifests.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == ' ' || c == '\n' || c == '\t' || c == '\r') {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

// ---------------------------------------------------------------------------
// Generation config and hidden-state captures

struct GenerationConfig {
  double temperature = 0.0;
  int max_tokens = 64;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(temperature >= 0.0)) throw Error(ErrorKind::Config, "temperature must be >= 0");
    if (max_tokens <= 0) throw Error(ErrorKind::Config, "max_tokens must be positive");
  }

  json to_json() const { return json{{"temperature", temperature}, {"max_tokens", max_tokens}, {"seed", seed}}; }
};

enum class CaptureMode {
  PromptOnly,         // forward pass over the stress prompt alone
  PromptAndQuestion,  // stress prompt as system turn plus a user question
};

inline const char* to_string(CaptureMode m) {
  return m == CaptureMode::PromptOnly ? "prompt_only" : "prompt_and_question";
}

inline CaptureMode parse_capture_mode(std::string_view s) {
  if (s == "prompt_only") return CaptureMode::PromptOnly;
  if (s == "prompt_and_question") return CaptureMode::PromptAndQuestion;
  throw Error(ErrorKind::Config, "unknown capture mode '" + std::string(s) + "'");
}

/// Layers x tokens x dim activations of one forward pass, row-major.
class HiddenStateCapture {
 public:
  HiddenStateCapture() = default;
  HiddenStateCapture(std::size_t layers, std::size_t tokens, std::size_t dim)
      : layers_(layers), tokens_(tokens), dim_(dim), data_(layers * tokens * dim, 0.0f) {}

  std::size_t layers() const { return layers_; }
  std::size_t tokens() const { return tokens_; }
  std::size_t dim() const { return dim_; }

  std::span<const float> state(std::size_t layer, std::size_t token) const {
    return {data_.data() + (layer * tokens_ + token) * dim_, dim_};
  }
  std::span<float> state(std::size_t layer, std::size_t token) {
    return {data_.data() + (layer * tokens_ + token) * dim_, dim_};
  }
  std::span<const float> layer(std::size_t l) const { return {data_.data() + l * tokens_ * dim_, tokens_ * dim_}; }
  std::span<float> layer(std::size_t l) { return {data_.data() + l * tokens_ * dim_, tokens_ * dim_}; }
  const std::vector<float>& data() const { return data_; }
  std::vector<float>& data() { return data_; }

  std::vector<std::string> token_strings;
  std::string prompt_id;

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float x) { return std::isfinite(x); });
  }

  bool operator==(const HiddenStateCapture& o) const {
    return layers_ == o.layers_ && tokens_ == o.tokens_ && dim_ == o.dim_ &&
           token_strings == o.token_strings && prompt_id == o.prompt_id &&
           std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(float)) == 0;
  }

 private:
  std::size_t layers_ = 0;
  std::size_t tokens_ = 0;
  std::size_t dim_ = 0;
  std::vector<float> data_;
};

namespace detail {

inline void write_f32_le(std::ostream& out, std::span<const float> xs) {
  std::vector<unsigned char> buf(xs.size() * 4);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(xs[i]);
    buf[4 * i + 0] = static_cast<unsigned char>(bits & 0xFF);
    buf[4 * i + 1] = static_cast<unsigned char>((bits >> 8) & 0xFF);
    buf[4 * i + 2] = static_cast<unsigned char>((bits >> 16) & 0xFF);
    buf[4 * i + 3] = static_cast<unsigned char>((bits >> 24) & 0xFF);
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline void read_f32_le(std::istream& in, std::span<float> xs) {
  std::vector<unsigned char> buf(xs.size() * 4);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(in.gcount()) != buf.size()) throw Error(ErrorKind::Io, "truncated layer file");
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const std::uint32_t bits = std::uint32_t(buf[4 * i]) | (std::uint32_t(buf[4 * i + 1]) << 8) |
                               (std::uint32_t(buf[4 * i + 2]) << 16) | (std::uint32_t(buf[4 * i + 3]) << 24);
    xs[i] = std::bit_cast<float>(bits);
  }
}

inline std::string layer_file_name(std::size_t l) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "layer_%03zu.f32", l);
  return buf;
}

}  // namespace detail

/// Writes `manifest.json` plus one little-endian float32 file per layer
/// (tokens x dim, row-major).
inline void save_capture(const HiddenStateCapture& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json manifest{{"layers", c.layers()},
                {"tokens", c.tokens()},
                {"dim", c.dim()},
                {"dtype", "f32"},
                {"endianness", "little"},
                {"prompt_id", c.prompt_id},
                {"token_strings", c.token_strings}};
  {
    std::ofstream out(dir / "manifest.json", std::ios::binary);
    out << manifest.dump(2) << '\n';
  }
  for (std::size_t l = 0; l < c.layers(); ++l) {
    std::ofstream out(dir / detail::layer_file_name(l), std::ios::binary);
    detail::write_f32_le(out, c.layer(l));
    if (!out) throw Error(ErrorKind::Io, "failed writing " + (dir / detail::layer_file_name(l)).string());
  }
}

inline HiddenStateCapture load_capture(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw Error(ErrorKind::Io, "no manifest.json in " + dir.string());
  json m;
  try {
    m = json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::Parse, (dir / "manifest.json").string() + ": " + e.what());
  }
  if (m.value("dtype", "") != "f32" || m.value("endianness", "") != "little") {
    throw Error(ErrorKind::Validation, dir.string() + ": only little-endian f32 dumps are supported");
  }
  HiddenStateCapture c(m.at("layers").get<std::size_t>(), m.at("tokens").get<std::size_t>(),
                       m.at("dim").get<std::size_t>());
  c.prompt_id = m.value("prompt_id", "");
  c.token_strings = m.value("token_strings", std::vector<std::string>{});
  if (c.token_strings.size() != c.tokens()) {
    throw Error(ErrorKind::Validation, dir.string() + ": token_strings length does not match tokens");
  }
  for (std::size_t l = 0; l < c.layers(); ++l) {
    std::ifstream f(dir / detail::layer_file_name(l), std::ios::binary);
    if (!f) throw Error(ErrorKind::Io, "missing " + (dir / detail::layer_file_name(l)).string());
    detail::read_f32_le(f, c.layer(l));
  }
  if (!c.all_finite()) throw Error(ErrorKind::Validation, dir.string() + ": non-finite activations");
  return c;
}

// ---------------------------------------------------------------------------
// Adapter interface

struct Capabilities {
  bool generate = false;
  bool activations = false;
};

class ModelAdapter {
 public:
  virtual ~ModelAdapter() = default;

  virtual std::string model_id() const = 0;
  virtual Capabilities capabilities() const = 0;
  virtual std::string generate(const ChatPrompt& prompt, const GenerationConfig& config) = 0;
  virtual HiddenStateCapture forward_capture(const ChatPrompt& prompt, CaptureMode mode) = 0;
};

// ---------------------------------------------------------------------------
// Toy backend

/// Configuration of the seeded toy model.
///
/// The base network is a causal token mixer with fixed random orthogonal
/// weights. On top of it, a prompt containing a trigger token gets
/// `level_magnitude[level] * plant_direction` added to the readout of
/// `plant_layer` at the last token. The plant does not propagate to other
/// layers, so its effect is exactly linear and layer-local.
struct ToyModelConfig {
  std::uint64_t seed = 7;
  std::size_t layers = 4;
  std::size_t dim = 8;
  std::size_t context_length = 4096;
  std::size_t plant_layer = 3;
  double plant_scale = 1.0;                 // norm of the unit-level plant vector u
  std::map<std::string, int> triggers;      // token -> stress level
  std::map<int, double> level_magnitude;    // level -> multiple of u
  std::map<int, double> accuracy;           // level -> P(correct); level 0 = no trigger
  std::string neutral_token = "<pad>";      // triggers are embedded as this token

  static ToyModelConfig defaults() {
    ToyModelConfig c;
    c.triggers["deadline"] = 1;
    for (int i = 1; i <= 10; ++i) {
      c.triggers["stress@" + std::to_string(i)] = i;
      c.level_magnitude[i] = static_cast<double>(i);
    }
    // Inverted-U accuracy profile peaking at level 6.
    const double profile[] = {0.60, 0.45, 0.52, 0.60, 0.68, 0.76, 0.90, 0.74, 0.62, 0.50, 0.40};
    for (int i = 0; i <= 10; ++i) c.accuracy[i] = profile[i];
    return c;
  }

  static ToyModelConfig from_json(const json& j) {
    ToyModelConfig c = defaults();
    try {
      c.seed = j.value("seed", c.seed);
      c.layers = j.value("layers", c.layers);
      c.dim = j.value("dim", c.dim);
      c.context_length = j.value("context_length", c.context_length);
      c.plant_layer = j.value("plant_layer", c.plant_layer);
      c.plant_scale = j.value("plant_scale", c.plant_scale);
      c.neutral_token = j.value("neutral_token", c.neutral_token);
      if (j.contains("triggers")) {
        c.triggers.clear();
        for (const auto& [k, v] : j["triggers"].items()) c.triggers[k] = v.get<int>();
      }
      if (j.contains("level_magnitude")) {
        c.level_magnitude.clear();
        for (const auto& [k, v] : j["level_magnitude"].items()) c.level_magnitude[std::stoi(k)] = v.get<double>();
      }
      if (j.contains("accuracy")) {
        c.accuracy.clear();
        for (const auto& [k, v] : j["accuracy"].items()) c.accuracy[std::stoi(k)] = v.get<double>();
      }
    } catch (const std::exception& e) {
      throw Error(ErrorKind::Config, std::string("bad toy model config: ") + e.what());
    }
    c.validate();
    return c;
  }

  json to_json() const {
    json trig = json::object();
    for (const auto& [k, v] : triggers) trig[k] = v;
    json mag = json::object();
    for (const auto& [k, v] : level_magnitude) mag[std::to_string(k)] = v;
    json acc = json::object();
    for (const auto& [k, v] : accuracy) acc[std::to_string(k)] = v;
    return json{{"seed", seed},           {"layers", layers},         {"dim", dim},
                {"context_length", context_length}, {"plant_layer", plant_layer},
                {"plant_scale", plant_scale}, {"neutral_token", neutral_token},
                {"triggers", trig},       {"level_magnitude", mag},   {"accuracy", acc}};
  }

  void validate() const {
    if (layers == 0 || dim == 0) throw Error(ErrorKind::Config, "toy model needs layers > 0 and dim > 0");
    if (plant_layer >= layers) throw Error(ErrorKind::Config, "plant_layer out of range");
    for (const auto& [lvl, p] : accuracy) {
      if (p < 0.0 || p > 1.0) throw Error(ErrorKind::Config, "accuracy must lie in [0,1]");
    }
  }
};

class ToyModel final : public ModelAdapter {
 public:
  explicit ToyModel(ToyModelConfig config = ToyModelConfig::defaults(), TemplateLibrary templates = {})
      : config_(std::move(config)), templates_(std::move(templates)) {
    config_.validate();
    NormalSampler normal(mix64(config_.seed ^ 0x51a7e5ULL));
    const std::size_t d = config_.dim;
    // One random orthogonal matrix per layer transition (Gram-Schmidt).
    for (std::size_t l = 1; l < config_.layers; ++l) {
      std::vector<double> q(d * d);
      for (auto& x : q) x = normal();
      for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < i; ++j) {
          double dot = 0.0;
          for (std::size_t c = 0; c < d; ++c) dot += q[i * d + c] * q[j * d + c];
          for (std::size_t c = 0; c < d; ++c) q[i * d + c] -= dot * q[j * d + c];
        }
        double norm = 0.0;
        for (std::size_t c = 0; c < d; ++c) norm += q[i * d + c] * q[i * d + c];
        norm = std::sqrt(norm);
        for (std::size_t c = 0; c < d; ++c) q[i * d + c] /= norm;
      }
      weights_.push_back(std::move(q));
    }
    plant_.resize(d);
    double norm = 0.0;
    for (auto& x : plant_) {
      x = normal();
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (auto& x : plant_) x *= config_.plant_scale / norm;
  }

  std::string model_id() const override { return "toy-" + std::to_string(config_.seed); }
  Capabilities capabilities() const override { return {true, true}; }
  const ToyModelConfig& config() const { return config_; }

  /// The unit-level plant vector u (norm = plant_scale).
  const std::vector<double>& plant_direction() const { return plant_; }

  /// Highest trigger level found in the text, 0 if none.
  int stress_level_of(std::string_view system_text) const {
    int level = 0;
    for (const auto& tok : tokenize(system_text)) {
      auto it = config_.triggers.find(tok);
      if (it != config_.triggers.end()) level = std::max(level, it->second);
    }
    return level;
  }

  double plant_magnitude(int level) const {
    if (level == 0) return 0.0;
    auto it = config_.level_magnitude.find(level);
    return it == config_.level_magnitude.end() ? static_cast<double>(level) : it->second;
  }

  double accuracy_at(int level) const {
    auto it = config_.accuracy.find(level);
    return it == config_.accuracy.end() ? 0.5 : it->second;
  }

  /// Rule table: the correct answer is the last word of the user turn; the
  /// model gives it with probability accuracy(level) of the system prompt,
  /// decided by a hash of the prompt (and of the seed when temperature > 0).
  std::string generate(const ChatPrompt& prompt, const GenerationConfig& cfg) override {
    cfg.validate();
    const auto& tmpl = templates_.get(prompt.template_id);
    const auto rendered = tmpl.render(prompt);
    if (tokenize(rendered).size() > config_.context_length) {
      throw Error(ErrorKind::Length, "prompt exceeds the toy model's context length");
    }
    const auto words = tokenize(prompt.user);
    std::string answer = words.empty() ? std::string() : words.back();
    std::uint64_t h = fnv1a64(rendered, mix64(config_.seed));
    if (cfg.temperature > 0.0) h = mix64(h ^ mix64(cfg.seed));
    const double u = static_cast<double>(mix64(h) >> 11) * 0x1.0p-53;
    const int level = stress_level_of(prompt.system);
    std::string out = u < accuracy_at(level) ? answer : "wrong";
    const auto out_tokens = tokenize(out);
    if (static_cast<int>(out_tokens.size()) > cfg.max_tokens) {
      out.clear();
      for (int i = 0; i < cfg.max_tokens; ++i) out += (i ? " " : "") + out_tokens[static_cast<std::size_t>(i)];
    }
    return out;
  }

  HiddenStateCapture forward_capture(const ChatPrompt& prompt, CaptureMode mode) override {
    const auto& tmpl = templates_.get(prompt.template_id);
    const auto rendered =
        mode == CaptureMode::PromptOnly ? tmpl.render_system_only(prompt.system) : tmpl.render(prompt);
    const auto tokens = tokenize(rendered);
    if (tokens.size() > config_.context_length) {
      throw Error(ErrorKind::Length, "prompt exceeds the toy model's context length");
    }
    const std::size_t T = tokens.size(), D = config_.dim, L = config_.layers;
    HiddenStateCapture cap(L, T, D);
    cap.token_strings = tokens;

    std::vector<double> cur(T * D), next(T * D), running(D), mixed(D);
    for (std::size_t t = 0; t < T; ++t) embed(tokens[t], std::span<double>(cur.data() + t * D, D));
    store(cap, 0, cur);
    for (std::size_t l = 1; l < L; ++l) {
      const auto& q = weights_[l - 1];
      std::fill(running.begin(), running.end(), 0.0);
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t c = 0; c < D; ++c) {
          running[c] += cur[t * D + c];
          mixed[c] = 0.5 * cur[t * D + c] + 0.5 * running[c] / static_cast<double>(t + 1);
        }
        for (std::size_t r = 0; r < D; ++r) {
          double acc = 0.0;
          for (std::size_t c = 0; c < D; ++c) acc += q[r * D + c] * mixed[c];
          next[t * D + r] = std::tanh(acc);
        }
      }
      std::swap(cur, next);
      store(cap, l, cur);
    }

    const double magnitude = plant_magnitude(stress_level_of(prompt.system));
    if (magnitude != 0.0 && T > 0) {
      auto s = cap.state(config_.plant_layer, T - 1);
      for (std::size_t c = 0; c < D; ++c) s[c] = static_cast<float>(s[c] + magnitude * plant_[c]);
    }
    return cap;
  }

 private:
  void embed(const std::string& token, std::span<double> out) const {
    const std::string& key = config_.triggers.count(token) ? config_.neutral_token : token;
    NormalSampler normal(mix64(fnv1a64(key, mix64(config_.seed))));
    for (auto& x : out) x = normal();
  }

  static void store(HiddenStateCapture& cap, std::size_t layer, const std::vector<double>& src) {
    auto dst = cap.layer(layer);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<float>(src[i]);
  }

  ToyModelConfig config_;
  TemplateLibrary templates_;
  std::vector<std::vector<double>> weights_;
  std::vector<double> plant_;
};

}  // namespace stressprompt
