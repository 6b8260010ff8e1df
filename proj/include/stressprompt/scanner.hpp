#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "stressprompt/common.hpp"
#include "stressprompt/dataset.hpp"
#include "stressprompt/model_adapter.hpp"

namespace stressprompt {

// ---------------------------------------------------------------------------
// Capture bank

struct BankProvenance {
  std::string dataset_hash;
  std::string model_id;
  CaptureMode capture_mode = CaptureMode::PromptOnly;
  std::string template_id = "plain";
};

/// Hidden-state captures grouped by stress level.
struct CaptureBank {
  std::map<int, std::vector<HiddenStateCapture>> levels;
  BankProvenance provenance;

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& [_, caps] : levels) n += caps.size();
    return n;
  }

  const HiddenStateCapture& first() const {
    for (const auto& [_, caps] : levels) {
      if (!caps.empty()) return caps.front();
    }
    throw Error(ErrorKind::Validation, "capture bank is empty");
  }

  std::size_t layers() const { return first().layers(); }
  std::size_t dim() const { return first().dim(); }

  /// Every capture shares (layers, dim) and every level key lies in 1..10.
  void validate() const {
    if (size() == 0) throw Error(ErrorKind::Validation, "capture bank is empty");
    const auto L = layers(), D = dim();
    for (const auto& [level, caps] : levels) {
      if (level < 1 || level > kNumLevels) throw Error(ErrorKind::Validation, "bank level outside 1..10");
      for (const auto& c : caps) {
        if (c.layers() != L || c.dim() != D) {
          throw Error(ErrorKind::Validation, "capture '" + c.prompt_id + "' has shape " + std::to_string(c.layers()) +
                                                 "x" + std::to_string(c.dim()) + ", bank expects " +
                                                 std::to_string(L) + "x" + std::to_string(D));
        }
        if (c.tokens() == 0) throw Error(ErrorKind::Validation, "capture '" + c.prompt_id + "' has no tokens");
      }
    }
  }
};

/// One forward capture per prompt per level of `partition` (restricted to
/// `levels` when non-empty). In PromptAndQuestion mode `question` is the
/// user turn.
inline CaptureBank collect(ModelAdapter& adapter, const StressLevelPartition& partition, CaptureMode mode,
                           const std::set<int>& levels = {}, const std::string& question = "",
                           const std::string& template_id = "plain") {
  if (!adapter.capabilities().activations) {
    throw Error(ErrorKind::Capability, "backend '" + adapter.model_id() + "' does not export activations");
  }
  if (mode == CaptureMode::PromptAndQuestion && question.empty()) {
    throw Error(ErrorKind::Config, "prompt_and_question capture needs a question");
  }
  CaptureBank bank;
  bank.provenance.model_id = adapter.model_id();
  bank.provenance.capture_mode = mode;
  bank.provenance.template_id = template_id;
  for (int level = 1; level <= kNumLevels; ++level) {
    if (!levels.empty() && !levels.count(level)) continue;
    for (const auto& rec : partition.at(level)) {
      ChatPrompt p{rec.text, mode == CaptureMode::PromptAndQuestion ? question : std::string("-"), template_id};
      auto cap = adapter.forward_capture(p, mode);
      cap.prompt_id = rec.id;
      if (!cap.all_finite()) throw Error(ErrorKind::Validation, "non-finite activations for '" + rec.id + "'");
      bank.levels[level].push_back(std::move(cap));
    }
  }
  bank.validate();
  return bank;
}

/// Layout: bank.json (provenance and level -> prompt ids) plus one dump
/// directory per capture under captures/<level>/<prompt id>/.
inline void save_bank(const CaptureBank& bank, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json levels = json::object();
  for (const auto& [level, caps] : bank.levels) {
    json ids = json::array();
    for (const auto& c : caps) {
      ids.push_back(c.prompt_id);
      save_capture(c, dir / "captures" / std::to_string(level) / c.prompt_id);
    }
    levels[std::to_string(level)] = ids;
  }
  json j{{"provenance",
          {{"dataset_hash", bank.provenance.dataset_hash},
           {"model_id", bank.provenance.model_id},
           {"capture_mode", to_string(bank.provenance.capture_mode)},
           {"template_id", bank.provenance.template_id}}},
         {"layers", bank.layers()},
         {"dim", bank.dim()},
         {"levels", levels}};
  std::ofstream out(dir / "bank.json", std::ios::binary);
  out << j.dump(2) << '\n';
}

inline CaptureBank load_bank(const std::filesystem::path& dir) {
  std::ifstream in(dir / "bank.json");
  if (!in) throw Error(ErrorKind::Io, "no bank.json in " + dir.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::Parse, (dir / "bank.json").string() + ": " + e.what());
  }
  CaptureBank bank;
  const auto& prov = j.at("provenance");
  bank.provenance.dataset_hash = prov.value("dataset_hash", "");
  bank.provenance.model_id = prov.value("model_id", "");
  bank.provenance.capture_mode = parse_capture_mode(prov.value("capture_mode", "prompt_only"));
  bank.provenance.template_id = prov.value("template_id", "plain");
  for (const auto& [key, ids] : j.at("levels").items()) {
    const int level = std::stoi(key);
    for (const auto& id : ids) {
      bank.levels[level].push_back(load_capture(dir / "captures" / key / id.get<std::string>()));
    }
  }
  bank.validate();
  return bank;
}

// ---------------------------------------------------------------------------
// Token selection

/// Token position inside a capture. Negative offsets count from the end
/// (-1 = last token).
struct TokenSelector {
  long offset = -1;

  static TokenSelector last() { return {-1}; }
  static TokenSelector parse(std::string_view s) {
    if (s == "last") return last();
    try {
      return {std::stol(std::string(s))};
    } catch (const std::exception&) {
      throw Error(ErrorKind::Config, "bad token selector '" + std::string(s) + "'");
    }
  }

  std::size_t resolve(std::size_t tokens) const {
    const long t = offset < 0 ? static_cast<long>(tokens) + offset : offset;
    if (t < 0 || t >= static_cast<long>(tokens)) {
      throw Error(ErrorKind::Validation, "token selector " + std::to_string(offset) + " outside a " +
                                             std::to_string(tokens) + "-token capture");
    }
    return static_cast<std::size_t>(t);
  }

  std::string label() const { return offset == -1 ? "last" : std::to_string(offset); }
};

// ---------------------------------------------------------------------------
// PCA

struct PcaOptions {
  std::size_t exact_max_dim = 4096;  // above this, randomized power iteration
  std::uint64_t seed = 0;
  int max_iterations = 1000;
  double tolerance = 1e-12;
};

struct PrincipalAxis {
  Eigen::VectorXd direction;  // unit norm
  double variance = 0.0;      // eigenvalue
  double total_variance = 0.0;
};

namespace detail {

// Fixes the arbitrary eigenvector sign: the largest-magnitude component is
// made positive (the first one on ties).
inline void canonical_sign(Eigen::VectorXd& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (std::abs(v[i]) > std::abs(v[best])) best = i;
  }
  if (v[best] < 0) v = -v;
}

}  // namespace detail

/// Leading principal axes of the rows of `samples` (centered internally).
inline std::vector<PrincipalAxis> principal_axes(const Eigen::MatrixXd& samples, std::size_t count,
                                                 const PcaOptions& options = {}) {
  const auto n = samples.rows();
  const auto d = samples.cols();
  if (n < 2) throw Error(ErrorKind::Validation, "PCA needs at least 2 samples");
  const Eigen::RowVectorXd mean = samples.colwise().mean();
  const Eigen::MatrixXd centered = samples.rowwise() - mean;
  const double total = centered.squaredNorm() / static_cast<double>(n - 1);
  if (!(total > 0.0)) throw Error(ErrorKind::Degenerate, "all samples are identical; no principal direction");

  std::vector<PrincipalAxis> axes;
  if (static_cast<std::size_t>(d) <= options.exact_max_dim) {
    const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    if (solver.info() != Eigen::Success) throw Error(ErrorKind::Degenerate, "eigendecomposition failed");
    for (std::size_t k = 0; k < count && static_cast<Eigen::Index>(k) < d; ++k) {
      Eigen::VectorXd v = solver.eigenvectors().col(d - 1 - static_cast<Eigen::Index>(k));
      detail::canonical_sign(v);
      axes.push_back({v, std::max(0.0, solver.eigenvalues()[d - 1 - static_cast<Eigen::Index>(k)]), total});
    }
    return axes;
  }

  // Power iteration on X^T X without forming it, deflating found axes.
  NormalSampler normal(mix64(options.seed ^ 0x9ca5eedULL));
  for (std::size_t k = 0; k < count && static_cast<Eigen::Index>(k) < d; ++k) {
    Eigen::VectorXd v(d);
    for (Eigen::Index i = 0; i < d; ++i) v[i] = normal();
    v.normalize();
    double lambda = 0.0;
    for (int it = 0; it < options.max_iterations; ++it) {
      Eigen::VectorXd w = centered.transpose() * (centered * v) / static_cast<double>(n - 1);
      for (const auto& a : axes) w -= a.variance * a.direction * a.direction.dot(v);
      const double norm = w.norm();
      if (norm == 0.0) break;
      w /= norm;
      const double change = std::min((w - v).norm(), (w + v).norm());
      v = w;
      lambda = norm;
      if (change < options.tolerance) break;
    }
    detail::canonical_sign(v);
    axes.push_back({v, lambda, total});
  }
  return axes;
}

// ---------------------------------------------------------------------------
// Stress vectors

enum class FitMethod {
  Joint,     // PCA over all levels pooled
  Contrast,  // PCA over sign-alternated high-minus-low differences
};

inline const char* to_string(FitMethod m) { return m == FitMethod::Joint ? "joint" : "contrast"; }

inline FitMethod parse_fit_method(std::string_view s) {
  if (s == "joint") return FitMethod::Joint;
  if (s == "contrast") return FitMethod::Contrast;
  throw Error(ErrorKind::Config, "unknown fit method '" + std::string(s) + "'");
}

struct StressVector {
  std::size_t layer = 0;
  std::vector<double> v;
  int orientation_sign = 1;  // -1 when the raw principal axis was flipped
  double explained_variance_ratio = 0.0;
  json fit_provenance = json::object();

  std::size_t dim() const { return v.size(); }

  json to_json() const {
    return json{{"layer", layer},
                {"dim", v.size()},
                {"v", v},
                {"orientation_sign", orientation_sign},
                {"explained_variance_ratio", explained_variance_ratio},
                {"fit_provenance", fit_provenance}};
  }

  static StressVector from_json(const json& j) {
    StressVector s;
    try {
      s.layer = j.at("layer").get<std::size_t>();
      s.v = j.at("v").get<std::vector<double>>();
      s.orientation_sign = j.at("orientation_sign").get<int>();
      s.explained_variance_ratio = j.at("explained_variance_ratio").get<double>();
      s.fit_provenance = j.value("fit_provenance", json::object());
      if (j.at("dim").get<std::size_t>() != s.v.size()) throw Error(ErrorKind::Validation, "dim does not match v");
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Parse, std::string("bad stress vector: ") + e.what());
    }
    return s;
  }
};

template <typename T>
inline double stress_score(std::span<const T> h, const StressVector& v) {
  if (h.size() != v.v.size()) {
    throw Error(ErrorKind::Validation, "hidden state has dim " + std::to_string(h.size()) + ", stress vector has " +
                                           std::to_string(v.v.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < h.size(); ++i) s += static_cast<double>(h[i]) * v.v[i];
  return s;
}

inline double stress_score(const std::vector<double>& h, const StressVector& v) {
  return stress_score(std::span<const double>(h), v);
}

struct FitOptions {
  FitMethod method = FitMethod::Joint;
  TokenSelector token = TokenSelector::last();
  PcaOptions pca;
};

namespace detail {

struct LevelSplit {
  std::set<int> low;
  std::set<int> high;
};

// Levels 1-5 versus 6-10; when one side is absent from the bank, the
// present levels are split at their median instead.
inline LevelSplit split_levels(const CaptureBank& bank) {
  std::vector<int> present;
  for (const auto& [level, caps] : bank.levels) {
    if (!caps.empty()) present.push_back(level);
  }
  LevelSplit s;
  for (int l : present) (l <= 5 ? s.low : s.high).insert(l);
  if (s.low.empty() || s.high.empty()) {
    s.low.clear();
    s.high.clear();
    for (std::size_t i = 0; i < present.size(); ++i) (i < present.size() / 2 ? s.low : s.high).insert(present[i]);
  }
  return s;
}

inline Eigen::VectorXd state_vector(const HiddenStateCapture& c, std::size_t layer, const TokenSelector& token) {
  const auto s = c.state(layer, token.resolve(c.tokens()));
  Eigen::VectorXd v(static_cast<Eigen::Index>(s.size()));
  for (std::size_t i = 0; i < s.size(); ++i) v[static_cast<Eigen::Index>(i)] = s[i];
  return v;
}

}  // namespace detail

/// Mean selected-token score over the low-half and high-half levels of the
/// bank, in bank order. The fitted orientation guarantees high >= low.
inline std::pair<double, double> half_means(const CaptureBank& bank, const StressVector& v,
                                            TokenSelector token = TokenSelector::last()) {
  const auto split = detail::split_levels(bank);
  double low = 0.0, high = 0.0;
  std::size_t n_low = 0, n_high = 0;
  for (const auto& [level, caps] : bank.levels) {
    for (const auto& c : caps) {
      const double s = stress_score(c.state(v.layer, token.resolve(c.tokens())), v);
      if (split.high.count(level)) {
        high += s;
        ++n_high;
      } else {
        low += s;
        ++n_low;
      }
    }
  }
  return {n_low ? low / static_cast<double>(n_low) : 0.0, n_high ? high / static_cast<double>(n_high) : 0.0};
}

/// Fits the stress direction of one layer.
///
/// Joint: selected-token states of every level are stacked, centered on the
/// grand mean, and the first principal component is taken. Contrast: the
/// j-th high-half state is paired with the j-th low-half state, differences
/// get alternating signs, and PCA runs on those. Either way the result is
/// oriented so the mean projection of levels 6-10 is at least that of
/// levels 1-5.
inline StressVector fit_stress_vector(const CaptureBank& bank, std::size_t layer, const FitOptions& options = {}) {
  bank.validate();
  if (layer >= bank.layers()) throw Error(ErrorKind::Validation, "layer " + std::to_string(layer) + " out of range");
  std::size_t distinct = 0;
  for (const auto& [_, caps] : bank.levels) distinct += caps.empty() ? 0 : 1;
  if (distinct < 2) throw Error(ErrorKind::Validation, "fitting a stress vector needs at least 2 distinct levels");
  if (bank.size() < 2) throw Error(ErrorKind::Validation, "fitting a stress vector needs at least 2 samples");

  const auto D = static_cast<Eigen::Index>(bank.dim());
  const auto split = detail::split_levels(bank);
  std::vector<Eigen::VectorXd> low, high, all;
  for (const auto& [level, caps] : bank.levels) {
    for (const auto& c : caps) {
      auto v = detail::state_vector(c, layer, options.token);
      (split.high.count(level) ? high : low).push_back(v);
      all.push_back(std::move(v));
    }
  }

  Eigen::MatrixXd samples;
  if (options.method == FitMethod::Joint) {
    samples.resize(static_cast<Eigen::Index>(all.size()), D);
    for (std::size_t i = 0; i < all.size(); ++i) samples.row(static_cast<Eigen::Index>(i)) = all[i].transpose();
  } else {
    const auto pairs = std::min(low.size(), high.size());
    if (pairs < 2) throw Error(ErrorKind::Validation, "contrast fit needs at least 2 low/high pairs");
    samples.resize(static_cast<Eigen::Index>(pairs), D);
    for (std::size_t j = 0; j < pairs; ++j) {
      const double sign = (j % 2 == 0) ? 1.0 : -1.0;
      samples.row(static_cast<Eigen::Index>(j)) = sign * (high[j] - low[j]).transpose();
    }
  }

  const auto axis = principal_axes(samples, 1, options.pca).front();

  StressVector out;
  out.layer = layer;
  out.v.assign(axis.direction.data(), axis.direction.data() + axis.direction.size());
  out.explained_variance_ratio = axis.variance / axis.total_variance;
  const auto [mean_low, mean_high] = half_means(bank, out, options.token);
  if (mean_high < mean_low) {
    for (auto& x : out.v) x = -x;
    out.orientation_sign = -1;
  }

  json low_levels = json::array(), high_levels = json::array();
  for (int l : split.low) low_levels.push_back(l);
  for (int l : split.high) high_levels.push_back(l);
  out.fit_provenance = json{{"method", to_string(options.method)},
                            {"token", options.token.label()},
                            {"n_samples", samples.rows()},
                            {"low_levels", low_levels},
                            {"high_levels", high_levels},
                            {"model_id", bank.provenance.model_id},
                            {"dataset_hash", bank.provenance.dataset_hash},
                            {"capture_mode", to_string(bank.provenance.capture_mode)}};
  return out;
}

/// Fits every layer of the bank, in layer order.
inline std::vector<StressVector> fit_all_layers(const CaptureBank& bank, const FitOptions& options = {}) {
  std::vector<StressVector> out;
  for (std::size_t l = 0; l < bank.layers(); ++l) out.push_back(fit_stress_vector(bank, l, options));
  return out;
}

inline void save_vectors(std::span<const StressVector> vectors, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  json arr = json::array();
  for (const auto& v : vectors) arr.push_back(v.to_json());
  std::ofstream out(path, std::ios::binary);
  out << arr.dump(2) << '\n';
}

inline std::vector<StressVector> load_vectors(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::Parse, path.string() + ": " + e.what());
  }
  std::vector<StressVector> out;
  if (j.is_object()) {
    out.push_back(StressVector::from_json(j));
  } else {
    for (const auto& e : j) out.push_back(StressVector::from_json(e));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scores and scans

/// Labeled real matrix of stress scores.
struct ScanMatrix {
  std::string corner = "layer";
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  std::vector<double> values;  // row-major
  std::vector<std::string> notes;

  std::size_t rows() const { return row_labels.size(); }
  std::size_t cols() const { return col_labels.size(); }
  double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
};

namespace detail {

inline const StressVector& vector_for_layer(std::span<const StressVector> vectors, std::size_t layer) {
  for (const auto& v : vectors) {
    if (v.layer == layer) return v;
  }
  throw Error(ErrorKind::Validation, "no stress vector for layer " + std::to_string(layer));
}

inline std::string layer_label(std::size_t l) { return "L" + std::to_string(l); }

}  // namespace detail

/// Entry (l, t) is the score of token t at layer l under that layer's vector.
/// Only layers with a vector are scanned. Column labels carry the token text
/// with CSV-breaking characters replaced by '_'.
inline ScanMatrix layer_token_scan(const HiddenStateCapture& capture, std::span<const StressVector> vectors) {
  ScanMatrix m;
  std::vector<std::size_t> layers;
  for (std::size_t l = 0; l < capture.layers(); ++l) {
    if (std::any_of(vectors.begin(), vectors.end(), [&](const auto& v) { return v.layer == l; })) {
      layers.push_back(l);
      m.row_labels.push_back(detail::layer_label(l));
    }
  }
  if (layers.empty()) throw Error(ErrorKind::Validation, "no stress vectors match the capture's layers");
  for (std::size_t t = 0; t < capture.tokens(); ++t) {
    auto tok = t < capture.token_strings.size() ? capture.token_strings[t] : std::string();
    for (auto& ch : tok) {
      if (ch == ',' || ch == '\n' || ch == '\r' || ch == '"') ch = '_';
    }
    m.col_labels.push_back("t" + std::to_string(t) + ":" + tok);
  }
  m.values.assign(m.rows() * m.cols(), 0.0);
  for (std::size_t r = 0; r < layers.size(); ++r) {
    const auto& v = detail::vector_for_layer(vectors, layers[r]);
    for (std::size_t t = 0; t < capture.tokens(); ++t) m.at(r, t) = stress_score(capture.state(layers[r], t), v);
  }
  return m;
}

/// Entry (l, i) is the mean selected-token score over the level-i prompts.
/// Only layers with a vector are scanned; levels without captures are
/// omitted and listed in the notes.
inline ScanMatrix level_scan(const CaptureBank& bank, std::span<const StressVector> vectors,
                             TokenSelector token = TokenSelector::last()) {
  bank.validate();
  ScanMatrix m;
  std::vector<std::size_t> layers;
  for (std::size_t l = 0; l < bank.layers(); ++l) {
    if (std::any_of(vectors.begin(), vectors.end(), [&](const auto& v) { return v.layer == l; })) {
      layers.push_back(l);
      m.row_labels.push_back(detail::layer_label(l));
    }
  }
  if (layers.empty()) throw Error(ErrorKind::Validation, "no stress vectors match the bank's layers");
  std::vector<int> levels;
  for (int i = 1; i <= kNumLevels; ++i) {
    auto it = bank.levels.find(i);
    if (it == bank.levels.end() || it->second.empty()) {
      m.notes.push_back("level_" + std::to_string(i) + " omitted: no captures");
      continue;
    }
    levels.push_back(i);
    m.col_labels.push_back("level_" + std::to_string(i));
  }
  m.values.assign(m.rows() * m.cols(), 0.0);
  for (std::size_t r = 0; r < layers.size(); ++r) {
    const auto& v = detail::vector_for_layer(vectors, layers[r]);
    for (std::size_t c = 0; c < levels.size(); ++c) {
      const auto& caps = bank.levels.at(levels[c]);
      double sum = 0.0;
      for (const auto& cap : caps) sum += stress_score(cap.state(layers[r], token.resolve(cap.tokens())), v);
      m.at(r, c) = sum / static_cast<double>(caps.size());
    }
  }
  return m;
}

/// Per-layer scan over the whole bank: rows are prompts (id@level), columns
/// are the last `width` token positions, right-aligned so the final column
/// is every prompt's last token.
inline ScanMatrix prompt_token_scan(const CaptureBank& bank, const StressVector& vector, std::size_t width = 0) {
  bank.validate();
  std::size_t min_tokens = SIZE_MAX;
  for (const auto& [_, caps] : bank.levels) {
    for (const auto& c : caps) min_tokens = std::min(min_tokens, c.tokens());
  }
  if (width == 0 || width > min_tokens) width = min_tokens;
  ScanMatrix m;
  m.corner = "prompt";
  for (std::size_t k = 0; k < width; ++k) {
    const long offset = static_cast<long>(k) - static_cast<long>(width);
    m.col_labels.push_back("t" + std::to_string(offset));
  }
  for (const auto& [level, caps] : bank.levels) {
    for (const auto& c : caps) {
      m.row_labels.push_back(c.prompt_id + "@" + std::to_string(level));
      for (std::size_t k = 0; k < width; ++k) {
        m.values.push_back(stress_score(c.state(vector.layer, c.tokens() - width + k), vector));
      }
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Scan CSV

inline std::string scan_to_csv(const ScanMatrix& m) {
  std::ostringstream out;
  for (const auto& n : m.notes) out << "# " << n << '\n';
  out << m.corner;
  for (const auto& c : m.col_labels) out << ',' << c;
  out << '\n';
  char buf[40];
  for (std::size_t r = 0; r < m.rows(); ++r) {
    out << m.row_labels[r];
    for (std::size_t c = 0; c < m.cols(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", m.at(r, c));
      out << ',' << buf;
    }
    out << '\n';
  }
  return out.str();
}

inline ScanMatrix scan_from_csv(const std::string& text) {
  ScanMatrix m;
  std::istringstream in(text);
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("# ", 0) == 0) {
      m.notes.push_back(line.substr(2));
      continue;
    }
    auto cells = detail::split_csv_line(line);
    if (!header) {
      m.corner = cells.front();
      m.col_labels.assign(cells.begin() + 1, cells.end());
      header = true;
      continue;
    }
    if (cells.size() != m.col_labels.size() + 1) throw Error(ErrorKind::Parse, "ragged scan CSV row");
    m.row_labels.push_back(cells.front());
    for (std::size_t i = 1; i < cells.size(); ++i) m.values.push_back(std::stod(cells[i]));
  }
  return m;
}

// ---------------------------------------------------------------------------
// 2-D embeddings

enum class EmbedMethod { PrincipalComponents, NeighborEmbedding };

inline EmbedMethod parse_embed_method(std::string_view s) {
  if (s == "pca" || s == "pc2d") return EmbedMethod::PrincipalComponents;
  if (s == "tsne") return EmbedMethod::NeighborEmbedding;
  throw Error(ErrorKind::Config, "unknown embedding method '" + std::string(s) + "'");
}

struct EmbedOptions {
  EmbedMethod method = EmbedMethod::PrincipalComponents;
  double perplexity = 30.0;
  int iterations = 1000;
  std::uint64_t seed = 0;
  TokenSelector token = TokenSelector::last();
};

struct EmbeddedPoint {
  double x = 0.0;
  double y = 0.0;
  int level = 0;
  std::string prompt_id;
};

namespace detail {

// Exact t-SNE (van der Maaten & Hinton) for small sample counts.
inline std::vector<std::pair<double, double>> tsne(const Eigen::MatrixXd& x, const EmbedOptions& o) {
  const auto n = static_cast<std::size_t>(x.rows());
  const double perplexity = std::min(o.perplexity, (static_cast<double>(n) - 1.0) / 3.0);
  const double target_entropy = std::log(std::max(perplexity, 1.0 + 1e-9));

  std::vector<double> d2(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = (x.row(static_cast<Eigen::Index>(i)) - x.row(static_cast<Eigen::Index>(j))).squaredNorm();
      d2[i * n + j] = d2[j * n + i] = v;
    }

  // Conditional affinities by bisection on the precision beta.
  std::vector<double> p(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
    for (int iter = 0; iter < 200; ++iter) {
      double sum = 0.0, weighted = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double w = std::exp(-beta * d2[i * n + j]);
        p[i * n + j] = w;
        sum += w;
        weighted += w * d2[i * n + j];
      }
      if (sum <= 0.0) sum = 1e-300;
      const double entropy = std::log(sum) + beta * weighted / sum;
      for (std::size_t j = 0; j < n; ++j) p[i * n + j] /= sum;
      const double diff = entropy - target_entropy;
      if (std::abs(diff) < 1e-5) break;
      if (diff > 0) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : (beta + hi) / 2.0;
      } else {
        hi = beta;
        beta = (beta + lo) / 2.0;
      }
    }
  }
  std::vector<double> P(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) P[i * n + j] = std::max((p[i * n + j] + p[j * n + i]) / (2.0 * n), 1e-12);

  NormalSampler normal(mix64(o.seed ^ 0x75e3ULL));
  std::vector<double> y(2 * n), update(2 * n, 0.0), gains(2 * n, 1.0), grad(2 * n);
  for (auto& v : y) v = 1e-4 * normal();
  std::vector<double> q(n * n);
  const double learning_rate = 200.0;
  for (int it = 0; it < o.iterations; ++it) {
    const double exaggeration = it < 250 ? 12.0 : 1.0;
    const double momentum = it < 250 ? 0.5 : 0.8;
    double qsum = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        const double dx = y[2 * i] - y[2 * j], dy = y[2 * i + 1] - y[2 * j + 1];
        const double w = 1.0 / (1.0 + dx * dx + dy * dy);
        q[i * n + j] = q[j * n + i] = w;
        qsum += 2.0 * w;
      }
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const double w = q[i * n + j];
        const double mult = 4.0 * (exaggeration * P[i * n + j] - w / qsum) * w;
        grad[2 * i] += mult * (y[2 * i] - y[2 * j]);
        grad[2 * i + 1] += mult * (y[2 * i + 1] - y[2 * j + 1]);
      }
    for (std::size_t k = 0; k < 2 * n; ++k) {
      gains[k] = (grad[k] > 0) != (update[k] > 0) ? gains[k] + 0.2 : std::max(gains[k] * 0.8, 0.01);
      update[k] = momentum * update[k] - learning_rate * gains[k] * grad[k];
      y[k] += update[k];
    }
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mx += y[2 * i];
      my += y[2 * i + 1];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[2 * i] -= mx;
      y[2 * i + 1] -= my;
    }
  }
  std::vector<std::pair<double, double>> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = {y[2 * i], y[2 * i + 1]};
  return out;
}

}  // namespace detail

/// 2-D coordinates of the selected-token states at `layer`, one point per
/// capture, in bank order.
inline std::vector<EmbeddedPoint> embed_2d(const CaptureBank& bank, std::size_t layer, const EmbedOptions& options = {}) {
  bank.validate();
  if (layer >= bank.layers()) throw Error(ErrorKind::Validation, "layer out of range");
  if (bank.size() < 3) throw Error(ErrorKind::Validation, "2-D embedding needs at least 3 samples");
  std::vector<EmbeddedPoint> points;
  Eigen::MatrixXd x(static_cast<Eigen::Index>(bank.size()), static_cast<Eigen::Index>(bank.dim()));
  Eigen::Index row = 0;
  for (const auto& [level, caps] : bank.levels) {
    for (const auto& c : caps) {
      x.row(row++) = detail::state_vector(c, layer, options.token).transpose();
      points.push_back({0.0, 0.0, level, c.prompt_id});
    }
  }
  if (options.method == EmbedMethod::PrincipalComponents) {
    if (bank.dim() < 2) throw Error(ErrorKind::Validation, "PC-2D needs dim >= 2");
    const auto axes = principal_axes(x, 2);
    const Eigen::RowVectorXd mean = x.colwise().mean();
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const Eigen::VectorXd c = (x.row(i) - mean).transpose();
      points[static_cast<std::size_t>(i)].x = c.dot(axes[0].direction);
      points[static_cast<std::size_t>(i)].y = c.dot(axes[1].direction);
    }
  } else {
    const auto coords = detail::tsne(x, options);
    for (std::size_t i = 0; i < coords.size(); ++i) {
      points[i].x = coords[i].first;
      points[i].y = coords[i].second;
    }
  }
  return points;
}

}  // namespace stressprompt
