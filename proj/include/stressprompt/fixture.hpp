#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "stressprompt/common.hpp"
#include "stressprompt/dataset.hpp"

namespace stressprompt {

/// Synthetic stand-in for the human-rated corpus: prompt texts, a rater x
/// prompt rating matrix with planted per-level means, and a manifest of
/// everything that was planted.
struct SyntheticFixture {
  std::vector<StressPromptRecord> records;
  AnnotationMatrix annotations;
  json manifest;
};

struct FixtureOptions {
  std::uint64_t seed = 20240917;
  std::size_t prompts_per_level = 10;
  std::size_t raters = 20;
  double rater_noise = 0.8;   // sd of per-rating noise
  double rater_bias = 0.25;   // sd of per-rater offsets
  // Prompt (1-based index) whose column receives the planted corrupt rating.
  std::size_t outlier_prompt = 12;
  std::size_t outlier_rater = 7;
};

namespace detail {

inline std::string padded(std::size_t i, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%0*zu", width, i);
  return buf;
}

}  // namespace detail

/// Deterministic in `options.seed`. Every prompt's rounded mean rating equals
/// its planted level, and exactly one entry (the planted corrupt rating)
/// exceeds the 3-sd outlier rule.
inline SyntheticFixture generate_fixture(const FixtureOptions& options = {}) {
  static constexpr std::array<const char*, 8> situations = {
      "a client escalates a complaint", "the quarterly audit begins", "a colleague calls in sick",
      "the server migration stalls",     "a new manager joins the team", "the budget review moves up",
      "a key supplier misses delivery",  "the product demo is tomorrow"};
  static constexpr std::array<const char*, 10> pressures = {
      "there is plenty of time and support",       "the schedule is comfortable",
      "a few extra requests have arrived",         "expectations are rising slightly",
      "the workload is noticeably heavier",        "several tasks now compete for attention",
      "resources are stretched and errors are costly", "failure would be reported to leadership",
      "your position depends on the outcome",      "everything rests on you with no margin at all"};
  static constexpr std::array<Framework, 4> frameworks = {Framework::StressCoping, Framework::JobDemandControl,
                                                          Framework::ConservationOfResources,
                                                          Framework::EffortRewardImbalance};

  NormalSampler rng(options.seed);
  const std::size_t n_prompts = options.prompts_per_level * kNumLevels;

  std::vector<std::string> rater_ids, prompt_ids;
  for (std::size_t r = 0; r < options.raters; ++r) rater_ids.push_back("r" + detail::padded(r + 1, 2));
  for (std::size_t p = 0; p < n_prompts; ++p) prompt_ids.push_back("sp" + detail::padded(p + 1, 3));

  std::vector<double> bias(options.raters);
  for (auto& b : bias) b = options.rater_bias * rng();

  SyntheticFixture fx;
  fx.annotations = AnnotationMatrix(rater_ids, prompt_ids);
  json planted = json::array();
  const std::size_t outlier_col = options.outlier_prompt - 1;
  const std::size_t outlier_row = options.outlier_rater - 1;

  for (std::size_t p = 0; p < n_prompts; ++p) {
    // Levels are interleaved so every framework and level mixes.
    const int level = static_cast<int>(p % kNumLevels) + 1;
    std::vector<int> col(options.raters);
    if (p == outlier_col) {
      // Tight agreement on the planted level plus one corrupt 10.
      for (std::size_t r = 0; r < options.raters; ++r) col[r] = level;
      col[(outlier_row + 1) % options.raters] = std::max(1, level - 1);
      col[(outlier_row + 2) % options.raters] = std::min(10, level + 1);
      col[outlier_row] = 10;
    } else {
      for (int attempt = 0;; ++attempt) {
        if (attempt > 10000) throw Error(ErrorKind::Degenerate, "fixture generator could not meet its constraints");
        for (std::size_t r = 0; r < options.raters; ++r) {
          const double x = level + bias[r] + options.rater_noise * rng();
          col[r] = std::clamp(static_cast<int>(std::lround(x)), kMinRating, kMaxRating);
        }
        if (assign_stress_level(col) != level) continue;
        double mean = 0.0;
        for (int v : col) mean += v;
        mean /= static_cast<double>(col.size());
        double ss = 0.0;
        for (int v : col) ss += (v - mean) * (v - mean);
        const double sd = std::sqrt(ss / static_cast<double>(col.size() - 1));
        bool clean = true;
        for (int v : col) clean = clean && (sd == 0.0 || std::abs(v - mean) <= 3.0 * sd);
        if (clean) break;
      }
    }
    for (std::size_t r = 0; r < options.raters; ++r) fx.annotations.set(r, p, col[r]);

    StressPromptRecord rec;
    rec.id = prompt_ids[p];
    rec.framework = frameworks[p % frameworks.size()];
    rec.text = std::string("[synthetic] ") + situations[(p / kNumLevels) % situations.size()] + " and " +
               pressures[static_cast<std::size_t>(level - 1)] + ". stress@" + std::to_string(level);
    rec.ratings = col;
    rec.stress_level = assign_stress_level(col);
    fx.records.push_back(std::move(rec));
  }

  const auto flags = detect_outliers(fx.annotations);
  json outliers = json::array();
  for (const auto& f : flags) outliers.push_back(json{{"rater", f.rater}, {"prompt", f.prompt}, {"z", f.z}});

  json counts = json::object();
  json levels = json::object();
  for (int l = 1; l <= kNumLevels; ++l) counts[std::to_string(l)] = options.prompts_per_level;
  for (const auto& r : fx.records) levels[r.id] = r.stress_level;

  fx.manifest = json{{"synthetic", true},
                     {"note", "Synthetic fixture; replace with the real rating data when available."},
                     {"seed", options.seed},
                     {"n_prompts", n_prompts},
                     {"n_raters", options.raters},
                     {"level_counts", counts},
                     {"levels", levels},
                     {"planted_outlier",
                      {{"rater", rater_ids[outlier_row]}, {"prompt", prompt_ids[outlier_col]}, {"value", 10}}},
                     {"flagged_outliers", outliers}};
  return fx;
}

}  // namespace stressprompt
