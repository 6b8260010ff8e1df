#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <boost/math/distributions/fisher_f.hpp>

#include "stressprompt/common.hpp"
#include "stressprompt/dataset.hpp"

namespace stressprompt {

// ---------------------------------------------------------------------------
// Distribution tails

namespace detail {

// Regularized lower incomplete gamma P(a, x) by its power series; converges
// quickly for x < a + 1.
inline double gamma_p_series(double a, double x) {
  double term = 1.0 / a;
  double sum = term;
  for (int n = 1; n < 10000; ++n) {
    term *= x / (a + n);
    sum += term;
    if (std::abs(term) < std::abs(sum) * 1e-16) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Regularized upper incomplete gamma Q(a, x) by Lentz's continued fraction;
// used for x >= a + 1.
inline double gamma_q_continued_fraction(double a, double x) {
  constexpr double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 10000; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-16) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

}  // namespace detail

/// Upper tail P(X >= x) of a chi-square variable with `dof` degrees of freedom.
inline double chi_square_upper_tail(double x, double dof) {
  if (dof <= 0) throw Error(ErrorKind::Validation, "chi-square needs positive degrees of freedom");
  if (x <= 0) return 1.0;
  const double a = dof / 2.0;
  const double half = x / 2.0;
  if (half < a + 1.0) return std::clamp(1.0 - detail::gamma_p_series(a, half), 0.0, 1.0);
  return std::clamp(detail::gamma_q_continued_fraction(a, half), 0.0, 1.0);
}

inline std::string format_p(double p, double threshold = 0.001) {
  if (p < threshold) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "p < %g", threshold);
    return buf;
  }
  char buf[32];
  std::snprintf(buf, sizeof buf, "p = %.4f", p);
  return buf;
}

// ---------------------------------------------------------------------------
// Cronbach's alpha

namespace detail {

inline double sample_variance(std::span<const double> xs) {
  if (xs.size() < 2) return 0.0;
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return ss / static_cast<double>(xs.size() - 1);
}

// Prompts (columns) with a rating from every rater.
inline std::vector<std::size_t> complete_prompts(const AnnotationMatrix& m) {
  std::vector<std::size_t> cols;
  for (std::size_t p = 0; p < m.n_prompts(); ++p) {
    bool ok = true;
    for (std::size_t r = 0; r < m.n_raters() && ok; ++r) ok = !m.missing(r, p);
    if (ok) cols.push_back(p);
  }
  return cols;
}

}  // namespace detail

/// Raters are items, prompts are subjects. Prompts with a missing rating are
/// left out of every variance.
inline double cronbach_alpha(const AnnotationMatrix& m) {
  const std::size_t k = m.n_raters();
  if (k < 2) throw Error(ErrorKind::Validation, "Cronbach's alpha needs at least 2 raters");
  const auto cols = detail::complete_prompts(m);
  if (cols.size() < 2) throw Error(ErrorKind::Validation, "Cronbach's alpha needs at least 2 fully rated prompts");

  double item_var_sum = 0.0;
  std::vector<double> totals(cols.size(), 0.0);
  std::vector<double> item(cols.size());
  for (std::size_t r = 0; r < k; ++r) {
    for (std::size_t c = 0; c < cols.size(); ++c) {
      item[c] = m.at(r, cols[c]);
      totals[c] += item[c];
    }
    item_var_sum += detail::sample_variance(item);
  }
  const double total_var = detail::sample_variance(totals);
  if (total_var == 0.0) throw Error(ErrorKind::Degenerate, "total-score variance is zero; alpha undefined");
  const double kd = static_cast<double>(k);
  return (kd / (kd - 1.0)) * (1.0 - item_var_sum / total_var);
}

// ---------------------------------------------------------------------------
// Friedman test

/// Dense blocks x treatments grid of reals; NaN marks a missing cell.
struct RankGrid {
  std::size_t blocks = 0;
  std::size_t treatments = 0;
  std::vector<double> values;
  std::vector<std::string> block_labels;
  std::vector<std::string> treatment_labels;

  double at(std::size_t b, std::size_t t) const { return values[b * treatments + t]; }
  double& at(std::size_t b, std::size_t t) { return values[b * treatments + t]; }
};

struct FriedmanResult {
  double chi2 = 0.0;
  int dof = 0;
  double p = 1.0;
  std::size_t n_blocks = 0;      // blocks actually ranked
  std::size_t n_dropped = 0;     // partially missing blocks left out
  double tie_correction = 1.0;   // denominator 1 - sum(t^3 - t) / (n (k^3 - k))
};

/// Mid-ranks (1-based) of `xs`; tied values share the mean of their ranks.
inline std::vector<double> mid_ranks(std::span<const double> xs, double* tie_term = nullptr) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  double ties = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double rank = (static_cast<double>(i + j) / 2.0) + 1.0;
    for (std::size_t q = i; q <= j; ++q) ranks[order[q]] = rank;
    const double t = static_cast<double>(j - i + 1);
    ties += t * t * t - t;
    i = j + 1;
  }
  if (tie_term) *tie_term = ties;
  return ranks;
}

inline FriedmanResult friedman_test(const RankGrid& grid) {
  const std::size_t k = grid.treatments;
  if (k < 3) throw Error(ErrorKind::Validation, "Friedman test needs at least 3 treatments");
  if (grid.blocks < 2) throw Error(ErrorKind::Validation, "Friedman test needs at least 2 blocks");

  std::vector<double> rank_sums(k, 0.0);
  double tie_sum = 0.0;
  std::size_t n = 0;
  std::size_t dropped = 0;
  std::vector<double> row(k);
  for (std::size_t b = 0; b < grid.blocks; ++b) {
    std::size_t present = 0;
    for (std::size_t t = 0; t < k; ++t) {
      row[t] = grid.at(b, t);
      if (!std::isnan(row[t])) ++present;
    }
    if (present == 0) {
      const auto label = b < grid.block_labels.size() ? grid.block_labels[b] : std::to_string(b);
      throw Error(ErrorKind::Validation, "Friedman block '" + label + "' is entirely missing");
    }
    if (present < k) {
      ++dropped;
      continue;
    }
    double ties = 0.0;
    const auto ranks = mid_ranks(row, &ties);
    for (std::size_t t = 0; t < k; ++t) rank_sums[t] += ranks[t];
    tie_sum += ties;
    ++n;
  }
  if (n < 2) throw Error(ErrorKind::Validation, "Friedman test needs at least 2 complete blocks");

  const double nd = static_cast<double>(n);
  const double kd = static_cast<double>(k);
  const double expected = nd * (kd + 1.0) / 2.0;
  double ss = 0.0;
  for (double r : rank_sums) ss += (r - expected) * (r - expected);
  const double uncorrected = 12.0 * ss / (nd * kd * (kd + 1.0));
  const double correction = 1.0 - tie_sum / (nd * (kd * kd * kd - kd));
  if (correction <= 0.0) throw Error(ErrorKind::Degenerate, "every block is a complete tie");

  FriedmanResult res;
  res.chi2 = uncorrected / correction;
  res.dof = static_cast<int>(k) - 1;
  res.p = chi_square_upper_tail(res.chi2, res.dof);
  res.n_blocks = n;
  res.n_dropped = dropped;
  res.tie_correction = correction;
  return res;
}

/// Which axis of the annotation data forms the Friedman blocks.
enum class FriedmanOrientation {
  RatersByPrompts,  // blocks = raters, treatments = prompts
  PromptsByRaters,  // blocks = prompts, treatments = raters
  RatersByLevels,   // blocks = raters, treatments = each rater's mean per stress level
};

inline const char* to_string(FriedmanOrientation o) {
  switch (o) {
    case FriedmanOrientation::RatersByPrompts: return "raters_x_prompts";
    case FriedmanOrientation::PromptsByRaters: return "prompts_x_raters";
    case FriedmanOrientation::RatersByLevels: return "raters_x_levels";
  }
  return "?";
}

inline std::optional<FriedmanOrientation> parse_orientation(std::string_view s) {
  for (auto o : {FriedmanOrientation::RatersByPrompts, FriedmanOrientation::PromptsByRaters,
                 FriedmanOrientation::RatersByLevels}) {
    if (s == to_string(o)) return o;
  }
  return std::nullopt;
}

/// Builds the blocks x treatments grid for an orientation. RatersByLevels
/// groups prompts by `levels` (prompt id -> level); when empty, levels are
/// derived from the matrix itself. Levels without prompts are omitted.
inline RankGrid friedman_grid(const AnnotationMatrix& m, FriedmanOrientation orientation,
                              const std::map<std::string, int>& levels = {}) {
  constexpr double nan = std::numeric_limits<double>::quiet_NaN();
  auto cell = [&](std::size_t r, std::size_t p) { return m.missing(r, p) ? nan : double(m.at(r, p)); };
  RankGrid g;
  switch (orientation) {
    case FriedmanOrientation::RatersByPrompts:
      g.blocks = m.n_raters();
      g.treatments = m.n_prompts();
      g.block_labels = m.raters();
      g.treatment_labels = m.prompts();
      g.values.resize(g.blocks * g.treatments);
      for (std::size_t r = 0; r < g.blocks; ++r)
        for (std::size_t p = 0; p < g.treatments; ++p) g.at(r, p) = cell(r, p);
      break;
    case FriedmanOrientation::PromptsByRaters:
      g.blocks = m.n_prompts();
      g.treatments = m.n_raters();
      g.block_labels = m.prompts();
      g.treatment_labels = m.raters();
      g.values.resize(g.blocks * g.treatments);
      for (std::size_t p = 0; p < g.blocks; ++p)
        for (std::size_t r = 0; r < g.treatments; ++r) g.at(p, r) = cell(r, p);
      break;
    case FriedmanOrientation::RatersByLevels: {
      const auto lv = levels.empty() ? levels_from_matrix(m) : levels;
      std::map<int, std::vector<std::size_t>> by_level;
      for (std::size_t p = 0; p < m.n_prompts(); ++p) {
        auto it = lv.find(m.prompts()[p]);
        if (it == lv.end()) throw Error(ErrorKind::Validation, "no level for prompt '" + m.prompts()[p] + "'");
        by_level[it->second].push_back(p);
      }
      g.blocks = m.n_raters();
      g.treatments = by_level.size();
      g.block_labels = m.raters();
      for (const auto& [level, _] : by_level) g.treatment_labels.push_back(std::to_string(level));
      g.values.assign(g.blocks * g.treatments, nan);
      for (std::size_t r = 0; r < g.blocks; ++r) {
        std::size_t t = 0;
        for (const auto& [level, cols] : by_level) {
          double sum = 0.0;
          std::size_t cnt = 0;
          for (auto p : cols) {
            if (!m.missing(r, p)) {
              sum += m.at(r, p);
              ++cnt;
            }
          }
          if (cnt) g.at(r, t) = sum / static_cast<double>(cnt);
          ++t;
        }
      }
      break;
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Intraclass correlation, two-way random effects, absolute agreement

struct IccResult {
  double icc = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

struct IccReport {
  IccResult single;   // ICC(2,1)
  IccResult average;  // ICC(2,k)
  double ms_subjects = 0.0;
  double ms_raters = 0.0;
  double ms_error = 0.0;
  std::size_t n_subjects = 0;
  std::size_t n_raters = 0;
};

/// Two-way ANOVA over prompts (subjects) x raters, ICC(2,1) and ICC(2,k)
/// with F-based confidence intervals at level `confidence`.
inline IccReport icc2_report(const AnnotationMatrix& m, double confidence = 0.95) {
  const std::size_t k = m.n_raters();
  const std::size_t n = m.n_prompts();
  if (k < 2 || n < 2) throw Error(ErrorKind::Validation, "ICC needs at least 2 raters and 2 prompts");
  if (!m.complete()) throw Error(ErrorKind::Validation, "ICC requires a complete matrix; found missing entries");

  const double kd = static_cast<double>(k);
  const double nd = static_cast<double>(n);
  double grand = 0.0;
  std::vector<double> subject_mean(n, 0.0), rater_mean(k, 0.0);
  for (std::size_t r = 0; r < k; ++r) {
    for (std::size_t p = 0; p < n; ++p) {
      const double y = m.at(r, p);
      grand += y;
      subject_mean[p] += y;
      rater_mean[r] += y;
    }
  }
  grand /= nd * kd;
  for (auto& v : subject_mean) v /= kd;
  for (auto& v : rater_mean) v /= nd;

  double ss_subjects = 0.0, ss_raters = 0.0, ss_error = 0.0;
  for (double v : subject_mean) ss_subjects += (v - grand) * (v - grand);
  ss_subjects *= kd;
  for (double v : rater_mean) ss_raters += (v - grand) * (v - grand);
  ss_raters *= nd;
  for (std::size_t r = 0; r < k; ++r) {
    for (std::size_t p = 0; p < n; ++p) {
      const double e = m.at(r, p) - subject_mean[p] - rater_mean[r] + grand;
      ss_error += e * e;
    }
  }

  IccReport rep;
  rep.n_subjects = n;
  rep.n_raters = k;
  rep.ms_subjects = ss_subjects / (nd - 1.0);
  rep.ms_raters = ss_raters / (kd - 1.0);
  rep.ms_error = ss_error / ((nd - 1.0) * (kd - 1.0));
  const double msr = rep.ms_subjects, msc = rep.ms_raters, mse = rep.ms_error;
  if (mse == 0.0 && msr == 0.0) throw Error(ErrorKind::Degenerate, "zero subject and residual variance; ICC undefined");

  rep.single.icc = (msr - mse) / (msr + (kd - 1.0) * mse + kd * (msc - mse) / nd);
  rep.average.icc = (msr - mse) / (msr + (msc - mse) / nd);

  // McGraw & Wong (1996) interval for the single-rater form; the average
  // form follows by the Spearman-Brown step-up.
  const double icc = rep.single.icc;
  const double alpha = 1.0 - confidence;
  double low = std::numeric_limits<double>::quiet_NaN();
  double high = low;
  if (mse == 0.0) {
    low = high = icc;
  } else {
    const double a = kd * icc / (nd * (1.0 - icc));
    const double b = 1.0 + kd * icc * (nd - 1.0) / (nd * (1.0 - icc));
    const double df_res = (nd - 1.0) * (kd - 1.0);
    const double num = (a * msc + b * mse) * (a * msc + b * mse);
    const double den = (a * msc) * (a * msc) / (kd - 1.0) + (b * mse) * (b * mse) / df_res;
    const double v = num / den;
    if (std::isfinite(v) && v > 0.0) {
      const boost::math::fisher_f f_upper_dist(nd - 1.0, v);
      const boost::math::fisher_f f_lower_dist(v, nd - 1.0);
      const double fu = boost::math::quantile(f_upper_dist, 1.0 - alpha / 2.0);
      const double fl = boost::math::quantile(f_lower_dist, 1.0 - alpha / 2.0);
      const double c = kd * msc + (kd * nd - kd - nd) * mse;
      low = nd * (msr - fu * mse) / (fu * c + nd * msr);
      high = nd * (fl * msr - mse) / (c + nd * fl * msr);
    }
  }
  rep.single.ci_low = low;
  rep.single.ci_high = high;
  auto step_up = [&](double x) { return x * kd / (1.0 + x * (kd - 1.0)); };
  rep.average.ci_low = step_up(low);
  rep.average.ci_high = step_up(high);
  return rep;
}

/// Headline ICC(2,1) with its interval.
inline IccResult icc2(const AnnotationMatrix& m, double confidence = 0.95) {
  return icc2_report(m, confidence).single;
}

// ---------------------------------------------------------------------------
// Combined report

struct ReliabilityReport {
  double cronbach_alpha = 0.0;
  FriedmanOrientation friedman_orientation = FriedmanOrientation::RatersByLevels;
  FriedmanResult friedman;
  // Every orientation that could be computed, for the ambiguity in which
  // layout a published chi-square refers to.
  std::vector<std::pair<FriedmanOrientation, FriedmanResult>> friedman_all;
  IccReport icc;
  std::size_t n_raters = 0;
  std::size_t n_subjects = 0;
  std::size_t n_complete_subjects = 0;
  std::size_t n_outliers = 0;
};

inline AnnotationMatrix complete_case_matrix(const AnnotationMatrix& m) {
  const auto cols = detail::complete_prompts(m);
  return m.permute_prompts(cols);
}

inline ReliabilityReport reliability_report(const AnnotationMatrix& m,
                                            FriedmanOrientation orientation = FriedmanOrientation::RatersByLevels,
                                            const std::map<std::string, int>& levels = {}) {
  ReliabilityReport rep;
  rep.n_raters = m.n_raters();
  rep.n_subjects = m.n_prompts();
  const auto complete = complete_case_matrix(m);
  rep.n_complete_subjects = complete.n_prompts();
  rep.cronbach_alpha = cronbach_alpha(m);
  rep.icc = icc2_report(complete);
  rep.friedman_orientation = orientation;
  rep.friedman = friedman_test(friedman_grid(m, orientation, levels));
  for (auto o : {FriedmanOrientation::RatersByPrompts, FriedmanOrientation::PromptsByRaters,
                 FriedmanOrientation::RatersByLevels}) {
    try {
      rep.friedman_all.emplace_back(o, friedman_test(friedman_grid(m, o, levels)));
    } catch (const Error&) {
      // orientation not computable on this matrix (e.g. fewer than 3 levels)
    }
  }
  try {
    rep.n_outliers = detect_outliers(m).size();
  } catch (const Error&) {
    rep.n_outliers = 0;  // some prompt has fewer than 3 ratings
  }
  return rep;
}

namespace detail {
inline json number_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

inline json to_json(const FriedmanResult& f) {
  return json{{"chi2", f.chi2},
              {"dof", f.dof},
              {"p", f.p},
              {"p_display", format_p(f.p)},
              {"n_blocks", f.n_blocks},
              {"n_dropped_blocks", f.n_dropped},
              {"tie_correction", f.tie_correction}};
}
}  // namespace detail

inline json to_json(const ReliabilityReport& r) {
  json j = json::object();
  j["cronbach_alpha"] = r.cronbach_alpha;
  j["friedman_orientation"] = to_string(r.friedman_orientation);
  j["friedman_chi2"] = r.friedman.chi2;
  j["friedman_dof"] = r.friedman.dof;
  j["friedman_p"] = r.friedman.p;
  j["friedman_p_display"] = format_p(r.friedman.p);
  j["icc2_single"] = detail::number_or_null(r.icc.single.icc);
  j["icc2_ci_low"] = detail::number_or_null(r.icc.single.ci_low);
  j["icc2_ci_high"] = detail::number_or_null(r.icc.single.ci_high);
  j["icc2_average"] = detail::number_or_null(r.icc.average.icc);
  j["icc2_average_ci_low"] = detail::number_or_null(r.icc.average.ci_low);
  j["icc2_average_ci_high"] = detail::number_or_null(r.icc.average.ci_high);
  j["n_raters"] = r.n_raters;
  j["n_subjects"] = r.n_subjects;
  j["n_complete_subjects"] = r.n_complete_subjects;
  j["n_outliers_flagged"] = r.n_outliers;
  json all = json::object();
  for (const auto& [o, f] : r.friedman_all) all[to_string(o)] = detail::to_json(f);
  j["friedman_all_orientations"] = all;
  return j;
}

inline std::string format_table(const ReliabilityReport& r) {
  char buf[256];
  std::string out;
  auto line = [&](const char* label, const std::string& value) {
    std::snprintf(buf, sizeof buf, "%-28s %s\n", label, value.c_str());
    out += buf;
  };
  auto num = [](double x, int digits = 4) {
    char b[64];
    std::snprintf(b, sizeof b, "%.*f", digits, x);
    return std::string(b);
  };
  line("raters x prompts", std::to_string(r.n_raters) + " x " + std::to_string(r.n_subjects));
  line("Cronbach's alpha", num(r.cronbach_alpha));
  line("Friedman orientation", to_string(r.friedman_orientation));
  line("Friedman chi2 (dof)", num(r.friedman.chi2, 2) + " (" + std::to_string(r.friedman.dof) + "), " +
                                  format_p(r.friedman.p));
  for (const auto& [o, f] : r.friedman_all) {
    const std::string label = std::string("  ") + to_string(o);
    line(label.c_str(), num(f.chi2, 2) + " (" + std::to_string(f.dof) + "), " + format_p(f.p));
  }
  line("ICC(2,1) [95% CI]", num(r.icc.single.icc) + " [" + num(r.icc.single.ci_low, 2) + ", " +
                                num(r.icc.single.ci_high, 2) + "]");
  line("ICC(2,k) [95% CI]", num(r.icc.average.icc) + " [" + num(r.icc.average.ci_low, 2) + ", " +
                                num(r.icc.average.ci_high, 2) + "]");
  line("outliers flagged (|z|>3)", std::to_string(r.n_outliers));
  return out;
}

}  // namespace stressprompt
