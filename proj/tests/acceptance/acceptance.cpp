// Acceptance suite: one PASS / FAIL / SKIP line per criterion.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "planted.hpp"
#include "stressprompt/cli.hpp"

using namespace stressprompt;
namespace fs = std::filesystem;

namespace {

const std::string kRoot = STRESSPROMPT_SOURCE_ROOT;
const std::string kDataset = kRoot + "/data/fixtures/stress_prompts.synthetic.jsonl";
const std::string kTask = kRoot + "/data/tasks/toy_recall.json";

enum class Verdict { Pass, Fail, Skip };

struct Outcome {
  Verdict verdict;
  std::string detail;
};

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// 1 -----------------------------------------------------------------------

Outcome aggregate_oracle() {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> prompts_d(1, 5), items_d(1, 7);
  std::uniform_real_distribution<double> score(0.0, 1.0);
  double worst = 0.0;
  for (int grid = 0; grid < 100; ++grid) {
    const int np = prompts_d(rng), ni = items_d(rng);
    oracle::Matrix s(static_cast<std::size_t>(np), std::vector<double>(static_cast<std::size_t>(ni)));
    std::vector<RunRecord> recs;
    for (int p = 0; p < np; ++p)
      for (int k = 0; k < ni; ++k) {
        // Half the grids use binary scores, half fractional ones.
        const double v = grid % 2 ? std::round(score(rng)) : score(rng);
        s[static_cast<std::size_t>(p)][static_cast<std::size_t>(k)] = v;
        RunRecord r;
        r.task = "t";
        r.condition = "level_5";
        r.prompt_id = "p" + std::to_string(p);
        r.item_index = static_cast<std::size_t>(k);
        r.score = v;
        recs.push_back(r);
      }
    const auto table = replay(recs);
    worst = std::max(worst, std::abs(table.rows.at(0).mean - oracle::two_loop_mean(s)));
  }
  return {worst <= 1e-12 ? Verdict::Pass : Verdict::Fail, "max |aggregate - two-loop| = " + fmt("%.3g", worst)};
}

// 2 -----------------------------------------------------------------------

AnnotationMatrix random_matrix(std::mt19937_64& rng, std::size_t raters, std::size_t prompts) {
  std::vector<std::string> r, p;
  for (std::size_t i = 0; i < raters; ++i) r.push_back("r" + std::to_string(i));
  for (std::size_t i = 0; i < prompts; ++i) p.push_back("p" + std::to_string(i));
  AnnotationMatrix m(r, p);
  std::uniform_int_distribution<int> level(1, 10);
  std::normal_distribution<double> noise(0.0, 1.5);
  for (std::size_t c = 0; c < prompts; ++c) {
    const int base = level(rng);
    for (std::size_t i = 0; i < raters; ++i) m.set(i, c, std::clamp(static_cast<int>(std::lround(base + noise(rng))), 1, 10));
  }
  return m;
}

RankGrid grid_from(const oracle::Matrix& blocks) {
  RankGrid g;
  g.blocks = blocks.size();
  g.treatments = blocks[0].size();
  for (const auto& b : blocks) g.values.insert(g.values.end(), b.begin(), b.end());
  return g;
}

Outcome statistics_oracles() {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> rows(2, 8), cols(3, 12);
  double alpha_err = 0.0, icc_err = 0.0, q_err = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto k = rows(rng), n = cols(rng);
    const auto m = random_matrix(rng, k, n);
    oracle::Matrix rp(k, std::vector<double>(n)), pr(n, std::vector<double>(k));
    for (std::size_t r = 0; r < k; ++r)
      for (std::size_t p = 0; p < n; ++p) rp[r][p] = pr[p][r] = m.at(r, p);
    alpha_err = std::max(alpha_err, std::abs(cronbach_alpha(m) - oracle::alpha_covariance(rp)));
    icc_err = std::max(icc_err, std::abs(icc2(m).icc - oracle::icc21(pr)));
    // Blocks are raters, treatments are prompts.
    q_err = std::max(q_err, std::abs(friedman_test(grid_from(rp)).chi2 - oracle::friedman_q(rp)));
  }
  // Unanimous ranking: Q = n (k - 1) exactly.
  bool unanimous = true;
  for (std::size_t n = 2; n <= 8; ++n)
    for (std::size_t k = 3; k <= 12; ++k) {
      oracle::Matrix blocks(n, std::vector<double>(k));
      for (auto& b : blocks)
        for (std::size_t j = 0; j < k; ++j) b[j] = static_cast<double>(j);
      unanimous = unanimous && friedman_test(grid_from(blocks)).chi2 == static_cast<double>(n * (k - 1));
    }
  // Monte-Carlo null: rejection rate at 0.05 for n = 30 blocks, k = 5.
  std::uniform_real_distribution<double> u(0, 1);
  std::size_t rejected = 0;
  const std::size_t runs = 10000;
  for (std::size_t run = 0; run < runs; ++run) {
    oracle::Matrix blocks(30, std::vector<double>(5));
    for (auto& b : blocks)
      for (auto& v : b) v = u(rng);
    rejected += friedman_test(grid_from(blocks)).p < 0.05 ? 1 : 0;
  }
  const double rate = static_cast<double>(rejected) / runs;
  const bool ok = alpha_err <= 1e-9 && icc_err <= 1e-9 && q_err <= 1e-9 && unanimous && std::abs(rate - 0.05) <= 0.012;
  return {ok ? Verdict::Pass : Verdict::Fail,
          "alpha " + fmt("%.2g", alpha_err) + ", icc " + fmt("%.2g", icc_err) + ", Q " + fmt("%.2g", q_err) +
              ", unanimous " + (unanimous ? "exact" : "WRONG") + ", null rejection " + fmt("%.4f", rate)};
}

// 3 -----------------------------------------------------------------------

Outcome reference_reliability() {
  fs::path path;
  if (const char* env = std::getenv("STRESSPROMPT_SUPPLEMENTARY_ANNOTATIONS"); env && *env) {
    path = env;
  } else {
    path = kRoot + "/data/supplementary/annotations.csv";
  }
  if (!fs::exists(path)) return {Verdict::Skip, "supplementary 20x100 annotation matrix not supplied (" + path.string() + ")"};
  const auto m = load_annotations(path);
  if (m.n_raters() != 20 || m.n_prompts() != 100) {
    return {Verdict::Fail, "expected a 20x100 matrix, got " + std::to_string(m.n_raters()) + "x" +
                               std::to_string(m.n_prompts())};
  }
  const auto rep = reliability_report(m, FriedmanOrientation::RatersByLevels, levels_from_matrix(m));
  const bool alpha_ok = std::abs(rep.cronbach_alpha - 0.9947) <= 0.0005;
  bool friedman_ok = false;
  std::string chis;
  for (const auto& [o, f] : rep.friedman_all) {
    chis += std::string(chis.empty() ? "" : " ") + to_string(o) + "=" + fmt("%.2f", f.chi2);
    friedman_ok = friedman_ok || (std::abs(f.chi2 - 283.20) <= 0.5 && f.p < 0.001);
  }
  bool icc_ok = false;
  for (const auto* r : {&rep.icc.single, &rep.icc.average}) {
    icc_ok = icc_ok || (r->icc >= 0.89 && r->icc <= 0.90 && std::abs(r->ci_low - 0.86) <= 0.01 &&
                        std::abs(r->ci_high - 0.92) <= 0.01);
  }
  return {alpha_ok && friedman_ok && icc_ok ? Verdict::Pass : Verdict::Fail,
          "alpha " + fmt("%.4f", rep.cronbach_alpha) + ", chi2 {" + chis + "}, ICC(2,1) " +
              fmt("%.3f", rep.icc.single.icc) + " [" + fmt("%.3f", rep.icc.single.ci_low) + ", " +
              fmt("%.3f", rep.icc.single.ci_high) + "], ICC(2,k) " + fmt("%.3f", rep.icc.average.icc) + " [" +
              fmt("%.3f", rep.icc.average.ci_low) + ", " + fmt("%.3f", rep.icc.average.ci_high) + "]"};
}

// 4 -----------------------------------------------------------------------

Outcome planted_recovery() {
  // 50 prompts per level: at 10 per level the upward bias of the sample top
  // eigenvalue alone can push a structureless layer past 2/D.
  const std::size_t per_level = 50;
  const double snr = 10.0;
  const auto cfg = planted::config_for_snr(4, snr, per_level);
  ToyModel model(cfg);
  const auto bank = collect(model, planted::random_word_partition(4, per_level), CaptureMode::PromptOnly);
  const auto v = fit_stress_vector(bank, cfg.plant_layer);
  double c = 0.0;
  for (std::size_t i = 0; i < v.v.size(); ++i) c += v.v[i] * model.plant_direction()[i];
  c /= cfg.plant_scale;
  const double uniform = 1.0 / static_cast<double>(cfg.dim);
  bool evr_ok = true;
  std::string evrs;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    if (l == cfg.plant_layer) continue;
    try {
      const double e = fit_stress_vector(bank, l).explained_variance_ratio;
      evr_ok = evr_ok && e <= 2.0 * uniform && e >= 0.5 * uniform;
      evrs += " L" + std::to_string(l) + "=" + fmt("%.3f", e);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Degenerate) throw;
      // Embedding layer: the final template token is shared by every prompt.
      evrs += " L" + std::to_string(l) + "=constant";
    }
  }
  return {std::abs(c) >= 0.99 && evr_ok ? Verdict::Pass : Verdict::Fail,
          "SNR " + fmt("%.0f", snr) + ", |cos(v,u)| " + fmt("%.5f", std::abs(c)) + ", unaffected EVR" + evrs +
              " (uniform " + fmt("%.3f", uniform) + ", band [" + fmt("%.4f", 0.5 * uniform) + ", " +
              fmt("%.3f", 2 * uniform) + "])"};
}

// 5 -----------------------------------------------------------------------

Outcome scanner_invariants() {
  double norm_err = 0.0, lin_err = 0.0, scale_err = 0.0;
  bool oriented = true;
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n01;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ToyModel model;
    const auto bank = collect(model, planted::random_word_partition(100 + seed, 3), CaptureMode::PromptOnly);
    for (std::size_t layer = 1; layer < bank.layers(); ++layer) {
      for (auto method : {FitMethod::Joint, FitMethod::Contrast}) {
        FitOptions o;
        o.method = method;
        const auto v = fit_stress_vector(bank, layer, o);
        double n2 = 0.0;
        for (double x : v.v) n2 += x * x;
        norm_err = std::max(norm_err, std::abs(std::sqrt(n2) - 1.0));
        const auto [low, high] = half_means(bank, v);
        oriented = oriented && high >= low;
        const auto& a = bank.levels.at(1).front();
        const auto& b = bank.levels.at(10).front();
        const auto sa = a.state(layer, a.tokens() - 1), sb = b.state(layer, b.tokens() - 1);
        std::vector<double> ha(sa.begin(), sa.end()), hb(sb.begin(), sb.end()), mix(ha.size()), scaled(ha.size());
        const double x = n01(rng), y = n01(rng), c = n01(rng) * 10;
        for (std::size_t i = 0; i < ha.size(); ++i) {
          mix[i] = x * ha[i] + y * hb[i];
          scaled[i] = c * ha[i];
        }
        const double s_a = stress_score(ha, v), s_b = stress_score(hb, v);
        lin_err = std::max(lin_err, std::abs(stress_score(mix, v) - (x * s_a + y * s_b)));
        scale_err = std::max(scale_err, std::abs(stress_score(scaled, v) - c * s_a));
      }
    }
  }
  const bool ok = oriented && norm_err <= 1e-9 && lin_err <= 1e-9 && scale_err <= 1e-9;
  return {ok ? Verdict::Pass : Verdict::Fail,
          std::string("20 banks, orientation ") + (oriented ? "holds" : "VIOLATED") + ", unit norm " +
              fmt("%.2g", norm_err) + ", linearity " + fmt("%.2g", lin_err) + ", scale " + fmt("%.2g", scale_err)};
}

// 6 -----------------------------------------------------------------------

Outcome inverted_u() {
  const auto records = load_dataset(kDataset);
  const auto part = partition_by_level(records);
  const std::vector<Task> tasks{load_task(kTask)};
  ToyModel model;
  const auto dir = fs::temp_directory_path() / "sp_acceptance_sweep";
  fs::remove_all(dir);
  RunLedger ledger(dir / "ledger.jsonl");
  SweepOptions so;
  so.config_hash = "acceptance";
  const auto table = sweep(model, tasks, part, {}, ledger, so);
  const int peak = table.argmax_level("toy_recall");

  const auto bank = collect(model, part, CaptureMode::PromptOnly);
  const auto layer = model.config().plant_layer;
  const std::vector<StressVector> vectors{fit_stress_vector(bank, layer)};
  const auto scan = level_scan(bank, vectors);
  std::vector<double> levels, scores;
  for (std::size_t c = 0; c < scan.cols(); ++c) {
    levels.push_back(static_cast<double>(condition_rank(scan.col_labels[c])));
    scores.push_back(scan.at(0, c));
  }
  const double rho = oracle::spearman(levels, scores);
  return {peak == 6 && rho >= 0.9 ? Verdict::Pass : Verdict::Fail,
          "argmax level " + std::to_string(peak) + ", level scan L" + std::to_string(layer) + " Spearman rho " +
              fmt("%.3f", rho)};
}

// 7 -----------------------------------------------------------------------

Outcome determinism() {
  std::vector<fs::path> roots{fs::temp_directory_path() / "sp_acceptance_run_a",
                              fs::temp_directory_path() / "sp_acceptance_run_b"};
  std::ostringstream sink;
  for (const auto& root : roots) {
    fs::remove_all(root);
    const auto o = root.string();
    auto run = [&](std::vector<std::string> args) {
      args.insert(args.end(), {"--output", o, "--seed", "0", "--timestamp", "2024-01-01T00:00:00Z"});
      const int code = cli::dispatch(args, sink, sink);
      if (code != 0) throw std::runtime_error("pipeline step failed: " + args[0] + "\n" + sink.str());
    };
    run({"sweep", "--dataset", kDataset, "--tasks", kTask});
    run({"capture", "--dataset", kDataset, "--bank", o + "/bank"});
    run({"fit", "--bank", o + "/bank"});
    run({"scan", "--bank", o + "/bank", "--vectors", o + "/vectors/stress_vectors.json", "--prompt", "sp001"});
  }
  std::size_t files = 0, ledgers = 0, tables = 0, vectors = 0, scans = 0;
  std::string mismatch;
  for (const auto& e : fs::recursive_directory_iterator(roots[0])) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), roots[0]);
    const auto s = rel.string();
    const bool ledger = s.ends_with("ledger.jsonl"), table = s.starts_with("tables/"),
               vector = s.starts_with("vectors/"), scan = s.starts_with("scans/");
    if (!(ledger || table || vector || scan)) continue;
    ++files;
    ledgers += ledger;
    tables += table;
    vectors += vector;
    scans += scan;
    if (slurp(e.path()) != slurp(roots[1] / rel)) mismatch += " " + s;
  }
  const bool ok = mismatch.empty() && ledgers && tables && vectors && scans;
  return {ok ? Verdict::Pass : Verdict::Fail,
          std::to_string(files) + " files compared (" + std::to_string(ledgers) + " ledger, " + std::to_string(tables) +
              " table, " + std::to_string(vectors) + " vector, " + std::to_string(scans) + " scan)" +
              (mismatch.empty() ? ", all identical" : ", differing:" + mismatch)};
}

// 8 -----------------------------------------------------------------------

Outcome dataset_contract() {
  const auto records = load_dataset(kDataset);
  const auto part = partition_by_level(records);
  std::map<std::string, int> seen;
  for (int l = 1; l <= kNumLevels; ++l)
    for (const auto& r : part.at(l)) seen[r.id] += 1;
  bool cover = seen.size() == records.size();
  for (const auto& [_, n] : seen) cover = cover && n == 1;
  for (const auto& r : records) cover = cover && seen.count(r.id);
  bool all_levels = true;
  for (int l = 1; l <= kNumLevels; ++l) all_levels = all_levels && part.count(l) > 0;

  const auto dir = fs::temp_directory_path() / "sp_acceptance_distribution";
  fs::remove_all(dir);
  const auto files = render_distribution(part, OutputLayout{dir});
  std::size_t total = 0;
  const auto rows = parse_csv(slurp(files.data));
  for (std::size_t i = 1; i < rows.size(); ++i) total += std::stoul(rows[i][1]);
  const bool ok = records.size() == 100 && cover && all_levels && total == 100;
  return {ok ? Verdict::Pass : Verdict::Fail,
          std::to_string(records.size()) + " records, disjoint cover " + (cover ? "yes" : "NO") +
              ", all ten levels " + (all_levels ? "present" : "NOT present") + ", distribution total " +
              std::to_string(total)};
}

}  // namespace

int main() {
  struct Criterion {
    int number;
    const char* name;
    double budget_s;  // 0 = no runtime bound
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "aggregate oracle equivalence", 1.0, aggregate_oracle},
      {2, "statistics oracles", 10.0, statistics_oracles},
      {3, "reliability on the supplied 20x100 matrix", 0.0, reference_reliability},
      {4, "planted-direction recovery", 30.0, planted_recovery},
      {5, "scanner invariants", 0.0, scanner_invariants},
      {6, "end-to-end inverted-U", 120.0, inverted_u},
      {7, "determinism", 0.0, determinism},
      {8, "dataset contract", 0.0, dataset_contract},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {Verdict::Fail, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (o.verdict == Verdict::Pass && c.budget_s > 0 && secs >= c.budget_s) {
      o.verdict = Verdict::Fail;
      o.detail += "; over the " + fmt("%.0f", c.budget_s) + " s budget";
    }
    const char* tag = o.verdict == Verdict::Pass ? "PASS" : o.verdict == Verdict::Fail ? "FAIL" : "SKIP";
    failures += o.verdict == Verdict::Fail ? 1 : 0;
    std::cout << tag << " " << c.number << " " << c.name << ": " << o.detail << " [" << fmt("%.2f", secs) << " s]"
              << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
