#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "stressprompt/dataset.hpp"
#include "stressprompt/fixture.hpp"

using namespace stressprompt;

namespace {

const std::string kRoot = STRESSPROMPT_SOURCE_ROOT;

std::vector<StressPromptRecord> parse(const std::string& text, std::vector<std::string>* warnings = nullptr) {
  std::istringstream in(text);
  return parse_dataset(in, "mem", warnings);
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorKind::Io;
}

}  // namespace

TEST(AssignStressLevel, ConstantRatings) {
  const std::vector<int> r{3, 3, 3, 3};
  EXPECT_EQ(assign_stress_level(r), 3);
}

TEST(AssignStressLevel, HalfRoundsUp) {
  // mean 7.5
  const std::vector<int> r{7, 8, 7, 8};
  EXPECT_EQ(assign_stress_level(r), 8);
}

TEST(AssignStressLevel, RoundsToNearest) {
  // mean 5/3 = 1.667
  const std::vector<int> r{1, 2, 2};
  EXPECT_EQ(assign_stress_level(r), 2);
  const std::vector<int> low{1, 1, 2};  // 1.333
  EXPECT_EQ(assign_stress_level(low), 1);
}

TEST(AssignStressLevel, EmptyIsAnError) {
  EXPECT_THROW(assign_stress_level(std::vector<int>{}), Error);
}

TEST(AssignStressLevel, OutOfRangeIsAnError) {
  EXPECT_THROW(assign_stress_level(std::vector<int>{3, 11}), Error);
  EXPECT_THROW(assign_stress_level(std::vector<int>{0, 3}), Error);
}

TEST(AssignStressLevel, PermutationInvariantOnRandomLists) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> score(1, 10), len(1, 25);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<int> r(static_cast<std::size_t>(len(rng)));
    for (auto& x : r) x = score(rng);
    const int level = assign_stress_level(r);
    std::shuffle(r.begin(), r.end(), rng);
    EXPECT_EQ(assign_stress_level(r), level);
    // Independent oracle: floor(mean + 0.5) in exact rational arithmetic.
    long sum = 0;
    for (int x : r) sum += x;
    const long n = static_cast<long>(r.size());
    EXPECT_EQ(level, static_cast<int>((2 * sum + n) / (2 * n)));
  }
}

TEST(LoadDataset, DerivesMissingLevel) {
  const auto recs = parse(R"({"id":"a","text":"t","framework":"StressCoping","ratings":[3,3,3,3]})");
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(recs[0].stress_level, 3);
}

TEST(LoadDataset, RatingOutOfRangeNamesTheRecord) {
  try {
    parse(R"({"id":"bad-one","text":"t","framework":"StressCoping","ratings":[3,11]})");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Validation);
    EXPECT_NE(std::string(e.what()).find("bad-one"), std::string::npos);
  }
}

TEST(LoadDataset, MalformedLineReportsLineNumber) {
  const std::string text =
      R"({"id":"a","text":"t","framework":"StressCoping","ratings":[3]})"
      "\n{not json\n";
  try {
    parse(text);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Parse);
    EXPECT_NE(std::string(e.what()).find(":2"), std::string::npos) << e.what();
  }
}

TEST(LoadDataset, DuplicateIdIsAValidationError) {
  const std::string line = R"({"id":"a","text":"t","framework":"StressCoping","ratings":[3]})";
  EXPECT_EQ(kind_of([&] { parse(line + "\n" + line + "\n"); }), ErrorKind::Validation);
}

TEST(LoadDataset, UnknownFrameworkAndEmptyText) {
  EXPECT_EQ(kind_of([] { parse(R"({"id":"a","text":"t","framework":"Other","ratings":[3]})"); }),
            ErrorKind::Validation);
  EXPECT_EQ(kind_of([] { parse(R"({"id":"a","text":"","framework":"StressCoping","ratings":[3]})"); }),
            ErrorKind::Validation);
}

TEST(LoadDataset, StoredLevelIsAuthoritativeWithWarning) {
  std::vector<std::string> warnings;
  const auto recs =
      parse(R"({"id":"a","text":"t","framework":"StressCoping","ratings":[3,3],"stress_level":4})", &warnings);
  EXPECT_EQ(recs[0].stress_level, 4);
  ASSERT_EQ(warnings.size(), 1u);
}

TEST(LoadDataset, SyntheticFixtureMatchesManifest) {
  const auto recs = load_dataset(kRoot + "/data/fixtures/stress_prompts.synthetic.jsonl");
  std::ifstream mf(kRoot + "/data/fixtures/manifest.json");
  const auto manifest = json::parse(mf);
  ASSERT_EQ(recs.size(), 100u);
  std::set<int> levels;
  for (const auto& r : recs) {
    EXPECT_EQ(r.ratings.size(), 20u);
    EXPECT_EQ(r.stress_level, manifest["levels"][r.id].get<int>()) << r.id;
    levels.insert(r.stress_level);
  }
  EXPECT_EQ(levels.size(), 10u);
}

TEST(LoadDataset, RoundTripIsByteIdentical) {
  std::ifstream in(kRoot + "/data/fixtures/stress_prompts.synthetic.jsonl", std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  const auto text = ss.str();
  EXPECT_EQ(serialize_dataset(parse(text)), text);
}

TEST(LoadDataset, RoundTripNormalizesFieldOrder) {
  const std::string shuffled =
      R"({"ratings":[2,3],"framework":"EffortRewardImbalance","text":"x y","id":"q"})"
      "\n";
  const auto once = serialize_dataset(parse(shuffled));
  EXPECT_EQ(serialize_dataset(parse(once)), once);
}

TEST(Outliers, IdenticalColumnHasNoFlags) {
  AnnotationMatrix m({"a", "b", "c", "d"}, {"p"});
  for (std::size_t r = 0; r < 4; ++r) m.set(r, 0, 5);
  EXPECT_TRUE(detect_outliers(m).empty());
}

TEST(Outliers, TenAmongFivesFollowsHandComputedZ) {
  // Column [5 x 9, 10]: mean 5.5, sample sd = sqrt(22.5/9) = 1.5811,
  // z = 4.5 / 1.5811 = 2.846 < 3, so nothing is flagged.
  AnnotationMatrix m({"r1", "r2", "r3", "r4", "r5", "r6", "r7", "r8", "r9", "r10"}, {"p"});
  for (std::size_t r = 0; r < 9; ++r) m.set(r, 0, 5);
  m.set(9, 0, 10);
  const double z = 4.5 / std::sqrt(22.5 / 9.0);
  EXPECT_NEAR(z, 2.846, 1e-3);
  EXPECT_TRUE(detect_outliers(m).empty());

  // Twenty raters: [5 x 19, 10] has mean 5.25, so z = 4.75 / sqrt(23.75/19) = 4.25 > 3.
  std::vector<std::string> ids;
  for (int i = 0; i < 20; ++i) ids.push_back("r" + std::to_string(i));
  AnnotationMatrix big(ids, {"p"});
  for (std::size_t r = 0; r < 19; ++r) big.set(r, 0, 5);
  big.set(19, 0, 10);
  const auto flags = detect_outliers(big);
  ASSERT_EQ(flags.size(), 1u);
  EXPECT_EQ(flags[0].rater, "r19");
  EXPECT_NEAR(flags[0].z, 4.75 / std::sqrt(23.75 / 19.0), 1e-12);
}

TEST(Outliers, FewerThanThreeRatersIsAnError) {
  AnnotationMatrix m({"a", "b"}, {"p"});
  m.set(0, 0, 1);
  m.set(1, 0, 2);
  EXPECT_THROW(detect_outliers(m), Error);
}

TEST(Outliers, FixtureFlagsExactlyThePlantedEntry) {
  const auto m = load_annotations(kRoot + "/data/fixtures/annotations.synthetic.csv");
  std::ifstream mf(kRoot + "/data/fixtures/manifest.json");
  const auto manifest = json::parse(mf);
  const auto flags = detect_outliers(m);
  ASSERT_EQ(flags.size(), 1u);
  EXPECT_EQ(flags[0].rater, manifest["planted_outlier"]["rater"].get<std::string>());
  EXPECT_EQ(flags[0].prompt, manifest["planted_outlier"]["prompt"].get<std::string>());
  EXPECT_GT(flags[0].z, 3.0);
}

TEST(Outliers, FlaggingIsIdempotent) {
  const auto fx = generate_fixture();
  const auto first = detect_outliers(fx.annotations);
  const auto second = detect_outliers(fx.annotations);
  ASSERT_EQ(first.size(), second.size());
  for (std::size_t i = 0; i < first.size(); ++i) {
    EXPECT_EQ(first[i].rater, second[i].rater);
    EXPECT_EQ(first[i].prompt, second[i].prompt);
    EXPECT_EQ(first[i].z, second[i].z);
  }
}

TEST(Outliers, ExclusionRemovesOnlyFlaggedEntries) {
  const auto fx = generate_fixture();
  const auto flags = detect_outliers(fx.annotations);
  const auto cleaned = exclude_outliers(fx.annotations, flags);
  std::size_t missing = 0;
  for (std::size_t r = 0; r < cleaned.n_raters(); ++r)
    for (std::size_t p = 0; p < cleaned.n_prompts(); ++p) missing += cleaned.missing(r, p) ? 1 : 0;
  EXPECT_EQ(missing, flags.size());
}

TEST(Annotations, CsvRoundTripAndMissingCells) {
  const std::string text = "rater,p1,p2,p3\nr1,1,,3\nr2,4,5,6\n";
  std::istringstream in(text);
  const auto m = parse_annotations(in, "mem");
  EXPECT_EQ(m.n_raters(), 2u);
  EXPECT_EQ(m.n_prompts(), 3u);
  EXPECT_TRUE(m.missing(0, 1));
  EXPECT_EQ(m.at(1, 2), 6);
  EXPECT_EQ(serialize_annotations(m), text);
}

TEST(Annotations, OutOfRangeCellIsAValidationError) {
  std::istringstream in("rater,p1\nr1,12\n");
  EXPECT_EQ(kind_of([&] { parse_annotations(in, "mem"); }), ErrorKind::Validation);
}

TEST(Annotations, FixtureShape) {
  const auto m = load_annotations(kRoot + "/data/fixtures/annotations.synthetic.csv");
  EXPECT_EQ(m.n_raters(), 20u);
  EXPECT_EQ(m.n_prompts(), 100u);
  EXPECT_TRUE(m.complete());
}

TEST(Partition, SmallExample) {
  std::vector<StressPromptRecord> recs(3);
  recs[0].id = "a";
  recs[0].stress_level = 1;
  recs[1].id = "b";
  recs[1].stress_level = 1;
  recs[2].id = "c";
  recs[2].stress_level = 5;
  const auto part = partition_by_level(recs);
  EXPECT_EQ(part.count(1), 2u);
  EXPECT_EQ(part.count(5), 1u);
  EXPECT_EQ(part.at(1)[0].id, "a");
  EXPECT_EQ(part.at(1)[1].id, "b");
  EXPECT_EQ(part.total(), 3u);
}

TEST(Partition, EmptyInput) {
  const auto part = partition_by_level(std::vector<StressPromptRecord>{});
  for (int l = 1; l <= 10; ++l) EXPECT_EQ(part.count(l), 0u);
  EXPECT_TRUE(part.empty());
}

TEST(Partition, DisjointCoverOnFixture) {
  const auto fx = generate_fixture();
  const auto part = partition_by_level(fx.records);
  std::set<std::string> seen;
  std::size_t total = 0;
  for (int l = 1; l <= 10; ++l) {
    EXPECT_EQ(part.count(l), fx.manifest["level_counts"][std::to_string(l)].get<std::size_t>());
    for (const auto& r : part.at(l)) {
      EXPECT_EQ(r.stress_level, l);
      EXPECT_TRUE(seen.insert(r.id).second) << r.id << " in two sets";
    }
    total += part.count(l);
  }
  EXPECT_EQ(total, fx.records.size());
}

TEST(Fixture, DeterministicInSeed) {
  const auto a = generate_fixture();
  const auto b = generate_fixture();
  EXPECT_EQ(serialize_dataset(a.records), serialize_dataset(b.records));
  EXPECT_EQ(serialize_annotations(a.annotations), serialize_annotations(b.annotations));
  FixtureOptions other;
  other.seed = 99;
  EXPECT_NE(serialize_annotations(generate_fixture(other).annotations), serialize_annotations(a.annotations));
}

TEST(Fixture, CommittedFilesMatchGenerator) {
  const auto fx = generate_fixture();
  std::ifstream in(kRoot + "/data/fixtures/annotations.synthetic.csv", std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  EXPECT_EQ(ss.str(), serialize_annotations(fx.annotations));
}

TEST(Fixture, LevelsFromMatrixAgreeWithRecords) {
  const auto fx = generate_fixture();
  const auto levels = levels_from_matrix(fx.annotations);
  for (const auto& r : fx.records) EXPECT_EQ(levels.at(r.id), r.stress_level);
}
