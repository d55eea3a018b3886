#include "olive/attack.hpp"

#include <algorithm>
#include <map>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "olive/flcore.hpp"
#include "olive/rng.hpp"

namespace {

using olive::AttackMethod;
using olive::AttackOptions;
using olive::RoundLeak;
using olive::TeacherTable;

TEST(JaccardTest, KnownValues) {
  const std::vector<uint32_t> a = {1, 2, 3};
  const std::vector<uint32_t> b = {2, 3, 4};
  EXPECT_DOUBLE_EQ(olive::jaccard(a, b), 0.5);
  EXPECT_DOUBLE_EQ(olive::jaccard(a, a), 1.0);
  const std::vector<uint32_t> c = {7, 9};
  EXPECT_DOUBLE_EQ(olive::jaccard(a, c), 0.0);
  EXPECT_DOUBLE_EQ(olive::jaccard({}, {}), 0.0);
  EXPECT_DOUBLE_EQ(olive::jaccard(a, {}), 0.0);
}

TEST(BucketizeTest, CoarsensAndDeduplicates) {
  const std::vector<uint32_t> indices = {0, 1, 5, 8, 9};
  EXPECT_EQ(olive::bucketize(indices, 4), (std::vector<uint32_t>{0, 1, 2}));
  EXPECT_EQ(olive::bucketize(indices, 1), indices);
  EXPECT_EQ(olive::bucketize({}, 4), (std::vector<uint32_t>{}));
}

TEST(AttackMethodTest, NamesRoundTrip) {
  EXPECT_EQ(olive::parse_attack_method("jac"), AttackMethod::kJac);
  EXPECT_EQ(olive::parse_attack_method("nn"), AttackMethod::kNn);
  EXPECT_EQ(olive::parse_attack_method("nn-single"), AttackMethod::kNnSingle);
  EXPECT_THROW(olive::parse_attack_method("knn"), std::invalid_argument);
  EXPECT_STREQ(olive::attack_method_name(AttackMethod::kNnSingle), "nn-single");
}

class TeacherBuildTest : public ::testing::Test {
 protected:
  void SetUp() override {
    olive::Dataset data = olive::synth_clusters(4, 8, 30, 4.0, 1.0, 21);
    split_ = olive::build_split(std::move(data), 6, 1, 8, 8, 4, 22);
    shape_ = olive::MlpShape{8, 4, 4};
    olive::Rng rng(olive::derive_seed(7, olive::streams::kModelInit));
    entering_.push_back(olive::init_params(shape_, rng));
  }

  olive::FlSplit split_;
  olive::MlpShape shape_;
  std::vector<std::vector<float>> entering_;
};

TEST_F(TeacherBuildTest, SetsHaveExactlyKSortedIndices) {
  const TeacherTable table =
      olive::build_teachers(shape_, entering_, split_.pool, split_.label_shards, 10);
  EXPECT_EQ(table.rounds(), 1u);
  EXPECT_EQ(table.labels, 4u);
  EXPECT_EQ(table.k, 10u);
  for (const auto& set : table.sets[0]) {
    ASSERT_EQ(set.size(), 10u);
    EXPECT_TRUE(std::is_sorted(set.begin(), set.end()));
    for (const uint32_t idx : set) EXPECT_LT(idx, shape_.param_count());
  }
}

TEST_F(TeacherBuildTest, DeterministicAndFullCoverageAtAlphaOne) {
  const TeacherTable a =
      olive::build_teachers(shape_, entering_, split_.pool, split_.label_shards, 10);
  const TeacherTable b =
      olive::build_teachers(shape_, entering_, split_.pool, split_.label_shards, 10);
  EXPECT_EQ(a.sets, b.sets);

  const uint64_t d = shape_.param_count();
  const TeacherTable full =
      olive::build_teachers(shape_, entering_, split_.pool, split_.label_shards, d);
  for (const auto& set : full.sets[0]) {
    ASSERT_EQ(set.size(), d);
    for (uint32_t i = 0; i < d; ++i) EXPECT_EQ(set[i], i);
  }
}

TEST_F(TeacherBuildTest, EmptyShardIsAnError) {
  auto shards = split_.label_shards;
  shards[2].clear();
  try {
    olive::build_teachers(shape_, entering_, split_.pool, shards, 10);
    FAIL() << "expected runtime_error";
  } catch (const std::runtime_error& e) {
    EXPECT_STREQ(e.what(), "missing teacher data for label");
  }
}

// Hand-built teacher table: 3 rounds, 4 labels, d = 64, disjoint 8-index
// blocks per label so the expected scores are easy to reason about.
TeacherTable toy_teachers(uint32_t rounds = 1, uint32_t labels = 4) {
  TeacherTable table;
  table.k = 8;
  table.labels = labels;
  table.sets.resize(rounds);
  for (uint32_t t = 0; t < rounds; ++t) {
    table.sets[t].resize(labels);
    for (uint32_t l = 0; l < labels; ++l) {
      for (uint32_t i = 0; i < 8; ++i) table.sets[t][l].push_back(l * 8 + i);
    }
  }
  return table;
}

TEST(ScoreJacTest, ExactTeacherMatchScoresOne) {
  const TeacherTable table = toy_teachers();
  std::map<uint32_t, std::vector<uint32_t>> rounds;
  rounds[1] = table.sets[0][2];
  const auto scores = olive::score_jac(rounds, table, 1, false);
  ASSERT_EQ(scores.size(), 4u);
  EXPECT_DOUBLE_EQ(scores[2], 1.0);
  EXPECT_DOUBLE_EQ(scores[0], 0.0);
  EXPECT_DOUBLE_EQ(scores[1], 0.0);
  EXPECT_DOUBLE_EQ(scores[3], 0.0);
}

TEST(ScoreJacTest, PairModeKeepsRoundsApart) {
  // The user's round-1 indices match label 0's round-1 teacher and round-2
  // indices match label 0's round-2 teacher; pairing by round keeps the score
  // at 1.0 even though the sets differ between rounds.
  TeacherTable table = toy_teachers(2);
  table.sets[1][0] = {32, 33, 34, 35, 36, 37, 38, 39};
  std::map<uint32_t, std::vector<uint32_t>> rounds;
  rounds[1] = table.sets[0][0];
  rounds[2] = table.sets[1][0];
  EXPECT_DOUBLE_EQ(olive::score_jac(rounds, table, 1, false)[0], 1.0);
  // Union mode flattens rounds; still 1.0 here since the union matches too.
  EXPECT_DOUBLE_EQ(olive::score_jac(rounds, table, 1, true)[0], 1.0);
}

TEST(ScoreJacTest, HalfOverlapScoresAThird) {
  const TeacherTable table = toy_teachers();
  std::map<uint32_t, std::vector<uint32_t>> rounds;
  rounds[1] = {4, 5, 6, 7, 8, 9, 10, 11};  // half in label 0, half in label 1
  const auto scores = olive::score_jac(rounds, table, 1, false);
  EXPECT_DOUBLE_EQ(scores[0], 4.0 / 12.0);
  EXPECT_DOUBLE_EQ(scores[1], 4.0 / 12.0);
  EXPECT_DOUBLE_EQ(scores[2], 0.0);
}

TEST(ScoreJacTest, CachelineBucketingAppliesToBothSides) {
  const TeacherTable table = toy_teachers();
  std::map<uint32_t, std::vector<uint32_t>> rounds;
  // Buckets of width 8 collapse each label's block to one bucket id.
  rounds[1] = olive::bucketize(table.sets[0][3], 8);
  EXPECT_EQ(rounds[1], (std::vector<uint32_t>{3}));
  const auto scores = olive::score_jac(rounds, table, 8, false);
  EXPECT_DOUBLE_EQ(scores[3], 1.0);
  EXPECT_DOUBLE_EQ(scores[0], 0.0);
}

TEST(ScoreJacTest, SharedIndexNeverLowersTheScore) {
  olive::Rng rng(99);
  const TeacherTable base_table = toy_teachers();
  for (int trial = 0; trial < 200; ++trial) {
    TeacherTable table = base_table;
    std::map<uint32_t, std::vector<uint32_t>> rounds;
    std::vector<uint32_t> leak;
    for (uint32_t i = 0; i < 12; ++i) {
      if (rng.next_double() < 0.4) leak.push_back(uint32_t(rng.bounded(64)));
    }
    std::sort(leak.begin(), leak.end());
    leak.erase(std::unique(leak.begin(), leak.end()), leak.end());
    rounds[1] = leak;
    const uint32_t l = uint32_t(rng.bounded(4));
    const double before = olive::score_jac(rounds, table, 1, false)[l];

    // Add one fresh index to both the leak and that label's teacher.
    uint32_t fresh = 0;
    while (std::binary_search(leak.begin(), leak.end(), fresh) ||
           std::binary_search(table.sets[0][l].begin(), table.sets[0][l].end(), fresh)) {
      ++fresh;
    }
    leak.push_back(fresh);
    std::sort(leak.begin(), leak.end());
    table.sets[0][l].push_back(fresh);
    std::sort(table.sets[0][l].begin(), table.sets[0][l].end());
    rounds[1] = leak;
    const double after = olive::score_jac(rounds, table, 1, false)[l];
    EXPECT_GE(after, before);
  }
}

TEST(ExtractLabelsTest, ClusteringFindsTheUpperGroup) {
  const std::vector<double> scores = {0.9, 0.85, 0.1, 0.05};
  const auto pred = olive::extract_labels(scores, 0);
  EXPECT_EQ(pred.labels, (std::vector<uint32_t>{0, 1}));
  EXPECT_FALSE(pred.degenerate);
}

TEST(ExtractLabelsTest, KnownCountTakesTopScores) {
  const std::vector<double> scores = {0.2, 0.9, 0.5, 0.8};
  EXPECT_EQ(olive::extract_labels(scores, 1).labels, (std::vector<uint32_t>{1}));
  EXPECT_EQ(olive::extract_labels(scores, 2).labels, (std::vector<uint32_t>{1, 3}));
  EXPECT_EQ(olive::extract_labels(scores, 9).labels, (std::vector<uint32_t>{0, 1, 2, 3}));
  // Ties fall to the lower label.
  const std::vector<double> tied = {0.5, 0.9, 0.5, 0.1};
  EXPECT_EQ(olive::extract_labels(tied, 2).labels, (std::vector<uint32_t>{0, 1}));
}

TEST(ExtractLabelsTest, AllEqualScoresDegenerate) {
  const std::vector<double> scores = {0.5, 0.5, 0.5};
  const auto pred = olive::extract_labels(scores, 0);
  EXPECT_TRUE(pred.degenerate);
  EXPECT_EQ(pred.labels, (std::vector<uint32_t>{0}));
  EXPECT_THROW(olive::extract_labels({}, 0), std::invalid_argument);
}

TEST(NnScorerTest, RecoversItsOwnTrainingSets) {
  const TeacherTable table = toy_teachers(1, 6);
  std::vector<RoundLeak> leaks;
  std::vector<std::vector<uint32_t>> truth(6);
  for (uint32_t l = 0; l < 6; ++l) {
    leaks.push_back({1, l, table.sets[0][l]});
    truth[l] = {l};
  }
  AttackOptions opt;
  opt.method = AttackMethod::kNn;
  opt.known_count = 1;
  opt.seed = 3;
  const auto report = olive::evaluate_attack(leaks, table, truth, 64, opt);
  EXPECT_GE(report.top1_acc, 0.9);
  EXPECT_GE(report.all_acc, 0.9);
}

TEST(NnScorerTest, SingleVariantConcatenatesRounds) {
  const TeacherTable table = toy_teachers(3, 4);
  std::vector<RoundLeak> leaks;
  std::vector<std::vector<uint32_t>> truth(4);
  for (uint32_t l = 0; l < 4; ++l) {
    // Observe only rounds 1 and 3; round 2's block stays zero.
    leaks.push_back({1, l, table.sets[0][l]});
    leaks.push_back({3, l, table.sets[2][l]});
    truth[l] = {l};
  }
  AttackOptions opt;
  opt.method = AttackMethod::kNnSingle;
  opt.known_count = 1;
  opt.seed = 4;
  const auto report = olive::evaluate_attack(leaks, table, truth, 64, opt);
  EXPECT_GE(report.top1_acc, 0.9);
}

TEST(NnScorerTest, ZeroInputScoresNearUniform) {
  const TeacherTable table = toy_teachers(1, 6);
  AttackOptions opt;
  opt.method = AttackMethod::kNn;
  opt.seed = 5;
  const olive::NnScorer scorer = olive::NnScorer::fit(table, 64, opt);
  std::map<uint32_t, std::vector<uint32_t>> rounds;
  rounds[1] = {};
  const auto scores = scorer.score(rounds);
  const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
  EXPECT_LT(*hi - *lo, 0.5);
}

TEST(EvaluateAttackTest, ErrorsAreSpecific) {
  const TeacherTable table = toy_teachers();
  const std::vector<std::vector<uint32_t>> truth(4, std::vector<uint32_t>{0});
  AttackOptions opt;
  try {
    olive::evaluate_attack({}, table, truth, 64, opt);
    FAIL() << "expected runtime_error";
  } catch (const std::runtime_error& e) {
    EXPECT_STREQ(e.what(), "user never observed");
  }

  std::vector<RoundLeak> late = {{5, 0, {1, 2}}};
  try {
    olive::evaluate_attack(late, table, truth, 64, opt);
    FAIL() << "expected runtime_error";
  } catch (const std::runtime_error& e) {
    EXPECT_STREQ(e.what(), "missing model for round 5");
  }

  std::vector<RoundLeak> stranger = {{1, 9, {1, 2}}};
  EXPECT_THROW(olive::evaluate_attack(stranger, table, truth, 64, opt), std::invalid_argument);
}

TEST(EvaluateAttackTest, PerfectPredictionsScorePerfectly) {
  const TeacherTable table = toy_teachers();
  std::vector<RoundLeak> leaks;
  std::vector<std::vector<uint32_t>> truth(4);
  for (uint32_t l = 0; l < 4; ++l) {
    leaks.push_back({1, l, table.sets[0][l]});
    truth[l] = {l};
  }
  AttackOptions opt;
  opt.known_count = 1;
  const auto report = olive::evaluate_attack(leaks, table, truth, 64, opt);
  EXPECT_DOUBLE_EQ(report.all_acc, 1.0);
  EXPECT_DOUBLE_EQ(report.top1_acc, 1.0);
  ASSERT_EQ(report.rows.size(), 4u);
  for (const auto& row : report.rows) {
    EXPECT_EQ(row.predicted, row.true_labels);
    EXPECT_EQ(row.top1, row.user);
  }
}

TEST(EvaluateAttackTest, KnownCountFixesPredictionSize) {
  const TeacherTable table = toy_teachers();
  std::vector<RoundLeak> leaks = {{1, 0, {0, 1, 2, 8, 9}}, {1, 1, {8, 9, 16, 17, 18}}};
  const std::vector<std::vector<uint32_t>> truth(4, std::vector<uint32_t>{0, 1});
  AttackOptions opt;
  opt.known_count = 2;
  const auto report = olive::evaluate_attack(leaks, table, truth, 64, opt);
  for (const auto& row : report.rows) EXPECT_EQ(row.predicted.size(), 2u);
}

TEST(EvaluateAttackTest, TopOneCountsContainment) {
  // Prediction set is wrong ({0} vs {0, 1} needs both) but the top label is
  // contained, so top1 counts and all does not.
  const TeacherTable table = toy_teachers();
  std::vector<RoundLeak> leaks = {{1, 0, table.sets[0][0]}};
  const std::vector<std::vector<uint32_t>> truth = {{0, 1}};
  AttackOptions opt;
  opt.known_count = 1;
  const auto report = olive::evaluate_attack(leaks, table, truth, 64, opt);
  EXPECT_DOUBLE_EQ(report.all_acc, 0.0);
  EXPECT_DOUBLE_EQ(report.top1_acc, 1.0);
}

TEST(AttackCsvTest, GoldenOutput) {
  olive::AttackReport report;
  report.method = AttackMethod::kJac;
  olive::AttackRow row;
  row.user = 3;
  row.predicted = {1, 4};
  row.top1 = 4;
  row.true_labels = {1, 4};
  report.rows.push_back(row);
  row.user = 7;
  row.predicted = {0};
  row.top1 = 0;
  row.true_labels = {2, 5};
  report.rows.push_back(row);
  std::ostringstream out;
  olive::write_attack_csv(out, report);
  EXPECT_EQ(out.str(),
            "user,method,predicted_labels,top1,true_labels\n"
            "3,jac,1;4,4,1;4\n"
            "7,jac,0,0,2;5\n");
}

// End-to-end through the simulator: single-label clients on well-separated
// synthetic clusters; the scores for a client's true label should dominate.
TEST(AttackEndToEndTest, JaccardRanksTrueLabelsFirst) {
  olive::FlConfig cfg;
  cfg.n_users = 16;
  cfg.q = 0.6;
  cfg.rounds = 2;
  cfg.alpha = 0.1;
  cfg.sigma = 0.5;
  cfg.clip = 1.0;
  cfg.seed = 12;
  cfg.dataset.labels = 4;
  cfg.dataset.input_dim = 12;
  cfg.dataset.labels_per_user = 1;
  cfg.dataset.samples_per_client = 16;
  cfg.dataset.pool_per_label = 64;
  cfg.dataset.teacher_per_label = 16;
  cfg.dataset.test_per_label = 8;
  cfg.dataset.separation = 5.0;
  cfg.dataset.noise = 0.8;
  cfg.model.hidden = 6;
  const olive::TrainResult result = olive::train(cfg);
  ASSERT_FALSE(result.leaks.empty());

  const uint64_t k = olive::sparsity_k(cfg.alpha, result.shape.param_count());
  const TeacherTable teachers = olive::build_teachers(
      result.shape, result.entering, result.split.pool, result.split.label_shards, k);

  std::vector<std::vector<uint32_t>> truth(cfg.n_users);
  for (uint32_t u = 0; u < cfg.n_users; ++u) truth[u] = result.split.clients[u].labels;

  AttackOptions opt;
  opt.known_count = 1;
  const auto report =
      olive::evaluate_attack(result.leaks, teachers, truth, result.shape.param_count(), opt);
  EXPECT_GT(report.top1_acc, 0.5);  // chance is 0.25
}

}  // namespace
