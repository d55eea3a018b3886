#include "olive/aggregate.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <vector>

#include <gtest/gtest.h>

#include "olive/rng.hpp"
#include "olive/synth.hpp"
#include "support/checks.hpp"
#include "support/reference.hpp"

namespace {

using namespace olive;
using olivetest::vectors_equal;
using olivetest::vectors_near;

// Two clients, two entries each, four coordinates; both clients touch
// coordinate 2 so the duplicate-merge path is exercised.
AggregateInstance small_instance() {
  const std::vector<SparseGradient> clients = {
      {{{0, 1.0f}, {2, 0.5f}}},
      {{{2, 0.25f}, {3, 1.0f}}},
  };
  return pack_instance(clients, 4);
}

const DenseVector kSmallExpected = {1.0f, 0.0f, 0.75f, 1.0f};

TEST(Oracle, AgreesWithHandComputedSum) {
  EXPECT_TRUE(vectors_equal(oliveref::scatter_add(small_instance()), kSmallExpected));
}

TEST(LinearAggregate, MatchesOracleBitwise) {
  Tracer off(Tracer::Mode::kOff);
  EXPECT_TRUE(vectors_equal(linear_aggregate(small_instance(), off), kSmallExpected));
}

TEST(LinearAggregate, TraceLeaksEveryCoordinate) {
  const AggregateInstance inst = small_instance();
  Tracer tracer;
  linear_aggregate(inst, tracer);
  EXPECT_EQ(tracer.total_events(), 3 * inst.n * inst.k);
  const auto leaked = leaked_indices(tracer.take(), {inst.n, inst.k, inst.d});
  EXPECT_EQ(leaked[0], (std::vector<uint64_t>{0, 2}));
  EXPECT_EQ(leaked[1], (std::vector<uint64_t>{2, 3}));
}

TEST(BaselineAggregate, MatchesOracleBitwiseAcrossCachelineWidths) {
  const AggregateInstance inst = small_instance();
  Tracer off(Tracer::Mode::kOff);
  for (const uint64_t c : {1u, 2u, 3u, 4u, 8u}) {
    EXPECT_TRUE(vectors_equal(baseline_aggregate(inst, c, off), kSmallExpected))
        << "c=" << c;
  }
}

TEST(BaselineAggregate, SingleEntrySweepTouchesEveryCell) {
  const std::vector<SparseGradient> clients = {{{{2, 1.5f}}}};
  const AggregateInstance inst = pack_instance(clients, 4);
  Tracer tracer;
  baseline_aggregate(inst, 1, tracer);
  const std::vector<AccessEvent> expected = {
      {kRegionInput, MemOp::kRead, 0},      {kRegionAggregate, MemOp::kRead, 0},
      {kRegionAggregate, MemOp::kWrite, 0}, {kRegionAggregate, MemOp::kRead, 1},
      {kRegionAggregate, MemOp::kWrite, 1}, {kRegionAggregate, MemOp::kRead, 2},
      {kRegionAggregate, MemOp::kWrite, 2}, {kRegionAggregate, MemOp::kRead, 3},
      {kRegionAggregate, MemOp::kWrite, 3},
  };
  EXPECT_EQ(tracer.events(), expected);
}

TEST(BaselineAggregate, EventCountIsPaddedSweepFormula) {
  Rng rng(3);
  for (const uint64_t c : {1u, 3u, 8u, 16u}) {
    const AggregateInstance inst = random_instance(3, 4, 10, rng);
    Tracer tracer(Tracer::Mode::kCount);
    baseline_aggregate(inst, c, tracer);
    const uint64_t sweep = (inst.d + c - 1) / c;
    EXPECT_EQ(tracer.total_events(), inst.n * inst.k * (1 + 2 * sweep)) << "c=" << c;
  }
}

// The whole point of the padding: at cacheline granularity, entries with
// different residues must produce identical bucket sequences even when the
// width does not divide d.
TEST(BaselineAggregate, BucketTraceIsInputIndependent) {
  Rng rng(17);
  for (const uint64_t c : {1u, 3u, 8u}) {
    Tracer ta, tb;
    baseline_aggregate(random_instance(4, 3, 10, rng), c, ta);
    baseline_aggregate(random_instance(4, 3, 10, rng), c, tb);
    EXPECT_TRUE(trace_equal(ta.take(c), tb.take(c))) << "c=" << c;
  }
}

TEST(FoldDuplicates, CollapsesRunsIntoLastCell) {
  std::vector<CtWord> cells = {pack_cell(0, 1.0f), pack_cell(0, 2.0f), pack_cell(1, 4.0f),
                               pack_cell(kSentinelIndex, 0.0f)};
  Tracer tracer;
  detail::fold_duplicates(cells, kRegionWork, tracer);
  EXPECT_TRUE(is_sentinel(cells[0]));
  EXPECT_EQ(cell_index(cells[1]), 0u);
  EXPECT_EQ(cell_value(cells[1]), 3.0f);
  EXPECT_EQ(cell_index(cells[2]), 1u);
  EXPECT_EQ(cell_value(cells[2]), 4.0f);
  EXPECT_TRUE(is_sentinel(cells[3]));
  // Fixed pass shape: read 0, then (read p, write p-1) pairs, final write.
  EXPECT_EQ(tracer.total_events(), 2 * cells.size());
}

TEST(AdvancedAggregate, MatchesOracleWithinTolerance) {
  Tracer off(Tracer::Mode::kOff);
  EXPECT_TRUE(vectors_near(advanced_aggregate(small_instance(), off), kSmallExpected));
}

TEST(AdvancedAggregate, TraceDependsOnlyOnShape) {
  Rng rng(23);
  Tracer ta, tb;
  advanced_aggregate(random_instance(4, 3, 17, rng), ta);
  advanced_aggregate(random_instance(4, 3, 17, rng), tb);
  EXPECT_TRUE(trace_equal(ta.take(), tb.take()));
}

uint64_t advanced_expected_events(uint64_t n, uint64_t k, uint64_t d) {
  const uint64_t m = std::bit_ceil(n * k + d);
  return n * k + 3 * m + 8 * comparator_count(m) + 2 * d;
}

TEST(AdvancedAggregate, EventCountClosedForm) {
  Rng rng(29);
  for (const auto& [n, k, d] : std::vector<std::array<uint64_t, 3>>{
           {1, 1, 1}, {2, 2, 4}, {4, 3, 17}, {8, 5, 64}}) {
    Tracer tracer(Tracer::Mode::kCount);
    advanced_aggregate(random_instance(n, k, d, rng), tracer);
    EXPECT_EQ(tracer.total_events(), advanced_expected_events(n, k, d))
        << n << "," << k << "," << d;
  }
}

TEST(GroupedAggregate, FullGroupIsBitwiseIdenticalToAdvanced) {
  Rng rng(31);
  const AggregateInstance inst = random_instance(8, 4, 33, rng);
  Tracer t_adv, t_grp;
  const DenseVector adv = advanced_aggregate(inst, t_adv);
  const DenseVector grp = grouped_advanced_aggregate(inst, inst.n, t_grp);
  EXPECT_TRUE(vectors_equal(grp, adv));
  EXPECT_TRUE(trace_equal(t_grp.take(), t_adv.take()));
}

TEST(GroupedAggregate, MatchesOracleForAllGroupSizes) {
  Rng rng(37);
  const AggregateInstance inst = random_instance(8, 4, 33, rng);
  const DenseVector expected = oliveref::scatter_add(inst);
  Tracer off(Tracer::Mode::kOff);
  for (const uint64_t h : {1u, 2u, 3u, 5u, 8u, 20u}) {
    EXPECT_TRUE(vectors_near(grouped_advanced_aggregate(inst, h, off), expected))
        << "h=" << h;
  }
}

TEST(GroupedAggregate, TraceDependsOnlyOnShapeAndGroupSize) {
  Rng rng(41);
  Tracer ta, tb;
  grouped_advanced_aggregate(random_instance(8, 3, 21, rng), 3, ta);
  grouped_advanced_aggregate(random_instance(8, 3, 21, rng), 3, tb);
  EXPECT_TRUE(trace_equal(ta.take(), tb.take()));
}

TEST(GroupedAggregate, RejectsZeroGroupSize) {
  Tracer off(Tracer::Mode::kOff);
  EXPECT_THROW(
      {
        try {
          grouped_advanced_aggregate(small_instance(), 0, off);
        } catch (const std::invalid_argument& e) {
          EXPECT_STREQ(e.what(), "group size must be positive");
          throw;
        }
      },
      std::invalid_argument);
}

TEST(AllAggregators, AgreeWithOracleOnRandomInstances) {
  Rng rng(43);
  Tracer off(Tracer::Mode::kOff);
  for (int round = 0; round < 60; ++round) {
    const uint64_t n = 1 + rng.bounded(16);
    const uint64_t d = 1 + rng.bounded(96);
    const uint64_t k = 1 + rng.bounded(std::min<uint64_t>(d, 16));
    const AggregateInstance inst = random_instance(n, k, d, rng);
    const DenseVector expected = oliveref::scatter_add(inst);
    EXPECT_TRUE(vectors_equal(linear_aggregate(inst, off), expected)) << "round " << round;
    EXPECT_TRUE(vectors_equal(baseline_aggregate(inst, 1 + rng.bounded(8), off), expected))
        << "round " << round;
    EXPECT_TRUE(vectors_near(advanced_aggregate(inst, off), expected)) << "round " << round;
    EXPECT_TRUE(
        vectors_near(grouped_advanced_aggregate(inst, 1 + rng.bounded(n), off), expected))
        << "round " << round;
  }
}

TEST(SentinelCells, DummiesContributeNothingAnywhere) {
  // Client 1 carries two dummy cells; expected sum ignores them.
  AggregateInstance inst;
  inst.n = 2;
  inst.k = 3;
  inst.d = 5;
  inst.cells = {pack_cell(0, 1.0f),           pack_cell(4, 2.0f),
                pack_cell(1, -1.0f),          pack_cell(3, 0.5f),
                pack_cell(kSentinelIndex, 0.0f), pack_cell(kSentinelIndex, 0.0f)};
  const DenseVector expected = {1.0f, -1.0f, 0.0f, 0.5f, 2.0f};
  Tracer off(Tracer::Mode::kOff);
  EXPECT_TRUE(vectors_equal(oliveref::scatter_add(inst), expected));
  EXPECT_TRUE(vectors_equal(linear_aggregate(inst, off), expected));
  EXPECT_TRUE(vectors_equal(baseline_aggregate(inst, 4, off), expected));
  EXPECT_TRUE(vectors_near(advanced_aggregate(inst, off), expected));
  EXPECT_TRUE(vectors_near(grouped_advanced_aggregate(inst, 1, off), expected));
}

TEST(SentinelCells, BaselineTraceShapeUnchangedByDummies) {
  AggregateInstance with_dummy = small_instance();
  with_dummy.cells[3] = pack_cell(kSentinelIndex, 0.0f);
  Tracer ta, tb;
  baseline_aggregate(small_instance(), 2, ta);
  baseline_aggregate(with_dummy, 2, tb);
  EXPECT_TRUE(trace_equal(ta.take(2), tb.take(2)));
}

TEST(Validation, RealIndexOutOfRangeThrows) {
  AggregateInstance inst = small_instance();
  inst.cells[1] = pack_cell(4, 1.0f);  // d == 4, so 4 is out of range
  Tracer off(Tracer::Mode::kOff);
  EXPECT_THROW(
      {
        try {
          linear_aggregate(inst, off);
        } catch (const std::out_of_range& e) {
          EXPECT_STREQ(e.what(), "index out of range");
          throw;
        }
      },
      std::out_of_range);
  EXPECT_THROW(baseline_aggregate(inst, 2, off), std::out_of_range);
  EXPECT_THROW(advanced_aggregate(inst, off), std::out_of_range);
  EXPECT_THROW(grouped_advanced_aggregate(inst, 2, off), std::out_of_range);
}

TEST(Validation, MismatchedClientLengthsRejected) {
  const std::vector<SparseGradient> clients = {{{{0, 1.0f}}}, {{{1, 1.0f}, {2, 1.0f}}}};
  EXPECT_THROW(pack_instance(clients, 4), std::invalid_argument);
}

TEST(AverageAndPerturb, NoiselessAverageAndTraceShape) {
  DenseVector agg = {4.0f, 0.0f};
  Rng rng(1);
  Tracer tracer;
  average_and_perturb(agg, 2.0, 0.0, rng, tracer);
  EXPECT_TRUE(vectors_equal(agg, {2.0f, 0.0f}));
  // Two write sweeps over the dense region: + 2d events.
  EXPECT_EQ(tracer.total_events(), 4u);
  EXPECT_EQ(tracer.count(kRegionAggregate, MemOp::kWrite), 4u);
}

TEST(AverageAndPerturb, NoiseScaleIsRespected) {
  // Monte-Carlo: with divisor 1, outputs are iid draws at the noise scale;
  // the sample standard deviation over 1e5 coordinates should sit within 1%.
  const size_t d = 100000;
  DenseVector agg(d, 0.0f);
  Rng rng(99);
  Tracer off(Tracer::Mode::kOff);
  const double target = 2.0;
  average_and_perturb(agg, 1.0, target, rng, off);
  double sum = 0.0, sq = 0.0;
  for (const float v : agg) {
    sum += v;
    sq += double(v) * double(v);
  }
  const double mean = sum / double(d);
  const double stddev = std::sqrt(sq / double(d) - mean * mean);
  EXPECT_NEAR(stddev, target, 0.01 * target);
  EXPECT_NEAR(mean, 0.0, 0.05);
}

TEST(AverageAndPerturb, SeededDrawsReproduce) {
  DenseVector a(16, 1.0f), b(16, 1.0f);
  Rng ra(123), rb(123);
  Tracer off(Tracer::Mode::kOff);
  average_and_perturb(a, 3.0, 1.5, ra, off);
  average_and_perturb(b, 3.0, 1.5, rb, off);
  EXPECT_TRUE(vectors_equal(a, b));
}

TEST(AverageAndPerturb, RejectsBadParameters) {
  DenseVector agg = {1.0f};
  Rng rng(1);
  Tracer off(Tracer::Mode::kOff);
  EXPECT_THROW(average_and_perturb(agg, 0.0, 1.0, rng, off), std::invalid_argument);
  EXPECT_THROW(average_and_perturb(agg, 1.0, -1.0, rng, off), std::invalid_argument);
}

class BatchFileTest : public ::testing::Test {
 protected:
  std::filesystem::path path_ =
      std::filesystem::temp_directory_path() / "olive_batch_test.olv1";

  void TearDown() override { std::filesystem::remove(path_); }
};

TEST_F(BatchFileTest, RoundTripsInstances) {
  Rng rng(47);
  const AggregateInstance inst = random_instance(5, 3, 40, rng);
  write_gradient_batch(path_.string(), inst);
  const AggregateInstance loaded = read_gradient_batch(path_.string());
  EXPECT_EQ(loaded.n, inst.n);
  EXPECT_EQ(loaded.k, inst.k);
  EXPECT_EQ(loaded.d, inst.d);
  EXPECT_EQ(loaded.cells, inst.cells);
}

TEST_F(BatchFileTest, RejectsBadMagicVersionAndTruncation) {
  {
    std::ofstream out(path_, std::ios::binary);
    out.write("WHAT\x01\x00\x00\x00", 8);
  }
  EXPECT_THROW(read_gradient_batch(path_.string()), std::runtime_error);

  Rng rng(53);
  write_gradient_batch(path_.string(), random_instance(2, 2, 8, rng));
  std::filesystem::resize_file(path_, std::filesystem::file_size(path_) - 5);
  EXPECT_THROW(read_gradient_batch(path_.string()), std::runtime_error);
}

}  // namespace
