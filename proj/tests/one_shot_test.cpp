// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "smsp/amp.hpp"
#include "smsp/one_shot.hpp"
#include "test_support.hpp"

namespace smsp {
namespace {

using testing::synthetic_record;

std::vector<float> random_scores(std::mt19937_64& rng, std::size_t n = 128) {
  std::uniform_real_distribution<float> u(0.0F, 1.0F);
  std::vector<float> s(n);
  for (auto& v : s) v = u(rng) < 0.5F ? 0.0F : u(rng);
  return s;
}

TEST(SumMasks, MatchesLoopAndIgnoresOrder) {
  std::mt19937_64 rng(31);
  std::vector<PrunedRecord> recs;
  for (std::uint64_t id : {5U, 2U, 9U, 1U}) recs.push_back(synthetic_record(random_scores(rng), {1}, id));
  std::vector<double> expect(128, 0.0);
  for (std::uint64_t id : {1U, 2U, 5U, 9U})
    for (const auto& r : recs)
      if (r.record_id == id)
        for (std::size_t i = 0; i < 128; ++i) expect[i] += static_cast<double>(r.scores[i]);
  EXPECT_EQ(sum_masks(recs), expect);
  for (int t = 0; t < 5; ++t) {
    std::shuffle(recs.begin(), recs.end(), rng);
    EXPECT_EQ(sum_masks(recs), expect);
  }
  auto other = synthetic_record(std::vector<float>(56, 1.0F), {1}, 3);
  other.arch_id = "desk-cnn";
  recs.push_back(other);
  EXPECT_THROW(sum_masks(recs), Error);
  EXPECT_THROW(sum_masks(std::vector<PrunedRecord>{}), Error);
}

TEST(PruneCount, CeilingWithExactProducts) {
  EXPECT_EQ(prune_count(128, 0.9), 116U);
  EXPECT_EQ(prune_count(100, 0.9), 90U);
  EXPECT_EQ(prune_count(10, 0.7), 7U);
  EXPECT_EQ(prune_count(56, 0.85), 48U);
  EXPECT_EQ(prune_count(128, 0.95), 122U);
  EXPECT_EQ(prune_count(7, 0.0), 0U);
}

TEST(Retention, PrunesExactlyKLowestWithIndexTieBreak) {
  const auto net = initialize_network(desk_mlp(3), 1);
  std::vector<double> scores(128, 1.0);
  for (std::size_t i = 0; i < 128; ++i) scores[i] = static_cast<double>((i * 37) % 128) / 128.0;
  const auto m = retain_by_scores(net, scores, 0.9);
  EXPECT_EQ(m.pruned_count, 116U);
  EXPECT_NEAR(m.achieved_ratio, 116.0 / 128.0, 1e-15);
  const double cut = 116.0 / 128.0;
  for (std::size_t i = 0; i < 128; ++i) EXPECT_EQ(m.retained[i], scores[i] >= cut) << i;

  std::vector<double> flat(128, 0.5);
  const auto t = retain_by_scores(net, flat, 0.5);
  // Unit 63 is the last of layer 0; the demand moves to unit 64.
  for (std::size_t i = 0; i < 128; ++i) EXPECT_EQ(t.retained[i], i == 63 || i >= 65) << i;
  EXPECT_TRUE(t.floor_bound);
}

TEST(Retention, FloorSpillsToNextLowest) {
  const auto net = initialize_network(desk_mlp(3), 1);
  std::vector<double> scores(128);
  for (std::size_t i = 0; i < 64; ++i) scores[i] = 0.001 * static_cast<double>(i);
  for (std::size_t i = 64; i < 128; ++i) scores[i] = 1.0 + static_cast<double>(i);
  const auto m = retain_by_scores(net, scores, 0.6);  // k = 77
  EXPECT_EQ(m.pruned_count, 77U);
  EXPECT_TRUE(m.floor_bound);
  EXPECT_TRUE(m.retained[63]);
  std::size_t layer0 = 0;
  for (std::size_t i = 0; i < 64; ++i) layer0 += m.retained[i];
  EXPECT_EQ(layer0, 1U);
  for (std::size_t i = 64; i < 64 + 14; ++i) EXPECT_FALSE(m.retained[i]);
  EXPECT_TRUE(m.retained[78]);
  EXPECT_THROW(retain_by_scores(net, scores, 0.99), Error);
  EXPECT_THROW(retain_by_scores(net, std::vector<double>(5, 1.0), 0.5), Error);
}

TEST(Retention, NestedAcrossRatios) {
  std::mt19937_64 rng(32);
  const auto net = initialize_network(desk_mlp(3), 1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> scores(128);
    std::uniform_int_distribution<int> coarse(0, 20);
    for (auto& v : scores) v = coarse(rng) * 0.05;  // many ties
    const auto lo = retain_by_scores(net, scores, 0.85), mid = retain_by_scores(net, scores, 0.9),
               hi = retain_by_scores(net, scores, 0.95);
    for (std::size_t i = 0; i < 128; ++i) {
      EXPECT_TRUE(!hi.retained[i] || mid.retained[i]) << i;
      EXPECT_TRUE(!mid.retained[i] || lo.retained[i]) << i;
    }
  }
}

TEST(Retention, InvariantToPositiveScaling) {
  std::mt19937_64 rng(33);
  const auto net = initialize_network(desk_mlp(3), 1);
  const auto s = random_scores(rng);
  std::vector<double> a(s.begin(), s.end()), b;
  for (double v : a) b.push_back(v * 8.0);
  EXPECT_EQ(retain_by_scores(net, a, 0.9).retained, retain_by_scores(net, b, 0.9).retained);
}

TEST(OneShot, InheritsRetainedWeights) {
  std::mt19937_64 rng(34);
  const auto net = initialize_network(desk_mlp(3), 2);
  const auto s = random_scores(rng);
  const std::vector<double> scores(s.begin(), s.end());
  const auto r = one_shot_prune(net, scores, 0.9);
  EXPECT_EQ(r.subnet.prunable_units(), 12U);
  std::vector<std::size_t> kept0;
  for (std::size_t i = 0; i < 64; ++i)
    if (r.mask.retained[i]) kept0.push_back(i);
  ASSERT_EQ(r.subnet.hidden[0].weight.value.dim(0), kept0.size());
  for (std::size_t o = 0; o < kept0.size(); ++o)
    for (std::size_t i = 0; i < 256; ++i)
      EXPECT_EQ(r.subnet.hidden[0].weight.value[o * 256 + i], net.hidden[0].weight.value[kept0[o] * 256 + i]);
  // Retained units carry score 1, so the sub-network equals the binary-masked backbone.
  auto masked = net;
  for (std::size_t i = 0; i < 128; ++i)
    if (!r.mask.retained[i]) masked.prune_unit(i);
  const Tensor x = testing::random_tensor({3, 256}, rng);
  const Tensor a = predict(masked, x), b = predict(r.subnet, x);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-9);
}

SimilarityTable table_of(const std::vector<std::pair<std::uint64_t, std::vector<int>>>& rows) {
  SimilarityTable t;
  double v = -0.1;
  for (const auto& [id, classes] : rows) {
    SimilarityRow r;
    r.record_id = id;
    r.class_labels = classes;
    r.leep.value = v;
    v -= 0.1;
    t.rows.push_back(r);
  }
  assign_similarity_groups(t);
  return t;
}

TEST(Neighbors, SkipsSharedClassesWhenAsked) {
  const auto t = table_of({{1, {0, 1, 2}}, {2, {3, 4, 5}}, {3, {2, 6, 7}}, {4, {8, 9, 10}}, {5, {11, 12, 13}}});
  const std::vector<int> target{1, 2, 15};
  EXPECT_EQ(select_neighbors(t, 2, true, target), (std::vector<std::uint64_t>{2, 4}));
  EXPECT_EQ(select_neighbors(t, 2, false, target), (std::vector<std::uint64_t>{1, 2}));
  EXPECT_THROW(select_neighbors(t, 4, true, target), Error);
  EXPECT_THROW(select_neighbors(t, 0, false, target), Error);
  EXPECT_EQ(select_neighbors_from_group(t, 3, 5, true, target), (std::vector<std::uint64_t>{4, 5}));
  const std::vector<PrunedRecord> pool{synthetic_record({}, {0, 1}, 1), synthetic_record({}, {3, 4}, 2)};
  EXPECT_EQ(class_disjoint_records(pool, target).size(), 1U);
}

TEST(Smsp, PipelineOnSmallPool) {
  const auto& w = testing::small_world();
  AmpConfig amp;
  amp.iterations = 150;
  amp.frozen_weights = true;
  std::vector<PrunedRecord> pool;
  for (const auto& t : sample_tasks(w.base, 3, 8, 41, {}, 100)) {
    auto r = build_pool_entry(w.backbone, t, materialize(w.base, t), amp).record;
    r.record_id = pool.size() + 1;
    pool.push_back(r);
  }
  const auto task = make_task(w.base, 500, {2, 9, 17}, 4);
  const auto data = materialize(w.base, task);
  SmspConfig cfg;
  cfg.neighbor_count = 3;
  cfg.fine_tune_iterations = 40;
  const auto a = smsp_pipeline(w.backbone, pool, task, data, cfg);
  const auto b = smsp_pipeline(w.backbone, pool, task, data, cfg);
  EXPECT_EQ(a.mask.retained, b.mask.retained);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(a.mask.neighbor_ids.size(), 3U);
  for (auto id : a.mask.neighbor_ids)
    EXPECT_FALSE(detail::shares_class(pool[id - 1].class_labels, task.classes));
  EXPECT_EQ(a.retained_units, 128U - 116U);
  EXPECT_EQ(a.fine_tune_iterations, 40U);
  EXPECT_EQ(a.flops.cumulative_training_flops, 40ULL * 3 * 32 * a.flops.forward_flops_per_sample);
  EXPECT_GT(a.accuracy, 1.0 / 3.0);
}

TEST(FineTune, ZeroIterationsKeepsNetwork) {
  const auto& w = testing::small_world();
  const auto task = make_task(w.base, 1, {0, 1, 2}, 0);
  const auto data = materialize(w.base, task);
  const auto net = with_class_head(w.backbone, task.classes);
  const auto r = fine_tune(net, data, 0, {0.1, 0.0, 1}, 32, 1);
  EXPECT_EQ(r.accuracy, r.initial_accuracy);
  EXPECT_EQ(r.net.hidden[0].weight.value, net.hidden[0].weight.value);
  EXPECT_EQ(r.flops.cumulative_training_flops, 0U);
}

}  // namespace
}  // namespace smsp
