// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "smsp/amp.hpp"
#include "test_support.hpp"

namespace smsp {
namespace {

using testing::small_world;

TaskData world_task(std::vector<int> classes, std::uint64_t id = 1) {
  const auto& w = small_world();
  return materialize(w.base, make_task(w.base, id, std::move(classes), id));
}

AmpConfig quick_config() {
  AmpConfig c;
  c.iterations = 150;
  c.frozen_weights = true;
  c.seed = 5;
  return c;
}

TEST(Threshold, PrunesBelowAndKeepsLayerFloor) {
  auto net = initialize_network(desk_mlp(3), 1);
  for (std::size_t i = 0; i < 64; ++i) net.mask.scores.value[i] = 0.001 * static_cast<double>(i % 5);
  net.mask.scores.value[64] = 0.005;
  net.mask.scores.value[65] = 0.5;
  EXPECT_TRUE(prune_below_threshold(net, 0.01));
  EXPECT_EQ(net.retained_in_layer(0), 1U);
  // Highest score of the layer survives, lowest index on ties.
  EXPECT_TRUE(net.mask.retained[4]);
  EXPECT_EQ(net.retained_in_layer(1), 63U);
  EXPECT_FALSE(net.mask.retained[64]);
  EXPECT_EQ(net.mask.scores.value[64], 0.0);
  // The survivor is still below the threshold, so the floor keeps binding.
  EXPECT_TRUE(prune_below_threshold(net, 0.01));
  EXPECT_EQ(net.mask.retained_count(), 64U);
}

TEST(Threshold, NegativeScoresArePruned) {
  auto net = initialize_network(desk_mlp(3), 1);
  net.mask.scores.value[7] = -0.3;
  prune_below_threshold(net, 0.01);
  EXPECT_FALSE(net.mask.retained[7]);
  EXPECT_EQ(net.mask.retained_count(), 127U);
}

TEST(Objective, L1TermAddsSignedGradient) {
  std::mt19937_64 rng(2);
  auto a = initialize_network(desk_mlp(3), 1);
  for (std::size_t i = 0; i < a.mask.size(); ++i) a.mask.scores.value[i] = i % 3 == 0 ? -0.4 : 0.6;
  a.prune_unit(5);
  auto b = a;
  const Tensor x = testing::random_tensor({4, 256}, rng);
  const std::vector<int> y{0, 1, 2, 0};
  Graph ga, gb;
  const double la = ga.value(amp_objective(ga, a, x, y, 0.0)).item();
  Var lb = amp_objective(gb, b, x, y, 0.25);
  double l1 = 0.0;
  for (std::size_t i = 0; i < a.mask.size(); ++i) l1 += a.mask.retained[i] ? std::abs(a.mask.scores.value[i]) : 0.0;
  EXPECT_NEAR(gb.value(lb).item(), la + 0.25 * l1, 1e-12);
  ga.backward(amp_objective(ga, a, x, y, 0.0));
  gb.backward(lb);
  for (std::size_t i = 0; i < a.mask.size(); ++i) {
    const double expect = a.mask.retained[i] ? 0.25 * (a.mask.scores.value[i] > 0 ? 1.0 : -1.0) : 0.0;
    EXPECT_NEAR(b.mask.scores.grad[i] - a.mask.scores.grad[i], expect, 1e-12);
  }
}

TEST(Amp, ReachesTargetWithFrozenWeights) {
  const auto& w = small_world();
  const auto task = make_task(w.base, 10, {2, 8, 13}, 3);
  const auto data = materialize(w.base, task);
  const auto r = build_pool_entry(w.backbone, task, data, quick_config());
  EXPECT_TRUE(r.converged);
  EXPECT_GE(r.achieved_ratio, 0.9);
  EXPECT_EQ(r.record.meta.task_id, 10U);
  EXPECT_EQ(r.record.class_labels, task.classes);
  EXPECT_EQ(r.record.arch_id, "desk-mlp");
  EXPECT_EQ(r.record.retained_count(), r.pruned_net.mask.retained_count());
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_EQ(r.pruned_net.hidden[l].weight.value, w.backbone.hidden[l].weight.value);
    EXPECT_EQ(r.pruned_net.hidden[l].bias.value, w.backbone.hidden[l].bias.value);
  }
  for (std::size_t i = 0; i < r.record.scores.size(); ++i)
    EXPECT_EQ(r.record.scores[i] == 0.0F, !r.pruned_net.mask.retained[i]);
}

TEST(Amp, RetainedSetShrinksMonotonicallyThenFreezes) {
  const auto& w = small_world();
  auto cfg = quick_config();
  const auto r = amp_prune(with_class_head(w.backbone, std::vector<int>{1, 6, 11}), world_task({1, 6, 11}), cfg);
  ASSERT_EQ(r.retained_history.size(), cfg.iterations);
  for (std::size_t j = 1; j < r.retained_history.size(); ++j)
    EXPECT_LE(r.retained_history[j], r.retained_history[j - 1]);
  const auto target = static_cast<std::size_t>(std::floor(128 * 0.1));
  const auto first = std::find_if(r.retained_history.begin(), r.retained_history.end(),
                                  [&](std::size_t k) { return k <= target; });
  ASSERT_NE(first, r.retained_history.end());
  EXPECT_TRUE(std::all_of(first, r.retained_history.end(), [&](std::size_t k) { return k == *first; }));
  EXPECT_EQ(r.flops.forward_flops_per_sample, count_flops(r.pruned_net));
}

TEST(Amp, IsDeterministic) {
  const auto& w = small_world();
  const auto task = make_task(w.base, 3, {0, 5, 19}, 3);
  const auto data = materialize(w.base, task);
  const auto a = build_pool_entry(w.backbone, task, data, quick_config());
  const auto b = build_pool_entry(w.backbone, task, data, quick_config());
  EXPECT_EQ(a.record, b.record);
}

TEST(Amp, FreeWeightsMove) {
  const auto& w = small_world();
  auto cfg = quick_config();
  cfg.frozen_weights = false;
  cfg.iterations = 20;
  const auto r = amp_prune(with_class_head(w.backbone, std::vector<int>{1, 2, 3}), world_task({1, 2, 3}), cfg);
  EXPECT_NE(r.pruned_net.hidden[0].weight.value, w.backbone.hidden[0].weight.value);
  EXPECT_THROW(build_pool_entry(w.backbone, make_task(w.base, 1, {1, 2, 3}, 0), world_task({1, 2, 3}), cfg), Error);
}

TEST(Amp, ValidatesConfiguration) {
  const auto& w = small_world();
  const auto net = with_class_head(w.backbone, std::vector<int>{1, 2, 3});
  const auto data = world_task({1, 2, 3});
  auto cfg = quick_config();
  cfg.target_ratio = 0.99;  // leaves fewer than one unit per layer
  EXPECT_THROW(amp_prune(net, data, cfg), Error);
  cfg = quick_config();
  cfg.threshold = 0.0;
  EXPECT_THROW(amp_prune(net, data, cfg), Error);
  auto started = net;
  started.prune_unit(0);
  EXPECT_THROW(amp_prune(started, data, quick_config()), Error);
}

}  // namespace
}  // namespace smsp
