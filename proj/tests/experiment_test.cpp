// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "smsp/experiment.hpp"
#include "test_support.hpp"

namespace smsp {
namespace {

Workspace& tiny_workspace() {
  static Workspace ws = make_workspace(load_config(testing::tiny_config_path()));
  return ws;
}

TEST(Statistics, MeanAndSampleDeviation) {
  const std::vector<double> v{2, 4, 4, 4, 5, 5, 7, 9};
  EXPECT_DOUBLE_EQ(mean_of(v), 5.0);
  EXPECT_DOUBLE_EQ(stddev_of(v), std::sqrt(32.0 / 7.0));
  EXPECT_EQ(stddev_of(std::vector<double>{3.0}), 0.0);
  EXPECT_EQ(mean_of(std::vector<double>{}), 0.0);
}

TEST(Statistics, PermutationTest) {
  std::vector<double> hi, lo;
  for (int i = 0; i < 12; ++i) {
    hi.push_back(1.0 + 0.01 * i);
    lo.push_back(0.01 * i);
  }
  EXPECT_DOUBLE_EQ(permutation_p_value(hi, lo, 999, 1), 1.0 / 1000.0);
  EXPECT_GT(permutation_p_value(lo, hi, 999, 1), 0.99);
  const double same = permutation_p_value(lo, lo, 999, 1);
  EXPECT_GT(same, 0.3);
  EXPECT_EQ(permutation_p_value(hi, lo, 200, 5), permutation_p_value(hi, lo, 200, 5));
  EXPECT_THROW(permutation_p_value(hi, std::vector<double>{}, 10, 1), Error);
}

TEST(Scenarios, NamesResolve) {
  EXPECT_EQ(scenario_names().size(), 8U);
  EXPECT_THROW(run_scenario("nope", tiny_workspace()), Error);
}

TEST(Scenarios, MainComparisonRowsAndCsv) {
  auto& ws = tiny_workspace();
  const auto r = run_scenario("main-comparison", ws);
  for (const char* m : {"SMSP", "AMP", "Random"}) {
    const auto& row = r.at("r=0.90", m);
    EXPECT_EQ(row.n, 3U);
    EXPECT_GE(row.mean, 0.0);
    EXPECT_LE(row.mean, 100.0);
    EXPECT_EQ(row.config_hash, row_hash(ws.cfg, "main-comparison", "r=0.90", m));
  }
  EXPECT_EQ(r.config_hash, hash_hex(config_hash(ws.cfg)));
  EXPECT_EQ(r.at("r=0.90", "SMSP").finetune_iterations, 10U);
  EXPECT_EQ(r.at("r=0.90", "AMP").pruning_iterations, 60U);
  EXPECT_GT(r.at("r=0.90", "AMP").training_flops, r.at("r=0.90", "SMSP").training_flops);
  EXPECT_GT(r.at("r=0.90", "SMSP").selection_flops, 0.0);
  const auto csv = summary_csv(r);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), std::string(kSummaryHeader));
  EXPECT_EQ(r.tasks.size(), 9U);

  testing::TempDir dir("report");
  write_report(r, dir.path());
  for (const char* f : {"main-comparison.csv", "main-comparison_tasks.csv", "main-comparison.md"})
    EXPECT_TRUE(std::filesystem::exists(dir.path() / f)) << f;
  const auto bytes = detail::read_file(dir.path() / "main-comparison.csv");
  EXPECT_EQ(std::string(bytes.begin(), bytes.end()), csv);
}

TEST(Scenarios, RerunIsByteIdentical) {
  const auto cfg = load_config(testing::tiny_config_path());
  auto a = make_workspace(cfg);
  auto b = make_workspace(cfg);
  for (const char* name : {"ratio-transfer", "neighbor-ablation"}) {
    const auto ra = run_scenario(name, a), rb = run_scenario(name, b);
    EXPECT_EQ(summary_csv(ra), summary_csv(rb)) << name;
    EXPECT_EQ(tasks_csv(ra), tasks_csv(rb)) << name;
  }
}

TEST(Scenarios, RatioTransferKeepsNesting) {
  const auto r = run_scenario("ratio-transfer", tiny_workspace());
  EXPECT_EQ(r.at("all", "SMSP", "nested_retention").mean, 1.0);
  for (const char* s : {"r=0.85", "r=0.90", "r=0.95"}) EXPECT_NE(r.find(s, "Random"), nullptr) << s;
}

TEST(Scenarios, OverlapRowsPresent) {
  const auto r = run_scenario("overlap-analysis", tiny_workspace());
  EXPECT_NE(r.find("k=13", "group-1", "overlap"), nullptr);
  EXPECT_NE(r.find("k=39", "group-1-vs-3", "p_value"), nullptr);
  const auto& ratio = r.at("all", "pool", "achieved_ratio");
  EXPECT_EQ(ratio.n, 8U);
  EXPECT_GE(ratio.mean, 0.0);
  EXPECT_LT(ratio.mean, 1.0);
}

TEST(Scenarios, RemainingScenariosRun) {
  auto& ws = tiny_workspace();
  EXPECT_EQ(run_scenario("pool-build", ws).at("r=0.90", "AMP-frozen", "converged").n, 8U);
  EXPECT_NE(run_scenario("size-transfer", ws).find("target=5", "SMSP pool=3"), nullptr);
  EXPECT_NE(run_scenario("unseen-distribution", ws).find("shifted r=0.90", "SMSP"), nullptr);
  EXPECT_NE(run_scenario("similarity-ablation", ws).find("J=10", "group-1"), nullptr);
}

TEST(Workspace, PoolDirectoryRoundTrip) {
  auto& ws = tiny_workspace();
  testing::TempDir dir("wspool");
  const auto built = attach_pool_dir(ws, dir.path());
  Workspace again = make_workspace(ws.cfg, ws.backbone);
  const auto& loaded = attach_pool_dir(again, dir.path());
  ASSERT_EQ(loaded.size(), built.size());
  for (std::size_t i = 0; i < built.size(); ++i) EXPECT_EQ(loaded[i], built[i]);
  EXPECT_EQ(again.backbone_test_accuracy, ws.backbone_test_accuracy);
}

}  // namespace
}  // namespace smsp
