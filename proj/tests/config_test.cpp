// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "smsp/config.hpp"
#include "test_support.hpp"

namespace smsp {
namespace {

ErrorCode parse_error(const std::string& text) {
  try {
    parse_config(text);
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "parsed: " << text;
  return ErrorCode::io_failure;
}

TEST(Config, DefaultsMatchDocumentedValues) {
  const ExperimentConfig c;
  EXPECT_EQ(c.arch, "desk-mlp");
  EXPECT_EQ(c.pool.tasks, 60U);
  EXPECT_TRUE(c.pool.amp.frozen_weights);
  EXPECT_EQ(c.amp.iterations, 1000U);
  EXPECT_FALSE(c.amp.frozen_weights);
  EXPECT_EQ(c.smsp.fine_tune_iterations, 100U);
  EXPECT_EQ(c.smsp.neighbor_count, 8U);
  EXPECT_DOUBLE_EQ(c.smsp.pruning_ratio, 0.9);
  EXPECT_EQ(c.experiment.test_tasks, 20U);
  EXPECT_EQ(c.overlap.k_fractions, (std::vector<double>{0.1, 0.3}));
}

TEST(Config, IniRoundTripPreservesHash) {
  ExperimentConfig c;
  c.smsp.lr.initial_lr = 0.0123456789;
  c.transfer_ratios = {0.8, 0.95};
  c.arch = "desk-cnn";
  c.smsp.class_disjoint = false;
  const auto back = parse_config(to_ini(c));
  EXPECT_EQ(canonical_config(back), canonical_config(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_EQ(back.smsp.lr.initial_lr, 0.0123456789);
  EXPECT_EQ(parse_config(to_ini(ExperimentConfig{})).neighbor_counts, ExperimentConfig{}.neighbor_counts);
}

TEST(Config, OverridesOnlyGivenKeys) {
  const auto c = parse_config("; comment\n[smsp]\nneighbors = 4\niterations=50\n[size-transfer]\ntask_sizes = 3, 5\n");
  EXPECT_EQ(c.smsp.neighbor_count, 4U);
  EXPECT_EQ(c.smsp.fine_tune_iterations, 50U);
  EXPECT_EQ(c.task_sizes, (std::vector<std::size_t>{3, 5}));
  EXPECT_EQ(c.pool.tasks, 60U);
  EXPECT_NE(config_hash(c), config_hash(ExperimentConfig{}));
}

TEST(Config, RejectsBadInput) {
  EXPECT_EQ(parse_error("[smsp]\nneighbours = 4\n"), ErrorCode::invalid_argument);
  EXPECT_EQ(parse_error("[nowhere]\nx = 1\n"), ErrorCode::invalid_argument);
  EXPECT_EQ(parse_error("iterations = 4\n"), ErrorCode::bad_format);
  EXPECT_EQ(parse_error("[smsp]\niterations = many\n"), ErrorCode::invalid_argument);
  EXPECT_EQ(parse_error("[smsp]\niterations = 12x\n"), ErrorCode::invalid_argument);
  EXPECT_EQ(parse_error("[smsp]\nclass_disjoint = maybe\n"), ErrorCode::invalid_argument);
  EXPECT_EQ(parse_error("[pretrain]\narch = resnet\n"), ErrorCode::invalid_argument);
  EXPECT_EQ(parse_error("[overlap-analysis]\nk_fractions = 0.1,\n"), ErrorCode::invalid_argument);
  EXPECT_EQ(parse_error("[smsp\n"), ErrorCode::bad_format);
}

TEST(Config, TinyFileLoads) {
  const auto c = load_config(testing::tiny_config_path());
  EXPECT_EQ(c.pool.tasks, 8U);
  EXPECT_EQ(c.experiment.test_tasks, 3U);
  EXPECT_THROW(load_config("/nonexistent.ini"), Error);
}

TEST(Config, ShippedDefaultFileMatchesDefaults) {
  const auto c = load_config(std::filesystem::path(SMSP_SOURCE_DIR) / "configs" / "default.ini");
  EXPECT_EQ(canonical_config(c), canonical_config(ExperimentConfig{}));
}

TEST(Config, HashHexIsFixedWidth) {
  EXPECT_EQ(hash_hex(0x1F), "000000000000001f");
  EXPECT_EQ(hash_hex(config_hash(ExperimentConfig{})).size(), 16U);
}

}  // namespace
}  // namespace smsp
