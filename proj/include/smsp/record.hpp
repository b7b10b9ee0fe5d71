// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "smsp/common.hpp"
#include "smsp/maskednet.hpp"

namespace smsp {

struct RecordMetadata {
  std::uint64_t task_id = 0;
  double tau = 0.0;
  double lambda = 0.0;
  std::uint32_t iterations = 0;
  std::uint64_t seed = 0;
  double achieved_ratio = 0.0;
  std::int64_t created_at = 0;

  friend bool operator==(const RecordMetadata&, const RecordMetadata&) = default;
};

/// One entry of the pool of pruned models: the task's class labels and its
/// full-length mask score vector, zero wherever a unit was pruned. Weights
/// are never stored; every record refers to the shared backbone.
struct PrunedRecord {
  std::uint64_t record_id = 0;
  std::string arch_id;
  std::vector<int> class_labels;
  std::vector<float> scores;
  float pruning_ratio = 0.0F;
  RecordMetadata meta;

  std::size_t retained_count() const {
    return static_cast<std::size_t>(std::count_if(scores.begin(), scores.end(), [](float s) { return s != 0.0F; }));
  }

  friend bool operator==(const PrunedRecord&, const PrunedRecord&) = default;
};

inline void validate(const PrunedRecord& r) {
  const auto arch = find_architecture(r.arch_id);
  require(arch.has_value(), ErrorCode::arch_mismatch, "record references unknown architecture '" + r.arch_id + "'");
  const std::size_t n = arch->prunable_units();
  require(r.scores.size() == n, ErrorCode::arch_mismatch,
          "record has " + std::to_string(r.scores.size()) + " scores, architecture '" + r.arch_id + "' has " +
              std::to_string(n) + " units");
  require(!r.class_labels.empty(), ErrorCode::invalid_argument, "record has no class labels");
  require(r.class_labels.front() >= 0, ErrorCode::invalid_argument, "record class labels must be non-negative");
  for (std::size_t i = 1; i < r.class_labels.size(); ++i)
    require(r.class_labels[i - 1] < r.class_labels[i], ErrorCode::invalid_argument,
            "record class labels must be strictly increasing");
  require(std::all_of(r.scores.begin(), r.scores.end(), [](float s) { return std::isfinite(s); }),
          ErrorCode::non_finite, "record scores must be finite");
  require(r.pruning_ratio >= 0.0F && r.pruning_ratio < 1.0F, ErrorCode::invalid_argument,
          "record pruning ratio must lie in [0, 1)");
  const auto zeros = static_cast<double>(std::count(r.scores.begin(), r.scores.end(), 0.0F));
  require(zeros / static_cast<double>(n) >= r.meta.achieved_ratio - 1.0 / static_cast<double>(n) - 1e-12,
          ErrorCode::invalid_argument, "record has fewer zero scores than its achieved ratio implies");
}

/// Builds a record from a pruned network: scores copied as stored floats,
/// exactly zero outside Ω.
inline PrunedRecord make_record(const MaskedNetwork& net, std::vector<int> class_labels, float pruning_ratio,
                                RecordMetadata meta) {
  PrunedRecord r;
  r.arch_id = net.arch.id;
  r.class_labels = std::move(class_labels);
  r.pruning_ratio = pruning_ratio;
  r.meta = meta;
  const std::size_t n = net.prunable_units();
  r.scores.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    r.scores[i] = net.mask.retained[i] ? static_cast<float>(net.mask.scores.value[i]) : 0.0F;
  return r;
}

}  // namespace smsp
