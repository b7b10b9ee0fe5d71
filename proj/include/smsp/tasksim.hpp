// SPDX-License-Identifier: Apache-2.0
//
// Task-to-task similarity: LEEP transferability of a pooled task's masked
// model to a target task, top-k mask overlap between two pooled tasks, and
// grouping of a pool into three equal-width LEEP intervals.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iterator>
#include <limits>
#include <map>
#include <span>
#include <vector>

#include "smsp/common.hpp"
#include "smsp/gradcore.hpp"
#include "smsp/maskednet.hpp"
#include "smsp/record.hpp"

namespace smsp {

inline constexpr double kLeepNegInf = -std::numeric_limits<double>::infinity();

struct LeepScore {
  double value = kLeepNegInf;
  std::uint64_t source_record_id = 0;
  std::uint64_t target_task_id = 0;
  std::size_t sample_count = 0;

  bool finite() const { return std::isfinite(value); }
};

/// LEEP of a source model, given its predicted distributions over source
/// labels `theta` [N, Z] and the target labels of the same N samples.
///
///   P(y, z)  = 1/N Σ_i theta_iz [y_i = y]
///   P(y | z) = P(y, z) / P(z)
///   LEEP     = 1/N Σ_i log Σ_z P(y_i | z) theta_iz
///
/// Returns -inf when some sample has zero expected likelihood.
inline double leep_from_predictions(const Tensor& theta, std::span<const int> labels) {
  require(theta.rank() == 2, ErrorCode::shape_mismatch, "theta must be [N, Z]");
  const std::size_t n = theta.dim(0), z = theta.dim(1);
  require(labels.size() == n && n > 0, ErrorCode::invalid_argument, "LEEP needs one label per non-empty sample");

  std::map<int, std::size_t> compact;
  for (int y : labels) compact.emplace(y, 0);
  std::size_t next = 0;
  for (auto& [label, index] : compact) index = next++;
  std::vector<std::size_t> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = compact.at(labels[i]);
  const std::size_t ny = compact.size();

  std::vector<double> joint(ny * z, 0.0), marginal(z, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < z; ++k) joint[y[i] * z + k] += theta[i * z + k];
  for (auto& v : joint) v /= static_cast<double>(n);
  for (std::size_t a = 0; a < ny; ++a)
    for (std::size_t k = 0; k < z; ++k) marginal[k] += joint[a * z + k];

  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double expected = 0.0;
    for (std::size_t k = 0; k < z; ++k)
      if (marginal[k] > 0.0) expected += joint[y[i] * z + k] / marginal[k] * theta[i * z + k];
    if (!(expected > 0.0)) return kLeepNegInf;
    total += std::log(expected);
  }
  // Rounding can push a perfect predictor a hair above zero.
  return std::min(0.0, total / static_cast<double>(n));
}

/// Row-wise softmax of the backbone logits restricted to the source
/// record's classes, with the record's scores as the mask.
inline Tensor source_predictions(const MaskedNetwork& pretrained, const PrunedRecord& source, const Tensor& x) {
  require(source.arch_id == pretrained.arch.id, ErrorCode::arch_mismatch,
          "record architecture '" + source.arch_id + "' differs from backbone '" + pretrained.arch.id + "'");
  require(source.scores.size() == pretrained.prunable_units(), ErrorCode::arch_mismatch,
          "record score length differs from backbone unit count");
  MaskedNetwork net = with_class_head(pretrained, source.class_labels);
  net.mask.enabled = true;
  for (std::size_t i = 0; i < source.scores.size(); ++i) {
    net.mask.scores.value[i] = source.scores[i];
    net.mask.retained[i] = source.scores[i] != 0.0F;
  }
  Tensor logits = predict(net, x);
  const std::size_t k = logits.dim(1);
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    double* row = logits.data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += (row[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < k; ++j) row[j] /= s;
  }
  return logits;
}

/// One pass of the target data through the source record's masked model.
inline LeepScore leep_score(const MaskedNetwork& pretrained, const PrunedRecord& source, const Tensor& target_x,
                            std::span<const int> target_y, std::uint64_t target_task_id = 0) {
  require(!target_y.empty() && target_x.dim(0) == target_y.size(), ErrorCode::invalid_argument,
          "LEEP needs non-empty labelled target data");
  LeepScore s;
  s.source_record_id = source.record_id;
  s.target_task_id = target_task_id;
  s.sample_count = target_y.size();
  s.value = leep_from_predictions(source_predictions(pretrained, source, target_x), target_y);
  return s;
}

/// The k units with the highest scores, highest first; ties go to the
/// lower unit index.
inline std::vector<std::size_t> top_k_units(const PrunedRecord& record, std::size_t k) {
  const std::size_t positive =
      static_cast<std::size_t>(std::count_if(record.scores.begin(), record.scores.end(), [](float s) { return s > 0.0F; }));
  require(k >= 1 && k <= positive, ErrorCode::out_of_range,
          "k = " + std::to_string(k) + " outside [1, " + std::to_string(positive) + "]");
  std::vector<std::size_t> order(record.scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return record.scores[a] > record.scores[b]; });
  order.resize(k);
  return order;
}

/// |top_k(m) ∩ top_k(n)| / k.
inline double overlap_ratio(const PrunedRecord& m, const PrunedRecord& n, std::size_t k) {
  require(m.arch_id == n.arch_id && m.scores.size() == n.scores.size(), ErrorCode::arch_mismatch,
          "overlap_ratio needs records of the same architecture");
  auto a = top_k_units(m, k);
  auto b = top_k_units(n, k);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::vector<std::size_t> both;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
  return static_cast<double>(both.size()) / static_cast<double>(k);
}

struct SimilarityRow {
  std::uint64_t record_id = 0;
  LeepScore leep;
  std::vector<int> class_labels;
  int group = 1;  // 1 = most similar
};

struct SimilarityTable {
  std::uint64_t target_task_id = 0;
  std::vector<SimilarityRow> rows;              // LEEP descending
  std::array<std::vector<std::size_t>, 3> groups;  // row indices per group

  const std::vector<std::size_t>& group(int g) const { return groups.at(static_cast<std::size_t>(g - 1)); }
};

/// Sorts rows by LEEP (descending, ties by record id, -inf last) and
/// assigns each to one of three equal-width intervals of the finite LEEP
/// range; -inf rows go to group 3.
inline void assign_similarity_groups(SimilarityTable& table) {
  auto& rows = table.rows;
  std::stable_sort(rows.begin(), rows.end(), [](const SimilarityRow& a, const SimilarityRow& b) {
    if (a.leep.value != b.leep.value) return a.leep.value > b.leep.value;
    return a.record_id < b.record_id;
  });
  double hi = kLeepNegInf, lo = std::numeric_limits<double>::infinity();
  for (const auto& r : rows)
    if (r.leep.finite()) {
      hi = std::max(hi, r.leep.value);
      lo = std::min(lo, r.leep.value);
    }
  const double width = std::isfinite(hi) ? (hi - lo) / 3.0 : 0.0;
  for (auto& g : table.groups) g.clear();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    int g = 3;
    if (rows[i].leep.finite()) {
      g = width > 0.0 ? 1 + static_cast<int>(std::min(2.0, std::floor((hi - rows[i].leep.value) / width))) : 1;
    }
    rows[i].group = g;
    table.groups[static_cast<std::size_t>(g - 1)].push_back(i);
  }
}

/// Scores every pool record of the backbone's architecture against the
/// target data.
inline SimilarityTable build_similarity_table(const MaskedNetwork& pretrained, std::span<const PrunedRecord> pool,
                                              const Tensor& target_x, std::span<const int> target_y,
                                              std::uint64_t target_task_id = 0) {
  SimilarityTable table;
  table.target_task_id = target_task_id;
  for (const auto& rec : pool) {
    if (rec.arch_id != pretrained.arch.id) continue;
    SimilarityRow row;
    row.record_id = rec.record_id;
    row.class_labels = rec.class_labels;
    row.leep = leep_score(pretrained, rec, target_x, target_y, target_task_id);
    table.rows.push_back(std::move(row));
  }
  require(!table.rows.empty(), ErrorCode::not_found,
          "pool has no records for architecture '" + pretrained.arch.id + "'");
  assign_similarity_groups(table);
  return table;
}

}  // namespace smsp
