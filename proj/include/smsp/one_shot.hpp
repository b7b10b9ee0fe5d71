// SPDX-License-Identifier: Apache-2.0
//
// Scalable mask selection pruning: pick the most LEEP-similar pooled tasks,
// sum their mask scores, prune the backbone once at the k-th smallest
// summed score and fine-tune the extracted sub-network briefly.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "smsp/common.hpp"
#include "smsp/data.hpp"
#include "smsp/gradcore.hpp"
#include "smsp/maskednet.hpp"
#include "smsp/record.hpp"
#include "smsp/tasksim.hpp"

namespace smsp {

struct SmspConfig {
  double pruning_ratio = 0.9;
  std::size_t neighbor_count = 8;
  std::size_t fine_tune_iterations = 100;
  std::size_t batch_size = 32;
  /// total_steps is replaced by the fine-tune iteration count.
  LrSchedule lr{0.035, 0.0, 1};
  bool class_disjoint = true;
  /// Cap on the target samples scored by LEEP; 0 uses every training sample.
  std::size_t leep_samples = 150;
  std::uint64_t seed = 0;
};

struct SmspMask {
  std::vector<double> summed_scores;
  std::vector<std::uint64_t> neighbor_ids;
  std::vector<std::uint8_t> retained;
  std::size_t pruned_count = 0;
  double achieved_ratio = 0.0;
  /// Some unit was kept only because it was the last one of its layer.
  bool floor_bound = false;
};

namespace detail {

inline bool shares_class(std::span<const int> a, std::span<const int> b) {
  return std::any_of(a.begin(), a.end(), [&](int c) { return std::find(b.begin(), b.end(), c) != b.end(); });
}

}  // namespace detail

/// Pool records sharing no class with the target.
inline std::vector<PrunedRecord> class_disjoint_records(std::span<const PrunedRecord> pool,
                                                        std::span<const int> target_classes) {
  std::vector<PrunedRecord> out;
  for (const auto& r : pool)
    if (!detail::shares_class(r.class_labels, target_classes)) out.push_back(r);
  return out;
}

/// Up to M eligible record ids of one similarity group, most similar first.
inline std::vector<std::uint64_t> select_neighbors_from_group(const SimilarityTable& table, int group, std::size_t m,
                                                              bool class_disjoint,
                                                              std::span<const int> target_classes) {
  std::vector<std::uint64_t> out;
  for (std::size_t i : table.group(group)) {
    if (out.size() == m) break;
    const auto& row = table.rows[i];
    if (class_disjoint && detail::shares_class(row.class_labels, target_classes)) continue;
    out.push_back(row.record_id);
  }
  return out;
}

/// The M highest-LEEP records, skipping records sharing a class with the
/// target when class_disjoint is set.
inline std::vector<std::uint64_t> select_neighbors(const SimilarityTable& table, std::size_t m, bool class_disjoint,
                                                   std::span<const int> target_classes) {
  require(m > 0, ErrorCode::invalid_argument, "neighbor count must be positive");
  std::vector<std::uint64_t> out;
  for (const auto& row : table.rows) {
    if (out.size() == m) break;
    if (class_disjoint && detail::shares_class(row.class_labels, target_classes)) continue;
    out.push_back(row.record_id);
  }
  require(out.size() == m, ErrorCode::infeasible,
          "only " + std::to_string(out.size()) + " eligible neighbors, " + std::to_string(m) + " requested");
  return out;
}

/// Elementwise sum of the records' score vectors. Records are added in
/// ascending record_id order, so any permutation of the input gives a
/// bit-identical result.
inline std::vector<double> sum_masks(std::span<const PrunedRecord> records) {
  require(!records.empty(), ErrorCode::invalid_argument, "sum_masks needs at least one record");
  std::vector<const PrunedRecord*> order;
  for (const auto& r : records) order.push_back(&r);
  std::stable_sort(order.begin(), order.end(),
                   [](const PrunedRecord* a, const PrunedRecord* b) { return a->record_id < b->record_id; });
  const auto& first = *order.front();
  std::vector<double> out(first.scores.size(), 0.0);
  for (const PrunedRecord* r : order) {
    require(r->arch_id == first.arch_id && r->scores.size() == out.size(), ErrorCode::arch_mismatch,
            "sum_masks over records of different architectures");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += static_cast<double>(r->scores[i]);
  }
  return out;
}

/// k = ceil(n * r), guarded against r*n landing a rounding error above an
/// integer.
inline std::size_t prune_count(std::size_t n, double r) {
  const double exact = static_cast<double>(n) * r;
  const double nearest = std::round(exact);
  const double k = std::abs(exact - nearest) < 1e-9 ? nearest : std::ceil(exact);
  return static_cast<std::size_t>(k);
}

/// Prunes exactly k = ceil(n r) units in ascending (score, index) order.
/// A unit that is the last one of its layer is skipped and the demand
/// spills to the next-lowest score.
inline SmspMask retain_by_scores(const MaskedNetwork& net, std::span<const double> scores, double r) {
  const std::size_t n = net.prunable_units();
  require(scores.size() == n, ErrorCode::arch_mismatch, "score vector length differs from unit count");
  require(r >= 0.0 && r < 1.0, ErrorCode::infeasible, "pruning ratio must lie in [0, 1)");
  const std::size_t k = prune_count(n, r);
  const std::size_t layers = net.arch.hidden.size();
  require(k + layers <= n, ErrorCode::infeasible,
          "pruning " + std::to_string(k) + " of " + std::to_string(n) + " units would empty a layer");

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  const auto layer_of = net.unit_layers();
  std::vector<std::size_t> remaining(layers);
  for (std::size_t l = 0; l < layers; ++l) remaining[l] = net.arch.hidden[l].units;

  SmspMask out;
  out.summed_scores.assign(scores.begin(), scores.end());
  out.retained.assign(n, 1);
  for (std::size_t i : order) {
    if (out.pruned_count == k) break;
    if (remaining[layer_of[i]] == 1) {
      out.floor_bound = true;
      continue;
    }
    --remaining[layer_of[i]];
    out.retained[i] = 0;
    ++out.pruned_count;
  }
  out.achieved_ratio = static_cast<double>(out.pruned_count) / static_cast<double>(n);
  return out;
}

struct OneShotResult {
  SmspMask mask;
  MaskedNetwork subnet;
};

/// Applies the retention decided by `summed_scores` to a (task-headed)
/// pre-trained network and extracts the dense sub-network; every retained
/// parameter is inherited unchanged.
inline OneShotResult one_shot_prune(const MaskedNetwork& pretrained, std::span<const double> summed_scores, double r) {
  OneShotResult out;
  out.mask = retain_by_scores(pretrained, summed_scores, r);
  MaskedNetwork net = pretrained;
  net.mask = full_mask(net.prunable_units());
  for (std::size_t i = 0; i < out.mask.retained.size(); ++i)
    if (!out.mask.retained[i]) net.prune_unit(i);
  out.subnet = extract_subnetwork(net);
  return out;
}

struct FineTuneResult {
  MaskedNetwork net;
  double initial_accuracy = 0.0;
  double accuracy = 0.0;
  std::size_t iterations = 0;
  FlopsLedger flops;
};

/// J steps of plain cross-entropy SGD over every parameter of `net`,
/// cosine-annealed; reports test accuracy before and after.
inline FineTuneResult fine_tune(MaskedNetwork net, const TaskData& data, std::size_t iterations, LrSchedule lr,
                                std::size_t batch_size, std::uint64_t seed) {
  require(batch_size > 0, ErrorCode::invalid_argument, "batch size must be positive");
  FineTuneResult out;
  net.set_weights_trainable(true);
  out.initial_accuracy = accuracy(net, data.test_x, data.test_y);
  out.flops.forward_flops_per_sample = count_flops(net);
  if (iterations > 0) {
    lr.total_steps = iterations;
    validate(lr);
    BatchSampler sampler(data.train_y.size(), batch_size, derive_seed(seed, "finetune/batches"));
    auto params = net.weight_parameters();
    for (std::size_t j = 0; j < iterations; ++j) {
      const auto idx = sampler.next();
      const Tensor x = take_rows(data.train_x, idx);
      const auto y = take(data.train_y, idx);
      Graph g;
      g.backward(ops::cross_entropy(g, forward(g, net, x), y));
      sgd_step(params, cosine_lr(lr, j));
      track_training_flops(out.flops, net, idx.size());
    }
  }
  out.iterations = iterations;
  out.accuracy = iterations > 0 ? accuracy(net, data.test_x, data.test_y) : out.initial_accuracy;
  out.net = std::move(net);
  return out;
}

/// The backbone specialised to a task: classifier rows of the task's
/// classes when they belong to the backbone's label space, otherwise a
/// fresh zero head.
inline MaskedNetwork task_network(const MaskedNetwork& pretrained, const TaskSpec& task) {
  if (task.domain == "base") return with_class_head(pretrained, task.classes);
  return with_fresh_head(pretrained, task.classes.size());
}

/// The first `cap` training samples (all when cap is 0 or larger).
inline std::pair<Tensor, std::vector<int>> leep_sample(const TaskData& data, std::size_t cap) {
  const std::size_t n = data.train_y.size();
  const std::size_t k = cap == 0 ? n : std::min(cap, n);
  std::vector<std::size_t> idx(k);
  for (std::size_t i = 0; i < k; ++i) idx[i] = i;
  return {take_rows(data.train_x, idx), take(data.train_y, idx)};
}

struct SmspOutcome {
  std::uint64_t task_id = 0;
  SmspMask mask;
  double initial_accuracy = 0.0;
  double accuracy = 0.0;
  std::size_t fine_tune_iterations = 0;
  FlopsLedger flops;
  std::size_t retained_units = 0;
};

namespace detail {

inline std::vector<PrunedRecord> pick_records(std::span<const PrunedRecord> pool, std::span<const std::uint64_t> ids) {
  std::vector<PrunedRecord> out;
  for (auto id : ids) {
    const auto it = std::find_if(pool.begin(), pool.end(), [id](const PrunedRecord& r) { return r.record_id == id; });
    require(it != pool.end(), ErrorCode::not_found, "record " + std::to_string(id) + " not in pool");
    out.push_back(*it);
  }
  return out;
}

}  // namespace detail

/// Prune-and-fine-tune from an explicit neighbor list.
inline SmspOutcome smsp_from_neighbors(const MaskedNetwork& pretrained, std::span<const PrunedRecord> pool,
                                       const TaskSpec& task, const TaskData& data,
                                       std::span<const std::uint64_t> neighbor_ids, const SmspConfig& cfg) {
  const auto chosen = detail::pick_records(pool, neighbor_ids);
  const auto summed = sum_masks(chosen);
  auto pruned = one_shot_prune(task_network(pretrained, task), summed, cfg.pruning_ratio);
  pruned.mask.neighbor_ids.assign(neighbor_ids.begin(), neighbor_ids.end());
  auto tuned = fine_tune(std::move(pruned.subnet), data, cfg.fine_tune_iterations, cfg.lr, cfg.batch_size,
                         derive_seed(cfg.seed, task.task_id));
  SmspOutcome out;
  out.task_id = task.task_id;
  out.mask = std::move(pruned.mask);
  out.initial_accuracy = tuned.initial_accuracy;
  out.accuracy = tuned.accuracy;
  out.fine_tune_iterations = tuned.iterations;
  out.flops = tuned.flops;
  out.retained_units = out.mask.retained.size() - out.mask.pruned_count;
  return out;
}

/// Similarity table, neighbor selection, score summation, one-shot
/// pruning and fine-tuning for one task.
inline SmspOutcome smsp_pipeline(const MaskedNetwork& pretrained, std::span<const PrunedRecord> pool,
                                 const TaskSpec& task, const TaskData& data, const SmspConfig& cfg) {
  require(!pool.empty(), ErrorCode::not_found, "SMSP needs a non-empty pool");
  const auto [x, y] = leep_sample(data, cfg.leep_samples);
  const auto table = build_similarity_table(pretrained, pool, x, y, task.task_id);
  const auto ids = select_neighbors(table, cfg.neighbor_count, cfg.class_disjoint, task.classes);
  return smsp_from_neighbors(pretrained, pool, task, data, ids, cfg);
}

}  // namespace smsp
