// SPDX-License-Identifier: Apache-2.0
//
// Automatic mask pruning: mask scores (and optionally weights) are trained
// under cross-entropy plus an L1 penalty on the scores; units whose score
// falls below a threshold are pruned until the target ratio is met.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "smsp/common.hpp"
#include "smsp/data.hpp"
#include "smsp/gradcore.hpp"
#include "smsp/maskednet.hpp"
#include "smsp/record.hpp"

namespace smsp {

struct AmpConfig {
  std::size_t iterations = 500;
  double target_ratio = 0.9;
  double threshold = 0.01;
  double l1_weight = 0.1;
  std::size_t batch_size = 32;
  /// total_steps is replaced by `iterations`.
  LrSchedule lr{0.3, 0.06, 1};
  bool frozen_weights = false;
  std::uint64_t seed = 0;
};

inline void validate(const AmpConfig& cfg, const MaskedNetwork& net) {
  require(cfg.iterations > 0, ErrorCode::invalid_argument, "AMP needs at least one iteration");
  require(cfg.threshold > 0.0, ErrorCode::invalid_argument, "AMP threshold must be positive");
  require(cfg.l1_weight >= 0.0, ErrorCode::invalid_argument, "AMP L1 weight must be non-negative");
  require(cfg.batch_size > 0, ErrorCode::invalid_argument, "AMP batch size must be positive");
  require(cfg.target_ratio >= 0.0 && cfg.target_ratio < 1.0, ErrorCode::invalid_argument,
          "AMP target ratio must lie in [0, 1)");
  const double n = static_cast<double>(net.prunable_units());
  require(n > 0, ErrorCode::invalid_argument, "network has no prunable units");
  const double max_ratio = 1.0 - static_cast<double>(net.arch.hidden.size()) / n;
  require(cfg.target_ratio <= max_ratio, ErrorCode::infeasible,
          "target ratio " + std::to_string(cfg.target_ratio) + " exceeds the per-layer floor limit " +
              std::to_string(max_ratio));
}

struct AmpResult {
  MaskedNetwork pruned_net;
  PrunedRecord record;
  std::size_t iterations_used = 0;
  double final_accuracy = 0.0;
  double achieved_ratio = 0.0;
  FlopsLedger flops;
  /// Target ratio reached.
  bool converged = false;
  /// The per-layer floor kept a unit whose score was below the threshold.
  bool degenerate = false;
  /// |Ω| after the pruning check of every iteration.
  std::vector<std::size_t> retained_history;
  /// Mean |S_i| over Ω after the optimization step of every iteration.
  std::vector<double> mean_abs_score_history;
};

/// Cross-entropy of the masked network plus λ Σ_{i∈Ω} |S_i|.
inline Var amp_objective(Graph& g, MaskedNetwork& net, const Tensor& batch, std::span<const int> labels,
                         double l1_weight) {
  require(l1_weight >= 0.0, ErrorCode::invalid_argument, "L1 weight must be non-negative");
  Var ce = ops::cross_entropy(g, masked_forward(g, net, batch), labels);
  if (l1_weight == 0.0) return ce;
  Var l1 = ops::abs_sum(g, g.param(net.mask.scores), net.mask.retained);
  return ops::add(g, ce, ops::scale(g, l1, l1_weight));
}

/// Prunes every retained unit with score < threshold. A layer whose units
/// would all go keeps its highest-score unit (lowest index on ties).
/// Returns true when that floor was needed.
inline bool prune_below_threshold(MaskedNetwork& net, double threshold) {
  const auto off = net.unit_offsets();
  bool floor = false;
  for (std::size_t l = 0; l + 1 < off.size(); ++l) {
    std::vector<std::size_t> below;
    std::size_t retained = 0;
    for (std::size_t i = off[l]; i < off[l + 1]; ++i) {
      if (!net.mask.retained[i]) continue;
      ++retained;
      if (net.mask.scores.value[i] < threshold) below.push_back(i);
    }
    if (below.empty()) continue;
    if (below.size() == retained) {
      floor = true;
      std::size_t keep = below.front();
      for (auto i : below)
        if (net.mask.scores.value[i] > net.mask.scores.value[keep]) keep = i;
      std::erase(below, keep);
    }
    for (auto i : below) net.prune_unit(i);
  }
  return floor;
}

inline double mean_abs_retained_score(const MaskedNetwork& net) {
  double acc = 0.0;
  std::size_t k = 0;
  for (std::size_t i = 0; i < net.mask.size(); ++i)
    if (net.mask.retained[i]) {
      acc += std::abs(net.mask.scores.value[i]);
      ++k;
    }
  return k ? acc / static_cast<double>(k) : 0.0;
}

/// Runs the pruning loop on a task-headed network. Every iteration first
/// prunes units below the threshold (until the target ratio is reached),
/// then applies one SGD step of amp_objective on a mini-batch. With
/// frozen_weights only the mask scores move.
inline AmpResult amp_prune(MaskedNetwork net, const TaskData& data, const AmpConfig& cfg) {
  validate(cfg, net);
  require(data.train_y.size() == data.train_x.dim(0) && !data.train_y.empty(), ErrorCode::invalid_argument,
          "AMP needs non-empty training data");
  const std::size_t n = net.prunable_units();
  require(net.mask.enabled && net.mask.retained_count() == n, ErrorCode::invalid_argument,
          "AMP starts from a full retained set");
  for (std::size_t i = 0; i < n; ++i)
    require(net.mask.scores.value[i] == 1.0, ErrorCode::invalid_argument, "AMP starts from mask scores of 1");

  net.set_weights_trainable(!cfg.frozen_weights);
  net.mask.scores.trainable = true;
  LrSchedule schedule = cfg.lr;
  schedule.total_steps = cfg.iterations;
  validate(schedule);

  AmpResult result;
  BatchSampler sampler(data.train_y.size(), cfg.batch_size, derive_seed(cfg.seed, "amp/batches"));
  const auto params = net.all_parameters();
  bool stopped = false;
  for (std::size_t j = 0; j < cfg.iterations; ++j) {
    if (!stopped) {
      result.degenerate = prune_below_threshold(net, cfg.threshold) || result.degenerate;
      stopped = net.pruning_ratio() >= cfg.target_ratio;
    }
    result.retained_history.push_back(net.mask.retained_count());

    const auto idx = sampler.next();
    const Tensor x = take_rows(data.train_x, idx);
    const auto y = take(data.train_y, idx);
    Graph g;
    g.backward(amp_objective(g, net, x, y, cfg.l1_weight));
    sgd_step(params, cosine_lr(schedule, j));
    track_training_flops(result.flops, net, idx.size());
    result.mean_abs_score_history.push_back(mean_abs_retained_score(net));
  }

  result.iterations_used = cfg.iterations;
  result.achieved_ratio = net.pruning_ratio();
  result.converged = result.achieved_ratio >= cfg.target_ratio;
  if (!data.test_y.empty()) result.final_accuracy = accuracy(net, data.test_x, data.test_y);
  RecordMetadata meta;
  meta.tau = cfg.threshold;
  meta.lambda = cfg.l1_weight;
  meta.iterations = static_cast<std::uint32_t>(cfg.iterations);
  meta.seed = cfg.seed;
  meta.achieved_ratio = result.achieved_ratio;
  result.record = make_record(net, data.classes, static_cast<float>(cfg.target_ratio), meta);
  result.pruned_net = std::move(net);
  return result;
}

/// Pool construction: frozen-weight AMP of the backbone on one task. The
/// backbone is specialised to the task's classes; its weights are checked
/// to be bit-identical after the run.
inline AmpResult build_pool_entry(const MaskedNetwork& pretrained, const TaskSpec& task, const TaskData& data,
                                     AmpConfig cfg) {
  require(cfg.frozen_weights, ErrorCode::invalid_argument, "pool entries are built with frozen weights");
  MaskedNetwork net = with_class_head(pretrained, task.classes);
  net.mask = full_mask(net.prunable_units());
  const MaskedNetwork before = net;
  AmpResult r = amp_prune(std::move(net), data, cfg);
  for (std::size_t l = 0; l < before.hidden.size(); ++l)
    require(before.hidden[l].weight.value == r.pruned_net.hidden[l].weight.value &&
                before.hidden[l].bias.value == r.pruned_net.hidden[l].bias.value,
            ErrorCode::invalid_argument, "frozen AMP modified backbone weights");
  require(before.classifier.weight.value == r.pruned_net.classifier.weight.value,
          ErrorCode::invalid_argument, "frozen AMP modified classifier weights");
  r.record.meta.task_id = task.task_id;
  return r;
}

}  // namespace smsp
