// SPDX-License-Identifier: Apache-2.0
//
// Backbone pre-training, backbone checkpoints and the comparison methods
// (random masks, AMP from the pre-trained weights).
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "smsp/amp.hpp"
#include "smsp/common.hpp"
#include "smsp/data.hpp"
#include "smsp/gradcore.hpp"
#include "smsp/maskednet.hpp"
#include "smsp/one_shot.hpp"
#include "smsp/poolstore.hpp"

namespace smsp {

struct PretrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  /// total_steps is replaced by the number of optimizer steps of the run.
  LrSchedule lr{0.05, 0.0, 1};
  std::uint64_t seed = 0;
};

struct PretrainResult {
  MaskedNetwork net;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::vector<double> epoch_loss;
  std::size_t steps = 0;
};

/// Task over every class of the dataset.
inline TaskSpec all_classes_task(const Dataset& d, std::uint64_t seed = 0) {
  std::vector<int> classes(d.num_classes);
  std::iota(classes.begin(), classes.end(), 0);
  return make_task(d, 0, std::move(classes), seed);
}

/// Trains an all-class classifier on the dataset's training split.
inline PretrainResult pretrain_backbone(const Dataset& d, Architecture arch, const PretrainConfig& cfg) {
  arch.num_classes = d.num_classes;
  require(arch.input == InputShape{d.channels, d.height, d.width}, ErrorCode::shape_mismatch,
          "architecture input does not match dataset image size");
  PretrainResult out;
  out.net = initialize_network(arch, derive_seed(cfg.seed, "init"));
  const TaskData data = materialize(d, all_classes_task(d, cfg.seed));
  const std::size_t per_epoch = (data.train_y.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t steps = cfg.epochs * per_epoch;
  if (steps > 0) {
    LrSchedule lr = cfg.lr;
    lr.total_steps = steps;
    validate(lr);
    BatchSampler sampler(data.train_y.size(), cfg.batch_size, derive_seed(cfg.seed, "pretrain/batches"));
    auto params = out.net.weight_parameters();
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      double total = 0.0;
      for (std::size_t s = 0; s < per_epoch; ++s) {
        const std::size_t step = epoch * per_epoch + s;
        const auto idx = sampler.next();
        const Tensor x = take_rows(data.train_x, idx);
        const auto y = take(data.train_y, idx);
        Graph g;
        Var loss;
        try {
          loss = ops::cross_entropy(g, forward(g, out.net, x, MaskMode::ignore), y);
        } catch (const Error& e) {
          if (e.code() != ErrorCode::non_finite) throw;
          fail(ErrorCode::non_finite, "pretraining diverged at epoch " + std::to_string(epoch) + " step " +
                                          std::to_string(step) + " (lr " + std::to_string(cosine_lr(lr, step)) +
                                          "): " + e.what());
        }
        total += g.value(loss).item();
        g.backward(loss);
        sgd_step(params, cosine_lr(lr, step));
      }
      out.epoch_loss.push_back(total / static_cast<double>(per_epoch));
    }
  }
  out.steps = steps;
  out.train_accuracy = accuracy(out.net, data.train_x, data.train_y);
  out.test_accuracy = accuracy(out.net, data.test_x, data.test_y);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   char[4] "SMCK" | u32 version | u16+bytes arch_id | u32 num_classes |
//   u64 config_hash | f64 values of every weight tensor (hidden layers in
//   order, weight then bias, then the classifier) | u64 FNV-1a checksum

inline constexpr std::array<char, 4> kCheckpointMagic{'S', 'M', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  MaskedNetwork net;
  std::uint64_t config_hash = 0;
};

inline void save_checkpoint(const std::filesystem::path& path, MaskedNetwork net, std::uint64_t config_hash) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.str(net.arch.id);
  w.u32(static_cast<std::uint32_t>(net.arch.num_classes));
  w.u64(config_hash);
  for (Parameter* p : net.weight_parameters())
    for (double v : p->value.values()) w.f64(v);
  w.seal();
  detail::write_file_atomic(path, w.bytes());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  detail::ByteReader rd(bytes, path.filename().string());
  rd.precheck_seal();
  rd.expect_magic(kCheckpointMagic);
  require(rd.u32() == kCheckpointVersion, ErrorCode::bad_format, "unsupported checkpoint version");
  const std::string id = rd.str();
  auto arch = find_architecture(id);
  require(arch.has_value(), ErrorCode::arch_mismatch, "checkpoint of unknown architecture '" + id + "'");
  arch->num_classes = rd.u32();
  Checkpoint ck;
  ck.config_hash = rd.u64();
  ck.net = initialize_network(*arch, 0);
  for (Parameter* p : ck.net.weight_parameters())
    for (double& v : p->value.values()) v = rd.f64();
  rd.verify_seal();
  return ck;
}

// ---------------------------------------------------------------------------
// Comparison methods

/// Uniformly random retained set of the size SMSP would keep (per-layer
/// floor respected), then the same fine-tuning as SMSP.
inline SmspOutcome run_random_mask_baseline(const MaskedNetwork& pretrained, const TaskSpec& task,
                                            const TaskData& data, const SmspConfig& cfg) {
  const MaskedNetwork net = task_network(pretrained, task);
  std::mt19937_64 rng(derive_seed(cfg.seed, "random-mask/" + std::to_string(task.task_id)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> scores(net.prunable_units());
  for (auto& s : scores) s = unit(rng);
  auto pruned = one_shot_prune(net, scores, cfg.pruning_ratio);
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

/// AMP from the pre-trained weights with weights and scores both trained.
inline AmpResult run_amp_baseline(const MaskedNetwork& pretrained, const TaskSpec& task, const TaskData& data,
                                  AmpConfig cfg) {
  cfg.frozen_weights = false;
  MaskedNetwork net = task_network(pretrained, task);
  net.mask = full_mask(net.prunable_units());
  AmpResult r = amp_prune(std::move(net), data, cfg);
  r.record.meta.task_id = task.task_id;
  return r;
}

}  // namespace smsp
