// SPDX-License-Identifier: Apache-2.0
//
// Scenario runner. A Workspace holds the dataset, the pre-trained backbone
// and the pools; each scenario produces per-task rows plus a summary over
// tasks, written as CSV and markdown.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "smsp/amp.hpp"
#include "smsp/bench.hpp"
#include "smsp/common.hpp"
#include "smsp/config.hpp"
#include "smsp/data.hpp"
#include "smsp/maskednet.hpp"
#include "smsp/one_shot.hpp"
#include "smsp/poolstore.hpp"
#include "smsp/record.hpp"
#include "smsp/tasksim.hpp"

namespace smsp {

inline constexpr std::uint64_t kPoolTaskIdBase = 1000;
inline constexpr std::uint64_t kTestTaskIdBase = 5000;
inline constexpr std::uint64_t kShiftedTaskIdBase = 7000;

struct TaskRow {
  std::string setting;
  std::string method;
  std::uint64_t task_id = 0;
  double value = 0.0;  // accuracy unless the scenario says otherwise
  double initial_accuracy = 0.0;
  double training_flops = 0.0;
  double selection_flops = 0.0;
  std::size_t pruning_iterations = 0;
  std::size_t finetune_iterations = 0;
  double achieved_ratio = 0.0;
  std::string note;
};

struct SummaryRow {
  std::string setting;
  std::string method;
  std::string metric = "accuracy";
  std::size_t n = 0;
  double mean = 0.0;
  double stddev = 0.0;
  double training_flops = 0.0;
  double selection_flops = 0.0;
  std::size_t pruning_iterations = 0;
  std::size_t finetune_iterations = 0;
  std::string config_hash;
};

struct ExperimentReport {
  std::string scenario;
  std::string config_hash;
  std::vector<TaskRow> tasks;
  std::vector<SummaryRow> summary;

  const SummaryRow* find(std::string_view setting, std::string_view method,
                         std::string_view metric = "accuracy") const {
    for (const auto& r : summary)
      if (r.setting == setting && r.method == method && r.metric == metric) return &r;
    return nullptr;
  }

  const SummaryRow& at(std::string_view setting, std::string_view method, std::string_view metric = "accuracy") const {
    const SummaryRow* r = find(setting, method, metric);
    require(r != nullptr, ErrorCode::not_found,
            "report '" + scenario + "' has no row " + std::string(setting) + "/" + std::string(method) + "/" +
                std::string(metric));
    return *r;
  }
};

inline const std::vector<std::string>& scenario_names() {
  static const std::vector<std::string> names{"pool-build",         "main-comparison",   "size-transfer",
                                              "ratio-transfer",     "unseen-distribution", "neighbor-ablation",
                                              "similarity-ablation", "overlap-analysis"};
  return names;
}

// ---------------------------------------------------------------------------
// Statistics

inline double mean_of(std::span<const double> v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Sample standard deviation; 0 for fewer than two values.
inline double stddev_of(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

/// One-sided permutation test of mean(a) > mean(b): the fraction of label
/// shuffles whose mean difference reaches the observed one, with the
/// observed labelling counted once.
inline double permutation_p_value(std::span<const double> a, std::span<const double> b, std::size_t permutations,
                                  std::uint64_t seed) {
  require(!a.empty() && !b.empty(), ErrorCode::invalid_argument, "permutation test needs two non-empty samples");
  std::vector<double> all(a.begin(), a.end());
  all.insert(all.end(), b.begin(), b.end());
  const double observed = mean_of(a) - mean_of(b);
  std::mt19937_64 rng(seed);
  std::size_t hits = 0;
  for (std::size_t p = 0; p < permutations; ++p) {
    std::shuffle(all.begin(), all.end(), rng);
    const std::span<const double> s(all);
    const double d = mean_of(s.first(a.size())) - mean_of(s.subspan(a.size()));
    if (d >= observed - 1e-12) ++hits;
  }
  return static_cast<double>(hits + 1) / static_cast<double>(permutations + 1);
}

// ---------------------------------------------------------------------------
// Workspace

struct Workspace {
  ExperimentConfig cfg;
  Dataset base;
  Dataset shifted;
  MaskedNetwork backbone;
  double backbone_test_accuracy = 0.0;
  /// Pools keyed by task size; the main pool has size cfg.pool.task_size.
  std::map<std::size_t, std::vector<PrunedRecord>> pools;
  std::map<std::size_t, std::vector<AmpResult>> pool_runs;

  const std::vector<PrunedRecord>& pool() const {
    const auto it = pools.find(cfg.pool.task_size);
    require(it != pools.end(), ErrorCode::not_found, "main pool has not been built");
    return it->second;
  }
};

/// Generates both datasets and pre-trains the backbone.
inline Workspace make_workspace(const ExperimentConfig& cfg) {
  validate(cfg);
  Workspace ws;
  ws.cfg = cfg;
  ws.base = generate_synthetic_dataset(dataset_source(cfg, false), cfg.data_seed);
  ws.shifted = generate_synthetic_dataset(dataset_source(cfg, true), cfg.data_seed);
  const auto pr = pretrain_backbone(ws.base, *find_architecture(cfg.arch), cfg.pretrain);
  ws.backbone = pr.net;
  ws.backbone_test_accuracy = pr.test_accuracy;
  return ws;
}

/// Workspace around an existing backbone (e.g. a loaded checkpoint).
inline Workspace make_workspace(const ExperimentConfig& cfg, MaskedNetwork backbone) {
  validate(cfg);
  Workspace ws;
  ws.cfg = cfg;
  ws.base = generate_synthetic_dataset(dataset_source(cfg, false), cfg.data_seed);
  ws.shifted = generate_synthetic_dataset(dataset_source(cfg, true), cfg.data_seed);
  require(backbone.arch.num_classes == ws.base.num_classes, ErrorCode::arch_mismatch,
          "backbone class count differs from the dataset");
  ws.backbone = std::move(backbone);
  const auto all = materialize(ws.base, all_classes_task(ws.base));
  ws.backbone_test_accuracy = accuracy(ws.backbone, all.test_x, all.test_y);
  return ws;
}

inline std::vector<TaskSpec> pool_tasks(const Dataset& base, std::size_t task_size, std::size_t count,
                                        std::uint64_t seed) {
  return sample_tasks(base, task_size, count, derive_seed(seed, task_size), {}, kPoolTaskIdBase * task_size);
}

/// Frozen-weight AMP over `tasks`; record ids are 1.. in task order.
inline std::vector<AmpResult> build_pool(const MaskedNetwork& backbone, const Dataset& base,
                                         const std::vector<TaskSpec>& tasks, AmpConfig amp) {
  amp.frozen_weights = true;
  std::vector<AmpResult> out;
  for (const auto& t : tasks) {
    AmpConfig c = amp;
    c.seed = derive_seed(amp.seed, t.task_id);
    AmpResult r = build_pool_entry(backbone, t, materialize(base, t), c);
    r.record.record_id = out.size() + 1;
    out.push_back(std::move(r));
  }
  return out;
}

/// Builds (once) the pool of `task_size`-class tasks.
inline const std::vector<PrunedRecord>& ensure_pool(Workspace& ws, std::size_t task_size) {
  if (auto it = ws.pools.find(task_size); it != ws.pools.end()) return it->second;
  AmpConfig amp = ws.cfg.pool.amp;
  amp.seed = ws.cfg.pool.seed;
  auto runs = build_pool(ws.backbone, ws.base, pool_tasks(ws.base, task_size, ws.cfg.pool.tasks, ws.cfg.pool.seed),
                         amp);
  std::vector<PrunedRecord> records;
  for (const auto& r : runs) records.push_back(r.record);
  ws.pool_runs[task_size] = std::move(runs);
  return ws.pools[task_size] = std::move(records);
}

inline const std::vector<PrunedRecord>& ensure_pool(Workspace& ws) { return ensure_pool(ws, ws.cfg.pool.task_size); }

/// Loads the main pool from a pool directory, or builds it and stores it
/// there when the directory holds no index yet.
inline const std::vector<PrunedRecord>& attach_pool_dir(Workspace& ws, const std::filesystem::path& dir) {
  if (std::filesystem::exists(index_path(dir))) {
    PoolFilter f;
    f.arch_id = ws.backbone.arch.id;
    f.task_size = static_cast<std::uint32_t>(ws.cfg.pool.task_size);
    auto records = load_records(dir, f);
    require(!records.empty(), ErrorCode::not_found,
            "pool '" + dir.string() + "' has no " + std::to_string(ws.cfg.pool.task_size) + "-class records for " +
                ws.backbone.arch.id);
    return ws.pools[ws.cfg.pool.task_size] = std::move(records);
  }
  const auto& pool = ensure_pool(ws);
  for (const auto& r : pool) save_record(dir, r);
  return pool;
}

// ---------------------------------------------------------------------------
// Methods on one task

/// Forward FLOPs of scoring `samples` target samples with every record of
/// `pool`, each through its own retained sub-network.
inline double selection_flops(const Workspace& ws, std::span<const PrunedRecord> pool, std::size_t samples) {
  double total = 0.0;
  for (const auto& rec : pool) {
    MaskedNetwork net = with_class_head(ws.backbone, rec.class_labels);
    for (std::size_t i = 0; i < rec.scores.size(); ++i)
      if (rec.scores[i] == 0.0F) net.prune_unit(i);
    total += static_cast<double>(count_flops(net)) * static_cast<double>(samples);
  }
  return total;
}

inline TaskRow smsp_row(const SmspOutcome& o, std::string setting, std::string method, double sel_flops) {
  TaskRow row;
  row.setting = std::move(setting);
  row.method = std::move(method);
  row.task_id = o.task_id;
  row.value = o.accuracy;
  row.initial_accuracy = o.initial_accuracy;
  row.training_flops = static_cast<double>(o.flops.cumulative_training_flops);
  row.selection_flops = sel_flops;
  row.finetune_iterations = o.fine_tune_iterations;
  row.achieved_ratio = o.mask.achieved_ratio;
  return row;
}

inline TaskRow run_smsp_task(const Workspace& ws, std::span<const PrunedRecord> pool, const TaskSpec& task,
                             const TaskData& data, const SmspConfig& cfg, std::string setting,
                             std::string method = "SMSP") {
  const auto o = smsp_pipeline(ws.backbone, pool, task, data, cfg);
  const std::size_t samples = cfg.leep_samples == 0 ? data.train_y.size() : std::min(cfg.leep_samples, data.train_y.size());
  return smsp_row(o, std::move(setting), std::move(method), selection_flops(ws, pool, samples));
}

inline TaskRow run_random_task(const Workspace& ws, const TaskSpec& task, const TaskData& data, const SmspConfig& cfg,
                               std::string setting) {
  return smsp_row(run_random_mask_baseline(ws.backbone, task, data, cfg), std::move(setting), "Random", 0.0);
}

inline TaskRow run_amp_task(const Workspace& ws, const TaskSpec& task, const TaskData& data, AmpConfig cfg,
                            std::string setting) {
  cfg.seed = derive_seed(ws.cfg.experiment.seed, task.task_id);
  const auto r = run_amp_baseline(ws.backbone, task, data, cfg);
  TaskRow row;
  row.setting = std::move(setting);
  row.method = "AMP";
  row.task_id = task.task_id;
  row.value = r.final_accuracy;
  row.initial_accuracy = r.final_accuracy;
  row.training_flops = static_cast<double>(r.flops.cumulative_training_flops);
  row.pruning_iterations = r.iterations_used;
  row.achieved_ratio = r.achieved_ratio;
  if (r.degenerate) row.note = "floor";
  return row;
}

// ---------------------------------------------------------------------------
// Report assembly

inline std::string row_hash(const ExperimentConfig& cfg, std::string_view scenario, std::string_view setting,
                            std::string_view method) {
  return hash_hex(fnv1a(canonical_config(cfg) + "scenario=" + std::string(scenario) + "\nsetting=" +
                        std::string(setting) + "\nmethod=" + std::string(method) + "\n"));
}

/// One summary row per (setting, method) of `rows` with the given metric,
/// in first-appearance order. Rows are aggregated in task_id order.
inline void summarize(ExperimentReport& report, const ExperimentConfig& cfg, std::span<const TaskRow> rows,
                      const std::string& metric = "accuracy") {
  std::vector<std::pair<std::string, std::string>> keys;
  for (const auto& r : rows)
    if (std::find(keys.begin(), keys.end(), std::pair{r.setting, r.method}) == keys.end())
      keys.emplace_back(r.setting, r.method);
  for (const auto& [setting, method] : keys) {
    std::vector<const TaskRow*> group;
    for (const auto& r : rows)
      if (r.setting == setting && r.method == method) group.push_back(&r);
    std::stable_sort(group.begin(), group.end(), [](auto* a, auto* b) { return a->task_id < b->task_id; });
    std::vector<double> values, flops, sel;
    for (auto* r : group) {
      values.push_back(r->value);
      flops.push_back(r->training_flops);
      sel.push_back(r->selection_flops);
    }
    SummaryRow s;
    s.setting = setting;
    s.method = method;
    s.metric = metric;
    s.n = group.size();
    s.mean = mean_of(values);
    s.stddev = stddev_of(values);
    s.training_flops = mean_of(flops);
    s.selection_flops = mean_of(sel);
    s.pruning_iterations = group.front()->pruning_iterations;
    s.finetune_iterations = group.front()->finetune_iterations;
    s.config_hash = row_hash(cfg, report.scenario, setting, method);
    report.summary.push_back(std::move(s));
  }
}

inline SummaryRow statistic_row(const ExperimentConfig& cfg, std::string_view scenario, std::string setting,
                                std::string method, std::string metric, std::span<const double> values) {
  SummaryRow s;
  s.config_hash = row_hash(cfg, scenario, setting, method + "/" + metric);
  s.setting = std::move(setting);
  s.method = std::move(method);
  s.metric = std::move(metric);
  s.n = values.size();
  s.mean = mean_of(values);
  s.stddev = stddev_of(values);
  return s;
}

inline ExperimentReport new_report(const ExperimentConfig& cfg, std::string scenario) {
  ExperimentReport r;
  r.scenario = std::move(scenario);
  r.config_hash = hash_hex(config_hash(cfg));
  return r;
}

inline std::vector<TaskSpec> test_tasks(const Workspace& ws, std::size_t task_size) {
  const auto& e = ws.cfg.experiment;
  return sample_tasks(ws.base, task_size, e.test_tasks, derive_seed(e.seed, task_size), {},
                      kTestTaskIdBase + 100 * task_size);
}

inline SmspConfig smsp_config(const Workspace& ws) {
  SmspConfig c = ws.cfg.smsp;
  c.seed = ws.cfg.experiment.seed;
  return c;
}

inline std::string ratio_label(double r) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "r=%.2f", r);
  return buf;
}

// ---------------------------------------------------------------------------
// Scenarios

inline ExperimentReport scenario_pool_build(Workspace& ws) {
  auto report = new_report(ws.cfg, "pool-build");
  ensure_pool(ws);
  const auto& runs = ws.pool_runs.at(ws.cfg.pool.task_size);
  const std::string setting = ratio_label(ws.cfg.pool.amp.target_ratio);
  std::vector<double> ratios, converged;
  for (const auto& r : runs) {
    TaskRow row;
    row.setting = setting;
    row.method = "AMP-frozen";
    row.task_id = r.record.meta.task_id;
    row.value = r.final_accuracy;
    row.initial_accuracy = r.final_accuracy;
    row.training_flops = static_cast<double>(r.flops.cumulative_training_flops);
    row.pruning_iterations = r.iterations_used;
    row.achieved_ratio = r.achieved_ratio;
    row.note = r.converged ? "converged" : (r.degenerate ? "floor" : "short");
    report.tasks.push_back(row);
    ratios.push_back(r.achieved_ratio);
    converged.push_back(r.converged ? 1.0 : 0.0);
  }
  summarize(report, ws.cfg, report.tasks);
  report.summary.push_back(statistic_row(ws.cfg, report.scenario, setting, "AMP-frozen", "achieved_ratio", ratios));
  report.summary.push_back(statistic_row(ws.cfg, report.scenario, setting, "AMP-frozen", "converged", converged));
  return report;
}

inline ExperimentReport scenario_main_comparison(Workspace& ws) {
  auto report = new_report(ws.cfg, "main-comparison");
  const auto& pool = ensure_pool(ws);
  const auto cfg = smsp_config(ws);
  AmpConfig amp = ws.cfg.amp;
  amp.target_ratio = cfg.pruning_ratio;
  const std::string setting = ratio_label(cfg.pruning_ratio);
  for (const auto& t : test_tasks(ws, ws.cfg.experiment.task_size)) {
    const auto data = materialize(ws.base, t);
    report.tasks.push_back(run_smsp_task(ws, pool, t, data, cfg, setting));
    report.tasks.push_back(run_amp_task(ws, t, data, amp, setting));
    report.tasks.push_back(run_random_task(ws, t, data, cfg, setting));
  }
  summarize(report, ws.cfg, report.tasks);
  return report;
}

inline ExperimentReport scenario_size_transfer(Workspace& ws) {
  auto report = new_report(ws.cfg, "size-transfer");
  auto cfg = smsp_config(ws);
  cfg.class_disjoint = ws.cfg.size_transfer_class_disjoint;
  for (std::size_t pool_size : ws.cfg.task_sizes) ensure_pool(ws, pool_size);
  for (std::size_t target : ws.cfg.task_sizes) {
    const std::string setting = "target=" + std::to_string(target);
    for (const auto& t : test_tasks(ws, target)) {
      const auto data = materialize(ws.base, t);
      for (std::size_t pool_size : ws.cfg.task_sizes)
        report.tasks.push_back(
            run_smsp_task(ws, ws.pools.at(pool_size), t, data, cfg, setting, "SMSP pool=" + std::to_string(pool_size)));
      report.tasks.push_back(run_random_task(ws, t, data, cfg, setting));
    }
  }
  summarize(report, ws.cfg, report.tasks);
  return report;
}

inline ExperimentReport scenario_ratio_transfer(Workspace& ws) {
  auto report = new_report(ws.cfg, "ratio-transfer");
  const auto& pool = ensure_pool(ws);
  auto ratios = ws.cfg.transfer_ratios;
  std::sort(ratios.begin(), ratios.end());
  std::vector<double> nested;
  for (const auto& t : test_tasks(ws, ws.cfg.experiment.task_size)) {
    const auto data = materialize(ws.base, t);
    std::vector<std::vector<std::uint8_t>> retained;
    for (double r : ratios) {
      auto cfg = smsp_config(ws);
      cfg.pruning_ratio = r;
      const auto o = smsp_pipeline(ws.backbone, pool, t, data, cfg);
      report.tasks.push_back(smsp_row(o, ratio_label(r), "SMSP", 0.0));
      retained.push_back(o.mask.retained);
      report.tasks.push_back(run_random_task(ws, t, data, cfg, ratio_label(r)));
    }
    bool ok = true;
    for (std::size_t i = 1; i < retained.size(); ++i)
      for (std::size_t u = 0; u < retained[i].size(); ++u) ok = ok && (!retained[i][u] || retained[i - 1][u]);
    nested.push_back(ok ? 1.0 : 0.0);
  }
  summarize(report, ws.cfg, report.tasks);
  report.summary.push_back(statistic_row(ws.cfg, report.scenario, "all", "SMSP", "nested_retention", nested));
  return report;
}

inline ExperimentReport scenario_unseen_distribution(Workspace& ws) {
  auto report = new_report(ws.cfg, "unseen-distribution");
  const auto& pool = ensure_pool(ws);
  const auto cfg = smsp_config(ws);
  AmpConfig amp = ws.cfg.amp;
  amp.target_ratio = cfg.pruning_ratio;
  const auto& e = ws.cfg.experiment;
  const auto tasks =
      sample_tasks(ws.shifted, e.task_size, e.test_tasks, derive_seed(e.seed, "shifted"), {}, kShiftedTaskIdBase);
  const std::string setting = "shifted " + ratio_label(cfg.pruning_ratio);
  for (const auto& t : tasks) {
    const auto data = materialize(ws.shifted, t);
    report.tasks.push_back(run_smsp_task(ws, pool, t, data, cfg, setting));
    report.tasks.push_back(run_amp_task(ws, t, data, amp, setting));
    report.tasks.push_back(run_random_task(ws, t, data, cfg, setting));
  }
  summarize(report, ws.cfg, report.tasks);
  return report;
}

inline ExperimentReport scenario_neighbor_ablation(Workspace& ws) {
  auto report = new_report(ws.cfg, "neighbor-ablation");
  const auto& pool = ensure_pool(ws);
  for (const auto& t : test_tasks(ws, ws.cfg.experiment.task_size)) {
    const auto data = materialize(ws.base, t);
    for (std::size_t m : ws.cfg.neighbor_counts) {
      auto cfg = smsp_config(ws);
      cfg.neighbor_count = m;
      report.tasks.push_back(run_smsp_task(ws, pool, t, data, cfg, "M=" + std::to_string(m)));
    }
  }
  summarize(report, ws.cfg, report.tasks);
  return report;
}

/// Neighbors drawn from one similarity group of the class-disjoint part of
/// the pool; tasks whose group is empty are skipped for that group.
inline ExperimentReport scenario_similarity_ablation(Workspace& ws) {
  auto report = new_report(ws.cfg, "similarity-ablation");
  const auto& pool = ensure_pool(ws);
  const auto base_cfg = smsp_config(ws);
  for (const auto& t : test_tasks(ws, ws.cfg.experiment.task_size)) {
    const auto data = materialize(ws.base, t);
    const auto eligible = class_disjoint_records(pool, t.classes);
    const auto [x, y] = leep_sample(data, base_cfg.leep_samples);
    const auto table = build_similarity_table(ws.backbone, eligible, x, y, t.task_id);
    for (int g = 1; g <= 3; ++g) {
      const auto ids = select_neighbors_from_group(table, g, base_cfg.neighbor_count, false, t.classes);
      if (ids.empty()) continue;
      for (std::size_t j : ws.cfg.ablation_iterations) {
        auto cfg = base_cfg;
        cfg.fine_tune_iterations = j;
        const auto o = smsp_from_neighbors(ws.backbone, eligible, t, data, ids, cfg);
        auto row = smsp_row(o, "J=" + std::to_string(j), "group-" + std::to_string(g), 0.0);
        row.note = std::to_string(ids.size()) + " neighbors";
        report.tasks.push_back(std::move(row));
      }
    }
  }
  std::stable_sort(report.tasks.begin(), report.tasks.end(), [](const TaskRow& a, const TaskRow& b) {
    return std::tie(a.setting, a.method) < std::tie(b.setting, b.method);
  });
  summarize(report, ws.cfg, report.tasks);
  return report;
}

inline std::size_t overlap_k(double fraction, std::size_t n) {
  return std::max<std::size_t>(1, prune_count(n, fraction));
}

/// Pairwise top-k overlap between pool records, grouped by the LEEP
/// similarity of the other record to the first record's task. Pairs where
/// k exceeds either record's positive-score count are skipped.
inline void add_overlap_rows(ExperimentReport& report, const Workspace& ws, std::span<const PrunedRecord> records) {
  const auto& o = ws.cfg.overlap;
  const std::size_t n = ws.backbone.prunable_units();
  auto positive = [](const PrunedRecord& r) {
    return static_cast<std::size_t>(std::count_if(r.scores.begin(), r.scores.end(), [](float s) { return s > 0.0F; }));
  };

  // [k index][group] -> overlaps
  std::vector<std::array<std::vector<double>, 3>> overlaps(o.k_fractions.size());
  std::array<std::vector<double>, 3> shares;
  for (const auto& target : records) {
    const auto spec = make_task(ws.base, target.meta.task_id, target.class_labels, 0);
    const auto data = materialize(ws.base, spec);
    const auto [x, y] = leep_sample(data, ws.cfg.smsp.leep_samples);
    std::vector<PrunedRecord> others;
    for (const auto& r : records)
      if (r.record_id != target.record_id) others.push_back(r);
    if (others.empty()) continue;
    const auto table = build_similarity_table(ws.backbone, others, x, y, target.record_id);
    for (const auto& row : table.rows) {
      const auto& other = *std::find_if(others.begin(), others.end(),
                                        [&](const PrunedRecord& r) { return r.record_id == row.record_id; });
      const auto g = static_cast<std::size_t>(row.group - 1);
      shares[g].push_back(detail::shares_class(other.class_labels, target.class_labels) ? 1.0 : 0.0);
      for (std::size_t q = 0; q < o.k_fractions.size(); ++q) {
        const std::size_t k = overlap_k(o.k_fractions[q], n);
        if (k > positive(target) || k > positive(other)) continue;
        const double v = overlap_ratio(target, other, k);
        overlaps[q][g].push_back(v);
        TaskRow t;
        t.setting = "k=" + std::to_string(k);
        t.method = "group-" + std::to_string(row.group);
        t.task_id = target.record_id;
        t.value = v;
        t.note = "record " + std::to_string(other.record_id);
        report.tasks.push_back(std::move(t));
      }
    }
  }
  for (std::size_t q = 0; q < o.k_fractions.size(); ++q) {
    const std::string setting = "k=" + std::to_string(overlap_k(o.k_fractions[q], n));
    for (int g = 0; g < 3; ++g)
      report.summary.push_back(
          statistic_row(ws.cfg, report.scenario, setting, "group-" + std::to_string(g + 1), "overlap", overlaps[q][g]));
    const double p = overlaps[q][0].empty() || overlaps[q][2].empty()
                         ? 1.0
                         : permutation_p_value(overlaps[q][0], overlaps[q][2], o.permutations, derive_seed(o.seed, q));
    const std::vector<double> pv{p};
    report.summary.push_back(statistic_row(ws.cfg, report.scenario, setting, "group-1-vs-3", "p_value", pv));
  }
  for (int g = 0; g < 3; ++g)
    report.summary.push_back(
        statistic_row(ws.cfg, report.scenario, "all", "group-" + std::to_string(g + 1), "shares_class", shares[g]));
}

/// Overlap analysis over a dedicated pool pruned to a lower ratio, so that
/// the larger k stay within each record's retained set.
inline ExperimentReport scenario_overlap_analysis(Workspace& ws) {
  auto report = new_report(ws.cfg, "overlap-analysis");
  const auto& o = ws.cfg.overlap;
  AmpConfig amp = ws.cfg.pool.amp;
  amp.target_ratio = o.target_ratio;
  amp.l1_weight = o.l1_weight;
  amp.seed = o.seed;
  const auto runs = build_pool(ws.backbone, ws.base, pool_tasks(ws.base, ws.cfg.pool.task_size, o.tasks, o.seed), amp);
  std::vector<PrunedRecord> records;
  std::vector<double> ratios;
  for (const auto& r : runs) {
    records.push_back(r.record);
    ratios.push_back(r.achieved_ratio);
  }
  add_overlap_rows(report, ws, records);
  report.summary.push_back(statistic_row(ws.cfg, report.scenario, "all", "pool", "achieved_ratio", ratios));
  return report;
}

/// One method over the test tasks: "smsp", "amp" or "baseline-random".
inline ExperimentReport method_report(Workspace& ws, std::string_view method) {
  auto report = new_report(ws.cfg, std::string(method));
  const auto cfg = smsp_config(ws);
  AmpConfig amp = ws.cfg.amp;
  amp.target_ratio = cfg.pruning_ratio;
  const std::string setting = ratio_label(cfg.pruning_ratio);
  for (const auto& t : test_tasks(ws, ws.cfg.experiment.task_size)) {
    const auto data = materialize(ws.base, t);
    if (method == "smsp")
      report.tasks.push_back(run_smsp_task(ws, ws.pool(), t, data, cfg, setting));
    else if (method == "amp")
      report.tasks.push_back(run_amp_task(ws, t, data, amp, setting));
    else if (method == "baseline-random")
      report.tasks.push_back(run_random_task(ws, t, data, cfg, setting));
    else
      fail(ErrorCode::invalid_argument, "unknown method '" + std::string(method) + "'");
  }
  summarize(report, ws.cfg, report.tasks);
  return report;
}

/// Overlap analysis of an existing pool (e.g. one loaded from disk).
inline ExperimentReport overlap_report(const Workspace& ws, std::span<const PrunedRecord> records) {
  auto report = new_report(ws.cfg, "overlap");
  add_overlap_rows(report, ws, records);
  return report;
}

inline ExperimentReport run_scenario(std::string_view name, Workspace& ws) {
  if (name == "pool-build") return scenario_pool_build(ws);
  if (name == "main-comparison") return scenario_main_comparison(ws);
  if (name == "size-transfer") return scenario_size_transfer(ws);
  if (name == "ratio-transfer") return scenario_ratio_transfer(ws);
  if (name == "unseen-distribution") return scenario_unseen_distribution(ws);
  if (name == "neighbor-ablation") return scenario_neighbor_ablation(ws);
  if (name == "similarity-ablation") return scenario_similarity_ablation(ws);
  if (name == "overlap-analysis") return scenario_overlap_analysis(ws);
  fail(ErrorCode::invalid_argument, "unknown scenario '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Output

namespace detail {

inline std::string fmt(double v, const char* spec = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace detail

inline constexpr std::string_view kSummaryHeader =
    "scenario,setting,method,metric,n,mean,std,training_flops,selection_flops,pruning_iterations,"
    "finetune_iterations,config_hash";
inline constexpr std::string_view kTaskHeader =
    "scenario,setting,method,task_id,value,initial_accuracy,training_flops,selection_flops,pruning_iterations,"
    "finetune_iterations,achieved_ratio,note";

inline std::string summary_csv(const ExperimentReport& r) {
  std::string out(kSummaryHeader);
  out += "\n";
  for (const auto& s : r.summary)
    out += r.scenario + "," + s.setting + "," + s.method + "," + s.metric + "," + std::to_string(s.n) + "," +
           detail::fmt(s.mean) + "," + detail::fmt(s.stddev) + "," + detail::fmt(s.training_flops, "%.0f") + "," +
           detail::fmt(s.selection_flops, "%.0f") + "," + std::to_string(s.pruning_iterations) + "," +
           std::to_string(s.finetune_iterations) + "," + s.config_hash + "\n";
  return out;
}

inline std::string tasks_csv(const ExperimentReport& r) {
  std::string out(kTaskHeader);
  out += "\n";
  for (const auto& t : r.tasks)
    out += r.scenario + "," + t.setting + "," + t.method + "," + std::to_string(t.task_id) + "," +
           detail::fmt(t.value) + "," + detail::fmt(t.initial_accuracy) + "," +
           detail::fmt(t.training_flops, "%.0f") + "," + detail::fmt(t.selection_flops, "%.0f") + "," +
           std::to_string(t.pruning_iterations) + "," + std::to_string(t.finetune_iterations) + "," +
           detail::fmt(t.achieved_ratio) + "," + t.note + "\n";
  return out;
}

/// Markdown table: accuracy rows as "Acc(%) | FLOPs(M) | Iters", other
/// metrics as mean ± std.
inline std::string summary_markdown(const ExperimentReport& r) {
  std::string out = "## " + r.scenario + "\n\nconfig " + r.config_hash + "\n\n";
  out += "| Setting | Method | Metric | n | Value | Train FLOPs (M) | Pruning iters | Fine-tune iters |\n";
  out += "|---|---|---|---|---|---|---|---|\n";
  for (const auto& s : r.summary) {
    const bool acc = s.metric == "accuracy";
    const std::string value = acc ? detail::fmt(100.0 * s.mean, "%.2f") + " ± " + detail::fmt(100.0 * s.stddev, "%.2f")
                                  : detail::fmt(s.mean, "%.4f") + " ± " + detail::fmt(s.stddev, "%.4f");
    out += "| " + s.setting + " | " + s.method + " | " + (acc ? "Acc(%)" : s.metric) + " | " + std::to_string(s.n) +
           " | " + value + " | " + detail::fmt(s.training_flops / 1e6, "%.2f") + " | " +
           std::to_string(s.pruning_iterations) + " | " + std::to_string(s.finetune_iterations) + " |\n";
  }
  return out;
}

/// Writes <scenario>.csv, <scenario>_tasks.csv and <scenario>.md into dir.
inline void write_report(const ExperimentReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto put = [&](const std::string& name, const std::string& text) {
    detail::write_file_atomic(dir / name, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  };
  put(r.scenario + ".csv", summary_csv(r));
  put(r.scenario + "_tasks.csv", tasks_csv(r));
  put(r.scenario + ".md", summary_markdown(r));
}

}  // namespace smsp
