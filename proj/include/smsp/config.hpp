// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: flat key=value INI text with one section per
// stage or scenario. Every key has a default; unknown keys are rejected.
#pragma once

#include <charconv>
#include <cstdio>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "smsp/amp.hpp"
#include "smsp/bench.hpp"
#include "smsp/common.hpp"
#include "smsp/data.hpp"
#include "smsp/one_shot.hpp"

namespace smsp {

struct PoolSection {
  std::size_t tasks = 60;
  std::size_t task_size = 3;
  std::uint64_t seed = 11;
  AmpConfig amp = [] {
    AmpConfig a;
    a.frozen_weights = true;
    return a;
  }();
};

struct ExperimentSection {
  std::uint64_t seed = 99;
  std::size_t test_tasks = 20;
  std::size_t task_size = 3;
};

struct OverlapSection {
  std::size_t tasks = 60;
  std::uint64_t seed = 13;
  double target_ratio = 0.5;
  double l1_weight = 0.03;
  std::vector<double> k_fractions{0.1, 0.3};
  std::size_t permutations = 2000;
};

struct ExperimentConfig {
  std::uint64_t data_seed = 7;
  DatasetSource data;
  std::string arch = "desk-mlp";
  PretrainConfig pretrain = [] {
    PretrainConfig p;
    p.seed = 1;
    return p;
  }();
  PoolSection pool;
  /// AMP comparison runs: free weights, from the pre-trained backbone.
  AmpConfig amp = [] {
    AmpConfig a;
    a.iterations = 1000;
    a.l1_weight = 0.05;
    a.lr = {0.1, 0.02, 1};
    return a;
  }();
  SmspConfig smsp;
  ExperimentSection experiment;
  std::vector<std::size_t> neighbor_counts{1, 2, 4, 8, 16};
  std::vector<std::size_t> ablation_iterations{20, 60, 100};
  std::vector<double> transfer_ratios{0.85, 0.9, 0.95};
  std::vector<std::size_t> task_sizes{3, 5, 10};
  /// 10-class tasks over 20 classes have no class-disjoint neighbors.
  bool size_transfer_class_disjoint = false;
  OverlapSection overlap;
};

namespace detail {

inline std::string format_value(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}
inline std::string format_value(std::uint64_t v) { return std::to_string(v); }
inline std::string format_value(bool v) { return v ? "true" : "false"; }
inline std::string format_value(const std::string& v) { return v; }

template <class T>
std::string format_list(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += format_value(static_cast<std::conditional_t<std::is_floating_point_v<T>, double, std::uint64_t>>(v[i]));
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  return s;
}

template <class T>
T parse_number(std::string_view text, std::string_view key) {
  text = trim(text);
  T v{};
  const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
  require(r.ec == std::errc{} && r.ptr == text.data() + text.size(), ErrorCode::invalid_argument,
          "config key '" + std::string(key) + "': cannot parse '" + std::string(text) + "'");
  return v;
}

inline bool parse_bool(std::string_view text, std::string_view key) {
  text = trim(text);
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  fail(ErrorCode::invalid_argument, "config key '" + std::string(key) + "': expected true or false");
}

template <class T>
std::vector<T> parse_list(std::string_view text, std::string_view key) {
  std::vector<T> out;
  for (;;) {
    const auto comma = text.find(',');
    out.push_back(parse_number<T>(text.substr(0, comma), key));
    if (comma == std::string_view::npos) return out;
    text.remove_prefix(comma + 1);
  }
}

struct ConfigField {
  std::string key;  // "section.name"
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, std::string_view)> set;
};

template <class T>
ConfigField field(std::string key, std::function<T&(ExperimentConfig&)> ref) {
  return {key,
          [ref](const ExperimentConfig& c) {
            const T v = ref(const_cast<ExperimentConfig&>(c));
            if constexpr (std::is_floating_point_v<T>)
              return format_value(static_cast<double>(v));
            else
              return format_value(static_cast<std::uint64_t>(v));
          },
          [ref, key](ExperimentConfig& c, std::string_view v) { ref(c) = parse_number<T>(v, key); }};
}

inline ConfigField bool_field(std::string key, std::function<bool&(ExperimentConfig&)> ref) {
  return {key, [ref](const ExperimentConfig& c) { return format_value(ref(const_cast<ExperimentConfig&>(c))); },
          [ref, key](ExperimentConfig& c, std::string_view v) { ref(c) = parse_bool(v, key); }};
}

template <class T>
ConfigField list_field(std::string key, std::function<std::vector<T>&(ExperimentConfig&)> ref) {
  return {key, [ref](const ExperimentConfig& c) { return format_list(ref(const_cast<ExperimentConfig&>(c))); },
          [ref, key](ExperimentConfig& c, std::string_view v) { ref(c) = parse_list<T>(v, key); }};
}

inline std::vector<ConfigField> amp_fields(const std::string& section, AmpConfig& (*sel)(ExperimentConfig&)) {
  return {
      field<std::size_t>(section + ".iterations", [sel](auto& c) -> auto& { return sel(c).iterations; }),
      field<double>(section + ".target_ratio", [sel](auto& c) -> auto& { return sel(c).target_ratio; }),
      field<double>(section + ".threshold", [sel](auto& c) -> auto& { return sel(c).threshold; }),
      field<double>(section + ".lambda", [sel](auto& c) -> auto& { return sel(c).l1_weight; }),
      field<std::size_t>(section + ".batch_size", [sel](auto& c) -> auto& { return sel(c).batch_size; }),
      field<double>(section + ".lr", [sel](auto& c) -> auto& { return sel(c).lr.initial_lr; }),
      field<double>(section + ".min_lr", [sel](auto& c) -> auto& { return sel(c).lr.min_lr; }),
  };
}

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f{
        field<std::uint64_t>("data.seed", [](auto& c) -> auto& { return c.data_seed; }),
        field<std::size_t>("data.num_classes", [](auto& c) -> auto& { return c.data.num_classes; }),
        field<std::size_t>("data.samples_per_class", [](auto& c) -> auto& { return c.data.samples_per_class; }),
        field<std::size_t>("data.height", [](auto& c) -> auto& { return c.data.height; }),
        field<std::size_t>("data.width", [](auto& c) -> auto& { return c.data.width; }),
        field<std::size_t>("data.channels", [](auto& c) -> auto& { return c.data.channels; }),
        field<std::size_t>("data.groups", [](auto& c) -> auto& { return c.data.groups; }),
        field<std::size_t>("data.basis_per_group", [](auto& c) -> auto& { return c.data.basis_per_group; }),
        field<double>("data.region_sigma", [](auto& c) -> auto& { return c.data.region_sigma; }),
        field<double>("data.noise", [](auto& c) -> auto& { return c.data.noise; }),
        {"pretrain.arch", [](const ExperimentConfig& c) { return c.arch; },
         [](ExperimentConfig& c, std::string_view v) { c.arch = std::string(trim(v)); }},
        field<std::size_t>("pretrain.epochs", [](auto& c) -> auto& { return c.pretrain.epochs; }),
        field<std::size_t>("pretrain.batch_size", [](auto& c) -> auto& { return c.pretrain.batch_size; }),
        field<double>("pretrain.lr", [](auto& c) -> auto& { return c.pretrain.lr.initial_lr; }),
        field<double>("pretrain.min_lr", [](auto& c) -> auto& { return c.pretrain.lr.min_lr; }),
        field<std::uint64_t>("pretrain.seed", [](auto& c) -> auto& { return c.pretrain.seed; }),
        field<std::size_t>("pool.tasks", [](auto& c) -> auto& { return c.pool.tasks; }),
        field<std::size_t>("pool.task_size", [](auto& c) -> auto& { return c.pool.task_size; }),
        field<std::uint64_t>("pool.seed", [](auto& c) -> auto& { return c.pool.seed; }),
    };
    for (auto& x : amp_fields("pool", [](ExperimentConfig& c) -> AmpConfig& { return c.pool.amp; })) f.push_back(x);
    for (auto& x : amp_fields("amp", [](ExperimentConfig& c) -> AmpConfig& { return c.amp; })) f.push_back(x);
    std::vector<ConfigField> rest{
        field<double>("smsp.pruning_ratio", [](auto& c) -> auto& { return c.smsp.pruning_ratio; }),
        field<std::size_t>("smsp.neighbors", [](auto& c) -> auto& { return c.smsp.neighbor_count; }),
        field<std::size_t>("smsp.iterations", [](auto& c) -> auto& { return c.smsp.fine_tune_iterations; }),
        field<std::size_t>("smsp.batch_size", [](auto& c) -> auto& { return c.smsp.batch_size; }),
        field<double>("smsp.lr", [](auto& c) -> auto& { return c.smsp.lr.initial_lr; }),
        field<double>("smsp.min_lr", [](auto& c) -> auto& { return c.smsp.lr.min_lr; }),
        bool_field("smsp.class_disjoint", [](auto& c) -> auto& { return c.smsp.class_disjoint; }),
        field<std::size_t>("smsp.leep_samples", [](auto& c) -> auto& { return c.smsp.leep_samples; }),
        field<std::uint64_t>("experiment.seed", [](auto& c) -> auto& { return c.experiment.seed; }),
        field<std::size_t>("experiment.test_tasks", [](auto& c) -> auto& { return c.experiment.test_tasks; }),
        field<std::size_t>("experiment.task_size", [](auto& c) -> auto& { return c.experiment.task_size; }),
        list_field<std::size_t>("neighbor-ablation.neighbor_counts",
                                [](auto& c) -> auto& { return c.neighbor_counts; }),
        list_field<std::size_t>("similarity-ablation.iterations",
                                [](auto& c) -> auto& { return c.ablation_iterations; }),
        list_field<double>("ratio-transfer.ratios", [](auto& c) -> auto& { return c.transfer_ratios; }),
        list_field<std::size_t>("size-transfer.task_sizes", [](auto& c) -> auto& { return c.task_sizes; }),
        bool_field("size-transfer.class_disjoint", [](auto& c) -> auto& { return c.size_transfer_class_disjoint; }),
        field<std::size_t>("overlap-analysis.tasks", [](auto& c) -> auto& { return c.overlap.tasks; }),
        field<std::uint64_t>("overlap-analysis.seed", [](auto& c) -> auto& { return c.overlap.seed; }),
        field<double>("overlap-analysis.target_ratio", [](auto& c) -> auto& { return c.overlap.target_ratio; }),
        field<double>("overlap-analysis.lambda", [](auto& c) -> auto& { return c.overlap.l1_weight; }),
        list_field<double>("overlap-analysis.k_fractions", [](auto& c) -> auto& { return c.overlap.k_fractions; }),
        field<std::size_t>("overlap-analysis.permutations", [](auto& c) -> auto& { return c.overlap.permutations; }),
    };
    f.insert(f.end(), rest.begin(), rest.end());
    return f;
  }();
  return fields;
}

}  // namespace detail

/// Every key as "section.name=value", one per line, in a fixed order.
inline std::string canonical_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& f : detail::config_fields()) out += f.key + "=" + f.get(cfg) + "\n";
  return out;
}

inline std::uint64_t config_hash(const ExperimentConfig& cfg) { return fnv1a(canonical_config(cfg)); }

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline void validate(const ExperimentConfig& c) {
  require(find_architecture(c.arch).has_value(), ErrorCode::invalid_argument, "unknown architecture '" + c.arch + "'");
  require(c.data.num_classes >= 2 && c.data.num_classes <= 256, ErrorCode::invalid_argument,
          "data.num_classes must lie in 2..256");
  require(c.data.samples_per_class >= 4, ErrorCode::invalid_argument, "data.samples_per_class must be at least 4");
  require(c.pool.tasks > 0 && c.pool.task_size >= 2, ErrorCode::invalid_argument,
          "pool needs tasks of at least two classes");
  require(c.experiment.test_tasks >= 2, ErrorCode::invalid_argument, "experiment.test_tasks must be at least 2");
  require(c.experiment.task_size >= 2 && c.experiment.task_size <= c.data.num_classes, ErrorCode::invalid_argument,
          "experiment.task_size out of range");
  for (double k : c.overlap.k_fractions)
    require(k > 0.0 && k <= 1.0, ErrorCode::invalid_argument, "overlap k fractions must lie in (0, 1]");
  for (double r : c.transfer_ratios)
    require(r >= 0.0 && r < 1.0, ErrorCode::invalid_argument, "transfer ratios must lie in [0, 1)");
}

/// Applies INI text on top of the defaults.
inline ExperimentConfig parse_config(const std::string& text) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    fail(ErrorCode::bad_format, std::string("config: ") + e.what());
  }
  ExperimentConfig cfg;
  const auto& fields = detail::config_fields();
  for (const auto& [section, body] : tree) {
    require(!body.empty() || body.data().empty(), ErrorCode::bad_format,
            "config: key '" + section + "' outside a section");
    for (const auto& [name, value] : body) {
      const std::string key = section + "." + name;
      const auto it = std::find_if(fields.begin(), fields.end(), [&](const auto& f) { return f.key == key; });
      require(it != fields.end(), ErrorCode::invalid_argument, "config: unknown key '" + key + "'");
      it->set(cfg, value.data());
    }
  }
  validate(cfg);
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  return parse_config(std::string(bytes.begin(), bytes.end()));
}

/// The configuration as INI text that parse_config reads back unchanged.
inline std::string to_ini(const ExperimentConfig& cfg) {
  std::string out, section;
  for (const auto& f : detail::config_fields()) {
    const auto dot = f.key.find('.');
    const std::string s = f.key.substr(0, dot);
    if (s != section) {
      if (!section.empty()) out += "\n";
      out += "[" + s + "]\n";
      section = s;
    }
    out += f.key.substr(dot + 1) + " = " + f.get(cfg) + "\n";
  }
  return out;
}

/// The data source of the base or the shifted distribution.
inline DatasetSource dataset_source(const ExperimentConfig& cfg, bool shifted) {
  DatasetSource s = cfg.data;
  s.shifted = shifted;
  return s;
}

}  // namespace smsp
