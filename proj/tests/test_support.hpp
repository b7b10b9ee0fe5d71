// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "smsp/smsp.hpp"

namespace smsp::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

inline std::vector<int> random_labels(std::size_t n, std::size_t classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, static_cast<int>(classes) - 1);
  std::vector<int> y(n);
  for (auto& v : y) v = pick(rng);
  return y;
}

/// Small random architecture: 0-2 conv layers followed by 1-2 dense layers.
inline Architecture random_architecture(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> units(2, 6), convs(0, 2), denses(1, 2);
  Architecture a;
  a.id = "random";
  const std::size_t nc = convs(rng);
  a.input = nc ? InputShape{2, 8, 8} : InputShape{1, 5, 4};
  for (std::size_t i = 0; i < nc; ++i) a.hidden.push_back({LayerKind::conv, units(rng), 3, 1, 1, i + 1 == nc || rng() % 2 == 0});
  for (std::size_t i = 0, nd = denses(rng); i < nd; ++i) a.hidden.push_back({LayerKind::dense, units(rng)});
  a.num_classes = 3;
  return a;
}

/// Random Ω with at least one unit kept per layer; scores 1 on Ω, 0 off.
inline void random_binary_mask(MaskedNetwork& net, std::mt19937_64& rng) {
  const auto off = net.unit_offsets();
  std::bernoulli_distribution keep(0.5);
  for (std::size_t l = 0; l + 1 < off.size(); ++l) {
    std::uniform_int_distribution<std::size_t> anchor(off[l], off[l + 1] - 1);
    const std::size_t forced = anchor(rng);
    for (std::size_t i = off[l]; i < off[l + 1]; ++i)
      if (i != forced && !keep(rng)) net.prune_unit(i);
  }
}

/// Input batch matching the network's first layer.
inline Tensor random_batch(const Architecture& a, std::size_t n, std::mt19937_64& rng) {
  if (a.hidden.empty() || a.hidden.front().kind == LayerKind::dense) return random_tensor({n, a.input.size()}, rng);
  return random_tensor({n, a.input.channels, a.input.height, a.input.width}, rng);
}

struct GradCheck {
  double worst = 0.0;
  std::size_t checked = 0;
};

/// Central finite differences of a scalar loss against every entry of the
/// given parameters. Error per entry: |a - n| / max(|a|, |n|, floor).
inline GradCheck check_gradients(const std::function<double(bool)>& loss, const std::vector<Parameter*>& params,
                                 double eps = 1e-6, double floor = 1e-4) {
  for (Parameter* p : params) p->zero_grad();
  loss(true);
  std::vector<Tensor> analytic;
  for (Parameter* p : params) analytic.push_back(p->grad);
  GradCheck out;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto v = params[k]->value.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double keep = v[i];
      v[i] = keep + eps;
      const double up = loss(false);
      v[i] = keep - eps;
      const double down = loss(false);
      v[i] = keep;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[k][i];
      out.worst = std::max(out.worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor}));
      ++out.checked;
    }
  }
  return out;
}

/// Fresh temporary directory, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("smsp-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// Small dataset and a briefly pre-trained MLP backbone, shared by the
/// slower module tests.
struct SmallWorld {
  Dataset base;
  MaskedNetwork backbone;
  double backbone_accuracy = 0.0;
};

inline const SmallWorld& small_world() {
  static const SmallWorld w = [] {
    SmallWorld s;
    DatasetSource src;
    src.samples_per_class = 60;
    s.base = generate_synthetic_dataset(src, 7);
    PretrainConfig pc;
    pc.epochs = 6;
    pc.seed = 1;
    auto r = pretrain_backbone(s.base, desk_mlp(), pc);
    s.backbone = std::move(r.net);
    s.backbone_accuracy = r.test_accuracy;
    return s;
  }();
  return w;
}

inline PrunedRecord synthetic_record(std::vector<float> scores, std::vector<int> classes, std::uint64_t id = 0) {
  PrunedRecord r;
  r.record_id = id;
  r.arch_id = "desk-mlp";
  r.class_labels = std::move(classes);
  r.scores = std::move(scores);
  r.pruning_ratio = 0.9F;
  return r;
}

inline std::filesystem::path tiny_config_path() { return std::filesystem::path(SMSP_TEST_DATA_DIR) / "tiny.ini"; }

}  // namespace smsp::testing
