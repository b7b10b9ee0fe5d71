// SPDX-License-Identifier: Apache-2.0
//
// Prunable CNN/MLP architectures. Every conv filter and every dense hidden
// node carries a learnable mask score that multiplies its post-activation
// output; the classifier is never prunable.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "smsp/common.hpp"
#include "smsp/gradcore.hpp"

namespace smsp {

enum class LayerKind : std::uint8_t { conv, dense };

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  std::size_t units = 0;
  // conv only
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  bool pool = false;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct InputShape {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;

  std::size_t size() const { return channels * height * width; }
  friend bool operator==(const InputShape&, const InputShape&) = default;
};

struct Architecture {
  std::string id;
  InputShape input;
  std::vector<LayerSpec> hidden;
  std::size_t num_classes = 0;

  std::size_t prunable_units() const {
    std::size_t n = 0;
    for (const auto& l : hidden) n += l.units;
    return n;
  }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

/// 2 conv layers (8 and 16 filters, 3x3, stride 1, 2x2 pool), dense 32,
/// classifier. Input 1x16x16.
inline Architecture desk_cnn(std::size_t num_classes = 20) {
  Architecture a;
  a.id = "desk-cnn";
  a.input = {1, 16, 16};
  a.hidden = {{LayerKind::conv, 8, 3, 1, 1, true},
              {LayerKind::conv, 16, 3, 1, 1, true},
              {LayerKind::dense, 32}};
  a.num_classes = num_classes;
  return a;
}

/// Two hidden layers of 64 nodes over a flattened 1x16x16 input.
inline Architecture desk_mlp(std::size_t num_classes = 20) {
  Architecture a;
  a.id = "desk-mlp";
  a.input = {1, 16, 16};
  a.hidden = {{LayerKind::dense, 64}, {LayerKind::dense, 64}};
  a.num_classes = num_classes;
  return a;
}

/// Resolves a registered architecture id. The classifier width is the
/// default base-dataset width and is not part of the identity.
inline std::optional<Architecture> find_architecture(std::string_view id) {
  if (id == "desk-cnn") return desk_cnn();
  if (id == "desk-mlp") return desk_mlp();
  return std::nullopt;
}

struct PrunableUnit {
  std::size_t layer_index = 0;
  std::size_t unit_index = 0;
  LayerKind kind = LayerKind::dense;
};

/// Spatial/feature geometry of each hidden layer's output.
struct LayerGeometry {
  std::size_t in_channels = 0;  // conv: input channels; dense: input features
  std::size_t in_h = 1, in_w = 1;
  std::size_t conv_h = 1, conv_w = 1;  // conv output before pooling
  std::size_t out_h = 1, out_w = 1;    // after pooling
};

inline std::vector<LayerGeometry> layer_geometry(const Architecture& arch) {
  std::vector<LayerGeometry> out;
  std::size_t c = arch.input.channels, h = arch.input.height, w = arch.input.width;
  bool flat = false;
  for (const auto& l : arch.hidden) {
    LayerGeometry g;
    if (l.kind == LayerKind::conv) {
      require(!flat, ErrorCode::invalid_argument, "conv layer after a dense layer");
      require(l.units > 0 && l.kernel > 0 && l.stride > 0, ErrorCode::invalid_argument,
              "conv layer needs positive units, kernel and stride");
      require(h + 2 * l.padding >= l.kernel && w + 2 * l.padding >= l.kernel,
              ErrorCode::invalid_argument, "conv kernel larger than its input");
      g.in_channels = c;
      g.in_h = h;
      g.in_w = w;
      g.conv_h = (h + 2 * l.padding - l.kernel) / l.stride + 1;
      g.conv_w = (w + 2 * l.padding - l.kernel) / l.stride + 1;
      g.out_h = l.pool ? g.conv_h / 2 : g.conv_h;
      g.out_w = l.pool ? g.conv_w / 2 : g.conv_w;
      require(g.out_h > 0 && g.out_w > 0, ErrorCode::invalid_argument, "pooling empties a feature map");
      c = l.units;
      h = g.out_h;
      w = g.out_w;
    } else {
      require(l.units > 0, ErrorCode::invalid_argument, "dense layer needs positive width");
      g.in_channels = flat ? c : c * h * w;
      c = l.units;
      h = w = 1;
      flat = true;
    }
    out.push_back(g);
  }
  return out;
}

/// Input width of the classifier.
inline std::size_t classifier_inputs(const Architecture& arch) {
  if (arch.hidden.empty()) return arch.input.size();
  const auto geo = layer_geometry(arch);
  const auto& last = arch.hidden.back();
  return last.kind == LayerKind::conv ? last.units * geo.back().out_h * geo.back().out_w
                                      : last.units;
}

struct LayerParams {
  Parameter weight;
  Parameter bias;
};

struct MaskState {
  Parameter scores;                    // [n]
  std::vector<std::uint8_t> retained;  // Ω as a membership vector
  bool enabled = true;                 // false: forward never multiplies by scores

  std::size_t size() const { return retained.size(); }
  std::size_t retained_count() const {
    return static_cast<std::size_t>(std::count(retained.begin(), retained.end(), std::uint8_t{1}));
  }
};

struct MaskedNetwork {
  Architecture arch;
  std::vector<LayerParams> hidden;
  LayerParams classifier;
  MaskState mask;

  std::size_t prunable_units() const { return arch.prunable_units(); }

  /// Flat index of the first unit of each hidden layer, plus a final n.
  std::vector<std::size_t> unit_offsets() const {
    std::vector<std::size_t> off{0};
    for (const auto& l : arch.hidden) off.push_back(off.back() + l.units);
    return off;
  }

  std::vector<PrunableUnit> units() const {
    std::vector<PrunableUnit> out;
    for (std::size_t l = 0; l < arch.hidden.size(); ++l)
      for (std::size_t u = 0; u < arch.hidden[l].units; ++u) out.push_back({l, u, arch.hidden[l].kind});
    return out;
  }

  /// Layer index of every flat unit index.
  std::vector<std::size_t> unit_layers() const {
    std::vector<std::size_t> out;
    for (std::size_t l = 0; l < arch.hidden.size(); ++l) out.insert(out.end(), arch.hidden[l].units, l);
    return out;
  }

  /// Θ: every weight and bias, hidden layers first, classifier last.
  std::vector<Parameter*> weight_parameters() {
    std::vector<Parameter*> out;
    for (auto& l : hidden) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    out.push_back(&classifier.weight);
    out.push_back(&classifier.bias);
    return out;
  }

  std::vector<Parameter*> all_parameters() {
    auto out = weight_parameters();
    out.push_back(&mask.scores);
    return out;
  }

  void set_weights_trainable(bool trainable) {
    for (Parameter* p : weight_parameters()) p->trainable = trainable;
  }

  std::size_t parameter_count() const {
    std::size_t n = classifier.weight.value.size() + classifier.bias.value.size();
    for (const auto& l : hidden) n += l.weight.value.size() + l.bias.value.size();
    return n;
  }

  std::size_t retained_in_layer(std::size_t layer) const {
    const auto off = unit_offsets();
    std::size_t k = 0;
    for (std::size_t i = off[layer]; i < off[layer + 1]; ++i) k += mask.retained[i];
    return k;
  }

  /// Removes unit i from Ω and zeroes its score.
  void prune_unit(std::size_t i) {
    require(i < mask.size(), ErrorCode::out_of_range, "unit index out of range");
    mask.retained[i] = 0;
    mask.scores.value[i] = 0.0;
  }

  double pruning_ratio() const {
    const auto n = prunable_units();
    return n == 0 ? 0.0 : 1.0 - static_cast<double>(mask.retained_count()) / static_cast<double>(n);
  }
};

inline MaskState full_mask(std::size_t n) {
  MaskState m;
  m.scores = Parameter(Tensor({std::max<std::size_t>(n, 1)}, 1.0));
  if (n == 0) m.scores.value[0] = 0.0;
  m.retained.assign(std::max<std::size_t>(n, 1), 1);
  if (n == 0) m.retained[0] = 0;
  return m;
}

/// He-normal weights, zero biases, all scores 1, full Ω.
inline MaskedNetwork initialize_network(const Architecture& arch, std::uint64_t seed) {
  require(arch.num_classes > 0, ErrorCode::invalid_argument, "architecture needs at least one class");
  const auto geo = layer_geometry(arch);
  std::mt19937_64 rng(seed);
  auto he = [&rng](Shape shape, std::size_t fan_in) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = dist(rng);
    return t;
  };
  MaskedNetwork net;
  net.arch = arch;
  for (std::size_t l = 0; l < arch.hidden.size(); ++l) {
    const auto& spec = arch.hidden[l];
    LayerParams p;
    if (spec.kind == LayerKind::conv) {
      const std::size_t fan_in = geo[l].in_channels * spec.kernel * spec.kernel;
      p.weight = Parameter(he({spec.units, geo[l].in_channels, spec.kernel, spec.kernel}, fan_in));
    } else {
      p.weight = Parameter(he({spec.units, geo[l].in_channels}, geo[l].in_channels));
    }
    p.bias = Parameter(Tensor({spec.units}, 0.0));
    net.hidden.push_back(std::move(p));
  }
  const std::size_t cin = classifier_inputs(arch);
  net.classifier.weight = Parameter(he({arch.num_classes, cin}, cin));
  net.classifier.bias = Parameter(Tensor({arch.num_classes}, 0.0));
  // A score vector needs rank >= 1 and positive length; a network without
  // prunable units keeps one inert, never-retained placeholder.
  net.mask = full_mask(arch.prunable_units());
  if (arch.prunable_units() == 0) net.mask.enabled = false;
  return net;
}

enum class MaskMode { apply, ignore };

/// Records the forward pass of `net` into `g` and returns the logits
/// [B, num_classes]. `batch` is [B, C, H, W], or [B, C*H*W] when the first
/// layer is dense.
inline Var forward(Graph& g, MaskedNetwork& net, const Tensor& batch, MaskMode mode = MaskMode::apply) {
  const auto& in = net.arch.input;
  const bool first_dense = net.arch.hidden.empty() || net.arch.hidden.front().kind == LayerKind::dense;
  const bool is_4d = batch.rank() == 4 && batch.dim(1) == in.channels && batch.dim(2) == in.height &&
                     batch.dim(3) == in.width;
  const bool is_flat = batch.rank() == 2 && batch.dim(1) == in.size() && first_dense;
  require(is_4d || is_flat, ErrorCode::shape_mismatch,
          "batch " + shape_string(batch.shape()) + " does not match network input [B," +
              std::to_string(in.channels) + "," + std::to_string(in.height) + "," +
              std::to_string(in.width) + "]");
  require(net.mask.size() == std::max<std::size_t>(net.prunable_units(), 1),
          ErrorCode::shape_mismatch, "mask length does not match the architecture");
  const std::size_t batch_size = batch.dim(0);
  const bool masked = mode == MaskMode::apply && net.mask.enabled;

  Var x = g.constant(batch);
  Var scores = masked ? g.param(net.mask.scores) : Var{};
  const auto offsets = net.unit_offsets();
  bool flat = is_flat;
  for (std::size_t l = 0; l < net.arch.hidden.size(); ++l) {
    const auto& spec = net.arch.hidden[l];
    Var w = g.param(net.hidden[l].weight);
    Var b = g.param(net.hidden[l].bias);
    if (spec.kind == LayerKind::conv) {
      x = ops::relu(g, ops::conv2d(g, x, w, b, spec.stride, spec.padding));
      if (masked) x = ops::scale_units(g, x, scores, offsets[l], net.mask.retained);
      if (spec.pool) x = ops::max_pool2(g, x);
    } else {
      if (!flat) {
        x = ops::reshape(g, x, {batch_size, g.value(x).size() / batch_size});
        flat = true;
      }
      x = ops::relu(g, ops::linear(g, x, w, b));
      if (masked) x = ops::scale_units(g, x, scores, offsets[l], net.mask.retained);
    }
  }
  if (!flat) x = ops::reshape(g, x, {batch_size, g.value(x).size() / batch_size});
  Var logits = ops::linear(g, x, g.param(net.classifier.weight), g.param(net.classifier.bias));
  require(g.value(logits).all_finite(), ErrorCode::non_finite, "forward produced non-finite logits");
  return logits;
}

/// Forward with every unit's output multiplied by its score (Θ ⊙ S).
inline Var masked_forward(Graph& g, MaskedNetwork& net, const Tensor& batch) {
  return forward(g, net, batch, MaskMode::apply);
}

/// Logits without recording gradients.
inline Tensor predict(const MaskedNetwork& net, const Tensor& batch, MaskMode mode = MaskMode::apply) {
  Graph g(false);
  // forward() only reads parameters when the graph is not recording.
  auto& mut = const_cast<MaskedNetwork&>(net);
  return g.value(forward(g, mut, batch, mode));
}

/// Top-1 accuracy in [0, 1], evaluated in chunks.
inline double accuracy(const MaskedNetwork& net, const Tensor& x, std::span<const int> labels,
                       std::size_t chunk = 256) {
  require(x.dim(0) == labels.size(), ErrorCode::shape_mismatch, "accuracy: label count mismatch");
  if (labels.empty()) return 0.0;
  const std::size_t per = x.size() / x.dim(0);
  std::size_t correct = 0;
  for (std::size_t start = 0; start < labels.size(); start += chunk) {
    const std::size_t len = std::min(chunk, labels.size() - start);
    Shape shape = x.shape();
    shape[0] = len;
    std::vector<double> vals(x.data() + start * per, x.data() + (start + len) * per);
    const Tensor logits = predict(net, Tensor(shape, std::move(vals)));
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < len; ++i) {
      const double* row = logits.data() + i * k;
      const auto best = static_cast<std::size_t>(std::max_element(row, row + k) - row);
      correct += static_cast<int>(best) == labels[start + i];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

/// Copy of `base` whose classifier keeps only the rows of `classes`, in the
/// given order. Used to specialise the shared backbone to a task.
inline MaskedNetwork with_class_head(const MaskedNetwork& base, std::span<const int> classes) {
  require(!classes.empty(), ErrorCode::invalid_argument, "task head needs at least one class");
  const std::size_t cin = base.classifier.weight.value.dim(1);
  MaskedNetwork net = base;
  Tensor w({classes.size(), cin});
  Tensor b({classes.size()});
  for (std::size_t r = 0; r < classes.size(); ++r) {
    const int c = classes[r];
    require(c >= 0 && static_cast<std::size_t>(c) < base.arch.num_classes, ErrorCode::out_of_range,
            "class " + std::to_string(c) + " not in the backbone's label space");
    std::copy_n(base.classifier.weight.value.data() + static_cast<std::size_t>(c) * cin, cin,
                w.data() + r * cin);
    b[r] = base.classifier.bias.value[static_cast<std::size_t>(c)];
  }
  net.classifier.weight = Parameter(std::move(w), base.classifier.weight.trainable);
  net.classifier.bias = Parameter(std::move(b), base.classifier.bias.trainable);
  net.arch.num_classes = classes.size();
  return net;
}

/// Copy of `base` with a zero-initialised classifier of `num_classes`
/// outputs, for tasks whose labels the backbone never saw.
inline MaskedNetwork with_fresh_head(const MaskedNetwork& base, std::size_t num_classes) {
  require(num_classes > 0, ErrorCode::invalid_argument, "task head needs at least one class");
  const std::size_t cin = base.classifier.weight.value.dim(1);
  MaskedNetwork net = base;
  net.classifier.weight = Parameter(Tensor({num_classes, cin}, 0.0));
  net.classifier.bias = Parameter(Tensor({num_classes}, 0.0));
  net.arch.num_classes = num_classes;
  return net;
}

/// Physically removes every unit outside Ω, together with the matching
/// input slices of its consumer layer. The result carries no mask.
inline MaskedNetwork extract_subnetwork(const MaskedNetwork& net) {
  const auto& arch = net.arch;
  const auto offsets = net.unit_offsets();
  const auto geo = layer_geometry(arch);
  const bool masked = net.mask.enabled;

  std::vector<std::vector<std::size_t>> keep(arch.hidden.size());
  for (std::size_t l = 0; l < arch.hidden.size(); ++l) {
    for (std::size_t u = 0; u < arch.hidden[l].units; ++u)
      if (!masked || net.mask.retained[offsets[l] + u]) keep[l].push_back(u);
    require(!keep[l].empty(), ErrorCode::infeasible,
            "extract_subnetwork: layer " + std::to_string(l) + " would have no units");
  }

  MaskedNetwork out;
  out.arch = arch;
  if (masked && net.mask.retained_count() != net.prunable_units()) out.arch.id = arch.id + ":sub";
  for (std::size_t l = 0; l < arch.hidden.size(); ++l) out.arch.hidden[l].units = keep[l].size();

  // Input index map of each layer, in units of the source layout: for conv
  // layers the retained input channels, for dense layers the retained
  // flattened features.
  std::vector<std::size_t> in_keep;
  for (std::size_t i = 0; i < arch.input.channels; ++i) in_keep.push_back(i);
  bool prev_conv = !arch.hidden.empty() && arch.hidden.front().kind == LayerKind::conv;
  if (!prev_conv) {
    in_keep.clear();
    for (std::size_t i = 0; i < arch.input.size(); ++i) in_keep.push_back(i);
  }
  std::size_t prev_plane = 1;  // spatial size of the previous conv output

  for (std::size_t l = 0; l < arch.hidden.size(); ++l) {
    const auto& spec = arch.hidden[l];
    const auto& src = net.hidden[l];
    LayerParams p;
    if (spec.kind == LayerKind::conv) {
      const std::size_t kk = spec.kernel * spec.kernel;
      const std::size_t cin = geo[l].in_channels;
      Tensor w({keep[l].size(), in_keep.size(), spec.kernel, spec.kernel});
      Tensor b({keep[l].size()});
      for (std::size_t o = 0; o < keep[l].size(); ++o) {
        for (std::size_t c = 0; c < in_keep.size(); ++c)
          std::copy_n(src.weight.value.data() + (keep[l][o] * cin + in_keep[c]) * kk, kk,
                      w.data() + (o * in_keep.size() + c) * kk);
        b[o] = src.bias.value[keep[l][o]];
      }
      p.weight = Parameter(std::move(w), src.weight.trainable);
      p.bias = Parameter(std::move(b), src.bias.trainable);
      in_keep = keep[l];
      prev_plane = geo[l].out_h * geo[l].out_w;
      prev_conv = true;
    } else {
      if (prev_conv) {
        // Flatten: feature index = channel * plane + position.
        std::vector<std::size_t> flat;
        for (auto c : in_keep)
          for (std::size_t s = 0; s < prev_plane; ++s) flat.push_back(c * prev_plane + s);
        in_keep = std::move(flat);
        prev_conv = false;
      }
      const std::size_t cin = geo[l].in_channels;
      Tensor w({keep[l].size(), in_keep.size()});
      Tensor b({keep[l].size()});
      for (std::size_t o = 0; o < keep[l].size(); ++o) {
        for (std::size_t i = 0; i < in_keep.size(); ++i)
          w[o * in_keep.size() + i] = src.weight.value[keep[l][o] * cin + in_keep[i]];
        b[o] = src.bias.value[keep[l][o]];
      }
      p.weight = Parameter(std::move(w), src.weight.trainable);
      p.bias = Parameter(std::move(b), src.bias.trainable);
      in_keep = keep[l];
    }
    out.hidden.push_back(std::move(p));
  }
  if (prev_conv && !arch.hidden.empty()) {
    std::vector<std::size_t> flat;
    for (auto c : in_keep)
      for (std::size_t s = 0; s < prev_plane; ++s) flat.push_back(c * prev_plane + s);
    in_keep = std::move(flat);
  }

  const std::size_t cin = net.classifier.weight.value.dim(1);
  const std::size_t k = arch.num_classes;
  Tensor w({k, in_keep.size()});
  for (std::size_t o = 0; o < k; ++o)
    for (std::size_t i = 0; i < in_keep.size(); ++i)
      w[o * in_keep.size() + i] = net.classifier.weight.value[o * cin + in_keep[i]];
  out.classifier.weight = Parameter(std::move(w), net.classifier.weight.trainable);
  out.classifier.bias = Parameter(net.classifier.bias.value, net.classifier.bias.trainable);

  out.mask = full_mask(out.arch.prunable_units());
  out.mask.scores.trainable = false;
  out.mask.enabled = false;
  return out;
}

// ---------------------------------------------------------------------------
// FLOPs accounting

/// Forward FLOPs per sample of each layer (hidden layers, then the
/// classifier), counting only retained units when the mask is enabled.
inline std::vector<std::uint64_t> count_flops_by_layer(const MaskedNetwork& net) {
  const auto& arch = net.arch;
  const auto geo = layer_geometry(arch);
  std::vector<std::uint64_t> out;
  std::uint64_t prev = arch.input.channels;  // retained channels/features feeding the layer
  bool prev_conv = !arch.hidden.empty() && arch.hidden.front().kind == LayerKind::conv;
  if (!prev_conv) prev = arch.input.size();
  std::uint64_t prev_plane = 1;
  for (std::size_t l = 0; l < arch.hidden.size(); ++l) {
    const auto& spec = arch.hidden[l];
    const std::uint64_t kept = net.mask.enabled ? net.retained_in_layer(l) : spec.units;
    if (spec.kind == LayerKind::conv) {
      out.push_back(2ULL * spec.kernel * spec.kernel * prev * kept * geo[l].conv_h * geo[l].conv_w);
      prev_plane = geo[l].out_h * geo[l].out_w;
      prev = kept;
      prev_conv = true;
    } else {
      if (prev_conv) prev *= prev_plane;
      prev_conv = false;
      out.push_back(2ULL * prev * kept);
      prev = kept;
    }
  }
  if (prev_conv && !arch.hidden.empty()) prev *= prev_plane;
  out.push_back(2ULL * prev * arch.num_classes);
  return out;
}

inline std::uint64_t count_flops(const MaskedNetwork& net) {
  std::uint64_t total = 0;
  for (auto f : count_flops_by_layer(net)) total += f;
  return total;
}

struct FlopsLedger {
  std::uint64_t forward_flops_per_sample = 0;
  std::uint64_t cumulative_training_flops = 0;
};

/// One optimizer step: forward plus backward, counted as 3x forward.
inline void track_training_flops(FlopsLedger& ledger, const MaskedNetwork& net, std::size_t batch_size) {
  ledger.forward_flops_per_sample = count_flops(net);
  ledger.cumulative_training_flops += 3ULL * ledger.forward_flops_per_sample * batch_size;
}

}  // namespace smsp
