// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode automatic differentiation over dense row-major
// tensors, plus the SGD optimizer and cosine learning-rate schedule used
// by every training loop in the project.
//
// A Graph records one forward pass. Parameters enter the graph as leaves
// that remember where they came from; Graph::backward() walks the tape in
// reverse and accumulates dLoss/dParameter into Parameter::grad.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "smsp/common.hpp"

namespace smsp {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_shape();
    values_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    check_shape();
    require(values_.size() == shape_size(shape_), ErrorCode::shape_mismatch,
            "tensor of shape " + shape_string(shape_) + " given " +
                std::to_string(values_.size()) + " values");
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double item() const {
    require(values_.size() == 1, ErrorCode::shape_mismatch, "item() on non-scalar tensor");
    return values_[0];
  }

  void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  Tensor reshaped(Shape shape) const {
    Tensor out;
    out.shape_ = std::move(shape);
    out.check_shape();
    require(shape_size(out.shape_) == values_.size(), ErrorCode::shape_mismatch,
            "cannot reshape " + shape_string(shape_) + " to " + shape_string(out.shape_));
    out.values_ = values_;
    return out;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void check_shape() const {
    require(!shape_.empty(), ErrorCode::shape_mismatch, "tensor shape must have rank >= 1");
    for (auto d : shape_) {
      require(d > 0, ErrorCode::shape_mismatch,
              "tensor dimensions must be positive, got " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<double> values_;
};

struct Parameter {
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  explicit Parameter(Tensor v, bool is_trainable = true)
      : value(std::move(v)), grad(value.shape(), 0.0), trainable(is_trainable) {}

  void zero_grad() { grad.fill(0.0); }
};

/// Handle to a node of a Graph.
struct Var {
  std::size_t id = 0;
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  /// With recording off, no leaf requires a gradient and backward() is an
  /// error; this is the inference path.
  explicit Graph(bool record = true) : record_(record) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value) { return push(std::move(value), {}, false, nullptr); }

  Var param(Parameter& p) {
    require(p.grad.shape() == p.value.shape(), ErrorCode::shape_mismatch,
            "parameter gradient shape differs from value shape");
    return push(p.value, {}, record_ && p.trainable, &p);
  }

  /// Leaf that always takes part in differentiation, independent of any
  /// Parameter. Its gradient is readable through grad() after backward().
  Var variable(Tensor value) { return push(std::move(value), {}, record_, nullptr); }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  const Tensor& grad(Var v) const { return nodes_.at(v.id).grad; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  /// Appends an op node. The node requires a gradient when any parent does.
  Var push_op(Tensor value, std::vector<std::size_t> parents, BackwardFn backward) {
    bool rg = false;
    for (auto p : parents) rg = rg || nodes_[p].requires_grad;
    Var v = push(std::move(value), std::move(parents), rg, nullptr);
    if (rg) nodes_[v.id].backward = std::move(backward);
    return v;
  }

  // Accessors used by op backward closures.
  const Tensor& node_value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& node_grad(std::size_t id) const { return nodes_[id].grad; }
  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_[id].parents; }
  bool node_requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of a node, allocated on first use. Only valid for
  /// nodes that require a gradient.
  Tensor& grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
    return n.grad;
  }

  /// Accumulates dLoss/dParameter into every bound trainable Parameter.
  void backward(Var loss) {
    require(!consumed_, ErrorCode::graph_consumed, "backward called twice on one graph");
    require(record_, ErrorCode::invalid_argument, "backward on a non-recording graph");
    require(loss.id < nodes_.size(), ErrorCode::invalid_argument, "unknown loss node");
    require(nodes_[loss.id].value.size() == 1, ErrorCode::shape_mismatch,
            "backward requires a scalar loss");
    consumed_ = true;
    if (!nodes_[loss.id].requires_grad) return;
    grad_buffer(loss.id)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param != nullptr) {
        auto dst = n.param->grad.values();
        auto src = n.grad.values();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  Var push(Tensor value, std::vector<std::size_t> parents, bool rg, Parameter* p) {
    Node n;
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.requires_grad = rg;
    n.param = p;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool record_ = true;
  bool consumed_ = false;
};

namespace ops {

namespace detail {

inline void axpy(double a, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

inline bool wants(Graph& g, std::size_t id) { return g.node_requires_grad(id); }

}  // namespace detail

/// y = x W^T + b, with x [B, I], W [O, I], b [O].
inline Var linear(Graph& g, Var x, Var w, Var b) {
  const auto& xv = g.value(x);
  const auto& wv = g.value(w);
  const auto& bv = g.value(b);
  require(xv.rank() == 2 && wv.rank() == 2 && bv.rank() == 1, ErrorCode::shape_mismatch,
          "linear expects x [B,I], W [O,I], b [O]");
  const std::size_t batch = xv.dim(0), in = xv.dim(1), out = wv.dim(0);
  require(wv.dim(1) == in && bv.dim(0) == out, ErrorCode::shape_mismatch,
          "linear: x " + shape_string(xv.shape()) + " vs W " + shape_string(wv.shape()) +
              " vs b " + shape_string(bv.shape()));

  // Transposed weights let every inner loop run as a contiguous axpy.
  std::vector<double> wt(in * out);
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t i = 0; i < in; ++i) wt[i * out + o] = wv[o * in + i];

  Tensor y({batch, out});
  for (std::size_t n = 0; n < batch; ++n) {
    double* yr = y.data() + n * out;
    std::copy(bv.data(), bv.data() + out, yr);
    const double* xr = xv.data() + n * in;
    for (std::size_t i = 0; i < in; ++i) {
      if (xr[i] != 0.0) detail::axpy(xr[i], wt.data() + i * out, yr, out);
    }
  }

  return g.push_op(std::move(y), {x.id, w.id, b.id}, [batch, in, out](Graph& gr, std::size_t self) {
    const auto& ps = gr.parents(self);
    const auto& dy = gr.node_grad(self);
    const auto& xv = gr.node_value(ps[0]);
    const auto& wv = gr.node_value(ps[1]);
    if (detail::wants(gr, ps[0])) {
      auto& dx = gr.grad_buffer(ps[0]);
      for (std::size_t n = 0; n < batch; ++n) {
        double* dxr = dx.data() + n * in;
        for (std::size_t o = 0; o < out; ++o) {
          const double d = dy[n * out + o];
          if (d != 0.0) detail::axpy(d, wv.data() + o * in, dxr, in);
        }
      }
    }
    if (detail::wants(gr, ps[1])) {
      auto& dw = gr.grad_buffer(ps[1]);
      for (std::size_t n = 0; n < batch; ++n) {
        const double* xr = xv.data() + n * in;
        for (std::size_t o = 0; o < out; ++o) {
          const double d = dy[n * out + o];
          if (d != 0.0) detail::axpy(d, xr, dw.data() + o * in, in);
        }
      }
    }
    if (detail::wants(gr, ps[2])) {
      auto& db = gr.grad_buffer(ps[2]);
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t o = 0; o < out; ++o) db[o] += dy[n * out + o];
    }
  });
}

inline Var relu(Graph& g, Var x) {
  const auto& xv = g.value(x);
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return g.push_op(std::move(y), {x.id}, [](Graph& gr, std::size_t self) {
    const auto p = gr.parents(self)[0];
    const auto& dy = gr.node_grad(self);
    const auto& xv = gr.node_value(p);
    auto& dx = gr.grad_buffer(p);
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (xv[i] > 0.0) dx[i] += dy[i];
  });
}

/// Multiplies unit u of x ([B, U] or [B, U, H, W]) by scores[offset + u].
/// Units with active[offset + u] == 0 output exactly zero and pass no
/// gradient to either x or the score.
inline Var scale_units(Graph& g, Var x, Var scores, std::size_t offset,
                       std::span<const std::uint8_t> active) {
  const auto& xv = g.value(x);
  const auto& sv = g.value(scores);
  require(xv.rank() >= 2, ErrorCode::shape_mismatch, "scale_units expects [B, U, ...]");
  const std::size_t batch = xv.dim(0), units = xv.dim(1);
  const std::size_t inner = xv.size() / (batch * units);
  require(offset + units <= sv.size() && active.size() == sv.size(), ErrorCode::shape_mismatch,
          "scale_units: score vector too short for layer");
  std::vector<std::uint8_t> on(active.begin() + offset, active.begin() + offset + units);

  Tensor y(xv.shape());
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t u = 0; u < units; ++u) {
      if (!on[u]) continue;
      const double s = sv[offset + u];
      const double* src = xv.data() + (n * units + u) * inner;
      double* dst = y.data() + (n * units + u) * inner;
      for (std::size_t k = 0; k < inner; ++k) dst[k] = src[k] * s;
    }

  return g.push_op(std::move(y), {x.id, scores.id},
                   [batch, units, inner, offset, on = std::move(on)](Graph& gr, std::size_t self) {
    const auto& ps = gr.parents(self);
    const auto& dy = gr.node_grad(self);
    const auto& xv = gr.node_value(ps[0]);
    const auto& sv = gr.node_value(ps[1]);
    const bool want_x = detail::wants(gr, ps[0]);
    const bool want_s = detail::wants(gr, ps[1]);
    Tensor* dx = want_x ? &gr.grad_buffer(ps[0]) : nullptr;
    Tensor* ds = want_s ? &gr.grad_buffer(ps[1]) : nullptr;
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t u = 0; u < units; ++u) {
        if (!on[u]) continue;
        const std::size_t base = (n * units + u) * inner;
        if (dx) detail::axpy(sv[offset + u], dy.data() + base, dx->data() + base, inner);
        if (ds) {
          double acc = 0.0;
          for (std::size_t k = 0; k < inner; ++k) acc += dy[base + k] * xv[base + k];
          (*ds)[offset + u] += acc;
        }
      }
  });
}

struct Conv2dGeometry {
  std::size_t batch, in_c, in_h, in_w, out_c, kernel, stride, pad, out_h, out_w;
};

/// Direct 2-D convolution. x [B, C, H, W], W [O, C, k, k], b [O].
inline Var conv2d(Graph& g, Var x, Var w, Var b, std::size_t stride, std::size_t pad) {
  const auto& xv = g.value(x);
  const auto& wv = g.value(w);
  const auto& bv = g.value(b);
  require(xv.rank() == 4 && wv.rank() == 4 && bv.rank() == 1, ErrorCode::shape_mismatch,
          "conv2d expects x [B,C,H,W], W [O,C,k,k], b [O]");
  require(stride > 0, ErrorCode::invalid_argument, "conv2d stride must be positive");
  Conv2dGeometry geo{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(0), wv.dim(2), stride, pad, 0, 0};
  require(wv.dim(1) == geo.in_c && wv.dim(3) == geo.kernel && bv.dim(0) == geo.out_c,
          ErrorCode::shape_mismatch,
          "conv2d: x " + shape_string(xv.shape()) + " vs W " + shape_string(wv.shape()));
  require(geo.in_h + 2 * pad >= geo.kernel && geo.in_w + 2 * pad >= geo.kernel,
          ErrorCode::shape_mismatch, "conv2d kernel larger than padded input");
  geo.out_h = (geo.in_h + 2 * pad - geo.kernel) / stride + 1;
  geo.out_w = (geo.in_w + 2 * pad - geo.kernel) / stride + 1;

  // Visits every (output pixel, input pixel) pair of one kernel tap as a
  // contiguous run along the output row.
  auto for_each_tap = [](const Conv2dGeometry& gm, auto&& body) {
    for (std::size_t ky = 0; ky < gm.kernel; ++ky)
      for (std::size_t kx = 0; kx < gm.kernel; ++kx)
        for (std::size_t oy = 0; oy < gm.out_h; ++oy) {
          const long iy = static_cast<long>(oy * gm.stride + ky) - static_cast<long>(gm.pad);
          if (iy < 0 || iy >= static_cast<long>(gm.in_h)) continue;
          // Range of ox whose input column lies inside the image.
          std::size_t ox_begin = 0, ox_end = gm.out_w;
          while (ox_begin < ox_end &&
                 static_cast<long>(ox_begin * gm.stride + kx) < static_cast<long>(gm.pad))
            ++ox_begin;
          while (ox_end > ox_begin &&
                 static_cast<long>((ox_end - 1) * gm.stride + kx) - static_cast<long>(gm.pad) >=
                     static_cast<long>(gm.in_w))
            --ox_end;
          if (ox_begin == ox_end) continue;
          const std::size_t ix0 = ox_begin * gm.stride + kx - gm.pad;
          body(ky, kx, oy, static_cast<std::size_t>(iy), ox_begin, ox_end, ix0);
        }
  };

  Tensor y({geo.batch, geo.out_c, geo.out_h, geo.out_w});
  const std::size_t in_plane = geo.in_h * geo.in_w, out_plane = geo.out_h * geo.out_w;
  const std::size_t kk = geo.kernel * geo.kernel;
  for (std::size_t n = 0; n < geo.batch; ++n)
    for (std::size_t o = 0; o < geo.out_c; ++o) {
      double* yp = y.data() + (n * geo.out_c + o) * out_plane;
      std::fill(yp, yp + out_plane, bv[o]);
      for (std::size_t c = 0; c < geo.in_c; ++c) {
        const double* xp = xv.data() + (n * geo.in_c + c) * in_plane;
        const double* wk = wv.data() + (o * geo.in_c + c) * kk;
        for_each_tap(geo, [&](std::size_t ky, std::size_t kx, std::size_t oy, std::size_t iy,
                              std::size_t ob, std::size_t oe, std::size_t ix0) {
          const double wt = wk[ky * geo.kernel + kx];
          const double* src = xp + iy * geo.in_w + ix0;
          double* dst = yp + oy * geo.out_w + ob;
          for (std::size_t t = 0; t < oe - ob; ++t) dst[t] += wt * src[t * geo.stride];
        });
      }
    }

  return g.push_op(std::move(y), {x.id, w.id, b.id}, [geo, for_each_tap](Graph& gr, std::size_t self) {
    const auto& ps = gr.parents(self);
    const auto& dy = gr.node_grad(self);
    const auto& xv = gr.node_value(ps[0]);
    const auto& wv = gr.node_value(ps[1]);
    const bool want_x = detail::wants(gr, ps[0]);
    const bool want_w = detail::wants(gr, ps[1]);
    const bool want_b = detail::wants(gr, ps[2]);
    Tensor* dx = want_x ? &gr.grad_buffer(ps[0]) : nullptr;
    Tensor* dw = want_w ? &gr.grad_buffer(ps[1]) : nullptr;
    Tensor* db = want_b ? &gr.grad_buffer(ps[2]) : nullptr;
    const std::size_t in_plane = geo.in_h * geo.in_w, out_plane = geo.out_h * geo.out_w;
    const std::size_t kk = geo.kernel * geo.kernel;
    for (std::size_t n = 0; n < geo.batch; ++n)
      for (std::size_t o = 0; o < geo.out_c; ++o) {
        const double* gp = dy.data() + (n * geo.out_c + o) * out_plane;
        if (db) {
          double acc = 0.0;
          for (std::size_t t = 0; t < out_plane; ++t) acc += gp[t];
          (*db)[o] += acc;
        }
        if (!dx && !dw) continue;
        for (std::size_t c = 0; c < geo.in_c; ++c) {
          const double* xp = xv.data() + (n * geo.in_c + c) * in_plane;
          const double* wk = wv.data() + (o * geo.in_c + c) * kk;
          double* dxp = dx ? dx->data() + (n * geo.in_c + c) * in_plane : nullptr;
          double* dwk = dw ? dw->data() + (o * geo.in_c + c) * kk : nullptr;
          for_each_tap(geo, [&](std::size_t ky, std::size_t kx, std::size_t oy, std::size_t iy,
                                std::size_t ob, std::size_t oe, std::size_t ix0) {
            const double* grow = gp + oy * geo.out_w + ob;
            const std::size_t len = oe - ob;
            if (dwk) {
              const double* src = xp + iy * geo.in_w + ix0;
              double acc = 0.0;
              for (std::size_t t = 0; t < len; ++t) acc += grow[t] * src[t * geo.stride];
              dwk[ky * geo.kernel + kx] += acc;
            }
            if (dxp) {
              const double wt = wk[ky * geo.kernel + kx];
              double* dst = dxp + iy * geo.in_w + ix0;
              for (std::size_t t = 0; t < len; ++t) dst[t * geo.stride] += wt * grow[t];
            }
          });
        }
      }
  });
}

/// 2x2 max pooling with stride 2 over [B, C, H, W]; odd trailing rows and
/// columns are dropped.
inline Var max_pool2(Graph& g, Var x) {
  const auto& xv = g.value(x);
  require(xv.rank() == 4 && xv.dim(2) >= 2 && xv.dim(3) >= 2, ErrorCode::shape_mismatch,
          "max_pool2 expects [B,C,H,W] with H,W >= 2");
  const std::size_t planes = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor y({xv.dim(0), xv.dim(1), oh, ow});
  std::vector<std::size_t> argmax(y.size());
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        std::size_t best = p * h * w + (2 * i) * w + 2 * j;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = p * h * w + (2 * i + dy) * w + 2 * j + dx;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = p * oh * ow + i * ow + j;
        y[o] = xv[best];
        argmax[o] = best;
      }
  return g.push_op(std::move(y), {x.id}, [argmax = std::move(argmax)](Graph& gr, std::size_t self) {
    const auto p = gr.parents(self)[0];
    const auto& dy = gr.node_grad(self);
    auto& dx = gr.grad_buffer(p);
    for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += dy[o];
  });
}

inline Var reshape(Graph& g, Var x, Shape shape) {
  Tensor y = g.value(x).reshaped(std::move(shape));
  return g.push_op(std::move(y), {x.id}, [](Graph& gr, std::size_t self) {
    const auto p = gr.parents(self)[0];
    const auto& dy = gr.node_grad(self);
    auto& dx = gr.grad_buffer(p);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
  });
}

/// Mean over the batch of -log softmax(logits)[label], with max-subtraction.
inline Var cross_entropy(Graph& g, Var logits, std::span<const int> labels) {
  const auto& lv = g.value(logits);
  require(lv.rank() == 2, ErrorCode::shape_mismatch, "cross_entropy expects logits [B, K]");
  const std::size_t batch = lv.dim(0), classes = lv.dim(1);
  require(labels.size() == batch, ErrorCode::shape_mismatch,
          "cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
              std::to_string(batch));
  std::vector<double> probs(lv.size());
  double total = 0.0;
  for (std::size_t n = 0; n < batch; ++n) {
    const int y = labels[n];
    require(y >= 0 && static_cast<std::size_t>(y) < classes, ErrorCode::out_of_range,
            "label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    const double* row = lv.data() + n * classes;
    const double mx = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t k = 0; k < classes; ++k) z += std::exp(row[k] - mx);
    const double log_z = std::log(z) + mx;
    for (std::size_t k = 0; k < classes; ++k) probs[n * classes + k] = std::exp(row[k] - log_z);
    total += log_z - row[y];
  }
  const double loss = total / static_cast<double>(batch);
  require(std::isfinite(loss), ErrorCode::non_finite, "cross_entropy produced a non-finite loss");
  std::vector<int> ys(labels.begin(), labels.end());
  return g.push_op(Tensor::scalar(loss), {logits.id},
                   [batch, classes, probs = std::move(probs), ys = std::move(ys)](Graph& gr, std::size_t self) {
    const auto p = gr.parents(self)[0];
    const double scale = gr.node_grad(self)[0] / static_cast<double>(batch);
    auto& dl = gr.grad_buffer(p);
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t k = 0; k < classes; ++k) {
        const double target = static_cast<std::size_t>(ys[n]) == k ? 1.0 : 0.0;
        dl[n * classes + k] += scale * (probs[n * classes + k] - target);
      }
  });
}

inline Var sum(Graph& g, Var x) {
  const auto& xv = g.value(x);
  double acc = 0.0;
  for (double v : xv.values()) acc += v;
  return g.push_op(Tensor::scalar(acc), {x.id}, [](Graph& gr, std::size_t self) {
    const auto p = gr.parents(self)[0];
    const double d = gr.node_grad(self)[0];
    auto& dx = gr.grad_buffer(p);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += d;
  });
}

/// Sum of |x_i| over entries with active[i] != 0. The subgradient at 0 is 0.
inline Var abs_sum(Graph& g, Var x, std::span<const std::uint8_t> active) {
  const auto& xv = g.value(x);
  require(active.size() == xv.size(), ErrorCode::shape_mismatch, "abs_sum mask length mismatch");
  std::vector<std::uint8_t> on(active.begin(), active.end());
  double acc = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i)
    if (on[i]) acc += std::abs(xv[i]);
  return g.push_op(Tensor::scalar(acc), {x.id}, [on = std::move(on)](Graph& gr, std::size_t self) {
    const auto p = gr.parents(self)[0];
    const double d = gr.node_grad(self)[0];
    const auto& xv = gr.node_value(p);
    auto& dx = gr.grad_buffer(p);
    for (std::size_t i = 0; i < dx.size(); ++i) {
      if (!on[i] || xv[i] == 0.0) continue;
      dx[i] += xv[i] > 0.0 ? d : -d;
    }
  });
}

namespace detail {

template <class F, class GA, class GB>
Var binary(Graph& g, Var a, Var b, F f, GA da, GB db) {
  const auto& av = g.value(a);
  const auto& bv = g.value(b);
  require(av.shape() == bv.shape(), ErrorCode::shape_mismatch,
          "elementwise op on " + shape_string(av.shape()) + " and " + shape_string(bv.shape()));
  Tensor y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(av[i], bv[i]);
  return g.push_op(std::move(y), {a.id, b.id}, [da, db](Graph& gr, std::size_t self) {
    const auto& ps = gr.parents(self);
    const auto& dy = gr.node_grad(self);
    const auto& av = gr.node_value(ps[0]);
    const auto& bv = gr.node_value(ps[1]);
    if (wants(gr, ps[0])) {
      auto& dx = gr.grad_buffer(ps[0]);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * da(av[i], bv[i]);
    }
    if (wants(gr, ps[1])) {
      auto& dx = gr.grad_buffer(ps[1]);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * db(av[i], bv[i]);
    }
  });
}

}  // namespace detail

inline Var add(Graph& g, Var a, Var b) {
  return detail::binary(
      g, a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Var sub(Graph& g, Var a, Var b) {
  return detail::binary(
      g, a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Var mul(Graph& g, Var a, Var b) {
  return detail::binary(
      g, a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Var scale(Graph& g, Var x, double c) {
  const auto& xv = g.value(x);
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * c;
  return g.push_op(std::move(y), {x.id}, [c](Graph& gr, std::size_t self) {
    const auto p = gr.parents(self)[0];
    const auto& dy = gr.node_grad(self);
    auto& dx = gr.grad_buffer(p);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += c * dy[i];
  });
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Optimization

/// Plain SGD: value -= lr * grad for trainable parameters, then every
/// gradient is zeroed.
inline void sgd_step(std::span<Parameter* const> params, double lr) {
  require(lr > 0.0 && std::isfinite(lr), ErrorCode::invalid_argument,
          "learning rate must be positive, got " + std::to_string(lr));
  for (Parameter* p : params) {
    if (p->trainable) {
      auto v = p->value.values();
      auto gr = p->grad.values();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * gr[i];
    }
    p->zero_grad();
  }
}

struct SgdOptions {
  double momentum = 0.0;
  double weight_decay = 0.0;
};

/// SGD with optional momentum and L2 weight decay. Both default off, in
/// which case step() is identical to sgd_step().
class Sgd {
 public:
  explicit Sgd(SgdOptions options = {}) : options_(options) {
    require(options.momentum >= 0.0 && options.momentum < 1.0, ErrorCode::invalid_argument,
            "momentum must lie in [0, 1)");
    require(options.weight_decay >= 0.0, ErrorCode::invalid_argument,
            "weight decay must be non-negative");
  }

  void step(std::span<Parameter* const> params, double lr) {
    if (options_.momentum == 0.0 && options_.weight_decay == 0.0) {
      sgd_step(params, lr);
      return;
    }
    require(lr > 0.0 && std::isfinite(lr), ErrorCode::invalid_argument,
            "learning rate must be positive, got " + std::to_string(lr));
    if (velocity_.size() != params.size()) {
      velocity_.clear();
      for (Parameter* p : params) velocity_.emplace_back(p->value.shape(), 0.0);
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
      Parameter* p = params[k];
      if (p->trainable) {
        auto v = p->value.values();
        auto gr = p->grad.values();
        auto vel = velocity_[k].values();
        for (std::size_t i = 0; i < v.size(); ++i) {
          const double d = gr[i] + options_.weight_decay * v[i];
          vel[i] = options_.momentum * vel[i] + d;
          v[i] -= lr * vel[i];
        }
      }
      p->zero_grad();
    }
  }

 private:
  SgdOptions options_;
  std::vector<Tensor> velocity_;
};

struct LrSchedule {
  double initial_lr = 0.01;
  double min_lr = 0.0;
  std::size_t total_steps = 1;
};

inline void validate(const LrSchedule& s) {
  require(s.initial_lr > 0.0, ErrorCode::invalid_argument, "initial_lr must be positive");
  require(s.min_lr >= 0.0 && s.min_lr <= s.initial_lr, ErrorCode::invalid_argument,
          "min_lr must lie in [0, initial_lr]");
  require(s.total_steps > 0, ErrorCode::invalid_argument, "total_steps must be positive");
}

/// Cosine annealing from initial_lr at step 0 to min_lr at total_steps.
inline double cosine_lr(const LrSchedule& s, std::size_t step) {
  validate(s);
  require(step <= s.total_steps, ErrorCode::out_of_range,
          "step " + std::to_string(step) + " beyond schedule of " + std::to_string(s.total_steps));
  const double phase = std::numbers::pi * static_cast<double>(step) / static_cast<double>(s.total_steps);
  return s.min_lr + 0.5 * (s.initial_lr - s.min_lr) * (1.0 + std::cos(phase));
}

}  // namespace smsp
