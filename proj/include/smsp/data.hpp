// SPDX-License-Identifier: Apache-2.0
//
// Image-like classification datasets, c-class task sampling and
// mini-batch iteration.
//
// Raw dataset file (little-endian):
//   char[4] magic "SMDS" | u32 version (=1) | u32 count | u32 height |
//   u32 width | u32 channels | u32 num_classes |
//   count x { u8 label | height*width*channels u8 pixels (CHW order) }
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "smsp/common.hpp"
#include "smsp/gradcore.hpp"

namespace smsp {

/// Pixels are stored as bytes; the network sees (p - kPixelCenter) / kPixelScale.
inline constexpr double kPixelCenter = 128.0;
inline constexpr double kPixelScale = 32.0;

struct Dataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::size_t num_classes = 0;
  std::vector<std::uint8_t> labels;
  std::vector<std::uint8_t> pixels;
  /// "base" for the backbone's own label space; anything else marks a
  /// foreign distribution whose tasks need a fresh classifier head.
  std::string domain = "base";

  std::size_t size() const { return labels.size(); }
  std::size_t sample_size() const { return height * width * channels; }

  /// Every class contributes samples round-robin; within a class every
  /// fourth sample is held out for testing.
  bool is_test(std::size_t index) const { return (index / num_classes) % 4 == 3; }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline void validate(const Dataset& d) {
  require(d.height > 0 && d.width > 0 && d.channels > 0, ErrorCode::bad_format,
          "dataset dimensions must be positive");
  require(d.num_classes > 0 && d.num_classes <= 256, ErrorCode::bad_format,
          "dataset must have 1..256 classes");
  require(d.pixels.size() == d.labels.size() * d.sample_size(), ErrorCode::bad_format,
          "dataset pixel buffer does not match sample count");
  for (auto y : d.labels)
    require(y < d.num_classes, ErrorCode::out_of_range,
            "label " + std::to_string(y) + " >= num_classes " + std::to_string(d.num_classes));
}

// ---------------------------------------------------------------------------
// Synthetic generator

struct DatasetSource {
  enum class Kind { synthetic, file };
  Kind kind = Kind::synthetic;
  std::size_t num_classes = 20;
  std::size_t samples_per_class = 200;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 1;
  /// Classes are organised in groups sharing a spatial region and a
  /// pattern basis, so that different classes of one group rely on
  /// overlapping features.
  std::size_t groups = 5;
  std::size_t basis_per_group = 4;
  double region_sigma = 3.0;
  double noise = 1.0;
  /// Produce the shifted variant: new prototypes from a different
  /// coefficient distribution over the same world structure, plus a global
  /// offset pattern.
  bool shifted = false;
  std::string path;
};

namespace detail {

struct World {
  std::vector<std::vector<double>> basis;  // [group * B + b] -> pixels
  std::vector<double> offset;              // global offset of the shifted variant
};

inline World make_world(const DatasetSource& src, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, "world"));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t hw = src.height * src.width;
  const std::size_t pix = hw * src.channels;
  World w;
  for (std::size_t g = 0; g < src.groups; ++g) {
    const double cy = unit(rng) * static_cast<double>(src.height - 1);
    const double cx = unit(rng) * static_cast<double>(src.width - 1);
    std::vector<double> envelope(hw);
    for (std::size_t y = 0; y < src.height; ++y)
      for (std::size_t x = 0; x < src.width; ++x) {
        const double d2 = (static_cast<double>(y) - cy) * (static_cast<double>(y) - cy) +
                          (static_cast<double>(x) - cx) * (static_cast<double>(x) - cx);
        envelope[y * src.width + x] = std::exp(-d2 / (2.0 * src.region_sigma * src.region_sigma));
      }
    for (std::size_t b = 0; b < src.basis_per_group; ++b) {
      std::vector<double> pattern(pix);
      for (std::size_t c = 0; c < src.channels; ++c)
        for (std::size_t p = 0; p < hw; ++p) pattern[c * hw + p] = normal(rng) * envelope[p];
      w.basis.push_back(std::move(pattern));
    }
  }
  w.offset.resize(pix);
  for (auto& v : w.offset) v = 0.3 * normal(rng);
  return w;
}

}  // namespace detail

/// Generates the dataset described by `src`. Same (src, seed) gives a
/// byte-identical dataset; the base and shifted variants of one seed share
/// group regions and pattern bases but no class prototypes.
inline Dataset generate_synthetic_dataset(const DatasetSource& src, std::uint64_t seed) {
  require(src.kind == DatasetSource::Kind::synthetic, ErrorCode::invalid_argument,
          "generate_synthetic_dataset needs a synthetic source");
  require(src.num_classes > 0 && src.num_classes <= 256, ErrorCode::invalid_argument,
          "num_classes must lie in 1..256");
  require(src.groups > 0 && src.basis_per_group > 0 && src.samples_per_class > 0,
          ErrorCode::invalid_argument, "groups, basis_per_group and samples_per_class must be positive");
  require(src.height > 0 && src.width > 0 && src.channels > 0, ErrorCode::invalid_argument,
          "image dimensions must be positive");
  require(src.noise >= 0.0, ErrorCode::invalid_argument, "noise must be non-negative");

  const auto world = detail::make_world(src, seed);
  const std::size_t pix = src.height * src.width * src.channels;
  std::mt19937_64 proto_rng(derive_seed(seed, src.shifted ? "prototypes/shifted" : "prototypes/base"));
  std::normal_distribution<double> normal(0.0, 1.0);
  const double coef_scale = 1.0 / std::sqrt(static_cast<double>(src.basis_per_group));

  std::vector<std::vector<double>> prototypes(src.num_classes, std::vector<double>(pix, 0.0));
  for (std::size_t c = 0; c < src.num_classes; ++c) {
    const std::size_t g = c % src.groups;
    for (std::size_t b = 0; b < src.basis_per_group; ++b) {
      double a = normal(proto_rng) * coef_scale * 2.0;
      if (src.shifted) a = a * 0.8 + 0.6 * coef_scale * (b % 2 == 0 ? 1.0 : -1.0);
      const auto& pattern = world.basis[g * src.basis_per_group + b];
      for (std::size_t p = 0; p < pix; ++p) prototypes[c][p] += a * pattern[p];
    }
    if (src.shifted)
      for (std::size_t p = 0; p < pix; ++p) prototypes[c][p] += world.offset[p];
  }

  Dataset d;
  d.height = src.height;
  d.width = src.width;
  d.channels = src.channels;
  d.num_classes = src.num_classes;
  d.domain = src.shifted ? "shifted" : "base";
  const std::size_t count = src.num_classes * src.samples_per_class;
  d.labels.resize(count);
  d.pixels.resize(count * pix);
  std::mt19937_64 noise_rng(derive_seed(seed, src.shifted ? "noise/shifted" : "noise/base"));
  std::normal_distribution<double> noise_normal(0.0, 1.0);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t c = i % src.num_classes;
    d.labels[i] = static_cast<std::uint8_t>(c);
    for (std::size_t p = 0; p < pix; ++p) {
      const double e = src.noise > 0.0 ? src.noise * noise_normal(noise_rng) : 0.0;
      const double v = std::round(kPixelCenter + kPixelScale * (prototypes[c][p] + e));
      d.pixels[i * pix + p] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
    }
  }
  return d;
}

/// Quantized class prototypes as they would appear with zero noise.
inline std::vector<std::uint8_t> class_prototype(const DatasetSource& src, std::uint64_t seed, std::size_t c) {
  DatasetSource clean = src;
  clean.noise = 0.0;
  clean.samples_per_class = 1;
  const Dataset d = generate_synthetic_dataset(clean, seed);
  const auto n = d.sample_size();
  return {d.pixels.begin() + static_cast<std::ptrdiff_t>(c * n),
          d.pixels.begin() + static_cast<std::ptrdiff_t>((c + 1) * n)};
}

// ---------------------------------------------------------------------------
// Raw file format

inline constexpr std::array<char, 4> kDatasetMagic{'S', 'M', 'D', 'S'};
inline constexpr std::uint32_t kDatasetVersion = 1;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[at + i]) << (8 * i);
  return v;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::io_failure, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes to a sibling temp file and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::io_failure, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    require(static_cast<bool>(out), ErrorCode::io_failure, "short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  require(!ec, ErrorCode::io_failure, "cannot rename " + tmp.string() + ": " + ec.message());
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_dataset(const Dataset& d) {
  validate(d);
  std::vector<std::uint8_t> out(kDatasetMagic.begin(), kDatasetMagic.end());
  detail::put_u32(out, kDatasetVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(d.size()));
  detail::put_u32(out, static_cast<std::uint32_t>(d.height));
  detail::put_u32(out, static_cast<std::uint32_t>(d.width));
  detail::put_u32(out, static_cast<std::uint32_t>(d.channels));
  detail::put_u32(out, static_cast<std::uint32_t>(d.num_classes));
  const std::size_t n = d.sample_size();
  out.reserve(out.size() + d.size() * (n + 1));
  for (std::size_t i = 0; i < d.size(); ++i) {
    out.push_back(d.labels[i]);
    out.insert(out.end(), d.pixels.begin() + static_cast<std::ptrdiff_t>(i * n),
               d.pixels.begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
  }
  return out;
}

inline Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t header = 4 + 6 * 4;
  require(bytes.size() >= header, ErrorCode::bad_format, "dataset file truncated in header");
  require(std::equal(kDatasetMagic.begin(), kDatasetMagic.end(), bytes.begin()), ErrorCode::bad_format,
          "dataset file has bad magic");
  const auto version = detail::get_u32(bytes, 4);
  require(version == kDatasetVersion, ErrorCode::bad_format,
          "unsupported dataset version " + std::to_string(version));
  Dataset d;
  const std::size_t count = detail::get_u32(bytes, 8);
  d.height = detail::get_u32(bytes, 12);
  d.width = detail::get_u32(bytes, 16);
  d.channels = detail::get_u32(bytes, 20);
  d.num_classes = detail::get_u32(bytes, 24);
  require(d.height > 0 && d.width > 0 && d.channels > 0 && d.num_classes > 0, ErrorCode::bad_format,
          "dataset header has zero dimension");
  const std::size_t n = d.sample_size();
  require(bytes.size() == header + count * (n + 1), ErrorCode::bad_format,
          "dataset file size " + std::to_string(bytes.size()) + " does not match header (expected " +
              std::to_string(header + count * (n + 1)) + ")");
  d.labels.resize(count);
  d.pixels.resize(count * n);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t at = header + i * (n + 1);
    d.labels[i] = bytes[at];
    std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(at + 1), n,
                d.pixels.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  validate(d);
  return d;
}

inline void save_dataset(const std::filesystem::path& path, const Dataset& d) {
  detail::write_file_atomic(path, encode_dataset(d));
}

/// Reads a raw dataset file. The domain tag is not stored in the file; a
/// file whose name starts with "shifted" is tagged as the shifted domain.
inline Dataset load_dataset(const std::filesystem::path& path) {
  Dataset d = decode_dataset(detail::read_file(path));
  if (path.filename().string().rfind("shifted", 0) == 0) d.domain = "shifted";
  return d;
}

// ---------------------------------------------------------------------------
// Tasks

struct TaskSpec {
  std::uint64_t task_id = 0;
  std::vector<int> classes;  // sorted, distinct
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> test_indices;
  std::uint64_t seed = 0;
  std::string domain = "base";
};

/// Tensors of one task, labels remapped to positions in `classes`.
struct TaskData {
  Tensor train_x;
  std::vector<int> train_y;
  Tensor test_x;
  std::vector<int> test_y;

  std::size_t num_classes = 0;
  std::vector<int> classes;  // original labels, position = remapped label
};

inline Tensor gather_images(const Dataset& d, std::span<const std::size_t> indices) {
  require(!indices.empty(), ErrorCode::invalid_argument, "cannot gather an empty sample set");
  const std::size_t n = d.sample_size();
  Tensor x({indices.size(), d.channels, d.height, d.width});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::uint8_t* src = d.pixels.data() + indices[i] * n;
    double* dst = x.data() + i * n;
    for (std::size_t p = 0; p < n; ++p) dst[p] = (static_cast<double>(src[p]) - kPixelCenter) / kPixelScale;
  }
  return x;
}

inline TaskSpec make_task(const Dataset& d, std::uint64_t task_id, std::vector<int> classes, std::uint64_t seed) {
  std::sort(classes.begin(), classes.end());
  require(std::adjacent_find(classes.begin(), classes.end()) == classes.end(), ErrorCode::invalid_argument,
          "task classes must be distinct");
  TaskSpec t;
  t.task_id = task_id;
  t.classes = std::move(classes);
  t.seed = seed;
  t.domain = d.domain;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!std::binary_search(t.classes.begin(), t.classes.end(), static_cast<int>(d.labels[i]))) continue;
    (d.is_test(i) ? t.test_indices : t.train_indices).push_back(i);
  }
  require(!t.train_indices.empty() && !t.test_indices.empty(), ErrorCode::infeasible,
          "task has no train or test samples");
  return t;
}

inline TaskData materialize(const Dataset& d, const TaskSpec& t) {
  TaskData out;
  out.num_classes = t.classes.size();
  out.classes = t.classes;
  auto remap = [&](std::size_t i) {
    const auto it = std::lower_bound(t.classes.begin(), t.classes.end(), static_cast<int>(d.labels[i]));
    return static_cast<int>(it - t.classes.begin());
  };
  out.train_x = gather_images(d, t.train_indices);
  out.test_x = gather_images(d, t.test_indices);
  for (auto i : t.train_indices) out.train_y.push_back(remap(i));
  for (auto i : t.test_indices) out.test_y.push_back(remap(i));
  return out;
}

/// Samples `count` tasks of `c` distinct classes each. Classes appearing in
/// any set of `disjoint_from` are excluded.
inline std::vector<TaskSpec> sample_tasks(const Dataset& d, std::size_t c, std::size_t count, std::uint64_t seed,
                                          const std::vector<std::vector<int>>& disjoint_from = {},
                                          std::uint64_t first_task_id = 0) {
  require(c > 0, ErrorCode::invalid_argument, "task size must be positive");
  std::vector<int> universe;
  for (std::size_t k = 0; k < d.num_classes; ++k) {
    bool banned = false;
    for (const auto& s : disjoint_from) banned = banned || std::find(s.begin(), s.end(), static_cast<int>(k)) != s.end();
    if (!banned) universe.push_back(static_cast<int>(k));
  }
  require(universe.size() >= c, ErrorCode::infeasible,
          "cannot sample " + std::to_string(c) + "-class tasks from " + std::to_string(universe.size()) +
              " eligible classes");
  std::mt19937_64 rng(seed);
  std::vector<TaskSpec> out;
  for (std::size_t t = 0; t < count; ++t) {
    std::vector<int> pool = universe;
    // Partial Fisher-Yates.
    for (std::size_t i = 0; i < c; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    pool.resize(c);
    out.push_back(make_task(d, first_task_id + t, std::move(pool), derive_seed(seed, t)));
  }
  return out;
}

/// Epoch-wise shuffled mini-batches over n samples.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed)
      : order_(n), batch_(std::min(batch_size, n)), rng_(seed) {
    require(n > 0 && batch_size > 0, ErrorCode::invalid_argument, "sampler needs samples and a batch size");
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    reshuffle();
  }

  std::span<const std::size_t> next() {
    if (cursor_ + batch_ > order_.size()) reshuffle();
    std::span<const std::size_t> out(order_.data() + cursor_, batch_);
    cursor_ += batch_;
    return out;
  }

  std::size_t batch_size() const { return batch_; }

 private:
  void reshuffle() {
    for (std::size_t i = order_.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order_[i - 1], order_[pick(rng_)]);
    }
    cursor_ = 0;
  }

  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t cursor_ = 0;
  std::mt19937_64 rng_;
};

/// Rows `indices` of a [N, ...] tensor.
inline Tensor take_rows(const Tensor& x, std::span<const std::size_t> indices) {
  const std::size_t per = x.size() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = indices.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < indices.size(); ++i)
    std::copy_n(x.data() + indices[i] * per, per, out.data() + i * per);
  return out;
}

inline std::vector<int> take(std::span<const int> y, std::span<const std::size_t> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(y[i]);
  return out;
}

}  // namespace smsp
