// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <set>

#include "smsp/bench.hpp"
#include "smsp/data.hpp"
#include "test_support.hpp"

namespace smsp {
namespace {

DatasetSource small_source() {
  DatasetSource s;
  s.samples_per_class = 12;
  return s;
}

TEST(Generator, DeterministicPerSeed) {
  const auto a = generate_synthetic_dataset(small_source(), 7);
  EXPECT_EQ(a, generate_synthetic_dataset(small_source(), 7));
  EXPECT_NE(a.pixels, generate_synthetic_dataset(small_source(), 8).pixels);
  EXPECT_EQ(a.size(), 20U * 12);
  EXPECT_EQ(a.sample_size(), 256U);
  EXPECT_EQ(a.domain, "base");
}

TEST(Generator, ClassesInterleaveAndSplit) {
  const auto d = generate_synthetic_dataset(small_source(), 7);
  std::vector<std::size_t> tests(d.num_classes, 0);
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(d.labels[i], i % 20);
    tests[d.labels[i]] += d.is_test(i);
  }
  for (auto t : tests) EXPECT_EQ(t, 3U);
}

TEST(Generator, ShiftedVariantDiffers) {
  auto src = small_source();
  const auto base = generate_synthetic_dataset(src, 7);
  src.shifted = true;
  const auto shifted = generate_synthetic_dataset(src, 7);
  EXPECT_EQ(shifted.domain, "shifted");
  EXPECT_NE(base.pixels, shifted.pixels);
}

TEST(Generator, NoiselessSamplesEqualPrototype) {
  auto src = small_source();
  src.noise = 0.0;
  const auto d = generate_synthetic_dataset(src, 3);
  const auto proto = class_prototype(src, 3, 5);
  for (std::size_t i : {5U, 25U, 45U})
    EXPECT_TRUE(std::equal(proto.begin(), proto.end(), d.pixels.begin() + static_cast<std::ptrdiff_t>(i * 256)));
}

TEST(DatasetFile, RoundTripIsBitExact) {
  testing::TempDir dir("data");
  const auto d = generate_synthetic_dataset(small_source(), 7);
  save_dataset(dir.path() / "base.smds", d);
  const auto bytes = detail::read_file(dir.path() / "base.smds");
  ASSERT_EQ(bytes.size(), 28U + d.size() * 257);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "SMDS");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[8], d.size() & 0xFF);
  EXPECT_EQ(bytes[12], 16);
  EXPECT_EQ(bytes[28], d.labels[0]);
  EXPECT_EQ(bytes[29], d.pixels[0]);
  EXPECT_EQ(load_dataset(dir.path() / "base.smds"), d);
  EXPECT_EQ(encode_dataset(decode_dataset(bytes)), bytes);
}

TEST(DatasetFile, ShiftedNameSetsDomain) {
  testing::TempDir dir("data");
  auto src = small_source();
  src.shifted = true;
  const auto d = generate_synthetic_dataset(src, 7);
  save_dataset(dir.path() / "shifted.smds", d);
  EXPECT_EQ(load_dataset(dir.path() / "shifted.smds").domain, "shifted");
  save_dataset(dir.path() / "other.smds", d);
  EXPECT_EQ(load_dataset(dir.path() / "other.smds").domain, "base");
}

TEST(DatasetFile, RejectsDamage) {
  const auto bytes = encode_dataset(generate_synthetic_dataset(small_source(), 7));
  auto expect_code = [](std::vector<std::uint8_t> b, ErrorCode code) {
    try {
      decode_dataset(b);
      ADD_FAILURE() << "decoded damaged dataset";
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), code) << e.what();
    }
  };
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  expect_code(bad_magic, ErrorCode::bad_format);
  auto truncated = bytes;
  truncated.pop_back();
  expect_code(truncated, ErrorCode::bad_format);
  expect_code({bytes.begin(), bytes.begin() + 10}, ErrorCode::bad_format);
  auto bad_label = bytes;
  bad_label[28] = 200;
  expect_code(bad_label, ErrorCode::out_of_range);
  auto version = bytes;
  version[4] = 9;
  expect_code(version, ErrorCode::bad_format);
  EXPECT_THROW(load_dataset("/nonexistent/base.smds"), Error);
}

TEST(Tasks, RemapAndSplit) {
  const auto d = generate_synthetic_dataset(small_source(), 7);
  const auto t = make_task(d, 42, {9, 2, 14}, 5);
  EXPECT_EQ(t.classes, (std::vector<int>{2, 9, 14}));
  EXPECT_EQ(t.train_indices.size(), 27U);
  EXPECT_EQ(t.test_indices.size(), 9U);
  const auto data = materialize(d, t);
  EXPECT_EQ(data.train_x.shape(), (Shape{27, 1, 16, 16}));
  for (std::size_t i = 0; i < t.train_indices.size(); ++i)
    EXPECT_EQ(t.classes[static_cast<std::size_t>(data.train_y[i])], d.labels[t.train_indices[i]]);
  EXPECT_DOUBLE_EQ(data.train_x[0], (d.pixels[t.train_indices[0] * 256] - kPixelCenter) / kPixelScale);
  EXPECT_THROW(make_task(d, 1, {3, 3}, 0), Error);
}

TEST(Tasks, SamplingIsDeterministicAndDisjoint) {
  const auto d = generate_synthetic_dataset(small_source(), 7);
  const auto a = sample_tasks(d, 3, 10, 99, {}, 500);
  const auto b = sample_tasks(d, 3, 10, 99, {}, 500);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].classes, b[i].classes);
    EXPECT_EQ(a[i].task_id, 500 + i);
    EXPECT_EQ(std::set<int>(a[i].classes.begin(), a[i].classes.end()).size(), 3U);
  }
  const std::vector<std::vector<int>> banned{{0, 1, 2, 3, 4, 5, 6, 7, 8, 9}};
  for (const auto& t : sample_tasks(d, 3, 20, 5, banned))
    for (int c : t.classes) EXPECT_GE(c, 10);
  EXPECT_THROW(sample_tasks(d, 11, 1, 5, banned), Error);
}

TEST(BatchSampler, EveryEpochIsAPermutation) {
  BatchSampler s(10, 3, 4);
  for (int epoch = 0; epoch < 3; ++epoch) {
    std::multiset<std::size_t> seen;
    for (int b = 0; b < 3; ++b)
      for (auto i : s.next()) seen.insert(i);
    EXPECT_EQ(seen.size(), 9U);
    EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), 9U);
  }
  EXPECT_EQ(BatchSampler(4, 32, 1).batch_size(), 4U);
}

TEST(Generator, LinearProbeSeparatesClasses) {
  const auto d = generate_synthetic_dataset(DatasetSource{}, 7);
  Architecture probe;
  probe.id = "probe";
  probe.input = {1, 16, 16};
  PretrainConfig pc;
  pc.epochs = 10;
  pc.lr = {0.02, 0.0, 1};
  pc.seed = 3;
  const auto r = pretrain_backbone(d, probe, pc);
  EXPECT_GT(r.test_accuracy, 0.90);
}

}  // namespace
}  // namespace smsp
