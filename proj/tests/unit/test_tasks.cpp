// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The cmru Authors.

#include "cmru/tasks.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace cmru;

namespace {

TaskSpec spec_of(TaskKind kind, int length, std::uint64_t seed = 1) {
  TaskSpec t;
  t.kind = kind;
  t.length_min = t.length_max = length;
  t.seed = seed;
  return t;
}

std::string temp_path(const std::string& name) { return (std::filesystem::temp_directory_path() / name).string(); }

std::string file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

void write_be32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8), static_cast<char>(v)};
  os.write(b, 4);
}

}  // namespace

TEST(CopyFirstTest, DiscreteHasExactlyOneNonzero) {
  Rng rng(1);
  for (int k = 0; k < 200; ++k) {
    const Sample s = gen_copy_first_discrete(20, rng);
    EXPECT_EQ((s.x.array() != 0.0).count(), 1);
    EXPECT_EQ(s.x(0, static_cast<Eigen::Index>(s.target)), 1.0);
  }
  EXPECT_THROW(gen_copy_first_discrete(1, rng), std::invalid_argument);
}

TEST(CopyFirstTest, DiscreteLabelsAreUniform) {
  // Chi-square with 14 degrees of freedom; 36.12 is the 0.999 quantile.
  Rng rng(2);
  std::vector<int> counts(kCopyFirstClasses, 0);
  const int n = 15000;
  for (int k = 0; k < n; ++k) ++counts[static_cast<std::size_t>(gen_copy_first_discrete(2, rng).target)];
  const double expect = n / static_cast<double>(kCopyFirstClasses);
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - expect) * (c - expect) / expect;
  EXPECT_LT(chi2, 36.12);
}

TEST(CopyFirstTest, ContinuousCleanAndNoisy) {
  Rng rng(3), noise(4);
  const Sample clean = gen_copy_first_continuous(50, false, rng, noise);
  EXPECT_EQ(clean.x.bottomRows(49).cwiseAbs().sum(), 0.0);
  EXPECT_EQ(clean.x(0, 0), clean.target);
  double sum = 0.0, abs_target = 0.0;
  long count = 0;
  const int n = 4000;
  for (int k = 0; k < n; ++k) {
    const Sample s = gen_copy_first_continuous(50, true, rng, noise);
    EXPECT_GE(s.target, -1.0);
    EXPECT_LT(s.target, 1.0);
    sum += s.x.bottomRows(49).sum();
    count += 49;
    abs_target += std::abs(s.target);
  }
  // Mean of U(-1, 1) noise: standard error sqrt(1/3 / count).
  EXPECT_LT(std::abs(sum / count), 4.0 * std::sqrt(1.0 / 3.0 / count));
  // Always predicting 0 gives MAE E|U(-1,1)| = 0.5 (sd 1/sqrt(12)).
  EXPECT_NEAR(abs_target / n, 0.5, 4.0 / std::sqrt(12.0 * n));
}

TEST(CopyFirstTest, NoisyTargetsIgnoreNoiseSeed) {
  TaskSpec a = spec_of(TaskKind::copy_first_noisy, 30);
  TaskSpec b = a;
  b.noise_seed = 99;
  const Dataset da(a, Split::train), db(b, Split::train);
  int differing = 0;
  for (int i = 0; i < 50; ++i) {
    const Sample sa = da.get(i), sb = db.get(i);
    EXPECT_EQ(sa.target, sb.target);
    EXPECT_EQ(sa.x(0, 0), sb.x(0, 0));
    differing += sa.x.bottomRows(29) != sb.x.bottomRows(29);
  }
  EXPECT_EQ(differing, 50);
}

TEST(ParityTest, Examples) {
  EXPECT_EQ(parity_label({1, 0, 1}), 0);
  EXPECT_EQ(parity_label(std::vector<int>(100, 0)), 0);
  EXPECT_EQ(parity_label({1, 1, 1}), 1);
}

TEST(ParityTest, LengthsInRangeAndLabelsMatch) {
  Rng rng(5);
  int lo_seen = 1000, hi_seen = 0;
  for (int k = 0; k < 2000; ++k) {
    const Sample s = gen_parity(5, 12, rng);
    const int len = static_cast<int>(s.x.rows());
    lo_seen = std::min(lo_seen, len);
    hi_seen = std::max(hi_seen, len);
    std::vector<int> bits;
    for (int t = 0; t < len; ++t) bits.push_back(static_cast<int>(s.x(t, 0)));
    EXPECT_EQ(s.target, parity_label(bits));
  }
  EXPECT_EQ(lo_seen, 5);
  EXPECT_EQ(hi_seen, 12);
}

TEST(ParityTest, LabelsAreBalanced) {
  Rng rng(6);
  const int n = 10000;
  int ones = 0;
  for (int k = 0; k < n; ++k) ones += static_cast<int>(gen_parity(50, 400, rng).target);
  EXPECT_NEAR(ones / static_cast<double>(n), 0.5, 3.0 * std::sqrt(0.25 / n));
}

TEST(QuantizationTest, ClosedFormAndMonteCarlo) {
  EXPECT_EQ(quantization_limit(4), 0.03125);
  EXPECT_EQ(quantization_limit(1), 0.25);
  EXPECT_THROW(quantization_limit(0), std::invalid_argument);
  Rng rng(7);
  EXPECT_NEAR(midpoint_quantizer_mae(4, 1000000, rng), 0.03125, 1e-3);
  EXPECT_NEAR(midpoint_quantizer_mae(2, 200000, rng), 0.125, 2e-3);
}

TEST(TaskSpecTest, DefaultsAndParsing) {
  const TaskSpec cf = task_spec_from_json({{"kind", "copy_first_discrete"}, {"length", 300}});
  EXPECT_EQ(cf.length_min, 300);
  EXPECT_EQ(cf.length_max, 300);
  EXPECT_EQ(cf.train_size, 10000);
  EXPECT_EQ(cf.validation_size, 2000);
  EXPECT_EQ(cf.test_size, 2000);
  EXPECT_EQ(cf.outputs(), 15);
  EXPECT_EQ(cf.features(), 15);

  const TaskSpec par = task_spec_from_json({{"kind", "parity"}});
  EXPECT_EQ(par.lengths(Split::train), std::make_pair(50, 400));
  EXPECT_EQ(par.lengths(Split::validation), std::make_pair(50, 400));
  EXPECT_EQ(par.lengths(Split::test), std::make_pair(50, 1000));
  EXPECT_EQ(par.outputs(), 2);
  EXPECT_EQ(par.target(), TargetKind::classification);
  EXPECT_EQ(task_spec_from_json({{"kind", "copy_first_noisy"}, {"length", 10}}).target(), TargetKind::regression);

  const nlohmann::json j = par;
  EXPECT_EQ(nlohmann::json(task_spec_from_json(j)), j);
}

TEST(TaskSpecTest, Errors) {
  try {
    task_spec_from_json({{"kind", "parity"}, {"lenght", 3}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key, "task.lenght");
  }
  EXPECT_THROW(task_spec_from_json({{"kind", "copy"}}), ConfigError);
  EXPECT_THROW(task_spec_from_json({{"length", 3}}), ConfigError);
  EXPECT_THROW(task_spec_from_json({{"kind", "copy_first_discrete"}, {"length_min", 3}, {"length_max", 5}}), ConfigError);
  EXPECT_THROW(task_spec_from_json({{"kind", "smnist"}}), ConfigError);
}

TEST(DatasetTest, ReproducibleAndSplitsDisjoint) {
  const TaskSpec t = spec_of(TaskKind::copy_first_continuous, 8, 11);
  const Dataset a(t, Split::train), b(t, Split::train), v(t, Split::validation), te(t, Split::test);
  for (int i = 0; i < 20; ++i) {
    EXPECT_EQ(a.get(i).x, b.get(i).x);
    EXPECT_NE(a.get(i).target, v.get(i).target);
    EXPECT_NE(v.get(i).target, te.get(i).target);
  }
  EXPECT_NE(a.stream().stream(), v.stream().stream());
  EXPECT_NE(v.stream().stream(), te.stream().stream());
  // Sample i does not depend on which other samples were drawn.
  EXPECT_EQ(a.get(7).target, Dataset(t, Split::train).get(7).target);
  EXPECT_THROW(a.get(t.train_size), std::out_of_range);
}

TEST(DatasetTest, BatchPadsWithZerosAndRecordsLengths) {
  TaskSpec t;
  t.kind = TaskKind::parity;
  t.length_min = 3;
  t.length_max = 9;
  t.seed = 4;
  const Dataset d(t, Split::train);
  std::vector<int> idx{0, 1, 2, 3, 4, 5};
  std::vector<double> targets;
  const SequenceBatch sb = d.batch(idx, targets);
  ASSERT_EQ(targets.size(), idx.size());
  int max_len = 0;
  for (int b = 0; b < 6; ++b) {
    const Sample s = d.get(b);
    const int len = static_cast<int>(s.x.rows());
    max_len = std::max(max_len, len);
    EXPECT_EQ(sb.lengths()[static_cast<std::size_t>(b)], len);
    EXPECT_EQ(targets[static_cast<std::size_t>(b)], s.target);
    for (int t2 = 0; t2 < sb.time(); ++t2) EXPECT_EQ(sb.at(b, t2, 0), t2 < len ? s.x(t2, 0) : 0.0);
  }
  EXPECT_EQ(sb.time(), max_len);
}

TEST(DatasetFileTest, HeaderRoundTripsAndBytesAreDeterministic) {
  TaskSpec t = task_spec_from_json({{"kind", "parity"}, {"seed", 5}, {"train_size", 40}});
  const Dataset d(t, Split::train);
  const auto p1 = temp_path("cmru_gen_a.bin"), p2 = temp_path("cmru_gen_b.bin");
  const DatasetHeader h = write_dataset(p1, d, 40);
  write_dataset(p2, Dataset(t, Split::train), 40);
  EXPECT_EQ(file_bytes(p1), file_bytes(p2));
  const DatasetFile f = read_dataset(p1);
  EXPECT_EQ(f.header, h);
  EXPECT_EQ(f.header.kind, TaskKind::parity);
  EXPECT_EQ(f.header.count, 40u);
  EXPECT_EQ(f.header.length_min, 50u);
  EXPECT_EQ(f.header.length_max, 400u);
  ASSERT_EQ(f.samples.size(), 40u);
  for (int i = 0; i < 40; ++i) {
    EXPECT_EQ(f.samples[static_cast<std::size_t>(i)].x, d.get(i).x);
    EXPECT_EQ(f.samples[static_cast<std::size_t>(i)].target, d.get(i).target);
  }
  EXPECT_THROW(write_dataset(p1, d, 0), std::invalid_argument);
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST(MnistTest, PermutationIsAFixedBijection) {
  auto p = fixed_permutation(784, 3);
  EXPECT_EQ(p, fixed_permutation(784, 3));
  EXPECT_NE(p, fixed_permutation(784, 4));
  std::sort(p.begin(), p.end());
  for (int i = 0; i < 784; ++i) EXPECT_EQ(p[static_cast<std::size_t>(i)], i);
}

TEST(MnistTest, LoadsIdxFilesAndChecksMagic) {
  const auto dir = std::filesystem::temp_directory_path() / "cmru_fake_mnist";
  std::filesystem::create_directories(dir);
  auto write_images = [&](const std::string& name, int n) {
    std::ofstream os(dir / name, std::ios::binary);
    write_be32(os, 0x803);
    write_be32(os, static_cast<std::uint32_t>(n));
    write_be32(os, 28);
    write_be32(os, 28);
    for (int i = 0; i < n * 784; ++i) os.put(static_cast<char>((i * 7) % 256));
  };
  auto write_labels = [&](const std::string& name, int n) {
    std::ofstream os(dir / name, std::ios::binary);
    write_be32(os, 0x801);
    write_be32(os, static_cast<std::uint32_t>(n));
    for (int i = 0; i < n; ++i) os.put(static_cast<char>(i % 10));
  };
  write_images("train-images-idx3-ubyte", 5);
  write_labels("train-labels-idx1-ubyte", 5);
  write_images("t10k-images-idx3-ubyte", 2);
  write_labels("t10k-labels-idx1-ubyte", 2);

  const MnistSplits s = load_smnist(dir.string(), std::nullopt, 2);
  ASSERT_EQ(s.train.size(), 3u);
  ASSERT_EQ(s.validation.size(), 2u);
  ASSERT_EQ(s.test.size(), 2u);
  EXPECT_EQ(s.train[0].x.rows(), 784);
  EXPECT_EQ(s.train[1].target, 1.0);
  EXPECT_DOUBLE_EQ(s.train[0].x(1, 0), 7.0 / 255.0);
  EXPECT_LE(s.train[0].x.maxCoeff(), 1.0);

  const MnistSplits perm = load_smnist(dir.string(), 3, 2);
  const auto order = fixed_permutation(784, 3);
  for (int t = 0; t < 784; ++t) EXPECT_EQ(perm.test[1].x(t, 0), s.test[1].x(order[static_cast<std::size_t>(t)], 0));

  {
    std::ofstream os(dir / "t10k-labels-idx1-ubyte", std::ios::binary);
    write_be32(os, 0x802);
    write_be32(os, 2);
  }
  EXPECT_THROW(load_smnist(dir.string(), std::nullopt, 2), std::runtime_error);
  std::filesystem::remove_all(dir);
  EXPECT_THROW(load_smnist(dir.string(), std::nullopt, 2), std::runtime_error);
}
