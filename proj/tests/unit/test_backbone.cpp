// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The cmru Authors.

#include "cmru/backbone.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace cmru;

namespace {

ModelConfig small_config(CellType cell, Pooling pooling, int blocks = 2) {
  ModelConfig c;
  c.cell = cell;
  c.blocks = blocks;
  c.state_dim = 3;
  c.model_dim = 6;
  c.input_dim = 2;
  c.output_dim = 3;
  c.pooling = pooling;
  c.pe_dim = 4;
  c.mlp_ratio = 2;
  c.epsilon = cell == CellType::bmru ? 0.0 : 0.5;
  return c;
}

SequenceBatch random_batch(const std::vector<int>& lengths, int features, Rng& rng) {
  int T = 1;
  for (int l : lengths) T = std::max(T, l);
  SequenceBatch x(static_cast<int>(lengths.size()), T, features);
  for (std::size_t b = 0; b < lengths.size(); ++b) {
    x.set_length(static_cast<int>(b), lengths[b]);
    for (int t = 0; t < lengths[b]; ++t)
      for (int f = 0; f < features; ++f) x.at(static_cast<int>(b), t, f) = rng.uniform(-1.0, 1.0);
  }
  return x;
}

// Every CMRU gate value, so a perturbation that flips one can be skipped.
std::vector<Mat> gate_pattern(const Model& model, const SequenceBatch& x) {
  Model::Tape tape;
  model.forward(x, &tape);
  std::vector<Mat> out;
  for (const auto& bt : tape.blocks)
    if (const auto* ct = std::get_if<CmruCell::Tape>(&bt.cell)) {
      out.push_back(ct->gate.z);
      out.push_back(ct->gate.s);
    }
  return out;
}

struct FdOutcome {
  double worst = 0.0;
  int checked = 0;
  int skipped = 0;
};

FdOutcome model_fd(Model& model, const SequenceBatch& x, const Mat& w) {
  model.execution().gate_gradient = GateGradient::exact;
  Model::Tape tape;
  zero_grad(model.params());
  model.forward(x, &tape);
  model.backward(x, tape, w);
  auto loss = [&] { return (model.forward(x).array() * w.array()).sum(); };
  const auto base = gate_pattern(model, x);
  FdOutcome r;
  for (auto& p : model.params().tensors()) {
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      double& v = p.values.data()[i];
      const double orig = v;
      v = orig + 1e-5;
      bool moved = gate_pattern(model, x) != base;
      v = orig - 1e-5;
      moved = moved || gate_pattern(model, x) != base;
      v = orig;
      if (moved) {
        ++r.skipped;
        continue;
      }
      const double fd = finite_difference_coord(loss, v);
      const double err = relative_error(p.grad.data()[i], fd, 1e-6);
      EXPECT_LT(err, 1e-4) << p.name << "[" << i << "] analytic " << p.grad.data()[i] << " fd " << fd;
      r.worst = std::max(r.worst, err);
      ++r.checked;
    }
  }
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

TEST(ModelConfigTest, RoundTripsThroughJson) {
  ModelConfig c = small_config(CellType::alpha_cmru, Pooling::mean);
  c.dropout = 0.25;
  c.surrogate_sharpness = 2.5;
  const nlohmann::json j = c;
  const ModelConfig back = model_config_from_json(j);
  EXPECT_EQ(nlohmann::json(back), j);
}

TEST(ModelConfigTest, UnknownKeyNamesTheKey) {
  try {
    model_config_from_json({{"cell", "cmru"}, {"stat_dim", 4}});
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key, "model.stat_dim");
  }
}

TEST(ModelConfigTest, UnknownCellTypeNamesTheField) {
  try {
    model_config_from_json({{"cell", "gru"}});
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key, "model.cell");
  }
}

TEST(ModelConfigTest, BmruForcesEpsilonZero) {
  EXPECT_EQ(model_config_from_json({{"cell", "bmru"}}).epsilon, 0.0);
  EXPECT_THROW(model_config_from_json({{"cell", "bmru"}, {"epsilon", 1.0}}), ConfigError);
  EXPECT_THROW(model_config_from_json({{"epsilon", 1.5}}), ConfigError);
  EXPECT_THROW(model_config_from_json({{"pe_dim", 3}}), ConfigError);
}

TEST(ModelConfigTest, DefaultsMatchProtocol) {
  const ModelConfig c;
  EXPECT_EQ(c.model_dim, 256);
  EXPECT_EQ(c.pe_dim, 32);
  EXPECT_EQ(c.mlp_ratio, 4);
  EXPECT_EQ(c.blocks, 1);
  EXPECT_EQ(c.pooling, Pooling::last);
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

class ModelGradient : public ::testing::TestWithParam<std::tuple<CellType, Pooling>> {};

TEST_P(ModelGradient, ExactPathMatchesFiniteDifferences) {
  const auto [cell, pooling] = GetParam();
  Rng rng(static_cast<std::uint64_t>(cell) * 10 + static_cast<std::uint64_t>(pooling), 7);
  Model model(small_config(cell, pooling), 11);
  // Zero-initialised biases put LayerNorm at its degenerate point, where the
  // central difference itself is inaccurate.
  for (auto& p : model.params().tensors())
    if (p.name.ends_with(".bias") || p.name.ends_with(".shift"))
      p.values = oracle::random_mat(p.values.rows(), p.values.cols(), rng, -0.5, 0.5);
  if (cell != CellType::lru && cell != CellType::mingru)
    for (auto& b : model.blocks()) {
      auto& c = std::get<CmruCell>(b.cell());
      if (c.log_alpha()) c.log_alpha()->values = oracle::random_mat(1, 3, rng, -0.5, 0.5);
    }
  const SequenceBatch x = random_batch({5, 3, 4}, 2, rng);
  const Eigen::Index out_rows = pooling == Pooling::none ? x.rows() : x.batch();
  const Mat w = oracle::random_mat(out_rows, 3, rng);
  const FdOutcome r = model_fd(model, x, w);
  EXPECT_GT(r.checked, r.skipped);
}

INSTANTIATE_TEST_SUITE_P(Cells, ModelGradient,
                         ::testing::Combine(::testing::Values(CellType::bmru, CellType::cmru, CellType::alpha_cmru,
                                                              CellType::lru, CellType::mingru),
                                            ::testing::Values(Pooling::last, Pooling::mean, Pooling::none)));

TEST(ModelTest, DedupeDoesNotChangeResults) {
  Rng rng(3);
  for (CellType cell : {CellType::cmru, CellType::lru}) {
    Model model(small_config(cell, Pooling::last), 5);
    // Many repeated rows, as in copy-first.
    SequenceBatch x(4, 9, 2);
    for (int b = 0; b < 4; ++b) {
      x.set_length(b, 5 + b);
      x.at(b, 0, 0) = rng.uniform(-1.0, 1.0);
      for (int t = 1; t < 5 + b; ++t) x.at(b, t, 1) = t % 2;
    }
    const Mat w = oracle::random_mat(4, 3, rng);
    Model::Tape ta, tb;
    zero_grad(model.params());
    const Mat ya = model.forward(x, &ta);
    model.backward(x, ta, w);
    std::vector<Mat> ga;
    for (const auto& p : model.params().tensors()) ga.push_back(p.grad);
    EXPECT_LT(ta.raw.data.rows(), 20);

    model.deduplicate_inputs() = false;
    zero_grad(model.params());
    const Mat yb = model.forward(x, &tb);
    model.backward(x, tb, w);
    EXPECT_EQ(tb.raw.data.rows(), 5 + 6 + 7 + 8);
    EXPECT_LT((ya - yb).cwiseAbs().maxCoeff(), 1e-12);
    std::size_t k = 0;
    for (const auto& p : model.params().tensors()) {
      const double scale = std::max(1.0, ga[k].cwiseAbs().maxCoeff());
      EXPECT_LT((p.grad - ga[k]).cwiseAbs().maxCoeff(), 1e-12 * scale) << p.name;
      ++k;
    }
  }
}

TEST(ModelTest, PaddingContentIsIgnored) {
  Rng rng(4);
  Model model(small_config(CellType::cmru, Pooling::mean), 6);
  SequenceBatch x = random_batch({6, 3}, 2, rng);
  const Mat w = oracle::random_mat(2, 3, rng);
  auto run = [&](std::vector<Mat>& grads) {
    Model::Tape tape;
    zero_grad(model.params());
    const Mat y = model.forward(x, &tape);
    model.backward(x, tape, w);
    grads.clear();
    for (const auto& p : model.params().tensors()) grads.push_back(p.grad);
    return y;
  };
  std::vector<Mat> g0, g1;
  const Mat y0 = run(g0);
  for (int t = 3; t < 6; ++t) x.at(1, t, 0) = 7.0;
  const Mat y1 = run(g1);
  EXPECT_EQ(y0, y1);
  EXPECT_EQ(g0, g1);
}

TEST(ModelTest, PaddingDoesNotChangeASample) {
  Rng rng(5);
  for (ScanMode mode : {ScanMode::sequential, ScanMode::parallel}) {
    Model model(small_config(CellType::cmru, Pooling::last), 8);
    model.execution().scan = mode;
    SequenceBatch both = random_batch({4, 9}, 2, rng);
    SequenceBatch alone(1, 4, 2);
    alone.data() = both.data().topRows(4);
    const Mat yb = model.forward(both);
    const Mat ya = model.forward(alone);
    EXPECT_LT((ya.row(0) - yb.row(0)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(ModelTest, ScanModesAgree) {
  Rng rng(6);
  for (CellType cell : {CellType::cmru, CellType::alpha_cmru, CellType::lru, CellType::mingru}) {
    Model model(small_config(cell, Pooling::mean), 9);
    const SequenceBatch x = random_batch({40, 17, 33}, 2, rng);
    const Mat yp = model.forward(x);
    model.execution().scan = ScanMode::sequential;
    const Mat ys = model.forward(x);
    EXPECT_LT((yp - ys).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(ModelTest, PoolingNoneZeroesPadding) {
  Rng rng(7);
  Model model(small_config(CellType::mingru, Pooling::none), 1);
  const SequenceBatch x = random_batch({2, 5}, 2, rng);
  const Mat y = model.forward(x);
  ASSERT_EQ(y.rows(), x.rows());
  for (int t = 2; t < 5; ++t) EXPECT_TRUE(y.row(x.row(0, t)).isZero(0.0));
  EXPECT_FALSE(y.row(x.row(0, 1)).isZero(0.0));
}

TEST(ModelTest, MeanPoolingOfConstantSequenceIsLengthInvariantForIdentityCell) {
  // With a zero cell projection and zero MLPs every timestep carries the
  // encoder output, so mean and last pooling coincide.
  Rng rng(8);
  Model model(small_config(CellType::cmru, Pooling::mean, 1), 2);
  for (auto& p : model.params().tensors())
    if (p.name.find("cell_proj") != std::string::npos || p.name.find("mlp.down") != std::string::npos) p.values.setZero();
  SequenceBatch x(1, 5, 2);
  for (int t = 0; t < 5; ++t) {
    x.at(0, t, 0) = 0.3;
    x.at(0, t, 1) = -0.2;
  }
  const Mat y_mean = model.forward(x);
  Model last(small_config(CellType::cmru, Pooling::last, 1), 2);
  for (auto& p : last.params().tensors())
    if (p.name.find("cell_proj") != std::string::npos || p.name.find("mlp.down") != std::string::npos) p.values.setZero();
  const Mat y_last = last.forward(x);
  EXPECT_LT((y_mean - y_last).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ModelTest, SeedDeterminesParameters) {
  Model a(small_config(CellType::cmru, Pooling::last), 42), b(small_config(CellType::cmru, Pooling::last), 42),
      c(small_config(CellType::cmru, Pooling::last), 43);
  EXPECT_EQ(a.params().snapshot(), b.params().snapshot());
  EXPECT_NE(a.params().snapshot(), c.params().snapshot());
}

TEST(ModelTest, RejectsWrongFeatureCount) {
  Model model(small_config(CellType::cmru, Pooling::last), 1);
  EXPECT_THROW(model.forward(SequenceBatch(1, 3, 5)), std::invalid_argument);
}

TEST(ModelTest, SetEpsilonReachesEveryBlock) {
  Model model(small_config(CellType::cmru, Pooling::last, 3), 1);
  model.set_epsilon(-0.25);
  for (auto& b : model.blocks()) EXPECT_EQ(std::get<CmruCell>(b.cell()).epsilon(), -0.25);
  Model lru(small_config(CellType::lru, Pooling::last), 1);
  EXPECT_THROW(lru.set_epsilon(0.0), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

TEST(CheckpointTest, RoundTripIsExact) {
  const auto path = (std::filesystem::temp_directory_path() / "cmru_ckpt_test.bin").string();
  Rng rng(9);
  Model model(small_config(CellType::alpha_cmru, Pooling::last), 77);
  for (auto& p : model.params().tensors()) p.values = oracle::random_mat(p.values.rows(), p.values.cols(), rng);
  save_checkpoint(path, model, {{"step", 128}});
  const LoadedCheckpoint back = load_checkpoint(path);
  EXPECT_EQ(back.meta.at("step"), 128);
  EXPECT_EQ(nlohmann::json(back.model.config()), nlohmann::json(model.config()));
  EXPECT_EQ(back.model.params().snapshot(), model.params().snapshot());
  const SequenceBatch x = random_batch({3, 2}, 2, rng);
  EXPECT_EQ(back.model.forward(x), model.forward(x));
  std::filesystem::remove(path);
}

TEST(CheckpointTest, RejectsCorruptFiles) {
  const auto path = (std::filesystem::temp_directory_path() / "cmru_ckpt_bad.bin").string();
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOTACKPT";
  }
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
  Model model(small_config(CellType::cmru, Pooling::last), 1);
  save_checkpoint(path, model);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 8);
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
}
