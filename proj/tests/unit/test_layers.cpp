// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The cmru Authors.

#include "cmru/backbone.hpp"
#include "cmru/layers.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <numbers>

using namespace cmru;

namespace {

// Parameter-coordinate FD of sum(w .* f()).
void expect_param_grads(ParamStore& store, const std::function<Mat()>& f, const std::function<void()>& backward,
                        const Mat& w, double tol = 1e-6) {
  zero_grad(store);
  backward();
  auto loss = [&] { return (f().array() * w.array()).sum(); };
  for (auto& p : store.tensors()) {
    const Mat fd = finite_difference_grad(loss, p);
    for (Eigen::Index i = 0; i < p.size(); ++i)
      EXPECT_LT(relative_error(p.grad.data()[i], fd.data()[i], 1e-6), tol) << p.name << "[" << i << "]";
  }
}

}  // namespace

TEST(LinearTest, ForwardBackwardMatchFiniteDifferences) {
  Rng rng(1);
  ParamStore store;
  Linear lin(store, "l", 3, 4, rng);
  lin.bias()->values = oracle::random_mat(1, 4, rng);
  Mat x = oracle::random_mat(5, 3, rng);
  const Mat w = oracle::random_mat(5, 4, rng);
  Mat dx;
  expect_param_grads(store, [&] { return lin.forward(x); }, [&] { dx = lin.backward(x, w); }, w);
  auto loss = [&] { return (lin.forward(x).array() * w.array()).sum(); };
  for (Eigen::Index i = 0; i < x.size(); ++i)
    EXPECT_LT(relative_error(dx.data()[i], finite_difference_coord(loss, x.data()[i]), 1e-6), 1e-6);
}

TEST(LayerNormTest, NormalizedRowsHaveZeroMeanUnitVariance) {
  Rng rng(2);
  const Mat x = oracle::random_mat(7, 9, rng, -3.0, 5.0);
  const Mat y = LayerNorm::normalize(x, 0.0);
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    EXPECT_NEAR(y.row(i).mean(), 0.0, 1e-12);
    EXPECT_NEAR(y.row(i).array().square().mean(), 1.0, 1e-12);
  }
}

TEST(LayerNormTest, GradientsMatchFiniteDifferences) {
  Rng rng(3);
  ParamStore store;
  LayerNorm ln(store, "n", 6);
  ln.scale().values = oracle::random_mat(1, 6, rng, 0.5, 1.5);
  ln.shift().values = oracle::random_mat(1, 6, rng);
  Mat x = oracle::random_mat(4, 6, rng);
  const Mat w = oracle::random_mat(4, 6, rng);
  LayerNorm::Tape tape;
  ln.forward(x, &tape);
  Mat dx;
  expect_param_grads(store, [&] { return ln.forward(x); }, [&] { dx = ln.backward(tape, w); }, w);
  auto loss = [&] { return (ln.forward(x).array() * w.array()).sum(); };
  for (Eigen::Index i = 0; i < x.size(); ++i)
    EXPECT_LT(relative_error(dx.data()[i], finite_difference_coord(loss, x.data()[i]), 1e-6), 1e-6);
}

TEST(LayerNormTest, ScaleStartsAtOne) {
  ParamStore store;
  LayerNorm ln(store, "n", 5);
  EXPECT_TRUE(ln.scale().values.isOnes(0.0));
  EXPECT_TRUE(ln.shift().values.isZero(0.0));
}

TEST(GluMlpTest, ZeroWeightsGiveZeroOutput) {
  Rng rng(4);
  ParamStore store;
  GluMlp mlp(store, "m", 3, 5, rng);
  for (auto& p : store.tensors()) p.values.setZero();
  EXPECT_TRUE(mlp.forward(oracle::random_mat(4, 3, rng)).isZero(0.0));
}

TEST(GluMlpTest, HalvesPreActivationIntoValueAndGate) {
  Rng rng(5);
  ParamStore store;
  GluMlp mlp(store, "m", 2, 3, rng);
  const Mat x = oracle::random_mat(3, 2, rng);
  const Mat pre = mlp.up().forward(x);
  const Mat hidden = (pre.leftCols(3).array() * sigmoid(Mat(pre.rightCols(3))).array()).matrix();
  EXPECT_LT((mlp.forward(x) - mlp.down().forward(hidden)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(GluMlpTest, RowsArePointwise) {
  Rng rng(6);
  ParamStore store;
  GluMlp mlp(store, "m", 3, 4, rng);
  const Mat x = oracle::random_mat(6, 3, rng);
  const std::vector<int> perm{3, 0, 5, 1, 4, 2};
  Mat xp(6, 3);
  for (int i = 0; i < 6; ++i) xp.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
  const Mat y = mlp.forward(x), yp = mlp.forward(xp);
  for (int i = 0; i < 6; ++i) EXPECT_EQ(yp.row(i), y.row(perm[static_cast<std::size_t>(i)]));
}

TEST(GluMlpTest, DropoutZeroIsDeterministicAndGradientsMatch) {
  Rng rng(7);
  ParamStore store;
  GluMlp mlp(store, "m", 3, 4, rng, 0.0);
  for (auto& p : store.tensors())
    if (p.name.ends_with(".bias")) p.values = oracle::random_mat(1, p.values.cols(), rng);
  const Mat x = oracle::random_mat(5, 3, rng);
  Rng d1(1), d2(2);
  EXPECT_EQ(mlp.forward(x, nullptr, &d1), mlp.forward(x, nullptr, &d2));
  const Mat w = oracle::random_mat(5, 3, rng);
  GluMlp::Tape tape;
  mlp.forward(x, &tape);
  expect_param_grads(store, [&] { return mlp.forward(x); }, [&] { mlp.backward(tape, w); }, w);
}

TEST(GluMlpTest, DropoutMaskIsReusedInBackward) {
  Rng rng(8);
  ParamStore store;
  GluMlp mlp(store, "m", 3, 4, rng, 0.5);
  const Mat x = oracle::random_mat(5, 3, rng);
  const Mat w = oracle::random_mat(5, 3, rng);
  Rng drop(9);
  GluMlp::Tape tape;
  mlp.forward(x, &tape, &drop);
  ASSERT_EQ(tape.mask.size(), 5 * 4);
  // Replaying the same dropout stream gives a fixed function to difference.
  expect_param_grads(
      store,
      [&] {
        Rng replay(9);
        return mlp.forward(x, nullptr, &replay);
      },
      [&] { mlp.backward(tape, w); }, w);
}

TEST(PositionalEncodingTest, TimeZeroIsSinZeroCosZero) {
  const Mat pe = sinusoidal_encoding(3, 8);
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(pe(0, 2 * i), 0.0);
    EXPECT_EQ(pe(0, 2 * i + 1), 1.0);
  }
  EXPECT_EQ(sinusoidal_encoding(3, 8), pe);
  EXPECT_DOUBLE_EQ(pe(2, 0), std::sin(2.0));
  EXPECT_DOUBLE_EQ(pe(1, 2), std::sin(std::pow(10000.0, -0.25)));
  EXPECT_THROW(sinusoidal_encoding(3, 5), std::invalid_argument);
}

TEST(PositionalEncodingTest, ZeroPositionWeightsRemovePositionDependence) {
  Rng rng(10);
  ParamStore store;
  PositionalProjection pp(store, "p", 4, 6, rng);
  pp.position_weight().values.setZero();
  const Mat pos = pp.position_term(20);
  for (int t = 1; t < 20; ++t) EXPECT_EQ(pos.row(t), pos.row(0));
}

TEST(PositionalEncodingTest, SplitProjectionEqualsConcatenatedLinear) {
  Rng rng(11);
  ParamStore store;
  PositionalProjection pp(store, "p", 3, 4, rng);
  store.find("p.bias")->values = oracle::random_mat(1, 3, rng);
  const Mat x = oracle::random_mat(5, 3, rng);
  const Mat pe = sinusoidal_encoding(5, 4);
  Mat cat(5, 7);
  cat << x, pe;
  Mat W(3, 7);
  W << pp.input_weight().values, pp.position_weight().values;
  const Mat expect = (cat * W.transpose()).rowwise() + store.find("p.bias")->values.row(0);
  const Mat got = pp.project_input(x) + pp.position_term(5);
  EXPECT_LT((got - expect).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(CompactRowsTest, MergesIdenticalRowsAndSkipsPadding) {
  Mat x(5, 2);
  x << 1, 2, 0, 0, 1, 2, -0.0, 0, 9, 9;
  const RowIndex ri = compact_rows(x, {1, 1, 1, 1, 0});
  EXPECT_EQ(ri.unique.rows(), 2);
  EXPECT_EQ(ri.of_row, (std::vector<int>{0, 1, 0, 1, -1}));
}

// ---------------------------------------------------------------------------
// Residual blocks
// ---------------------------------------------------------------------------

namespace {

struct BlockFixture {
  ModelConfig cfg;
  ParamStore store;
  ResidualBlock block;
  Rng rng{12};

  explicit BlockFixture(CellType cell = CellType::cmru) {
    cfg.cell = cell;
    cfg.model_dim = 5;
    cfg.state_dim = 2;
    cfg.pe_dim = 4;
    cfg.mlp_ratio = 2;
    block = ResidualBlock(store, "b", cfg, rng);
  }
  ParamTensor& p(const std::string& name) { return *store.find("b." + name); }

  Mat run(const SequenceBatch& x, const Mat& in) {
    Rows rows{in, {}};
    for (int r = 0; r < x.rows(); ++r) rows.index.push_back(r);
    std::vector<Eigen::Index> all;
    for (Eigen::Index r = 0; r < x.rows(); ++r) all.push_back(r);
    return block.forward(x, rows, all, ExecutionOptions{}, nullptr, nullptr).data;
  }
};

}  // namespace

TEST(ResidualBlockTest, ZeroGateGivesHalfTheNormalizedProjection) {
  BlockFixture f;
  f.p("gate.weight").values.setZero();
  f.p("gate.bias").values.setZero();
  f.p("gain_in").values.setZero();
  f.p("mlp.down.weight").values.setZero();
  f.p("mlp.down.bias").values.setZero();
  SequenceBatch x(1, 6, 5);
  const Mat in = oracle::random_mat(6, 5, f.rng);
  const Mat y = f.run(x, in);

  // Recompute Norm(Linear(Cell(x_tilde))) by hand.
  const Mat normed = LayerNorm::normalize(in, 1e-5);
  Mat proj = normed * f.p("position.input_weight").values.transpose() +
             sinusoidal_encoding(6, 4) * f.p("position.position_weight").values.transpose();
  proj.rowwise() += f.p("position.bias").values.row(0);
  const auto& cell = std::get<CmruCell>(f.block.cell());
  const Mat h = cell.forward(proj, 1, 6);
  const Mat lin = (h * f.p("cell_proj.weight").values.transpose()).rowwise() + f.p("cell_proj.bias").values.row(0);
  const Mat expect = 0.5 * LayerNorm::normalize(lin, 1e-5);
  EXPECT_LT((y - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ResidualBlockTest, AllRetainCmruContributesNothing) {
  BlockFixture f;
  f.cfg.epsilon = 1.0;
  // |candidate| < |threshold| everywhere keeps z = 0 and h = 0.
  f.p("cell.candidate.weight").values.setZero();
  f.p("cell.threshold.bias").values.setConstant(1.0);
  f.p("cell.threshold.weight").values.setZero();
  f.p("mlp.down.weight").values.setZero();
  SequenceBatch x(1, 4, 5);
  const Mat in = oracle::random_mat(4, 5, f.rng);
  EXPECT_LT((f.run(x, in) - in).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(ResidualBlockTest, ZeroSublayersGiveIdentity) {
  BlockFixture f(CellType::lru);
  f.p("cell_proj.weight").values.setZero();
  f.p("mlp.down.weight").values.setZero();
  SequenceBatch x(2, 3, 5);
  const Mat in = oracle::random_mat(6, 5, f.rng);
  EXPECT_EQ(f.run(x, in), in);
  EXPECT_TRUE(f.p("gain_in").values.isOnes(0.0));
  EXPECT_TRUE(f.p("gain_mid").values.isOnes(0.0));
}

TEST(ResidualBlockTest, ZeroGainGivesPureSublayer) {
  BlockFixture f(CellType::mingru);
  f.p("gain_in").values.setZero();
  f.p("gain_mid").values.setZero();
  f.p("mlp.down.weight").values.setZero();
  f.p("mlp.down.bias").values.setZero();
  f.p("cell_proj.weight").values.setZero();
  f.p("cell_proj.bias").values.setZero();
  SequenceBatch x(1, 3, 5);
  EXPECT_TRUE(f.run(x, oracle::random_mat(3, 5, f.rng)).isZero(0.0));
}
