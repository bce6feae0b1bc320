// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The cmru Authors.

#include "cmru/numerics.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <set>
#include <thread>

using namespace cmru;

TEST(FiniteDifference, Square) {
  ParamTensor p("p", 1, 1);
  p.values(0, 0) = 3.0;
  Mat g = finite_difference_grad([&] { return p.values(0, 0) * p.values(0, 0); }, p, 1e-5);
  EXPECT_NEAR(g(0, 0), 6.0, 1e-6);
  EXPECT_EQ(p.values(0, 0), 3.0);
}

TEST(FiniteDifference, SymmetricKink) {
  ParamTensor p("p", 1, 1);
  Mat g = finite_difference_grad([&] { return std::abs(p.values(0, 0)); }, p, 1e-5);
  EXPECT_EQ(g(0, 0), 0.0);
}

TEST(FiniteDifference, ReportsDivergingCoordinate) {
  ParamTensor p("w", 1, 3);
  p.values << 1.0, 2.0, 3.0;
  try {
    finite_difference_grad([&] { return p.values(0, 0) * (p.values(0, 2) > 3.0 ? NAN : 1.0); }, p);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_EQ(e.coordinate, 2);
  }
}

TEST(FiniteDifference, RejectsNonPositiveStep) {
  ParamTensor p("p", 1, 1);
  EXPECT_THROW(finite_difference_grad([] { return 0.0; }, p, 0.0), std::invalid_argument);
}

TEST(ZeroGrad, ClearsAndIsIdempotent) {
  ParamStore store;
  auto& a = store.add_matrix("a", 2, 3);
  auto& b = store.add_vector("b", 4);
  a.grad.setConstant(2.0);
  b.grad.setConstant(-1.0);
  zero_grad(store);
  EXPECT_TRUE(a.grad.isZero(0.0));
  EXPECT_TRUE(b.grad.isZero(0.0));
  zero_grad(store);
  EXPECT_TRUE(a.grad.isZero(0.0));
  std::vector<ParamTensor*> none;
  zero_grad(none);
}

TEST(ParamStore, ShapesAndNames) {
  ParamStore store;
  auto& a = store.add_matrix("a", 2, 3);
  EXPECT_EQ(a.grad.rows(), a.values.rows());
  EXPECT_EQ(a.grad.cols(), a.values.cols());
  EXPECT_THROW(store.add_vector("a", 2), std::invalid_argument);
  EXPECT_EQ(store.find("a"), &a);
  EXPECT_EQ(store.find("zz"), nullptr);
  // Addresses survive growth.
  for (int i = 0; i < 100; ++i) store.add_vector("v" + std::to_string(i), 1);
  EXPECT_EQ(store.find("a"), &a);
}

TEST(Glorot, BoundsAndDeterminism) {
  Rng r1(7), r2(7);
  auto p = glorot_init(1, 1, r1);
  EXPECT_LE(std::abs(p.values(0, 0)), std::sqrt(3.0));
  auto a = glorot_init(5, 9, r1);
  auto b = glorot_init(1, 1, r2);
  auto c = glorot_init(5, 9, r2);
  EXPECT_EQ(p.values, b.values);
  EXPECT_EQ(a.values, c.values);
  EXPECT_THROW(glorot_init(0, 3, r1), std::invalid_argument);
}

TEST(Glorot, EmpiricalVariance) {
  Rng rng(11);
  Mat m(64, 64);
  double sum = 0.0, sq = 0.0;
  const int reps = 245;  // ~10^6 draws
  for (int k = 0; k < reps; ++k) {
    glorot_fill(m, rng);
    sum += m.sum();
    sq += m.squaredNorm();
  }
  const double n = static_cast<double>(reps) * m.size();
  const double var = sq / n - (sum / n) * (sum / n);
  EXPECT_NEAR(var / (2.0 / 128.0), 1.0, 0.05);
}

TEST(Rng, StreamsAreReproducibleAndDistinct) {
  Rng a(42, 3), b(42, 3), c(42, 4);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 1000; ++i) {
    const auto va = a.next_u64();
    EXPECT_EQ(va, b.next_u64());
    seen.insert(va);
    seen.insert(c.next_u64());
  }
  EXPECT_EQ(seen.size(), 2000u);
}

TEST(Rng, ThreadIndependentDraws) {
  Rng base(99);
  std::vector<double> serial(8), threaded(8);
  for (int i = 0; i < 8; ++i) {
    Rng r = base.split(static_cast<std::uint64_t>(i));
    serial[i] = r.uniform();
  }
  std::vector<std::thread> pool;
  for (int i = 0; i < 8; ++i)
    pool.emplace_back([&, i] {
      Rng r = base.split(static_cast<std::uint64_t>(i));
      threaded[i] = r.uniform();
    });
  for (auto& t : pool) t.join();
  EXPECT_EQ(serial, threaded);
}

TEST(Rng, BelowIsInRangeAndCoversValues) {
  Rng rng(5);
  std::vector<int> hits(7, 0);
  for (int i = 0; i < 7000; ++i) hits[rng.below(7)]++;
  for (int h : hits) EXPECT_GT(h, 800);
  EXPECT_THROW(rng.below(0), std::invalid_argument);
}

TEST(SequenceBatch, Invariants) {
  EXPECT_THROW(SequenceBatch(0, 3, 1), std::invalid_argument);
  SequenceBatch sb(2, 4, 3);
  EXPECT_EQ(sb.rows(), 8);
  EXPECT_THROW(sb.set_length(0, 0), std::invalid_argument);
  EXPECT_THROW(sb.set_length(0, 5), std::invalid_argument);
  sb.set_length(1, 2);
  EXPECT_TRUE(sb.valid(1, 1));
  EXPECT_FALSE(sb.valid(1, 2));
  sb.at(1, 3, 0) = 5.0;
  sb.zero_padding();
  EXPECT_EQ(sb.at(1, 3, 0), 0.0);
  sb.at(0, 0, 0) = NAN;
  EXPECT_THROW(sb.validate(), std::invalid_argument);
}
