// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The cmru Authors.
//
// Dense-array substrate shared by every module: row-major real64 matrices,
// named parameter tensors with gradient accumulators, a counter-based RNG and
// the finite-difference gradient oracle.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmru {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

// ---------------------------------------------------------------------------
// Counter-based random numbers.
//
// A draw is a pure function of (seed, stream, counter), so splitting a stream
// and consuming it from any thread yields the same values.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream), key_(splitmix64(seed ^ splitmix64(stream + 0x632be59bd9b4e019ULL))) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }

  // Independent child stream; does not advance this generator.
  Rng split(std::uint64_t child) const {
    return Rng(seed_, splitmix64(stream_ * 0x9e3779b97f4a7c15ULL + child + 1));
  }

  std::uint64_t next_u64() { return splitmix64(key_ + splitmix64(counter_++)); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: empty range");
    // Rejection sampling removes modulo bias.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % n;
  }

  bool bernoulli(double p = 0.5) { return uniform() < p; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct ParamTensor {
  std::string name;
  int rank = 2;  // 1 => stored as a 1 x n row
  Mat values;
  Mat grad;

  ParamTensor() = default;
  ParamTensor(std::string n, Eigen::Index rows, Eigen::Index cols, int r = 2)
      : name(std::move(n)), rank(r), values(Mat::Zero(rows, cols)), grad(Mat::Zero(rows, cols)) {}

  Eigen::Index size() const { return values.size(); }
  double* data() { return values.data(); }
  const double* data() const { return values.data(); }

  // Rank-1 views.
  auto vec() { return Eigen::Map<Vec>(values.data(), values.size()); }
  auto vec() const { return Eigen::Map<const Vec>(values.data(), values.size()); }
  auto grad_vec() { return Eigen::Map<Vec>(grad.data(), grad.size()); }
};

// Owns every parameter of a model; addresses are stable for the store's lifetime.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  // Moving a deque keeps element addresses, so pointers into it stay valid.
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  ParamTensor& add_matrix(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    check_unique(name);
    return tensors_.emplace_back(name, rows, cols, 2);
  }
  ParamTensor& add_vector(const std::string& name, Eigen::Index n) {
    check_unique(name);
    return tensors_.emplace_back(name, 1, n, 1);
  }

  std::size_t size() const { return tensors_.size(); }
  std::deque<ParamTensor>& tensors() { return tensors_; }
  const std::deque<ParamTensor>& tensors() const { return tensors_; }

  ParamTensor* find(const std::string& name) {
    for (auto& t : tensors_)
      if (t.name == name) return &t;
    return nullptr;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += static_cast<std::size_t>(t.size());
    return n;
  }

  std::vector<Mat> snapshot() const {
    std::vector<Mat> out;
    out.reserve(tensors_.size());
    for (const auto& t : tensors_) out.push_back(t.values);
    return out;
  }

  void restore(const std::vector<Mat>& snap) {
    if (snap.size() != tensors_.size()) throw std::invalid_argument("ParamStore::restore: tensor count mismatch");
    for (std::size_t i = 0; i < snap.size(); ++i) {
      if (snap[i].rows() != tensors_[i].values.rows() || snap[i].cols() != tensors_[i].values.cols())
        throw std::invalid_argument("ParamStore::restore: shape mismatch for " + tensors_[i].name);
      tensors_[i].values = snap[i];
    }
  }

 private:
  void check_unique(const std::string& name) const {
    for (const auto& t : tensors_)
      if (t.name == name) throw std::invalid_argument("duplicate parameter name: " + name);
  }

  std::deque<ParamTensor> tensors_;
};

inline void zero_grad(std::span<ParamTensor* const> params) {
  for (auto* p : params) p->grad.setZero();
}

inline void zero_grad(ParamStore& store) {
  for (auto& t : store.tensors()) t.grad.setZero();
}

inline std::vector<ParamTensor*> param_list(ParamStore& store) {
  std::vector<ParamTensor*> out;
  for (auto& t : store.tensors()) out.push_back(&t);
  return out;
}

// Glorot/Xavier uniform: U(-sqrt(6/(rows+cols)), +sqrt(6/(rows+cols))).
inline void glorot_fill(Mat& m, Rng& rng) {
  if (m.rows() < 1 || m.cols() < 1) throw std::invalid_argument("glorot_init: zero dimension");
  const double limit = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-limit, limit);
}

inline ParamTensor glorot_init(Eigen::Index rows, Eigen::Index cols, Rng& rng, std::string name = "glorot") {
  if (rows < 1 || cols < 1) throw std::invalid_argument("glorot_init: zero dimension");
  ParamTensor p(std::move(name), rows, cols);
  glorot_fill(p.values, rng);
  return p;
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(const std::string& what, Eigen::Index coord) : std::runtime_error(what), coordinate(coord) {}
  Eigen::Index coordinate;
};

// Central-difference gradient of f with respect to every coordinate of p.
// p is perturbed in place and restored before returning.
inline Mat finite_difference_grad(const std::function<double()>& f, ParamTensor& p, double h = 1e-5) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_difference_grad: h must be positive");
  Mat g(p.values.rows(), p.values.cols());
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    double& v = p.values.data()[i];
    const double orig = v;
    v = orig + h;
    const double fp = f();
    v = orig - h;
    const double fm = f();
    v = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NonFiniteError(p.name + ": non-finite objective at coordinate " + std::to_string(i), i);
    g.data()[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Same oracle for a single coordinate, used when only a subset is checked.
inline double finite_difference_coord(const std::function<double()>& f, double& x, double h = 1e-5) {
  const double orig = x;
  x = orig + h;
  const double fp = f();
  x = orig - h;
  const double fm = f();
  x = orig;
  if (!std::isfinite(fp) || !std::isfinite(fm)) throw NonFiniteError("non-finite objective", 0);
  return (fp - fm) / (2.0 * h);
}

inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// ---------------------------------------------------------------------------
// Sequence batches
// ---------------------------------------------------------------------------

// [batch, time, feature] stored as (batch * time) x feature rows, sample-major.
// Timesteps at or beyond lengths[i] are padding and are kept at zero.
class SequenceBatch {
 public:
  SequenceBatch() = default;
  SequenceBatch(int batch, int time, int features)
      : batch_(batch), time_(time), features_(features),
        data_(Mat::Zero(static_cast<Eigen::Index>(batch) * time, features)),
        lengths_(static_cast<std::size_t>(batch), time) {
    if (batch < 1 || time < 1 || features < 1) throw std::invalid_argument("SequenceBatch: empty shape");
  }

  int batch() const { return batch_; }
  int time() const { return time_; }
  int features() const { return features_; }
  Eigen::Index rows() const { return data_.rows(); }

  Mat& data() { return data_; }
  const Mat& data() const { return data_; }
  const std::vector<int>& lengths() const { return lengths_; }

  void set_length(int i, int len) {
    if (len < 1 || len > time_) throw std::invalid_argument("SequenceBatch: length out of range");
    lengths_.at(static_cast<std::size_t>(i)) = len;
  }

  Eigen::Index row(int b, int t) const { return static_cast<Eigen::Index>(b) * time_ + t; }
  double& at(int b, int t, int f) { return data_(row(b, t), f); }
  double at(int b, int t, int f) const { return data_(row(b, t), f); }
  bool valid(int b, int t) const { return t < lengths_[static_cast<std::size_t>(b)]; }

  // Enforces the construction invariants.
  void validate() {
    for (int b = 0; b < batch_; ++b) {
      const int len = lengths_[static_cast<std::size_t>(b)];
      if (len < 1 || len > time_) throw std::invalid_argument("SequenceBatch: length out of range");
    }
    if (!data_.allFinite()) throw std::invalid_argument("SequenceBatch: non-finite entry");
  }

  void zero_padding() {
    for (int b = 0; b < batch_; ++b)
      for (int t = lengths_[static_cast<std::size_t>(b)]; t < time_; ++t) data_.row(row(b, t)).setZero();
  }

 private:
  int batch_ = 0;
  int time_ = 0;
  int features_ = 0;
  Mat data_;
  std::vector<int> lengths_;
};

}  // namespace cmru
