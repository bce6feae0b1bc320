// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The cmru Authors.
//
// Pointwise building blocks with explicit forward / vector-Jacobian backward.
// All activations are (rows x features) with one row per (sample, timestep).

#pragma once

#include "cmru/numerics.hpp"

#include <cmath>
#include <cstring>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

namespace cmru {

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

inline Mat sigmoid(const Mat& x) {
  return (1.0 + (-x.array()).exp()).inverse().matrix();
}

// y = x W^T + b, W is [out x in].
class Linear {
 public:
  // Inner dimensions up to this size skip the blocked GEMM path.
  static constexpr int kThinInner = 8;

  Linear() = default;
  Linear(ParamStore& store, const std::string& name, int in, int out, Rng& rng, bool bias = true)
      : in_(in), out_(out) {
    weight_ = &store.add_matrix(name + ".weight", out, in);
    glorot_fill(weight_->values, rng);
    if (bias) bias_ = &store.add_vector(name + ".bias", out);
  }

  int in_dim() const { return in_; }
  int out_dim() const { return out_; }
  ParamTensor& weight() { return *weight_; }
  const ParamTensor& weight() const { return *weight_; }
  ParamTensor* bias() { return bias_; }
  const ParamTensor* bias() const { return bias_; }

  Mat forward(const Mat& x) const {
    Mat y(x.rows(), out_);
    if (in_ <= kThinInner)
      y.noalias() = x.lazyProduct(weight_->values.transpose());
    else
      y.noalias() = x * weight_->values.transpose();
    if (bias_) y.rowwise() += bias_->values.row(0);
    return y;
  }

  // Accumulates parameter gradients and returns dL/dx.
  Mat backward(const Mat& x, const Mat& dy) {
    accumulate(x, dy);
    Mat dx(dy.rows(), in_);
    if (out_ <= kThinInner)
      dx.noalias() = dy.lazyProduct(weight_->values);
    else
      dx.noalias() = dy * weight_->values;
    return dx;
  }

  void accumulate(const Mat& x, const Mat& dy) {
    weight_->grad.noalias() += dy.transpose() * x;
    if (bias_) bias_->grad.row(0) += dy.colwise().sum();
  }

 private:
  int in_ = 0;
  int out_ = 0;
  ParamTensor* weight_ = nullptr;
  ParamTensor* bias_ = nullptr;
};

// Per-row layer normalization with learnable scale and shift.
class LayerNorm {
 public:
  struct Tape {
    Mat xhat;
    Vec rstd;
  };

  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& name, int dim, double eps = 1e-5) : dim_(dim), eps_(eps) {
    scale_ = &store.add_vector(name + ".scale", dim);
    scale_->values.setOnes();
    shift_ = &store.add_vector(name + ".shift", dim);
  }

  int dim() const { return dim_; }
  ParamTensor& scale() { return *scale_; }
  ParamTensor& shift() { return *shift_; }

  // Normalization only (zero mean, unit variance per row), no affine.
  static Mat normalize(const Mat& x, double eps, Vec* rstd_out = nullptr) {
    Mat xhat(x.rows(), x.cols());
    if (rstd_out) rstd_out->resize(x.rows());
    const double inv_n = 1.0 / static_cast<double>(x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double mean = x.row(i).sum() * inv_n;
      const double var = (x.row(i).array() - mean).square().sum() * inv_n;
      const double rstd = 1.0 / std::sqrt(var + eps);
      xhat.row(i) = (x.row(i).array() - mean) * rstd;
      if (rstd_out) (*rstd_out)(i) = rstd;
    }
    return xhat;
  }

  Mat forward(const Mat& x, Tape* tape = nullptr) const {
    Vec rstd;
    Mat xhat = normalize(x, eps_, &rstd);
    Mat y = (xhat.array().rowwise() * scale_->values.row(0).array()).matrix();
    y.rowwise() += shift_->values.row(0);
    if (tape) {
      tape->xhat = std::move(xhat);
      tape->rstd = std::move(rstd);
    }
    return y;
  }

  Mat backward(const Tape& tape, const Mat& dy) {
    scale_->grad.row(0) += (dy.array() * tape.xhat.array()).colwise().sum().matrix();
    shift_->grad.row(0) += dy.colwise().sum();
    Mat dxhat = (dy.array().rowwise() * scale_->values.row(0).array()).matrix();
    Mat dx(dy.rows(), dy.cols());
    const double inv_n = 1.0 / static_cast<double>(dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
      const double mean_d = dxhat.row(i).sum() * inv_n;
      const double mean_dx = dxhat.row(i).dot(tape.xhat.row(i)) * inv_n;
      dx.row(i) = (dxhat.row(i).array() - mean_d - tape.xhat.row(i).array() * mean_dx) * tape.rstd(i);
    }
    return dx;
  }

 private:
  int dim_ = 0;
  double eps_ = 1e-5;
  ParamTensor* scale_ = nullptr;
  ParamTensor* shift_ = nullptr;
};

// MLP(x) = Linear(Dropout(GLU(Linear(x)))), GLU(v, g) = v * sigmoid(g).
class GluMlp {
 public:
  struct Tape {
    Mat x;
    Mat value;
    Mat gate_sig;
    Mat hidden;  // after GLU and dropout
    Mat mask;    // empty when dropout is off
  };

  GluMlp() = default;
  GluMlp(ParamStore& store, const std::string& name, int dim, int hidden, Rng& rng, double dropout = 0.0)
      : dim_(dim), hidden_(hidden), dropout_(dropout),
        up_(store, name + ".up", dim, 2 * hidden, rng), down_(store, name + ".down", hidden, dim, rng) {}

  int hidden_dim() const { return hidden_; }
  Linear& up() { return up_; }
  Linear& down() { return down_; }

  // `dropout_rng` null means inference (no dropout).
  Mat forward(const Mat& x, Tape* tape = nullptr, Rng* dropout_rng = nullptr) const {
    Mat pre = up_.forward(x);
    Mat value = pre.leftCols(hidden_);
    Mat gate_sig = sigmoid(pre.rightCols(hidden_));
    Mat hidden = (value.array() * gate_sig.array()).matrix();
    Mat mask;
    if (dropout_rng && dropout_ > 0.0) {
      mask.resize(hidden.rows(), hidden.cols());
      const double keep = 1.0 - dropout_;
      for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = dropout_rng->uniform() < keep ? 1.0 / keep : 0.0;
      hidden.array() *= mask.array();
    }
    Mat y = down_.forward(hidden);
    if (tape) {
      tape->x = x;
      tape->value = std::move(value);
      tape->gate_sig = std::move(gate_sig);
      tape->hidden = std::move(hidden);
      tape->mask = std::move(mask);
    }
    return y;
  }

  Mat backward(const Tape& tape, const Mat& dy) {
    Mat dhidden = down_.backward(tape.hidden, dy);
    if (tape.mask.size() > 0) dhidden.array() *= tape.mask.array();
    Mat dpre(dy.rows(), 2 * hidden_);
    dpre.leftCols(hidden_) = (dhidden.array() * tape.gate_sig.array()).matrix();
    dpre.rightCols(hidden_) =
        (dhidden.array() * tape.value.array() * tape.gate_sig.array() * (1.0 - tape.gate_sig.array())).matrix();
    return up_.backward(tape.x, dpre);
  }

 private:
  int dim_ = 0;
  int hidden_ = 0;
  double dropout_ = 0.0;
  Linear up_;
  Linear down_;
};

// Interleaved sinusoidal encoding: channel 2i = sin(t w_i), 2i+1 = cos(t w_i),
// w_i = 10000^(-2i/width).
inline Mat sinusoidal_encoding(int time, int width, int t0 = 0) {
  if (width <= 0 || width % 2 != 0) throw std::invalid_argument("positional encoding width must be even and positive");
  Mat pe(time, width);
  for (int t = 0; t < time; ++t) {
    const double pos = static_cast<double>(t0 + t);
    for (int i = 0; i < width / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * i / static_cast<double>(width));
      pe(t, 2 * i) = std::sin(pos * freq);
      pe(t, 2 * i + 1) = std::cos(pos * freq);
    }
  }
  return pe;
}

// x_tilde_t = W [x_t; PE(t)] + b, with W split into input and position columns
// so the position term is computed once per timestep, not once per row.
class PositionalProjection {
 public:
  PositionalProjection() = default;
  PositionalProjection(ParamStore& store, const std::string& name, int dim, int pe_width, Rng& rng)
      : dim_(dim), pe_width_(pe_width) {
    if (pe_width <= 0 || pe_width % 2 != 0) throw std::invalid_argument("pe_dim must be even and positive");
    // One Glorot draw over the concatenated fan-in keeps the init identical to
    // a single Linear(dim + pe_width -> dim).
    Mat w(dim, dim + pe_width);
    glorot_fill(w, rng);
    input_ = &store.add_matrix(name + ".input_weight", dim, dim);
    input_->values = w.leftCols(dim);
    position_ = &store.add_matrix(name + ".position_weight", dim, pe_width);
    position_->values = w.rightCols(pe_width);
    bias_ = &store.add_vector(name + ".bias", dim);
  }

  int pe_width() const { return pe_width_; }
  ParamTensor& input_weight() { return *input_; }
  ParamTensor& position_weight() { return *position_; }

  Mat project_input(const Mat& x) const {
    Mat y(x.rows(), dim_);
    y.noalias() = x * input_->values.transpose();
    return y;
  }

  // [time x dim]: W_pos PE(t) + b.
  Mat position_term(int time) const {
    Mat pe = sinusoidal_encoding(time, pe_width_);
    Mat y(time, dim_);
    y.noalias() = pe * position_->values.transpose();
    y.rowwise() += bias_->values.row(0);
    return y;
  }

  Mat backward_input(const Mat& x, const Mat& dy) {
    input_->grad.noalias() += dy.transpose() * x;
    Mat dx(dy.rows(), dim_);
    dx.noalias() = dy * input_->values;
    return dx;
  }

  // dy_time is the gradient summed over the batch for each timestep.
  void backward_position(const Mat& dy_time) {
    Mat pe = sinusoidal_encoding(static_cast<int>(dy_time.rows()), pe_width_);
    position_->grad.noalias() += dy_time.transpose() * pe;
    bias_->grad.row(0) += dy_time.colwise().sum();
  }

 private:
  int dim_ = 0;
  int pe_width_ = 0;
  ParamTensor* input_ = nullptr;
  ParamTensor* position_ = nullptr;
  ParamTensor* bias_ = nullptr;
};

// Maps every valid row to the index of its first identical row, so pointwise
// functions of the raw input are evaluated once per distinct row.
struct RowIndex {
  Mat unique;                // [n_unique x features]
  std::vector<int> of_row;   // row -> unique id, -1 for padding
};

inline RowIndex compact_rows(const Mat& x, const std::vector<char>& valid) {
  RowIndex out;
  out.of_row.assign(static_cast<std::size_t>(x.rows()), -1);
  const std::size_t bytes = static_cast<std::size_t>(x.cols()) * sizeof(double);
  std::unordered_map<std::string, int> seen;
  std::vector<Eigen::Index> firsts;
  std::string key(bytes, '\0');
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    if (!valid[static_cast<std::size_t>(r)]) continue;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const double v = x(r, c) == 0.0 ? 0.0 : x(r, c);  // fold -0.0 into +0.0
      std::memcpy(key.data() + c * sizeof(double), &v, sizeof(double));
    }
    auto [it, inserted] = seen.try_emplace(key, static_cast<int>(firsts.size()));
    if (inserted) firsts.push_back(r);
    out.of_row[static_cast<std::size_t>(r)] = it->second;
  }
  out.unique.resize(static_cast<Eigen::Index>(firsts.size()), x.cols());
  for (std::size_t i = 0; i < firsts.size(); ++i) out.unique.row(static_cast<Eigen::Index>(i)) = x.row(firsts[i]);
  return out;
}

}  // namespace cmru
