// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The cmru Authors.
//
// Recurrent cells expressed as producers of affine scan elements:
//
//   CMRU   h_t = z*(s*alpha + eps*h_{t-1}) + (1-z)*h_{t-1}
//          z = H(|W_x x + b_x| - |W_b x + b_b|), s = sign(W_x x + b_x)
//          BMRU is eps = 0; alpha-CMRU uses alpha_t = W_a x + b_a.
//   LRU    h_t = Lambda*h_{t-1} + gamma*(B x_t), y_t = Re(C h_t) + D x_t
//   minGRU h_t = (1-z)*h_{t-1} + z*(W_h x + b_h), z = sigmoid(W_z x + b_z)
//
// Inputs are (batch*time) x m rows, sample-major; states are (batch*time) x d.

#pragma once

#include "cmru/layers.hpp"
#include "cmru/numerics.hpp"
#include "cmru/scan.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmru {

using cplx = std::complex<double>;
using CMat = Eigen::Matrix<cplx, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// How the backward pass differentiates H and sign.
//   surrogate: dH/du ~ 1/(1 + (pi k u)^2), dsign/du ~ 2/(1 + (pi k u)^2)
//   exact:     the almost-everywhere derivative, zero
enum class GateGradient { surrogate, exact };

inline double surrogate_step_grad(double u, double sharpness) {
  const double v = std::numbers::pi * sharpness * u;
  return 1.0 / (1.0 + v * v);
}

inline double heaviside(double u) { return u >= 0.0 ? 1.0 : 0.0; }
inline double sign0(double v) { return static_cast<double>((v > 0.0) - (v < 0.0)); }

namespace detail {

inline void check_rows(const Mat& x, int batch, int time, int features, const char* who) {
  if (batch < 1 || time < 1 || x.rows() != static_cast<Eigen::Index>(batch) * time || x.cols() != features)
    throw std::invalid_argument(std::string(who) + ": input shape mismatch");
}

// Row (b, t) of the result is h_{t-1}; t = 0 takes h0 (zero if null).
template <class M>
M shift_back(const M& h, int batch, int time, const M* h0) {
  M prev(h.rows(), h.cols());
  for (int b = 0; b < batch; ++b) {
    const Eigen::Index r0 = static_cast<Eigen::Index>(b) * time;
    if (h0)
      prev.row(r0) = h0->row(b);
    else
      prev.row(r0).setZero();
    if (time > 1) prev.middleRows(r0 + 1, time - 1) = h.middleRows(r0, time - 1);
  }
  return prev;
}

template <class M>
std::span<const typename M::Scalar> cspan(const M& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}
template <class M>
std::span<typename M::Scalar> mspan(M& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// CMRU family
// ---------------------------------------------------------------------------

struct CmruConfig {
  int input_dim = 1;
  int state_dim = 1;
  double epsilon = 1.0;
  bool input_dependent_scale = false;  // alpha-CMRU
  double surrogate_sharpness = 1.0;
};

// Per-row gate quantities, all (rows x d).
struct CmruGate {
  Mat candidate;  // h_hat
  Mat threshold;  // pre-activation of beta (beta = |threshold|)
  Mat z;
  Mat s;
  Mat alpha;
};

struct AffineRows {
  Mat a;
  Mat b;
};

// a = 1 - z + eps z, b = z s alpha.
inline AffineRows cmru_affine(const CmruGate& g, double epsilon) {
  AffineRows out;
  out.a = (1.0 - g.z.array() + epsilon * g.z.array()).matrix();
  out.b = (g.z.array() * g.s.array() * g.alpha.array()).matrix();
  return out;
}

class CmruCell {
 public:
  struct Tape {
    CmruGate gate;
    Mat a;
    Mat h;
    Mat h0;  // empty means zero initial state
  };

  CmruCell() = default;
  CmruCell(ParamStore& store, const std::string& name, const CmruConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.input_dim < 1 || cfg.state_dim < 1) throw std::invalid_argument("CmruCell: dimensions must be >= 1");
    if (!(cfg.epsilon >= -1.0 && cfg.epsilon <= 1.0)) throw std::invalid_argument("CmruCell: epsilon must lie in [-1, 1]");
    candidate_ = Linear(store, name + ".candidate", cfg.input_dim, cfg.state_dim, rng);
    threshold_ = Linear(store, name + ".threshold", cfg.input_dim, cfg.state_dim, rng);
    if (cfg.input_dependent_scale)
      scale_ = Linear(store, name + ".scale", cfg.input_dim, cfg.state_dim, rng);
    else
      log_alpha_ = &store.add_vector(name + ".log_alpha", cfg.state_dim);
  }
  virtual ~CmruCell() = default;
  CmruCell(const CmruCell&) = default;
  CmruCell& operator=(const CmruCell&) = default;
  CmruCell(CmruCell&&) = default;
  CmruCell& operator=(CmruCell&&) = default;

  const CmruConfig& config() const { return cfg_; }
  int input_dim() const { return cfg_.input_dim; }
  int state_dim() const { return cfg_.state_dim; }
  int output_dim() const { return cfg_.state_dim; }
  double epsilon() const { return cfg_.epsilon; }
  void set_epsilon(double eps) {
    if (!(eps >= -1.0 && eps <= 1.0)) throw std::invalid_argument("CmruCell: epsilon must lie in [-1, 1]");
    cfg_.epsilon = eps;
  }
  bool input_dependent_scale() const { return cfg_.input_dependent_scale; }

  Linear& candidate() { return candidate_; }
  Linear& threshold() { return threshold_; }
  Linear& scale() { return scale_; }
  ParamTensor* log_alpha() { return log_alpha_; }

  // The gate pre-activations are affine in x: pre = [candidate | threshold |
  // scale] = x W^T + c, with pre_dim() columns (scale for alpha-CMRU only).
  int pre_dim() const { return (cfg_.input_dependent_scale ? 3 : 2) * cfg_.state_dim; }

  Mat input_weight() const {
    const int d = cfg_.state_dim;
    Mat w(pre_dim(), cfg_.input_dim);
    w.topRows(d) = candidate_.weight().values;
    w.middleRows(d, d) = threshold_.weight().values;
    if (cfg_.input_dependent_scale) w.bottomRows(d) = scale_.weight().values;
    return w;
  }

  RowVec input_bias() const {
    const int d = cfg_.state_dim;
    RowVec c(pre_dim());
    c.head(d) = candidate_.bias()->values.row(0);
    c.segment(d, d) = threshold_.bias()->values.row(0);
    if (cfg_.input_dependent_scale) c.tail(d) = scale_.bias()->values.row(0);
    return c;
  }

  // gw = dL/dW (pre_dim x input_dim), gc = dL/dc (1 x pre_dim).
  void accumulate_input_grads(const Mat& gw, const RowVec& gc) {
    const int d = cfg_.state_dim;
    candidate_.weight().grad += gw.topRows(d);
    threshold_.weight().grad += gw.middleRows(d, d);
    candidate_.bias()->grad.row(0) += gc.head(d);
    threshold_.bias()->grad.row(0) += gc.segment(d, d);
    if (cfg_.input_dependent_scale) {
      scale_.weight().grad += gw.bottomRows(d);
      scale_.bias()->grad.row(0) += gc.tail(d);
    }
  }

  Mat pre_activations(const Mat& x) const {
    const int d = cfg_.state_dim;
    Mat pre(x.rows(), pre_dim());
    pre.leftCols(d) = candidate_.forward(x);
    pre.middleCols(d, d) = threshold_.forward(x);
    if (cfg_.input_dependent_scale) pre.rightCols(d) = scale_.forward(x);
    return pre;
  }

  CmruGate gate(const Mat& x) const { return gate_from_pre(pre_activations(x)); }

  CmruGate gate_from_pre(const Mat& pre) const {
    const int d = cfg_.state_dim;
    CmruGate g;
    g.candidate = pre.leftCols(d);
    g.threshold = pre.middleCols(d, d);
    const Eigen::Index n = g.candidate.size();
    g.z.resize(g.candidate.rows(), g.candidate.cols());
    g.s.resize(g.candidate.rows(), g.candidate.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      const double c = g.candidate.data()[i];
      g.z.data()[i] = heaviside(std::abs(c) - std::abs(g.threshold.data()[i]));
      g.s.data()[i] = sign0(c);
    }
    if (cfg_.input_dependent_scale) {
      g.alpha = pre.rightCols(d);
    } else {
      g.alpha = log_alpha_->values.array().exp().matrix().replicate(pre.rows(), 1);
    }
    return g;
  }

  // h0 is batch x d or null.
  Mat forward(const Mat& x, int batch, int time, Tape* tape = nullptr, const Mat* h0 = nullptr,
              ScanMode mode = ScanMode::parallel, ScanOptions opt = {}) const {
    detail::check_rows(x, batch, time, cfg_.input_dim, "CmruCell");
    return forward_pre(pre_activations(x), batch, time, tape, h0, mode, opt);
  }

  Mat forward_pre(const Mat& pre, int batch, int time, Tape* tape = nullptr, const Mat* h0 = nullptr,
                  ScanMode mode = ScanMode::parallel, ScanOptions opt = {}) const {
    detail::check_rows(pre, batch, time, pre_dim(), "CmruCell");
    CmruGate g = gate_from_pre(pre);
    AffineRows ab = cmru_affine(g, cfg_.epsilon);
    Mat h(pre.rows(), cfg_.state_dim);
    scan_batch<double>(detail::cspan(ab.a), detail::cspan(ab.b), batch, time, cfg_.state_dim, h0 ? h0->data() : nullptr,
                       detail::mspan(h), mode, opt);
    if (tape) {
      tape->gate = std::move(g);
      tape->a = std::move(ab.a);
      tape->h = h;
      tape->h0 = h0 ? *h0 : Mat();
    }
    return h;
  }

  // State Jacobian dh_t/dh_{t-1} as used by backward.
  Mat state_jacobian(const Tape& tape) const {
    const double eps = backward_epsilon();
    return (1.0 - tape.gate.z.array() + eps * tape.gate.z.array()).matrix();
  }

  // dh: dL/dh_t for every row. Accumulates parameter gradients; returns dL/dx.
  Mat backward(const Mat& x, int batch, int time, const Tape& tape, const Mat& dh,
               GateGradient mode = GateGradient::surrogate, Mat* dh0 = nullptr, ScanMode scan_mode = ScanMode::parallel,
               ScanOptions opt = {}) {
    detail::check_rows(x, batch, time, cfg_.input_dim, "CmruCell::backward");
    const Mat dpre = backward_pre(batch, time, tape, dh, mode, dh0, scan_mode, opt);
    const int d = cfg_.state_dim;
    Mat dx = candidate_.backward(x, dpre.leftCols(d));
    dx += threshold_.backward(x, dpre.middleCols(d, d));
    if (cfg_.input_dependent_scale) dx += scale_.backward(x, dpre.rightCols(d));
    return dx;
  }

  // Returns dL/dpre; accumulates only the log_alpha gradient.
  Mat backward_pre(int batch, int time, const Tape& tape, const Mat& dh, GateGradient mode = GateGradient::surrogate,
                   Mat* dh0 = nullptr, ScanMode scan_mode = ScanMode::parallel, ScanOptions opt = {}) {
    if (tape.h.size() == 0) throw std::invalid_argument("CmruCell::backward: missing saved forward state");
    const int d = cfg_.state_dim;
    const double eps = backward_epsilon();
    const CmruGate& g = tape.gate;
    Mat a = state_jacobian(tape);

    Mat lambda(dh.rows(), d);
    if (dh0) dh0->resize(batch, d);
    scan_adjoint_batch<double>(detail::cspan(a), detail::cspan(dh), batch, time, d, detail::mspan(lambda),
                               dh0 ? dh0->data() : nullptr, scan_mode, opt);
    const Mat* h0 = tape.h0.size() > 0 ? &tape.h0 : nullptr;
    Mat prev = detail::shift_back(tape.h, batch, time, h0);

    Mat dpre = Mat::Zero(dh.rows(), pre_dim());
    Mat dalpha(dh.rows(), d);
    const double k = cfg_.surrogate_sharpness;
    for (Eigen::Index r = 0; r < lambda.rows(); ++r)
      for (int j = 0; j < d; ++j) {
        const double lam = lambda(r, j);
        const double da = lam * prev(r, j);
        const double db = lam;
        const double z = g.z(r, j);
        const double s = g.s(r, j);
        const double al = g.alpha(r, j);
        dalpha(r, j) = db * z * s;
        if (mode == GateGradient::surrogate) {
          const double dz = da * (eps - 1.0) + db * s * al;
          const double ds = db * z * al;
          const double c = g.candidate(r, j);
          const double t = g.threshold(r, j);
          const double gu = surrogate_step_grad(std::abs(c) - std::abs(t), k);
          dpre(r, j) = dz * gu * sign0(c) + ds * 2.0 * surrogate_step_grad(c, k);
          dpre(r, d + j) = -dz * gu * sign0(t);
        }
      }

    if (cfg_.input_dependent_scale) {
      dpre.rightCols(d) = dalpha;
    } else {
      log_alpha_->grad.row(0) += (dalpha.array() * g.alpha.array()).colwise().sum().matrix();
    }
    return dpre;
  }

 protected:
  // The epsilon the adjoint recurrence uses; equals the forward epsilon.
  virtual double backward_epsilon() const { return cfg_.epsilon; }

 private:
  CmruConfig cfg_;
  Linear candidate_;
  Linear threshold_;
  Linear scale_;
  ParamTensor* log_alpha_ = nullptr;
};

// ---------------------------------------------------------------------------
// LRU
// ---------------------------------------------------------------------------

struct LruConfig {
  int input_dim = 1;
  int state_dim = 1;
  double r_min = 0.9;
  double r_max = 0.999;
  double max_phase = 2.0 * std::numbers::pi;
};

class LruCell {
 public:
  struct Tape {
    CMat u;  // B x
    CMat h;
    CMat h0;
  };

  LruCell() = default;
  LruCell(ParamStore& store, const std::string& name, const LruConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.input_dim < 1 || cfg.state_dim < 1) throw std::invalid_argument("LruCell: dimensions must be >= 1");
    if (!(cfg.r_min > 0.0 && cfg.r_min <= cfg.r_max && cfg.r_max < 1.0))
      throw std::invalid_argument("LruCell: need 0 < r_min <= r_max < 1");
    const int d = cfg.state_dim;
    const int m = cfg.input_dim;
    nu_ = &store.add_vector(name + ".nu", d);
    theta_ = &store.add_vector(name + ".theta", d);
    for (int j = 0; j < d; ++j) {
      // Uniform on the annulus: r^2 ~ U[r_min^2, r_max^2].
      const double r = std::sqrt(rng.uniform(cfg.r_min * cfg.r_min, cfg.r_max * cfg.r_max));
      nu_->values(0, j) = std::log(-std::log(r));
      const double phase = cfg.max_phase * (1.0 - rng.uniform());  // (0, max_phase]
      theta_->values(0, j) = std::log(phase);
    }
    b_re_ = &store.add_matrix(name + ".B_re", d, m);
    b_im_ = &store.add_matrix(name + ".B_im", d, m);
    c_re_ = &store.add_matrix(name + ".C_re", d, d);
    c_im_ = &store.add_matrix(name + ".C_im", d, d);
    d_ = &store.add_matrix(name + ".D", d, m);
    for (ParamTensor* p : {b_re_, b_im_, c_re_, c_im_, d_}) glorot_fill(p->values, rng);
  }

  int input_dim() const { return cfg_.input_dim; }
  int state_dim() const { return cfg_.state_dim; }
  int output_dim() const { return cfg_.state_dim; }
  ParamTensor& nu() { return *nu_; }
  ParamTensor& theta() { return *theta_; }
  ParamTensor& B_re() { return *b_re_; }
  ParamTensor& B_im() { return *b_im_; }
  ParamTensor& C_re() { return *c_re_; }
  ParamTensor& C_im() { return *c_im_; }
  ParamTensor& D() { return *d_; }

  std::vector<cplx> eigenvalues() const {
    std::vector<cplx> lam(static_cast<std::size_t>(cfg_.state_dim));
    for (int j = 0; j < cfg_.state_dim; ++j)
      lam[static_cast<std::size_t>(j)] = std::exp(cplx(-std::exp(nu_->values(0, j)), std::exp(theta_->values(0, j))));
    return lam;
  }

  std::vector<double> input_gain() const {
    std::vector<double> g(static_cast<std::size_t>(cfg_.state_dim));
    for (int j = 0; j < cfg_.state_dim; ++j)
      g[static_cast<std::size_t>(j)] = std::sqrt(-std::expm1(-2.0 * std::exp(nu_->values(0, j))));
    return g;
  }

  // Hidden states only (before the C/D read-out).
  CMat states(const Mat& x, int batch, int time, CMat* u_out = nullptr, const CMat* h0 = nullptr,
              ScanMode mode = ScanMode::parallel, ScanOptions opt = {}) const {
    detail::check_rows(x, batch, time, cfg_.input_dim, "LruCell");
    const int d = cfg_.state_dim;
    const auto lam = eigenvalues();
    const auto gam = input_gain();
    CMat u(x.rows(), d);
    u.real() = x * b_re_->values.transpose();
    u.imag() = x * b_im_->values.transpose();
    CMat a(x.rows(), d), b(x.rows(), d);
    for (Eigen::Index r = 0; r < x.rows(); ++r)
      for (int j = 0; j < d; ++j) {
        a(r, j) = lam[static_cast<std::size_t>(j)];
        b(r, j) = gam[static_cast<std::size_t>(j)] * u(r, j);
      }
    CMat h(x.rows(), d);
    scan_batch<cplx>(detail::cspan(a), detail::cspan(b), batch, time, d, h0 ? h0->data() : nullptr, detail::mspan(h),
                     mode, opt);
    if (u_out) *u_out = std::move(u);
    return h;
  }

  Mat forward(const Mat& x, int batch, int time, Tape* tape = nullptr, const CMat* h0 = nullptr,
              ScanMode mode = ScanMode::parallel, ScanOptions opt = {}) const {
    CMat u;
    CMat h = states(x, batch, time, &u, h0, mode, opt);
    Mat y = h.real() * c_re_->values.transpose();
    y.noalias() -= h.imag() * c_im_->values.transpose();
    y.noalias() += x * d_->values.transpose();
    if (tape) {
      tape->u = std::move(u);
      tape->h = std::move(h);
      tape->h0 = h0 ? *h0 : CMat();
    }
    return y;
  }

  Mat backward(const Mat& x, int batch, int time, const Tape& tape, const Mat& dy,
               GateGradient = GateGradient::surrogate, CMat* dh0 = nullptr, ScanMode mode = ScanMode::parallel,
               ScanOptions opt = {}) {
    if (tape.h.size() == 0) throw std::invalid_argument("LruCell::backward: missing saved forward state");
    const int d = cfg_.state_dim;
    const Mat h_re = tape.h.real();
    const Mat h_im = tape.h.imag();
    c_re_->grad.noalias() += dy.transpose() * h_re;
    c_im_->grad.noalias() -= dy.transpose() * h_im;
    d_->grad.noalias() += dy.transpose() * x;
    Mat dx = dy * d_->values;

    // G = dL/dRe(h) + i dL/dIm(h) = dy conj(C).
    CMat g(dy.rows(), d);
    g.real() = dy * c_re_->values;
    g.imag() = -(dy * c_im_->values);

    const auto lam = eigenvalues();
    const auto gam = input_gain();
    CMat a(dy.rows(), d);
    for (Eigen::Index r = 0; r < a.rows(); ++r)
      for (int j = 0; j < d; ++j) a(r, j) = lam[static_cast<std::size_t>(j)];
    CMat lambda(dy.rows(), d);
    if (dh0) dh0->resize(batch, d);
    scan_adjoint_batch<cplx>(detail::cspan(a), detail::cspan(g), batch, time, d, detail::mspan(lambda),
                             dh0 ? dh0->data() : nullptr, mode, opt);
    const CMat* h0 = tape.h0.size() > 0 ? &tape.h0 : nullptr;
    CMat prev = detail::shift_back(tape.h, batch, time, h0);

    for (int j = 0; j < d; ++j) {
      cplx g_lam = 0.0;
      double g_gam = 0.0;
      for (Eigen::Index r = 0; r < lambda.rows(); ++r) {
        g_lam += lambda(r, j) * std::conj(prev(r, j));
        g_gam += std::real(lambda(r, j) * std::conj(tape.u(r, j)));
      }
      const double e_nu = std::exp(nu_->values(0, j));
      const cplx g_w = g_lam * std::conj(lam[static_cast<std::size_t>(j)]);
      const double gm = gam[static_cast<std::size_t>(j)];
      nu_->grad(0, j) += std::real(g_w) * (-e_nu) + g_gam * e_nu * std::exp(-2.0 * e_nu) / gm;
      theta_->grad(0, j) += std::imag(g_w) * std::exp(theta_->values(0, j));
    }

    Mat gu_re(dy.rows(), d), gu_im(dy.rows(), d);
    for (Eigen::Index r = 0; r < lambda.rows(); ++r)
      for (int j = 0; j < d; ++j) {
        const cplx gu = gam[static_cast<std::size_t>(j)] * lambda(r, j);
        gu_re(r, j) = gu.real();
        gu_im(r, j) = gu.imag();
      }
    b_re_->grad.noalias() += gu_re.transpose() * x;
    b_im_->grad.noalias() += gu_im.transpose() * x;
    dx.noalias() += gu_re * b_re_->values;
    dx.noalias() += gu_im * b_im_->values;
    return dx;
  }

 private:
  LruConfig cfg_;
  ParamTensor* nu_ = nullptr;
  ParamTensor* theta_ = nullptr;
  ParamTensor* b_re_ = nullptr;
  ParamTensor* b_im_ = nullptr;
  ParamTensor* c_re_ = nullptr;
  ParamTensor* c_im_ = nullptr;
  ParamTensor* d_ = nullptr;
};

// ---------------------------------------------------------------------------
// minGRU
// ---------------------------------------------------------------------------

struct MinGruConfig {
  int input_dim = 1;
  int state_dim = 1;
};

class MinGruCell {
 public:
  struct Tape {
    Mat z;
    Mat candidate;
    Mat h;
    Mat h0;
  };

  MinGruCell() = default;
  MinGruCell(ParamStore& store, const std::string& name, const MinGruConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.input_dim < 1 || cfg.state_dim < 1) throw std::invalid_argument("MinGruCell: dimensions must be >= 1");
    gate_ = Linear(store, name + ".gate", cfg.input_dim, cfg.state_dim, rng);
    candidate_ = Linear(store, name + ".candidate", cfg.input_dim, cfg.state_dim, rng);
  }

  int input_dim() const { return cfg_.input_dim; }
  int state_dim() const { return cfg_.state_dim; }
  int output_dim() const { return cfg_.state_dim; }
  Linear& gate() { return gate_; }
  Linear& candidate() { return candidate_; }

  Mat forward(const Mat& x, int batch, int time, Tape* tape = nullptr, const Mat* h0 = nullptr,
              ScanMode mode = ScanMode::parallel, ScanOptions opt = {}) const {
    detail::check_rows(x, batch, time, cfg_.input_dim, "MinGruCell");
    Mat z = sigmoid(gate_.forward(x));
    Mat cand = candidate_.forward(x);
    Mat a = (1.0 - z.array()).matrix();
    Mat b = (z.array() * cand.array()).matrix();
    Mat h(x.rows(), cfg_.state_dim);
    scan_batch<double>(detail::cspan(a), detail::cspan(b), batch, time, cfg_.state_dim, h0 ? h0->data() : nullptr,
                       detail::mspan(h), mode, opt);
    if (tape) {
      tape->z = std::move(z);
      tape->candidate = std::move(cand);
      tape->h = h;
      tape->h0 = h0 ? *h0 : Mat();
    }
    return h;
  }

  Mat backward(const Mat& x, int batch, int time, const Tape& tape, const Mat& dh,
               GateGradient = GateGradient::surrogate, Mat* dh0 = nullptr, ScanMode mode = ScanMode::parallel,
               ScanOptions opt = {}) {
    if (tape.h.size() == 0) throw std::invalid_argument("MinGruCell::backward: missing saved forward state");
    const int d = cfg_.state_dim;
    Mat a = (1.0 - tape.z.array()).matrix();
    Mat lambda(dh.rows(), d);
    if (dh0) dh0->resize(batch, d);
    scan_adjoint_batch<double>(detail::cspan(a), detail::cspan(dh), batch, time, d, detail::mspan(lambda),
                               dh0 ? dh0->data() : nullptr, mode, opt);
    const Mat* h0 = tape.h0.size() > 0 ? &tape.h0 : nullptr;
    Mat prev = detail::shift_back(tape.h, batch, time, h0);
    // dz = -lambda h_prev + lambda h~, then through the sigmoid.
    Mat dgate = (lambda.array() * (tape.candidate.array() - prev.array()) * tape.z.array() * (1.0 - tape.z.array())).matrix();
    Mat dcand = (lambda.array() * tape.z.array()).matrix();
    Mat dx = gate_.backward(x, dgate);
    dx += candidate_.backward(x, dcand);
    return dx;
  }

 private:
  MinGruConfig cfg_;
  Linear gate_;
  Linear candidate_;
};

// ---------------------------------------------------------------------------
// Selective-SSM form of one CMRU update
// ---------------------------------------------------------------------------

struct SsmForm {
  Vec a_diag;   // d
  Mat b;        // d x m
  double residual = 0.0;
};

// Canonical (A, B) with A = diag(1 - z + eps z), B = (z s alpha) x^T / (x^T x),
// compared with the direct update on `probes` random previous states.
inline SsmForm ssm_from_gate(const RowVec& x, const RowVec& z, const RowVec& s, const RowVec& alpha, double epsilon,
                             Rng& rng, int probes = 16) {
  const double xx = x.squaredNorm();
  if (!(xx > 0.0)) throw std::invalid_argument("ssm_equivalence_check: zero input vector, B is undefined");
  const Eigen::Index d = z.size();
  SsmForm out;
  out.a_diag = (1.0 - z.array() + epsilon * z.array()).matrix().transpose();
  const Vec drive = (z.array() * s.array() * alpha.array()).matrix().transpose();
  out.b = drive * x / xx;
  const Vec bx = out.b * x.transpose();
  for (int k = 0; k < probes; ++k) {
    Vec h(d);
    for (Eigen::Index j = 0; j < d; ++j) h(j) = rng.uniform(-2.0, 2.0);
    for (Eigen::Index j = 0; j < d; ++j) {
      const double ssm = out.a_diag(j) * h(j) + bx(j);
      const double direct = z(j) * (s(j) * alpha(j) + epsilon * h(j)) + (1.0 - z(j)) * h(j);
      out.residual = std::max(out.residual, std::abs(ssm - direct));
    }
  }
  return out;
}

inline SsmForm ssm_equivalence_check(const RowVec& x, const CmruCell& cell, Rng& rng, int probes = 16) {
  if (x.size() != cell.input_dim()) throw std::invalid_argument("ssm_equivalence_check: input dimension mismatch");
  if (!(x.squaredNorm() > 0.0)) throw std::invalid_argument("ssm_equivalence_check: zero input vector, B is undefined");
  const Mat xm = x;
  const CmruGate g = cell.gate(xm);
  return ssm_from_gate(x, g.z.row(0), g.s.row(0), g.alpha.row(0), cell.epsilon(), rng, probes);
}

// ---------------------------------------------------------------------------
// Fixed-point lattice
// ---------------------------------------------------------------------------

struct LatticeReport {
  std::vector<double> states;
  bool all_reachable = true;
  bool all_fixed = true;
};

// Under eps = 1 the states reachable from 0 are k*alpha. Each k is realised by
// an explicit input program through a 1-d CMRU (|k| pushes of sign(k), then a
// zero-input suffix of `hold` steps that must leave it untouched).
inline LatticeReport reachable_lattice(double alpha, double epsilon, int k_max, int hold = 100) {
  if (epsilon != 1.0) throw std::invalid_argument("reachable_lattice: requires epsilon = 1");
  if (!(alpha > 0.0) || k_max < 0) throw std::invalid_argument("reachable_lattice: need alpha > 0 and k_max >= 0");
  ParamStore store;
  Rng rng(0);
  CmruCell cell(store, "lattice", CmruConfig{1, 1, 1.0, false, 1.0}, rng);
  cell.candidate().weight().values(0, 0) = 1.0;
  cell.candidate().bias()->values(0, 0) = 0.0;
  cell.threshold().weight().values(0, 0) = 0.0;
  cell.threshold().bias()->values(0, 0) = 0.5;
  cell.log_alpha()->values(0, 0) = std::log(alpha);
  const double a = std::exp(std::log(alpha));

  LatticeReport rep;
  for (int k = -k_max; k <= k_max; ++k) {
    const int pushes = std::abs(k);
    const int time = pushes + hold;
    Mat x = Mat::Zero(time, 1);
    for (int t = 0; t < pushes; ++t) x(t, 0) = k > 0 ? 1.0 : -1.0;
    Mat h = cell.forward(x, 1, time, nullptr, nullptr, ScanMode::sequential);
    const double reached = pushes > 0 ? h(pushes - 1, 0) : 0.0;
    const double target = k * a;
    if (std::abs(reached - target) > 1e-12 * std::max(1.0, std::abs(target))) rep.all_reachable = false;
    for (int t = pushes; t < time; ++t)
      if (h(t, 0) != reached) rep.all_fixed = false;
    rep.states.push_back(target);
  }
  return rep;
}

// Every value one coordinate can hold after exactly n updates (z = 1, s = +-1)
// from h0 = 0, for any eps. Rounded to 1e-12 to merge equal states.
inline std::vector<double> enumerate_reachable(double alpha, double epsilon, int n_updates) {
  if (n_updates < 1) throw std::invalid_argument("enumerate_reachable: need at least one update");
  if (n_updates > 20) throw std::invalid_argument("enumerate_reachable: n_updates too large");
  std::set<double> level{0.0};
  for (int n = 0; n < n_updates; ++n) {
    std::set<double> next;
    for (double h : level)
      for (double s : {-1.0, 1.0}) next.insert(std::round((s * alpha + epsilon * h) * 1e12) / 1e12);
    level = std::move(next);
  }
  return {level.begin(), level.end()};
}

}  // namespace cmru
