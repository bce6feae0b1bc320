// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The cmru Authors.
//
// Invariant suites shared by `cmru verify`, the unit tests and the acceptance
// binary. Each suite returns pass/fail plus one line per check.

#pragma once

#include "cmru/backbone.hpp"
#include "cmru/cells.hpp"
#include "cmru/scan.hpp"
#include "cmru/tasks.hpp"
#include "cmru/train.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <cstdio>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

namespace cmru::verify {

struct SuiteResult {
  explicit SuiteResult(std::string n) : name(std::move(n)) {}

  std::string name;
  bool passed = true;
  std::vector<std::string> lines;
  double seconds = 0.0;

  void check(bool ok, const std::string& line) {
    passed = passed && ok;
    lines.push_back(std::string(ok ? "ok   " : "FAIL ") + line);
  }
};

inline std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

class Timer {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

// ---------------------------------------------------------------------------
// scan: parallel vs sequential on random instances with |a| <= 1
// ---------------------------------------------------------------------------

struct ScanSuiteOptions {
  int instances = 100;
  int real_time = 1000, real_dim = 16;
  int complex_time = 512, complex_dim = 8;
  double complex_radius = 0.99;
  double real_tol = 1e-10, complex_tol = 1e-9;
  int threads = 1;
  std::uint64_t seed = 1;
};

inline SuiteResult scan_suite(const ScanSuiteOptions& o = {}) {
  SuiteResult r{"scan"};
  Timer timer;
  Rng rng(o.seed, 0x5ca9);
  double worst_real = 0.0, worst_complex = 0.0;
  ScanOptions opt{o.threads, 256};
  for (int k = 0; k < o.instances; ++k) {
    const std::size_t n = static_cast<std::size_t>(o.real_time) * o.real_dim;
    std::vector<double> a(n), b(n), h0(static_cast<std::size_t>(o.real_dim)), hs(n), hp(n);
    for (auto& v : a) v = rng.uniform(-1.0, 1.0);
    for (auto& v : b) v = rng.uniform(-1.0, 1.0);
    for (auto& v : h0) v = rng.uniform(-1.0, 1.0);
    scan_batch<double>(a, b, 1, o.real_time, o.real_dim, h0.data(), hs, ScanMode::sequential, opt);
    scan_batch<double>(a, b, 1, o.real_time, o.real_dim, h0.data(), hp, ScanMode::parallel, opt);
    for (std::size_t i = 0; i < n; ++i) worst_real = std::max(worst_real, std::abs(hs[i] - hp[i]));

    const std::size_t nc = static_cast<std::size_t>(o.complex_time) * o.complex_dim;
    std::vector<cplx> ca(nc), cb(nc), c0(static_cast<std::size_t>(o.complex_dim)), cs(nc), cp(nc);
    for (auto& v : ca) v = std::polar(o.complex_radius, rng.uniform(0.0, 2.0 * std::numbers::pi));
    for (auto& v : cb) v = cplx(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
    for (auto& v : c0) v = cplx(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
    scan_batch<cplx>(ca, cb, 1, o.complex_time, o.complex_dim, c0.data(), cs, ScanMode::sequential, opt);
    scan_batch<cplx>(ca, cb, 1, o.complex_time, o.complex_dim, c0.data(), cp, ScanMode::parallel, opt);
    for (std::size_t i = 0; i < nc; ++i) worst_complex = std::max(worst_complex, std::abs(cs[i] - cp[i]));
  }
  r.check(worst_real < o.real_tol, fmt("real    %d x (T=%d, d=%d): max |parallel - sequential| = %.3e (tol %.0e)",
                                       o.instances, o.real_time, o.real_dim, worst_real, o.real_tol));
  r.check(worst_complex < o.complex_tol, fmt("complex %d x (T=%d, d=%d): max |parallel - sequential| = %.3e (tol %.0e)",
                                             o.instances, o.complex_time, o.complex_dim, worst_complex, o.complex_tol));
  r.seconds = timer.seconds();
  return r;
}

// ---------------------------------------------------------------------------
// gradients: backward vs central differences, per cell type
// ---------------------------------------------------------------------------

struct GradientSuiteOptions {
  int instances = 20;
  int batch = 4, time = 16, state = 4, input = 4;
  double step = 1e-5;
  double tol = 1e-4;
  // Relative-error denominator floor; FD round-off is ~1e-11 at h = 1e-5.
  double floor = 1e-6;
  std::uint64_t seed = 2;
};

struct FdStats {
  double worst = 0.0;
  long checked = 0;
  long skipped = 0;
};

// Loss = sum(w .* cell(x)); every parameter coordinate is checked except
// those whose +-h perturbation flips a gate (the loss is discontinuous there).
template <class Cell>
FdStats fd_check_cell(ParamStore& store, Cell& cell, const Mat& x, int B, int T, const Mat& w, const GradientSuiteOptions& o,
                      const std::function<bool()>& gates_moved) {
  FdStats st;
  typename Cell::Tape tape;
  zero_grad(store);
  cell.forward(x, B, T, &tape, nullptr, ScanMode::parallel);
  cell.backward(x, B, T, tape, w, GateGradient::exact);
  auto loss = [&] { return (cell.forward(x, B, T, nullptr, nullptr, ScanMode::sequential).array() * w.array()).sum(); };
  for (auto& p : store.tensors()) {
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      double& v = p.values.data()[i];
      const double orig = v;
      if (gates_moved) {
        v = orig + o.step;
        bool moved = gates_moved();
        v = orig - o.step;
        moved = moved || gates_moved();
        v = orig;
        if (moved) {
          ++st.skipped;
          continue;
        }
      }
      const double fd = finite_difference_coord(loss, v, o.step);
      st.worst = std::max(st.worst, relative_error(p.grad.data()[i], fd, o.floor));
      ++st.checked;
    }
  }
  return st;
}

inline Mat uniform_mat(Eigen::Index rows, Eigen::Index cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

// CmruT lets a test substitute a deliberately broken CMRU.
template <class CmruT = CmruCell>
SuiteResult gradient_suite(const GradientSuiteOptions& o = {}) {
  SuiteResult r{"gradients"};
  Timer timer;
  Rng rng(o.seed, 0x6ad);
  const int B = o.batch, T = o.time, d = o.state, m = o.input;

  struct Variant {
    const char* name;
    CellType type;
  };
  for (const Variant v : {Variant{"bmru", CellType::bmru}, Variant{"cmru", CellType::cmru},
                          Variant{"alpha_cmru", CellType::alpha_cmru}, Variant{"lru", CellType::lru},
                          Variant{"mingru", CellType::mingru}}) {
    FdStats total;
    bool jacobian_ok = true;
    for (int k = 0; k < o.instances; ++k) {
      ParamStore store;
      const Mat x = uniform_mat(static_cast<Eigen::Index>(B) * T, m, rng);
      const Mat w = uniform_mat(static_cast<Eigen::Index>(B) * T, d, rng);
      FdStats st;
      if (v.type == CellType::lru) {
        LruCell cell(store, "lru", LruConfig{m, d}, rng);
        st = fd_check_cell(store, cell, x, B, T, w, o, nullptr);
      } else if (v.type == CellType::mingru) {
        MinGruCell cell(store, "mingru", MinGruConfig{m, d}, rng);
        st = fd_check_cell(store, cell, x, B, T, w, o, nullptr);
      } else {
        const double eps = v.type == CellType::bmru ? 0.0 : rng.uniform(-1.0, 1.0);
        CmruT cell(store, "cmru", CmruConfig{m, d, eps, v.type == CellType::alpha_cmru, 1.0}, rng);
        if (cell.log_alpha()) cell.log_alpha()->values = uniform_mat(1, d, rng, -1.0, 1.0);
        CmruCell::Tape tape;
        cell.forward(x, B, T, &tape);
        const Mat jac = cell.state_jacobian(tape);
        jacobian_ok = jacobian_ok && jac.size() == tape.a.size() &&
                      std::memcmp(jac.data(), tape.a.data(), sizeof(double) * static_cast<std::size_t>(jac.size())) == 0;
        // The Jacobian the adjoint actually propagates: with T = 1 and a
        // unit upstream gradient, dL/dh0 = a_0 for every row of x.
        Mat h0 = uniform_mat(static_cast<Eigen::Index>(B) * T, d, rng);
        CmruCell::Tape step_tape;
        cell.forward(x, B * T, 1, &step_tape, &h0);
        Mat dh0;
        cell.backward(x, B * T, 1, step_tape, Mat::Ones(static_cast<Eigen::Index>(B) * T, d), GateGradient::exact, &dh0);
        jacobian_ok = jacobian_ok && dh0 == step_tape.a;
        const CmruGate base = cell.gate(x);
        auto moved = [&] {
          const CmruGate g = cell.gate(x);
          return g.z != base.z || g.s != base.s;
        };
        st = fd_check_cell(store, cell, x, B, T, w, o, moved);
      }
      total.worst = std::max(total.worst, st.worst);
      total.checked += st.checked;
      total.skipped += st.skipped;
    }
    r.check(total.worst < o.tol && total.checked > 0,
            fmt("%-10s %d instances: max rel err %.3e over %ld coords (%ld skipped at gate flips), tol %.0e", v.name,
                o.instances, total.worst, total.checked, total.skipped, o.tol));
    if (v.type != CellType::lru && v.type != CellType::mingru)
      r.check(jacobian_ok, fmt("%-10s state Jacobian bit-equal to a_t = 1 - z + eps z", v.name));
  }
  r.seconds = timer.seconds();
  return r;
}

// ---------------------------------------------------------------------------
// ssm: Appendix-B canonical form vs direct update
// ---------------------------------------------------------------------------

inline SuiteResult ssm_suite(int inputs = 1000, std::uint64_t seed = 3) {
  SuiteResult r{"ssm"};
  Timer timer;
  Rng rng(seed, 0x55a);
  double worst = 0.0;
  int n = 0;
  for (bool alpha_input : {false, true}) {
    ParamStore store;
    CmruCell cell(store, "c", CmruConfig{4, 8, rng.uniform(-1.0, 1.0), alpha_input, 1.0}, rng);
    for (int k = 0; k < inputs; ++k) {
      RowVec x(4);
      do {
        for (int i = 0; i < 4; ++i) x(i) = rng.uniform(-2.0, 2.0);
      } while (x.squaredNorm() == 0.0);
      worst = std::max(worst, ssm_equivalence_check(x, cell, rng).residual);
      ++n;
    }
  }
  r.check(worst < 1e-12, fmt("%d inputs (CMRU and alpha-CMRU, d=8, m=4): max residual %.3e (tol 1e-12)", n, worst));
  bool threw = false;
  try {
    ParamStore store;
    CmruCell cell(store, "z", CmruConfig{4, 8, 1.0, false, 1.0}, rng);
    ssm_equivalence_check(RowVec::Zero(4), cell, rng);
  } catch (const std::invalid_argument&) {
    threw = true;
  }
  r.check(threw, "zero input vector rejected");
  r.seconds = timer.seconds();
  return r;
}

// ---------------------------------------------------------------------------
// quantization: closed form and Monte Carlo
// ---------------------------------------------------------------------------

inline SuiteResult quantization_suite(std::size_t draws = 1000000, std::uint64_t seed = 4) {
  SuiteResult r{"quantization"};
  Timer timer;
  const double q4 = quantization_limit(4);
  r.check(q4 == 0.03125, fmt("quantization_limit(4) = %.5f", q4));
  r.check(quantization_limit(1) == 0.25, fmt("quantization_limit(1) = %.2f", quantization_limit(1)));
  Rng rng(seed, 0x9a);
  const double mc = midpoint_quantizer_mae(4, draws, rng);
  r.check(std::abs(mc - q4) < 1e-3, fmt("Monte Carlo midpoint quantizer, b=4, %zu draws: %.6f (|diff| %.2e, tol 1e-3)", draws,
                                        mc, std::abs(mc - q4)));
  r.seconds = timer.seconds();
  return r;
}

// ---------------------------------------------------------------------------
// annealing and learning-rate schedule
// ---------------------------------------------------------------------------

inline SuiteResult annealing_suite(std::int64_t total = 100000) {
  SuiteResult r{"annealing"};
  Timer timer;
  const std::int64_t pct[] = {0, 5, 40, 75, 100};
  const double expect[] = {1.0, 1.0, 0.5, 0.0, 0.0};
  for (int i = 0; i < 5; ++i) {
    const std::int64_t step = pct[i] * total / 100;
    const double e = epsilon_anneal(step, total);
    r.check(e == expect[i], fmt("epsilon_anneal(%.2f total) = %.17g (expect %g)", pct[i] / 100.0, e, expect[i]));
  }
  r.check(epsilon_anneal(4 * total / 100, total) == 1.0 && epsilon_anneal(80 * total / 100, total) == 0.0,
          "epsilon_anneal(0.04) = 1, epsilon_anneal(0.80) = 0");
  bool monotone = true;
  for (std::int64_t s = 1; s <= total; s += std::max<std::int64_t>(1, total / 997))
    monotone = monotone && epsilon_anneal(s, total) <= epsilon_anneal(s - 1, total);
  r.check(monotone, "epsilon_anneal non-increasing");

  TrainConfig c;
  const double l0 = lr_schedule(0, total, c);
  const double lw = lr_schedule(total / 100, total, c);
  const double le = lr_schedule(total, total, c);
  r.check(l0 == 0.0 && lw == 1e-3 && le == 1e-5, fmt("lr_schedule: start %.17g, 1%% mark %.17g, end %.17g", l0, lw, le));
  r.seconds = timer.seconds();
  return r;
}

// ---------------------------------------------------------------------------
// lattice: fixed points of the eps = 1 integrator
// ---------------------------------------------------------------------------

inline SuiteResult lattice_suite() {
  SuiteResult r{"lattice"};
  Timer timer;
  const auto rep = reachable_lattice(0.5, 1.0, 2);
  r.check(rep.states == std::vector<double>{-1.0, -0.5, 0.0, 0.5, 1.0}, "k_max=2, alpha=0.5 -> {-1, -0.5, 0, 0.5, 1}");
  r.check(rep.all_reachable, "every lattice state reached by an explicit input program");
  r.check(rep.all_fixed, "every lattice state unchanged by 100 zero inputs");
  const auto wide = reachable_lattice(0.37, 1.0, 8);
  r.check(wide.all_reachable && wide.all_fixed, "k_max=8, alpha=0.37 reachable and fixed");
  bool two_states = true;
  for (int n = 1; n <= 8; ++n) two_states = two_states && enumerate_reachable(0.5, 0.0, n) == std::vector<double>{-0.5, 0.5};
  r.check(two_states, "eps=0: reachable set is {-alpha, +alpha} after 1..8 updates");
  r.seconds = timer.seconds();
  return r;
}

inline const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"scan", "gradients", "ssm", "quantization", "annealing", "lattice"};
  return names;
}

inline SuiteResult run_suite(const std::string& name) {
  if (name == "scan") return scan_suite();
  if (name == "gradients") return gradient_suite();
  if (name == "ssm") return ssm_suite();
  if (name == "quantization") return quantization_suite();
  if (name == "annealing") return annealing_suite();
  if (name == "lattice") return lattice_suite();
  throw std::invalid_argument("unknown suite: " + name);
}

}  // namespace cmru::verify
