// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The cmru Authors.
//
// Encoder -> r x [pre-norm cell block, pre-norm MLP] -> pooling -> decoder.
//
// Activations travel as `Rows`: a compact matrix plus a map from every
// (sample, timestep) row to its compact row, or -1 if the row is not held.
// Before the first recurrence everything is a pointwise function of the raw
// input, so identical raw rows share one compact row. After the last block
// only the rows the pooling reads are computed.

#pragma once

#include "cmru/cells.hpp"
#include "cmru/layers.hpp"
#include "cmru/numerics.hpp"
#include "cmru/scan.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace cmru {

enum class CellType { bmru, cmru, alpha_cmru, lru, mingru };
enum class Pooling { last, mean, none };

NLOHMANN_JSON_SERIALIZE_ENUM(CellType, {{CellType::bmru, "bmru"},
                                        {CellType::cmru, "cmru"},
                                        {CellType::alpha_cmru, "alpha_cmru"},
                                        {CellType::lru, "lru"},
                                        {CellType::mingru, "mingru"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Pooling, {{Pooling::last, "last"}, {Pooling::mean, "mean"}, {Pooling::none, "none"}})

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what) : std::runtime_error(key + ": " + what), key(std::move(key)) {}
  std::string key;
};

namespace detail {

// Reads an enum from a string, rejecting values the table does not know.
template <class E>
E parse_enum(const nlohmann::json& j, const std::string& key, std::initializer_list<std::pair<E, const char*>> table) {
  if (!j.is_string()) throw ConfigError(key, "expected a string");
  const std::string v = j.get<std::string>();
  for (const auto& [e, name] : table)
    if (v == name) return e;
  throw ConfigError(key, "unknown value '" + v + "'");
}

inline void reject_unknown(const nlohmann::json& j, const std::string& prefix, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(prefix.empty() ? "<root>" : prefix, "expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : keys) known = known || it.key() == k;
    if (!known) throw ConfigError(prefix.empty() ? it.key() : prefix + "." + it.key(), "unknown key");
  }
}

template <class T>
void read_opt(const nlohmann::json& j, const char* key, const std::string& prefix, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(prefix.empty() ? std::string(key) : prefix + "." + key, e.what());
  }
}

}  // namespace detail

inline CellType parse_cell_type(const nlohmann::json& j, const std::string& key) {
  return detail::parse_enum<CellType>(j, key,
                                      {{CellType::bmru, "bmru"},
                                       {CellType::cmru, "cmru"},
                                       {CellType::alpha_cmru, "alpha_cmru"},
                                       {CellType::lru, "lru"},
                                       {CellType::mingru, "mingru"}});
}

inline Pooling parse_pooling(const nlohmann::json& j, const std::string& key) {
  return detail::parse_enum<Pooling>(j, key, {{Pooling::last, "last"}, {Pooling::mean, "mean"}, {Pooling::none, "none"}});
}

struct ModelConfig {
  CellType cell = CellType::cmru;
  int blocks = 1;
  int state_dim = 4;
  int model_dim = 256;
  int input_dim = 1;
  int output_dim = 1;
  Pooling pooling = Pooling::last;
  double dropout = 0.0;
  int pe_dim = 32;
  double epsilon = 1.0;
  int mlp_ratio = 4;
  double surrogate_sharpness = 1.0;
  double lru_r_min = 0.9;
  double lru_r_max = 0.999;

  bool is_cmru_family() const { return cell == CellType::bmru || cell == CellType::cmru || cell == CellType::alpha_cmru; }

  void validate() const {
    if (blocks < 1) throw ConfigError("model.blocks", "must be >= 1");
    if (state_dim < 1) throw ConfigError("model.state_dim", "must be >= 1");
    if (model_dim < 1) throw ConfigError("model.model_dim", "must be >= 1");
    if (input_dim < 1) throw ConfigError("model.input_dim", "must be >= 1");
    if (output_dim < 1) throw ConfigError("model.output_dim", "must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model.dropout", "must lie in [0, 1)");
    if (pe_dim < 2 || pe_dim % 2 != 0) throw ConfigError("model.pe_dim", "must be even and >= 2");
    if (mlp_ratio < 1) throw ConfigError("model.mlp_ratio", "must be >= 1");
    if (!(epsilon >= -1.0 && epsilon <= 1.0)) throw ConfigError("model.epsilon", "must lie in [-1, 1]");
    if (cell == CellType::bmru && epsilon != 0.0) throw ConfigError("model.epsilon", "bmru requires epsilon = 0");
    if (!(surrogate_sharpness > 0.0)) throw ConfigError("model.surrogate_sharpness", "must be positive");
    if (!(lru_r_min > 0.0 && lru_r_min <= lru_r_max && lru_r_max < 1.0))
      throw ConfigError("model.lru_r_min", "need 0 < lru_r_min <= lru_r_max < 1");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"cell", c.cell},           {"blocks", c.blocks},   {"state_dim", c.state_dim},
       {"model_dim", c.model_dim}, {"input_dim", c.input_dim}, {"output_dim", c.output_dim},
       {"pooling", c.pooling},     {"dropout", c.dropout}, {"pe_dim", c.pe_dim},
       {"epsilon", c.epsilon},     {"mlp_ratio", c.mlp_ratio}, {"surrogate_sharpness", c.surrogate_sharpness},
       {"lru_r_min", c.lru_r_min}, {"lru_r_max", c.lru_r_max}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& prefix = "model") {
  detail::reject_unknown(j, prefix,
                         {"cell", "blocks", "state_dim", "model_dim", "input_dim", "output_dim", "pooling", "dropout",
                          "pe_dim", "epsilon", "mlp_ratio", "surrogate_sharpness", "lru_r_min", "lru_r_max"});
  ModelConfig c;
  if (j.contains("cell")) c.cell = parse_cell_type(j["cell"], prefix + ".cell");
  if (j.contains("pooling")) c.pooling = parse_pooling(j["pooling"], prefix + ".pooling");
  if (c.cell == CellType::bmru) c.epsilon = 0.0;
  detail::read_opt(j, "blocks", prefix, c.blocks);
  detail::read_opt(j, "state_dim", prefix, c.state_dim);
  detail::read_opt(j, "model_dim", prefix, c.model_dim);
  detail::read_opt(j, "input_dim", prefix, c.input_dim);
  detail::read_opt(j, "output_dim", prefix, c.output_dim);
  detail::read_opt(j, "dropout", prefix, c.dropout);
  detail::read_opt(j, "pe_dim", prefix, c.pe_dim);
  detail::read_opt(j, "epsilon", prefix, c.epsilon);
  detail::read_opt(j, "mlp_ratio", prefix, c.mlp_ratio);
  detail::read_opt(j, "surrogate_sharpness", prefix, c.surrogate_sharpness);
  detail::read_opt(j, "lru_r_min", prefix, c.lru_r_min);
  detail::read_opt(j, "lru_r_max", prefix, c.lru_r_max);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Row maps
// ---------------------------------------------------------------------------

struct Rows {
  Mat data;
  std::vector<int> index;  // logical row -> compact row, -1 if absent

  // Compact rows for the given logical rows (all must be present).
  Mat gather(const std::vector<Eigen::Index>& logical) const {
    Mat out(static_cast<Eigen::Index>(logical.size()), data.cols());
    for (std::size_t k = 0; k < logical.size(); ++k) {
      const int c = index[static_cast<std::size_t>(logical[k])];
      out.row(static_cast<Eigen::Index>(k)) = data.row(c);
    }
    return out;
  }
};

// Adds rows of `src` (one per logical row) into compact rows, in logical order.
inline void scatter_add(const Mat& src, const std::vector<Eigen::Index>& logical, const std::vector<int>& index, Mat& dst) {
  for (std::size_t k = 0; k < logical.size(); ++k) {
    const int c = index[static_cast<std::size_t>(logical[k])];
    dst.row(c) += src.row(static_cast<Eigen::Index>(k));
  }
}

inline std::vector<Eigen::Index> valid_rows(const SequenceBatch& x) {
  std::vector<Eigen::Index> out;
  for (int b = 0; b < x.batch(); ++b)
    for (int t = 0; t < x.lengths()[static_cast<std::size_t>(b)]; ++t) out.push_back(x.row(b, t));
  return out;
}

inline std::vector<Eigen::Index> last_rows(const SequenceBatch& x) {
  std::vector<Eigen::Index> out;
  for (int b = 0; b < x.batch(); ++b) out.push_back(x.row(b, x.lengths()[static_cast<std::size_t>(b)] - 1));
  return out;
}

// ---------------------------------------------------------------------------
// Residual blocks
// ---------------------------------------------------------------------------

using AnyCell = std::variant<CmruCell, LruCell, MinGruCell>;
using AnyCellTape = std::variant<CmruCell::Tape, LruCell::Tape, MinGruCell::Tape>;

struct ExecutionOptions {
  ScanMode scan = ScanMode::parallel;
  ScanOptions scan_options{};
  GateGradient gate_gradient = GateGradient::surrogate;
};

class ResidualBlock {
 public:
  struct Tape {
    Rows input;
    std::vector<Eigen::Index> out_rows;
    LayerNorm::Tape norm_in;
    Mat normed;             // compact, aligned with input.data
    bool gate_compact = false;
    Mat gate_pre;           // compact rows if gate_compact, else out rows
    Mat cell_in;            // every logical row (LRU / minGRU)
    Mat proj;               // compact input projection (CMRU family)
    Mat pos;                // position term, time x m (CMRU family)
    AnyCellTape cell;
    Mat cell_out_sel;       // cell output at out rows
    LayerNorm::Tape norm_cell;
    Mat normed_cell;        // Norm(Linear(cell)) at out rows
    Mat gate_sig;           // at out rows
    Mat mid;                // after the cell sub-layer
    LayerNorm::Tape norm_mid;
    GluMlp::Tape mlp;
  };

  ResidualBlock() = default;
  ResidualBlock(ParamStore& store, const std::string& name, const ModelConfig& cfg, Rng& rng) : m_(cfg.model_dim) {
    const int m = cfg.model_dim;
    norm_in_ = LayerNorm(store, name + ".norm_in", m);
    gain_in_ = &store.add_vector(name + ".gain_in", m);
    gain_in_->values.setOnes();
    position_ = PositionalProjection(store, name + ".position", m, cfg.pe_dim, rng);
    switch (cfg.cell) {
      case CellType::bmru:
      case CellType::cmru:
      case CellType::alpha_cmru:
        cell_ = CmruCell(store, name + ".cell", CmruConfig{m, cfg.state_dim, cfg.epsilon, cfg.cell == CellType::alpha_cmru,
                                                           cfg.surrogate_sharpness},
                         rng);
        break;
      case CellType::lru:
        cell_ = LruCell(store, name + ".cell", LruConfig{m, cfg.state_dim, cfg.lru_r_min, cfg.lru_r_max}, rng);
        break;
      case CellType::mingru:
        cell_ = MinGruCell(store, name + ".cell", MinGruConfig{m, cfg.state_dim}, rng);
        break;
    }
    cell_proj_ = Linear(store, name + ".cell_proj", cfg.state_dim, m, rng);
    cell_norm_ = LayerNorm(store, name + ".cell_norm", m);
    gate_ = Linear(store, name + ".gate", m, m, rng);
    norm_mid_ = LayerNorm(store, name + ".norm_mid", m);
    gain_mid_ = &store.add_vector(name + ".gain_mid", m);
    gain_mid_->values.setOnes();
    mlp_ = GluMlp(store, name + ".mlp", m, cfg.mlp_ratio * m, rng, cfg.dropout);
  }

  AnyCell& cell() { return cell_; }
  const AnyCell& cell() const { return cell_; }

  // Computes the block output at `out_rows` (logical rows, all valid).
  Rows forward(const SequenceBatch& shape, const Rows& x, const std::vector<Eigen::Index>& out_rows,
               const ExecutionOptions& ex, Tape* tape, Rng* dropout_rng) const {
    const int B = shape.batch(), T = shape.time();
    const Eigen::Index n_rows = static_cast<Eigen::Index>(B) * T;
    LayerNorm::Tape ln_in;
    Mat normed = norm_in_.forward(x.data, tape ? &ln_in : nullptr);

    Mat proj = position_.project_input(normed);
    Mat pos = position_.position_term(T);
    Mat cell_in;
    AnyCellTape cell_tape;
    Mat cell_out;
    if (const auto* cm = std::get_if<CmruCell>(&cell_)) {
      // The gate pre-activations are affine in cell_in = proj[index] + pos[t],
      // so they are formed per compact row and per timestep.
      const Mat w = cm->input_weight();
      Mat pre_rows(proj.rows(), w.rows());
      pre_rows.noalias() = proj * w.transpose();
      Mat pre_time(T, w.rows());
      pre_time.noalias() = pos * w.transpose();
      const RowVec c = cm->input_bias();
      Mat pre(n_rows, w.rows());
      for (int b = 0; b < B; ++b) {
        const int len = shape.lengths()[static_cast<std::size_t>(b)];
        for (int t = 0; t < T; ++t) {
          const Eigen::Index r = shape.row(b, t);
          if (t < len)
            pre.row(r) = pre_rows.row(x.index[static_cast<std::size_t>(r)]) + pre_time.row(t) + c;
          else
            pre.row(r) = c;
        }
      }
      CmruCell::Tape ct;
      cell_out = cm->forward_pre(pre, B, T, tape ? &ct : nullptr, nullptr, ex.scan, ex.scan_options);
      if (tape) cell_tape = std::move(ct);
    } else {
      cell_in = Mat::Zero(n_rows, m_);
      for (int b = 0; b < B; ++b)
        for (int t = 0; t < shape.lengths()[static_cast<std::size_t>(b)]; ++t) {
          const Eigen::Index r = shape.row(b, t);
          cell_in.row(r) = proj.row(x.index[static_cast<std::size_t>(r)]) + pos.row(t);
        }
      cell_out = std::visit(
          [&](const auto& c) -> Mat {
            using C = std::decay_t<decltype(c)>;
            typename C::Tape ct;
            Mat y = c.forward(cell_in, B, T, tape ? &ct : nullptr, nullptr, ex.scan, ex.scan_options);
            if (tape) cell_tape = std::move(ct);
            return y;
          },
          cell_);
    }

    Mat cell_sel(static_cast<Eigen::Index>(out_rows.size()), cell_out.cols());
    for (std::size_t k = 0; k < out_rows.size(); ++k) cell_sel.row(static_cast<Eigen::Index>(k)) = cell_out.row(out_rows[k]);

    LayerNorm::Tape ln_cell;
    Mat normed_cell = cell_norm_.forward(cell_proj_.forward(cell_sel), tape ? &ln_cell : nullptr);

    const bool gate_compact = normed.rows() < static_cast<Eigen::Index>(out_rows.size());
    Mat gate_pre;
    Mat gate_sig;
    if (gate_compact) {
      gate_pre = gate_.forward(normed);
      Rows tmp{sigmoid(gate_pre), x.index};
      gate_sig = tmp.gather(out_rows);
    } else {
      gate_pre = gate_.forward(Rows{normed, x.index}.gather(out_rows));
      gate_sig = sigmoid(gate_pre);
    }

    const Mat x_sel = x.gather(out_rows);
    Mat mid = (x_sel.array().rowwise() * gain_in_->values.row(0).array()).matrix();
    mid.array() += normed_cell.array() * gate_sig.array();

    LayerNorm::Tape ln_mid;
    GluMlp::Tape mlp_tape;
    Mat out = (mid.array().rowwise() * gain_mid_->values.row(0).array()).matrix();
    out += mlp_.forward(norm_mid_.forward(mid, tape ? &ln_mid : nullptr), tape ? &mlp_tape : nullptr, dropout_rng);

    Rows result;
    result.data = std::move(out);
    result.index.assign(static_cast<std::size_t>(n_rows), -1);
    for (std::size_t k = 0; k < out_rows.size(); ++k) result.index[static_cast<std::size_t>(out_rows[k])] = static_cast<int>(k);

    if (tape) {
      tape->input = x;
      tape->out_rows = out_rows;
      tape->norm_in = std::move(ln_in);
      tape->normed = std::move(normed);
      tape->gate_compact = gate_compact;
      tape->gate_pre = std::move(gate_pre);
      tape->cell_in = std::move(cell_in);
      if (std::holds_alternative<CmruCell>(cell_)) {
        tape->proj = std::move(proj);
        tape->pos = std::move(pos);
      }
      tape->cell = std::move(cell_tape);
      tape->cell_out_sel = std::move(cell_sel);
      tape->norm_cell = std::move(ln_cell);
      tape->normed_cell = std::move(normed_cell);
      tape->gate_sig = std::move(gate_sig);
      tape->mid = std::move(mid);
      tape->norm_mid = std::move(ln_mid);
      tape->mlp = std::move(mlp_tape);
    }
    return result;
  }

  // d_out: gradient at tape.out_rows. Returns the gradient for tape.input.data.
  Mat backward(const SequenceBatch& shape, const Tape& tape, const Mat& d_out, const ExecutionOptions& ex) {
    const int B = shape.batch(), T = shape.time();
    const Eigen::Index n_rows = static_cast<Eigen::Index>(B) * T;
    const auto& rows = tape.out_rows;

    // out = gain_mid * mid + MLP(Norm(mid))
    gain_mid_->grad.row(0) += (d_out.array() * tape.mid.array()).colwise().sum().matrix();
    Mat d_mid = (d_out.array().rowwise() * gain_mid_->values.row(0).array()).matrix();
    d_mid += norm_mid_.backward(tape.norm_mid, mlp_.backward(tape.mlp, d_out));

    // mid = gain_in * x + normed_cell * gate_sig
    Mat d_x = Mat::Zero(tape.input.data.rows(), tape.input.data.cols());
    const Mat x_sel = tape.input.gather(rows);
    gain_in_->grad.row(0) += (d_mid.array() * x_sel.array()).colwise().sum().matrix();
    scatter_add((d_mid.array().rowwise() * gain_in_->values.row(0).array()).matrix(), rows, tape.input.index, d_x);

    const Mat d_normed_cell = (d_mid.array() * tape.gate_sig.array()).matrix();
    const Mat d_gate_sel =
        (d_mid.array() * tape.normed_cell.array() * tape.gate_sig.array() * (1.0 - tape.gate_sig.array())).matrix();
    Mat d_normed = Mat::Zero(tape.normed.rows(), tape.normed.cols());
    if (tape.gate_compact) {
      Mat d_gate_pre = Mat::Zero(tape.gate_pre.rows(), tape.gate_pre.cols());
      scatter_add(d_gate_sel, rows, tape.input.index, d_gate_pre);
      d_normed += gate_.backward(tape.normed, d_gate_pre);
    } else {
      const Mat normed_sel = Rows{tape.normed, tape.input.index}.gather(rows);
      scatter_add(gate_.backward(normed_sel, d_gate_sel), rows, tape.input.index, d_normed);
    }

    const Mat d_cell_sel = cell_proj_.backward(tape.cell_out_sel, cell_norm_.backward(tape.norm_cell, d_normed_cell));
    Mat d_cell_out = Mat::Zero(n_rows, d_cell_sel.cols());
    for (std::size_t k = 0; k < rows.size(); ++k) d_cell_out.row(rows[k]) = d_cell_sel.row(static_cast<Eigen::Index>(k));

    Mat d_proj = Mat::Zero(tape.normed.rows(), m_);
    Mat d_time = Mat::Zero(T, m_);
    if (auto* cm = std::get_if<CmruCell>(&cell_)) {
      const auto& ct = std::get<CmruCell::Tape>(tape.cell);
      const Mat d_pre = cm->backward_pre(B, T, ct, d_cell_out, ex.gate_gradient, nullptr, ex.scan, ex.scan_options);
      const Eigen::Index k = d_pre.cols();
      Mat d_pre_rows = Mat::Zero(tape.normed.rows(), k);
      Mat d_pre_time = Mat::Zero(T, k);
      for (int b = 0; b < B; ++b)
        for (int t = 0; t < shape.lengths()[static_cast<std::size_t>(b)]; ++t) {
          const Eigen::Index r = shape.row(b, t);
          d_pre_rows.row(tape.input.index[static_cast<std::size_t>(r)]) += d_pre.row(r);
          d_pre_time.row(t) += d_pre.row(r);
        }
      Mat gw(k, m_);
      gw.noalias() = d_pre_rows.transpose() * tape.proj;
      gw.noalias() += d_pre_time.transpose() * tape.pos;
      cm->accumulate_input_grads(gw, d_pre.colwise().sum());
      const Mat w = cm->input_weight();
      d_proj.noalias() = d_pre_rows * w;
      d_time.noalias() = d_pre_time * w;
    } else {
      const Mat d_cell_in = std::visit(
          [&](auto& c) -> Mat {
            using C = std::decay_t<decltype(c)>;
            const auto& ct = std::get<typename C::Tape>(tape.cell);
            return c.backward(tape.cell_in, B, T, ct, d_cell_out, ex.gate_gradient, nullptr, ex.scan, ex.scan_options);
          },
          cell_);
      // cell_in = proj[index] + W_pos PE(t) + b on valid rows.
      for (int b = 0; b < B; ++b)
        for (int t = 0; t < shape.lengths()[static_cast<std::size_t>(b)]; ++t) {
          const Eigen::Index r = shape.row(b, t);
          d_proj.row(tape.input.index[static_cast<std::size_t>(r)]) += d_cell_in.row(r);
          d_time.row(t) += d_cell_in.row(r);
        }
    }
    position_.backward_position(d_time);
    d_normed += position_.backward_input(tape.normed, d_proj);
    d_x += norm_in_.backward(tape.norm_in, d_normed);
    return d_x;
  }

 private:
  int m_ = 0;
  LayerNorm norm_in_;
  ParamTensor* gain_in_ = nullptr;
  PositionalProjection position_;
  AnyCell cell_;
  Linear cell_proj_;
  LayerNorm cell_norm_;
  Linear gate_;
  LayerNorm norm_mid_;
  ParamTensor* gain_mid_ = nullptr;
  GluMlp mlp_;
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

class Model {
 public:
  struct Tape {
    Rows raw;
    Mat encoded_linear;
    GluMlp::Tape encoder_mlp;
    std::vector<ResidualBlock::Tape> blocks;
    Rows final;
    std::vector<Eigen::Index> pooled_rows;
    Mat pooled;
    Mat decoded_linear;
    GluMlp::Tape decoder_mlp;
  };

  Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), store_(std::make_unique<ParamStore>()) {
    cfg.validate();
    Rng rng(seed, 0x1417);
    const int m = cfg.model_dim;
    const int hidden = cfg.mlp_ratio * m;
    encoder_ = Linear(*store_, "encoder.linear", cfg.input_dim, m, rng);
    encoder_mlp_ = GluMlp(*store_, "encoder.mlp", m, hidden, rng, cfg.dropout);
    for (int k = 0; k < cfg.blocks; ++k) blocks_.emplace_back(*store_, "block" + std::to_string(k), cfg, rng);
    decoder_ = Linear(*store_, "decoder.linear", m, cfg.output_dim, rng);
    decoder_mlp_ = GluMlp(*store_, "decoder.mlp", cfg.output_dim, hidden, rng, cfg.dropout);
  }

  Model(Model&&) = default;
  Model& operator=(Model&&) = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return *store_; }
  const ParamStore& params() const { return *store_; }
  std::vector<ResidualBlock>& blocks() { return blocks_; }

  ExecutionOptions& execution() { return exec_; }
  const ExecutionOptions& execution() const { return exec_; }
  // Identical raw rows share the pointwise prefix. Off only for testing.
  bool& deduplicate_inputs() { return dedupe_; }

  double epsilon() const { return cfg_.epsilon; }
  void set_epsilon(double eps) {
    if (!cfg_.is_cmru_family()) throw std::invalid_argument("set_epsilon: not a CMRU-family model");
    for (auto& b : blocks_) std::get<CmruCell>(b.cell()).set_epsilon(eps);
    cfg_.epsilon = eps;
  }

  // Returns [batch x output_dim] for pooled models, [batch*time x output_dim]
  // (zero on padding) for pooling = none.
  Mat forward(const SequenceBatch& x, Tape* tape = nullptr, Rng* dropout_rng = nullptr) const {
    if (x.features() != cfg_.input_dim) throw std::invalid_argument("Model::forward: feature dimension mismatch");
    Rows raw;
    if (dedupe_) {
      std::vector<char> valid(static_cast<std::size_t>(x.rows()), 0);
      for (Eigen::Index r : valid_rows(x)) valid[static_cast<std::size_t>(r)] = 1;
      RowIndex ri = compact_rows(x.data(), valid);
      raw.data = std::move(ri.unique);
      raw.index = std::move(ri.of_row);
    } else {
      const auto rows = valid_rows(x);
      raw.index.assign(static_cast<std::size_t>(x.rows()), -1);
      raw.data.resize(static_cast<Eigen::Index>(rows.size()), x.features());
      for (std::size_t k = 0; k < rows.size(); ++k) {
        raw.index[static_cast<std::size_t>(rows[k])] = static_cast<int>(k);
        raw.data.row(static_cast<Eigen::Index>(k)) = x.data().row(rows[k]);
      }
    }

    Mat enc_lin = encoder_.forward(raw.data);
    GluMlp::Tape enc_tape;
    Rows h{enc_lin + encoder_mlp_.forward(enc_lin, tape ? &enc_tape : nullptr, dropout_rng), raw.index};

    const auto all = valid_rows(x);
    const auto tails = last_rows(x);
    std::vector<ResidualBlock::Tape> block_tapes(tape ? blocks_.size() : 0);
    for (std::size_t k = 0; k < blocks_.size(); ++k) {
      const bool last = k + 1 == blocks_.size();
      const auto& out_rows = last && cfg_.pooling == Pooling::last ? tails : all;
      h = blocks_[k].forward(x, h, out_rows, exec_, tape ? &block_tapes[k] : nullptr, dropout_rng);
    }

    Mat pooled;
    std::vector<Eigen::Index> pooled_rows;
    switch (cfg_.pooling) {
      case Pooling::last:
        pooled = h.gather(tails);
        pooled_rows = tails;
        break;
      case Pooling::mean:
        pooled = Mat::Zero(x.batch(), cfg_.model_dim);
        for (int b = 0; b < x.batch(); ++b) {
          const int len = x.lengths()[static_cast<std::size_t>(b)];
          for (int t = 0; t < len; ++t) pooled.row(b) += h.data.row(h.index[static_cast<std::size_t>(x.row(b, t))]);
          pooled.row(b) /= static_cast<double>(len);
        }
        break;
      case Pooling::none:
        pooled = h.gather(all);
        pooled_rows = all;
        break;
    }

    Mat dec_lin = decoder_.forward(pooled);
    GluMlp::Tape dec_tape;
    Mat out = dec_lin + decoder_mlp_.forward(dec_lin, tape ? &dec_tape : nullptr, dropout_rng);

    if (tape) {
      tape->raw = std::move(raw);
      tape->encoded_linear = std::move(enc_lin);
      tape->encoder_mlp = std::move(enc_tape);
      tape->blocks = std::move(block_tapes);
      tape->final = std::move(h);
      tape->pooled_rows = std::move(pooled_rows);
      tape->pooled = std::move(pooled);
      tape->decoded_linear = std::move(dec_lin);
      tape->decoder_mlp = std::move(dec_tape);
    }
    if (cfg_.pooling == Pooling::none) {
      Mat full = Mat::Zero(x.rows(), cfg_.output_dim);
      for (std::size_t k = 0; k < all.size(); ++k) full.row(all[k]) = out.row(static_cast<Eigen::Index>(k));
      return full;
    }
    return out;
  }

  // d_out has the shape forward returned. Accumulates into parameter grads.
  void backward(const SequenceBatch& x, const Tape& tape, const Mat& d_out) {
    if (tape.blocks.size() != blocks_.size()) throw std::invalid_argument("Model::backward: missing saved forward state");
    Mat d_dec = d_out;
    if (cfg_.pooling == Pooling::none) {
      d_dec.resize(static_cast<Eigen::Index>(tape.pooled_rows.size()), cfg_.output_dim);
      for (std::size_t k = 0; k < tape.pooled_rows.size(); ++k)
        d_dec.row(static_cast<Eigen::Index>(k)) = d_out.row(tape.pooled_rows[k]);
    }
    Mat d_lin = d_dec + decoder_mlp_.backward(tape.decoder_mlp, d_dec);
    const Mat d_pooled = decoder_.backward(tape.pooled, d_lin);

    Mat d_h = Mat::Zero(tape.final.data.rows(), tape.final.data.cols());
    if (cfg_.pooling == Pooling::mean) {
      for (int b = 0; b < x.batch(); ++b) {
        const int len = x.lengths()[static_cast<std::size_t>(b)];
        for (int t = 0; t < len; ++t)
          d_h.row(tape.final.index[static_cast<std::size_t>(x.row(b, t))]) += d_pooled.row(b) / static_cast<double>(len);
      }
    } else {
      scatter_add(d_pooled, tape.pooled_rows, tape.final.index, d_h);
    }

    for (std::size_t k = blocks_.size(); k-- > 0;) d_h = blocks_[k].backward(x, tape.blocks[k], d_h, exec_);

    Mat d_enc = d_h + encoder_mlp_.backward(tape.encoder_mlp, d_h);
    encoder_.accumulate(tape.raw.data, d_enc);
  }

 private:
  ModelConfig cfg_;
  std::unique_ptr<ParamStore> store_;
  Linear encoder_;
  GluMlp encoder_mlp_;
  std::vector<ResidualBlock> blocks_;
  Linear decoder_;
  GluMlp decoder_mlp_;
  ExecutionOptions exec_;
  bool dedupe_ = true;
};

// ---------------------------------------------------------------------------
// Checkpoints: "CMRUCKPT", u32 version, u64 header length, JSON header
// {"model": ..., "meta": ...}, u32 tensor count, then per tensor
// {u32 name length, name, u32 rank, u64 rows, u64 cols, f64[rows*cols]}.
// All integers and floats little-endian.
// ---------------------------------------------------------------------------

namespace io {

inline constexpr char kCheckpointMagic[8] = {'C', 'M', 'R', 'U', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
void put(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw std::runtime_error("unexpected end of file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, std::size_t limit = 1u << 20) {
  const auto n = get<std::uint32_t>(is);
  if (n > limit) throw std::runtime_error("string field too long");
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw std::runtime_error("unexpected end of file");
  return s;
}

}  // namespace io

inline void save_checkpoint(const std::string& path, const Model& model, const nlohmann::json& meta = nlohmann::json::object()) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  os.write(io::kCheckpointMagic, 8);
  io::put<std::uint32_t>(os, io::kCheckpointVersion);
  const std::string header = nlohmann::json{{"model", model.config()}, {"meta", meta}}.dump();
  io::put<std::uint64_t>(os, header.size());
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  const auto& tensors = model.params().tensors();
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    io::put_string(os, t.name);
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank));
    io::put<std::uint64_t>(os, static_cast<std::uint64_t>(t.values.rows()));
    io::put<std::uint64_t>(os, static_cast<std::uint64_t>(t.values.cols()));
    for (Eigen::Index i = 0; i < t.values.size(); ++i) io::put<double>(os, t.values.data()[i]);
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

struct LoadedCheckpoint {
  Model model;
  nlohmann::json meta;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, io::kCheckpointMagic, 8) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  const auto version = io::get<std::uint32_t>(is);
  if (version != io::kCheckpointVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  const auto header_len = io::get<std::uint64_t>(is);
  if (header_len > (1u << 24)) throw std::runtime_error("checkpoint header too large");
  std::string header(header_len, '\0');
  if (!is.read(header.data(), static_cast<std::streamsize>(header_len))) throw std::runtime_error("truncated checkpoint header");
  const auto j = nlohmann::json::parse(header);
  Model model(model_config_from_json(j.at("model")), 0);
  const auto count = io::get<std::uint32_t>(is);
  if (count != model.params().size()) throw std::runtime_error("checkpoint tensor count does not match the model");
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string name = io::get_string(is);
    ParamTensor* p = model.params().find(name);
    if (!p) throw std::runtime_error("checkpoint has unknown tensor " + name);
    const auto rank = io::get<std::uint32_t>(is);
    const auto rows = io::get<std::uint64_t>(is);
    const auto cols = io::get<std::uint64_t>(is);
    if (static_cast<int>(rank) != p->rank || static_cast<Eigen::Index>(rows) != p->values.rows() ||
        static_cast<Eigen::Index>(cols) != p->values.cols())
      throw std::runtime_error("checkpoint shape mismatch for " + name);
    for (Eigen::Index i = 0; i < p->values.size(); ++i) p->values.data()[i] = io::get<double>(is);
  }
  return {std::move(model), j.value("meta", nlohmann::json::object())};
}

}  // namespace cmru
