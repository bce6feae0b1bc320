// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The cmru Authors.
//
// Synthetic benchmarks, the quantization bound and an IDX (MNIST) reader.
// Synthetic samples are pure functions of (seed, split, index), so a split is
// never materialized; MNIST splits are held in memory.

#pragma once

#include "cmru/backbone.hpp"
#include "cmru/numerics.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace cmru {

enum class TaskKind { copy_first_discrete, copy_first_continuous, copy_first_noisy, parity, smnist, pmnist };
enum class TargetKind { classification, regression };
enum class Split { train = 0, validation = 1, test = 2 };

NLOHMANN_JSON_SERIALIZE_ENUM(TaskKind, {{TaskKind::copy_first_discrete, "copy_first_discrete"},
                                        {TaskKind::copy_first_continuous, "copy_first_continuous"},
                                        {TaskKind::copy_first_noisy, "copy_first_noisy"},
                                        {TaskKind::parity, "parity"},
                                        {TaskKind::smnist, "smnist"},
                                        {TaskKind::pmnist, "pmnist"}})

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "?";
}

inline constexpr int kCopyFirstClasses = 15;
inline constexpr int kMnistPixels = 784;

struct TaskSpec {
  TaskKind kind = TaskKind::copy_first_discrete;
  int length_min = 100;
  int length_max = 100;
  // Test-split length range; 0 means "same as training".
  int test_length_min = 0;
  int test_length_max = 0;
  int train_size = 10000;
  int validation_size = 2000;
  int test_size = 2000;
  std::uint64_t seed = 0;
  std::uint64_t noise_seed = 0;  // copy_first_noisy only: reseeds the distractors
  std::string data_dir;          // MNIST IDX files
  std::uint64_t permutation_seed = 0;

  bool is_mnist() const { return kind == TaskKind::smnist || kind == TaskKind::pmnist; }

  TargetKind target() const {
    return kind == TaskKind::copy_first_continuous || kind == TaskKind::copy_first_noisy ? TargetKind::regression
                                                                                           : TargetKind::classification;
  }

  int features() const { return kind == TaskKind::copy_first_discrete ? kCopyFirstClasses : 1; }

  int outputs() const {
    switch (kind) {
      case TaskKind::copy_first_discrete: return kCopyFirstClasses;
      case TaskKind::parity: return 2;
      case TaskKind::smnist:
      case TaskKind::pmnist: return 10;
      default: return 1;
    }
  }

  std::pair<int, int> lengths(Split s) const {
    if (is_mnist()) return {kMnistPixels, kMnistPixels};
    if (s == Split::test && test_length_min > 0) return {test_length_min, test_length_max};
    return {length_min, length_max};
  }

  int size(Split s) const {
    switch (s) {
      case Split::train: return train_size;
      case Split::validation: return validation_size;
      case Split::test: return test_size;
    }
    return 0;
  }

  void validate() const {
    if (!is_mnist()) {
      if (length_min < 2) throw ConfigError("task.length_min", "must be >= 2");
      if (length_max < length_min) throw ConfigError("task.length_max", "must be >= length_min");
      if (kind != TaskKind::parity && length_min != length_max)
        throw ConfigError("task.length_max", "copy-first tasks use a fixed length");
      if (test_length_min != 0 || test_length_max != 0) {
        if (test_length_min < 2) throw ConfigError("task.test_length_min", "must be >= 2");
        if (test_length_max < test_length_min) throw ConfigError("task.test_length_max", "must be >= test_length_min");
      }
    } else if (data_dir.empty()) {
      throw ConfigError("task.data_dir", "required for MNIST tasks");
    }
    if (train_size < 1) throw ConfigError("task.train_size", "must be >= 1");
    if (validation_size < 1) throw ConfigError("task.validation_size", "must be >= 1");
    if (test_size < 1) throw ConfigError("task.test_size", "must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const TaskSpec& t) {
  j = {{"kind", t.kind},
       {"length_min", t.length_min},
       {"length_max", t.length_max},
       {"test_length_min", t.test_length_min},
       {"test_length_max", t.test_length_max},
       {"train_size", t.train_size},
       {"validation_size", t.validation_size},
       {"test_size", t.test_size},
       {"seed", t.seed},
       {"noise_seed", t.noise_seed},
       {"data_dir", t.data_dir},
       {"permutation_seed", t.permutation_seed}};
}

inline TaskSpec task_spec_from_json(const nlohmann::json& j, const std::string& prefix = "task") {
  detail::reject_unknown(j, prefix,
                         {"kind", "length", "length_min", "length_max", "test_length_min", "test_length_max", "train_size",
                          "validation_size", "test_size", "seed", "noise_seed", "data_dir", "permutation_seed"});
  TaskSpec t;
  if (!j.contains("kind")) throw ConfigError(prefix + ".kind", "missing");
  t.kind = detail::parse_enum<TaskKind>(j["kind"], prefix + ".kind",
                                        {{TaskKind::copy_first_discrete, "copy_first_discrete"},
                                         {TaskKind::copy_first_continuous, "copy_first_continuous"},
                                         {TaskKind::copy_first_noisy, "copy_first_noisy"},
                                         {TaskKind::parity, "parity"},
                                         {TaskKind::smnist, "smnist"},
                                         {TaskKind::pmnist, "pmnist"}});
  if (t.kind == TaskKind::parity) {
    t.length_min = 50;
    t.length_max = 400;
    t.test_length_min = 50;
    t.test_length_max = 1000;
    t.validation_size = 2000;
    t.test_size = 10000;
  }
  if (t.is_mnist()) {
    t.train_size = 50000;
    t.validation_size = 10000;
    t.test_size = 10000;
  }
  if (j.contains("length")) {
    detail::read_opt(j, "length", prefix, t.length_min);
    t.length_max = t.length_min;
  }
  detail::read_opt(j, "length_min", prefix, t.length_min);
  detail::read_opt(j, "length_max", prefix, t.length_max);
  detail::read_opt(j, "test_length_min", prefix, t.test_length_min);
  detail::read_opt(j, "test_length_max", prefix, t.test_length_max);
  detail::read_opt(j, "train_size", prefix, t.train_size);
  detail::read_opt(j, "validation_size", prefix, t.validation_size);
  detail::read_opt(j, "test_size", prefix, t.test_size);
  detail::read_opt(j, "seed", prefix, t.seed);
  detail::read_opt(j, "noise_seed", prefix, t.noise_seed);
  detail::read_opt(j, "data_dir", prefix, t.data_dir);
  detail::read_opt(j, "permutation_seed", prefix, t.permutation_seed);
  t.validate();
  return t;
}

// ---------------------------------------------------------------------------
// Samples
// ---------------------------------------------------------------------------

struct Sample {
  Mat x;  // length x features
  double target = 0.0;
};

// Disjoint stream per split; one child stream per sample index.
inline Rng split_stream(std::uint64_t seed, Split s) { return Rng(seed, 0x7a5c0000ULL + static_cast<std::uint64_t>(s)); }

inline Sample gen_copy_first_discrete(int length, Rng& rng) {
  if (length < 2) throw std::invalid_argument("copy_first: length must be >= 2");
  Sample s;
  s.x = Mat::Zero(length, kCopyFirstClasses);
  const int label = static_cast<int>(rng.below(kCopyFirstClasses));
  s.x(0, label) = 1.0;
  s.target = label;
  return s;
}

// The target comes from `rng`, the distractors from `noise_rng`.
inline Sample gen_copy_first_continuous(int length, bool noisy, Rng& rng, Rng& noise_rng) {
  if (length < 2) throw std::invalid_argument("copy_first: length must be >= 2");
  Sample s;
  s.x = Mat::Zero(length, 1);
  s.target = rng.uniform(-1.0, 1.0);
  s.x(0, 0) = s.target;
  if (noisy)
    for (int t = 1; t < length; ++t) s.x(t, 0) = noise_rng.uniform(-1.0, 1.0);
  return s;
}

inline Sample gen_parity(int length_min, int length_max, Rng& rng) {
  if (length_min < 1 || length_max < length_min) throw std::invalid_argument("parity: need 1 <= L_min <= L_max");
  const int len = length_min + static_cast<int>(rng.below(static_cast<std::uint64_t>(length_max - length_min + 1)));
  Sample s;
  s.x = Mat::Zero(len, 1);
  int ones = 0;
  for (int t = 0; t < len; ++t) {
    const bool bit = rng.bernoulli(0.5);
    s.x(t, 0) = bit ? 1.0 : 0.0;
    ones += bit;
  }
  s.target = ones % 2;
  return s;
}

inline int parity_label(const std::vector<int>& bits) {
  int ones = 0;
  for (int b : bits) ones += b != 0;
  return ones % 2;
}

// E*_MAE for b bits on U(-1, 1): bins of width 2 / 2^b, error Delta / 4.
inline double quantization_limit(int bits) {
  if (bits <= 0) throw std::invalid_argument("quantization_limit: bits must be >= 1");
  return std::ldexp(1.0, -(bits + 1));
}

// Mean absolute error of the midpoint quantizer with 2^b bins on U(-1, 1).
inline double midpoint_quantizer_mae(int bits, std::size_t draws, Rng& rng) {
  if (bits <= 0 || draws == 0) throw std::invalid_argument("midpoint_quantizer_mae: need bits >= 1 and draws >= 1");
  const double bins = std::ldexp(1.0, bits);
  const double width = 2.0 / bins;
  double total = 0.0;
  for (std::size_t i = 0; i < draws; ++i) {
    const double x = rng.uniform(-1.0, 1.0);
    const double k = std::min(bins - 1.0, std::floor((x + 1.0) / width));
    total += std::abs(x - (-1.0 + (k + 0.5) * width));
  }
  return total / static_cast<double>(draws);
}

// ---------------------------------------------------------------------------
// IDX / MNIST
// ---------------------------------------------------------------------------

struct IdxImages {
  int count = 0;
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> pixels;
};

namespace detail {
inline std::uint32_t read_be32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("IDX: truncated header");
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}
}  // namespace detail

inline IdxImages read_idx_images(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("IDX: cannot open " + path);
  if (detail::read_be32(is) != 0x00000803) throw std::runtime_error("IDX: bad image magic in " + path);
  IdxImages im;
  im.count = static_cast<int>(detail::read_be32(is));
  im.rows = static_cast<int>(detail::read_be32(is));
  im.cols = static_cast<int>(detail::read_be32(is));
  im.pixels.resize(static_cast<std::size_t>(im.count) * im.rows * im.cols);
  if (!is.read(reinterpret_cast<char*>(im.pixels.data()), static_cast<std::streamsize>(im.pixels.size())))
    throw std::runtime_error("IDX: truncated image data in " + path);
  return im;
}

inline std::vector<std::uint8_t> read_idx_labels(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("IDX: cannot open " + path);
  if (detail::read_be32(is) != 0x00000801) throw std::runtime_error("IDX: bad label magic in " + path);
  std::vector<std::uint8_t> labels(detail::read_be32(is));
  if (!is.read(reinterpret_cast<char*>(labels.data()), static_cast<std::streamsize>(labels.size())))
    throw std::runtime_error("IDX: truncated label data in " + path);
  return labels;
}

// Fisher-Yates permutation of 0..n-1.
inline std::vector<int> fixed_permutation(int n, std::uint64_t seed) {
  std::vector<int> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), 0);
  Rng rng(seed, 0x9e77);
  for (int i = n - 1; i > 0; --i) std::swap(p[static_cast<std::size_t>(i)], p[rng.below(static_cast<std::uint64_t>(i + 1))]);
  return p;
}

struct MnistSplits {
  std::vector<Sample> train, validation, test;
};

// Pixels / 255 in raster order (or permuted); the last `holdout` training
// images become the validation split.
inline MnistSplits load_smnist(const std::string& dir, std::optional<std::uint64_t> permutation_seed, int holdout = 10000) {
  namespace fs = std::filesystem;
  auto find = [&](std::initializer_list<const char*> names) {
    for (const char* n : names)
      if (fs::exists(fs::path(dir) / n)) return (fs::path(dir) / n).string();
    throw std::runtime_error("MNIST: missing file " + std::string(*names.begin()) + " in " + dir);
  };
  const auto train_im = read_idx_images(find({"train-images-idx3-ubyte", "train-images.idx3-ubyte"}));
  const auto train_lb = read_idx_labels(find({"train-labels-idx1-ubyte", "train-labels.idx1-ubyte"}));
  const auto test_im = read_idx_images(find({"t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"}));
  const auto test_lb = read_idx_labels(find({"t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"}));
  if (train_im.count != static_cast<int>(train_lb.size()) || test_im.count != static_cast<int>(test_lb.size()))
    throw std::runtime_error("MNIST: image and label counts differ");
  const int pixels = train_im.rows * train_im.cols;
  if (test_im.rows * test_im.cols != pixels) throw std::runtime_error("MNIST: image sizes differ");
  if (holdout < 0 || holdout >= train_im.count) throw std::runtime_error("MNIST: invalid validation holdout");
  std::vector<int> order(static_cast<std::size_t>(pixels));
  std::iota(order.begin(), order.end(), 0);
  if (permutation_seed) order = fixed_permutation(pixels, *permutation_seed);

  auto convert = [&](const IdxImages& im, const std::vector<std::uint8_t>& lb, int i) {
    Sample s;
    s.x.resize(pixels, 1);
    const std::size_t base = static_cast<std::size_t>(i) * pixels;
    for (int t = 0; t < pixels; ++t) s.x(t, 0) = im.pixels[base + static_cast<std::size_t>(order[static_cast<std::size_t>(t)])] / 255.0;
    s.target = lb[static_cast<std::size_t>(i)];
    return s;
  };
  MnistSplits out;
  const int keep = train_im.count - holdout;
  for (int i = 0; i < train_im.count; ++i) (i < keep ? out.train : out.validation).push_back(convert(train_im, train_lb, i));
  for (int i = 0; i < test_im.count; ++i) out.test.push_back(convert(test_im, test_lb, i));
  return out;
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

class Dataset {
 public:
  Dataset(const TaskSpec& spec, Split split) : spec_(spec), split_(split), stream_(split_stream(spec.seed, split)) {
    spec.validate();
    size_ = spec.size(split);
  }

  // In-memory dataset (MNIST, or loaded from a container file).
  Dataset(const TaskSpec& spec, Split split, std::vector<Sample> samples)
      : spec_(spec), split_(split), stream_(split_stream(spec.seed, split)), stored_(std::move(samples)) {
    size_ = static_cast<int>(stored_.size());
  }

  const TaskSpec& spec() const { return spec_; }
  Split split() const { return split_; }
  int size() const { return size_; }
  const Rng& stream() const { return stream_; }

  Sample get(int i) const {
    if (i < 0 || i >= size_) throw std::out_of_range("Dataset::get: index out of range");
    if (!stored_.empty()) return stored_[static_cast<std::size_t>(i)];
    Rng rng = stream_.split(static_cast<std::uint64_t>(i));
    const auto [lo, hi] = spec_.lengths(split_);
    switch (spec_.kind) {
      case TaskKind::copy_first_discrete: return gen_copy_first_discrete(lo, rng);
      case TaskKind::copy_first_continuous:
      case TaskKind::copy_first_noisy: {
        Rng noise = Rng(spec_.seed ^ splitmix64(spec_.noise_seed + 1), stream_.stream()).split(static_cast<std::uint64_t>(i));
        return gen_copy_first_continuous(lo, spec_.kind == TaskKind::copy_first_noisy, rng, noise);
      }
      case TaskKind::parity: return gen_parity(lo, hi, rng);
      default: throw std::logic_error("Dataset: MNIST samples must be loaded");
    }
  }

  // Pads to the longest sample; padding stays zero.
  SequenceBatch batch(std::span<const int> indices, std::vector<double>& targets) const {
    std::vector<Sample> samples;
    samples.reserve(indices.size());
    int T = 1;
    for (int i : indices) {
      samples.push_back(get(i));
      T = std::max(T, static_cast<int>(samples.back().x.rows()));
    }
    SequenceBatch sb(static_cast<int>(indices.size()), T, spec_.features());
    targets.resize(indices.size());
    for (std::size_t b = 0; b < samples.size(); ++b) {
      const int len = static_cast<int>(samples[b].x.rows());
      sb.set_length(static_cast<int>(b), len);
      sb.data().middleRows(sb.row(static_cast<int>(b), 0), len) = samples[b].x;
      targets[b] = samples[b].target;
    }
    sb.validate();
    return sb;
  }

 private:
  TaskSpec spec_;
  Split split_;
  Rng stream_;
  std::vector<Sample> stored_;
  int size_ = 0;
};

struct TaskData {
  Dataset train, validation, test;
};

inline TaskData make_task_data(const TaskSpec& spec) {
  spec.validate();
  if (spec.is_mnist()) {
    auto s = load_smnist(spec.data_dir, spec.kind == TaskKind::pmnist ? std::optional<std::uint64_t>(spec.permutation_seed)
                                                                      : std::nullopt,
                         spec.validation_size);
    return {Dataset(spec, Split::train, std::move(s.train)), Dataset(spec, Split::validation, std::move(s.validation)),
            Dataset(spec, Split::test, std::move(s.test))};
  }
  return {Dataset(spec, Split::train), Dataset(spec, Split::validation), Dataset(spec, Split::test)};
}

// ---------------------------------------------------------------------------
// Dataset container: "CMRUDATA", u32 version, u32 kind, u32 L_min, u32 L_max,
// u64 count, u64 seed, u32 features, u32 target kind, then per sample
// {u32 length, f64 target, f64[length * features]}. Little-endian.
// ---------------------------------------------------------------------------

inline constexpr char kDatasetMagic[8] = {'C', 'M', 'R', 'U', 'D', 'A', 'T', 'A'};
inline constexpr std::uint32_t kDatasetVersion = 1;

struct DatasetHeader {
  std::uint32_t version = kDatasetVersion;
  TaskKind kind = TaskKind::copy_first_discrete;
  std::uint32_t length_min = 0;
  std::uint32_t length_max = 0;
  std::uint64_t count = 0;
  std::uint64_t seed = 0;
  std::uint32_t features = 0;
  TargetKind target = TargetKind::classification;

  bool operator==(const DatasetHeader&) const = default;
};

inline DatasetHeader write_dataset(const std::string& path, const Dataset& data, int count) {
  if (count <= 0) throw std::invalid_argument("write_dataset: count must be >= 1");
  if (count > data.size()) throw std::invalid_argument("write_dataset: count exceeds the split size");
  const auto [lo, hi] = data.spec().lengths(data.split());
  DatasetHeader h;
  h.kind = data.spec().kind;
  h.length_min = static_cast<std::uint32_t>(lo);
  h.length_max = static_cast<std::uint32_t>(hi);
  h.count = static_cast<std::uint64_t>(count);
  h.seed = data.spec().seed;
  h.features = static_cast<std::uint32_t>(data.spec().features());
  h.target = data.spec().target();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os.write(kDatasetMagic, 8);
  io::put<std::uint32_t>(os, h.version);
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(h.kind));
  io::put<std::uint32_t>(os, h.length_min);
  io::put<std::uint32_t>(os, h.length_max);
  io::put<std::uint64_t>(os, h.count);
  io::put<std::uint64_t>(os, h.seed);
  io::put<std::uint32_t>(os, h.features);
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(h.target));
  for (int i = 0; i < count; ++i) {
    const Sample s = data.get(i);
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(s.x.rows()));
    io::put<double>(os, s.target);
    for (Eigen::Index k = 0; k < s.x.size(); ++k) io::put<double>(os, s.x.data()[k]);
  }
  if (!os) throw std::runtime_error("write failed: " + path);
  return h;
}

struct DatasetFile {
  DatasetHeader header;
  std::vector<Sample> samples;
};

inline DatasetFile read_dataset(const std::string& path, bool header_only = false) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open dataset: " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kDatasetMagic, 8) != 0) throw std::runtime_error("not a dataset file: " + path);
  DatasetFile f;
  f.header.version = io::get<std::uint32_t>(is);
  if (f.header.version != kDatasetVersion) throw std::runtime_error("unsupported dataset version");
  const auto kind = io::get<std::uint32_t>(is);
  if (kind > static_cast<std::uint32_t>(TaskKind::pmnist)) throw std::runtime_error("dataset: unknown task kind");
  f.header.kind = static_cast<TaskKind>(kind);
  f.header.length_min = io::get<std::uint32_t>(is);
  f.header.length_max = io::get<std::uint32_t>(is);
  f.header.count = io::get<std::uint64_t>(is);
  f.header.seed = io::get<std::uint64_t>(is);
  f.header.features = io::get<std::uint32_t>(is);
  f.header.target = static_cast<TargetKind>(io::get<std::uint32_t>(is));
  if (header_only) return f;
  for (std::uint64_t i = 0; i < f.header.count; ++i) {
    Sample s;
    const auto len = io::get<std::uint32_t>(is);
    if (len < 1 || len > f.header.length_max) throw std::runtime_error("dataset: sample length out of range");
    s.target = io::get<double>(is);
    s.x.resize(len, f.header.features);
    for (Eigen::Index k = 0; k < s.x.size(); ++k) s.x.data()[k] = io::get<double>(is);
    f.samples.push_back(std::move(s));
  }
  return f;
}

}  // namespace cmru
