#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "scei/common.hpp"
#include "scei/model.hpp"

namespace scei {

struct LabeledDataset {
  Matrix features;  // examples x input_dim
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t input_dim() const noexcept { return std::size_t(features.cols()); }
  bool empty() const noexcept { return labels.empty(); }

  Examples examples() const { return Examples{features, labels}; }

  LabeledDataset subset(std::span<const std::size_t> indices) const {
    LabeledDataset out;
    out.num_classes = num_classes;
    out.features.resize(Eigen::Index(indices.size()), features.cols());
    out.labels.resize(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      out.features.row(Eigen::Index(i)) = features.row(Eigen::Index(indices[i]));
      out.labels[i] = labels[indices[i]];
    }
    return out;
  }

  void append(const LabeledDataset& other) {
    if (other.empty()) return;
    if (!empty() && other.features.cols() != features.cols())
      throw InvalidInput("cannot append datasets of different input dimension");
    const Eigen::Index old = features.rows();
    Matrix merged(old + other.features.rows(), other.features.cols());
    if (old > 0) merged.topRows(old) = features;
    merged.bottomRows(other.features.rows()) = other.features;
    features = std::move(merged);
    labels.insert(labels.end(), other.labels.begin(), other.labels.end());
    num_classes = std::max(num_classes, other.num_classes);
  }
};

// ---------------------------------------------------------------------------
// MNIST IDX
// ---------------------------------------------------------------------------

enum class LoadErrc { kOpenFailed, kWrongMagic, kTruncated, kCountMismatch };

class LoadError : public Error {
 public:
  LoadError(LoadErrc code, const std::string& what) : Error(what), code_(code) {}
  LoadErrc code() const noexcept { return code_; }

 private:
  LoadErrc code_;
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError(LoadErrc::kOpenFailed, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& buf, std::size_t off,
                               const std::string& path) {
  if (buf.size() < off + 4)
    throw LoadError(LoadErrc::kTruncated, path + ": truncated header");
  return (std::uint32_t(buf[off]) << 24) | (std::uint32_t(buf[off + 1]) << 16) |
         (std::uint32_t(buf[off + 2]) << 8) | std::uint32_t(buf[off + 3]);
}

}  // namespace detail

// Loads an IDX3 image file and its IDX1 label file. Pixels are scaled to [0,1].
inline LabeledDataset load_mnist_idx(const std::string& images_path,
                                     const std::string& labels_path) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);

  if (auto m = detail::read_be32(img, 0, images_path); m != kIdxImagesMagic)
    throw LoadError(LoadErrc::kWrongMagic, images_path + ": wrong magic");
  if (auto m = detail::read_be32(lab, 0, labels_path); m != kIdxLabelsMagic)
    throw LoadError(LoadErrc::kWrongMagic, labels_path + ": wrong magic");

  const std::size_t n_img = detail::read_be32(img, 4, images_path);
  const std::size_t rows = detail::read_be32(img, 8, images_path);
  const std::size_t cols = detail::read_be32(img, 12, images_path);
  const std::size_t n_lab = detail::read_be32(lab, 4, labels_path);
  if (n_img != n_lab)
    throw LoadError(LoadErrc::kCountMismatch,
                    "image count " + std::to_string(n_img) + " != label count " +
                        std::to_string(n_lab));

  const std::size_t dim = rows * cols;
  if (img.size() < 16 + n_img * dim)
    throw LoadError(LoadErrc::kTruncated, images_path + ": truncated pixel data");
  if (lab.size() < 8 + n_lab)
    throw LoadError(LoadErrc::kTruncated, labels_path + ": truncated label data");

  LabeledDataset ds;
  ds.features.resize(Eigen::Index(n_img), Eigen::Index(dim));
  ds.labels.resize(n_img);
  int max_label = -1;
  for (std::size_t i = 0; i < n_img; ++i) {
    const std::uint8_t* px = img.data() + 16 + i * dim;
    for (std::size_t j = 0; j < dim; ++j)
      ds.features(Eigen::Index(i), Eigen::Index(j)) = px[j] / 255.0;
    ds.labels[i] = lab[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_classes = std::size_t(max_label + 1);
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic Gaussian classes
// ---------------------------------------------------------------------------

// Class c ~ N(separation * u_c, I) where u_c is a seeded random unit vector.
// Examples are emitted class by class.
inline LabeledDataset generate_synthetic(std::size_t num_classes, std::size_t per_class,
                                         std::size_t input_dim, double separation,
                                         std::uint64_t seed) {
  if (num_classes < 1 || per_class < 1 || input_dim < 1)
    throw InvalidInput("synthetic dataset counts must be >= 1");
  if (!(separation >= 0.0)) throw InvalidInput("separation must be non-negative");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  Matrix centers(static_cast<Eigen::Index>(num_classes), static_cast<Eigen::Index>(input_dim));
  for (Eigen::Index c = 0; c < centers.rows(); ++c) {
    double norm = 0.0;
    do {
      for (Eigen::Index j = 0; j < centers.cols(); ++j) centers(c, j) = normal(rng);
      norm = centers.row(c).norm();
    } while (norm == 0.0);
    centers.row(c) *= separation / norm;
  }

  LabeledDataset ds;
  ds.num_classes = num_classes;
  ds.features.resize(Eigen::Index(num_classes * per_class), Eigen::Index(input_dim));
  ds.labels.resize(num_classes * per_class);
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      const auto row = Eigen::Index(c * per_class + i);
      for (Eigen::Index j = 0; j < ds.features.cols(); ++j)
        ds.features(row, j) = centers(Eigen::Index(c), j) + normal(rng);
      ds.labels[std::size_t(row)] = int(c);
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Non-iid partitioning and skew
// ---------------------------------------------------------------------------

struct PartitionSpec {
  std::size_t num_nodes = 10;
  std::size_t samples_per_node = 600;
  std::size_t labels_per_node = 4;
  double skew_ratio = 0.0;
  std::uint64_t rng_seed = 0;
  double test_fraction = 0.2;

  void validate() const {
    if (num_nodes < 1) throw InvalidInput("partition needs at least one node");
    if (labels_per_node < 1 || samples_per_node < labels_per_node)
      throw InvalidInput("samples_per_node must be >= labels_per_node >= 1");
    if (samples_per_node % labels_per_node != 0)
      throw InvalidInput("samples_per_node must be divisible by labels_per_node");
    if (!(skew_ratio >= 0.0 && skew_ratio < 0.25))
      throw InvalidInput("skew_ratio must lie in [0, 0.25)");
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
      throw InvalidInput("test_fraction must lie in (0, 1)");
  }
};

class PartitionError : public Error {
 public:
  PartitionError(int label, const std::string& what) : Error(what), label_(label) {}
  int label() const noexcept { return label_; }

 private:
  int label_;
};

class SkewError : public Error {
 public:
  using Error::Error;
};

struct NodeDataSplit {
  LabeledDataset train;
  LabeledDataset test;
  std::set<int> assigned_labels;
  std::vector<std::size_t> base_indices;  // into the source dataset
  std::size_t base_test_size = 0;
  std::size_t skew_count = 0;
};

// Each node draws `labels_per_node` distinct labels, then an equal share of
// examples per label from a global without-replacement pool, then a seeded
// train/test split.
inline std::vector<NodeDataSplit> partition_non_iid(const LabeledDataset& ds,
                                                    const PartitionSpec& spec) {
  spec.validate();
  if (spec.labels_per_node > ds.num_classes)
    throw InvalidInput("labels_per_node exceeds the number of classes");

  std::mt19937_64 rng(spec.rng_seed);

  std::vector<std::vector<std::size_t>> pools(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) pools[std::size_t(ds.labels[i])].push_back(i);
  for (auto& pool : pools) std::shuffle(pool.begin(), pool.end(), rng);
  std::vector<std::size_t> cursor(ds.num_classes, 0);

  const std::size_t per_label = spec.samples_per_node / spec.labels_per_node;
  std::vector<int> classes(ds.num_classes);
  std::iota(classes.begin(), classes.end(), 0);

  std::vector<NodeDataSplit> out;
  out.reserve(spec.num_nodes);
  for (std::size_t k = 0; k < spec.num_nodes; ++k) {
    std::shuffle(classes.begin(), classes.end(), rng);
    NodeDataSplit split;
    split.assigned_labels.insert(classes.begin(),
                                 classes.begin() + std::ptrdiff_t(spec.labels_per_node));
    for (int label : split.assigned_labels) {
      auto& pool = pools[std::size_t(label)];
      auto& cur = cursor[std::size_t(label)];
      if (pool.size() - cur < per_label)
        throw PartitionError(label, "insufficient examples of label " +
                                        std::to_string(label) + " for node " +
                                        std::to_string(k));
      split.base_indices.insert(split.base_indices.end(), pool.begin() + std::ptrdiff_t(cur),
                                pool.begin() + std::ptrdiff_t(cur + per_label));
      cur += per_label;
    }

    std::vector<std::size_t> perm = split.base_indices;
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto n = perm.size();
    const auto n_test = std::size_t(std::llround(spec.test_fraction * double(n)));
    const auto n_train = n - n_test;
    split.train = ds.subset(std::span(perm).first(n_train));
    split.test = ds.subset(std::span(perm).subspan(n_train));
    split.base_test_size = n_test;
    out.push_back(std::move(split));
  }
  return out;
}

// Number of out-of-distribution examples that makes them `ratio` of the
// combined test set.
inline std::size_t skew_example_count(double ratio, std::size_t base_test_size) {
  if (ratio <= 0.0) return 0;
  const double exact = ratio * double(base_test_size) / (1.0 - ratio);
  return std::size_t(std::ceil(exact - 1e-9));
}

// Appends examples of non-assigned labels to each node's test set. Skew
// examples come from examples not used by any node's base data.
inline std::vector<NodeDataSplit> inject_skew(std::vector<NodeDataSplit> splits,
                                              const LabeledDataset& ds,
                                              const PartitionSpec& spec) {
  spec.validate();
  if (spec.skew_ratio == 0.0) return splits;

  std::vector<bool> used(ds.size(), false);
  for (const auto& s : splits)
    for (auto i : s.base_indices) used[i] = true;

  std::mt19937_64 rng(derive_seed(spec.rng_seed, {tag(SeedPurpose::kPartition)}));
  for (std::size_t k = 0; k < splits.size(); ++k) {
    auto& s = splits[k];
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (!used[i] && !s.assigned_labels.contains(ds.labels[i])) candidates.push_back(i);

    const std::size_t need = skew_example_count(spec.skew_ratio, s.base_test_size);
    if (candidates.size() < need)
      throw SkewError("node " + std::to_string(k) + " needs " + std::to_string(need) +
                      " out-of-distribution examples, only " +
                      std::to_string(candidates.size()) + " available");
    std::shuffle(candidates.begin(), candidates.end(), rng);
    candidates.resize(need);
    std::sort(candidates.begin(), candidates.end());
    for (auto i : candidates) used[i] = true;
    s.test.append(ds.subset(candidates));
    s.skew_count = need;
  }
  return splits;
}

}  // namespace scei
